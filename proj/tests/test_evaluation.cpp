#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <twinforge/evaluation.hpp>

#include "helpers.hpp"

using namespace twinforge;
using namespace twinforge::evaluation;

namespace {

LabelledPrediction make(int true_class, int best, double conf) {
  LabelledPrediction lp;
  lp.true_class = true_class;
  lp.pred.best_class = best;
  lp.pred.confidence = conf;
  return lp;
}

// A reproducible population whose confidences spread across [0,1] so the
// sweep has real structure: correct attributions lean confident, wrong ones
// lean diffident, with overlap.
std::vector<LabelledPrediction> noisy_population(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<LabelledPrediction> preds;
  preds.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int truth = static_cast<int>(i % 4);
    const bool correct = u(rng) < 0.85;
    const int best = correct ? truth : (truth + 1 + static_cast<int>(u(rng) * 3)) % 4;
    const double conf = correct ? 0.4 + 0.6 * u(rng) : 0.25 + 0.55 * u(rng);
    preds.push_back(make(truth, best, conf));
  }
  return preds;
}

}  // namespace

// ---------------------------------------------------------------- confusion

TEST_CASE("the confusion matrix sorts the four quadrants correctly") {
  std::vector<LabelledPrediction> preds = {
      make(0, 0, 0.9),   // correct, confident     -> tp
      make(1, 1, 0.3),   // correct, rejected      -> fn
      make(2, 0, 0.8),   // wrong, confident       -> fp
      make(3, 1, 0.2),   // wrong, rejected        -> tn
      make(0, 0, 0.5),   // exactly at tau         -> accepted, tp
  };
  auto c = confusion_with_tau(preds, 0.5);
  REQUIRE(c.tp == 2);
  REQUIRE(c.fn == 1);
  REQUIRE(c.fp == 1);
  REQUIRE(c.tn == 1);
  REQUIRE(c.total() == 5);
  REQUIRE(c.accuracy() == Catch::Approx(3.0 / 5.0));
  REQUIRE(c.rejection_rate() == Catch::Approx(2.0 / 5.0));
  REQUIRE(c.frr().has_value());
  REQUIRE(*c.frr() == Catch::Approx(1.0 / 3.0));
}

TEST_CASE("the reference confusion counts give the documented accuracy") {
  TauConfusion c;
  c.tp = 513;
  c.tn = 3;
  c.fp = 6;
  c.fn = 6;
  REQUIRE(c.total() == 528);
  REQUIRE(c.accuracy() == 516.0 / 528.0);
  REQUIRE(std::round(c.accuracy() * 10000.0) / 100.0 == 97.73);
  REQUIRE(*c.frr() == 6.0 / 519.0);
  REQUIRE(c.rejection_rate() == 9.0 / 528.0);
  auto j = c.to_json();
  REQUIRE(j.at("tp").get<long>() == 513);
  REQUIRE(j.at("accuracy").get<double>() == c.accuracy());
}

TEST_CASE("frr is absent when nothing was correctly attributed") {
  std::vector<LabelledPrediction> preds = {make(0, 1, 0.9), make(1, 0, 0.1)};
  auto c = confusion_with_tau(preds, 0.5);
  REQUIRE(c.tp + c.fn == 0);
  REQUIRE_FALSE(c.frr().has_value());
  REQUIRE(c.to_json().at("frr").is_null());
}

TEST_CASE("confusion scoring validates its inputs") {
  REQUIRE_THROWS_AS(confusion_with_tau({}, 0.5), ArgumentError);
  REQUIRE_THROWS_AS(confusion_with_tau({make(0, 0, 0.9)}, 1.5), ArgumentError);
  REQUIRE_THROWS_AS(confusion_with_tau({make(0, 0, 0.9)}, -0.1), ArgumentError);
}

// ---------------------------------------------------------------- per class

TEST_CASE("per-class soundness and completeness match hand counts") {
  // class 0: 3 samples, 2 correct; one class-1 sample misattributed to 0
  // class 1: 2 samples, 1 correct; one class-0 sample misattributed to 1
  // class 2: 1 sample, 1 correct; nothing misattributed to 2
  std::vector<LabelledPrediction> preds = {
      make(0, 0, 1.0), make(0, 0, 1.0), make(0, 1, 1.0),
      make(1, 1, 1.0), make(1, 0, 1.0),
      make(2, 2, 1.0),
  };
  auto reports = per_class_reports(preds, 3);
  REQUIRE(reports.size() == 3);
  REQUIRE(*reports[0].soundness == Catch::Approx(2.0 / 3.0));
  REQUIRE(reports[0].completeness == Catch::Approx(1.0 - 1.0 / 3.0));
  REQUIRE(*reports[1].soundness == Catch::Approx(0.5));
  REQUIRE(reports[1].completeness == Catch::Approx(1.0 - 1.0 / 4.0));
  REQUIRE(*reports[2].soundness == 1.0);
  REQUIRE(reports[2].completeness == 1.0);
}

TEST_CASE("unsampled classes report no soundness") {
  std::vector<LabelledPrediction> preds = {make(0, 0, 1.0), make(1, 2, 1.0)};
  auto reports = per_class_reports(preds, 3);
  REQUIRE_FALSE(reports[2].soundness.has_value());
  REQUIRE(reports[2].completeness == Catch::Approx(1.0 - 1.0 / 2.0));
  REQUIRE(reports[2].to_json().at("soundness").is_null());
}

TEST_CASE("per-class scoring range-checks the labels") {
  REQUIRE_THROWS_AS(per_class_reports({make(3, 0, 1.0)}, 3), ArgumentError);
  REQUIRE_THROWS_AS(per_class_reports({make(0, 3, 1.0)}, 3), ArgumentError);
  REQUIRE_THROWS_AS(per_class_reports({}, 3), ArgumentError);
}

// ---------------------------------------------------------------- sweeps

TEST_CASE("raising the threshold only moves mass toward rejection") {
  auto preds = noisy_population(400, 17);
  auto sweep = sweep_tau(preds, uniform_grid(0.01));
  REQUIRE(sweep.curve.size() == 101);
  for (std::size_t i = 1; i < sweep.curve.size(); ++i) {
    REQUIRE(sweep.curve[i].fp <= sweep.curve[i - 1].fp);
    REQUIRE(sweep.curve[i].tp <= sweep.curve[i - 1].tp);
    REQUIRE(sweep.curve[i].fn >= sweep.curve[i - 1].fn);
    REQUIRE(sweep.curve[i].tn >= sweep.curve[i - 1].tn);
  }
  for (const auto& c : sweep.curve) REQUIRE(c.total() == 400);
}

TEST_CASE("ties in the sweep resolve to the smaller threshold") {
  // One correct@0.9 and one wrong@0.1: every tau in (0.1, 0.9] scores 2.
  std::vector<LabelledPrediction> preds = {make(0, 0, 0.9), make(1, 0, 0.1)};
  auto sweep = sweep_tau(preds, {0.0, 0.2, 0.5, 0.8, 1.0});
  REQUIRE(sweep.optimal_tau == 0.2);
}

TEST_CASE("a coarse sweep lands within one step of the fine optimum") {
  auto preds = noisy_population(600, 23);
  auto coarse = sweep_tau(preds, uniform_grid(0.01));

  long best_fine = -1;
  double fine_tau = 0.0;
  for (const auto& c : sweep_tau(preds, uniform_grid(0.001)).curve)
    if (c.tp + c.tn > best_fine) {
      best_fine = c.tp + c.tn;
      fine_tau = c.tau;
    }
  REQUIRE(std::abs(coarse.optimal_tau - fine_tau) <= 0.01 + 1e-12);

  long best_coarse = -1;
  for (const auto& c : coarse.curve) best_coarse = std::max(best_coarse, c.tp + c.tn);
  REQUIRE(best_coarse >= best_fine - 2);  // a 0.01 grid can straddle at most a sliver
}

TEST_CASE("threshold grids are validated") {
  auto preds = noisy_population(10, 1);
  REQUIRE_THROWS_AS(sweep_tau(preds, {}), ArgumentError);
  REQUIRE_THROWS_AS(sweep_tau(preds, {0.5, 0.4}), ArgumentError);
  REQUIRE_THROWS_AS(sweep_tau(preds, {0.5, 0.5}), ArgumentError);
  REQUIRE_THROWS_AS(sweep_tau(preds, {-0.1, 0.5}), ArgumentError);
  REQUIRE_THROWS_AS(uniform_grid(0.0), ArgumentError);
  REQUIRE_THROWS_AS(uniform_grid(1.5), ArgumentError);
  auto grid = uniform_grid(0.25);
  REQUIRE(grid == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
}

// ---------------------------------------------------------------- reporting

TEST_CASE("the evaluation report carries confusion, classes and sweep") {
  auto preds = noisy_population(100, 31);
  auto j = evaluation_report(preds, 0.695, 4, 0.1);
  REQUIRE(j.at("confusion").at("tau").get<double>() == 0.695);
  REQUIRE(j.at("per_class").size() == 4);
  REQUIRE(j.at("sweep").at("curve").size() == 11);
  const double opt = j.at("sweep").at("optimal_tau").get<double>();
  REQUIRE(opt >= 0.0);
  REQUIRE(opt <= 1.0);
}

TEST_CASE("the sweep curve exports to csv") {
  auto dir = testutil::make_temp_dir("curve");
  auto preds = noisy_population(50, 37);
  auto sweep = sweep_tau(preds, uniform_grid(0.5));
  write_curve_csv(dir / "curve.csv", sweep);
  std::ifstream is(dir / "curve.csv");
  std::string header;
  std::getline(is, header);
  REQUIRE(header == "tau,tp,tn,fp,fn,accuracy,frr,rejection_rate");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  REQUIRE(rows == 3);
  std::filesystem::remove_all(dir);
}
