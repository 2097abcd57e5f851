#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "models.hpp"

// Threshold-aware evaluation: the confusion matrix treats a confident correct
// attribution as TP, a rejected correct attribution as FN, a confident wrong
// attribution as FP and a rejected wrong attribution as TN.

namespace twinforge::evaluation {

using nlohmann::json;

struct LabelledPrediction {
  int true_class = 0;
  models::Prediction pred;
};

struct TauConfusion {
  long tp = 0, tn = 0, fp = 0, fn = 0;
  double tau = 0.0;

  long total() const { return tp + tn + fp + fn; }
  double accuracy() const { return total() ? static_cast<double>(tp + tn) / total() : 0.0; }
  double rejection_rate() const { return total() ? static_cast<double>(fn + tn) / total() : 0.0; }

  // False rejection rate over the correctly-attributed population.
  std::optional<double> frr() const {
    if (tp + fn == 0) return std::nullopt;
    return static_cast<double>(fn) / static_cast<double>(tp + fn);
  }

  json to_json() const {
    json j{{"tau", tau},       {"tp", tp},
           {"tn", tn},         {"fp", fp},
           {"fn", fn},         {"total", total()},
           {"accuracy", accuracy()}, {"rejection_rate", rejection_rate()}};
    if (auto f = frr()) j["frr"] = *f;
    else j["frr"] = nullptr;
    return j;
  }
};

inline TauConfusion confusion_with_tau(const std::vector<LabelledPrediction>& preds, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ArgumentError("tau must lie in [0,1]");
  if (preds.empty()) throw ArgumentError("no predictions to score");
  TauConfusion c;
  c.tau = tau;
  for (const auto& lp : preds) {
    const bool correct = lp.pred.best_class == lp.true_class;
    const bool accepted = lp.pred.confidence >= tau;
    if (correct && accepted) ++c.tp;
    else if (correct && !accepted) ++c.fn;
    else if (!correct && accepted) ++c.fp;
    else ++c.tn;
  }
  return c;
}

struct PerClassReport {
  int class_id = 0;
  std::optional<double> soundness;  // accuracy over the class, absent when unsampled
  double completeness = 1.0;        // 1 - misattributed-to-class / non-class total

  json to_json() const {
    json j{{"class", class_id}, {"completeness", completeness}};
    if (soundness) j["soundness"] = *soundness;
    else j["soundness"] = nullptr;
    return j;
  }
};

inline std::vector<PerClassReport> per_class_reports(const std::vector<LabelledPrediction>& preds,
                                                     int n_classes) {
  if (n_classes < 1) throw ArgumentError("n_classes must be positive");
  if (preds.empty()) throw ArgumentError("no predictions to score");
  std::vector<long> class_total(n_classes, 0), class_correct(n_classes, 0),
      misattributed(n_classes, 0);
  for (const auto& lp : preds) {
    if (lp.true_class < 0 || lp.true_class >= n_classes)
      throw ArgumentError("true class " + std::to_string(lp.true_class) + " out of range");
    if (lp.pred.best_class < 0 || lp.pred.best_class >= n_classes)
      throw ArgumentError("predicted class " + std::to_string(lp.pred.best_class) +
                          " out of range");
    ++class_total[lp.true_class];
    if (lp.pred.best_class == lp.true_class) ++class_correct[lp.true_class];
    else ++misattributed[lp.pred.best_class];
  }
  std::vector<PerClassReport> out;
  out.reserve(n_classes);
  const long n = static_cast<long>(preds.size());
  for (int c = 0; c < n_classes; ++c) {
    PerClassReport r;
    r.class_id = c;
    if (class_total[c] > 0)
      r.soundness = static_cast<double>(class_correct[c]) / static_cast<double>(class_total[c]);
    const long non_class = n - class_total[c];
    r.completeness =
        non_class > 0 ? 1.0 - static_cast<double>(misattributed[c]) / static_cast<double>(non_class)
                      : 1.0;
    out.push_back(r);
  }
  return out;
}

struct TauSweep {
  std::vector<TauConfusion> curve;
  double optimal_tau = 0.0;
};

// Scores every threshold on the grid; the optimum maximizes TP+TN, ties
// resolved toward the smaller threshold.
inline TauSweep sweep_tau(const std::vector<LabelledPrediction>& preds,
                          const std::vector<double>& grid) {
  if (grid.empty()) throw ArgumentError("empty threshold grid");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] >= 0.0 && grid[i] <= 1.0)) throw ArgumentError("grid thresholds must lie in [0,1]");
    if (i > 0 && !(grid[i] > grid[i - 1])) throw ArgumentError("grid must be sorted ascending");
  }
  TauSweep sweep;
  sweep.curve.reserve(grid.size());
  long best = -1;
  for (double tau : grid) {
    TauConfusion c = confusion_with_tau(preds, tau);
    if (c.tp + c.tn > best) {
      best = c.tp + c.tn;
      sweep.optimal_tau = tau;
    }
    sweep.curve.push_back(std::move(c));
  }
  return sweep;
}

inline std::vector<double> uniform_grid(double step) {
  if (!(step > 0.0 && step <= 1.0)) throw ArgumentError("grid step must lie in (0,1]");
  std::vector<double> grid;
  for (long k = 0;; ++k) {
    const double tau = static_cast<double>(k) * step;
    if (tau > 1.0 + 1e-12) break;
    grid.push_back(std::min(tau, 1.0));
    if (tau >= 1.0) break;
  }
  return grid;
}

inline json evaluation_report(const std::vector<LabelledPrediction>& preds, double tau,
                              int n_classes, double sweep_step = 0.01) {
  json j;
  j["confusion"] = confusion_with_tau(preds, tau).to_json();
  json per_class = json::array();
  for (const auto& r : per_class_reports(preds, n_classes)) per_class.push_back(r.to_json());
  j["per_class"] = std::move(per_class);
  TauSweep sweep = sweep_tau(preds, uniform_grid(sweep_step));
  json curve = json::array();
  for (const auto& c : sweep.curve) curve.push_back(c.to_json());
  j["sweep"] = json{{"step", sweep_step}, {"optimal_tau", sweep.optimal_tau},
                    {"curve", std::move(curve)}};
  return j;
}

inline void write_curve_csv(const std::filesystem::path& path, const TauSweep& sweep) {
  std::ofstream os(path);
  if (!os) throw ArgumentError("cannot open " + path.string() + " for writing");
  os << "tau,tp,tn,fp,fn,accuracy,frr,rejection_rate\n";
  os.precision(10);
  for (const auto& c : sweep.curve) {
    os << c.tau << ',' << c.tp << ',' << c.tn << ',' << c.fp << ',' << c.fn << ','
       << c.accuracy() << ',';
    if (auto f = c.frr()) os << *f;
    os << ',' << c.rejection_rate() << "\n";
  }
}

// Convenience: batch predictions against their labels (threshold-free; the
// verdict stored per prediction uses tau = 0).
inline std::vector<LabelledPrediction> labelled_predictions(const models::ClassifierModel& model,
                                                            const models::LabelledEncodings& data) {
  auto preds = models::predict_batch(model, data.values, models::ThresholdConfig{0.0});
  std::vector<LabelledPrediction> out;
  out.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i)
    out.push_back({data.labels[i], std::move(preds[i])});
  return out;
}

}  // namespace twinforge::evaluation
