#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include <twinforge/models.hpp>
#include <twinforge/neural.hpp>
#include <twinforge/telemetry.hpp>

#include "helpers.hpp"

using namespace twinforge;
using Catch::Matchers::ContainsSubstring;

// ---------------------------------------------------------------- gru step

TEST_CASE("gru step matches the scalar transcription on random cells") {
  std::mt19937_64 rng(20260819);
  std::uniform_int_distribution<int> dim(1, 8);
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const Eigen::Index D = dim(rng), H = dim(rng);
    auto cell = testutil::random_cell(D, H, rng);
    Vector x(D), h(H);
    testutil::fill_uniform(x, rng, -1.0, 1.0);
    testutil::fill_uniform(h, rng, -1.0, 1.0);
    Vector got = nn::gru_step(cell, x, h);
    Vector want = testutil::oracle_gru_step(cell, x, h);
    worst = std::max(worst, (got - want).cwiseAbs().maxCoeff());
  }
  REQUIRE(worst <= 1e-12);
}

TEST_CASE("gru step with all-zero parameters halves the previous state") {
  nn::GruCell cell(3, 4, 1);
  cell.W_xr.setZero(); cell.W_hr.setZero(); cell.W_xz.setZero();
  cell.W_hz.setZero(); cell.W_xh.setZero(); cell.W_hh.setZero();
  Vector x = Vector::Constant(3, 0.7);
  Vector h(4);
  h << -0.4, 0.2, 0.9, -0.8;
  Vector out = nn::gru_step(cell, x, h);
  REQUIRE((out - 0.5 * h).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("gru step with a saturated update gate returns the candidate") {
  std::mt19937_64 rng(42);
  auto cell = testutil::random_cell(5, 6, rng);
  cell.b_z.setConstant(50.0);
  Vector x(5), h(6);
  testutil::fill_uniform(x, rng, -1.0, 1.0);
  testutil::fill_uniform(h, rng, -1.0, 1.0);
  Vector out = nn::gru_step(cell, x, h);

  Vector r(6), cand(6);
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (int i = 0; i < 6; ++i) {
    double ar = cell.b_r(i);
    for (int j = 0; j < 5; ++j) ar += cell.W_xr(i, j) * x(j);
    for (int j = 0; j < 6; ++j) ar += cell.W_hr(i, j) * h(j);
    r(i) = sig(ar);
  }
  for (int i = 0; i < 6; ++i) {
    double q = 0.0;
    for (int j = 0; j < 6; ++j) q += cell.W_hh(i, j) * h(j);
    double a = cell.b_h(i) + r(i) * q;
    for (int j = 0; j < 5; ++j) a += cell.W_xh(i, j) * x(j);
    cand(i) = std::tanh(a);
  }
  REQUIRE((out - cand).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("gru state stays strictly inside (-1,1) from a zero start") {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    auto cell = testutil::random_cell(3, 5, rng, 2.0);
    std::vector<Matrix> xs;
    for (int t = 0; t < 12; ++t) {
      Matrix x(4, 3);
      testutil::fill_uniform(x, rng, -3.0, 3.0);
      xs.push_back(x);
    }
    nn::GruSequenceCache cache;
    nn::gru_run(cell, xs, &cache);
    for (const auto& step : cache.steps) {
      Matrix h = ((1.0 - step.z.array()) * step.h_prev.array() + step.z.array() * step.c.array())
                     .matrix();
      REQUIRE(h.cwiseAbs().maxCoeff() < 1.0);
    }
  }
}

TEST_CASE("gru step rejects mismatched shapes") {
  nn::GruCell cell(3, 4, 1);
  REQUIRE_THROWS_AS(nn::gru_step(cell, Vector::Zero(2), Vector::Zero(4)), DimensionError);
  REQUIRE_THROWS_AS(nn::gru_step(cell, Vector::Zero(3), Vector::Zero(5)), DimensionError);
}

// ---------------------------------------------------------------- bigru

TEST_CASE("bidirectional halves coincide on palindromes when cells are shared") {
  std::mt19937_64 rng(11);
  nn::BiGru layer(2, 4, 9);
  layer.backward_cell = layer.forward_cell;
  std::vector<Vector> seq(5, Vector::Zero(2));
  for (int t = 0; t < 3; ++t) {
    testutil::fill_uniform(seq[t], rng, -1.0, 1.0);
    seq[4 - t] = seq[t];
  }
  Vector out = nn::bigru_forward(layer, seq);
  REQUIRE((out.head(4) - out.tail(4)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("reversing the sequence swaps the bidirectional halves for shared cells") {
  std::mt19937_64 rng(12);
  nn::BiGru layer(2, 3, 5);
  layer.backward_cell = layer.forward_cell;
  std::vector<Vector> seq;
  for (int t = 0; t < 6; ++t) {
    Vector v(2);
    testutil::fill_uniform(v, rng, -1.0, 1.0);
    seq.push_back(v);
  }
  std::vector<Vector> rev(seq.rbegin(), seq.rend());
  Vector a = nn::bigru_forward(layer, seq);
  Vector b = nn::bigru_forward(layer, rev);
  REQUIRE((a.head(3) - b.tail(3)).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((a.tail(3) - b.head(3)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("bigru rejects an empty sequence") {
  nn::BiGru layer(2, 3, 5);
  REQUIRE_THROWS_AS(nn::bigru_forward(layer, {}), ArgumentError);
}

// ---------------------------------------------------------------- dense

TEST_CASE("identity dense layer passes input through") {
  nn::Dense layer(3, 3, nn::Activation::Linear, 0);
  layer.weights() = Matrix::Identity(3, 3);
  Matrix x(2, 3);
  x << 1, -2, 3, 0.5, 0, -0.25;
  REQUIRE((layer.apply(x) - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("softmax of zeros is uniform and rows always sum to one") {
  nn::Dense layer(4, 4, nn::Activation::Softmax, 0);
  layer.weights().setZero();
  Matrix x = Matrix::Zero(1, 4);
  Matrix y = layer.apply(x);
  for (int j = 0; j < 4; ++j) REQUIRE(y(0, j) == Catch::Approx(0.25).margin(1e-15));

  std::mt19937_64 rng(3);
  nn::Dense wide(6, 5, nn::Activation::Softmax, 77);
  Matrix z(40, 6);
  testutil::fill_uniform(z, rng, -30.0, 30.0);
  Matrix p = wide.apply(z);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    REQUIRE(std::abs(p.row(i).sum() - 1.0) <= 1e-9);
    REQUIRE(p.row(i).minCoeff() >= 0.0);
  }
}

TEST_CASE("dense tanh matches a direct computation") {
  std::mt19937_64 rng(5);
  nn::Dense layer(7, 4, nn::Activation::Tanh, 123);
  Matrix x(9, 7);
  testutil::fill_uniform(x, rng, -2.0, 2.0);
  Matrix got = layer.apply(x);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index o = 0; o < 4; ++o) {
      double a = layer.bias()(o);
      for (Eigen::Index j = 0; j < 7; ++j) a += layer.weights()(o, j) * x(i, j);
      REQUIRE(std::abs(got(i, o) - std::tanh(a)) <= 1e-12);
    }
}

TEST_CASE("dense layer rejects mismatched input width") {
  nn::Dense layer(3, 2, nn::Activation::Linear, 0);
  REQUIRE_THROWS_AS(layer.apply(Matrix::Zero(1, 4)), DimensionError);
}

// ---------------------------------------------------------------- layer norm

TEST_CASE("layer norm standardizes each row") {
  std::mt19937_64 rng(9);
  nn::LayerNorm ln(6);
  Matrix x(5, 6);
  testutil::fill_uniform(x, rng, -4.0, 4.0);
  Matrix y = ln.apply(x);
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double mean = y.row(i).mean();
    const double var = (y.row(i).array() - mean).square().mean();
    REQUIRE(std::abs(mean) <= 1e-12);
    REQUIRE(var == Catch::Approx(1.0).margin(1e-3));
  }
}

// ---------------------------------------------------------------- dropout

TEST_CASE("dropout is the identity in evaluation mode") {
  nn::Dropout drop(0.4, 99);
  std::mt19937_64 rng(10);
  Matrix x(8, 8);
  testutil::fill_uniform(x, rng, -1.0, 1.0);
  REQUIRE((drop.apply(x) - x).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((drop.forward(x, false) - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("training dropout zeroes a fraction and rescales the rest") {
  nn::Dropout drop(0.5, 7);
  Matrix x = Matrix::Constant(100, 100, 1.0);
  Matrix y = drop.forward(x, true);
  Eigen::Index zeros = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double v = y.data()[i];
    REQUIRE((v == 0.0 || v == Catch::Approx(2.0)));
    if (v == 0.0) ++zeros;
  }
  const double rate = static_cast<double>(zeros) / static_cast<double>(y.size());
  REQUIRE(rate == Catch::Approx(0.5).margin(0.05));
}

TEST_CASE("dropout rejects rates outside [0,1)") {
  REQUIRE_THROWS_AS(nn::Dropout(1.0, 0), ArgumentError);
  REQUIRE_THROWS_AS(nn::Dropout(-0.1, 0), ArgumentError);
}

// ---------------------------------------------------------------- backprop

TEST_CASE("a zero loss produces zero gradients everywhere") {
  nn::Mlp mlp;
  mlp.add(std::make_unique<nn::Dense>(6, 5, nn::Activation::Tanh, 21));
  mlp.add(std::make_unique<nn::LayerNorm>(5));
  mlp.add(std::make_unique<nn::Dense>(5, 3, nn::Activation::Sigmoid, 22));
  std::mt19937_64 rng(23);
  Matrix x(4, 6);
  testutil::fill_uniform(x, rng, -1.0, 1.0);
  Matrix y = mlp.forward(x, true);
  auto loss = nn::mse_loss(y, y);
  REQUIRE(loss.value == 0.0);
  mlp.zero_grads();
  mlp.backward(loss.grad);
  for (const auto& p : mlp.params())
    for (Eigen::Index i = 0; i < p.size; ++i) REQUIRE(std::abs(p.grad[i]) <= 1e-12);
}

TEST_CASE("finite differences confirm the dense stack gradients") {
  nn::Mlp mlp;
  mlp.add(std::make_unique<nn::Dense>(5, 7, nn::Activation::Tanh, 31));
  mlp.add(std::make_unique<nn::LayerNorm>(7));
  mlp.add(std::make_unique<nn::Dense>(7, 3, nn::Activation::Softmax, 32));
  std::mt19937_64 rng(33);
  Matrix x(6, 5);
  testutil::fill_uniform(x, rng, -1.0, 1.0);
  std::vector<int> labels = {0, 2, 1, 1, 0, 2};

  mlp.zero_grads();
  Matrix probs = mlp.forward(x, true);
  mlp.backward(nn::cross_entropy_loss(probs, labels).grad);

  auto loss = [&] { return nn::cross_entropy_loss(mlp.apply(x), labels).value; };
  auto res = testutil::fd_check(mlp.params(), loss);
  INFO("checked " << res.checked << " parameters, max rel err " << res.max_err);
  REQUIRE(res.max_err < 1e-4);
}

TEST_CASE("finite differences confirm backpropagation through time") {
  std::mt19937_64 rng(41);
  nn::GruCell cell(2, 4, 43);
  nn::GruGrads grads(cell);
  std::vector<Matrix> xs;
  for (int t = 0; t < 5; ++t) {
    Matrix x(3, 2);
    testutil::fill_uniform(x, rng, -1.0, 1.0);
    xs.push_back(x);
  }
  Matrix target(3, 4);
  testutil::fill_uniform(target, rng, -0.5, 0.5);

  nn::GruSequenceCache cache;
  Matrix h = nn::gru_run(cell, xs, &cache);
  auto loss0 = nn::mse_loss(h, target);
  grads.zero();
  nn::gru_backward(cell, cache, loss0.grad, grads);

  auto params = nn::gru_params(cell, grads);
  auto loss = [&] { return nn::mse_loss(nn::gru_run(cell, xs), target).value; };
  auto res = testutil::fd_check(params, loss);
  INFO("checked " << res.checked << " parameters, max rel err " << res.max_err);
  REQUIRE(res.max_err < 1e-4);
}

TEST_CASE("gru backward also differentiates the inputs") {
  std::mt19937_64 rng(47);
  nn::GruCell cell(3, 3, 48);
  nn::GruGrads grads(cell);
  std::vector<Matrix> xs;
  for (int t = 0; t < 4; ++t) {
    Matrix x(2, 3);
    testutil::fill_uniform(x, rng, -1.0, 1.0);
    xs.push_back(x);
  }
  Matrix target = Matrix::Zero(2, 3);
  nn::GruSequenceCache cache;
  Matrix h = nn::gru_run(cell, xs, &cache);
  std::vector<Matrix> dxs;
  nn::gru_backward(cell, cache, nn::mse_loss(h, target).grad, grads, &dxs);

  const double eps = 1e-5;
  double worst = 0.0;
  for (std::size_t t = 0; t < xs.size(); ++t)
    for (Eigen::Index i = 0; i < xs[t].rows(); ++i)
      for (Eigen::Index j = 0; j < xs[t].cols(); ++j) {
        const double saved = xs[t](i, j);
        xs[t](i, j) = saved + eps;
        const double up = nn::mse_loss(nn::gru_run(cell, xs), target).value;
        xs[t](i, j) = saved - eps;
        const double down = nn::mse_loss(nn::gru_run(cell, xs), target).value;
        xs[t](i, j) = saved;
        const double fd = (up - down) / (2.0 * eps);
        const double a = dxs[t](i, j);
        worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-6}));
      }
  REQUIRE(worst < 1e-4);
}

// ---------------------------------------------------------------- losses

TEST_CASE("mse matches a hand computation") {
  Matrix pred(2, 2), target(2, 2);
  pred << 1, 2, 3, 4;
  target << 1, 0, 3, 2;
  auto r = nn::mse_loss(pred, target);
  REQUIRE(r.value == Catch::Approx(2.0));
  REQUIRE(r.grad(0, 1) == Catch::Approx(1.0));
}

TEST_CASE("losses reject non-finite predictions naming the batch row") {
  Matrix pred = Matrix::Ones(3, 2);
  pred(1, 0) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_WITH(nn::mse_loss(pred, Matrix::Zero(3, 2)), ContainsSubstring("batch index 1"));
  REQUIRE_THROWS_AS(nn::mse_loss(pred, Matrix::Zero(3, 2)), NumericError);
}

TEST_CASE("cross entropy rejects out-of-range labels") {
  Matrix probs = Matrix::Constant(2, 3, 1.0 / 3.0);
  REQUIRE_THROWS_AS(nn::cross_entropy_loss(probs, {0, 3}), ArgumentError);
  REQUIRE_THROWS_AS(nn::cross_entropy_loss(probs, {0}), DimensionError);
}

// ---------------------------------------------------------------- optimizer

TEST_CASE("optimizer leaves parameters alone when gradients are zero") {
  nn::Dense layer(4, 3, nn::Activation::Tanh, 55);
  Matrix before = layer.weights();
  layer.zero_grads();
  std::vector<nn::ParamView> params;
  layer.collect_params(params);
  nn::AdamState state;
  state.init(params);
  nn::TrainConfig cfg;
  for (int i = 0; i < 5; ++i) nn::optimize_step(params, state, cfg);
  REQUIRE((layer.weights() - before).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("a constant gradient drives the step size toward the learning rate") {
  Vector p = Vector::Zero(1), g = Vector::Zero(1);
  std::vector<nn::ParamView> params = {nn::view_of(p, g)};
  nn::AdamState state;
  state.init(params);
  nn::TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  double prev = p(0);
  double last_step = 0.0;
  for (int i = 0; i < 500; ++i) {
    g(0) = 0.37;
    nn::optimize_step(params, state, cfg);
    last_step = prev - p(0);
    prev = p(0);
  }
  REQUIRE(last_step == Catch::Approx(cfg.learning_rate).epsilon(0.01));
  REQUIRE(p(0) < 0.0);
}

TEST_CASE("training configs validate their ranges") {
  nn::TrainConfig cfg;
  cfg.learning_rate = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = {};
  cfg.epochs = -1;
  REQUIRE_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = {};
  cfg.dropout_rate = 1.0;
  REQUIRE_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = {};
  REQUIRE_NOTHROW(cfg.validate());
}

TEST_CASE("identical seeds give bit-identical training runs") {
  auto cycles = telemetry::generate_synthetic(2, 4, 3);
  auto split = telemetry::normalize_and_split(telemetry::window_cycles(cycles), 0.8, 3);
  nn::TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.seed = 99;
  auto m1 = models::train_dae(split, cfg);
  auto m2 = models::train_dae(split, cfg);
  auto e1 = models::encode(m1, split.test[0]);
  auto e2 = models::encode(m2, split.test[0]);
  REQUIRE(e1.values.size() == e2.values.size());
  for (Eigen::Index i = 0; i < e1.values.size(); ++i) REQUIRE(e1.values(i) == e2.values(i));
}

// ---------------------------------------------------------------- serialization

TEST_CASE("layer records round-trip bit-exactly") {
  std::mt19937_64 rng(61);
  nn::Mlp mlp;
  mlp.add(std::make_unique<nn::Dense>(5, 4, nn::Activation::Relu, 62));
  mlp.add(std::make_unique<nn::LayerNorm>(4));
  mlp.add(std::make_unique<nn::Dropout>(0.25, 63));
  mlp.add(std::make_unique<nn::Dense>(4, 2, nn::Activation::Softmax, 64));

  std::stringstream buf;
  mlp.save_layers(buf);
  nn::Mlp loaded;
  for (int i = 0; i < 4; ++i) loaded.add(nn::read_layer(buf));

  Matrix x(3, 5);
  testutil::fill_uniform(x, rng, -1.0, 1.0);
  Matrix a = mlp.apply(x);
  Matrix b = loaded.apply(x);
  REQUIRE((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gru cells round-trip bit-exactly") {
  std::mt19937_64 rng(66);
  auto cell = testutil::random_cell(3, 5, rng);
  std::stringstream buf;
  cell.save(buf);
  auto loaded = nn::GruCell::read(buf);
  Vector x(3), h(5);
  testutil::fill_uniform(x, rng, -1.0, 1.0);
  testutil::fill_uniform(h, rng, -1.0, 1.0);
  Vector a = nn::gru_step(cell, x, h);
  Vector b = nn::gru_step(loaded, x, h);
  REQUIRE((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("corrupt layer tags are rejected") {
  std::stringstream buf;
  io::write_u8(buf, 9);
  REQUIRE_THROWS_AS(nn::read_layer(buf), FormatError);
}
