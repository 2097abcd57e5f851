#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"

// Dense / normalization / dropout layers, a gated recurrent cell with full
// backpropagation through time, losses and an Adam optimizer. Batches are
// row-major: one sample per row. Everything is float64.

namespace twinforge::nn {

using twinforge::Matrix;
using twinforge::Vector;

enum class Activation : std::uint8_t { Linear = 0, Tanh = 1, Relu = 2, Sigmoid = 3, Softmax = 4 };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Linear: return "linear";
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Softmax: return "softmax";
  }
  return "?";
}

inline Matrix sigmoid(const Matrix& z) {
  return (1.0 / (1.0 + (-z.array()).exp())).matrix();
}

inline Matrix apply_activation(Activation act, const Matrix& z) {
  switch (act) {
    case Activation::Linear: return z;
    case Activation::Tanh: return z.array().tanh().matrix();
    case Activation::Relu: return z.array().max(0.0).matrix();
    case Activation::Sigmoid: return sigmoid(z);
    case Activation::Softmax: {
      Matrix y(z.rows(), z.cols());
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        Eigen::ArrayXd row = z.row(i).transpose().array() - z.row(i).maxCoeff();
        Eigen::ArrayXd e = row.exp();
        y.row(i) = (e / e.sum()).matrix().transpose();
      }
      return y;
    }
  }
  throw ArgumentError("unknown activation");
}

// Derivative pullback expressed through the forward output y.
inline Matrix activation_backward(Activation act, const Matrix& y, const Matrix& dy) {
  switch (act) {
    case Activation::Linear: return dy;
    case Activation::Tanh: return (dy.array() * (1.0 - y.array().square())).matrix();
    case Activation::Relu: return (dy.array() * (y.array() > 0.0).cast<double>()).matrix();
    case Activation::Sigmoid: return (dy.array() * y.array() * (1.0 - y.array())).matrix();
    case Activation::Softmax: {
      Eigen::ArrayXd rd = (dy.array() * y.array()).rowwise().sum();
      return (y.array() * (dy.array().colwise() - rd)).matrix();
    }
  }
  throw ArgumentError("unknown activation");
}

// Flat view over one parameter tensor and its gradient accumulator.
struct ParamView {
  double* value = nullptr;
  double* grad = nullptr;
  Eigen::Index size = 0;
};

inline ParamView view_of(Matrix& v, Matrix& g) { return {v.data(), g.data(), v.size()}; }
inline ParamView view_of(Vector& v, Vector& g) { return {v.data(), g.data(), v.size()}; }

// ---------------------------------------------------------------------------
// Layers

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Matrix forward(const Matrix& x, bool training) = 0;
  virtual Matrix backward(const Matrix& dy) = 0;
  virtual Matrix apply(const Matrix& x) const = 0;  // stateless evaluation pass
  virtual void collect_params(std::vector<ParamView>& out) = 0;
  virtual void zero_grads() = 0;
  virtual Eigen::Index input_size() const = 0;   // 0 = any
  virtual Eigen::Index output_size() const = 0;  // 0 = same as input
  virtual void save(std::ostream& os) const = 0;
};

class Dense final : public Layer {
 public:
  Dense(Eigen::Index in, Eigen::Index out, Activation act, std::uint64_t seed)
      : W_(out, in), b_(Vector::Zero(out)), gW_(Matrix::Zero(out, in)), gb_(Vector::Zero(out)),
        act_(act) {
    if (in < 1 || out < 1) throw ArgumentError("dense layer needs positive dimensions");
    std::mt19937_64 rng(seed);
    const double s = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-s, s);
    for (Eigen::Index i = 0; i < W_.rows(); ++i)
      for (Eigen::Index j = 0; j < W_.cols(); ++j) W_(i, j) = u(rng);
  }

  Matrix apply(const Matrix& x) const override {
    if (x.cols() != W_.cols())
      throw DimensionError("dense layer expects " + std::to_string(W_.cols()) + " inputs, got " +
                           std::to_string(x.cols()));
    Matrix z = x * W_.transpose();
    z.rowwise() += b_.transpose();
    return apply_activation(act_, z);
  }

  Matrix forward(const Matrix& x, bool) override {
    x_ = x;
    y_ = apply(x);
    return y_;
  }

  Matrix backward(const Matrix& dy) override {
    Matrix dz = activation_backward(act_, y_, dy);
    gW_ += dz.transpose() * x_;
    gb_ += dz.colwise().sum().transpose();
    return dz * W_;
  }

  void collect_params(std::vector<ParamView>& out) override {
    out.push_back(view_of(W_, gW_));
    out.push_back(view_of(b_, gb_));
  }

  void zero_grads() override { gW_.setZero(); gb_.setZero(); }
  Eigen::Index input_size() const override { return W_.cols(); }
  Eigen::Index output_size() const override { return W_.rows(); }
  Activation activation() const { return act_; }
  const Matrix& weights() const { return W_; }
  const Vector& bias() const { return b_; }
  Matrix& weights() { return W_; }
  Vector& bias() { return b_; }

  void save(std::ostream& os) const override {
    io::write_u8(os, 1);
    io::write_u8(os, static_cast<std::uint8_t>(act_));
    io::write_u32(os, static_cast<std::uint32_t>(W_.rows()));
    io::write_u32(os, static_cast<std::uint32_t>(W_.cols()));
    for (Eigen::Index i = 0; i < W_.rows(); ++i)
      for (Eigen::Index j = 0; j < W_.cols(); ++j) io::write_f64(os, W_(i, j));
    for (Eigen::Index i = 0; i < b_.size(); ++i) io::write_f64(os, b_(i));
  }

  static std::unique_ptr<Dense> read(std::istream& is) {
    auto act = static_cast<Activation>(io::read_u8(is));
    if (static_cast<int>(act) > 4) throw FormatError("dense record: unknown activation tag");
    const auto out = static_cast<Eigen::Index>(io::read_u32(is));
    const auto in = static_cast<Eigen::Index>(io::read_u32(is));
    if (in < 1 || out < 1) throw FormatError("dense record: bad shape");
    auto layer = std::make_unique<Dense>(in, out, act, 0);
    for (Eigen::Index i = 0; i < out; ++i)
      for (Eigen::Index j = 0; j < in; ++j) layer->W_(i, j) = io::read_f64(is);
    for (Eigen::Index i = 0; i < out; ++i) layer->b_(i) = io::read_f64(is);
    return layer;
  }

 private:
  Matrix W_, gW_;
  Vector b_, gb_;
  Matrix x_, y_;
  Activation act_;

  // keep grads adjacent to values for collect_params; declared above
  friend class Mlp;
};

class LayerNorm final : public Layer {
 public:
  explicit LayerNorm(Eigen::Index dim)
      : gamma_(Vector::Ones(dim)), beta_(Vector::Zero(dim)),
        ggamma_(Vector::Zero(dim)), gbeta_(Vector::Zero(dim)) {
    if (dim < 1) throw ArgumentError("layer norm needs a positive dimension");
  }

  Matrix apply(const Matrix& x) const override {
    check(x);
    Matrix y(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      Eigen::ArrayXd row = x.row(i).transpose().array();
      const double mu = row.mean();
      const double var = (row - mu).square().mean();
      Eigen::ArrayXd xhat = (row - mu) / std::sqrt(var + kEps);
      y.row(i) = (xhat * gamma_.array() + beta_.array()).matrix().transpose();
    }
    return y;
  }

  Matrix forward(const Matrix& x, bool) override {
    check(x);
    xhat_.resize(x.rows(), x.cols());
    inv_std_.resize(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      Eigen::ArrayXd row = x.row(i).transpose().array();
      const double mu = row.mean();
      const double var = (row - mu).square().mean();
      inv_std_(i) = 1.0 / std::sqrt(var + kEps);
      xhat_.row(i) = ((row - mu) * inv_std_(i)).matrix().transpose();
    }
    Matrix y = xhat_;
    y.array().rowwise() *= gamma_.array().transpose();
    y.array().rowwise() += beta_.array().transpose();
    return y;
  }

  Matrix backward(const Matrix& dy) override {
    ggamma_ += (dy.array() * xhat_.array()).colwise().sum().matrix().transpose();
    gbeta_ += dy.colwise().sum().transpose();
    Matrix dxhat = dy;
    dxhat.array().rowwise() *= gamma_.array().transpose();
    Matrix dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
      Eigen::ArrayXd dh = dxhat.row(i).transpose().array();
      Eigen::ArrayXd xh = xhat_.row(i).transpose().array();
      const double m1 = dh.mean();
      const double m2 = (dh * xh).mean();
      dx.row(i) = (inv_std_(i) * (dh - m1 - xh * m2)).matrix().transpose();
    }
    return dx;
  }

  void collect_params(std::vector<ParamView>& out) override {
    out.push_back(view_of(gamma_, ggamma_));
    out.push_back(view_of(beta_, gbeta_));
  }

  void zero_grads() override { ggamma_.setZero(); gbeta_.setZero(); }
  Eigen::Index input_size() const override { return gamma_.size(); }
  Eigen::Index output_size() const override { return gamma_.size(); }

  void save(std::ostream& os) const override {
    io::write_u8(os, 2);
    io::write_u32(os, static_cast<std::uint32_t>(gamma_.size()));
    for (Eigen::Index i = 0; i < gamma_.size(); ++i) io::write_f64(os, gamma_(i));
    for (Eigen::Index i = 0; i < beta_.size(); ++i) io::write_f64(os, beta_(i));
  }

  static std::unique_ptr<LayerNorm> read(std::istream& is) {
    const auto dim = static_cast<Eigen::Index>(io::read_u32(is));
    if (dim < 1) throw FormatError("layer norm record: bad dimension");
    auto layer = std::make_unique<LayerNorm>(dim);
    for (Eigen::Index i = 0; i < dim; ++i) layer->gamma_(i) = io::read_f64(is);
    for (Eigen::Index i = 0; i < dim; ++i) layer->beta_(i) = io::read_f64(is);
    return layer;
  }

 private:
  static constexpr double kEps = 1e-5;
  Vector gamma_, beta_, ggamma_, gbeta_;
  Matrix xhat_;
  Vector inv_std_;

  void check(const Matrix& x) const {
    if (x.cols() != gamma_.size())
      throw DimensionError("layer norm expects width " + std::to_string(gamma_.size()));
  }
};

// Inverted dropout: scaling happens at training time, evaluation is identity.
class Dropout final : public Layer {
 public:
  Dropout(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ArgumentError("dropout rate must lie in [0,1)");
  }

  Matrix apply(const Matrix& x) const override { return x; }

  Matrix forward(const Matrix& x, bool training) override {
    if (!training || rate_ == 0.0) {
      mask_.resize(0, 0);
      return x;
    }
    const double keep = 1.0 - rate_;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    mask_.resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < x.cols(); ++j) mask_(i, j) = u(rng_) < keep ? 1.0 / keep : 0.0;
    return x.cwiseProduct(mask_);
  }

  Matrix backward(const Matrix& dy) override {
    if (mask_.size() == 0) return dy;
    return dy.cwiseProduct(mask_);
  }

  void collect_params(std::vector<ParamView>&) override {}
  void zero_grads() override {}
  Eigen::Index input_size() const override { return 0; }
  Eigen::Index output_size() const override { return 0; }
  double rate() const { return rate_; }

  void save(std::ostream& os) const override {
    io::write_u8(os, 3);
    io::write_f64(os, rate_);
  }

  static std::unique_ptr<Dropout> read(std::istream& is) {
    const double rate = io::read_f64(is);
    if (!(rate >= 0.0 && rate < 1.0)) throw FormatError("dropout record: bad rate");
    return std::make_unique<Dropout>(rate, 0);
  }

 private:
  double rate_;
  std::mt19937_64 rng_;
  Matrix mask_;
};

inline std::unique_ptr<Layer> read_layer(std::istream& is) {
  const std::uint8_t tag = io::read_u8(is);
  switch (tag) {
    case 1: return Dense::read(is);
    case 2: return LayerNorm::read(is);
    case 3: return Dropout::read(is);
    default: throw FormatError("unknown layer tag " + std::to_string(tag));
  }
}

// Sequential stack of layers.
class Mlp {
 public:
  Mlp() = default;

  void add(std::unique_ptr<Layer> layer) {
    if (!layers_.empty() && layer->input_size() != 0) {
      const Eigen::Index prev = chain_output();
      if (prev != 0 && prev != layer->input_size())
        throw DimensionError("layer chain mismatch: " + std::to_string(prev) + " feeds " +
                             std::to_string(layer->input_size()));
    }
    layers_.push_back(std::move(layer));
  }

  Matrix forward(const Matrix& x, bool training) {
    Matrix h = x;
    for (auto& l : layers_) h = l->forward(h, training);
    return h;
  }

  Matrix backward(const Matrix& dy) {
    Matrix g = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  Matrix apply(const Matrix& x) const {
    Matrix h = x;
    for (const auto& l : layers_) h = l->apply(h);
    return h;
  }

  std::vector<ParamView> params() {
    std::vector<ParamView> out;
    for (auto& l : layers_) l->collect_params(out);
    return out;
  }

  void zero_grads() {
    for (auto& l : layers_) l->zero_grads();
  }

  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }
  const Layer& layer(std::size_t i) const { return *layers_[i]; }

  void save_layers(std::ostream& os) const {
    for (const auto& l : layers_) l->save(os);
  }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;

  Eigen::Index chain_output() const {
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
      if ((*it)->output_size() != 0) return (*it)->output_size();
    return 0;
  }
};

// ---------------------------------------------------------------------------
// Gated recurrent cell.
//
//   r_t = sigmoid(W_xr x_t + W_hr h_{t-1} + b_r)
//   z_t = sigmoid(W_xz x_t + W_hz h_{t-1} + b_z)
//   h_t = (1 - z_t) . h_{t-1} + z_t . tanh(W_xh x_t + r_t . (W_hh h_{t-1}) + b_h)
//
// The reset gate multiplies the already-formed product W_hh h_{t-1}.

struct GruCell {
  Matrix W_xr, W_hr, W_xz, W_hz, W_xh, W_hh;  // H x D and H x H
  Vector b_r, b_z, b_h;

  GruCell() = default;

  GruCell(Eigen::Index input, Eigen::Index hidden, std::uint64_t seed) {
    if (input < 1 || hidden < 1) throw ArgumentError("gru cell needs positive dimensions");
    std::mt19937_64 rng(seed);
    const double sx = 1.0 / std::sqrt(static_cast<double>(input));
    const double sh = 1.0 / std::sqrt(static_cast<double>(hidden));
    auto fill = [&rng](Matrix& m, Eigen::Index r, Eigen::Index c, double s) {
      std::uniform_real_distribution<double> u(-s, s);
      m.resize(r, c);
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = u(rng);
    };
    fill(W_xr, hidden, input, sx);
    fill(W_hr, hidden, hidden, sh);
    fill(W_xz, hidden, input, sx);
    fill(W_hz, hidden, hidden, sh);
    fill(W_xh, hidden, input, sx);
    fill(W_hh, hidden, hidden, sh);
    b_r = Vector::Zero(hidden);
    b_z = Vector::Zero(hidden);
    b_h = Vector::Zero(hidden);
  }

  Eigen::Index hidden_size() const { return W_hr.rows(); }
  Eigen::Index input_size() const { return W_xr.cols(); }

  void save(std::ostream& os) const {
    io::write_u8(os, 4);
    io::write_u32(os, static_cast<std::uint32_t>(hidden_size()));
    io::write_u32(os, static_cast<std::uint32_t>(input_size()));
    auto wm = [&os](const Matrix& m) {
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) io::write_f64(os, m(i, j));
    };
    auto wv = [&os](const Vector& v) {
      for (Eigen::Index i = 0; i < v.size(); ++i) io::write_f64(os, v(i));
    };
    wm(W_xr); wm(W_hr); wv(b_r);
    wm(W_xz); wm(W_hz); wv(b_z);
    wm(W_xh); wm(W_hh); wv(b_h);
  }

  static GruCell read(std::istream& is) {
    if (io::read_u8(is) != 4) throw FormatError("expected gru cell record");
    const auto hidden = static_cast<Eigen::Index>(io::read_u32(is));
    const auto input = static_cast<Eigen::Index>(io::read_u32(is));
    if (hidden < 1 || input < 1) throw FormatError("gru record: bad shape");
    GruCell c(input, hidden, 0);
    auto rm = [&is](Matrix& m) {
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = io::read_f64(is);
    };
    auto rv = [&is](Vector& v) {
      for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = io::read_f64(is);
    };
    rm(c.W_xr); rm(c.W_hr); rv(c.b_r);
    rm(c.W_xz); rm(c.W_hz); rv(c.b_z);
    rm(c.W_xh); rm(c.W_hh); rv(c.b_h);
    return c;
  }
};

struct GruGrads {
  Matrix W_xr, W_hr, W_xz, W_hz, W_xh, W_hh;
  Vector b_r, b_z, b_h;

  explicit GruGrads(const GruCell& c)
      : W_xr(Matrix::Zero(c.W_xr.rows(), c.W_xr.cols())),
        W_hr(Matrix::Zero(c.W_hr.rows(), c.W_hr.cols())),
        W_xz(Matrix::Zero(c.W_xz.rows(), c.W_xz.cols())),
        W_hz(Matrix::Zero(c.W_hz.rows(), c.W_hz.cols())),
        W_xh(Matrix::Zero(c.W_xh.rows(), c.W_xh.cols())),
        W_hh(Matrix::Zero(c.W_hh.rows(), c.W_hh.cols())),
        b_r(Vector::Zero(c.b_r.size())),
        b_z(Vector::Zero(c.b_z.size())),
        b_h(Vector::Zero(c.b_h.size())) {}

  void zero() {
    W_xr.setZero(); W_hr.setZero(); W_xz.setZero();
    W_hz.setZero(); W_xh.setZero(); W_hh.setZero();
    b_r.setZero(); b_z.setZero(); b_h.setZero();
  }
};

inline std::vector<ParamView> gru_params(GruCell& c, GruGrads& g) {
  return {view_of(c.W_xr, g.W_xr), view_of(c.W_hr, g.W_hr), view_of(c.b_r, g.b_r),
          view_of(c.W_xz, g.W_xz), view_of(c.W_hz, g.W_hz), view_of(c.b_z, g.b_z),
          view_of(c.W_xh, g.W_xh), view_of(c.W_hh, g.W_hh), view_of(c.b_h, g.b_h)};
}

struct GruStepCache {
  Matrix x, h_prev, r, z, c, q;  // q = h_prev * W_hh^T before the reset gate
};

inline void check_gru_step(const GruCell& cell, Eigen::Index x_cols, Eigen::Index h_cols) {
  if (x_cols != cell.input_size())
    throw DimensionError("gru step: input has width " + std::to_string(x_cols) + ", cell expects " +
                         std::to_string(cell.input_size()));
  if (h_cols != cell.hidden_size())
    throw DimensionError("gru step: state has width " + std::to_string(h_cols) +
                         ", cell expects " + std::to_string(cell.hidden_size()));
}

inline Matrix gru_step_batch(const GruCell& cell, const Matrix& x, const Matrix& h_prev,
                             GruStepCache* cache = nullptr) {
  check_gru_step(cell, x.cols(), h_prev.cols());
  Matrix r = x * cell.W_xr.transpose() + h_prev * cell.W_hr.transpose();
  r.rowwise() += cell.b_r.transpose();
  r = sigmoid(r);
  Matrix z = x * cell.W_xz.transpose() + h_prev * cell.W_hz.transpose();
  z.rowwise() += cell.b_z.transpose();
  z = sigmoid(z);
  Matrix q = h_prev * cell.W_hh.transpose();
  Matrix c = x * cell.W_xh.transpose() + r.cwiseProduct(q);
  c.rowwise() += cell.b_h.transpose();
  c = c.array().tanh().matrix();
  Matrix h = ((1.0 - z.array()) * h_prev.array() + z.array() * c.array()).matrix();
  if (cache) *cache = GruStepCache{x, h_prev, r, z, c, q};
  return h;
}

inline Vector gru_step(const GruCell& cell, const Vector& x, const Vector& h_prev) {
  Matrix h = gru_step_batch(cell, x.transpose(), h_prev.transpose());
  return h.row(0).transpose();
}

struct GruSequenceCache {
  std::vector<GruStepCache> steps;
  Matrix h_last;
};

// Runs the cell over a same-length batch of sequences from a zero state.
// xs[t] is the n x D slice of inputs at step t. Returns the final n x H state.
inline Matrix gru_run(const GruCell& cell, const std::vector<Matrix>& xs,
                      GruSequenceCache* cache = nullptr) {
  if (xs.empty()) throw ArgumentError("gru sequence must be non-empty");
  Matrix h = Matrix::Zero(xs[0].rows(), cell.hidden_size());
  if (cache) {
    cache->steps.clear();
    cache->steps.resize(xs.size());
  }
  for (std::size_t t = 0; t < xs.size(); ++t) {
    if (xs[t].rows() != h.rows()) throw DimensionError("gru sequence: ragged batch");
    h = gru_step_batch(cell, xs[t], h, cache ? &cache->steps[t] : nullptr);
  }
  if (cache) cache->h_last = h;
  return h;
}

// Backpropagation through time for a loss attached to the final state.
// Accumulates parameter gradients into `grads`; optionally emits per-step
// input gradients.
inline void gru_backward(const GruCell& cell, const GruSequenceCache& cache, const Matrix& d_h_last,
                         GruGrads& grads, std::vector<Matrix>* dxs = nullptr) {
  if (cache.steps.empty()) throw ArgumentError("gru backward: empty cache");
  if (dxs) {
    dxs->clear();
    dxs->resize(cache.steps.size());
  }
  Matrix dh = d_h_last;
  for (std::size_t ti = cache.steps.size(); ti-- > 0;) {
    const GruStepCache& s = cache.steps[ti];
    Matrix dz = dh.cwiseProduct(s.c - s.h_prev);
    Matrix dc = dh.cwiseProduct(s.z);
    Matrix dh_prev = dh.cwiseProduct((1.0 - s.z.array()).matrix());

    Matrix dc_pre = (dc.array() * (1.0 - s.c.array().square())).matrix();
    grads.W_xh += dc_pre.transpose() * s.x;
    grads.b_h += dc_pre.colwise().sum().transpose();
    Matrix dq = dc_pre.cwiseProduct(s.r);
    Matrix dr = dc_pre.cwiseProduct(s.q);
    grads.W_hh += dq.transpose() * s.h_prev;
    dh_prev += dq * cell.W_hh;

    Matrix dr_pre = (dr.array() * s.r.array() * (1.0 - s.r.array())).matrix();
    grads.W_xr += dr_pre.transpose() * s.x;
    grads.W_hr += dr_pre.transpose() * s.h_prev;
    grads.b_r += dr_pre.colwise().sum().transpose();
    dh_prev += dr_pre * cell.W_hr;

    Matrix dz_pre = (dz.array() * s.z.array() * (1.0 - s.z.array())).matrix();
    grads.W_xz += dz_pre.transpose() * s.x;
    grads.W_hz += dz_pre.transpose() * s.h_prev;
    grads.b_z += dz_pre.colwise().sum().transpose();
    dh_prev += dz_pre * cell.W_hz;

    if (dxs) (*dxs)[ti] = dc_pre * cell.W_xh + dr_pre * cell.W_xr + dz_pre * cell.W_xz;
    dh = std::move(dh_prev);
  }
}

// ---------------------------------------------------------------------------
// Bidirectional wrapper: two independent cells, one fed the reversed
// sequence; the output concatenates both final states.

struct BiGru {
  GruCell forward_cell, backward_cell;

  BiGru() = default;
  BiGru(Eigen::Index input, Eigen::Index hidden, std::uint64_t seed)
      : forward_cell(input, hidden, mix_seed(seed, 1)),
        backward_cell(input, hidden, mix_seed(seed, 2)) {}

  Eigen::Index output_size() const { return 2 * forward_cell.hidden_size(); }
};

struct BiGruCache {
  GruSequenceCache fwd, bwd;
  std::size_t seq_len = 0;
};

inline Matrix bigru_run(const BiGru& layer, const std::vector<Matrix>& xs,
                        BiGruCache* cache = nullptr) {
  if (xs.empty()) throw ArgumentError("bidirectional gru needs a non-empty sequence");
  std::vector<Matrix> rev(xs.rbegin(), xs.rend());
  Matrix hf = gru_run(layer.forward_cell, xs, cache ? &cache->fwd : nullptr);
  Matrix hb = gru_run(layer.backward_cell, rev, cache ? &cache->bwd : nullptr);
  if (cache) cache->seq_len = xs.size();
  Matrix out(hf.rows(), hf.cols() + hb.cols());
  out << hf, hb;
  return out;
}

inline Vector bigru_forward(const BiGru& layer, const std::vector<Vector>& sequence) {
  if (sequence.empty()) throw ArgumentError("bidirectional gru needs a non-empty sequence");
  std::vector<Matrix> xs;
  xs.reserve(sequence.size());
  for (const auto& v : sequence) xs.push_back(v.transpose());
  return bigru_run(layer, xs).row(0).transpose();
}

struct BiGruGrads {
  GruGrads fwd, bwd;
  explicit BiGruGrads(const BiGru& l) : fwd(l.forward_cell), bwd(l.backward_cell) {}
  void zero() { fwd.zero(); bwd.zero(); }
};

inline void bigru_backward(const BiGru& layer, const BiGruCache& cache, const Matrix& d_out,
                           BiGruGrads& grads, std::vector<Matrix>* dxs = nullptr) {
  const Eigen::Index h = layer.forward_cell.hidden_size();
  if (d_out.cols() != 2 * h) throw DimensionError("bidirectional gru backward: bad gradient width");
  std::vector<Matrix> dx_f, dx_b;
  gru_backward(layer.forward_cell, cache.fwd, d_out.leftCols(h), grads.fwd, dxs ? &dx_f : nullptr);
  gru_backward(layer.backward_cell, cache.bwd, d_out.rightCols(h), grads.bwd,
               dxs ? &dx_b : nullptr);
  if (dxs) {
    dxs->clear();
    dxs->resize(cache.seq_len);
    for (std::size_t t = 0; t < cache.seq_len; ++t)
      (*dxs)[t] = dx_f[t] + dx_b[cache.seq_len - 1 - t];
  }
}

// ---------------------------------------------------------------------------
// Losses. Both return the scalar and the gradient w.r.t. predictions, and
// reject non-finite rows naming the batch index.

struct LossResult {
  double value = 0.0;
  Matrix grad;
};

inline void check_finite_rows(const Matrix& pred, const char* what) {
  for (Eigen::Index i = 0; i < pred.rows(); ++i)
    if (!pred.row(i).allFinite())
      throw NumericError(std::string(what) + ": non-finite value at batch index " +
                         std::to_string(i));
}

inline LossResult mse_loss(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw DimensionError("mse: prediction and target shapes differ");
  check_finite_rows(pred, "mse");
  const double n = static_cast<double>(pred.size());
  Matrix diff = pred - target;
  LossResult r;
  r.value = diff.array().square().sum() / n;
  r.grad = (2.0 / n) * diff;
  return r;
}

inline LossResult cross_entropy_loss(const Matrix& probs, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != probs.rows())
    throw DimensionError("cross entropy: one label per row required");
  check_finite_rows(probs, "cross entropy");
  const double n = static_cast<double>(probs.rows());
  LossResult r;
  r.grad = Matrix::Zero(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= probs.cols())
      throw ArgumentError("cross entropy: label " + std::to_string(y) + " out of range at row " +
                          std::to_string(i));
    const double p = std::max(probs(i, y), 1e-15);
    r.value -= std::log(p) / n;
    r.grad(i, y) = -1.0 / (n * p);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training configuration and Adam.

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 50;
  int batch_size = 64;
  double dropout_rate = 0.1;
  double input_noise_sigma = 0.05;
  std::uint64_t seed = 0;
  std::pair<double, double> moment_decays{0.9, 0.999};
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ArgumentError("learning_rate must be positive");
    if (epochs < 0) throw ArgumentError("epochs must be non-negative");
    if (batch_size < 1) throw ArgumentError("batch_size must be at least 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw ArgumentError("dropout_rate must lie in [0,1)");
    if (!(input_noise_sigma >= 0.0)) throw ArgumentError("input_noise_sigma must be non-negative");
    if (!(moment_decays.first >= 0.0 && moment_decays.first < 1.0) ||
        !(moment_decays.second >= 0.0 && moment_decays.second < 1.0))
      throw ArgumentError("moment decays must lie in [0,1)");
    if (!(epsilon > 0.0)) throw ArgumentError("epsilon must be positive");
  }
};

struct AdamState {
  std::vector<Vector> m, v;
  std::int64_t step = 0;

  void init(const std::vector<ParamView>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.push_back(Vector::Zero(p.size));
      v.push_back(Vector::Zero(p.size));
    }
    step = 0;
  }
};

inline void optimize_step(const std::vector<ParamView>& params, AdamState& state,
                          const TrainConfig& cfg) {
  if (state.m.size() != params.size()) throw DimensionError("optimizer state does not match parameters");
  const double b1 = cfg.moment_decays.first;
  const double b2 = cfg.moment_decays.second;
  ++state.step;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const ParamView& p = params[k];
    if (state.m[k].size() != p.size) throw DimensionError("optimizer slot size mismatch");
    double* m = state.m[k].data();
    double* v = state.v[k].data();
    for (Eigen::Index i = 0; i < p.size; ++i) {
      const double g = p.grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      p.value[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
    }
  }
}

}  // namespace twinforge::nn
