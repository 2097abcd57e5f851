#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <twinforge/neural.hpp>

// Utilities shared by the unit suites and the acceptance runner.

namespace testutil {

// Straight-line scalar transcription of the gating recurrences, written
// independently of the library implementation (plain loops, no Eigen ops).
inline twinforge::Vector oracle_gru_step(const twinforge::nn::GruCell& c,
                                         const twinforge::Vector& x, const twinforge::Vector& h) {
  const Eigen::Index H = c.hidden_size();
  const Eigen::Index D = c.input_size();
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  twinforge::Vector out(H);
  for (Eigen::Index i = 0; i < H; ++i) {
    double ar = c.b_r(i), az = c.b_z(i);
    for (Eigen::Index j = 0; j < D; ++j) {
      ar += c.W_xr(i, j) * x(j);
      az += c.W_xz(i, j) * x(j);
    }
    for (Eigen::Index j = 0; j < H; ++j) {
      ar += c.W_hr(i, j) * h(j);
      az += c.W_hz(i, j) * h(j);
    }
    const double r = sig(ar);
    const double z = sig(az);
    double q = 0.0;
    for (Eigen::Index j = 0; j < H; ++j) q += c.W_hh(i, j) * h(j);
    double ac = c.b_h(i) + r * q;
    for (Eigen::Index j = 0; j < D; ++j) ac += c.W_xh(i, j) * x(j);
    const double cand = std::tanh(ac);
    out(i) = (1.0 - z) * h(i) + z * cand;
  }
  return out;
}

struct FdResult {
  double max_err = 0.0;
  std::size_t checked = 0;
};

// Central-difference check. The grad slots of `params` must already hold the
// analytic gradients of `loss`, and `loss` must be a pure evaluation (it may
// not touch the grad slots).
template <class LossFn>
FdResult fd_check(const std::vector<twinforge::nn::ParamView>& params, LossFn&& loss,
                  double h = 1e-5) {
  FdResult res;
  for (const auto& p : params) {
    for (Eigen::Index i = 0; i < p.size; ++i) {
      const double analytic = p.grad[i];
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double up = loss();
      p.value[i] = saved - h;
      const double down = loss();
      p.value[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double rel =
          std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-6});
      res.max_err = std::max(res.max_err, rel);
      ++res.checked;
    }
  }
  return res;
}

inline void fill_uniform(twinforge::Matrix& m, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = u(rng);
}

inline void fill_uniform(twinforge::Vector& v, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = u(rng);
}

inline twinforge::nn::GruCell random_cell(Eigen::Index input, Eigen::Index hidden,
                                          std::mt19937_64& rng, double scale = 1.0) {
  twinforge::nn::GruCell c(input, hidden, rng());
  fill_uniform(c.W_xr, rng, -scale, scale);
  fill_uniform(c.W_hr, rng, -scale, scale);
  fill_uniform(c.W_xz, rng, -scale, scale);
  fill_uniform(c.W_hz, rng, -scale, scale);
  fill_uniform(c.W_xh, rng, -scale, scale);
  fill_uniform(c.W_hh, rng, -scale, scale);
  fill_uniform(c.b_r, rng, -scale, scale);
  fill_uniform(c.b_z, rng, -scale, scale);
  fill_uniform(c.b_h, rng, -scale, scale);
  return c;
}

inline std::filesystem::path make_temp_dir(const std::string& tag) {
  static std::mt19937_64 rng{std::random_device{}()};
  auto dir = std::filesystem::temp_directory_path() /
             ("twinforge-" + tag + "-" + std::to_string(rng() & 0xffffff));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
