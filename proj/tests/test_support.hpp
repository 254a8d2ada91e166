#pragma once

// Test-only helpers: random inputs and finite-difference oracles that are
// deliberately independent of the library's backward passes.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "dodem/core.hpp"
#include "dodem/models.hpp"
#include "dodem/train.hpp"

namespace dodem::testing {

inline Matrix random_window(std::size_t steps, std::size_t channels, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  Matrix m(steps, channels);
  for (auto& v : m.values()) v = g(rng);
  return m;
}

/// f(x) = w . vec(x) + b as a network.
inline TrainedModel linear_model(int steps, int channels, std::vector<double> weights, double bias) {
  nn::Topology topo = nn::TopologyBuilder(steps, channels).branch().flatten().head().dense(1, nn::Activation::linear).build();
  weights.push_back(bias);
  return TrainedModel{ModelSpec{}, nn::Network(std::move(topo), std::move(weights)), 0, {}};
}

// Batch MSE evaluated by plain forward passes only.
inline double fd_loss(const nn::Network& net, const std::vector<Matrix>& xs, const std::vector<double>& ys) {
  double s = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = net.predict(xs[i]) - ys[i];
    s += r * r;
  }
  return s / static_cast<double>(xs.size());
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

inline double rel_error(double a, double b) {
  const double denom = std::max(std::abs(a), std::abs(b));
  return denom == 0.0 ? 0.0 : std::abs(a - b) / denom;
}

/// Central differences over every parameter and every input coordinate of
/// the first window, compared against `analytic` on coordinates whose
/// analytic magnitude exceeds `floor`.
inline GradCheck finite_difference_check(const nn::Network& net, const std::vector<Matrix>& xs,
                                         const std::vector<double>& ys, const GradientResult& analytic,
                                         double h = 1e-5, double floor = 1e-6) {
  GradCheck out;
  nn::Network probe = net;
  auto params = probe.mutable_params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (std::abs(analytic.param_grads[k]) <= floor) continue;
    const double orig = params[k];
    params[k] = orig + h;
    const double up = fd_loss(probe, xs, ys);
    params[k] = orig - h;
    const double down = fd_loss(probe, xs, ys);
    params[k] = orig;
    out.max_rel_error = std::max(out.max_rel_error, rel_error(analytic.param_grads[k], (up - down) / (2 * h)));
    ++out.checked;
  }
  std::vector<Matrix> shifted = xs;
  for (std::size_t i = 0; i < xs[0].size(); ++i) {
    const double a = analytic.input_grads[0][i];
    if (std::abs(a) <= floor) continue;
    shifted[0][i] = xs[0][i] + h;
    const double up = fd_loss(net, shifted, ys);
    shifted[0][i] = xs[0][i] - h;
    const double down = fd_loss(net, shifted, ys);
    shifted[0][i] = xs[0][i];
    out.max_rel_error = std::max(out.max_rel_error, rel_error(a, (up - down) / (2 * h)));
    ++out.checked;
  }
  return out;
}

inline GradCheck check_architecture(Architecture arch, double width_scale, int steps, int channels,
                                    std::uint64_t seed, double h = 1e-5, double output_scale = 1.0) {
  ModelSpec spec;
  spec.architecture = arch;
  spec.width_scale = width_scale;
  spec.output_scale = output_scale;
  const TrainedModel m = build_model(spec, steps, channels, seed);
  std::vector<Matrix> xs{random_window(steps, channels, seed + 1), random_window(steps, channels, seed + 2)};
  std::vector<double> ys{m.predict(xs[0]) + 1.0, m.predict(xs[1]) - 0.5};
  std::vector<const Matrix*> ptrs{&xs[0], &xs[1]};
  const GradientResult g = backward(m, ptrs, ys);
  return finite_difference_check(m.net, xs, ys, g, h);
}

}  // namespace dodem::testing
