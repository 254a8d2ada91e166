#pragma once

// White-box gradient-sign attacks on input windows and random injection of
// attacked samples into a test set.

#include <concepts>
#include <numeric>

#include <nlohmann/json.hpp>

#include "dodem/cmapss.hpp"
#include "dodem/models.hpp"

namespace dodem {

/// Anything with a scalar prediction and the input gradient of its squared
/// error: a single model or an ensemble mean.
template <class M>
concept Differentiable = requires(const M& m, const Matrix& x, double y) {
  { m.predict(x) } -> std::convertible_to<double>;
  { m.input_gradient(x, y) } -> std::same_as<Matrix>;
};

enum class AttackMethod { fgsm, bim, mim };

inline std::string to_string(AttackMethod m) {
  switch (m) {
    case AttackMethod::fgsm: return "FGSM";
    case AttackMethod::bim: return "BIM";
    case AttackMethod::mim: return "MIM";
  }
  return "?";
}

inline AttackMethod attack_method_from_string(const std::string& s) {
  for (auto m : {AttackMethod::fgsm, AttackMethod::bim, AttackMethod::mim})
    if (to_string(m) == s) return m;
  throw InputError("unknown attack method '" + s + "'");
}

struct AttackSpec {
  AttackMethod method = AttackMethod::fgsm;
  double epsilon = 0.1;
  int iterations = 100;
  double decay = 1.0;
  bool clip_mim = true;

  /// Iterative step size; 0.001 with the defaults.
  double alpha() const { return epsilon / iterations; }

  void validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw InputError("epsilon must be positive");
    if (iterations < 1) throw InputError("iterations must be >= 1");
    if (!(decay >= 0.0)) throw InputError("decay must be non-negative");
  }

  friend bool operator==(const AttackSpec&, const AttackSpec&) = default;
};

inline void to_json(nlohmann::json& j, const AttackSpec& s) {
  j = {{"method", to_string(s.method)}, {"epsilon", s.epsilon}, {"iterations", s.iterations},
       {"alpha", s.alpha()}, {"decay", s.decay}, {"clip_mim", s.clip_mim}};
}

inline void from_json(const nlohmann::json& j, AttackSpec& s) {
  AttackSpec d;
  s.method = attack_method_from_string(j.value("method", to_string(d.method)));
  s.epsilon = j.value("epsilon", d.epsilon);
  s.iterations = j.value("iterations", d.iterations);
  s.decay = j.value("decay", d.decay);
  s.clip_mim = j.value("clip_mim", d.clip_mim);
  if (j.contains("alpha") && std::abs(j.at("alpha").get<double>() - s.alpha()) > 1e-12)
    throw InputError("alpha must equal epsilon / iterations");
  s.validate();
}

namespace detail {

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

template <Differentiable M>
Matrix checked_gradient(const M& m, const Matrix& x, double y) {
  Matrix g = m.input_gradient(x, y);
  if (!all_finite(g.values())) throw NumericError("non-finite input gradient");
  return g;
}

inline void clip_to_ball(Matrix& adv, const Matrix& x, double eps) {
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = std::clamp(adv[i], x[i] - eps, x[i] + eps);
}

}  // namespace detail

template <Differentiable M>
Matrix fgsm(const M& m, const Matrix& x, double y, double eps) {
  const Matrix g = detail::checked_gradient(m, x, y);
  Matrix adv = x;
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += eps * detail::sign(g[i]);
  return adv;
}

template <Differentiable M>
Matrix bim(const M& m, const Matrix& x, double y, double eps, int iterations) {
  if (iterations < 1) throw InputError("iterations must be >= 1");
  const double alpha = eps / iterations;
  Matrix adv = x;
  for (int it = 0; it < iterations; ++it) {
    const Matrix g = detail::checked_gradient(m, adv, y);
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += alpha * detail::sign(g[i]);
    detail::clip_to_ball(adv, x, eps);
  }
  return adv;
}

/// Momentum iterative attack. Gradients are L1-normalised before entering
/// the accumulator; a gradient with L1 norm below 1e-12 contributes nothing.
template <Differentiable M>
Matrix mim(const M& m, const Matrix& x, double y, double eps, int iterations, double decay, bool clip = true) {
  if (iterations < 1) throw InputError("iterations must be >= 1");
  const double alpha = eps / iterations;
  Matrix adv = x;
  Matrix acc(x.rows(), x.cols());
  for (int it = 0; it < iterations; ++it) {
    const Matrix g = detail::checked_gradient(m, adv, y);
    double l1 = 0.0;
    for (double v : g.values()) l1 += std::abs(v);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = decay * acc[i] + (l1 < 1e-12 ? 0.0 : g[i] / l1);
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += alpha * detail::sign(acc[i]);
  }
  if (clip) detail::clip_to_ball(adv, x, eps);
  return adv;
}

template <Differentiable M>
Matrix craft(const M& m, const Matrix& x, double y, const AttackSpec& spec) {
  switch (spec.method) {
    case AttackMethod::fgsm: return fgsm(m, x, y, spec.epsilon);
    case AttackMethod::bim: return bim(m, x, y, spec.epsilon, spec.iterations);
    case AttackMethod::mim: return mim(m, x, y, spec.epsilon, spec.iterations, spec.decay, spec.clip_mim);
  }
  throw InputError("unknown attack method");
}

struct PerturbedDataset {
  std::vector<WindowedSample> samples;
  std::vector<bool> attack_mask;
  double ratio = 0.0;
  std::uint64_t seed = 0;

  std::size_t attacked_count() const { return static_cast<std::size_t>(std::count(attack_mask.begin(), attack_mask.end(), true)); }
};

/// Attacks the samples at `indices`; labels are kept.
template <Differentiable M>
void attack_indices(const M& m, std::vector<WindowedSample>& samples, std::span<const std::size_t> indices,
                    const AttackSpec& spec) {
  spec.validate();
  parallel_for(indices.size(), [&](std::size_t k) {
    auto& s = samples[indices[k]];
    s.window = craft(m, s.window, s.rul, spec);
  });
}

/// round(ratio * n) distinct indices in [0, n), sorted, drawn under `seed`.
inline std::vector<std::size_t> random_subset(std::size_t n, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw InputError("attack ratio must lie in [0,1]");
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  Rng rng(derive_seed(seed, 0xa77ac));
  auto order = permutation(n, rng);
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

/// Replaces round(ratio * N) samples, drawn uniformly without replacement
/// under `seed`, by attacked versions crafted against `m`.
template <Differentiable M>
PerturbedDataset inject_random(std::vector<WindowedSample> test, const M& m, const AttackSpec& spec, double ratio,
                               std::uint64_t seed) {
  const std::size_t n = test.size();
  const auto order = random_subset(n, ratio, seed);
  attack_indices(m, test, order, spec);
  PerturbedDataset out{std::move(test), std::vector<bool>(n, false), ratio, seed};
  for (std::size_t i : order) out.attack_mask[i] = true;
  return out;
}

/// Every sample attacked.
template <Differentiable M>
std::vector<WindowedSample> attack_all(std::vector<WindowedSample> samples, const M& m, const AttackSpec& spec) {
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  attack_indices(m, samples, all, spec);
  return samples;
}

}  // namespace dodem
