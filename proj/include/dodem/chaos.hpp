#pragma once

// Nonlinear-dynamics descriptors of a scalar series: sample entropy, DFA,
// rescaled-range Hurst exponent and the largest Lyapunov exponent.

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "dodem/core.hpp"

namespace dodem::chaos {

/// An estimate, or a fixed fallback when the estimator is undefined for the
/// input (`guarded` set).
struct Estimate {
  double value = 0.0;
  bool guarded = false;
};

struct Config {
  int entropy_m = 2;
  double entropy_r = 0.2;  // times the series std
  int ladder_sizes = 8;
  int min_box = 4;
  int embedding_dim = 4;
  int lag = 1;
  int theiler = 10;
  int trajectory = 6;
};

/// Sample entropy -ln(A/B) with Chebyshev matching at tolerance r * std.
/// B = 0 yields 0; A = 0 yields ln(B + 1). Both are flagged.
inline Estimate sample_entropy(std::span<const double> s, const Config& cfg = {}) {
  const std::size_t m = static_cast<std::size_t>(cfg.entropy_m);
  if (s.size() < m + 2) throw InputError("sample entropy needs at least m + 2 points");
  const double r = cfg.entropy_r * stddev(s);
  const std::size_t templates = s.size() - m;
  std::size_t a = 0, b = 0;
  for (std::size_t i = 0; i + 1 < templates; ++i) {
    for (std::size_t j = i + 1; j < templates; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < m && d <= r; ++k) d = std::max(d, std::abs(s[i + k] - s[j + k]));
      if (d > r) continue;
      ++b;
      if (std::abs(s[i + m] - s[j + m]) <= r) ++a;
    }
  }
  if (b == 0) return {0.0, true};
  if (a == 0) return {std::log(static_cast<double>(b) + 1.0), true};
  return {-std::log(static_cast<double>(a) / static_cast<double>(b)), false};
}

/// Box sizes: `count` log-spaced values from min_box to n/4, rounded, unique.
inline std::vector<std::size_t> box_ladder(std::size_t n, const Config& cfg = {}) {
  const double lo = std::log(static_cast<double>(cfg.min_box));
  const double hi = std::log(static_cast<double>(n / 4));
  std::vector<std::size_t> out;
  for (int k = 0; k < cfg.ladder_sizes; ++k) {
    const double t = cfg.ladder_sizes == 1 ? 0.0 : static_cast<double>(k) / (cfg.ladder_sizes - 1);
    const auto v = static_cast<std::size_t>(std::llround(std::exp(lo + t * (hi - lo))));
    if (out.empty() || v != out.back()) out.push_back(v);
  }
  return out;
}

namespace detail {

inline double linear_residual_ms(std::span<const double> seg) {
  const std::size_t n = seg.size();
  const double tm = (static_cast<double>(n) - 1.0) / 2.0;
  double ym = 0.0;
  for (double v : seg) ym += v;
  ym /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    sxy += (static_cast<double>(t) - tm) * (seg[t] - ym);
    sxx += (static_cast<double>(t) - tm) * (static_cast<double>(t) - tm);
  }
  const double slope = sxy / sxx;
  double ss = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double e = seg[t] - (ym + slope * (static_cast<double>(t) - tm));
    ss += e * e;
  }
  return ss / static_cast<double>(n);
}

inline bool degenerate(std::span<const double> s) {
  return std::all_of(s.begin(), s.end(), [&](double v) { return v == s[0]; });
}

// Anis-Lloyd-Peters expected R/S of n independent Gaussian samples.
inline double expected_rs(std::size_t n) {
  const double nd = static_cast<double>(n);
  double tail = 0.0;
  for (std::size_t i = 1; i < n; ++i) tail += std::sqrt((nd - static_cast<double>(i)) / static_cast<double>(i));
  using std::numbers::pi;
  const double front = n <= 340 ? std::exp(std::lgamma((nd - 1.0) / 2.0) - std::lgamma(nd / 2.0)) / std::sqrt(pi)
                                : 1.0 / std::sqrt(nd * pi / 2.0);
  return (nd - 0.5) / nd * front * tail;
}

}  // namespace detail

/// Detrended fluctuation analysis exponent over non-overlapping boxes with
/// linear detrending of the integrated profile.
inline Estimate dfa_exponent(std::span<const double> s, const Config& cfg = {}) {
  if (s.size() < 20) throw InputError("DFA needs at least 20 points");
  if (detail::degenerate(s)) return {0.0, true};
  const double mu = mean(s);
  std::vector<double> profile(s.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) profile[i] = acc += s[i] - mu;
  std::vector<double> logn, logf;
  for (std::size_t n : box_ladder(s.size(), cfg)) {
    const std::size_t boxes = s.size() / n;
    double ms = 0.0;
    for (std::size_t b = 0; b < boxes; ++b) ms += detail::linear_residual_ms(std::span(profile).subspan(b * n, n));
    const double f = std::sqrt(ms / static_cast<double>(boxes));
    if (!(f > 0.0)) return {0.0, true};
    logn.push_back(std::log(static_cast<double>(n)));
    logf.push_back(std::log(f));
  }
  if (logn.size() < 2) return {0.0, true};
  return {ls_slope(logn, logf), false};
}

/// Rescaled-range Hurst exponent with the Anis-Lloyd-Peters small-sample
/// correction: slope of log(R/S) - log E[R/S] against log n, plus 0.5.
inline Estimate hurst_exponent(std::span<const double> s, const Config& cfg = {}) {
  if (s.size() < 20) throw InputError("Hurst estimation needs at least 20 points");
  if (detail::degenerate(s)) return {0.0, true};
  std::vector<double> logn, logrs;
  for (std::size_t n : box_ladder(s.size(), cfg)) {
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t b = 0; b < s.size() / n; ++b) {
      const auto seg = s.subspan(b * n, n);
      const double sd = stddev(seg);
      if (!(sd > 0.0)) continue;
      const double mu = mean(seg);
      double acc = 0.0, lo = 0.0, hi = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        acc += seg[t] - mu;
        lo = t == 0 ? acc : std::min(lo, acc);
        hi = t == 0 ? acc : std::max(hi, acc);
      }
      total += (hi - lo) / sd;
      ++used;
    }
    if (used == 0 || !(total > 0.0)) continue;
    logn.push_back(std::log(static_cast<double>(n)));
    logrs.push_back(std::log(total / static_cast<double>(used)) - std::log(detail::expected_rs(n)));
  }
  if (logn.size() < 2) return {0.0, true};
  return {ls_slope(logn, logrs) + 0.5, false};
}

/// Rosenstein estimate: mean log distance between each delay vector and its
/// nearest neighbour outside the Theiler window, followed for `trajectory`
/// steps; the exponent is the slope of that curve.
inline Estimate lyapunov_largest(std::span<const double> s, const Config& cfg = {}) {
  if (s.size() < 50) throw InputError("Lyapunov estimation needs at least 50 points");
  const std::size_t dim = static_cast<std::size_t>(cfg.embedding_dim);
  const std::size_t lag = static_cast<std::size_t>(cfg.lag);
  const std::size_t steps = static_cast<std::size_t>(cfg.trajectory);
  const std::size_t theiler = static_cast<std::size_t>(cfg.theiler);
  if (s.size() <= (dim - 1) * lag + steps) return {0.0, true};
  const std::size_t vectors = s.size() - (dim - 1) * lag;
  const std::size_t usable = vectors - steps;
  auto dist = [&](std::size_t i, std::size_t j) {
    double d = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      const double e = s[i + k * lag] - s[j + k * lag];
      d += e * e;
    }
    return std::sqrt(d);
  };
  std::vector<std::size_t> neighbour(usable, usable);
  for (std::size_t i = 0; i < usable; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < usable; ++j) {
      if ((i > j ? i - j : j - i) <= theiler) continue;
      const double d = dist(i, j);
      if (d < best) {
        best = d;
        neighbour[i] = j;
      }
    }
  }
  std::vector<double> ks, curve;
  for (std::size_t k = 0; k < steps; ++k) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < usable; ++i) {
      if (neighbour[i] == usable) continue;
      const double d = dist(i + k, neighbour[i] + k);
      if (d > 0.0) {
        total += std::log(d);
        ++count;
      }
    }
    if (count == 0) continue;
    ks.push_back(static_cast<double>(k));
    curve.push_back(total / static_cast<double>(count));
  }
  if (ks.size() < 2) return {0.0, true};
  return {ls_slope(ks, curve), false};
}

}  // namespace dodem::chaos
