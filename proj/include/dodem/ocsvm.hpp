#pragma once

// One-class SVM with a Gaussian kernel, solved in the dual by SMO with
// second-order working-set selection.

#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dodem/core.hpp"

namespace dodem {

using FeatureRows = std::vector<std::vector<double>>;

struct Detection {
  double score = 0.0;  // larger is more anomalous
  bool attack = false;
};

/// Per-feature z-score fitted on clean training rows. Constant features
/// keep unit scale.
struct Scaler {
  std::vector<double> mean, scale;

  static Scaler fit(const FeatureRows& x) {
    if (x.empty()) throw InputError("cannot fit a scaler on no rows");
    const std::size_t d = x[0].size();
    Scaler s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    for (const auto& r : x) {
      if (r.size() != d) throw InputError("ragged feature rows");
      for (std::size_t j = 0; j < d; ++j) s.mean[j] += r[j];
    }
    for (auto& m : s.mean) m /= static_cast<double>(x.size());
    for (const auto& r : x)
      for (std::size_t j = 0; j < d; ++j) s.scale[j] += (r[j] - s.mean[j]) * (r[j] - s.mean[j]);
    for (auto& v : s.scale) {
      v = std::sqrt(v / static_cast<double>(x.size()));
      if (!(v > 1e-12)) v = 1.0;
    }
    return s;
  }

  std::vector<double> apply(std::span<const double> r) const {
    if (r.size() != mean.size()) throw InputError("feature dimension mismatch");
    std::vector<double> out(r.size());
    for (std::size_t j = 0; j < r.size(); ++j) out[j] = (r[j] - mean[j]) / scale[j];
    return out;
  }

  FeatureRows apply(const FeatureRows& x) const {
    FeatureRows out;
    out.reserve(x.size());
    for (const auto& r : x) out.push_back(apply(r));
    return out;
  }

  friend bool operator==(const Scaler&, const Scaler&) = default;
};

inline void to_json(nlohmann::json& j, const Scaler& s) { j = {{"mean", s.mean}, {"scale", s.scale}}; }
inline void from_json(const nlohmann::json& j, Scaler& s) {
  s.mean = j.at("mean").get<std::vector<double>>();
  s.scale = j.at("scale").get<std::vector<double>>();
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

struct OcsvmParams {
  double nu = 0.01;
  double gamma = 0.0;  // 0 selects 1 / (d * variance of the scaled features)
  double tolerance = 1e-6;
  std::size_t max_iterations = 0;  // 0 selects max(10^7, 100 n)
  std::size_t full_kernel_limit = 3000;
};

struct OcsvmModel {
  Scaler scaler;
  FeatureRows support;  // scaled
  std::vector<double> coef;
  double rho = 0.0;
  double gamma = 0.0;
  double nu = 0.0;
  std::size_t training_size = 0;
  std::size_t iterations = 0;
  double duality_gap = 0.0;
  double boundary_tolerance = 0.0;  // solver tolerance; scores within it lie on the boundary

  double kernel_sum(std::span<const double> scaled) const {
    double s = 0.0;
    for (std::size_t i = 0; i < support.size(); ++i) s += coef[i] * std::exp(-gamma * squared_distance(support[i], scaled));
    return s;
  }

  /// rho minus the kernel expansion; positive outside the learned region.
  double score(std::span<const double> features) const { return rho - kernel_sum(scaler.apply(features)); }

  Detection decide(std::span<const double> features) const {
    const double s = score(features);
    return {s, s > boundary_tolerance};
  }
};

inline void to_json(nlohmann::json& j, const OcsvmModel& m) {
  j = {{"kind", "ocsvm"}, {"scaler", m.scaler}, {"support", m.support}, {"coef", m.coef}, {"rho", m.rho},
       {"gamma", m.gamma}, {"nu", m.nu}, {"training_size", m.training_size}, {"iterations", m.iterations},
       {"duality_gap", m.duality_gap}, {"boundary_tolerance", m.boundary_tolerance}};
}

inline void from_json(const nlohmann::json& j, OcsvmModel& m) {
  m.scaler = j.at("scaler").get<Scaler>();
  m.support = j.at("support").get<FeatureRows>();
  m.coef = j.at("coef").get<std::vector<double>>();
  m.rho = j.at("rho").get<double>();
  m.gamma = j.at("gamma").get<double>();
  m.nu = j.at("nu").get<double>();
  m.training_size = j.value("training_size", std::size_t{0});
  m.iterations = j.value("iterations", std::size_t{0});
  m.duality_gap = j.value("duality_gap", 0.0);
  m.boundary_tolerance = j.value("boundary_tolerance", 0.0);
  if (m.support.size() != m.coef.size()) throw InputError("OCSVM support and coefficient counts differ");
}

inline double rbf(std::span<const double> a, std::span<const double> b, double gamma) {
  return std::exp(-gamma * squared_distance(a, b));
}

namespace detail {

class KernelRows {
 public:
  KernelRows(const FeatureRows& x, double gamma, std::size_t full_limit) : x_(x), gamma_(gamma), n_(x.size()) {
    full_ = n_ <= full_limit;
    if (full_) {
      q_.assign(n_ * n_, 0.0);
      for (std::size_t i = 0; i < n_; ++i) {
        q_[i * n_ + i] = 1.0;
        for (std::size_t j = i + 1; j < n_; ++j) q_[i * n_ + j] = q_[j * n_ + i] = rbf(x_[i], x_[j], gamma_);
      }
    } else {
      scratch_[0].resize(n_);
      scratch_[1].resize(n_);
    }
  }

  // Row i; `slot` selects one of two scratch buffers when rows are computed
  // on demand.
  std::span<const double> row(std::size_t i, int slot) {
    if (full_) return {q_.data() + i * n_, n_};
    auto& buf = scratch_[slot];
    for (std::size_t j = 0; j < n_; ++j) buf[j] = i == j ? 1.0 : rbf(x_[i], x_[j], gamma_);
    return buf;
  }

 private:
  const FeatureRows& x_;
  double gamma_;
  std::size_t n_;
  bool full_ = false;
  std::vector<double> q_;
  std::vector<double> scratch_[2];
};

}  // namespace detail

/// Fits on clean feature rows (unscaled; the scaler is fitted here).
/// Dual: minimize 1/2 a'Qa subject to 0 <= a_i <= 1/(nu n), sum a = 1.
inline OcsvmModel ocsvm_fit(const FeatureRows& raw, const OcsvmParams& p = {}) {
  const std::size_t n = raw.size();
  if (n < 2) throw InputError("OCSVM needs at least 2 training rows");
  if (!(p.nu > 0.0 && p.nu <= 1.0)) throw InputError("nu must lie in (0, 1]");
  OcsvmModel m;
  m.scaler = Scaler::fit(raw);
  const FeatureRows x = m.scaler.apply(raw);
  m.nu = p.nu;
  m.training_size = n;
  m.gamma = p.gamma;
  if (m.gamma <= 0.0) {
    double s = 0.0, ss = 0.0;
    std::size_t cnt = 0;
    for (const auto& r : x)
      for (double v : r) {
        s += v;
        ss += v * v;
        ++cnt;
      }
    const double mu = s / static_cast<double>(cnt);
    const double var = ss / static_cast<double>(cnt) - mu * mu;
    m.gamma = var > 0.0 ? 1.0 / (static_cast<double>(x[0].size()) * var) : 1.0;
  }
  const double c = 1.0 / (p.nu * static_cast<double>(n));
  detail::KernelRows q(x, m.gamma, p.full_kernel_limit);

  // Feasible start: as many coefficients at the upper bound as fit, then the
  // remainder on the next one.
  std::vector<double> alpha(n, 0.0);
  double left = 1.0;
  for (std::size_t i = 0; i < n && left > 0.0; ++i) {
    alpha[i] = std::min(c, left);
    left -= alpha[i];
  }
  std::vector<double> grad(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (alpha[i] == 0.0) continue;
    const auto qi = q.row(i, 0);
    for (std::size_t t = 0; t < n; ++t) grad[t] += qi[t] * alpha[i];
  }

  const double tau = 1e-12;
  const std::size_t max_iter = p.max_iterations ? p.max_iterations : std::max<std::size_t>(10'000'000, 100 * n);
  auto upper = [&](std::size_t t) { return alpha[t] >= c; };
  auto lower = [&](std::size_t t) { return alpha[t] <= 0.0; };
  std::size_t iter = 0;
  bool converged = false;
  for (; iter < max_iter; ++iter) {
    double gmax = -std::numeric_limits<double>::infinity();
    std::size_t i = n;
    for (std::size_t t = 0; t < n; ++t)
      if (!upper(t) && -grad[t] > gmax) {
        gmax = -grad[t];
        i = t;
      }
    if (i == n) {
      converged = true;
      break;
    }
    const auto qi = q.row(i, 0);
    double gmax2 = -std::numeric_limits<double>::infinity();
    double best = std::numeric_limits<double>::infinity();
    std::size_t j = n;
    for (std::size_t t = 0; t < n; ++t) {
      if (lower(t)) continue;
      gmax2 = std::max(gmax2, grad[t]);
      const double b = gmax + grad[t];
      if (b > 0.0) {
        double a = qi[i] + 1.0 - 2.0 * qi[t];
        if (a <= 0.0) a = tau;
        if (-(b * b) / a < best) {
          best = -(b * b) / a;
          j = t;
        }
      }
    }
    if (gmax + gmax2 < p.tolerance || j == n) {
      converged = true;
      break;
    }
    const auto qj = q.row(j, 1);
    double quad = qi[i] + qj[j] - 2.0 * qi[j];
    if (quad <= 0.0) quad = tau;
    const double old_i = alpha[i], old_j = alpha[j];
    const double delta = (grad[i] - grad[j]) / quad;
    const double sum = alpha[i] + alpha[j];
    alpha[i] -= delta;
    alpha[j] += delta;
    if (sum > c) {
      if (alpha[i] > c) {
        alpha[i] = c;
        alpha[j] = sum - c;
      }
    } else if (alpha[j] < 0.0) {
      alpha[j] = 0.0;
      alpha[i] = sum;
    }
    if (sum > c) {
      if (alpha[j] > c) {
        alpha[j] = c;
        alpha[i] = sum - c;
      }
    } else if (alpha[i] < 0.0) {
      alpha[i] = 0.0;
      alpha[j] = sum;
    }
    const double di = alpha[i] - old_i, dj = alpha[j] - old_j;
    for (std::size_t t = 0; t < n; ++t) grad[t] += qi[t] * di + qj[t] * dj;
  }

  // Offset: mean gradient over free coefficients, else the midpoint of the
  // feasible interval.
  double ub = std::numeric_limits<double>::infinity(), lb = -ub, sum_free = 0.0;
  std::size_t free = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (upper(t)) lb = std::max(lb, grad[t]);
    else if (lower(t)) ub = std::min(ub, grad[t]);
    else {
      sum_free += grad[t];
      ++free;
    }
  }
  m.rho = free > 0 ? sum_free / static_cast<double>(free) : (ub + lb) / 2.0;

  double quad_form = 0.0, slack = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    quad_form += alpha[t] * grad[t];
    slack += std::max(0.0, m.rho - grad[t]);
  }
  m.duality_gap = quad_form + c * slack - m.rho;
  m.iterations = iter;
  m.boundary_tolerance = p.tolerance;
  if (!converged) {
    std::ostringstream msg;
    msg << "OCSVM did not converge after " << iter << " iterations (duality gap " << m.duality_gap << ")";
    throw NumericError(msg.str());
  }
  for (std::size_t t = 0; t < n; ++t)
    if (alpha[t] > 0.0) {
      m.support.push_back(x[t]);
      m.coef.push_back(alpha[t]);
    }
  return m;
}

}  // namespace dodem
