#pragma once

// Local outlier factor in novelty mode: neighbourhoods come from the clean
// training rows only, and the attack threshold is a training-score quantile.

#include "dodem/ocsvm.hpp"

namespace dodem {

struct Neighbour {
  double distance;
  std::size_t index;
};

/// The k nearest training rows to `q`, ordered by (distance, index).
/// `skip` excludes one training index (the query itself during fitting).
inline std::vector<Neighbour> nearest(const FeatureRows& train, std::span<const double> q, std::size_t k,
                                      std::size_t skip = static_cast<std::size_t>(-1)) {
  std::vector<Neighbour> all;
  all.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i)
    if (i != skip) all.push_back({std::sqrt(squared_distance(train[i], q)), i});
  const auto less = [](const Neighbour& a, const Neighbour& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
  };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), less);
  all.resize(k);
  return all;
}

/// Linear-interpolation quantile, q in [0, 1].
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw InputError("quantile of empty set");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct LofModel {
  Scaler scaler;
  FeatureRows train;  // scaled
  std::size_t k = 20;
  double contamination = 0.1;
  std::vector<double> k_distance;
  std::vector<double> lrd;
  std::vector<double> train_scores;
  double threshold = 0.0;

  static constexpr double kDensityGuard = 1e-10;

  double score_scaled(std::span<const double> q, std::size_t skip = static_cast<std::size_t>(-1)) const {
    const auto nb = nearest(train, q, k, skip);
    double reach = 0.0, dens = 0.0;
    for (const auto& n : nb) {
      reach += std::max(k_distance[n.index], n.distance);
      dens += lrd[n.index];
    }
    const double kd = static_cast<double>(k);
    const double own = 1.0 / (reach / kd + kDensityGuard);
    return dens / kd / own;
  }

  double score(std::span<const double> features) const { return score_scaled(scaler.apply(features)); }

  Detection decide(std::span<const double> features) const {
    const double s = score(features);
    return {s, s > threshold};
  }

  /// Threshold for another contamination level without refitting.
  void set_contamination(double c) {
    if (!(c > 0.0 && c <= 0.5)) throw InputError("contamination must lie in (0, 0.5]");
    contamination = c;
    threshold = quantile(train_scores, 1.0 - c);
  }
};

inline LofModel lof_fit(const FeatureRows& raw, std::size_t k = 20, double contamination = 0.1) {
  if (k < 1) throw InputError("LOF needs k >= 1");
  if (raw.size() <= k) throw InputError("LOF needs more training rows than neighbours");
  LofModel m;
  m.k = k;
  m.scaler = Scaler::fit(raw);
  m.train = m.scaler.apply(raw);
  const std::size_t n = m.train.size();
  std::vector<std::vector<Neighbour>> nbrs(n);
  parallel_for(n, [&](std::size_t i) { nbrs[i] = nearest(m.train, m.train[i], k, i); });
  m.k_distance.resize(n);
  for (std::size_t i = 0; i < n; ++i) m.k_distance[i] = nbrs[i].back().distance;
  m.lrd.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double reach = 0.0;
    for (const auto& nb : nbrs[i]) reach += std::max(m.k_distance[nb.index], nb.distance);
    m.lrd[i] = 1.0 / (reach / static_cast<double>(k) + LofModel::kDensityGuard);
  }
  m.train_scores.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double dens = 0.0;
    for (const auto& nb : nbrs[i]) dens += m.lrd[nb.index];
    m.train_scores[i] = dens / static_cast<double>(k) / m.lrd[i];
  }
  m.set_contamination(contamination);
  return m;
}

inline void to_json(nlohmann::json& j, const LofModel& m) {
  j = {{"kind", "lof"}, {"scaler", m.scaler}, {"train", m.train}, {"k", m.k}, {"contamination", m.contamination},
       {"k_distance", m.k_distance}, {"lrd", m.lrd}, {"train_scores", m.train_scores}, {"threshold", m.threshold}};
}

inline void from_json(const nlohmann::json& j, LofModel& m) {
  m.scaler = j.at("scaler").get<Scaler>();
  m.train = j.at("train").get<FeatureRows>();
  m.k = j.at("k").get<std::size_t>();
  m.contamination = j.at("contamination").get<double>();
  m.k_distance = j.at("k_distance").get<std::vector<double>>();
  m.lrd = j.at("lrd").get<std::vector<double>>();
  m.train_scores = j.at("train_scores").get<std::vector<double>>();
  m.threshold = j.at("threshold").get<double>();
  if (m.k_distance.size() != m.train.size() || m.lrd.size() != m.train.size()) throw InputError("inconsistent LOF model");
}

}  // namespace dodem
