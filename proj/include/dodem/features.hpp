#pragma once

// The 37-value detection feature vector of a window: 8 summary statistics
// and 4 chaos measures of the aggregate signal, then 25 SDAE codes.

#include <array>
#include <ostream>

#include "dodem/chaos.hpp"
#include "dodem/cmapss.hpp"
#include "dodem/sdae.hpp"

namespace dodem {

inline constexpr std::size_t kStatFeatures = 8;
inline constexpr std::size_t kChaosFeatures = 4;
inline constexpr std::size_t kLearnedFeatures = 25;
inline constexpr std::size_t kFeatureCount = kStatFeatures + kChaosFeatures + kLearnedFeatures;

inline const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n{"min", "max", "mean", "median", "std", "range", "mean_max_ratio", "min_max_ratio",
                               "sampen", "dfa", "hurst", "lyapunov"};
    for (std::size_t i = 0; i < kLearnedFeatures; ++i) n.push_back("sdae_" + std::to_string(i));
    return n;
  }();
  return names;
}

struct FeatureVector {
  std::array<double, kFeatureCount> values{};
  std::array<bool, kChaosFeatures> chaos_guarded{};

  std::span<const double> stat() const { return std::span(values).first(kStatFeatures); }
  std::span<const double> chaos() const { return std::span(values).subspan(kStatFeatures, kChaosFeatures); }
  std::span<const double> learned() const { return std::span(values).last(kLearnedFeatures); }

  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

/// Per-timestep mean over the channels selected by `mask` (all channels when
/// the mask is empty).
inline std::vector<double> aggregate_signal(const Matrix& window, const std::vector<bool>& mask = {}) {
  if (window.cols() == 0) throw InputError("window has no channels");
  if (!mask.empty() && mask.size() != window.cols()) throw InputError("channel mask size mismatch");
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < window.cols(); ++c)
    if (mask.empty() || mask[c]) cols.push_back(c);
  if (cols.empty()) throw InputError("channel mask selects nothing");
  std::vector<double> out(window.rows(), 0.0);
  for (std::size_t t = 0; t < window.rows(); ++t) {
    for (std::size_t c : cols) out[t] += window(t, c);
    out[t] /= static_cast<double>(cols.size());
  }
  return out;
}

/// min, max, mean, median, population std, range, mean/max, min/max. Both
/// ratios are 0 when max is 0.
inline std::array<double, kStatFeatures> stat_features(std::span<const double> s) {
  if (s.size() < 2) throw InputError("statistical features need at least 2 points");
  std::vector<double> sorted(s.begin(), s.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double lo = sorted.front(), hi = sorted.back();
  const double med = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  const double mu = mean(s);
  return {lo, hi, mu, med, stddev(s), hi - lo, hi == 0.0 ? 0.0 : mu / hi, hi == 0.0 ? 0.0 : lo / hi};
}

inline std::array<chaos::Estimate, kChaosFeatures> chaos_features(std::span<const double> s,
                                                                  const chaos::Config& cfg = {}) {
  return {chaos::sample_entropy(s, cfg), chaos::dfa_exponent(s, cfg), chaos::hurst_exponent(s, cfg),
          chaos::lyapunov_largest(s, cfg)};
}

/// Everything needed to featurize a normalized window.
struct FeatureExtractor {
  std::vector<bool> informative;  // channel mask for the aggregate signal
  SdaeModel sdae;
  chaos::Config chaos_config;

  FeatureVector operator()(const Matrix& window) const {
    FeatureVector f;
    const auto s = aggregate_signal(window, informative);
    const auto st = stat_features(s);
    std::copy(st.begin(), st.end(), f.values.begin());
    const auto ch = chaos_features(s, chaos_config);
    for (std::size_t k = 0; k < kChaosFeatures; ++k) {
      f.values[kStatFeatures + k] = ch[k].value;
      f.chaos_guarded[k] = ch[k].guarded;
    }
    const auto code = sdae.encode(window);
    if (code.size() != kLearnedFeatures) throw InputError("SDAE code size must be 25");
    std::copy(code.begin(), code.end(), f.values.begin() + kStatFeatures + kChaosFeatures);
    if (!all_finite(f.values)) throw NumericError("non-finite feature");
    return f;
  }
};

inline FeatureVector featurize(const Matrix& window, const FeatureExtractor& fx) { return fx(window); }

/// Feature rows aligned with their samples.
struct FeatureMatrix {
  std::vector<FeatureVector> rows;
  std::vector<int> unit_id;
  std::vector<int> end_cycle;
  std::vector<bool> attack_mask;

  std::size_t size() const { return rows.size(); }

  std::vector<std::vector<double>> values() const {
    std::vector<std::vector<double>> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.emplace_back(r.values.begin(), r.values.end());
    return out;
  }
};

/// Featurizes every sample; `mask` (optional) records which were attacked.
inline FeatureMatrix extract_features(const FeatureExtractor& fx, std::span<const WindowedSample> samples,
                                      const std::vector<bool>& mask = {}) {
  if (!mask.empty() && mask.size() != samples.size()) throw InputError("attack mask size mismatch");
  FeatureMatrix out;
  out.rows.resize(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) { out.rows[i] = fx(samples[i].window); });
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.unit_id.push_back(samples[i].unit_id);
    out.end_cycle.push_back(samples[i].end_cycle);
    out.attack_mask.push_back(!mask.empty() && mask[i]);
  }
  return out;
}

inline void write_feature_csv(std::ostream& out, const FeatureMatrix& fm) {
  out << "unit_id,end_cycle,attack_mask";
  for (const auto& n : feature_names()) out << ',' << n;
  out << '\n';
  for (std::size_t i = 0; i < fm.size(); ++i) {
    out << fm.unit_id[i] << ',' << fm.end_cycle[i] << ',' << (fm.attack_mask[i] ? 1 : 0);
    for (double v : fm.rows[i].values) out << ',' << format_double(v);
    out << '\n';
  }
}

}  // namespace dodem
