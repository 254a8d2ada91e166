#pragma once

// Hyperparameter sweeps of the novelty detectors scored by F2 against the
// ground-truth attack mask.

#include <array>
#include <variant>

#include "dodem/lof.hpp"
#include "dodem/metrics.hpp"
#include "dodem/ocsvm.hpp"

namespace dodem {

/// Shared grid for OCSVM nu and LOF contamination.
inline constexpr std::array<double, 6> kDetectorGrid{0.001, 0.005, 0.01, 0.05, 0.1, 0.2};

enum class DetectorKind { ocsvm, lof };

inline std::string to_string(DetectorKind k) { return k == DetectorKind::ocsvm ? "OCSVM" : "LOF"; }

inline DetectorKind detector_kind_from_string(const std::string& s) {
  if (s == "OCSVM") return DetectorKind::ocsvm;
  if (s == "LOF") return DetectorKind::lof;
  throw InputError("unknown detector '" + s + "'");
}

using Detector = std::variant<OcsvmModel, LofModel>;

inline Detection decide(const Detector& d, std::span<const double> features) {
  return std::visit([&](const auto& m) { return m.decide(features); }, d);
}

inline std::vector<Detection> decide_all(const Detector& d, const FeatureRows& rows) {
  std::vector<Detection> out(rows.size());
  parallel_for(rows.size(), [&](std::size_t i) { out[i] = decide(d, rows[i]); });
  return out;
}

inline void to_json(nlohmann::json& j, const Detector& d) {
  std::visit([&](const auto& m) { j = m; }, d);
}

inline void from_json(const nlohmann::json& j, Detector& d) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "ocsvm") d = j.get<OcsvmModel>();
  else if (kind == "lof") d = j.get<LofModel>();
  else throw InputError("unknown detector kind '" + kind + "'");
}

struct SweepPoint {
  double param = 0.0;
  Confusion confusion;
  double f2 = 0.0;
  double auc = std::numeric_limits<double>::quiet_NaN();  // NaN when one class is absent
};

struct SweepResult {
  std::vector<SweepPoint> points;
  std::size_t best = 0;

  double best_param() const { return points.at(best).param; }
  double best_f2() const { return points.at(best).f2; }
};

/// Evaluates `evaluate(param)` (returning per-sample detections) once for
/// every grid value and keeps the highest F2; ties go to the smaller value.
template <class Evaluate>
SweepResult sweep_best_f2(std::span<const double> grid, Evaluate&& evaluate, const std::vector<bool>& truth) {
  if (grid.empty()) throw InputError("detector grid is empty");
  const bool both = std::count(truth.begin(), truth.end(), true) > 0 &&
                    std::count(truth.begin(), truth.end(), false) > 0;
  SweepResult r;
  for (double param : grid) {
    const std::vector<Detection> det = evaluate(param);
    std::vector<bool> labels(det.size());
    std::vector<double> scores(det.size());
    for (std::size_t i = 0; i < det.size(); ++i) {
      labels[i] = det[i].attack;
      scores[i] = det[i].score;
    }
    SweepPoint p{param, confusion(labels, truth), 0.0};
    p.f2 = f_beta(p.confusion, 2.0);
    if (both) p.auc = roc_auc(scores, truth);
    r.points.push_back(p);
    const auto& cur = r.points[r.best];
    if (p.f2 > cur.f2 || (p.f2 == cur.f2 && param < cur.param)) r.best = r.points.size() - 1;
  }
  return r;
}

inline SweepResult sweep_ocsvm(const FeatureRows& train, const FeatureRows& test, const std::vector<bool>& truth,
                               std::span<const double> grid = kDetectorGrid, OcsvmParams base = {}) {
  return sweep_best_f2(
      grid,
      [&](double nu) {
        base.nu = nu;
        return decide_all(Detector(ocsvm_fit(train, base)), test);
      },
      truth);
}

inline SweepResult sweep_lof(const FeatureRows& train, const FeatureRows& test, const std::vector<bool>& truth,
                             std::span<const double> grid = kDetectorGrid, std::size_t k = 20) {
  LofModel m = lof_fit(train, k, grid.empty() ? 0.1 : grid[0]);
  std::vector<double> scores(test.size());
  parallel_for(test.size(), [&](std::size_t i) { scores[i] = m.score(test[i]); });
  return sweep_best_f2(
      grid,
      [&](double c) {
        m.set_contamination(c);
        std::vector<Detection> out(scores.size());
        for (std::size_t i = 0; i < scores.size(); ++i) out[i] = {scores[i], scores[i] > m.threshold};
        return out;
      },
      truth);
}

}  // namespace dodem
