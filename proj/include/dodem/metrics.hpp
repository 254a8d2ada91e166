#pragma once

#include <span>
#include <vector>

#include "dodem/core.hpp"

namespace dodem {

inline double rmse(std::span<const double> pred, std::span<const double> truth) {
  if (pred.empty() || pred.size() != truth.size()) throw InputError("rmse needs equal-length nonempty inputs");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(s / static_cast<double>(pred.size()));
}

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  double precision() const { return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }
  double recall() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
};

/// Attack is the positive class.
inline Confusion confusion(const std::vector<bool>& predicted, const std::vector<bool>& truth) {
  if (predicted.size() != truth.size()) throw InputError("label and mask lengths differ");
  Confusion c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i]) (truth[i] ? c.tp : c.fp)++;
    else (truth[i] ? c.fn : c.tn)++;
  }
  return c;
}

inline double f_beta(double precision, double recall, double beta = 2.0) {
  const double b2 = beta * beta;
  const double denom = b2 * precision + recall;
  return denom == 0.0 ? 0.0 : (1.0 + b2) * precision * recall / denom;
}

inline double f_beta(const Confusion& c, double beta = 2.0) { return f_beta(c.precision(), c.recall(), beta); }

/// Mann-Whitney AUC: probability that an attacked sample outscores a clean
/// one, ties counting one half.
inline double roc_auc(std::span<const double> scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw InputError("score and mask lengths differ");
  std::vector<std::size_t> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (positive[idx[k]]) {
        rank_sum += mid_rank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) throw InputError("AUC needs both classes");
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

inline double improvement_pct(double base, double updated) {
  if (!(base > 0.0)) throw InputError("baseline RMSE must be positive");
  return 100.0 * (base - updated) / base;
}

}  // namespace dodem
