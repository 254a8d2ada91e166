#pragma once

// Transfer-attack analysis, substitute ranking, adversarial retraining and
// the detector-routed (DODEM) inference pipeline.

#include <algorithm>
#include <optional>

#include "dodem/attack.hpp"
#include "dodem/detect.hpp"
#include "dodem/features.hpp"
#include "dodem/metrics.hpp"
#include "dodem/train.hpp"

namespace dodem {

inline EnsembleMean ensemble_of(const std::vector<TrainedModel>& models) {
  EnsembleMean e;
  for (const auto& m : models) e.members.push_back(&m);
  return e;
}

/// Unweighted mean prediction of the set for every sample.
inline std::vector<double> ensemble_predict(const std::vector<TrainedModel>& models,
                                            std::span<const WindowedSample> samples) {
  if (models.empty()) throw InputError("empty model set");
  const EnsembleMean e = ensemble_of(models);
  std::vector<double> out(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) { out[i] = e.predict(samples[i].window); });
  return out;
}

inline std::vector<double> labels_of(std::span<const WindowedSample> samples) {
  std::vector<double> y;
  y.reserve(samples.size());
  for (const auto& s : samples) y.push_back(s.rul);
  return y;
}

inline double ensemble_rmse(const std::vector<TrainedModel>& models, std::span<const WindowedSample> samples) {
  return rmse(ensemble_predict(models, samples), labels_of(samples));
}

/// One model per spec, trained independently with seeds derived from `seed`.
inline std::vector<TrainedModel> standard_train(const std::vector<ModelSpec>& specs,
                                                std::span<const WindowedSample> train_set,
                                                std::span<const WindowedSample> val_set, const TrainConfig& cfg,
                                                std::uint64_t seed) {
  if (train_set.empty()) throw InputError("empty training set");
  const int steps = static_cast<int>(train_set[0].window.rows());
  const int channels = static_cast<int>(train_set[0].window.cols());
  const SampleView tr(train_set), va(val_set);
  std::vector<std::optional<TrainedModel>> slots(specs.size());
  parallel_for(specs.size(), [&](std::size_t i) {
    slots[i] = train(build_model(specs[i], steps, channels, derive_seed(seed, i)), tr, va, cfg);
  });
  std::vector<TrainedModel> out;
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

/// Mean target-model RMSE on each destination's test set after attacking
/// it with each source's substitute. Indexed [source][destination].
struct TransferabilityMatrix {
  std::vector<std::string> ids;
  std::vector<std::vector<double>> rmse;

  std::size_t index(const std::string& id) const {
    const auto it = std::find(ids.begin(), ids.end(), id);
    if (it == ids.end()) throw InputError("dataset '" + id + "' not in transferability matrix");
    return static_cast<std::size_t>(it - ids.begin());
  }
  double at(const std::string& source, const std::string& destination) const {
    return rmse[index(source)][index(destination)];
  }
};

struct TransferSubject {
  std::string id;
  const TrainedModel* substitute = nullptr;
  const std::vector<TrainedModel>* targets = nullptr;
  std::span<const WindowedSample> test;
};

inline double mean_model_rmse(const std::vector<TrainedModel>& models, std::span<const WindowedSample> samples) {
  const auto y = labels_of(samples);
  std::vector<const Matrix*> xs;
  for (const auto& s : samples) xs.push_back(&s.window);
  double total = 0.0;
  for (const auto& m : models) total += rmse(predict_rul(m, xs, false), y);
  return total / static_cast<double>(models.size());
}

/// An epsilon of 0 evaluates the clean test sets.
inline TransferabilityMatrix transferability_analysis(std::span<const TransferSubject> subjects,
                                                      const AttackSpec& attack) {
  TransferabilityMatrix m;
  for (const auto& s : subjects) {
    if (!s.substitute || !s.targets || s.targets->empty()) throw InputError("dataset '" + s.id + "' lacks models");
    m.ids.push_back(s.id);
  }
  m.rmse.assign(subjects.size(), std::vector<double>(subjects.size(), 0.0));
  for (std::size_t src = 0; src < subjects.size(); ++src)
    for (std::size_t dst = 0; dst < subjects.size(); ++dst) {
      const auto& d = subjects[dst];
      std::vector<WindowedSample> test(d.test.begin(), d.test.end());
      if (attack.epsilon != 0.0) test = attack_all(std::move(test), *subjects[src].substitute, attack);
      m.rmse[src][dst] = mean_model_rmse(*d.targets, test);
    }
  return m;
}

/// Sources ordered by the RMSE they cause on `target`, highest first; the
/// target's own dataset is excluded and ties keep matrix order.
inline std::vector<std::string> rank_substitutes(const TransferabilityMatrix& m, const std::string& target) {
  const std::size_t t = m.index(target);
  std::vector<std::size_t> order;
  for (std::size_t s = 0; s < m.ids.size(); ++s)
    if (s != t) order.push_back(s);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return m.rmse[a][t] > m.rmse[b][t]; });
  std::vector<std::string> out;
  for (std::size_t s : order) out.push_back(m.ids[s]);
  return out;
}

struct RetrainPlan {
  std::string target;
  std::vector<std::string> substitutes;  // ranked
  double budget = 0.01;
  int extra_epochs = 30;
  double validation_ratio = 0.2;  // share of validation samples perturbed for acceptance

  std::size_t crafted_per_round(std::size_t train_size) const {
    return static_cast<std::size_t>(std::llround(budget * static_cast<double>(train_size)));
  }
};

struct RetrainRound {
  std::string substitute;
  std::size_t crafted = 0;
  double val_rmse_before = 0.0;
  double val_rmse_after = 0.0;
  bool accepted = false;
};

struct RetrainResult {
  TrainedModel model;
  std::vector<RetrainRound> rounds;
  std::string stop_reason;  // "no-improvement" or "exhausted"
  double initial_val_rmse = 0.0;
  double final_val_rmse = 0.0;
};

/// Adds substitutes in ranked order. Each round crafts FGSM samples on a
/// random subset of the training windows (clean labels kept), continues
/// training on the clean data plus all crafted samples so far, and keeps
/// the result only if RMSE on the perturbed validation set drops. The
/// perturbed validation set is crafted once against the input model.
inline RetrainResult adversarial_retrain(const TrainedModel& target, std::span<const WindowedSample> train_set,
                                         std::span<const WindowedSample> val_set, const RetrainPlan& plan,
                                         const std::vector<const TrainedModel*>& substitutes, const TrainConfig& cfg,
                                         std::uint64_t seed, const AttackSpec& attack = {}) {
  if (!(plan.budget > 0.0 && plan.budget <= 1.0)) throw InputError("retrain budget must lie in (0, 1]");
  if (substitutes.size() != plan.substitutes.size()) throw InputError("substitute list does not match the plan");
  RetrainResult r{target, {}, "exhausted", 0.0, 0.0};
  if (substitutes.empty()) return r;
  const auto val_pert = inject_random(std::vector<WindowedSample>(val_set.begin(), val_set.end()), target, attack,
                                      plan.validation_ratio, derive_seed(seed, 0x7a1));
  const auto val_rmse = [&](const TrainedModel& m) {
    const auto y = labels_of(val_pert.samples);
    std::vector<const Matrix*> xs;
    for (const auto& s : val_pert.samples) xs.push_back(&s.window);
    return rmse(predict_rul(m, xs, false), y);
  };
  r.initial_val_rmse = r.final_val_rmse = val_rmse(target);
  std::vector<WindowedSample> augmented(train_set.begin(), train_set.end());
  TrainConfig round_cfg = cfg;
  round_cfg.max_epochs = plan.extra_epochs;
  const SampleView va(val_pert.samples);
  for (std::size_t k = 0; k < substitutes.size(); ++k) {
    Rng rng(derive_seed(seed, 0x100 + k));
    auto pick = permutation(train_set.size(), rng);
    pick.resize(plan.crafted_per_round(train_set.size()));
    std::vector<WindowedSample> crafted;
    for (std::size_t i : pick) crafted.push_back(train_set[i]);
    crafted = attack_all(std::move(crafted), *substitutes[k], attack);
    std::vector<WindowedSample> candidate_set = augmented;
    candidate_set.insert(candidate_set.end(), crafted.begin(), crafted.end());
    TrainedModel warm = r.model;
    warm.seed = derive_seed(target.seed, 0x200 + k);
    TrainedModel candidate = train(std::move(warm), SampleView(candidate_set), va, round_cfg);
    candidate.seed = r.model.seed;
    RetrainRound log{plan.substitutes[k], crafted.size(), r.final_val_rmse, val_rmse(candidate), false};
    log.accepted = log.val_rmse_after < log.val_rmse_before;
    r.rounds.push_back(log);
    if (!log.accepted) {
      r.stop_reason = "no-improvement";
      break;
    }
    r.model = std::move(candidate);
    r.final_val_rmse = log.val_rmse_after;
    augmented = std::move(candidate_set);
  }
  return r;
}

enum class Route { standard, retrained };

inline std::string to_string(Route r) { return r == Route::standard ? "standard" : "retrained"; }

struct RoutedPrediction {
  double rul = 0.0;
  Route routed_to = Route::standard;
  Detection detection;
};

struct DodemPipeline {
  Detector detector;
  FeatureExtractor features;
  std::vector<TrainedModel> standard;
  std::vector<TrainedModel> retrained;

  void validate() const {
    if (standard.empty() || standard.size() != retrained.size())
      throw InputError("standard and retrained sets must be nonempty and the same size");
    for (std::size_t i = 0; i < standard.size(); ++i)
      if (!(standard[i].spec == retrained[i].spec)) throw InputError("standard and retrained specs differ");
  }
};

/// Prediction for a given detection outcome.
inline RoutedPrediction route(const DodemPipeline& p, const Matrix& window, const Detection& d) {
  const auto& set = d.attack ? p.retrained : p.standard;
  return {ensemble_of(set).predict(window), d.attack ? Route::retrained : Route::standard, d};
}

inline RoutedPrediction selective_infer(const DodemPipeline& p, const WindowedSample& sample) {
  const FeatureVector f = p.features(sample.window);
  return route(p, sample.window, decide(p.detector, f.values));
}

struct DodemReport {
  double rmse_standard = 0.0;
  double rmse_adversarial = 0.0;
  double rmse_dodem = 0.0;
  double improvement_vs_standard = 0.0;
  double improvement_vs_adversarial = 0.0;
  std::size_t routed_retrained = 0;
  std::size_t samples = 0;
  Confusion detection;
  std::vector<double> per_model_standard;
  std::vector<double> per_model_adversarial;
};

/// Scores the three strategies on one perturbed set given per-sample
/// detection labels.
inline DodemReport evaluate_routing(const DodemPipeline& p, const PerturbedDataset& data,
                                    const std::vector<bool>& labels) {
  p.validate();
  if (labels.size() != data.samples.size()) throw InputError("label count does not match the dataset");
  const auto y = labels_of(data.samples);
  const auto std_pred = ensemble_predict(p.standard, data.samples);
  const auto adv_pred = ensemble_predict(p.retrained, data.samples);
  std::vector<double> dodem(y.size());
  DodemReport r;
  for (std::size_t i = 0; i < y.size(); ++i) {
    dodem[i] = labels[i] ? adv_pred[i] : std_pred[i];
    r.routed_retrained += labels[i];
  }
  r.samples = y.size();
  r.rmse_standard = rmse(std_pred, y);
  r.rmse_adversarial = rmse(adv_pred, y);
  r.rmse_dodem = rmse(dodem, y);
  r.improvement_vs_standard = improvement_pct(r.rmse_standard, r.rmse_dodem);
  r.improvement_vs_adversarial = improvement_pct(r.rmse_adversarial, r.rmse_dodem);
  r.detection = confusion(labels, data.attack_mask);
  std::vector<const Matrix*> xs;
  for (const auto& s : data.samples) xs.push_back(&s.window);
  for (const auto& m : p.standard) r.per_model_standard.push_back(rmse(predict_rul(m, xs, false), y));
  for (const auto& m : p.retrained) r.per_model_adversarial.push_back(rmse(predict_rul(m, xs, false), y));
  return r;
}

inline std::vector<bool> detect_labels(const DodemPipeline& p, std::span<const WindowedSample> samples) {
  const auto fm = extract_features(p.features, samples);
  std::vector<bool> labels(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) labels[i] = decide(p.detector, fm.rows[i].values).attack;
  return labels;
}

inline DodemReport evaluate_dodem(const DodemPipeline& p, const PerturbedDataset& data) {
  return evaluate_routing(p, data, detect_labels(p, data.samples));
}

}  // namespace dodem
