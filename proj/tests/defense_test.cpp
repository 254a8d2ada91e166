#include <gtest/gtest.h>

#include "dodem/defense.hpp"
#include "test_support.hpp"

using namespace dodem;
using dodem::testing::linear_model;
using dodem::testing::random_window;

namespace {

constexpr int kDepth = 4;
constexpr int kWidth = 3;

std::vector<WindowedSample> linear_samples(std::size_t n, std::uint64_t seed, double noise = 0.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<WindowedSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    WindowedSample s{random_window(kDepth, kWidth, seed * 1000 + i), 0.0, static_cast<int>(i / 10 + 1),
                     static_cast<int>(i % 10 + kDepth)};
    for (std::size_t k = 0; k < s.window.size(); ++k) s.rul += (k % 2 ? 1.0 : -0.5) * s.window[k];
    s.rul += 50.0 + noise * g(rng);
    out.push_back(std::move(s));
  }
  return out;
}

TrainedModel shifted_linear(double bias, double scale = 1.0) {
  std::vector<double> w(kDepth * kWidth);
  for (std::size_t k = 0; k < w.size(); ++k) w[k] = scale * (k % 2 ? 1.0 : -0.5);
  return linear_model(kDepth, kWidth, w, 50.0 + bias);
}

DodemPipeline two_set_pipeline() {
  DodemPipeline p;
  p.standard = {shifted_linear(1.0), shifted_linear(3.0)};
  p.retrained = {shifted_linear(-4.0, 0.5), shifted_linear(-2.0, 0.5)};
  return p;
}

double mean_pred(const std::vector<TrainedModel>& set, const Matrix& x) {
  double s = 0.0;
  for (const auto& m : set) s += m.predict(x);
  return s / static_cast<double>(set.size());
}

}  // namespace

TEST(Routing, ForcedNormalUsesStandardMean) {
  const auto p = two_set_pipeline();
  const Matrix x = random_window(kDepth, kWidth, 7);
  const auto r = route(p, x, Detection{-1.0, false});
  EXPECT_EQ(r.routed_to, Route::standard);
  EXPECT_DOUBLE_EQ(r.rul, mean_pred(p.standard, x));
}

TEST(Routing, ForcedAttackUsesRetrainedMean) {
  const auto p = two_set_pipeline();
  const Matrix x = random_window(kDepth, kWidth, 8);
  const auto r = route(p, x, Detection{2.0, true});
  EXPECT_EQ(r.routed_to, Route::retrained);
  EXPECT_DOUBLE_EQ(r.rul, mean_pred(p.retrained, x));
  EXPECT_EQ(r.detection.score, 2.0);
}

TEST(Routing, CleanSetWithSilentDetectorEqualsStandard) {
  const auto p = two_set_pipeline();
  const auto data = inject_random(linear_samples(40, 1), p.standard[0], AttackSpec{}, 0.0, 3);
  const auto r = evaluate_routing(p, data, std::vector<bool>(40, false));
  EXPECT_EQ(r.rmse_dodem, r.rmse_standard);
  EXPECT_EQ(r.routed_retrained, 0u);
  EXPECT_EQ(r.improvement_vs_standard, 0.0);
}

TEST(Routing, FullyAttackedSetWithPerfectDetectorEqualsRetrained) {
  const auto p = two_set_pipeline();
  const auto data = inject_random(linear_samples(40, 2), p.standard[0], AttackSpec{}, 1.0, 3);
  const auto r = evaluate_routing(p, data, data.attack_mask);
  EXPECT_EQ(r.rmse_dodem, r.rmse_adversarial);
  EXPECT_EQ(r.routed_retrained, 40u);
  EXPECT_EQ(r.detection.tp, 40u);
}

TEST(Routing, OracleStubMatchesPerPopulationRouting) {
  const auto p = two_set_pipeline();
  const auto data = inject_random(linear_samples(60, 4), p.standard[1], AttackSpec{}, 0.3, 5);
  ASSERT_EQ(data.attacked_count(), 18u);
  double sse = 0.0;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    const double e = mean_pred(data.attack_mask[i] ? p.retrained : p.standard, s.window) - s.rul;
    sse += e * e;
  }
  const auto r = evaluate_routing(p, data, data.attack_mask);
  EXPECT_NEAR(r.rmse_dodem, std::sqrt(sse / 60.0), 1e-12);
  EXPECT_EQ(r.detection.fp + r.detection.fn, 0u);
  ASSERT_EQ(r.per_model_standard.size(), 2u);
  EXPECT_NEAR(r.improvement_vs_standard, 100.0 * (r.rmse_standard - r.rmse_dodem) / r.rmse_standard, 1e-12);
}

TEST(Routing, RejectsMismatchedSets) {
  auto p = two_set_pipeline();
  p.retrained.pop_back();
  const auto data = inject_random(linear_samples(5, 1), p.standard[0], AttackSpec{}, 0.0, 1);
  EXPECT_THROW(evaluate_routing(p, data, std::vector<bool>(5, false)), InputError);
  p = two_set_pipeline();
  EXPECT_THROW(evaluate_routing(p, data, std::vector<bool>(4, false)), InputError);
}

TEST(Transferability, ZeroEpsilonGivesCleanMatrix) {
  const std::vector<TrainedModel> a{shifted_linear(1.0), shifted_linear(2.0)};
  const std::vector<TrainedModel> b{shifted_linear(-3.0)};
  const auto ta = linear_samples(20, 11), tb = linear_samples(25, 12);
  const TrainedModel sa = shifted_linear(0.0, 2.0), sb = shifted_linear(0.0, -1.0);
  const std::vector<TransferSubject> subjects{{"FD001", &sa, &a, ta}, {"FD002", &sb, &b, tb}};
  AttackSpec zero;
  zero.epsilon = 0.0;
  const auto m = transferability_analysis(subjects, zero);
  for (const auto& src : m.ids) {
    EXPECT_NEAR(m.at(src, "FD001"), 1.5, 1e-12);  // exact models offset by 1 and 2
    EXPECT_NEAR(m.at(src, "FD002"), 3.0, 1e-12);
  }
}

TEST(Transferability, AttacksRaiseTargetError) {
  const std::vector<TrainedModel> a{shifted_linear(0.0)};
  const auto ta = linear_samples(30, 13);
  const TrainedModel sa = shifted_linear(0.0, 1.0);
  const std::vector<TransferSubject> subjects{{"X", &sa, &a, ta}};
  const auto clean = transferability_analysis(subjects, AttackSpec{AttackMethod::fgsm, 0.0});
  const auto attacked = transferability_analysis(subjects, AttackSpec{});
  EXPECT_NEAR(clean.at("X", "X"), 0.0, 1e-12);
  EXPECT_GT(attacked.at("X", "X"), 0.0);
  EXPECT_THROW(attacked.at("Y", "X"), InputError);
}

TEST(RankSubstitutes, DescendingExcludingTargetWithStableTies) {
  TransferabilityMatrix m;
  m.ids = {"FD001", "FD002", "FD003", "FD004"};
  m.rmse = {{10, 40, 30, 20}, {25, 5, 31, 22}, {50, 41, 9, 22}, {25, 39, 33, 7}};
  EXPECT_EQ(rank_substitutes(m, "FD001"), (std::vector<std::string>{"FD003", "FD002", "FD004"}));
  EXPECT_EQ(rank_substitutes(m, "FD002"), (std::vector<std::string>{"FD003", "FD001", "FD004"}));
  EXPECT_EQ(rank_substitutes(m, "FD004"), (std::vector<std::string>{"FD002", "FD003", "FD001"}));
}

TEST(RetrainPlan, CraftedCountFollowsBudget) {
  RetrainPlan plan;
  EXPECT_EQ(plan.crafted_per_round(5000), 50u);
  EXPECT_EQ(plan.crafted_per_round(149), 1u);
  EXPECT_EQ(plan.crafted_per_round(40), 0u);
  EXPECT_EQ(plan.extra_epochs, 30);
}

TEST(AdversarialRetrain, NoSubstitutesReturnsInputUnchanged) {
  const auto m = shifted_linear(2.0);
  const auto tr = linear_samples(30, 20), va = linear_samples(10, 21);
  const auto r = adversarial_retrain(m, tr, va, RetrainPlan{}, {}, TrainConfig{}, 1);
  EXPECT_TRUE(std::equal(r.model.net.params().begin(), r.model.net.params().end(), m.net.params().begin()));
  EXPECT_TRUE(r.rounds.empty());
  EXPECT_EQ(r.stop_reason, "exhausted");
}

TEST(AdversarialRetrain, RoundLogIsConsistent) {
  const auto tr = linear_samples(200, 30, 0.5), va = linear_samples(50, 31, 0.5);
  const TrainedModel start = shifted_linear(6.0, 0.8);
  const TrainedModel s1 = shifted_linear(0.0, 1.2), s2 = shifted_linear(1.0, -0.7);
  RetrainPlan plan{"FD001", {"FD003", "FD002"}, 0.1, 5};
  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.05;
  const auto r = adversarial_retrain(start, tr, va, plan, {&s1, &s2}, cfg, 9);
  ASSERT_FALSE(r.rounds.empty());
  EXPECT_EQ(r.rounds[0].substitute, "FD003");
  EXPECT_EQ(r.rounds[0].crafted, 20u);
  EXPECT_EQ(r.rounds[0].val_rmse_before, r.initial_val_rmse);
  EXPECT_TRUE(r.rounds[0].accepted);  // the biased start leaves room to improve
  EXPECT_LT(r.final_val_rmse, r.initial_val_rmse);
  for (const auto& round : r.rounds) EXPECT_EQ(round.accepted, round.val_rmse_after < round.val_rmse_before);
  if (r.rounds.back().accepted) EXPECT_EQ(r.stop_reason, "exhausted");
  else EXPECT_EQ(r.stop_reason, "no-improvement");

  const auto again = adversarial_retrain(start, tr, va, plan, {&s1, &s2}, cfg, 9);
  EXPECT_TRUE(std::equal(again.model.net.params().begin(), again.model.net.params().end(),
                         r.model.net.params().begin()));
}

TEST(AdversarialRetrain, RejectsBadPlans) {
  const auto m = shifted_linear(0.0);
  const auto tr = linear_samples(10, 1), va = linear_samples(5, 2);
  RetrainPlan plan{"A", {"B"}, 0.0};
  EXPECT_THROW(adversarial_retrain(m, tr, va, plan, {&m}, TrainConfig{}, 1), InputError);
  plan.budget = 0.5;
  EXPECT_THROW(adversarial_retrain(m, tr, va, plan, {}, TrainConfig{}, 1), InputError);
}

TEST(StandardTrain, OneModelPerSpecDeterministic) {
  const auto tr = linear_samples(60, 40), va = linear_samples(20, 41);
  ModelSpec a;
  a.architecture = Architecture::cnn1d;
  a.width_scale = 0.1;
  a.conv_kernel = 2;
  ModelSpec b;
  b.architecture = Architecture::gru;
  b.width_scale = 0.1;
  TrainConfig cfg;
  cfg.max_epochs = 2;
  const auto x = standard_train({a, b}, tr, va, cfg, 5);
  const auto y = standard_train({a, b}, tr, va, cfg, 5);
  ASSERT_EQ(x.size(), 2u);
  EXPECT_EQ(x[0].spec, a);
  EXPECT_EQ(x[1].spec, b);
  EXPECT_NE(x[0].seed, x[1].seed);
  for (std::size_t i = 0; i < 2; ++i)
    EXPECT_TRUE(std::equal(x[i].net.params().begin(), x[i].net.params().end(), y[i].net.params().begin()));
  EXPECT_THROW(standard_train({a}, {}, va, cfg, 5), InputError);
}
