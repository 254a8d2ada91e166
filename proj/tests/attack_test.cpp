#include <gtest/gtest.h>

#include "dodem/attack.hpp"
#include "dodem/synthetic.hpp"
#include "dodem/train.hpp"
#include "test_support.hpp"

using namespace dodem;
using dodem::testing::linear_model;
using dodem::testing::random_window;

namespace {

double linf(const Matrix& a, const Matrix& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

TrainedModel small_gru(std::uint64_t seed) {
  ModelSpec spec;
  spec.architecture = Architecture::gru;
  spec.width_scale = 0.1;
  return build_model(spec, 12, 3, seed);
}

double sq_err(const TrainedModel& m, const Matrix& x, double y) {
  const double r = m.predict(x) - y;
  return r * r;
}

}  // namespace

TEST(Fgsm, LinearModelClosedForm) {
  const auto m = linear_model(1, 2, {1.0, -2.0}, 0.0);
  const Matrix x(1, 2, std::vector<double>{0.3, 0.1});
  const double y = m.predict(x) - 1.0;  // residual > 0
  const Matrix adv = fgsm(m, x, y, 0.1);
  EXPECT_DOUBLE_EQ(adv[0], 0.4);
  EXPECT_DOUBLE_EQ(adv[1], 0.0);
}

TEST(Fgsm, ZeroResidualLeavesInputUnchanged) {
  const auto m = small_gru(3);
  const Matrix x = random_window(12, 3, 4);
  EXPECT_EQ(fgsm(m, x, m.predict(x), 0.1), x);
}

TEST(Fgsm, SignsMatchFiniteDifferences) {
  const auto m = small_gru(5);
  const Matrix x = random_window(12, 3, 6);
  const double y = m.predict(x) + 2.0;
  const Matrix g = m.input_gradient(x, y);
  const Matrix adv = fgsm(m, x, y, 0.05);
  std::size_t checked = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::abs(g[i]) <= 1e-6) continue;
    Matrix up = x, down = x;
    up[i] += 1e-5;
    down[i] -= 1e-5;
    const double fd = (sq_err(m, up, y) - sq_err(m, down, y)) / 2e-5;
    EXPECT_EQ(adv[i] > x[i], fd > 0) << i;
    ++checked;
  }
  EXPECT_GT(checked, 20u);
}

TEST(Fgsm, NonFiniteGradientIsAnError) {
  const auto m = linear_model(1, 1, {1.0}, 0.0);
  const Matrix x(1, 1, std::numeric_limits<double>::infinity());
  EXPECT_THROW(fgsm(m, x, 0.0, 0.1), NumericError);
}

TEST(Bim, SingleIterationEqualsFgsm) {
  const auto m = small_gru(7);
  const Matrix x = random_window(12, 3, 8);
  const double y = 1.5;
  EXPECT_EQ(bim(m, x, y, 0.1, 1), fgsm(m, x, y, 0.1));
}

TEST(Bim, LinearModelSaturatesAtCorner) {
  const std::vector<double> w{0.5, -1.5, 0.0, 2.0, -0.25, 1.0};
  const auto m = linear_model(2, 3, w, 0.3);
  const Matrix x = random_window(2, 3, 9);
  for (double offset : {-4.0, 4.0}) {
    const double y = m.predict(x) + offset;
    const double r_sign = offset < 0 ? 1.0 : -1.0;
    const Matrix adv = bim(m, x, y, 0.1, 100);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double dir = w[i] == 0.0 ? 0.0 : (w[i] * r_sign > 0 ? 1.0 : -1.0);
      EXPECT_NEAR(adv[i], x[i] + 0.1 * dir, 1e-12);
    }
  }
}

TEST(Mim, FirstIterationFollowsFgsmDirection) {
  const auto m = small_gru(10);
  const Matrix x = random_window(12, 3, 11);
  const Matrix a = mim(m, x, 0.7, 0.1, 1, 1.0);
  const Matrix b = fgsm(m, x, 0.7, 0.1);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(Mim, MatchesStepByStepTraceOnLinearModel) {
  // Oracle: the momentum recursion written out with the closed-form gradient
  // 2 (w.x + b - y) w of a linear model.
  const std::vector<double> w{0.5, -1.5, 0.2, 2.0};
  const double b = -0.1;
  const auto m = linear_model(2, 2, w, b);
  const Matrix x = random_window(2, 2, 12);
  const double y = 0.05;  // small target: the residual changes sign along the path
  for (double mu : {0.0, 0.5, 1.0}) {
    const int iters = 40;
    const double eps = 0.3, alpha = eps / iters;
    std::vector<double> adv(x.values()), acc(4, 0.0);
    for (int it = 0; it < iters; ++it) {
      double f = b;
      for (int i = 0; i < 4; ++i) f += w[i] * adv[i];
      double l1 = 0.0;
      for (int i = 0; i < 4; ++i) l1 += std::abs(2 * (f - y) * w[i]);
      for (int i = 0; i < 4; ++i) {
        acc[i] = mu * acc[i] + (l1 < 1e-12 ? 0.0 : 2 * (f - y) * w[i] / l1);
        adv[i] += alpha * (acc[i] > 0 ? 1.0 : (acc[i] < 0 ? -1.0 : 0.0));
      }
    }
    const Matrix got = mim(m, x, y, eps, iters, mu, false);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(got[i], adv[i], 1e-12) << "mu=" << mu;
  }
}

TEST(Mim, ZeroDecayMatchesBimOnLinearModel) {
  const auto m = linear_model(1, 3, {1.0, -0.5, 0.25}, 0.0);
  const Matrix x = random_window(1, 3, 13);
  const double y = m.predict(x) - 3.0;
  const Matrix a = mim(m, x, y, 0.1, 100, 0.0);
  const Matrix b = bim(m, x, y, 0.1, 100);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Mim, VanishingGradientContributesNothing) {
  const auto m = linear_model(1, 2, {0.0, 0.0}, 1.0);
  const Matrix x(1, 2, std::vector<double>{0.2, -0.2});
  EXPECT_EQ(mim(m, x, 5.0, 0.1, 10, 1.0), x);
}

TEST(Attacks, StayInsideEpsilonBall) {
  for (std::uint64_t seed = 20; seed < 24; ++seed) {
    const auto m = small_gru(seed);
    const Matrix x = random_window(12, 3, seed + 100, 2.0);
    for (auto method : {AttackMethod::fgsm, AttackMethod::bim, AttackMethod::mim}) {
      AttackSpec spec;
      spec.method = method;
      spec.epsilon = 0.05 * static_cast<double>(seed - 19);
      spec.iterations = 17;
      EXPECT_LE(linf(craft(m, x, -1.0, spec), x), spec.epsilon + 1e-9) << to_string(method);
    }
  }
}

TEST(Attacks, EnsembleGradientMatchesFiniteDifferences) {
  const auto a = small_gru(30), b = small_gru(31);
  const EnsembleMean ens{{&a, &b}};
  const Matrix x = random_window(12, 3, 32);
  const double y = ens.predict(x) + 1.0;
  const Matrix g = ens.input_gradient(x, y);
  for (std::size_t i = 0; i < x.size(); i += 5) {
    Matrix up = x, down = x;
    up[i] += 1e-5;
    down[i] -= 1e-5;
    const double ru = ens.predict(up) - y, rd = ens.predict(down) - y;
    EXPECT_NEAR(g[i], (ru * ru - rd * rd) / 2e-5, 1e-6 * std::max(1.0, std::abs(g[i])));
  }
}

TEST(AttackSpecJson, RoundTripAndAlphaConsistency) {
  AttackSpec s;
  s.method = AttackMethod::mim;
  s.decay = 0.5;
  nlohmann::json j = s;
  EXPECT_DOUBLE_EQ(j["alpha"].get<double>(), 0.001);
  EXPECT_EQ(j.get<AttackSpec>(), s);
  j["alpha"] = 0.01;
  EXPECT_THROW(j.get<AttackSpec>(), InputError);
}

namespace {

std::vector<WindowedSample> toy_samples(std::size_t n) {
  std::vector<WindowedSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({random_window(12, 3, 200 + i), static_cast<double>(i), 1, static_cast<int>(i)});
  return out;
}

}  // namespace

TEST(InjectRandom, RatioControlsExactCount) {
  const auto m = small_gru(40);
  const auto clean = toy_samples(100);
  AttackSpec spec;
  const auto none = inject_random(clean, m, spec, 0.0, 1);
  EXPECT_EQ(none.attacked_count(), 0u);
  EXPECT_EQ(none.samples, clean);
  const auto all = inject_random(clean, m, spec, 1.0, 1);
  EXPECT_EQ(all.attacked_count(), 100u);
  const auto some = inject_random(clean, m, spec, 0.2, 1);
  EXPECT_EQ(some.attacked_count(), 20u);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    EXPECT_EQ(some.samples[i].rul, clean[i].rul);
    EXPECT_EQ(some.samples[i].unit_id, clean[i].unit_id);
    if (!some.attack_mask[i]) EXPECT_EQ(some.samples[i].window, clean[i].window);
    else EXPECT_NE(some.samples[i].window, clean[i].window);
  }
  EXPECT_THROW(inject_random(clean, m, spec, 1.5, 1), InputError);
}

TEST(InjectRandom, SeedDeterminesMask) {
  const auto m = small_gru(41);
  const auto clean = toy_samples(50);
  AttackSpec spec;
  const auto a = inject_random(clean, m, spec, 0.1, 7);
  const auto b = inject_random(clean, m, spec, 0.1, 7);
  const auto c = inject_random(clean, m, spec, 0.1, 8);
  EXPECT_EQ(a.attack_mask, b.attack_mask);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_NE(a.attack_mask, c.attack_mask);
}

TEST(Fgsm, RaisesLossOfTrainedModel) {
  const auto sub = synthetic::generate("FD001", 17);
  auto [tr, va] = split_units(sub.train, 12);
  const auto norm = fit_normalizer(tr);
  auto windows = [&](const TrajectorySet& s, std::size_t stride) {
    return make_windows(apply_normalizer(norm, label_rul(s, 125)), 30, stride);
  };
  std::vector<WindowedSample> train_w = windows(tr, 4);
  std::vector<WindowedSample> val_w = windows(split_units(va, 4).first, 10);
  ModelSpec spec;
  spec.architecture = Architecture::cnn1d;
  spec.width_scale = 0.2;
  TrainConfig cfg;
  cfg.max_epochs = 15;
  cfg.learning_rate = 0.005;
  cfg.batch_size = 32;
  const auto m = train(build_model(spec, 30, static_cast<int>(kChannels), 3), SampleView(train_w), SampleView(val_w), cfg);
  std::size_t up = 0;
  for (const auto& s : val_w) up += sq_err(m, fgsm(m, s.window, s.rul, 0.1), s.rul) >= sq_err(m, s.window, s.rul);
  EXPECT_GE(static_cast<double>(up), 0.9 * static_cast<double>(val_w.size()));
}
