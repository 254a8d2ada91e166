#include <gtest/gtest.h>

#include <numbers>
#include <sstream>

#include "dodem/attack.hpp"
#include "dodem/features.hpp"
#include "test_support.hpp"

using namespace dodem;
using dodem::testing::random_window;

namespace {

std::vector<double> white_noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

std::vector<double> cumulative(std::vector<double> v) {
  for (std::size_t i = 1; i < v.size(); ++i) v[i] += v[i - 1];
  return v;
}

template <class Fn>
double monte_carlo(int seeds, Fn&& fn) {
  double s = 0.0;
  for (int k = 0; k < seeds; ++k) s += fn(static_cast<std::uint64_t>(k));
  return s / seeds;
}

}  // namespace

TEST(AggregateSignal, ChannelMeans) {
  Matrix one(5, 1);
  for (std::size_t t = 0; t < 5; ++t) one(t, 0) = static_cast<double>(t * t);
  EXPECT_EQ(aggregate_signal(one), one.values());

  Matrix dup(5, 2), sym(5, 2);
  for (std::size_t t = 0; t < 5; ++t) {
    dup(t, 0) = dup(t, 1) = one(t, 0);
    sym(t, 0) = one(t, 0);
    sym(t, 1) = -one(t, 0);
  }
  EXPECT_EQ(aggregate_signal(dup), one.values());
  for (double v : aggregate_signal(sym)) EXPECT_EQ(v, 0.0);

  Matrix masked(5, 3, 7.0);
  for (std::size_t t = 0; t < 5; ++t) masked(t, 1) = one(t, 0);
  EXPECT_EQ(aggregate_signal(masked, {false, true, false}), one.values());
  EXPECT_THROW(aggregate_signal(masked, {false, false, false}), InputError);
}

TEST(StatFeatures, DirectEvaluation) {
  const std::vector<double> s{1, 2, 3, 4};
  const auto f = stat_features(s);
  const std::array<double, 8> want{1, 4, 2.5, 2.5, std::sqrt(1.25), 3, 0.625, 0.25};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(f[i], want[i]) << i;

  const std::vector<double> c(9, 3.5);
  const auto fc = stat_features(c);
  const std::array<double, 8> wc{3.5, 3.5, 3.5, 3.5, 0, 0, 1, 1};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(fc[i], wc[i]) << i;

  const std::vector<double> z{-2, -1, 0};
  const auto fz = stat_features(z);
  EXPECT_EQ(fz[6], 0.0);
  EXPECT_EQ(fz[7], 0.0);
  EXPECT_THROW(stat_features(std::vector<double>{1.0}), InputError);
}

TEST(StatFeatures, OrderingInvariants) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = white_noise(31 + seed, seed);
    const auto f = stat_features(s);
    EXPECT_LE(f[0], f[3]);
    EXPECT_LE(f[3], f[1]);
    EXPECT_DOUBLE_EQ(f[5], f[1] - f[0]);
    EXPECT_GE(f[4], 0.0);
  }
}

TEST(SampleEntropy, ConstantSeriesIsZero) {
  const auto e = chaos::sample_entropy(std::vector<double>(50, 2.0));
  EXPECT_EQ(e.value, 0.0);
  EXPECT_FALSE(e.guarded);
}

TEST(SampleEntropy, ShortSeriesRejected) {
  EXPECT_THROW(chaos::sample_entropy(std::vector<double>{1, 2, 3}), InputError);
  EXPECT_NO_THROW(chaos::sample_entropy(std::vector<double>{1, 2, 3, 4}));
}

TEST(SampleEntropy, BruteForceCounts) {
  // Independent count of template matches.
  const auto s = white_noise(40, 9);
  const double r = 0.2 * stddev(s);
  double a = 0, b = 0;
  for (std::size_t i = 0; i < 38; ++i) {
    for (std::size_t j = 0; j < 38; ++j) {
      if (i == j) continue;
      const bool m2 = std::abs(s[i] - s[j]) <= r && std::abs(s[i + 1] - s[j + 1]) <= r;
      b += m2;
      a += m2 && std::abs(s[i + 2] - s[j + 2]) <= r;
    }
  }
  const auto e = chaos::sample_entropy(s);
  if (a > 0) {
    EXPECT_NEAR(e.value, -std::log(a / b), 1e-12);
  }
  EXPECT_EQ(e.guarded, a == 0 || b == 0);
}

TEST(SampleEntropy, NoiseMoreComplexThanSine) {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto noise = white_noise(200, seed);
    std::vector<double> sine(200);
    for (std::size_t t = 0; t < 200; ++t) sine[t] = std::sqrt(2.0) * std::sin(0.3 * t + 0.1 * seed);
    wins += chaos::sample_entropy(noise).value > chaos::sample_entropy(sine).value;
  }
  EXPECT_EQ(wins, 50);
}

TEST(BoxLadder, GeometricSizes) {
  EXPECT_EQ(chaos::box_ladder(500), (std::vector<std::size_t>{4, 7, 11, 17, 29, 47, 76, 125}));
  EXPECT_EQ(chaos::box_ladder(80), (std::vector<std::size_t>{4, 5, 6, 8, 10, 13, 16, 20}));
}

TEST(Dfa, WhiteNoiseAndRandomWalk) {
  const double noise = monte_carlo(50, [](std::uint64_t s) { return chaos::dfa_exponent(white_noise(500, s)).value; });
  EXPECT_GE(noise, 0.4);
  EXPECT_LE(noise, 0.6);
  const double walk =
      monte_carlo(50, [](std::uint64_t s) { return chaos::dfa_exponent(cumulative(white_noise(500, s))).value; });
  EXPECT_NEAR(walk, 1.5, 0.15);
}

TEST(Dfa, GuardsAndPreconditions) {
  const auto c = chaos::dfa_exponent(std::vector<double>(40, 1.0));
  EXPECT_EQ(c.value, 0.0);
  EXPECT_TRUE(c.guarded);
  EXPECT_THROW(chaos::dfa_exponent(std::vector<double>(19, 1.0)), InputError);
}

TEST(Hurst, WhiteNoiseAndTrend) {
  const double noise = monte_carlo(50, [](std::uint64_t s) { return chaos::hurst_exponent(white_noise(500, s)).value; });
  EXPECT_GE(noise, 0.4);
  EXPECT_LE(noise, 0.6);
  const double trend = monte_carlo(50, [](std::uint64_t s) {
    auto v = white_noise(500, s + 1000);
    for (std::size_t t = 0; t < v.size(); ++t) v[t] = 0.3 * v[t] + 0.05 * static_cast<double>(t);
    return chaos::hurst_exponent(v).value;
  });
  EXPECT_GT(trend, 0.7);
  const auto c = chaos::hurst_exponent(std::vector<double>(40, -3.0));
  EXPECT_EQ(c.value, 0.0);
  EXPECT_TRUE(c.guarded);
}

TEST(Lyapunov, LogisticMapNearLn2) {
  std::vector<double> x{0.3};
  for (int i = 0; i < 999; ++i) x.push_back(4.0 * x.back() * (1.0 - x.back()));
  EXPECT_NEAR(chaos::lyapunov_largest(x).value, std::numbers::ln2, 0.15);
}

TEST(Lyapunov, SineIsNotChaotic) {
  for (double phase : {0.0, 0.7, 1.4, 2.1, 2.8}) {
    std::vector<double> s(500);
    for (std::size_t t = 0; t < s.size(); ++t) s[t] = std::sin(0.2 * static_cast<double>(t) + phase);
    EXPECT_LE(chaos::lyapunov_largest(s).value, 0.05) << phase;
  }
}

TEST(Lyapunov, GuardsAndPreconditions) {
  const auto c = chaos::lyapunov_largest(std::vector<double>(60, 0.5));
  EXPECT_EQ(c.value, 0.0);
  EXPECT_TRUE(c.guarded);
  EXPECT_THROW(chaos::lyapunov_largest(std::vector<double>(49, 0.5)), InputError);
}

namespace {

std::vector<Matrix> sdae_windows(std::size_t n, std::uint64_t seed) {
  // Channel means driven by three latent factors, so the inputs compress.
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = g(rng), b = g(rng), c = g(rng);
    Matrix w(10, 24);
    for (std::size_t t = 0; t < 10; ++t)
      for (std::size_t ch = 0; ch < 24; ++ch)
        w(t, ch) = std::sin(static_cast<double>(ch)) * a + std::cos(0.5 * static_cast<double>(ch)) * b +
                   (ch % 3 == 0 ? c : -0.5 * c) + 0.1 * g(rng);
    out.push_back(std::move(w));
  }
  return out;
}

std::vector<const Matrix*> ptrs(const std::vector<Matrix>& v) {
  std::vector<const Matrix*> p;
  for (const auto& m : v) p.push_back(&m);
  return p;
}

std::vector<std::size_t> first_channels(std::size_t n) {
  std::vector<std::size_t> c(n);
  std::iota(c.begin(), c.end(), std::size_t{0});
  return c;
}

double reconstruction_mse(const DaeLayer& l, const std::vector<std::vector<double>>& data) {
  return detail::dae_loss(l, data, data, nullptr);
}

}  // namespace

TEST(Sdae, ChannelSelection) {
  std::vector<bool> informative(24, true);
  for (std::size_t c : {0u, 5u, 9u, 10u, 14u, 20u, 22u}) informative[c] = false;
  const auto sel = select_sdae_channels(informative);
  ASSERT_EQ(sel.size(), 20u);
  for (std::size_t k = 0; k < 17; ++k) EXPECT_TRUE(informative[sel[k]]);
  EXPECT_EQ((std::vector<std::size_t>(sel.begin() + 17, sel.end())), (std::vector<std::size_t>{0, 5, 9}));
  EXPECT_EQ(select_sdae_channels(std::vector<bool>(24, true)), first_channels(20));
}

TEST(Sdae, LayerGradientMatchesFiniteDifferences) {
  auto layer = detail::init_dae(6, 4, 3);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  for (auto& p : layer.params) p += 0.1 * g(rng);  // nonzero biases
  std::vector<std::vector<double>> x(3, std::vector<double>(6)), y = x;
  for (auto& v : x)
    for (auto& e : v) e = g(rng);
  for (auto& v : y)
    for (auto& e : v) e = g(rng);
  std::vector<double> grads(layer.param_count(), 0.0);
  detail::dae_loss(layer, x, y, &grads);
  for (std::size_t k = 0; k < layer.param_count(); ++k) {
    auto probe = layer;
    probe.params[k] += 1e-6;
    const double up = detail::dae_loss(probe, x, y, nullptr);
    probe.params[k] -= 2e-6;
    const double down = detail::dae_loss(probe, x, y, nullptr);
    EXPECT_NEAR(grads[k], (up - down) / 2e-6, 1e-7 * std::max(1.0, std::abs(grads[k]))) << k;
  }
}

TEST(Sdae, TrainingReducesReconstructionError) {
  const auto windows = sdae_windows(300, 1);
  SdaeConfig cfg;
  cfg.epochs = 40;
  const auto m = sdae_train(ptrs(windows), first_channels(20), 5, cfg);
  std::vector<std::vector<double>> inputs;
  for (const auto& w : windows) inputs.push_back(m.input(w));
  const auto init = detail::init_dae(20, 50, derive_seed(derive_seed(5, 0x5dae1), 1));
  EXPECT_LT(reconstruction_mse(m.layer1, inputs), 0.5 * reconstruction_mse(init, inputs));
  EXPECT_EQ(m.layer1.in, 20u);
  EXPECT_EQ(m.layer1.hidden, 50u);
  EXPECT_EQ(m.layer2.in, 50u);
  EXPECT_EQ(m.encode(windows[0]).size(), 25u);
}

TEST(Sdae, DeterministicAndSerializable) {
  const auto windows = sdae_windows(80, 2);
  SdaeConfig cfg;
  cfg.epochs = 3;
  const auto a = sdae_train(ptrs(windows), first_channels(20), 9, cfg);
  const auto b = sdae_train(ptrs(windows), first_channels(20), 9, cfg);
  const auto c = sdae_train(ptrs(windows), first_channels(20), 10, cfg);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(a.encode(windows[3]), a.encode(windows[3]));
  const nlohmann::json j = a;
  EXPECT_EQ(nlohmann::json::parse(j.dump()).get<SdaeModel>(), a);
  EXPECT_NE(a.encode(windows[0]), a.encode(windows[1]));
  EXPECT_THROW(sdae_train(ptrs(windows), first_channels(19), 9, cfg), InputError);
}

namespace {

FeatureExtractor toy_extractor() {
  const auto windows = sdae_windows(60, 3);
  SdaeConfig cfg;
  cfg.epochs = 2;
  FeatureExtractor fx;
  fx.informative.assign(24, true);
  fx.informative[0] = false;
  fx.sdae = sdae_train(ptrs(windows), first_channels(20), 1, cfg);
  return fx;
}

}  // namespace

TEST(Featurize, ThirtySevenValuesInFixedOrder) {
  const auto fx = toy_extractor();
  const Matrix w = random_window(80, 24, 12);
  const auto f = featurize(w, fx);
  EXPECT_EQ(f.values.size(), 37u);
  EXPECT_EQ(feature_names().size(), 37u);
  const auto s = aggregate_signal(w, fx.informative);
  const auto st = stat_features(s);
  EXPECT_TRUE(std::equal(st.begin(), st.end(), f.stat().begin()));
  EXPECT_EQ(f.chaos()[1], chaos::dfa_exponent(s).value);
  const auto code = fx.sdae.encode(w);
  EXPECT_TRUE(std::equal(code.begin(), code.end(), f.learned().begin()));
  EXPECT_EQ(featurize(w, fx), f);
}

TEST(Featurize, PermutingSamplesPermutesRows) {
  const auto fx = toy_extractor();
  std::vector<WindowedSample> s;
  for (int i = 0; i < 6; ++i) s.push_back({random_window(60, 24, 40 + i), 1.0, i, i});
  auto rev = s;
  std::reverse(rev.begin(), rev.end());
  const auto a = extract_features(fx, s);
  const auto b = extract_features(fx, rev);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(a.rows[i], b.rows[s.size() - 1 - i]);
}

TEST(Featurize, AttackedWindowChangesFeatures) {
  const auto fx = toy_extractor();
  ModelSpec spec;
  spec.architecture = Architecture::gru;
  spec.width_scale = 0.1;
  const auto m = build_model(spec, 80, 24, 3);
  int differ = 0;
  for (int i = 0; i < 10; ++i) {
    const Matrix w = random_window(80, 24, 70 + i);
    differ += featurize(fgsm(m, w, 50.0, 0.1), fx) != featurize(w, fx);
  }
  EXPECT_EQ(differ, 10);
}

TEST(FeatureCsv, HeaderAndRows) {
  const auto fx = toy_extractor();
  std::vector<WindowedSample> s{{random_window(60, 24, 1), 3.0, 4, 77}, {random_window(60, 24, 2), 2.0, 4, 78}};
  const auto fm = extract_features(fx, s, {false, true});
  std::ostringstream out;
  write_feature_csv(out, fm);
  std::istringstream in(out.str());
  std::string header, row1, row2;
  std::getline(in, header);
  std::getline(in, row1);
  std::getline(in, row2);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 39);
  EXPECT_EQ(header.rfind("unit_id,end_cycle,attack_mask,min,", 0), 0u);
  EXPECT_EQ(row2.rfind("4,78,1,", 0), 0u);
}
