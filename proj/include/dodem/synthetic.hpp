#pragma once

// Turbofan-like run-to-failure simulator that writes files in the C-MAPSS
// layout. Used by the test-suite and for desk runs when the NASA files are
// not available locally. Unit counts and cycle extents follow the published
// subset statistics; sensor behaviour is an exponential wear model with
// per-sensor noise, operating-condition offsets and one or two fault modes.

#include <array>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "dodem/cmapss.hpp"

namespace dodem::synthetic {

struct SubsetProfile {
  std::string id;
  int train_units;
  int test_units;
  int train_max, train_min;
  int test_max, test_min;
  int conditions;
  int fault_modes;
};

inline SubsetProfile profile(const std::string& id) {
  if (id == "FD001") return {"FD001", 100, 100, 362, 128, 303, 31, 1, 1};
  if (id == "FD002") return {"FD002", 260, 259, 378, 128, 367, 21, 6, 1};
  if (id == "FD003") return {"FD003", 100, 100, 525, 145, 475, 38, 1, 2};
  if (id == "FD004") return {"FD004", 249, 248, 543, 128, 486, 19, 6, 2};
  throw InputError("unknown C-MAPSS subset '" + id + "'");
}

struct Subset {
  TrajectorySet train;
  TrajectorySet test;
  std::vector<double> test_rul;
};

namespace detail {

struct SensorModel {
  double base;
  double drift;   // change at end of life, fault mode 1
  double drift2;  // fault mode 2
  double noise;
  int decimals;
};

// Baselines and end-of-life drifts loosely follow sea-level FD001 readings;
// zero noise marks the channels that are constant under a single condition.
inline const std::array<SensorModel, kSensors>& sensor_models() {
  static const std::array<SensorModel, kSensors> m{{
      {518.67, 0.0, 0.0, 0.0, 2},     {642.5, 1.6, 1.2, 0.5, 2},     {1590.5, 26.0, 22.0, 6.0, 2},
      {1408.9, 42.0, 38.0, 9.0, 2},   {14.62, 0.0, 0.0, 0.0, 2},     {21.61, 0.0, 0.0, 0.0, 2},
      {553.4, -2.6, 3.0, 0.9, 2},     {2388.06, 0.25, 0.35, 0.07, 2}, {9065.2, 30.0, 90.0, 20.0, 2},
      {1.3, 0.0, 0.0, 0.0, 2},        {47.5, 1.25, -0.9, 0.27, 2},   {521.4, -2.3, 2.6, 0.75, 2},
      {2388.06, 0.25, 0.35, 0.07, 2}, {8143.7, 20.0, 60.0, 19.0, 2}, {8.44, 0.08, 0.06, 0.037, 4},
      {0.03, 0.0, 0.0, 0.0, 2},       {393.0, 4.0, 3.5, 1.5, 0},     {2388.0, 0.0, 0.0, 0.0, 0},
      {100.0, 0.0, 0.0, 0.0, 2},      {38.8, -0.6, 0.5, 0.18, 2},    {23.3, -0.36, 0.3, 0.11, 4},
  }};
  return m;
}

struct Condition {
  std::array<double, kSettings> settings;
  double scale;  // multiplicative effect on sensor baselines
};

inline const std::array<Condition, 6>& conditions() {
  static const std::array<Condition, 6> c{{
      {{0.0, 0.0, 100.0}, 1.0},
      {{10.0, 0.25, 100.0}, 0.93},
      {{20.0, 0.70, 100.0}, 0.86},
      {{25.0, 0.62, 60.0}, 0.80},
      {{35.0, 0.84, 100.0}, 0.74},
      {{42.0, 0.84, 100.0}, 0.70},
  }};
  return c;
}

inline double round_to(double v, int decimals) {
  const double p = std::pow(10.0, decimals);
  return std::round(v * p) / p;
}

inline SensorTrajectory simulate_unit(int unit_id, int life, int observed, const SubsetProfile& prof, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto& sensors = sensor_models();
  const double sharpness = 3.0 + 3.0 * uniform01(rng);
  const int fault = prof.fault_modes > 1 ? static_cast<int>(uniform_index(rng, 2)) : 0;
  std::array<double, kSensors> offset{};
  for (std::size_t s = 0; s < kSensors; ++s) offset[s] = 0.3 * sensors[s].noise * gauss(rng);

  SensorTrajectory unit{unit_id, {}};
  unit.rows.reserve(static_cast<std::size_t>(observed));
  for (int c = 1; c <= observed; ++c) {
    const double frac = static_cast<double>(c) / life;
    const double wear = (std::exp(sharpness * frac) - 1.0) / (std::exp(sharpness) - 1.0);
    const std::size_t cond_idx = prof.conditions > 1 ? uniform_index(rng, 6) : 0;
    const auto& cond = conditions()[cond_idx];
    TrajectoryRow row;
    row.cycle = c;
    if (prof.conditions > 1) {
      row.channels[0] = round_to(cond.settings[0] + 0.003 * gauss(rng), 4);
      row.channels[1] = round_to(cond.settings[1] + 0.0003 * gauss(rng), 4);
    } else {
      row.channels[0] = round_to(0.0022 * gauss(rng), 4);
      row.channels[1] = round_to(0.0003 * gauss(rng), 4);
    }
    row.channels[2] = cond.settings[2];
    for (std::size_t s = 0; s < kSensors; ++s) {
      const auto& m = sensors[s];
      const double drift = fault == 0 ? m.drift : m.drift2;
      const double v = m.base * cond.scale + offset[s] + drift * wear + m.noise * gauss(rng);
      row.channels[kSettings + s] = round_to(v, m.decimals);
    }
    unit.rows.push_back(row);
  }
  return unit;
}

inline int draw_life(Rng& rng, int lo, int hi) {
  // Right-skewed lifetimes concentrated near the lower third of the range.
  const double u = uniform01(rng);
  return lo + static_cast<int>(std::floor((hi - lo) * u * u * 0.999999));
}

}  // namespace detail

/// Deterministic synthetic subset. The first two units of each split hit the
/// minimum and maximum cycle counts exactly.
inline Subset generate(const std::string& id, std::uint64_t seed) {
  const SubsetProfile prof = profile(id);
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(id.back())));
  Subset out;
  for (int u = 1; u <= prof.train_units; ++u) {
    int life = u == 1 ? prof.train_min : u == 2 ? prof.train_max : detail::draw_life(rng, prof.train_min, prof.train_max);
    out.train.units.push_back(detail::simulate_unit(u, life, life, prof, rng));
  }
  for (int u = 1; u <= prof.test_units; ++u) {
    int observed = u == 1 ? prof.test_min
                   : u == 2 ? prof.test_max
                            : prof.test_min + detail::draw_life(rng, 0, prof.test_max - prof.test_min);
    const int remaining = 5 + static_cast<int>(uniform_index(rng, 140));
    out.test.units.push_back(detail::simulate_unit(u, observed + remaining, observed, prof, rng));
    out.test_rul.push_back(remaining);
  }
  return out;
}

inline void write_subset(const Subset& s, const std::string& dir, const std::string& id) {
  auto open = [&](const std::string& name) {
    std::ofstream f(dir + "/" + name);
    if (!f) throw InputError("cannot write " + dir + "/" + name);
    return f;
  };
  {
    auto f = open("train_" + id + ".txt");
    write_cmapss(f, s.train);
  }
  {
    auto f = open("test_" + id + ".txt");
    write_cmapss(f, s.test);
  }
  auto f = open("RUL_" + id + ".txt");
  for (double r : s.test_rul) f << static_cast<long long>(r) << '\n';
}

}  // namespace dodem::synthetic
