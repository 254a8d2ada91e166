#pragma once

// C-MAPSS trajectory ingestion: parsing, RUL labelling, z-score
// normalization and sliding-window sample construction.

#include <algorithm>
#include <array>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dodem/core.hpp"

namespace dodem {

inline constexpr std::size_t kSettings = 3;
inline constexpr std::size_t kSensors = 21;
inline constexpr std::size_t kChannels = kSettings + kSensors;
inline constexpr std::size_t kColumns = 2 + kChannels;

struct TrajectoryRow {
  int cycle = 0;
  std::array<double, kChannels> channels{};  // 3 settings then 21 sensors
  double rul = 0.0;                          // filled by label_rul

  friend bool operator==(const TrajectoryRow&, const TrajectoryRow&) = default;
};

struct SensorTrajectory {
  int unit_id = 0;
  std::vector<TrajectoryRow> rows;

  std::size_t length() const noexcept { return rows.size(); }
  friend bool operator==(const SensorTrajectory&, const SensorTrajectory&) = default;
};

struct TrajectorySet {
  std::vector<SensorTrajectory> units;

  std::size_t unit_count() const noexcept { return units.size(); }
  std::size_t row_count() const noexcept {
    std::size_t n = 0;
    for (const auto& u : units) n += u.rows.size();
    return n;
  }
  std::pair<std::size_t, std::size_t> cycle_extent() const {
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& u : units) {
      lo = std::min(lo, u.length());
      hi = std::max(hi, u.length());
    }
    return {units.empty() ? 0 : lo, hi};
  }
  const SensorTrajectory* find(int unit_id) const {
    for (const auto& u : units)
      if (u.unit_id == unit_id) return &u;
    return nullptr;
  }
  friend bool operator==(const TrajectorySet&, const TrajectorySet&) = default;
};

namespace detail {

inline double parse_number(std::string_view tok, std::size_t line_no) {
  double v = 0.0;
  const char* first = tok.data();
  if (!tok.empty() && tok.front() == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, tok.data() + tok.size(), v);
  if (ec != std::errc{} || ptr != tok.data() + tok.size() || !std::isfinite(v))
    throw ParseError(line_no, "malformed numeric token '" + std::string(tok) + "'");
  return v;
}

inline int parse_integral(std::string_view tok, std::size_t line_no, const char* what) {
  const double v = parse_number(tok, line_no);
  if (v != std::floor(v) || v < 1 || v > 1e9)
    throw ParseError(line_no, std::string(what) + " must be a positive integer, got '" +
                                  std::string(tok) + "'");
  return static_cast<int>(v);
}

}  // namespace detail

/// Parses whitespace-separated C-MAPSS rows (unit, cycle, 3 settings,
/// 21 sensors). Units are grouped by id in order of first appearance and rows
/// are sorted by cycle; cycles must be consecutive from 1.
inline TrajectorySet parse_cmapss(std::istream& in) {
  std::map<int, std::size_t> index;
  TrajectorySet set;
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string_view> toks;
  while (std::getline(in, line)) {
    ++line_no;
    toks.clear();
    std::string_view rest(line);
    while (true) {
      const auto b = rest.find_first_not_of(" \t\r");
      if (b == std::string_view::npos) break;
      rest.remove_prefix(b);
      const auto e = rest.find_first_of(" \t\r");
      toks.push_back(rest.substr(0, e));
      if (e == std::string_view::npos) break;
      rest.remove_prefix(e);
    }
    if (toks.empty()) continue;
    if (toks.size() != kColumns)
      throw ParseError(line_no, "expected " + std::to_string(kColumns) + " columns, got " +
                                    std::to_string(toks.size()));
    const int unit = detail::parse_integral(toks[0], line_no, "unit id");
    TrajectoryRow row;
    row.cycle = detail::parse_integral(toks[1], line_no, "cycle");
    for (std::size_t c = 0; c < kChannels; ++c) row.channels[c] = detail::parse_number(toks[2 + c], line_no);
    auto [it, inserted] = index.try_emplace(unit, set.units.size());
    if (inserted) set.units.push_back(SensorTrajectory{unit, {}});
    set.units[it->second].rows.push_back(row);
  }
  if (set.units.empty()) throw InputError("empty C-MAPSS input");
  for (auto& u : set.units) {
    std::stable_sort(u.rows.begin(), u.rows.end(),
                     [](const auto& a, const auto& b) { return a.cycle < b.cycle; });
    for (std::size_t i = 0; i < u.rows.size(); ++i)
      if (u.rows[i].cycle != static_cast<int>(i) + 1)
        throw InputError("unit " + std::to_string(u.unit_id) +
                         ": cycles are not consecutive from 1 (found " +
                         std::to_string(u.rows[i].cycle) + " at position " + std::to_string(i + 1) + ")");
  }
  return set;
}

inline TrajectorySet parse_cmapss(const std::string& text) {
  std::istringstream in(text);
  return parse_cmapss(in);
}

inline TrajectorySet load_cmapss(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  return parse_cmapss(in);
}

/// Writes rows in the C-MAPSS column layout. Values use the shortest
/// round-trip representation so re-parsing reproduces the set exactly.
inline void write_cmapss(std::ostream& out, const TrajectorySet& set) {
  for (const auto& u : set.units) {
    for (const auto& r : u.rows) {
      out << u.unit_id << ' ' << r.cycle;
      for (double v : r.channels) out << ' ' << format_double(v);
      out << '\n';
    }
  }
}

/// One integer per line: the true RUL at the last observed cycle of each
/// test unit, in unit order.
inline std::vector<double> parse_rul_file(std::istream& in) {
  std::vector<double> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tok, extra;
    if (!(ls >> tok)) continue;
    if (ls >> extra) throw ParseError(line_no, "expected a single RUL value");
    const double v = detail::parse_number(tok, line_no);
    if (v < 0) throw ParseError(line_no, "negative RUL");
    out.push_back(v);
  }
  if (out.empty()) throw InputError("empty RUL file");
  return out;
}

inline std::vector<double> load_rul_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  return parse_rul_file(in);
}

/// Piecewise-linear label: min(L - c, cap) for a run-to-failure unit.
/// `final_rul` gives, per unit, the RUL remaining after the last observed
/// cycle (test units are truncated before failure); empty means 0.
inline TrajectorySet label_rul(TrajectorySet set, double cap, std::span<const double> final_rul = {}) {
  if (!(cap > 0)) throw InputError("RUL cap must be positive");
  if (!final_rul.empty() && final_rul.size() != set.units.size())
    throw InputError("RUL ground truth has " + std::to_string(final_rul.size()) + " entries for " +
                     std::to_string(set.units.size()) + " units");
  for (std::size_t u = 0; u < set.units.size(); ++u) {
    auto& rows = set.units[u].rows;
    const double tail = final_rul.empty() ? 0.0 : final_rul[u];
    const double len = static_cast<double>(rows.size());
    for (auto& r : rows) r.rul = std::min(len - r.cycle + tail, cap);
  }
  return set;
}

struct Normalizer {
  std::array<double, kChannels> mean{};
  std::array<double, kChannels> std{};

  static constexpr double kConstantTol = 1e-12;

  bool is_constant(std::size_t c) const { return std[c] < kConstantTol; }

  std::vector<bool> informative_mask() const {
    std::vector<bool> m(kChannels);
    for (std::size_t c = 0; c < kChannels; ++c) m[c] = !is_constant(c);
    return m;
  }

  double apply(std::size_t c, double v) const { return is_constant(c) ? 0.0 : (v - mean[c]) / std[c]; }

  friend bool operator==(const Normalizer&, const Normalizer&) = default;
};

inline Normalizer fit_normalizer(const TrajectorySet& train) {
  const std::size_t n = train.row_count();
  if (n < 2) throw InputError("normalizer needs at least 2 rows");
  Normalizer norm;
  for (std::size_t c = 0; c < kChannels; ++c) {
    double s = 0.0;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& u : train.units)
      for (const auto& r : u.rows) {
        s += r.channels[c];
        lo = std::min(lo, r.channels[c]);
        hi = std::max(hi, r.channels[c]);
      }
    if (lo == hi) {  // summation error would otherwise leave a tiny nonzero std
      norm.mean[c] = lo;
      norm.std[c] = 0.0;
      continue;
    }
    const double m = s / static_cast<double>(n);
    double ss = 0.0;
    for (const auto& u : train.units)
      for (const auto& r : u.rows) ss += (r.channels[c] - m) * (r.channels[c] - m);
    norm.mean[c] = m;
    norm.std[c] = std::sqrt(ss / static_cast<double>(n));
  }
  return norm;
}

inline TrajectorySet apply_normalizer(const Normalizer& norm, TrajectorySet set) {
  for (auto& u : set.units)
    for (auto& r : u.rows)
      for (std::size_t c = 0; c < kChannels; ++c) r.channels[c] = norm.apply(c, r.channels[c]);
  return set;
}

struct WindowedSample {
  Matrix window;  // w x d
  double rul = 0.0;
  int unit_id = 0;
  int end_cycle = 0;

  friend bool operator==(const WindowedSample&, const WindowedSample&) = default;
};

/// Sliding windows ending at cycles w, w+stride, ... Units shorter than w
/// yield a single window left-padded with copies of the first row.
inline std::vector<WindowedSample> make_windows(const SensorTrajectory& unit, std::size_t w,
                                                std::size_t stride) {
  if (w == 0 || stride == 0) throw InputError("window and stride must be >= 1");
  const std::size_t len = unit.rows.size();
  std::vector<WindowedSample> out;
  if (len == 0) return out;
  auto build = [&](std::size_t end) {  // end is a 0-based row index, inclusive
    WindowedSample s;
    s.window = Matrix(w, kChannels);
    for (std::size_t t = 0; t < w; ++t) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(end) - static_cast<std::ptrdiff_t>(w - 1 - t);
      const auto& row = unit.rows[static_cast<std::size_t>(std::max<std::ptrdiff_t>(src, 0))];
      std::copy(row.channels.begin(), row.channels.end(), s.window.row(t).begin());
    }
    s.rul = unit.rows[end].rul;
    s.unit_id = unit.unit_id;
    s.end_cycle = unit.rows[end].cycle;
    return s;
  };
  if (len < w) {
    out.push_back(build(len - 1));
    return out;
  }
  for (std::size_t end = w - 1; end < len; end += stride) out.push_back(build(end));
  return out;
}

/// Only the window ending at the last observed cycle.
inline WindowedSample last_window(const SensorTrajectory& unit, std::size_t w) {
  SensorTrajectory tail{unit.unit_id, {}};
  const std::size_t len = unit.rows.size();
  if (len == 0) throw InputError("empty unit");
  const std::size_t from = len > w ? len - w : 0;
  tail.rows.assign(unit.rows.begin() + static_cast<std::ptrdiff_t>(from), unit.rows.end());
  return make_windows(tail, w, w).back();
}

inline std::vector<WindowedSample> make_windows(const TrajectorySet& set, std::size_t w, std::size_t stride) {
  std::vector<WindowedSample> out;
  for (const auto& u : set.units) {
    auto ws = make_windows(u, w, stride);
    std::move(ws.begin(), ws.end(), std::back_inserter(out));
  }
  return out;
}

/// Splits a set into two by unit position: the first `count` units and the rest.
inline std::pair<TrajectorySet, TrajectorySet> split_units(const TrajectorySet& set, std::size_t count) {
  TrajectorySet a, b;
  for (std::size_t i = 0; i < set.units.size(); ++i) (i < count ? a : b).units.push_back(set.units[i]);
  return {a, b};
}

}  // namespace dodem
