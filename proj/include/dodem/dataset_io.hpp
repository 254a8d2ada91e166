#pragma once

// Binary container for windowed samples and the text sidecar that carries
// a perturbed set's attack mask.
//
// Layout (little-endian): magic "DODEMWS1", u64 count, u64 rows, u64 cols,
// then per sample i32 unit_id, i32 end_cycle, f64 rul, rows*cols f64 values
// in row-major order.

#include <bit>
#include <cstring>
#include <filesystem>

#include "dodem/cmapss.hpp"
#include "dodem/report.hpp"

namespace dodem {

inline constexpr char kWindowMagic[8] = {'D', 'O', 'D', 'E', 'M', 'W', 'S', '1'};

namespace detail {

static_assert(std::endian::native == std::endian::little, "container format assumes a little-endian host");

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(std::string_view& in) {
  if (in.size() < sizeof(T)) throw InputError("windowed dataset is truncated");
  T v;
  std::memcpy(&v, in.data(), sizeof(T));
  in.remove_prefix(sizeof(T));
  return v;
}

}  // namespace detail

inline std::string encode_windows(std::span<const WindowedSample> samples) {
  const std::uint64_t rows = samples.empty() ? 0 : samples[0].window.rows();
  const std::uint64_t cols = samples.empty() ? 0 : samples[0].window.cols();
  std::string out(kWindowMagic, sizeof(kWindowMagic));
  detail::put<std::uint64_t>(out, samples.size());
  detail::put(out, rows);
  detail::put(out, cols);
  for (const auto& s : samples) {
    if (s.window.rows() != rows || s.window.cols() != cols) throw InputError("windows differ in shape");
    detail::put<std::int32_t>(out, s.unit_id);
    detail::put<std::int32_t>(out, s.end_cycle);
    detail::put(out, s.rul);
    for (double v : s.window.values()) detail::put(out, v);
  }
  return out;
}

inline std::vector<WindowedSample> decode_windows(std::string_view in) {
  if (in.size() < sizeof(kWindowMagic) || std::memcmp(in.data(), kWindowMagic, sizeof(kWindowMagic)) != 0)
    throw InputError("not a windowed dataset (bad magic)");
  in.remove_prefix(sizeof(kWindowMagic));
  const auto count = detail::take<std::uint64_t>(in);
  const auto rows = detail::take<std::uint64_t>(in);
  const auto cols = detail::take<std::uint64_t>(in);
  const std::uint64_t per = 16 + 8 * rows * cols;
  if (in.size() != count * per) throw InputError("windowed dataset size does not match its header");
  std::vector<WindowedSample> out(count);
  for (auto& s : out) {
    s.unit_id = detail::take<std::int32_t>(in);
    s.end_cycle = detail::take<std::int32_t>(in);
    s.rul = detail::take<double>(in);
    s.window = Matrix(rows, cols);
    for (auto& v : s.window.values()) v = detail::take<double>(in);
  }
  return out;
}

inline void save_windows(const std::filesystem::path& path, std::span<const WindowedSample> samples) {
  write_atomic(path, encode_windows(samples));
}

inline std::vector<WindowedSample> load_windows(const std::filesystem::path& path) {
  return decode_windows(read_file(path));
}

/// One "index,attacked" line per sample.
inline std::string encode_mask(const std::vector<bool>& mask) {
  std::string out = "index,attacked\n";
  for (std::size_t i = 0; i < mask.size(); ++i) out += std::to_string(i) + (mask[i] ? ",1\n" : ",0\n");
  return out;
}

inline std::vector<bool> decode_mask(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "index,attacked") throw InputError("mask sidecar lacks its header");
  std::vector<bool> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.substr(0, comma) != std::to_string(out.size()) ||
        (line.substr(comma + 1) != "0" && line.substr(comma + 1) != "1"))
      throw ParseError(line_no, "malformed mask row");
    out.push_back(line.back() == '1');
  }
  return out;
}

}  // namespace dodem
