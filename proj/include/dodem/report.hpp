#pragma once

// Deterministic CSV/JSON report emission. Files are written through a
// temporary sibling and renamed into place.

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "dodem/core.hpp"

namespace dodem {

inline constexpr int kReportSchemaVersion = 1;

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

inline void write_atomic(const std::filesystem::path& path, std::string_view content) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  if (ec) throw InputError("cannot create " + path.parent_path().string() + ": " + ec.message());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw InputError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) throw InputError("cannot rename into " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// A rectangular table of preformatted cells.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) {
    if (row.size() != columns.size()) throw InputError("row width does not match the header");
    rows.push_back(std::move(row));
  }

  std::string to_csv() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out.push_back(',');
        if (cells[i].find_first_of(",\"\n") == std::string::npos) {
          out += cells[i];
        } else {
          out.push_back('"');
          for (char c : cells[i]) {
            if (c == '"') out.push_back('"');
            out.push_back(c);
          }
          out.push_back('"');
        }
      }
      out.push_back('\n');
    };
    line(columns);
    for (const auto& r : rows) line(r);
    return out;
  }
};

inline std::string cell(double v) { return format_double(v); }
inline std::string cell(std::size_t v) { return std::to_string(v); }
inline std::string cell(int v) { return std::to_string(v); }
inline std::string cell(bool v) { return v ? "1" : "0"; }

/// Plot-ready long format: x is the adversarial ratio, y the metric value,
/// one series per strategy.
struct LongRow {
  std::string series;
  std::string method;
  double x = 0.0;
  std::string metric;
  double y = 0.0;
};

inline Table long_table(const std::vector<LongRow>& rows) {
  Table t{{"series", "method", "x", "metric", "y"}, {}};
  for (const auto& r : rows) t.add({r.series, r.method, cell(r.x), r.metric, cell(r.y)});
  return t;
}

struct ReportMeta {
  std::string config_hash;
  nlohmann::json seeds = nlohmann::json::object();
  nlohmann::json config = nlohmann::json::object();
};

/// Writes `<dir>/<name>.csv` and `<dir>/<name>.json`; the JSON repeats the
/// rows keyed by column.
inline void emit_report(const std::filesystem::path& dir, const std::string& name, const Table& table,
                        const ReportMeta& meta) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : table.rows) {
    nlohmann::json o = nlohmann::json::object();
    for (std::size_t i = 0; i < r.size(); ++i) o[table.columns[i]] = r[i];
    rows.push_back(std::move(o));
  }
  const nlohmann::json doc{{"schema_version", kReportSchemaVersion},
                           {"report", name},
                           {"config_hash", meta.config_hash},
                           {"seeds", meta.seeds},
                           {"config", meta.config},
                           {"columns", table.columns},
                           {"row_count", table.rows.size()},
                           {"rows", rows}};
  write_atomic(dir / (name + ".csv"), table.to_csv());
  write_atomic(dir / (name + ".json"), doc.dump(2) + "\n");
}

}  // namespace dodem
