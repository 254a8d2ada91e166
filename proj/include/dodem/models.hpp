#pragma once

// The substitute (1-D CNN) and target (recurrent and hybrid) regression
// architectures, the immutable TrainedModel container and its checkpoint
// format.

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dodem/network.hpp"

namespace dodem {

enum class Architecture { cnn1d, rnn, lstm, blstm, gru, bgru, cgru, glstm };

inline constexpr std::array<Architecture, 8> kAllArchitectures{
    Architecture::cnn1d, Architecture::rnn, Architecture::lstm, Architecture::blstm,
    Architecture::gru,   Architecture::bgru, Architecture::cgru, Architecture::glstm};

inline constexpr std::array<Architecture, 7> kTargetArchitectures{
    Architecture::rnn, Architecture::lstm, Architecture::blstm, Architecture::gru,
    Architecture::bgru, Architecture::cgru, Architecture::glstm};

inline std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::cnn1d: return "CNN1D";
    case Architecture::rnn: return "RNN";
    case Architecture::lstm: return "LSTM";
    case Architecture::blstm: return "BLSTM";
    case Architecture::gru: return "GRU";
    case Architecture::bgru: return "BGRU";
    case Architecture::cgru: return "CGRU";
    case Architecture::glstm: return "GLSTM";
  }
  return "?";
}

inline Architecture architecture_from_string(const std::string& s) {
  for (auto a : kAllArchitectures)
    if (to_string(a) == s) return a;
  throw InputError("unknown architecture '" + s + "'");
}

struct ModelSpec {
  Architecture architecture = Architecture::lstm;
  std::vector<int> recurrent_widths{64, 32, 16};
  std::vector<int> conv_filters{10, 10, 10, 10, 1};
  int conv_kernel = 10;
  std::vector<int> head_widths;  // empty: architecture default
  std::string activation = "elu";
  double dropout = 0.5;
  double width_scale = 0.25;
  double output_scale = 1.0;  // fixed factor on the output unit, e.g. the RUL cap

  /// Architecture defaults: 100-unit head after the CNN and the hybrids,
  /// two 8-unit layers after the pure recurrent stacks.
  std::vector<int> resolved_head() const {
    if (!head_widths.empty()) return head_widths;
    switch (architecture) {
      case Architecture::cnn1d:
      case Architecture::cgru:
      case Architecture::glstm: return {100};
      default: return {8, 8};
    }
  }

  int scaled(int width) const { return std::max(1, static_cast<int>(std::ceil(width * width_scale - 1e-9))); }

  void validate() const {
    if (!(width_scale > 0.0)) throw InputError("width scale must be positive");
    if (!(output_scale > 0.0) || !std::isfinite(output_scale)) throw InputError("output scale must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InputError("dropout must be in [0,1)");
    const bool uses_rnn = architecture != Architecture::cnn1d;
    const bool uses_cnn = architecture == Architecture::cnn1d || architecture == Architecture::cgru;
    auto positive = [](const std::vector<int>& v, const char* what) {
      if (v.empty()) throw InputError(std::string(what) + " list is empty");
      for (int w : v)
        if (w <= 0) throw InputError(std::string(what) + " widths must be positive");
    };
    if (uses_rnn) positive(recurrent_widths, "recurrent");
    if (uses_cnn) {
      positive(conv_filters, "conv filter");
      if (conv_kernel < 1) throw InputError("conv kernel must be positive");
    }
    for (int w : head_widths)
      if (w <= 0) throw InputError("head widths must be positive");
    nn::activation_from_string(activation);
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = {{"architecture", to_string(s.architecture)},
       {"recurrent_widths", s.recurrent_widths},
       {"conv_filters", s.conv_filters},
       {"conv_kernel", s.conv_kernel},
       {"head_widths", s.head_widths},
       {"activation", s.activation},
       {"dropout", s.dropout},
       {"width_scale", s.width_scale},
       {"output_scale", s.output_scale}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  ModelSpec d;
  s.architecture = architecture_from_string(j.at("architecture").get<std::string>());
  s.recurrent_widths = j.value("recurrent_widths", d.recurrent_widths);
  s.conv_filters = j.value("conv_filters", d.conv_filters);
  s.conv_kernel = j.value("conv_kernel", d.conv_kernel);
  s.head_widths = j.value("head_widths", d.head_widths);
  s.activation = j.value("activation", d.activation);
  s.dropout = j.value("dropout", d.dropout);
  s.width_scale = j.value("width_scale", d.width_scale);
  s.output_scale = j.value("output_scale", d.output_scale);
}

namespace detail {

// Conv stack ending in flatten + dropout. The last conv layer keeps its
// configured filter count (1 by default) so the flattened width stays w.
inline void add_cnn_trunk(nn::TopologyBuilder& b, const ModelSpec& s, nn::Activation act) {
  for (std::size_t i = 0; i < s.conv_filters.size(); ++i) {
    const bool last = i + 1 == s.conv_filters.size();
    b.conv(last ? s.conv_filters[i] : s.scaled(s.conv_filters[i]), s.conv_kernel, act);
  }
  b.flatten();
  if (s.dropout > 0.0) b.dropout(s.dropout);
}

inline void add_recurrent_trunk(nn::TopologyBuilder& b, const ModelSpec& s, nn::CellKind cell, bool bidirectional) {
  for (std::size_t i = 0; i < s.recurrent_widths.size(); ++i)
    b.recurrent(cell, s.scaled(s.recurrent_widths[i]), i + 1 < s.recurrent_widths.size(), bidirectional);
}

}  // namespace detail

inline nn::Topology build_topology(const ModelSpec& spec, int steps, int channels) {
  spec.validate();
  const nn::Activation act = nn::activation_from_string(spec.activation);
  nn::TopologyBuilder b(steps, channels);
  switch (spec.architecture) {
    case Architecture::cnn1d:
      detail::add_cnn_trunk(b.branch(), spec, act);
      break;
    case Architecture::rnn: detail::add_recurrent_trunk(b.branch(), spec, nn::CellKind::rnn, false); break;
    case Architecture::lstm: detail::add_recurrent_trunk(b.branch(), spec, nn::CellKind::lstm, false); break;
    case Architecture::blstm: detail::add_recurrent_trunk(b.branch(), spec, nn::CellKind::lstm, true); break;
    case Architecture::gru: detail::add_recurrent_trunk(b.branch(), spec, nn::CellKind::gru, false); break;
    case Architecture::bgru: detail::add_recurrent_trunk(b.branch(), spec, nn::CellKind::gru, true); break;
    case Architecture::cgru:
      detail::add_cnn_trunk(b.branch(), spec, act);
      detail::add_recurrent_trunk(b.branch(), spec, nn::CellKind::gru, false);
      break;
    case Architecture::glstm:
      detail::add_recurrent_trunk(b.branch(), spec, nn::CellKind::gru, false);
      detail::add_recurrent_trunk(b.branch(), spec, nn::CellKind::lstm, false);
      break;
  }
  b.head();
  for (int w : spec.resolved_head()) b.dense(spec.scaled(w), act);
  b.dense(1, nn::Activation::linear);
  b.output_scale(spec.output_scale);
  return b.build();
}

struct EpochRecord {
  double train_loss = 0.0;
  double val_loss = 0.0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

/// Architecture, parameters, seed and training history. Treated as
/// immutable once training returns it.
struct TrainedModel {
  ModelSpec spec;
  nn::Network net;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> history;

  double predict(const Matrix& window) const { return net.predict(window); }
  Matrix input_gradient(const Matrix& window, double target) const { return net.input_gradient(window, target); }
};

/// Mean prediction of several models. Its input gradient is that of the
/// squared error of the mean, so attacks can target the ensemble as a whole.
struct EnsembleMean {
  std::vector<const TrainedModel*> members;

  double predict(const Matrix& window) const {
    double s = 0.0;
    for (const auto* m : members) s += m->predict(window);
    return s / static_cast<double>(members.size());
  }

  Matrix input_gradient(const Matrix& window, double target) const {
    if (members.empty()) throw InputError("empty ensemble");
    Matrix g(window.rows(), window.cols());
    double f = 0.0;
    for (const auto* m : members) {
      auto [out, grad] = m->net.output_gradient(window);
      f += out;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += grad[i];
    }
    const double n = static_cast<double>(members.size());
    const double scale = 2.0 * (f / n - target) / n;
    for (auto& v : g.values()) v *= scale;
    return g;
  }
};

/// Deterministic Glorot initialisation of the architecture for a w x d input.
inline TrainedModel build_model(const ModelSpec& spec, int steps, int channels, std::uint64_t seed) {
  nn::Topology topo = build_topology(spec, steps, channels);
  auto params = nn::glorot_init(topo, seed);
  return TrainedModel{spec, nn::Network(std::move(topo), std::move(params)), seed, {}};
}

/// Raw predictions, optionally clamped at zero for reporting.
inline std::vector<double> predict_rul(const TrainedModel& m, std::span<const Matrix* const> windows,
                                       bool clamp = true) {
  std::vector<double> out(windows.size());
  parallel_for(windows.size(), [&](std::size_t i) {
    const double v = m.predict(*windows[i]);
    out[i] = clamp ? std::max(0.0, v) : v;
  });
  return out;
}

// Checkpoint layout: 8-byte magic, u64 header length, JSON header, then the
// parameters as little-endian IEEE-754 doubles.
inline constexpr char kCheckpointMagic[8] = {'D', 'O', 'D', 'E', 'M', 'C', 'K', '1'};

inline void save_checkpoint(const TrainedModel& m, std::ostream& out) {
  nlohmann::json header;
  header["spec"] = m.spec;
  header["steps"] = m.net.steps();
  header["channels"] = m.net.channels();
  header["seed"] = m.seed;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : m.net.topology().tensors)
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}});
  header["tensors"] = tensors;
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& e : m.history) hist.push_back({e.train_loss, e.val_loss});
  header["history"] = hist;
  header["param_count"] = m.net.param_count();
  const std::string h = header.dump();
  const std::uint64_t len = h.size();
  out.write(kCheckpointMagic, 8);
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  const auto p = m.net.params();
  out.write(reinterpret_cast<const char*>(p.data()), static_cast<std::streamsize>(p.size() * sizeof(double)));
  if (!out) throw Error("checkpoint write failed");
}

inline TrainedModel load_checkpoint(std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw InputError("not a model checkpoint");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 28)) throw InputError("corrupt checkpoint header");
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  const auto header = nlohmann::json::parse(h);
  const ModelSpec spec = header.at("spec").get<ModelSpec>();
  nn::Topology topo = build_topology(spec, header.at("steps").get<int>(), header.at("channels").get<int>());
  if (topo.param_count != header.at("param_count").get<std::size_t>())
    throw InputError("checkpoint parameter count does not match its architecture");
  std::vector<double> params(topo.param_count);
  in.read(reinterpret_cast<char*>(params.data()), static_cast<std::streamsize>(params.size() * sizeof(double)));
  if (!in) throw InputError("truncated checkpoint");
  TrainedModel m{spec, nn::Network(std::move(topo), std::move(params)), header.at("seed").get<std::uint64_t>(), {}};
  for (const auto& e : header.at("history")) m.history.push_back({e[0].get<double>(), e[1].get<double>()});
  return m;
}

inline void save_checkpoint(const TrainedModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  save_checkpoint(m, out);
}

inline TrainedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return load_checkpoint(in);
}

}  // namespace dodem
