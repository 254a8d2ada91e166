#pragma once

// Differentiable regression networks over w x d windows.
//
// A network is a set of parallel branches fed with the same input window,
// whose flattened outputs are concatenated and passed through a dense head
// ending in a single linear unit. Every layer has a hand-written backward
// pass, so one forward trace yields gradients for both the parameters and
// the input window.

#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dodem/core.hpp"

namespace dodem::nn {

enum class Activation { linear, elu, tanh, sigmoid };
enum class CellKind { rnn, lstm, gru };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::elu: return "elu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "linear") return Activation::linear;
  if (s == "elu") return Activation::elu;
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  throw InputError("unknown activation '" + s + "'");
}

inline std::string to_string(CellKind c) {
  switch (c) {
    case CellKind::rnn: return "rnn";
    case CellKind::lstm: return "lstm";
    case CellKind::gru: return "gru";
  }
  return "?";
}

inline CellKind cell_from_string(const std::string& s) {
  if (s == "rnn") return CellKind::rnn;
  if (s == "lstm") return CellKind::lstm;
  if (s == "gru") return CellKind::gru;
  throw InputError("unknown recurrent cell '" + s + "'");
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::linear: return z;
    case Activation::elu: return z > 0.0 ? z : std::expm1(z);
    case Activation::tanh: return std::tanh(z);
    case Activation::sigmoid: return sigmoid(z);
  }
  return z;
}

/// Derivative expressed through the pre-activation z and output y.
inline double activate_grad(Activation a, double z, double y) {
  switch (a) {
    case Activation::linear: return 1.0;
    case Activation::elu: return z > 0.0 ? 1.0 : y + 1.0;
    case Activation::tanh: return 1.0 - y * y;
    case Activation::sigmoid: return y * (1.0 - y);
  }
  return 1.0;
}

inline int gate_count(CellKind c) { return c == CellKind::rnn ? 1 : c == CellKind::lstm ? 4 : 3; }

// Layer descriptors. `offset` locates the layer's parameters in the flat
// parameter vector; shapes are implied by the other fields.
struct Conv1d {
  int in_ch = 0, out_ch = 0, kernel = 0;
  Activation act = Activation::elu;
  std::size_t offset = 0;
  // weights [out][kernel][in], then bias [out]
  std::size_t param_count() const { return static_cast<std::size_t>(out_ch) * kernel * in_ch + out_ch; }
  int pad_left() const { return (kernel - 1) / 2; }
};

struct Flatten {};

struct Dropout {
  double rate = 0.0;
};

struct Recurrent {
  CellKind cell = CellKind::lstm;
  int in = 0, hidden = 0;
  bool return_sequences = false;
  bool bidirectional = false;
  std::size_t offset = 0;
  // per direction: W [G*h][in], U [G*h][h], b [G*h]
  std::size_t direction_params() const {
    const std::size_t g = static_cast<std::size_t>(gate_count(cell)) * hidden;
    return g * in + g * hidden + g;
  }
  std::size_t param_count() const { return direction_params() * (bidirectional ? 2 : 1); }
  int out_width() const { return hidden * (bidirectional ? 2 : 1); }
};

struct Dense {
  int in = 0, out = 0;
  Activation act = Activation::elu;
  std::size_t offset = 0;
  // weights [out][in], then bias [out]
  std::size_t param_count() const { return static_cast<std::size_t>(out) * in + out; }
};

using Layer = std::variant<Conv1d, Flatten, Dropout, Recurrent, Dense>;

/// Named slice of the flat parameter vector; `fan_in`/`fan_out` drive
/// Glorot initialisation and biases have both zero.
struct ParamTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t fan_in = 0, fan_out = 0;
  std::size_t size() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }
  bool is_bias() const { return fan_in == 0; }
};

struct Topology {
  int steps = 0, channels = 0;
  std::vector<std::vector<Layer>> branches;
  std::vector<Layer> head;
  std::vector<ParamTensor> tensors;
  std::vector<int> branch_widths;  // flattened output width of each branch
  std::size_t param_count = 0;
  double output_scale = 1.0;  // fixed multiplier on the final linear unit
};

/// Incremental topology construction with shape checking.
class TopologyBuilder {
 public:
  TopologyBuilder(int steps, int channels) {
    if (steps < 1 || channels < 1) throw InputError("input dimensions must be positive");
    topo_.steps = steps;
    topo_.channels = channels;
  }

  TopologyBuilder& branch() {
    finish_branch();
    topo_.branches.emplace_back();
    seq_ = true;
    t_ = topo_.steps;
    width_ = topo_.channels;
    open_ = true;
    return *this;
  }

  TopologyBuilder& conv(int filters, int kernel, Activation act) {
    require_seq("conv1d");
    if (filters < 1) throw InputError("conv1d filters must be positive");
    if (kernel < 1 || kernel > t_)
      throw InputError("conv1d kernel " + std::to_string(kernel) + " incompatible with " +
                       std::to_string(t_) + " time steps");
    Conv1d c{width_, filters, kernel, act, topo_.param_count};
    const std::string p = prefix() + "conv" + std::to_string(layer_index()) + ".";
    add_tensor(p + "weight", {static_cast<std::size_t>(filters), static_cast<std::size_t>(kernel),
                              static_cast<std::size_t>(width_)},
               static_cast<std::size_t>(kernel) * width_, static_cast<std::size_t>(kernel) * filters);
    add_tensor(p + "bias", {static_cast<std::size_t>(filters)}, 0, 0);
    current().push_back(c);
    width_ = filters;
    return *this;
  }

  TopologyBuilder& flatten() {
    require_seq("flatten");
    current().push_back(Flatten{});
    width_ = t_ * width_;
    seq_ = false;
    return *this;
  }

  TopologyBuilder& dropout(double rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw InputError("dropout rate must be in [0,1)");
    current().push_back(Dropout{rate});
    return *this;
  }

  TopologyBuilder& recurrent(CellKind cell, int hidden, bool return_sequences, bool bidirectional) {
    require_seq("recurrent layer");
    if (hidden < 1) throw InputError("recurrent width must be positive");
    Recurrent r{cell, width_, hidden, return_sequences, bidirectional, topo_.param_count};
    const std::size_t g = static_cast<std::size_t>(gate_count(cell)) * hidden;
    for (int dir = 0; dir < (bidirectional ? 2 : 1); ++dir) {
      const std::string p = prefix() + to_string(cell) + std::to_string(layer_index()) + (dir ? ".bwd." : ".fwd.");
      add_tensor(p + "kernel", {g, static_cast<std::size_t>(width_)}, static_cast<std::size_t>(width_), g);
      add_tensor(p + "recurrent", {g, static_cast<std::size_t>(hidden)}, static_cast<std::size_t>(hidden), g);
      add_tensor(p + "bias", {g}, 0, 0);
    }
    current().push_back(r);
    width_ = r.out_width();
    seq_ = return_sequences;
    return *this;
  }

  TopologyBuilder& head() {
    finish_branch();
    if (topo_.branches.empty()) throw InputError("network needs at least one branch");
    in_head_ = true;
    seq_ = false;
    width_ = std::accumulate(topo_.branch_widths.begin(), topo_.branch_widths.end(), 0);
    return *this;
  }

  TopologyBuilder& dense(int units, Activation act) {
    if (seq_) throw InputError("dense layer needs a flattened input");
    if (units < 1) throw InputError("dense width must be positive");
    Dense d{width_, units, act, topo_.param_count};
    const std::string p = prefix() + "dense" + std::to_string(layer_index()) + ".";
    add_tensor(p + "weight", {static_cast<std::size_t>(units), static_cast<std::size_t>(width_)},
               static_cast<std::size_t>(width_), static_cast<std::size_t>(units));
    add_tensor(p + "bias", {static_cast<std::size_t>(units)}, 0, 0);
    current().push_back(d);
    width_ = units;
    return *this;
  }

  TopologyBuilder& output_scale(double c) {
    if (!(c > 0.0) || !std::isfinite(c)) throw InputError("output scale must be positive and finite");
    topo_.output_scale = c;
    return *this;
  }

  Topology build() {
    if (!in_head_) head();
    if (topo_.head.empty()) throw InputError("network head is empty");
    const auto* last = std::get_if<Dense>(&topo_.head.back());
    if (!last || last->out != 1 || last->act != Activation::linear)
      throw InputError("network must end in a single linear unit");
    return topo_;
  }

 private:
  std::vector<Layer>& current() {
    if (in_head_) return topo_.head;
    if (!open_) throw InputError("no open branch");
    return topo_.branches.back();
  }
  void require_seq(const char* what) {
    if (in_head_ || !open_ || !seq_) throw InputError(std::string(what) + " needs a sequence input");
  }
  void finish_branch() {
    if (!open_) return;
    if (seq_) throw InputError("branch must end in a flattened vector");
    topo_.branch_widths.push_back(width_);
    open_ = false;
  }
  std::size_t layer_index() { return current().size(); }
  std::string prefix() const {
    return in_head_ ? "head." : "branch" + std::to_string(topo_.branches.size() - 1) + ".";
  }
  void add_tensor(std::string name, std::vector<std::size_t> shape, std::size_t fan_in, std::size_t fan_out) {
    ParamTensor t{std::move(name), std::move(shape), topo_.param_count, fan_in, fan_out};
    topo_.param_count += t.size();
    topo_.tensors.push_back(std::move(t));
  }

  Topology topo_;
  bool open_ = false, in_head_ = false, seq_ = true;
  int t_ = 0, width_ = 0;
};

/// Glorot-uniform weights, zero biases.
inline std::vector<double> glorot_init(const Topology& topo, std::uint64_t seed) {
  std::vector<double> p(topo.param_count, 0.0);
  Rng rng(seed);
  for (const auto& t : topo.tensors) {
    if (t.is_bias()) continue;
    const double limit = std::sqrt(6.0 / static_cast<double>(t.fan_in + t.fan_out));
    for (std::size_t i = 0; i < t.size(); ++i) p[t.offset + i] = (2.0 * uniform01(rng) - 1.0) * limit;
  }
  return p;
}

namespace detail {

// Recorded state of one recurrent direction over a sequence.
struct DirectionTrace {
  Matrix x;      // T x in (time-reversed for the backward direction)
  Matrix h;      // (T+1) x H, row 0 is the zero initial state
  Matrix c;      // (T+1) x H, LSTM cell state
  Matrix gates;  // T x G*H post-nonlinearity gate values
  Matrix rh;     // T x H, GRU r * h_prev
};

struct LayerTrace {
  Matrix in, pre, out;
  std::vector<double> mask;  // dropout keep-mask scaled by 1/(1-p), empty when inactive
  DirectionTrace fwd, bwd;
};

inline void run_direction(const Recurrent& L, const double* p, const Matrix& x, DirectionTrace& tr) {
  const int H = L.hidden, G = gate_count(L.cell), in = L.in;
  const std::size_t T = x.rows();
  const std::size_t GH = static_cast<std::size_t>(G) * H;
  const double* W = p;
  const double* U = W + GH * in;
  const double* b = U + GH * H;
  tr.x = x;
  tr.h = Matrix(T + 1, H);
  tr.gates = Matrix(T, GH);
  if (L.cell == CellKind::lstm) tr.c = Matrix(T + 1, H);
  if (L.cell == CellKind::gru) tr.rh = Matrix(T, H);
  std::vector<double> z(GH);
  for (std::size_t t = 0; t < T; ++t) {
    const double* xt = x.data() + t * in;
    const double* hp = tr.h.data() + t * H;
    for (std::size_t g = 0; g < GH; ++g) {
      double s = b[g];
      const double* wr = W + g * in;
      for (int i = 0; i < in; ++i) s += wr[i] * xt[i];
      z[g] = s;
    }
    double* gt = tr.gates.data() + t * GH;
    double* hn = tr.h.data() + (t + 1) * H;
    switch (L.cell) {
      case CellKind::rnn:
        for (int j = 0; j < H; ++j) {
          double s = z[j];
          const double* ur = U + static_cast<std::size_t>(j) * H;
          for (int k = 0; k < H; ++k) s += ur[k] * hp[k];
          gt[j] = std::tanh(s);
          hn[j] = gt[j];
        }
        break;
      case CellKind::lstm: {
        for (std::size_t g = 0; g < GH; ++g) {
          const double* ur = U + g * H;
          double s = z[g];
          for (int k = 0; k < H; ++k) s += ur[k] * hp[k];
          z[g] = s;
        }
        const double* cp = tr.c.data() + t * H;
        double* cn = tr.c.data() + (t + 1) * H;
        for (int j = 0; j < H; ++j) {
          const double i_g = sigmoid(z[j]);
          const double f_g = sigmoid(z[H + j]);
          const double g_g = std::tanh(z[2 * H + j]);
          const double o_g = sigmoid(z[3 * H + j]);
          gt[j] = i_g;
          gt[H + j] = f_g;
          gt[2 * H + j] = g_g;
          gt[3 * H + j] = o_g;
          cn[j] = f_g * cp[j] + i_g * g_g;
          hn[j] = o_g * std::tanh(cn[j]);
        }
        break;
      }
      case CellKind::gru: {
        for (std::size_t g = 0; g < 2 * static_cast<std::size_t>(H); ++g) {
          const double* ur = U + g * H;
          double s = z[g];
          for (int k = 0; k < H; ++k) s += ur[k] * hp[k];
          gt[g] = sigmoid(s);  // update gate then reset gate
        }
        double* rh = tr.rh.data() + t * H;
        for (int k = 0; k < H; ++k) rh[k] = gt[H + k] * hp[k];
        for (int j = 0; j < H; ++j) {
          const double* ur = U + (2 * static_cast<std::size_t>(H) + j) * H;
          double s = z[2 * H + j];
          for (int k = 0; k < H; ++k) s += ur[k] * rh[k];
          const double n = std::tanh(s);
          gt[2 * H + j] = n;
          hn[j] = (1.0 - gt[j]) * n + gt[j] * hp[j];
        }
        break;
      }
    }
  }
}

// dh: T x H gradient w.r.t. each emitted hidden state (row t <-> h[t+1]).
// Accumulates parameter gradients into g and returns dL/dx (T x in).
inline Matrix backprop_direction(const Recurrent& L, const double* p, double* g, const DirectionTrace& tr,
                                 const Matrix& dh) {
  const int H = L.hidden, G = gate_count(L.cell), in = L.in;
  const std::size_t T = tr.x.rows();
  const std::size_t GH = static_cast<std::size_t>(G) * H;
  const double* W = p;
  const double* U = W + GH * in;
  double* gW = g;
  double* gU = gW + GH * in;
  double* gb = gU + GH * H;
  Matrix dx(T, in);
  std::vector<double> dh_next(H, 0.0), dc_next(H, 0.0), dz(GH), dh_prev(H), drh(H);
  for (std::size_t tt = T; tt-- > 0;) {
    const double* gt = tr.gates.data() + tt * GH;
    const double* hp = tr.h.data() + tt * H;
    std::vector<double> dht(H);
    for (int j = 0; j < H; ++j) dht[j] = dh(tt, j) + dh_next[j];
    std::fill(dh_prev.begin(), dh_prev.end(), 0.0);
    switch (L.cell) {
      case CellKind::rnn:
        for (int j = 0; j < H; ++j) dz[j] = dht[j] * (1.0 - gt[j] * gt[j]);
        break;
      case CellKind::lstm: {
        const double* cp = tr.c.data() + tt * H;
        const double* cn = tr.c.data() + (tt + 1) * H;
        for (int j = 0; j < H; ++j) {
          const double i_g = gt[j], f_g = gt[H + j], g_g = gt[2 * H + j], o_g = gt[3 * H + j];
          const double tc = std::tanh(cn[j]);
          const double dc = dc_next[j] + dht[j] * o_g * (1.0 - tc * tc);
          dz[j] = dc * g_g * i_g * (1.0 - i_g);
          dz[H + j] = dc * cp[j] * f_g * (1.0 - f_g);
          dz[2 * H + j] = dc * i_g * (1.0 - g_g * g_g);
          dz[3 * H + j] = dht[j] * tc * o_g * (1.0 - o_g);
          dc_next[j] = dc * f_g;
        }
        break;
      }
      case CellKind::gru: {
        const double* rh = tr.rh.data() + tt * H;
        for (int j = 0; j < H; ++j) {
          const double zg = gt[j], n = gt[2 * H + j];
          dz[2 * H + j] = dht[j] * (1.0 - zg) * (1.0 - n * n);
          dz[j] = dht[j] * (hp[j] - n) * zg * (1.0 - zg);
          dh_prev[j] += dht[j] * zg;
        }
        std::fill(drh.begin(), drh.end(), 0.0);
        for (int j = 0; j < H; ++j) {
          const double a = dz[2 * H + j];
          const double* ur = U + (2 * static_cast<std::size_t>(H) + j) * H;
          double* gur = gU + (2 * static_cast<std::size_t>(H) + j) * H;
          for (int k = 0; k < H; ++k) {
            drh[k] += ur[k] * a;
            gur[k] += a * rh[k];
          }
        }
        for (int k = 0; k < H; ++k) {
          const double r = gt[H + k];
          dz[H + k] = drh[k] * hp[k] * r * (1.0 - r);
          dh_prev[k] += drh[k] * r;
        }
        break;
      }
    }
    // Kernel and bias gradients for every gate; recurrent gradients for the
    // gates whose pre-activation includes U * h_prev directly.
    const double* xt = tr.x.data() + tt * in;
    double* dxt = dx.data() + tt * in;
    const std::size_t direct = L.cell == CellKind::gru ? 2 * static_cast<std::size_t>(H) : GH;
    for (std::size_t q = 0; q < GH; ++q) {
      const double a = dz[q];
      if (a == 0.0) continue;
      gb[q] += a;
      const double* wr = W + q * in;
      double* gwr = gW + q * in;
      for (int i = 0; i < in; ++i) {
        gwr[i] += a * xt[i];
        dxt[i] += wr[i] * a;
      }
      if (q < direct) {
        const double* ur = U + q * H;
        double* gur = gU + q * H;
        for (int k = 0; k < H; ++k) {
          gur[k] += a * hp[k];
          dh_prev[k] += ur[k] * a;
        }
      }
    }
    dh_next = dh_prev;
  }
  return dx;
}

inline Matrix reverse_rows(const Matrix& m) {
  Matrix r(m.rows(), m.cols());
  for (std::size_t t = 0; t < m.rows(); ++t) {
    auto src = m.row(m.rows() - 1 - t);
    std::copy(src.begin(), src.end(), r.row(t).begin());
  }
  return r;
}

inline void forward_layer(const Layer& layer, std::span<const double> params, LayerTrace& tr,
                          Rng* dropout_rng) {
  std::visit(
      [&](const auto& L) {
        using T = std::decay_t<decltype(L)>;
        const Matrix& x = tr.in;
        if constexpr (std::is_same_v<T, Conv1d>) {
          const std::size_t steps = x.rows();
          const double* W = params.data() + L.offset;
          const double* b = W + static_cast<std::size_t>(L.out_ch) * L.kernel * L.in_ch;
          tr.pre = Matrix(steps, L.out_ch);
          tr.out = Matrix(steps, L.out_ch);
          const int pl = L.pad_left();
          for (std::size_t t = 0; t < steps; ++t) {
            for (int o = 0; o < L.out_ch; ++o) {
              double s = b[o];
              for (int k = 0; k < L.kernel; ++k) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + k - pl;
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(steps)) continue;
                const double* w = W + (static_cast<std::size_t>(o) * L.kernel + k) * L.in_ch;
                const double* xr = x.data() + static_cast<std::size_t>(src) * L.in_ch;
                for (int c = 0; c < L.in_ch; ++c) s += w[c] * xr[c];
              }
              tr.pre(t, o) = s;
              tr.out(t, o) = activate(L.act, s);
            }
          }
        } else if constexpr (std::is_same_v<T, Flatten>) {
          tr.out = Matrix(1, x.size(), x.values());
        } else if constexpr (std::is_same_v<T, Dropout>) {
          tr.out = x;
          tr.mask.clear();
          if (dropout_rng && L.rate > 0.0) {
            tr.mask.resize(x.size());
            const double keep = 1.0 / (1.0 - L.rate);
            for (std::size_t i = 0; i < x.size(); ++i) {
              tr.mask[i] = uniform01(*dropout_rng) < L.rate ? 0.0 : keep;
              tr.out[i] *= tr.mask[i];
            }
          }
        } else if constexpr (std::is_same_v<T, Recurrent>) {
          const double* p = params.data() + L.offset;
          const std::size_t steps = x.rows();
          run_direction(L, p, x, tr.fwd);
          if (L.bidirectional) run_direction(L, p + L.direction_params(), reverse_rows(x), tr.bwd);
          const int H = L.hidden;
          if (L.return_sequences) {
            tr.out = Matrix(steps, L.out_width());
            for (std::size_t t = 0; t < steps; ++t) {
              for (int j = 0; j < H; ++j) tr.out(t, j) = tr.fwd.h(t + 1, j);
              if (L.bidirectional)
                for (int j = 0; j < H; ++j) tr.out(t, H + j) = tr.bwd.h(steps - t, j);
            }
          } else {
            tr.out = Matrix(1, L.out_width());
            for (int j = 0; j < H; ++j) tr.out[j] = tr.fwd.h(steps, j);
            if (L.bidirectional)
              for (int j = 0; j < H; ++j) tr.out[H + j] = tr.bwd.h(steps, j);
          }
        } else if constexpr (std::is_same_v<T, Dense>) {
          const double* W = params.data() + L.offset;
          const double* b = W + static_cast<std::size_t>(L.out) * L.in;
          tr.pre = Matrix(1, L.out);
          tr.out = Matrix(1, L.out);
          for (int o = 0; o < L.out; ++o) {
            double s = b[o];
            const double* w = W + static_cast<std::size_t>(o) * L.in;
            for (int i = 0; i < L.in; ++i) s += w[i] * x[i];
            tr.pre[o] = s;
            tr.out[o] = activate(L.act, s);
          }
        }
      },
      layer);
}

// Returns dL/d(layer input); accumulates parameter gradients.
inline Matrix backward_layer(const Layer& layer, std::span<const double> params, std::span<double> grads,
                             const LayerTrace& tr, const Matrix& dout) {
  return std::visit(
      [&](const auto& L) -> Matrix {
        using T = std::decay_t<decltype(L)>;
        const Matrix& x = tr.in;
        if constexpr (std::is_same_v<T, Conv1d>) {
          const std::size_t steps = x.rows();
          const double* W = params.data() + L.offset;
          double* gW = grads.data() + L.offset;
          double* gb = gW + static_cast<std::size_t>(L.out_ch) * L.kernel * L.in_ch;
          Matrix dx(steps, L.in_ch);
          const int pl = L.pad_left();
          for (std::size_t t = 0; t < steps; ++t) {
            for (int o = 0; o < L.out_ch; ++o) {
              const double dz = dout(t, o) * activate_grad(L.act, tr.pre(t, o), tr.out(t, o));
              if (dz == 0.0) continue;
              gb[o] += dz;
              for (int k = 0; k < L.kernel; ++k) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + k - pl;
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(steps)) continue;
                const std::size_t wo = (static_cast<std::size_t>(o) * L.kernel + k) * L.in_ch;
                const double* xr = x.data() + static_cast<std::size_t>(src) * L.in_ch;
                double* dxr = dx.data() + static_cast<std::size_t>(src) * L.in_ch;
                for (int c = 0; c < L.in_ch; ++c) {
                  gW[wo + c] += dz * xr[c];
                  dxr[c] += dz * W[wo + c];
                }
              }
            }
          }
          return dx;
        } else if constexpr (std::is_same_v<T, Flatten>) {
          return Matrix(x.rows(), x.cols(), dout.values());
        } else if constexpr (std::is_same_v<T, Dropout>) {
          Matrix dx = dout;
          if (!tr.mask.empty())
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= tr.mask[i];
          return dx;
        } else if constexpr (std::is_same_v<T, Recurrent>) {
          const std::size_t steps = x.rows();
          const int H = L.hidden;
          Matrix dh_f(steps, H), dh_b;
          if (L.bidirectional) dh_b = Matrix(steps, H);
          if (L.return_sequences) {
            for (std::size_t t = 0; t < steps; ++t) {
              for (int j = 0; j < H; ++j) dh_f(t, j) = dout(t, j);
              if (L.bidirectional)
                for (int j = 0; j < H; ++j) dh_b(steps - 1 - t, j) = dout(t, H + j);
            }
          } else {
            for (int j = 0; j < H; ++j) dh_f(steps - 1, j) = dout[j];
            if (L.bidirectional)
              for (int j = 0; j < H; ++j) dh_b(steps - 1, j) = dout[H + j];
          }
          const double* p = params.data() + L.offset;
          double* g = grads.data() + L.offset;
          Matrix dx = backprop_direction(L, p, g, tr.fwd, dh_f);
          if (L.bidirectional) {
            Matrix dxb = backprop_direction(L, p + L.direction_params(), g + L.direction_params(), tr.bwd, dh_b);
            for (std::size_t t = 0; t < steps; ++t)
              for (int i = 0; i < L.in; ++i) dx(t, i) += dxb(steps - 1 - t, i);
          }
          return dx;
        } else if constexpr (std::is_same_v<T, Dense>) {
          const double* W = params.data() + L.offset;
          double* gW = grads.data() + L.offset;
          double* gb = gW + static_cast<std::size_t>(L.out) * L.in;
          Matrix dx(1, L.in);
          for (int o = 0; o < L.out; ++o) {
            const double dz = dout[o] * activate_grad(L.act, tr.pre[o], tr.out[o]);
            if (dz == 0.0) continue;
            gb[o] += dz;
            const double* w = W + static_cast<std::size_t>(o) * L.in;
            double* gw = gW + static_cast<std::size_t>(o) * L.in;
            for (int i = 0; i < L.in; ++i) {
              gw[i] += dz * x[i];
              dx[i] += dz * w[i];
            }
          }
          return dx;
        }
      },
      layer);
}

}  // namespace detail

/// Forward record of one window, consumed by Network::backward.
struct Trace {
  std::vector<std::vector<detail::LayerTrace>> branches;
  std::vector<detail::LayerTrace> head;
  double output = 0.0;
};

/// Topology plus parameters. Value type; copies are independent.
class Network {
 public:
  Network() = default;
  Network(Topology topo, std::vector<double> params) : topo_(std::move(topo)), params_(std::move(params)) {
    if (params_.size() != topo_.param_count)
      throw InputError("parameter count " + std::to_string(params_.size()) + " does not match topology (" +
                       std::to_string(topo_.param_count) + ")");
  }

  const Topology& topology() const noexcept { return topo_; }
  std::span<const double> params() const noexcept { return params_; }
  std::span<double> mutable_params() noexcept { return params_; }
  std::size_t param_count() const noexcept { return params_.size(); }
  int steps() const noexcept { return topo_.steps; }
  int channels() const noexcept { return topo_.channels; }

  void check_input(const Matrix& x) const {
    if (x.rows() != static_cast<std::size_t>(topo_.steps) || x.cols() != static_cast<std::size_t>(topo_.channels))
      throw InputError("input shape " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                       " does not match network input " + std::to_string(topo_.steps) + "x" +
                       std::to_string(topo_.channels));
  }

  /// Forward pass. Dropout is active only when `dropout_rng` is given.
  Trace forward(const Matrix& x, Rng* dropout_rng = nullptr) const {
    check_input(x);
    Trace tr;
    tr.branches.resize(topo_.branches.size());
    Matrix concat(1, static_cast<std::size_t>(std::accumulate(topo_.branch_widths.begin(), topo_.branch_widths.end(), 0)));
    std::size_t at = 0;
    for (std::size_t b = 0; b < topo_.branches.size(); ++b) {
      const auto& layers = topo_.branches[b];
      auto& traces = tr.branches[b];
      traces.resize(layers.size());
      const Matrix* cur = &x;
      for (std::size_t l = 0; l < layers.size(); ++l) {
        traces[l].in = *cur;
        detail::forward_layer(layers[l], params_, traces[l], dropout_rng);
        cur = &traces[l].out;
      }
      std::copy(cur->values().begin(), cur->values().end(), concat.values().begin() + static_cast<std::ptrdiff_t>(at));
      at += cur->size();
    }
    tr.head.resize(topo_.head.size());
    const Matrix* cur = &concat;
    for (std::size_t l = 0; l < topo_.head.size(); ++l) {
      tr.head[l].in = *cur;
      detail::forward_layer(topo_.head[l], params_, tr.head[l], dropout_rng);
      cur = &tr.head[l].out;
    }
    tr.output = topo_.output_scale * (*cur)[0];
    return tr;
  }

  double predict(const Matrix& x) const { return forward(x).output; }

  /// Backpropagates d(loss)/d(output). Parameter gradients are added into
  /// `param_grads` (size param_count()); returns d(loss)/d(input) when
  /// `want_input` is set, otherwise an empty matrix.
  Matrix backward(const Trace& tr, double d_output, std::span<double> param_grads, bool want_input = true) const {
    if (param_grads.size() != params_.size()) throw InputError("gradient buffer size mismatch");
    Matrix d(1, 1, d_output * topo_.output_scale);
    for (std::size_t l = topo_.head.size(); l-- > 0;)
      d = detail::backward_layer(topo_.head[l], params_, param_grads, tr.head[l], d);
    Matrix dx;
    if (want_input) dx = Matrix(static_cast<std::size_t>(topo_.steps), static_cast<std::size_t>(topo_.channels));
    std::size_t at = 0;
    for (std::size_t b = 0; b < topo_.branches.size(); ++b) {
      const std::size_t width = static_cast<std::size_t>(topo_.branch_widths[b]);
      Matrix db(1, width);
      std::copy(d.values().begin() + static_cast<std::ptrdiff_t>(at),
                d.values().begin() + static_cast<std::ptrdiff_t>(at + width), db.values().begin());
      at += width;
      const auto& layers = topo_.branches[b];
      for (std::size_t l = layers.size(); l-- > 0;) {
        if (l == 0 && !want_input && !has_params(layers[0])) break;
        db = detail::backward_layer(layers[l], params_, param_grads, tr.branches[b][l], db);
      }
      if (want_input)
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += db[i];
    }
    return dx;
  }

  /// Gradient of (f(x) - y)^2 with respect to the input window.
  Matrix input_gradient(const Matrix& x, double y) const {
    const Trace tr = forward(x);
    std::vector<double> scratch(params_.size(), 0.0);
    return backward(tr, 2.0 * (tr.output - y), scratch, true);
  }

  /// Output and its gradient with respect to the input window.
  std::pair<double, Matrix> output_gradient(const Matrix& x) const {
    const Trace tr = forward(x);
    std::vector<double> scratch(params_.size(), 0.0);
    return {tr.output, backward(tr, 1.0, scratch, true)};
  }

  /// Single-branch network sharing the head: the first head layer keeps only
  /// the columns that read from `branch`.
  Network extract_branch(std::size_t branch) const {
    if (branch >= topo_.branches.size()) throw InputError("branch index out of range");
    TopologyBuilder builder(topo_.steps, topo_.channels);
    builder.branch();
    for (const auto& layer : topo_.branches[branch]) append(builder, layer);
    builder.head();
    for (const auto& layer : topo_.head) append(builder, layer);
    builder.output_scale(topo_.output_scale);
    Topology sub = builder.build();

    std::vector<double> p(sub.param_count);
    const auto copy_layer = [&](const Layer& from, const Layer& to) {
      std::visit(
          [&](const auto& src) {
            using T = std::decay_t<decltype(src)>;
            if constexpr (std::is_same_v<T, Conv1d> || std::is_same_v<T, Recurrent>) {
              const auto& dst = std::get<T>(to);
              std::copy_n(params_.begin() + static_cast<std::ptrdiff_t>(src.offset), src.param_count(),
                          p.begin() + static_cast<std::ptrdiff_t>(dst.offset));
            }
          },
          from);
    };
    for (std::size_t l = 0; l < topo_.branches[branch].size(); ++l)
      copy_layer(topo_.branches[branch][l], sub.branches[0][l]);
    std::size_t col0 = 0;
    for (std::size_t b = 0; b < branch; ++b) col0 += static_cast<std::size_t>(topo_.branch_widths[b]);
    for (std::size_t l = 0; l < topo_.head.size(); ++l) {
      const auto* src = std::get_if<Dense>(&topo_.head[l]);
      const auto* dst = std::get_if<Dense>(&sub.head[l]);
      if (!src || !dst) continue;
      const std::size_t first = l == first_dense_in_head() ? col0 : 0;
      for (int o = 0; o < dst->out; ++o) {
        for (int i = 0; i < dst->in; ++i)
          p[dst->offset + static_cast<std::size_t>(o) * dst->in + i] =
              params_[src->offset + static_cast<std::size_t>(o) * src->in + first + i];
        p[dst->offset + static_cast<std::size_t>(dst->out) * dst->in + o] =
            params_[src->offset + static_cast<std::size_t>(src->out) * src->in + o];
      }
    }
    return Network(std::move(sub), std::move(p));
  }

 private:
  static bool has_params(const Layer& l) {
    return std::holds_alternative<Conv1d>(l) || std::holds_alternative<Recurrent>(l) ||
           std::holds_alternative<Dense>(l);
  }
  std::size_t first_dense_in_head() const {
    for (std::size_t l = 0; l < topo_.head.size(); ++l)
      if (std::holds_alternative<Dense>(topo_.head[l])) return l;
    return SIZE_MAX;
  }
  static void append(TopologyBuilder& b, const Layer& layer) {
    std::visit(
        [&](const auto& L) {
          using T = std::decay_t<decltype(L)>;
          if constexpr (std::is_same_v<T, Conv1d>) b.conv(L.out_ch, L.kernel, L.act);
          else if constexpr (std::is_same_v<T, Flatten>) b.flatten();
          else if constexpr (std::is_same_v<T, Dropout>) b.dropout(L.rate);
          else if constexpr (std::is_same_v<T, Recurrent>) b.recurrent(L.cell, L.hidden, L.return_sequences, L.bidirectional);
          else if constexpr (std::is_same_v<T, Dense>) b.dense(L.out, L.act);
        },
        layer);
  }

  Topology topo_;
  std::vector<double> params_;
};

}  // namespace dodem::nn
