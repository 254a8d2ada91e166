#pragma once

// Stacked denoising autoencoder over per-window channel means. Layer 1 maps
// 20 inputs to 50 sigmoid units, layer 2 maps those 50 codes to 25.

#include <nlohmann/json.hpp>

#include "dodem/cmapss.hpp"
#include "dodem/train.hpp"

namespace dodem {

/// Sigmoid encoder, linear decoder. Parameter layout: encoder W[hidden][in],
/// encoder b[hidden], decoder W[in][hidden], decoder b[in].
struct DaeLayer {
  std::size_t in = 0;
  std::size_t hidden = 0;
  std::vector<double> params;

  std::size_t enc_w() const { return 0; }
  std::size_t enc_b() const { return hidden * in; }
  std::size_t dec_w() const { return enc_b() + hidden; }
  std::size_t dec_b() const { return dec_w() + in * hidden; }
  std::size_t param_count() const { return dec_b() + in; }

  std::vector<double> encode(std::span<const double> x) const {
    std::vector<double> h(hidden);
    for (std::size_t j = 0; j < hidden; ++j) {
      double z = params[enc_b() + j];
      for (std::size_t i = 0; i < in; ++i) z += params[enc_w() + j * in + i] * x[i];
      h[j] = 1.0 / (1.0 + std::exp(-z));
    }
    return h;
  }

  std::vector<double> decode(std::span<const double> h) const {
    std::vector<double> y(in);
    for (std::size_t i = 0; i < in; ++i) {
      double z = params[dec_b() + i];
      for (std::size_t j = 0; j < hidden; ++j) z += params[dec_w() + i * hidden + j] * h[j];
      y[i] = z;
    }
    return y;
  }

  friend bool operator==(const DaeLayer&, const DaeLayer&) = default;
};

struct SdaeConfig {
  std::size_t inputs = 20;
  std::size_t hidden1 = 50;
  std::size_t hidden2 = 25;
  double mask_fraction = 0.1;
  int epochs = 100;
  std::size_t batch_size = 64;
  double learning_rate = 0.001;
};

struct SdaeModel {
  std::vector<std::size_t> channels;  // window columns averaged into the inputs
  DaeLayer layer1, layer2;
  double mask_fraction = 0.1;

  std::vector<double> input(const Matrix& window) const {
    std::vector<double> v(channels.size(), 0.0);
    for (std::size_t t = 0; t < window.rows(); ++t)
      for (std::size_t k = 0; k < channels.size(); ++k) v[k] += window(t, channels[k]);
    for (auto& x : v) x /= static_cast<double>(window.rows());
    return v;
  }

  std::vector<double> encode_input(std::span<const double> v) const {
    if (v.size() != layer1.in) throw InputError("SDAE input has wrong dimension");
    return layer2.encode(layer1.encode(v));
  }

  std::vector<double> encode(const Matrix& window) const { return encode_input(input(window)); }
  std::size_t code_size() const { return layer2.hidden; }

  friend bool operator==(const SdaeModel&, const SdaeModel&) = default;
};

/// The first `count` informative channels, followed by the remaining ones
/// in index order when fewer than `count` are informative.
inline std::vector<std::size_t> select_sdae_channels(const std::vector<bool>& informative, std::size_t count = 20) {
  if (informative.size() < count) throw InputError("not enough channels for the SDAE input");
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < informative.size() && out.size() < count; ++c)
    if (informative[c]) out.push_back(c);
  for (std::size_t c = 0; c < informative.size() && out.size() < count; ++c)
    if (!informative[c]) out.push_back(c);
  return out;
}

namespace detail {

inline DaeLayer init_dae(std::size_t in, std::size_t hidden, std::uint64_t seed) {
  DaeLayer l{in, hidden, {}};
  l.params.assign(l.param_count(), 0.0);
  Rng rng(seed);
  const double limit = std::sqrt(6.0 / static_cast<double>(in + hidden));
  for (std::size_t k = 0; k < hidden * in; ++k) l.params[l.enc_w() + k] = limit * (2.0 * uniform01(rng) - 1.0);
  for (std::size_t k = 0; k < hidden * in; ++k) l.params[l.dec_w() + k] = limit * (2.0 * uniform01(rng) - 1.0);
  return l;
}

/// Mean over the batch of the per-dimension squared reconstruction error of
/// `clean` from `corrupted`, accumulating its gradient into `grads`.
inline double dae_loss(const DaeLayer& l, const std::vector<std::vector<double>>& corrupted,
                       const std::vector<std::vector<double>>& clean, std::vector<double>* grads) {
  const double scale = 1.0 / static_cast<double>(corrupted.size() * l.in);
  double loss = 0.0;
  std::vector<double> dy(l.in), dh(l.hidden);
  for (std::size_t s = 0; s < corrupted.size(); ++s) {
    const auto& x = corrupted[s];
    const auto h = l.encode(x);
    const auto y = l.decode(h);
    for (std::size_t i = 0; i < l.in; ++i) {
      const double r = y[i] - clean[s][i];
      loss += r * r * scale;
      dy[i] = 2.0 * r * scale;
    }
    if (!grads) continue;
    auto& g = *grads;
    std::fill(dh.begin(), dh.end(), 0.0);
    for (std::size_t i = 0; i < l.in; ++i) {
      g[l.dec_b() + i] += dy[i];
      for (std::size_t j = 0; j < l.hidden; ++j) {
        g[l.dec_w() + i * l.hidden + j] += dy[i] * h[j];
        dh[j] += dy[i] * l.params[l.dec_w() + i * l.hidden + j];
      }
    }
    for (std::size_t j = 0; j < l.hidden; ++j) {
      const double dz = dh[j] * h[j] * (1.0 - h[j]);
      g[l.enc_b() + j] += dz;
      for (std::size_t i = 0; i < l.in; ++i) g[l.enc_w() + j * l.in + i] += dz * x[i];
    }
  }
  return loss;
}

inline std::vector<double> mask_noise(std::span<const double> x, double fraction, Rng& rng) {
  std::vector<double> out(x.begin(), x.end());
  for (auto& v : out)
    if (uniform01(rng) < fraction) v = 0.0;
  return out;
}

inline DaeLayer train_dae(const std::vector<std::vector<double>>& data, std::size_t hidden, const SdaeConfig& cfg,
                          std::uint64_t seed) {
  DaeLayer layer = init_dae(data.front().size(), hidden, derive_seed(seed, 1));
  Adam opt(layer.param_count(), cfg.learning_rate);
  Rng rng(derive_seed(seed, 2));
  std::vector<std::vector<double>> noisy, clean;
  std::vector<double> grads(layer.param_count());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = permutation(data.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      noisy.clear();
      clean.clear();
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) {
        clean.push_back(data[order[k]]);
        noisy.push_back(mask_noise(data[order[k]], cfg.mask_fraction, rng));
      }
      std::fill(grads.begin(), grads.end(), 0.0);
      const double loss = dae_loss(layer, noisy, clean, &grads);
      if (!std::isfinite(loss) || !all_finite(grads))
        throw NumericError("SDAE training diverged at epoch " + std::to_string(epoch + 1));
      opt.step(layer.params, grads);
    }
  }
  return layer;
}

}  // namespace detail

/// Greedy layer-wise training: layer 1 reconstructs clean inputs from masked
/// ones, layer 2 does the same on layer 1's clean codes.
inline SdaeModel sdae_train(std::span<const Matrix* const> windows, std::vector<std::size_t> channels,
                            std::uint64_t seed, const SdaeConfig& cfg = {}) {
  if (windows.empty()) throw InputError("SDAE training set is empty");
  if (channels.size() != cfg.inputs) throw InputError("SDAE channel list must have " + std::to_string(cfg.inputs) + " entries");
  SdaeModel m;
  m.channels = std::move(channels);
  m.mask_fraction = cfg.mask_fraction;
  std::vector<std::vector<double>> inputs(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) inputs[i] = m.input(*windows[i]);
  m.layer1 = detail::train_dae(inputs, cfg.hidden1, cfg, derive_seed(seed, 0x5dae1));
  std::vector<std::vector<double>> codes(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) codes[i] = m.layer1.encode(inputs[i]);
  m.layer2 = detail::train_dae(codes, cfg.hidden2, cfg, derive_seed(seed, 0x5dae2));
  return m;
}

inline void to_json(nlohmann::json& j, const DaeLayer& l) { j = {{"in", l.in}, {"hidden", l.hidden}, {"params", l.params}}; }

inline void from_json(const nlohmann::json& j, DaeLayer& l) {
  l.in = j.at("in").get<std::size_t>();
  l.hidden = j.at("hidden").get<std::size_t>();
  l.params = j.at("params").get<std::vector<double>>();
  if (l.params.size() != l.param_count()) throw InputError("DAE layer parameter count mismatch");
}

inline void to_json(nlohmann::json& j, const SdaeModel& m) {
  j = {{"channels", m.channels}, {"layer1", m.layer1}, {"layer2", m.layer2}, {"mask_fraction", m.mask_fraction}};
}

inline void from_json(const nlohmann::json& j, SdaeModel& m) {
  m.channels = j.at("channels").get<std::vector<std::size_t>>();
  m.layer1 = j.at("layer1").get<DaeLayer>();
  m.layer2 = j.at("layer2").get<DaeLayer>();
  m.mask_fraction = j.value("mask_fraction", 0.1);
  if (m.layer2.in != m.layer1.hidden || m.channels.size() != m.layer1.in) throw InputError("inconsistent SDAE shapes");
}

}  // namespace dodem
