#pragma once

#include <limits>

#include "dodem/cmapss.hpp"
#include "dodem/models.hpp"

namespace dodem {

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t batch_size = 128;
  int max_epochs = 150;
  int patience = 10;
};

class Adam {
 public:
  explicit Adam(std::size_t n, double lr = 0.001, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grads[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grads[i] * grads[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::vector<double> m_, v_;
  long long t_ = 0;
};

struct GradientResult {
  double loss = 0.0;
  std::vector<double> param_grads;
  std::vector<Matrix> input_grads;
};

namespace detail {

// Batches are split into this many fixed chunks whose partial sums are
// reduced in order, so results do not depend on the thread count.
inline constexpr std::size_t kReduceChunks = 8;

struct BatchGradient {
  double sse = 0.0;
  std::vector<double> grads;
};

// Sum over the batch of d/dθ (f - y)^2 scaled by `scale`, plus the SSE.
inline BatchGradient batch_gradient(const nn::Network& net, std::span<const Matrix* const> xs,
                                    std::span<const double> ys, double scale, std::uint64_t dropout_seed,
                                    bool dropout) {
  const std::size_t n = xs.size();
  const std::size_t chunks = std::min(kReduceChunks, n);
  std::vector<BatchGradient> partial(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    auto& part = partial[c];
    part.grads.assign(net.param_count(), 0.0);
    for (std::size_t i = n * c / chunks; i < n * (c + 1) / chunks; ++i) {
      Rng rng(derive_seed(dropout_seed, i));
      const nn::Trace tr = net.forward(*xs[i], dropout ? &rng : nullptr);
      const double r = tr.output - ys[i];
      part.sse += r * r;
      net.backward(tr, scale * 2.0 * r, part.grads, false);
    }
  });
  BatchGradient total{0.0, std::vector<double>(net.param_count(), 0.0)};
  for (const auto& part : partial) {
    total.sse += part.sse;
    for (std::size_t k = 0; k < total.grads.size(); ++k) total.grads[k] += part.grads[k];
  }
  return total;
}

}  // namespace detail

/// MSE loss with gradients for the parameters and every input window.
/// Dropout is inactive.
inline GradientResult backward(const TrainedModel& m, std::span<const Matrix* const> batch,
                               std::span<const double> targets) {
  if (batch.size() != targets.size() || batch.empty()) throw InputError("batch and targets must be nonempty and equal length");
  const std::size_t n = batch.size();
  const double scale = 1.0 / static_cast<double>(n);
  GradientResult out;
  out.param_grads.assign(m.net.param_count(), 0.0);
  out.input_grads.resize(n);
  std::vector<double> sq(n);
  std::vector<std::vector<double>> pg(n);
  parallel_for(n, [&](std::size_t i) {
    const nn::Trace tr = m.net.forward(*batch[i]);
    const double r = tr.output - targets[i];
    sq[i] = r * r;
    pg[i].assign(m.net.param_count(), 0.0);
    out.input_grads[i] = m.net.backward(tr, scale * 2.0 * r, pg[i], true);
  });
  for (std::size_t i = 0; i < n; ++i) {
    out.loss += sq[i];
    for (std::size_t k = 0; k < pg[i].size(); ++k) out.param_grads[k] += pg[i][k];
  }
  out.loss *= scale;
  if (!std::isfinite(out.loss)) throw NumericError("non-finite loss");
  return out;
}

inline double mse(const nn::Network& net, std::span<const Matrix* const> xs, std::span<const double> ys) {
  std::vector<double> sq(xs.size());
  parallel_for(xs.size(), [&](std::size_t i) {
    const double r = net.predict(*xs[i]) - ys[i];
    sq[i] = r * r;
  });
  double s = 0.0;
  for (double v : sq) s += v;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

/// Pointers and labels view over windowed samples.
struct SampleView {
  std::vector<const Matrix*> windows;
  std::vector<double> targets;

  SampleView() = default;
  explicit SampleView(std::span<const WindowedSample> samples) {
    windows.reserve(samples.size());
    targets.reserve(samples.size());
    for (const auto& s : samples) {
      windows.push_back(&s.window);
      targets.push_back(s.rul);
    }
  }
  std::size_t size() const { return windows.size(); }
};

/// Mini-batch Adam on MSE with early stopping on validation loss. Training
/// stops once the validation loss has not improved for max(patience, 1)
/// consecutive epochs; the best-validation parameters are returned.
inline TrainedModel train(TrainedModel m, const SampleView& train_set, const SampleView& val_set,
                          const TrainConfig& cfg) {
  if (train_set.size() == 0 || val_set.size() == 0) throw InputError("training and validation sets must be nonempty");
  if (cfg.batch_size == 0 || cfg.max_epochs < 1) throw InputError("invalid training configuration");
  Adam opt(m.net.param_count(), cfg.learning_rate);
  Rng shuffle_rng(derive_seed(m.seed, 0x5eed));
  std::vector<double> best(m.net.params().begin(), m.net.params().end());
  double best_val = std::numeric_limits<double>::infinity();
  int stale = 0;
  const int stop_after = std::max(cfg.patience, 1);
  const int start_epoch = static_cast<int>(m.history.size());
  std::vector<const Matrix*> bx;
  std::vector<double> by;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto order = permutation(train_set.size(), shuffle_rng);
    double sse = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      bx.clear();
      by.clear();
      for (std::size_t k = start; k < end; ++k) {
        bx.push_back(train_set.windows[order[k]]);
        by.push_back(train_set.targets[order[k]]);
      }
      const std::uint64_t dseed = derive_seed(m.seed, (static_cast<std::uint64_t>(start_epoch + epoch) << 32) | start);
      auto g = detail::batch_gradient(m.net, bx, by, 1.0 / static_cast<double>(bx.size()), dseed, true);
      if (!std::isfinite(g.sse) || !all_finite(g.grads))
        throw NumericError("training diverged at epoch " + std::to_string(start_epoch + epoch + 1));
      sse += g.sse;
      opt.step(m.net.mutable_params(), g.grads);
    }
    const double val = mse(m.net, val_set.windows, val_set.targets);
    if (!std::isfinite(val)) throw NumericError("validation loss non-finite at epoch " + std::to_string(start_epoch + epoch + 1));
    m.history.push_back({sse / static_cast<double>(train_set.size()), val});
    if (val < best_val) {
      best_val = val;
      best.assign(m.net.params().begin(), m.net.params().end());
      stale = 0;
    } else if (++stale >= stop_after) {
      break;
    }
  }
  std::copy(best.begin(), best.end(), m.net.mutable_params().begin());
  return m;
}

}  // namespace dodem
