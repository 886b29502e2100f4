#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#if defined(__SSE2__)
#include <xmmintrin.h>
#endif

#include "nimbus/autodiff.hpp"
#include "nimbus/dataset.hpp"
#include "nimbus/error.hpp"
#include "nimbus/metrics.hpp"
#include "nimbus/random.hpp"
#include "nimbus/unet.hpp"

namespace nimbus {

struct TrainConfig {
  int epochs = 300;
  int batch_size = 4;
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  bool shuffle_each_epoch = true;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1, got " + std::to_string(epochs));
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1, got " + std::to_string(batch_size));
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("train: adam betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("train: epsilon must be > 0");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// One Adam update at step t (1-based), in place. Arithmetic is done in
/// double and stored back as float.
inline void adam_step(std::span<float> param, std::span<const float> grad, std::span<float> m,
                      std::span<float> v, long t, const TrainConfig& cfg, const std::string& name = "param") {
  if (param.size() != grad.size() || param.size() != m.size() || param.size() != v.size())
    throw ShapeError("adam_step: buffer sizes differ for " + name);
  if (t < 1) throw UsageError("adam_step: step must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    if (!std::isfinite(g))
      throw DivergenceError("non-finite gradient in " + name + "[" + std::to_string(i) + "] at step " +
                            std::to_string(t));
    const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    const double m_hat = static_cast<double>(m[i]) / bc1;
    const double v_hat = static_cast<double>(v[i]) / bc2;
    param[i] = static_cast<float>(param[i] - cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon));
  }
}

/// Everything needed to continue training exactly where it stopped.
struct TrainState {
  UNetParams<float> params;
  std::vector<Tensor<float>> adam_m;
  std::vector<Tensor<float>> adam_v;
  int epoch = 0;   // completed epochs
  long step = 0;   // completed optimiser steps
  std::vector<double> loss_history;

  static TrainState fresh(const UNetConfig& net) {
    TrainState s{init_params<float>(net), {}, {}, 0, 0, {}};
    for (const auto& e : s.params) {
      s.adam_m.emplace_back(e.tensor->shape());
      s.adam_v.emplace_back(e.tensor->shape());
    }
    return s;
  }
};

/// Flushes subnormals to zero (FTZ and DAZ) while alive; no-op off x86.
class FlushDenormals {
 public:
#if defined(__SSE2__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
  ~FlushDenormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#endif
};

/// Stacks sample images into an (n, 3, r, r) batch.
inline Tensor<float> stack_images(const std::vector<Sample>& samples, std::span<const std::size_t> order) {
  const Shape one = samples.at(order[0]).image.shape();
  Tensor<float> out(Shape{static_cast<int>(order.size()), one.c, one.h, one.w});
  const std::size_t per = one.size();
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& img = samples[order[i]].image;
    if (img.shape() != one) throw ShapeError("stack_images: mixed sample shapes");
    std::copy(img.values().begin(), img.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

inline Tensor<float> stack_targets(const std::vector<Sample>& samples, std::span<const std::size_t> order) {
  const int r = samples.at(order[0]).gt.height;
  Tensor<float> out(Shape{static_cast<int>(order.size()), 1, r, samples[order[0]].gt.width});
  const std::size_t per = out.shape().plane();
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& t = samples[order[i]].target;
    if (t.size() != per) throw ShapeError("stack_targets: mixed sample shapes");
    std::copy(t.begin(), t.end(), out.values().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

/// Sample visiting order for an epoch; seeded by (train seed, epoch index).
inline std::vector<std::size_t> epoch_order(std::size_t n, const TrainConfig& cfg, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (cfg.shuffle_each_epoch) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(std::span<std::size_t>(order));
  }
  return order;
}

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

/// Runs epochs state.epoch .. until_epoch - 1 over `samples`.
inline void train_until(TrainState& state, const TrainConfig& cfg, const std::vector<Sample>& samples,
                        int until_epoch, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (samples.empty()) throw ConfigError("train: no training samples");
  const FlushDenormals ftz;
  const auto& params = state.params;

  for (int epoch = state.epoch; epoch < until_epoch; ++epoch) {
    const auto order = epoch_order(samples.size(), cfg, epoch);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t count = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      const std::span<const std::size_t> idx(order.data() + start, count);

      Tape<float> tape;
      auto x = make_var(stack_images(samples, idx));
      auto target = make_var(stack_targets(samples, idx));
      auto loss = mse_loss(forward(params, x, &tape), target, &tape);
      const double loss_value = (*loss)[0];
      if (!std::isfinite(loss_value))
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                              std::to_string(state.step + 1));

      params.zero_grads();
      tape.backward(loss);
      ++state.step;
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i].tensor;
        adam_step(p.data(), p.grad(), state.adam_m[i].data(), state.adam_v[i].data(), state.step, cfg,
                  params[i].name);
      }
      loss_sum += loss_value * static_cast<double>(count);
    }
    const double mean_loss = loss_sum / static_cast<double>(samples.size());
    state.loss_history.push_back(mean_loss);
    state.epoch = epoch + 1;
    if (on_epoch) on_epoch(state.epoch, mean_loss);
  }
  params.zero_grads();
}

struct TrainResult {
  UNetParams<float> params;
  std::vector<double> loss_history;
};

inline TrainResult train(const TrainConfig& cfg, const UNetConfig& net, const std::vector<Sample>& samples,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  TrainState state = TrainState::fresh(net);
  train_until(state, cfg, samples, cfg.epochs, on_epoch);
  return {std::move(state.params), std::move(state.loss_history)};
}

/// Forward pass without a tape, `batch_size` samples at a time.
inline std::vector<ProbabilityMask> predict(const UNetParams<float>& params, const std::vector<Sample>& samples,
                                            int batch_size = 4) {
  const FlushDenormals ftz;
  std::vector<ProbabilityMask> masks;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t count = std::min<std::size_t>(batch_size, order.size() - start);
    auto out = forward(params, make_var(stack_images(samples, {order.data() + start, count})));
    for (std::size_t i = 0; i < count; ++i) masks.push_back(mask_of_sample(*out, static_cast<int>(i)));
  }
  return masks;
}

struct Evaluation {
  LabelErrors pooled;
  LabelErrors per_image_mean;
  std::vector<LabelMask> predictions;
};

inline Evaluation evaluate_masks(const std::vector<ProbabilityMask>& masks, const std::vector<Sample>& samples,
                                 const Thresholds& th) {
  std::vector<LabelMask> pred;
  std::vector<LabelMask> gt;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    pred.push_back(ternarize(masks[i], th));
    gt.push_back(samples[i].gt);
  }
  Evaluation e;
  e.pooled = per_label_error(pred, gt);
  e.per_image_mean = per_image_mean_error(pred, gt);
  e.predictions = std::move(pred);
  return e;
}

inline Evaluation evaluate(const UNetParams<float>& params, const std::vector<Sample>& samples,
                           const Thresholds& th = {}) {
  return evaluate_masks(predict(params, samples), samples, th);
}

}  // namespace nimbus
