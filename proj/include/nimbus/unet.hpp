#pragma once

// U-Net encoder/decoder.
//
// Layer list for depth D and base width B (channels c_l = B * 2^l):
//
//   enc{l}.conv1   3x3, in -> c_l        (in = 3 for l = 0, else c_{l-1})
//   enc{l}.conv2   3x3, c_l -> c_l        then 2x2 max pool
//   bottleneck.conv1 / conv2   3x3, c_{D-1} -> c_D -> c_D
//   dec{l}.up      nearest 2x upsample, 3x3 c_{l+1} -> c_l
//   dec{l}.conv1   3x3 on concat(skip_l, up), 2 c_l -> c_l
//   dec{l}.conv2   3x3, c_l -> c_l
//   head           1x1, B -> out, then logistic
//
// Every 3x3 conv uses padding 1 and is followed by relu.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "nimbus/autodiff.hpp"
#include "nimbus/error.hpp"
#include "nimbus/masks.hpp"
#include "nimbus/random.hpp"

namespace nimbus {

struct UNetConfig {
  int depth = 3;
  int base_channels = 16;
  int in_channels = 3;
  int out_channels = 1;
  int resolution = 128;
  std::uint64_t seed = 0;

  void validate() const {
    if (depth < 1) throw ConfigError("unet: depth must be >= 1, got " + std::to_string(depth));
    if (depth > 16) throw ConfigError("unet: depth " + std::to_string(depth) + " is too large");
    if (base_channels < 1)
      throw ConfigError("unet: base_channels must be >= 1, got " + std::to_string(base_channels));
    if (in_channels < 1 || out_channels < 1)
      throw ConfigError("unet: channel counts must be >= 1");
    if (resolution < 1 || resolution % (1 << depth) != 0)
      throw ConfigError("unet: resolution " + std::to_string(resolution) +
                        " is not divisible by 2^" + std::to_string(depth));
  }

  int channels(int level) const { return base_channels << level; }

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

struct LayerSpec {
  std::string name;
  int out_channels;
  int in_channels;
  int kernel;
};

inline std::vector<LayerSpec> unet_layers(const UNetConfig& cfg) {
  cfg.validate();
  std::vector<LayerSpec> layers;
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    const int in = l == 0 ? cfg.in_channels : cfg.channels(l - 1);
    layers.push_back({p + ".conv1", cfg.channels(l), in, 3});
    layers.push_back({p + ".conv2", cfg.channels(l), cfg.channels(l), 3});
  }
  layers.push_back({"bottleneck.conv1", cfg.channels(cfg.depth), cfg.channels(cfg.depth - 1), 3});
  layers.push_back({"bottleneck.conv2", cfg.channels(cfg.depth), cfg.channels(cfg.depth), 3});
  for (int l = cfg.depth - 1; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l);
    layers.push_back({p + ".up", cfg.channels(l), cfg.channels(l + 1), 3});
    layers.push_back({p + ".conv1", cfg.channels(l), 2 * cfg.channels(l), 3});
    layers.push_back({p + ".conv2", cfg.channels(l), cfg.channels(l), 3});
  }
  layers.push_back({"head", cfg.out_channels, cfg.base_channels, 1});
  return layers;
}

/// Named parameter tensors. Copies are deep.
template <typename T>
class UNetParams {
 public:
  struct Entry {
    std::string name;
    Var<T> tensor;
  };

  UNetParams() = default;
  explicit UNetParams(UNetConfig config) : config_(config) {}

  UNetParams(const UNetParams& other) : config_(other.config_) { copy_from(other); }
  UNetParams& operator=(const UNetParams& other) {
    if (this != &other) {
      config_ = other.config_;
      entries_.clear();
      copy_from(other);
    }
    return *this;
  }
  UNetParams(UNetParams&&) noexcept = default;
  UNetParams& operator=(UNetParams&&) noexcept = default;

  const UNetConfig& config() const { return config_; }

  void add(std::string name, Tensor<T> value) {
    for (const auto& e : entries_)
      if (e.name == name) throw ConfigError("duplicate parameter name " + name);
    entries_.push_back({std::move(name), make_var(std::move(value), true)});
  }

  std::size_t size() const { return entries_.size(); }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  const Var<T>& get(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e.tensor;
    throw ConfigError("no parameter named " + name);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor->size();
    return n;
  }

  void zero_grads() const {
    for (const auto& e : entries_) e.tensor->drop_grad();
  }

  template <typename U>
  UNetParams<U> cast() const {
    UNetParams<U> out(config_);
    for (const auto& e : entries_) out.add(e.name, e.tensor->template cast<U>());
    return out;
  }

  /// Bitwise equality of names, shapes and values.
  bool identical(const UNetParams& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = other.entries_[i];
      if (a.name != b.name || a.tensor->shape() != b.tensor->shape()) return false;
      if (std::memcmp(a.tensor->data().data(), b.tensor->data().data(), a.tensor->size() * sizeof(T)) != 0)
        return false;
    }
    return true;
  }

 private:
  void copy_from(const UNetParams& other) {
    for (const auto& e : other.entries_) {
      entries_.push_back({e.name, make_var(e.tensor->detached(), e.tensor->requires_grad())});
    }
  }

  UNetConfig config_;
  std::vector<Entry> entries_;
};

struct ParamSlot {
  std::string name;
  Shape shape;
  int fan_in;
  bool is_bias;
};

/// Names and shapes of every parameter tensor, in storage order.
inline std::vector<ParamSlot> parameter_layout(const UNetConfig& config) {
  std::vector<ParamSlot> slots;
  for (const auto& layer : unet_layers(config)) {
    const int fan_in = layer.in_channels * layer.kernel * layer.kernel;
    slots.push_back({layer.name + ".weight",
                     Shape{layer.out_channels, layer.in_channels, layer.kernel, layer.kernel}, fan_in, false});
    slots.push_back({layer.name + ".bias", Shape{layer.out_channels, 1, 1, 1}, fan_in, true});
  }
  return slots;
}

/// He-uniform weights (bound sqrt(6 / fan_in)), zero biases; fully determined
/// by config.seed.
template <typename T = float>
UNetParams<T> init_params(const UNetConfig& config) {
  UNetParams<T> params(config);
  Rng rng(config.seed);
  for (const auto& slot : parameter_layout(config)) {
    Tensor<T> t(slot.shape);
    if (!slot.is_bias) {
      const double bound = std::sqrt(6.0 / slot.fan_in);
      for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    params.add(slot.name, std::move(t));
  }
  return params;
}

/// Spatial shapes seen during a forward pass, for auditing.
struct ForwardTrace {
  std::vector<Shape> encoder;  // skip feature per level
  Shape bottleneck;
};

namespace detail {

template <typename T>
Var<T> conv_relu(const UNetParams<T>& p, const std::string& name, const Var<T>& x, Tape<T>* tape) {
  auto y = conv2d(x, p.get(name + ".weight"), p.get(name + ".bias"), kernels::Conv2dGeometry{1, 1}, tape);
  return relu(y, tape);
}

}  // namespace detail

/// Maps an (n, in_channels, r, r) batch to (n, out_channels, r, r) values in
/// (0, 1). Records onto `tape` when given.
template <typename T>
Var<T> forward(const UNetParams<T>& params, const Var<T>& batch, Tape<T>* tape = nullptr,
               ForwardTrace* trace = nullptr) {
  const UNetConfig& cfg = params.config();
  const Shape& s = batch->shape();
  if (s.c != cfg.in_channels || s.h != cfg.resolution || s.w != cfg.resolution)
    throw ShapeError("unet forward: expected (n," + std::to_string(cfg.in_channels) + "," +
                     std::to_string(cfg.resolution) + "," + std::to_string(cfg.resolution) +
                     ") input, got " + s.str());

  std::vector<Var<T>> skips;
  Var<T> x = batch;
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    x = detail::conv_relu(params, p + ".conv1", x, tape);
    x = detail::conv_relu(params, p + ".conv2", x, tape);
    skips.push_back(x);
    if (trace) trace->encoder.push_back(x->shape());
    x = max_pool2(x, tape);
  }
  x = detail::conv_relu(params, "bottleneck.conv1", x, tape);
  x = detail::conv_relu(params, "bottleneck.conv2", x, tape);
  if (trace) trace->bottleneck = x->shape();
  for (int l = cfg.depth - 1; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l);
    x = detail::conv_relu(params, p + ".up", upsample2(x, tape), tape);
    x = concat_channels(skips[static_cast<std::size_t>(l)], x, tape);
    x = detail::conv_relu(params, p + ".conv1", x, tape);
    x = detail::conv_relu(params, p + ".conv2", x, tape);
  }
  x = conv2d(x, params.get("head.weight"), params.get("head.bias"), kernels::Conv2dGeometry{}, tape);
  return logistic(x, tape);
}

/// Probability mask of sample `index` in a (n, 1, h, w) output batch.
template <typename T>
ProbabilityMask mask_of_sample(const Tensor<T>& output, int index) {
  const Shape& s = output.shape();
  if (s.c != 1) throw ShapeError("mask_of_sample: expected one channel, got " + s.str());
  if (index < 0 || index >= s.n)
    throw ShapeError("mask_of_sample: sample " + std::to_string(index) + " out of range for " + s.str());
  ProbabilityMask m{s.h, s.w, {}};
  const auto begin = output.values().begin() + static_cast<std::ptrdiff_t>(index) * s.plane();
  m.values.assign(begin, begin + static_cast<std::ptrdiff_t>(s.plane()));
  return m;
}

}  // namespace nimbus
