#pragma once

// Reverse-mode differentiation over Tensor values.
//
// Ops take shared tensor handles and an optional Tape. With a tape, each op
// whose inputs require gradients appends a node; Tape::backward replays the
// nodes in exact reverse order, adding each contribution into the input
// gradients. Without a tape the ops are plain forward computations.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "nimbus/error.hpp"
#include "nimbus/kernels.hpp"
#include "nimbus/random.hpp"
#include "nimbus/tensor.hpp"

namespace nimbus {

template <typename T>
using Var = std::shared_ptr<Tensor<T>>;

template <typename T>
Var<T> make_var(Tensor<T> value, bool requires_grad = false) {
  auto v = std::make_shared<Tensor<T>>(std::move(value));
  v->set_requires_grad(requires_grad);
  return v;
}

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::string op, std::vector<Var<T>> inputs, Var<T> output, BackwardFn backward) {
    nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  const std::string& op_name(std::size_t i) const { return nodes_[i].op; }

  void clear() {
    nodes_.clear();
    branches_ = 0;
  }

  /// Ops with discrete choices (relu masks, pool argmax) fold them in here,
  /// so two evaluations with equal signatures took the same smooth branch.
  void fold_branch(std::uint64_t word) { branches_ = splitmix64(branches_ ^ word); }
  std::uint64_t branch_signature() const { return branches_; }

  /// Populates d(loss)/d(leaf) for every leaf reachable from `loss` that
  /// requires a gradient. Leaf gradients accumulate across calls;
  /// intermediate gradients are reset on each call.
  void backward(const Var<T>& loss) {
    if (!loss || loss->size() != 1)
      throw UsageError("backward: loss must be a single-element tensor");
    auto it = std::find_if(nodes_.begin(), nodes_.end(),
                           [&](const Node& n) { return n.output.get() == loss.get(); });
    if (it == nodes_.end()) throw UsageError("backward: loss was not produced on this tape");
    const auto last = static_cast<std::size_t>(it - nodes_.begin());

    for (std::size_t i = 0; i <= last; ++i) {
      nodes_[i].output->grad();
      nodes_[i].output->zero_grad();
    }
    loss->grad()[0] = T(1);
    for (std::size_t i = last + 1; i-- > 0;) nodes_[i].backward();
  }

 private:
  struct Node {
    std::string op;
    std::vector<Var<T>> inputs;
    Var<T> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::uint64_t branches_ = 0;
};

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Var<T>*> vars) {
  for (const Var<T>* v : vars)
    if (*v && (*v)->requires_grad()) return true;
  return false;
}

template <typename T>
T* grad_target(const Var<T>& v) {
  return (v && v->requires_grad()) ? v->grad().data() : nullptr;
}

}  // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              kernels::Conv2dGeometry geometry, Tape<T>* tape = nullptr) {
  const bool track = tape && detail::any_requires_grad<T>({&x, &weight, &bias});
  auto out = make_var(kernels::conv2d_forward(*x, *weight, *bias, geometry), track);
  if (track) {
    tape->record("conv2d", {x, weight, bias}, out, [x, weight, bias, out, geometry] {
      kernels::conv2d_backward<T>(*x, *weight, out->grad(), geometry, detail::grad_target(x),
                                  detail::grad_target(weight), detail::grad_target(bias));
    });
  }
  return out;
}

template <typename T>
Var<T> max_pool2(const Var<T>& x, Tape<T>* tape = nullptr) {
  auto result = kernels::max_pool2_forward(*x);
  const bool track = tape && x->requires_grad();
  auto out = make_var(std::move(result.output), track);
  if (track) {
    for (std::uint32_t a : result.argmax) tape->fold_branch(a);
    tape->record("max_pool2", {x}, out, [x, out, argmax = std::move(result.argmax)] {
      kernels::max_pool2_backward<T>(argmax, out->grad(), x->grad().data());
    });
  }
  return out;
}

template <typename T>
Var<T> upsample2(const Var<T>& x, Tape<T>* tape = nullptr) {
  const bool track = tape && x->requires_grad();
  auto out = make_var(kernels::upsample2_forward(*x), track);
  if (track) {
    tape->record("upsample2", {x}, out, [x, out] {
      kernels::upsample2_backward<T>(x->shape(), out->grad(), x->grad().data());
    });
  }
  return out;
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b, Tape<T>* tape = nullptr) {
  const bool track = tape && detail::any_requires_grad<T>({&a, &b});
  auto out = make_var(kernels::concat_channels_forward(*a, *b), track);
  if (track) {
    tape->record("concat_channels", {a, b}, out, [a, b, out] {
      kernels::concat_channels_backward<T>(a->shape(), b->shape(), out->grad(),
                                           detail::grad_target(a), detail::grad_target(b));
    });
  }
  return out;
}

template <typename T>
Var<T> relu(const Var<T>& x, Tape<T>* tape = nullptr) {
  const bool track = tape && x->requires_grad();
  auto out = make_var(kernels::relu_forward(*x), track);
  if (track) {
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < x->size(); ++i) {
      word = (word << 1) | ((*x)[i] > T(0) ? 1u : 0u);
      if (i % 64 == 63 || i + 1 == x->size()) {
        tape->fold_branch(word);
        word = 0;
      }
    }
    tape->record("relu", {x}, out, [x, out] {
      auto dy = out->grad();
      auto dx = x->grad();
      for (std::size_t i = 0; i < dy.size(); ++i)
        if ((*x)[i] > T(0)) dx[i] += dy[i];
    });
  }
  return out;
}

template <typename T>
Var<T> logistic(const Var<T>& x, Tape<T>* tape = nullptr) {
  const bool track = tape && x->requires_grad();
  auto out = make_var(kernels::logistic_forward(*x), track);
  if (track) {
    tape->record("logistic", {x}, out, [x, out] {
      auto dy = out->grad();
      auto dx = x->grad();
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const T y = (*out)[i];
        dx[i] += dy[i] * y * (T(1) - y);
      }
    });
  }
  return out;
}

/// Scalar mean squared error, shape (1,1,1,1).
template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Var<T>& target, Tape<T>* tape = nullptr) {
  const double value = kernels::mse(*pred, *target);
  const bool track = tape && detail::any_requires_grad<T>({&pred, &target});
  auto out = make_var(Tensor<T>(Shape{}, static_cast<T>(value)), track);
  if (track) {
    tape->record("mse_loss", {pred, target}, out, [pred, target, out] {
      const T scale = out->grad()[0] * T(2) / static_cast<T>(pred->size());
      T* dp = detail::grad_target(pred);
      T* dt = detail::grad_target(target);
      for (std::size_t i = 0; i < pred->size(); ++i) {
        const T d = scale * ((*pred)[i] - (*target)[i]);
        if (dp) dp[i] += d;
        if (dt) dt[i] -= d;
      }
    });
  }
  return out;
}

/// sum_i x_i * coeff_i, shape (1,1,1,1). Handy for probing gradients.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& coeff, Tape<T>* tape = nullptr) {
  if (x->shape() != coeff.shape())
    throw ShapeError("weighted_sum: " + x->shape().str() + " vs " + coeff.shape().str());
  T sum = T(0);
  for (std::size_t i = 0; i < x->size(); ++i) sum += (*x)[i] * coeff[i];
  const bool track = tape && x->requires_grad();
  auto out = make_var(Tensor<T>(Shape{}, sum), track);
  if (track) {
    tape->record("weighted_sum", {x}, out, [x, coeff, out] {
      const T g = out->grad()[0];
      auto dx = x->grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * coeff[i];
    });
  }
  return out;
}

}  // namespace nimbus
