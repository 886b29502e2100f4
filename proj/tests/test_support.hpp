#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nimbus.hpp"

namespace nimbus::testing {

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(s);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Values whose magnitude is at least `gap`, so kinks at 0 stay out of reach.
template <typename T>
Tensor<T> random_away_from_zero(Shape s, Rng& rng, double gap) {
  Tensor<T> t(s);
  for (auto& v : t.values()) {
    const double m = rng.uniform(gap, 1.0);
    v = static_cast<T>(rng.below(2) ? m : -m);
  }
  return t;
}

/// Distinct values spaced at least `gap` apart, randomly placed.
template <typename T>
Tensor<T> random_distinct(Shape s, Rng& rng, double gap) {
  std::vector<std::size_t> slots(s.size());
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  rng.shuffle(std::span<std::size_t>(slots));
  Tensor<T> t(s);
  for (std::size_t i = 0; i < slots.size(); ++i) t[slots[i]] = static_cast<T>(gap * static_cast<double>(i) - 1.0);
  return t;
}

inline Shape random_shape(Rng& rng, int max_n, int max_c, int min_hw, int max_hw) {
  return Shape{1 + static_cast<int>(rng.below(max_n)), 1 + static_cast<int>(rng.below(max_c)),
               min_hw + static_cast<int>(rng.below(max_hw - min_hw + 1)),
               min_hw + static_cast<int>(rng.below(max_hw - min_hw + 1))};
}

/// Reference convolution: six nested loops, zero padding, summed in double.
template <typename T>
Tensor<T> naive_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, int stride, int pad) {
  const Shape xs = x.shape(), ws = w.shape();
  const int oh = (xs.h + 2 * pad - ws.h) / stride + 1;
  const int ow = (xs.w + 2 * pad - ws.w) / stride + 1;
  Tensor<T> y(Shape{xs.n, ws.n, oh, ow});
  for (int n = 0; n < xs.n; ++n)
    for (int co = 0; co < ws.n; ++co)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = b ? static_cast<double>((*b)[co]) : 0.0;
          for (int ci = 0; ci < ws.c; ++ci)
            for (int ky = 0; ky < ws.h; ++ky)
              for (int kx = 0; kx < ws.w; ++kx) {
                const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || ix < 0 || iy >= xs.h || ix >= xs.w) continue;
                acc += static_cast<double>(x.at(n, ci, iy, ix)) * static_cast<double>(w.at(co, ci, ky, kx));
              }
          y.at(n, co, oy, ox) = static_cast<T>(acc);
        }
  return y;
}

/// Random projection weights so a tensor-valued op becomes a scalar loss.
template <typename T>
Tensor<T> projection(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor<T>(s, rng);
}

inline std::string temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("nimbus_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace nimbus::testing
