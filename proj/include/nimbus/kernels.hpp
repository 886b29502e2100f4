#pragma once

// Forward and backward compute for the network ops, on plain tensors.
//
// Summation order is fixed so results are bitwise reproducible: every
// convolution output is `sum_{ci, ky, kx} w * x` accumulated from zero in
// row-major order over (ci, ky, kx), and the bias is added last. Weight and
// bias gradients are reduced image by image in batch order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nimbus/tensor.hpp"

namespace nimbus::kernels {

// ---------------------------------------------------------------------------
// Dense matrix products (row-major, explicit leading dimensions).

namespace detail {

template <typename T>
inline constexpr int kVectorWidth = 64 / static_cast<int>(sizeof(T));

template <typename T>
struct Simd {
  typedef T type __attribute__((vector_size(64)));
  static type load(const T* p) {
    type v;
    std::memcpy(&v, p, sizeof(type));
    return v;
  }
  static void store(T* p, type v) { std::memcpy(p, &v, sizeof(type)); }
};

// Calls f(integral_constant<int, I>) for I in [0, N). Register blocks are
// indexed through this so every accumulator index is a compile-time constant.
template <int N, typename F>
inline void static_for(F&& f) {
  [&]<int... I>(std::integer_sequence<int, I...>) { (f(std::integral_constant<int, I>{}), ...); }(
      std::make_integer_sequence<int, N>{});
}

// C[MR x NR] = A[MR x K] * B[K x NR], NR = 2 vectors.
template <typename T, int MR, int NR>
inline void micro_nn(int k_len, const T* a, int lda, const T* b, int ldb, T* c, int ldc) {
  using V = Simd<T>;
  constexpr int W = kVectorWidth<T>;
  static_assert(NR == 2 * W);
  typename V::type acc0[MR];
  typename V::type acc1[MR];
  for (int i = 0; i < MR; ++i) acc0[i] = acc1[i] = typename V::type{};
  for (int k = 0; k < k_len; ++k) {
    const T* brow = b + static_cast<std::ptrdiff_t>(k) * ldb;
    const auto b0 = V::load(brow);
    const auto b1 = V::load(brow + W);
    for (int i = 0; i < MR; ++i) {
      const T av = a[static_cast<std::ptrdiff_t>(i) * lda + k];
      acc0[i] += av * b0;
      acc1[i] += av * b1;
    }
  }
  for (int i = 0; i < MR; ++i) {
    V::store(c + static_cast<std::ptrdiff_t>(i) * ldc, acc0[i]);
    V::store(c + static_cast<std::ptrdiff_t>(i) * ldc + W, acc1[i]);
  }
}

template <typename T, int MR>
inline void edge_nn(int cols, int k_len, const T* a, int lda, const T* b, int ldb, T* c,
                    int ldc) {
  for (int i = 0; i < MR; ++i) {
    for (int j = 0; j < cols; ++j) {
      T acc = T(0);
      for (int k = 0; k < k_len; ++k)
        acc += a[static_cast<std::ptrdiff_t>(i) * lda + k] * b[static_cast<std::ptrdiff_t>(k) * ldb + j];
      c[static_cast<std::ptrdiff_t>(i) * ldc + j] = acc;
    }
  }
}

template <typename T, int MR>
inline void row_block_nn(int n, int k_len, const T* a, int lda, const T* b, int ldb, T* c,
                         int ldc) {
  constexpr int NR = 2 * kVectorWidth<T>;
  int j = 0;
  for (; j + NR <= n; j += NR) micro_nn<T, MR, NR>(k_len, a, lda, b + j, ldb, c + j, ldc);
  if (j < n) edge_nn<T, MR>(n - j, k_len, a, lda, b + j, ldb, c + j, ldc);
}

}  // namespace detail

/// C = A * B with A (m x k), B (k x n), C (m x n). Overwrites C.
template <typename T>
void gemm_nn(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc) {
  constexpr int MR = 6;
  constexpr int NR = 2 * detail::kVectorWidth<T>;
  // Column panels outermost so a K x NR slab of B stays cache resident
  // across all row blocks.
  for (int j0 = 0; j0 < n; j0 += 4 * NR) {
    const int nb = std::min(4 * NR, n - j0);
    int i = 0;
    for (; i + MR <= m; i += MR)
      detail::row_block_nn<T, MR>(nb, k, a + static_cast<std::ptrdiff_t>(i) * lda, lda, b + j0,
                                  ldb, c + static_cast<std::ptrdiff_t>(i) * ldc + j0, ldc);
    const T* ar = a + static_cast<std::ptrdiff_t>(i) * lda;
    T* cr = c + static_cast<std::ptrdiff_t>(i) * ldc + j0;
    switch (m - i) {
      case 5: detail::row_block_nn<T, 5>(nb, k, ar, lda, b + j0, ldb, cr, ldc); break;
      case 4: detail::row_block_nn<T, 4>(nb, k, ar, lda, b + j0, ldb, cr, ldc); break;
      case 3: detail::row_block_nn<T, 3>(nb, k, ar, lda, b + j0, ldb, cr, ldc); break;
      case 2: detail::row_block_nn<T, 2>(nb, k, ar, lda, b + j0, ldb, cr, ldc); break;
      case 1: detail::row_block_nn<T, 1>(nb, k, ar, lda, b + j0, ldb, cr, ldc); break;
      default: break;
    }
  }
}

namespace detail {

// C[i][j] += sum_p A[i][p] * B[j][p] for an MR x JR block.
template <typename T, int MR, int JR>
inline void micro_nt(int len, const T* a, int lda, const T* b, int ldb, T* c, int ldc) {
  constexpr int V = kVectorWidth<T>;
  T acc[MR][JR][V] = {};
  int p = 0;
  for (; p + V <= len; p += V) {
    for (int i = 0; i < MR; ++i) {
      const T* ap = a + static_cast<std::ptrdiff_t>(i) * lda + p;
      for (int j = 0; j < JR; ++j) {
        const T* bp = b + static_cast<std::ptrdiff_t>(j) * ldb + p;
        for (int v = 0; v < V; ++v) acc[i][j][v] += ap[v] * bp[v];
      }
    }
  }
  for (int i = 0; i < MR; ++i) {
    for (int j = 0; j < JR; ++j) {
      T sum = T(0);
      for (int v = 0; v < V; ++v) sum += acc[i][j][v];
      const T* ap = a + static_cast<std::ptrdiff_t>(i) * lda;
      const T* bp = b + static_cast<std::ptrdiff_t>(j) * ldb;
      for (int q = p; q < len; ++q) sum += ap[q] * bp[q];
      c[static_cast<std::ptrdiff_t>(i) * ldc + j] += sum;
    }
  }
}

template <typename T, int MR>
inline void row_block_nt(int n, int len, const T* a, int lda, const T* b, int ldb, T* c, int ldc) {
  int j = 0;
  for (; j + 4 <= n; j += 4)
    micro_nt<T, MR, 4>(len, a, lda, b + static_cast<std::ptrdiff_t>(j) * ldb, ldb, c + j, ldc);
  for (; j < n; ++j)
    micro_nt<T, MR, 1>(len, a, lda, b + static_cast<std::ptrdiff_t>(j) * ldb, ldb, c + j, ldc);
}

}  // namespace detail

/// C += A * B^T with A (m x len), B (n x len), C (m x n).
template <typename T>
void gemm_nt_acc(int m, int n, int len, const T* a, int lda, const T* b, int ldb, T* c, int ldc) {
  int i = 0;
  for (; i + 4 <= m; i += 4)
    detail::row_block_nt<T, 4>(n, len, a + static_cast<std::ptrdiff_t>(i) * lda, lda, b, ldb,
                               c + static_cast<std::ptrdiff_t>(i) * ldc, ldc);
  for (; i < m; ++i)
    detail::row_block_nt<T, 1>(n, len, a + static_cast<std::ptrdiff_t>(i) * lda, lda, b, ldb,
                               c + static_cast<std::ptrdiff_t>(i) * ldc, ldc);
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dGeometry {
  int stride = 1;
  int padding = 0;
};

/// Validates operands and returns the output shape.
inline Shape conv2d_output_shape(const Shape& in, const Shape& weight, const Shape& bias,
                                 Conv2dGeometry g) {
  if (g.stride < 1) throw ShapeError("conv2d: stride must be >= 1, got " + std::to_string(g.stride));
  if (g.padding < 0)
    throw ShapeError("conv2d: padding must be >= 0, got " + std::to_string(g.padding));
  if (in.c != weight.c)
    throw ShapeError("conv2d: input " + in.str() + " has " + std::to_string(in.c) +
                     " channels but weight " + weight.str() + " expects " +
                     std::to_string(weight.c));
  if (bias.size() != static_cast<std::size_t>(weight.n))
    throw ShapeError("conv2d: bias " + bias.str() + " does not match " +
                     std::to_string(weight.n) + " output channels of weight " + weight.str());
  const int ph = in.h + 2 * g.padding;
  const int pw = in.w + 2 * g.padding;
  if (weight.h > ph || weight.w > pw)
    throw ShapeError("conv2d: kernel " + weight.str() + " larger than padded input " + in.str());
  return Shape{in.n, weight.n, (ph - weight.h) / g.stride + 1, (pw - weight.w) / g.stride + 1};
}

namespace detail {

inline bool is_pointwise(const Shape& w, Conv2dGeometry g) {
  return w.h == 1 && w.w == 1 && g.stride == 1 && g.padding == 0;
}

// col[(ci*kh + ky)*kw + kx][oy*ow + ox] = padded x[ci][oy*s + ky][ox*s + kx]
template <typename T>
void im2col(const T* x, int channels, int h, int w, int kh, int kw, Conv2dGeometry g, int oh,
            int ow, T* col) {
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int c = 0; c < channels; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* row = col + ((static_cast<std::size_t>(c) * kh + ky) * kw + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          T* dst = row + static_cast<std::size_t>(oy) * ow;
          const int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * w;
          if (g.stride == 1) {
            // Valid ox range: 0 <= ox - pad + kx < w.
            const int lo = std::clamp(g.padding - kx, 0, ow);
            const int hi = std::clamp(w + g.padding - kx, lo, ow);
            std::fill(dst, dst + lo, T(0));
            std::copy(src + lo - g.padding + kx, src + hi - g.padding + kx, dst + lo);
            std::fill(dst + hi, dst + ow, T(0));
          } else {
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * g.stride - g.padding + kx;
              dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// Inverse scatter of im2col: dx += fold(dcol).
template <typename T>
void col2im_acc(const T* col, int channels, int h, int w, int kh, int kw, Conv2dGeometry g,
                int oh, int ow, T* dx) {
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int c = 0; c < channels; ++c) {
    T* dxc = dx + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = col + ((static_cast<std::size_t>(c) * kh + ky) * kw + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * ow;
          T* dst = dxc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

namespace detail {

// Stride-1 convolutions skip the explicit im2col matrix: the input is padded
// once and each kernel tap reads a shifted row of the padded plane directly.
// The reduction still runs over (ci, ky, kx) in row-major order.

template <typename T>
struct PaddedPlanes {
  std::vector<T> data;
  int channels = 0;
  int ph = 0;
  int pw = 0;

  const T* row(int c, int y) const {
    return data.data() + (static_cast<std::size_t>(c) * ph + y) * pw;
  }
};

template <typename T>
void pad_planes(const T* x, int channels, int h, int w, int pad, PaddedPlanes<T>& out) {
  out.channels = channels;
  out.ph = h + 2 * pad;
  out.pw = w + 2 * pad;
  out.data.assign(static_cast<std::size_t>(channels) * out.ph * out.pw, T(0));
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < h; ++y)
      std::copy_n(x + (static_cast<std::size_t>(c) * h + y) * w, w,
                  out.data.data() + (static_cast<std::size_t>(c) * out.ph + y + pad) * out.pw + pad);
}

// out[MR rows][NV vectors] for output row y starting at column x0. `taps`
// holds the padded-plane offset of each (ci, ky, kx) in reduction order.
template <typename T, int MR, int NV>
inline void micro_direct(const T* w, int k_len, const T* base, const std::ptrdiff_t* taps, T* out,
                         int out_ld) {
  using V = Simd<T>;
  constexpr int W = kVectorWidth<T>;
  typename V::type acc[MR * NV];
  static_for<MR * NV>([&](auto j) { acc[j] = typename V::type{}; });
  for (int k = 0; k < k_len; ++k) {
    const T* r = base + taps[k];
    typename V::type bv[NV];
    static_for<NV>([&](auto v) { bv[v] = V::load(r + v * W); });
    static_for<MR>([&](auto i) {
      const T av = w[static_cast<std::ptrdiff_t>(i) * k_len + k];
      static_for<NV>([&](auto v) { acc[i * NV + v] += av * bv[v]; });
    });
  }
  static_for<MR * NV>([&](auto j) {
    V::store(out + static_cast<std::ptrdiff_t>(j / NV) * out_ld + (j % NV) * W, acc[j]);
  });
}

template <typename T, int MR>
inline void edge_direct(const T* w, int k_len, const T* base, const std::ptrdiff_t* taps, int cols, T* out,
                        int out_ld) {
  for (int i = 0; i < MR; ++i) {
    for (int j = 0; j < cols; ++j) {
      T acc = T(0);
      for (int k = 0; k < k_len; ++k) acc += w[static_cast<std::ptrdiff_t>(i) * k_len + k] * base[taps[k] + j];
      out[static_cast<std::ptrdiff_t>(i) * out_ld + j] = acc;
    }
  }
}

template <typename T, int MR>
inline void row_block_direct(const T* w, int k_len, const PaddedPlanes<T>& xp, const std::ptrdiff_t* taps,
                             int oh, int ow, T* out, int out_ld) {
  constexpr int W = kVectorWidth<T>;
  for (int y = 0; y < oh; ++y) {
    T* orow = out + static_cast<std::ptrdiff_t>(y) * ow;
    const T* base = xp.row(0, y);
    int x = 0;
    for (; x + 2 * W <= ow; x += 2 * W) micro_direct<T, MR, 2>(w, k_len, base + x, taps, orow + x, out_ld);
    for (; x + W <= ow; x += W) micro_direct<T, MR, 1>(w, k_len, base + x, taps, orow + x, out_ld);
    if (x < ow) edge_direct<T, MR>(w, k_len, base + x, taps, ow - x, orow + x, out_ld);
  }
}

// out (co x oh*ow) = W (co x k) applied to the padded planes, stride 1.
template <typename T>
void conv_direct(const T* w, int co, const PaddedPlanes<T>& xp, int kh, int kw, T* out) {
  const int oh = xp.ph - kh + 1;
  const int ow = xp.pw - kw + 1;
  const int k_len = xp.channels * kh * kw;
  const int ld = oh * ow;
  std::vector<std::ptrdiff_t> taps;
  taps.reserve(static_cast<std::size_t>(k_len));
  for (int c = 0; c < xp.channels; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) taps.push_back(xp.row(c, ky) + kx - xp.row(0, 0));
  constexpr int MR = 8;
  int i = 0;
  for (; i + MR <= co; i += MR)
    row_block_direct<T, MR>(w + static_cast<std::ptrdiff_t>(i) * k_len, k_len, xp, taps.data(), oh, ow,
                            out + static_cast<std::ptrdiff_t>(i) * ld, ld);
  for (; i + 4 <= co; i += 4)
    row_block_direct<T, 4>(w + static_cast<std::ptrdiff_t>(i) * k_len, k_len, xp, taps.data(), oh, ow,
                           out + static_cast<std::ptrdiff_t>(i) * ld, ld);
  for (; i < co; ++i)
    row_block_direct<T, 1>(w + static_cast<std::ptrdiff_t>(i) * k_len, k_len, xp, taps.data(), oh, ow,
                           out + static_cast<std::ptrdiff_t>(i) * ld, ld);
}

// Partial sums for dw over output rows [y0, y1): MR dy channels against JR
// kernel taps. Lane partials and scalar tails live in `acc` / `tail` between
// calls so row chunks can be visited one at a time.
template <typename T, int MR, int JR>
inline void micro_direct_nt(const T* dy, int p_ld, const PaddedPlanes<T>& xp, const int* tap_c,
                            const int* tap_y, const int* tap_x, int y0, int y1, int ow,
                            typename Simd<T>::type* acc_io, T* tail_io, int k_len) {
  using V = Simd<T>;
  constexpr int W = kVectorWidth<T>;
  typename V::type acc[MR * JR];
  T tail[MR * JR];
  static_for<MR * JR>([&](auto q) {
    acc[q] = acc_io[(q / JR) * k_len + q % JR];
    tail[q] = tail_io[(q / JR) * k_len + q % JR];
  });
  for (int y = y0; y < y1; ++y) {
    const T* brow[JR];
    static_for<JR>([&](auto j) { brow[j] = xp.row(tap_c[j], y + tap_y[j]) + tap_x[j]; });
    const T* arow = dy + static_cast<std::ptrdiff_t>(y) * ow;
    int x = 0;
    for (; x + W <= ow; x += W) {
      typename V::type bv[JR];
      static_for<JR>([&](auto j) { bv[j] = V::load(brow[j] + x); });
      static_for<MR>([&](auto i) {
        const auto av = V::load(arow + static_cast<std::ptrdiff_t>(i) * p_ld + x);
        static_for<JR>([&](auto j) { acc[i * JR + j] += av * bv[j]; });
      });
    }
    for (; x < ow; ++x)
      static_for<MR>([&](auto i) {
        static_for<JR>([&](auto j) { tail[i * JR + j] += arow[static_cast<std::ptrdiff_t>(i) * p_ld + x] * brow[j][x]; });
      });
  }
  static_for<MR * JR>([&](auto q) {
    acc_io[(q / JR) * k_len + q % JR] = acc[q];
    tail_io[(q / JR) * k_len + q % JR] = tail[q];
  });
}

template <typename T>
void conv_direct_weight_grad(const T* dy, int co, const PaddedPlanes<T>& xp, int kh, int kw, T* dw) {
  using V = Simd<T>;
  constexpr int W = kVectorWidth<T>;
  constexpr int JR = 6;
  const int oh = xp.ph - kh + 1;
  const int ow = xp.pw - kw + 1;
  const int k_len = xp.channels * kh * kw;
  const int p_ld = oh * ow;
  std::vector<int> tc(k_len), ty(k_len), tx(k_len);
  for (int k = 0; k < k_len; ++k) {
    tc[k] = k / (kh * kw);
    ty[k] = (k / kw) % kh;
    tx[k] = k % kw;
  }
  std::vector<typename V::type> acc(static_cast<std::size_t>(co) * k_len, typename V::type{});
  std::vector<T> tail(static_cast<std::size_t>(co) * k_len, T(0));
  auto rows = [&]<int MR>(int i, int y0, int y1) {
    const T* a = dy + static_cast<std::ptrdiff_t>(i) * p_ld;
    auto* ac = acc.data() + static_cast<std::ptrdiff_t>(i) * k_len;
    T* tl = tail.data() + static_cast<std::ptrdiff_t>(i) * k_len;
    int k = 0;
    for (; k + JR <= k_len; k += JR)
      micro_direct_nt<T, MR, JR>(a, p_ld, xp, &tc[k], &ty[k], &tx[k], y0, y1, ow, ac + k, tl + k, k_len);
    for (; k < k_len; ++k)
      micro_direct_nt<T, MR, 1>(a, p_ld, xp, &tc[k], &ty[k], &tx[k], y0, y1, ow, ac + k, tl + k, k_len);
  };
  // Row chunks of about 1k pixels keep the touched dy and input rows cache resident.
  const int chunk = std::max(1, 1024 / ow);
  for (int y0 = 0; y0 < oh; y0 += chunk) {
    const int y1 = std::min(oh, y0 + chunk);
    int i = 0;
    for (; i + 4 <= co; i += 4) rows.template operator()<4>(i, y0, y1);
    for (; i < co; ++i) rows.template operator()<1>(i, y0, y1);
  }
  for (std::size_t q = 0; q < acc.size(); ++q) {
    T sum = T(0);
    for (int v = 0; v < W; ++v) sum += acc[q][v];
    dw[q] += sum + tail[q];
  }
}

inline bool use_direct(const Shape& w, Conv2dGeometry g) {
  return g.stride == 1 && g.padding <= w.h - 1 && g.padding <= w.w - 1;
}

}  // namespace detail

/// Weight is (out_channels, in_channels, kh, kw); bias has out_channels values.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                         Conv2dGeometry g) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const Shape os = conv2d_output_shape(xs, ws, bias.shape(), g);
  Tensor<T> out(os);

  const int k = ws.c * ws.h * ws.w;
  const int p = os.h * os.w;
  const bool pointwise = detail::is_pointwise(ws, g);
  const bool direct = !pointwise && detail::use_direct(ws, g);
  std::vector<T> col((pointwise || direct) ? 0 : static_cast<std::size_t>(k) * p);
  detail::PaddedPlanes<T> planes;

  for (int n = 0; n < xs.n; ++n) {
    const T* xn = x.data().data() + static_cast<std::size_t>(n) * xs.c * xs.plane();
    T* on = out.data().data() + static_cast<std::size_t>(n) * os.c * p;
    if (pointwise) {
      gemm_nn(ws.n, p, k, weight.data().data(), k, xn, p, on, p);
    } else if (direct) {
      detail::pad_planes(xn, xs.c, xs.h, xs.w, g.padding, planes);
      detail::conv_direct(weight.data().data(), ws.n, planes, ws.h, ws.w, on);
    } else {
      detail::im2col(xn, xs.c, xs.h, xs.w, ws.h, ws.w, g, os.h, os.w, col.data());
      gemm_nn(ws.n, p, k, weight.data().data(), k, col.data(), p, on, p);
    }
    for (int co = 0; co < os.c; ++co) {
      const T bv = bias[static_cast<std::size_t>(co)];
      T* row = on + static_cast<std::size_t>(co) * p;
      for (int i = 0; i < p; ++i) row[i] += bv;
    }
  }
  return out;
}

/// Accumulates gradients given dL/dy. Any of dx / dw / db may be null.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, std::span<const T> dy,
                     Conv2dGeometry g, T* dx, T* dw, T* db) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const Shape os = conv2d_output_shape(xs, ws, Shape{ws.n, 1, 1, 1}, g);
  if (dy.size() != os.size())
    throw ShapeError("conv2d backward: gradient has " + std::to_string(dy.size()) +
                     " values, output " + os.str() + " needs " + std::to_string(os.size()));

  const int k = ws.c * ws.h * ws.w;
  const int p = os.h * os.w;
  const bool pointwise = detail::is_pointwise(ws, g);
  const bool direct = !pointwise && detail::use_direct(ws, g);
  const bool use_col = !pointwise && !direct;

  std::vector<T> col((use_col && dw) ? static_cast<std::size_t>(k) * p : 0);
  std::vector<T> dcol((dx && !direct) ? static_cast<std::size_t>(k) * p : 0);
  std::vector<T> wt;
  if (dx) {
    wt.resize(static_cast<std::size_t>(k) * ws.n);
    if (direct) {
      // Input gradient of a stride-1 conv is itself a stride-1 conv of dy with
      // the kernel flipped and in/out channels swapped: (ci, co, kh, kw).
      for (int co = 0; co < ws.n; ++co)
        for (int ci = 0; ci < ws.c; ++ci)
          for (int ky = 0; ky < ws.h; ++ky)
            for (int kx = 0; kx < ws.w; ++kx)
              wt[((static_cast<std::size_t>(ci) * ws.n + co) * ws.h + (ws.h - 1 - ky)) * ws.w +
                 (ws.w - 1 - kx)] = weight.at(co, ci, ky, kx);
    } else {
      // W^T, (k x co)
      for (int co = 0; co < ws.n; ++co)
        for (int i = 0; i < k; ++i)
          wt[static_cast<std::size_t>(i) * ws.n + co] = weight[static_cast<std::size_t>(co) * k + i];
    }
  }
  detail::PaddedPlanes<T> planes;
  std::vector<T> dxbuf(dx && direct ? static_cast<std::size_t>(xs.c) * xs.plane() : 0);

  for (int n = 0; n < xs.n; ++n) {
    const T* dyn = dy.data() + static_cast<std::size_t>(n) * os.c * p;
    if (db) {
      for (int co = 0; co < os.c; ++co) {
        const T* row = dyn + static_cast<std::size_t>(co) * p;
        T sum = T(0);
        for (int i = 0; i < p; ++i) sum += row[i];
        db[co] += sum;
      }
    }
    const T* xn = x.data().data() + static_cast<std::size_t>(n) * xs.c * xs.plane();
    if (dw) {
      if (pointwise) {
        gemm_nt_acc(ws.n, k, p, dyn, p, xn, p, dw, k);
      } else if (direct) {
        detail::pad_planes(xn, xs.c, xs.h, xs.w, g.padding, planes);
        detail::conv_direct_weight_grad(dyn, ws.n, planes, ws.h, ws.w, dw);
      } else {
        detail::im2col(xn, xs.c, xs.h, xs.w, ws.h, ws.w, g, os.h, os.w, col.data());
        gemm_nt_acc(ws.n, k, p, dyn, p, col.data(), p, dw, k);
      }
    }
    if (dx) {
      T* dxn = dx + static_cast<std::size_t>(n) * xs.c * xs.plane();
      if (direct) {
        detail::pad_planes(dyn, os.c, os.h, os.w, ws.h - 1 - g.padding, planes);
        detail::conv_direct(wt.data(), ws.c, planes, ws.h, ws.w, dxbuf.data());
        for (std::size_t i = 0; i < dxbuf.size(); ++i) dxn[i] += dxbuf[i];
      } else {
        gemm_nn(k, p, ws.n, wt.data(), ws.n, dyn, p, dcol.data(), p);
        if (pointwise) {
          for (std::size_t i = 0; i < dcol.size(); ++i) dxn[i] += dcol[i];
        } else {
          detail::col2im_acc(dcol.data(), xs.c, xs.h, xs.w, ws.h, ws.w, g, os.h, os.w, dxn);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Pooling, resampling, concatenation

template <typename T>
struct PoolResult {
  Tensor<T> output;
  std::vector<std::uint32_t> argmax;  // flat input offset per output cell
};

/// 2x2 max pool, stride 2. Ties go to the first cell in row-major order.
template <typename T>
PoolResult<T> max_pool2_forward(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0)
    throw ShapeError("max_pool2: spatial dims must be even, got " + s.str());
  PoolResult<T> r{Tensor<T>(Shape{s.n, s.c, s.h / 2, s.w / 2}), {}};
  r.argmax.resize(r.output.size());
  const int oh = s.h / 2;
  const int ow = s.w / 2;
  std::size_t o = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const std::size_t base = x.offset(n, c, 0, 0);
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++o) {
          std::size_t best = base + static_cast<std::size_t>(2 * oy) * s.w + 2 * ox;
          const std::size_t cands[3] = {best + 1, best + s.w, best + s.w + 1};
          for (std::size_t cand : cands)
            if (x[cand] > x[best]) best = cand;
          r.output[o] = x[best];
          r.argmax[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return r;
}

template <typename T>
void max_pool2_backward(std::span<const std::uint32_t> argmax, std::span<const T> dy, T* dx) {
  for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Tensor<T> upsample2_forward(const Tensor<T>& x) {
  const Shape& s = x.shape();
  Tensor<T> out(Shape{s.n, s.c, 2 * s.h, 2 * s.w});
  const int ow = 2 * s.w;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.h; ++y) {
        const T* src = &x.at(n, c, y, 0);
        T* d0 = &out.at(n, c, 2 * y, 0);
        for (int xx = 0; xx < s.w; ++xx) d0[2 * xx] = d0[2 * xx + 1] = src[xx];
        std::copy(d0, d0 + ow, d0 + ow);
      }
    }
  }
  return out;
}

template <typename T>
void upsample2_backward(const Shape& in, std::span<const T> dy, T* dx) {
  const int ow = 2 * in.w;
  std::size_t i = 0;
  for (int nc = 0; nc < in.n * in.c; ++nc) {
    const T* plane = dy.data() + static_cast<std::size_t>(nc) * 4 * in.plane();
    for (int y = 0; y < in.h; ++y) {
      const T* r0 = plane + static_cast<std::size_t>(2 * y) * ow;
      const T* r1 = r0 + ow;
      for (int xx = 0; xx < in.w; ++xx, ++i)
        dx[i] += (r0[2 * xx] + r0[2 * xx + 1]) + (r1[2 * xx] + r1[2 * xx + 1]);
    }
  }
}

/// Channel concatenation: a fills channels [0, ca), b fills [ca, ca + cb).
template <typename T>
Tensor<T> concat_channels_forward(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw ShapeError("concat_channels: " + sa.str() + " and " + sb.str() +
                     " differ in batch or spatial dims");
  Tensor<T> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t la = static_cast<std::size_t>(sa.c) * sa.plane();
  const std::size_t lb = static_cast<std::size_t>(sb.c) * sb.plane();
  for (int n = 0; n < sa.n; ++n) {
    T* dst = out.data().data() + static_cast<std::size_t>(n) * (la + lb);
    std::copy_n(a.data().data() + static_cast<std::size_t>(n) * la, la, dst);
    std::copy_n(b.data().data() + static_cast<std::size_t>(n) * lb, lb, dst + la);
  }
  return out;
}

template <typename T>
void concat_channels_backward(const Shape& sa, const Shape& sb, std::span<const T> dy, T* da,
                              T* db) {
  const std::size_t la = static_cast<std::size_t>(sa.c) * sa.plane();
  const std::size_t lb = static_cast<std::size_t>(sb.c) * sb.plane();
  for (int n = 0; n < sa.n; ++n) {
    const T* src = dy.data() + static_cast<std::size_t>(n) * (la + lb);
    if (da) {
      T* d = da + static_cast<std::size_t>(n) * la;
      for (std::size_t i = 0; i < la; ++i) d[i] += src[i];
    }
    if (db) {
      T* d = db + static_cast<std::size_t>(n) * lb;
      for (std::size_t i = 0; i < lb; ++i) d[i] += src[la + i];
    }
  }
}

// ---------------------------------------------------------------------------
// Pointwise

template <typename T>
inline T logistic(T v) {
  // Branch on sign so exp never sees a large positive argument.
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> logistic_forward(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = logistic(x[i]);
  return out;
}

/// mean((pred - target)^2), accumulated in double in element order.
template <typename T>
double mse(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("mse_loss: prediction " + pred.shape().str() + " vs target " +
                     target.shape().str());
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    sum += d * d;
  }
  return sum / static_cast<double>(pred.size());
}

}  // namespace nimbus::kernels
