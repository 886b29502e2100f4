#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "nimbus/autodiff.hpp"
#include "nimbus/random.hpp"

namespace nimbus {

struct GradCheckOptions {
  double step = 1e-3;
  /// 0 checks every coordinate; otherwise a seeded sample of this many.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose +h / -h evaluations took a different relu or pool
  /// branch than the base point; central differences do not apply there and
  /// they are left out of max_relative_error.
  std::size_t nonsmooth = 0;
};

/// Compares the taped gradient of a scalar function against central
/// differences. `f(x, tape)` must return a single-element tensor and record
/// onto `tape` when it is non-null. Relative error per coordinate is
/// |a - n| / max(1e-8, |a| + |n|).
template <typename T, typename F>
GradCheckResult grad_check(F&& f, const Var<T>& x, const GradCheckOptions& options = {}) {
  const bool had_requires_grad = x->requires_grad();
  x->set_requires_grad(true);
  x->drop_grad();

  Tape<T> tape;
  Var<T> loss = f(x, &tape);
  tape.backward(loss);
  const std::uint64_t base_branches = tape.branch_signature();
  const std::vector<T> analytic(x->grad().begin(), x->grad().end());
  tape.clear();
  x->drop_grad();

  std::vector<std::size_t> coords(x->size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (options.max_coordinates != 0 && options.max_coordinates < coords.size()) {
    Rng rng(options.seed);
    rng.shuffle(std::span<std::size_t>(coords));
    coords.resize(options.max_coordinates);
    std::sort(coords.begin(), coords.end());
  }

  // Evaluates f at the current x, returning the loss and its branch signature.
  auto probe = [&]() {
    Tape<T> t;
    const double value = static_cast<double>((*f(x, &t))[0]);
    return std::pair{value, t.branch_signature()};
  };

  const T h = static_cast<T>(options.step);
  GradCheckResult result;
  for (std::size_t i : coords) {
    const T saved = (*x)[i];
    const T hi = saved + h;
    const T lo = saved - h;
    (*x)[i] = hi;
    const auto [f_hi, sig_hi] = probe();
    (*x)[i] = lo;
    const auto [f_lo, sig_lo] = probe();
    (*x)[i] = saved;
    ++result.checked;
    if (sig_hi != base_branches || sig_lo != base_branches) {
      ++result.nonsmooth;
      continue;
    }

    const double numeric = (f_hi - f_lo) / static_cast<double>(hi - lo);
    const double a = static_cast<double>(analytic[i]);
    const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    if (result.checked - result.nonsmooth == 1 || rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_index = i;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  x->drop_grad();
  x->set_requires_grad(had_requires_grad);
  return result;
}

}  // namespace nimbus
