#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace nimbus;
using namespace nimbus::testing;

namespace {

constexpr double kTol = 1e-3;
constexpr int kInstances = 20;

using D = double;

void expect_close_grad(const GradCheckResult& r, const std::string& what) {
  EXPECT_LT(r.max_relative_error, kTol) << what << ": worst coordinate " << r.worst_index << " analytic "
                                        << r.worst_analytic << " numeric " << r.worst_numeric;
  EXPECT_GT(r.checked, 0u);
}

}  // namespace

TEST(Backward, LogisticAtZeroGivesQuarter) {
  Tape<D> tape;
  auto x = make_var(Tensor<D>(Shape{}, 0.0), true);
  auto y = logistic(x, &tape);
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x->grad()[0], 0.25);
}

TEST(Backward, RepeatedCallsAccumulateLeafGradients) {
  Rng rng(3);
  auto x = make_var(random_tensor<D>(Shape{2, 3, 4, 4}, rng), true);
  auto w = make_var(random_tensor<D>(Shape{2, 3, 3, 3}, rng), true);
  auto b = make_var(random_tensor<D>(Shape{1, 1, 1, 2}, rng), true);
  const auto coeff = projection<D>(Shape{2, 2, 4, 4}, 9);
  Tape<D> tape;
  auto loss = weighted_sum(conv2d(x, w, b, {1, 1}, &tape), coeff, &tape);
  tape.backward(loss);
  const std::vector<D> once(w->grad().begin(), w->grad().end());
  tape.backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_DOUBLE_EQ(w->grad()[i], 2.0 * once[i]);
}

TEST(Backward, RejectsNonScalarAndForeignLoss) {
  Tape<D> tape;
  auto x = make_var(Tensor<D>(Shape{1, 1, 2, 2}, 1.0), true);
  auto y = relu(x, &tape);
  EXPECT_THROW(tape.backward(y), UsageError);
  Tape<D> other;
  auto z = weighted_sum(x, Tensor<D>(Shape{1, 1, 2, 2}, 1.0), &other);
  EXPECT_THROW(tape.backward(z), UsageError);
}

TEST(Backward, NoTapeRecordsNothingAndInputsWithoutGradAreSkipped) {
  Tape<D> tape;
  auto x = make_var(Tensor<D>(Shape{1, 1, 2, 2}, 1.0), false);
  relu(x, &tape);
  EXPECT_EQ(tape.size(), 0u);
  relu(x);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(GradCheck, Conv2dAllOperands) {
  Rng rng(101);
  for (int inst = 0; inst < kInstances; ++inst) {
    const int k = 1 + 2 * static_cast<int>(rng.below(2));
    const int stride = 1 + static_cast<int>(rng.below(2));
    const int pad = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    const Shape xs = random_shape(rng, 2, 3, k, 6);
    const Shape ws{1 + static_cast<int>(rng.below(3)), xs.c, k, k};
    auto x = make_var(random_tensor<D>(xs, rng));
    auto w = make_var(random_tensor<D>(ws, rng));
    auto b = make_var(random_tensor<D>(Shape{1, 1, 1, ws.n}, rng));
    const kernels::Conv2dGeometry g{stride, pad};
    const auto coeff = projection<D>(kernels::conv2d_output_shape(xs, ws, b->shape(), g), inst);
    auto f = [&](const Var<D>&, Tape<D>* t) { return weighted_sum(conv2d(x, w, b, g, t), coeff, t); };
    const std::string tag = "conv instance " + std::to_string(inst);
    expect_close_grad(grad_check<D>(f, x), tag + " input");
    expect_close_grad(grad_check<D>(f, w), tag + " weight");
    expect_close_grad(grad_check<D>(f, b), tag + " bias");
  }
}

TEST(GradCheck, MaxPool2) {
  Rng rng(102);
  for (int inst = 0; inst < kInstances; ++inst) {
    Shape s = random_shape(rng, 2, 3, 1, 4);
    s.h *= 2;
    s.w *= 2;
    // Spacing well above the step keeps every window's argmax stable.
    auto x = make_var(random_distinct<D>(s, rng, 0.01));
    const auto coeff = projection<D>(Shape{s.n, s.c, s.h / 2, s.w / 2}, inst);
    auto f = [&](const Var<D>& v, Tape<D>* t) { return weighted_sum(max_pool2(v, t), coeff, t); };
    expect_close_grad(grad_check<D>(f, x), "max_pool2 instance " + std::to_string(inst));
  }
}

TEST(GradCheck, Upsample2) {
  Rng rng(103);
  for (int inst = 0; inst < kInstances; ++inst) {
    const Shape s = random_shape(rng, 2, 3, 1, 5);
    auto x = make_var(random_tensor<D>(s, rng));
    const auto coeff = projection<D>(Shape{s.n, s.c, s.h * 2, s.w * 2}, inst);
    auto f = [&](const Var<D>& v, Tape<D>* t) { return weighted_sum(upsample2(v, t), coeff, t); };
    expect_close_grad(grad_check<D>(f, x), "upsample2 instance " + std::to_string(inst));
  }
}

TEST(GradCheck, ConcatBothOperands) {
  Rng rng(104);
  for (int inst = 0; inst < kInstances; ++inst) {
    const Shape sa = random_shape(rng, 2, 3, 1, 5);
    Shape sb = sa;
    sb.c = 1 + static_cast<int>(rng.below(3));
    auto a = make_var(random_tensor<D>(sa, rng));
    auto b = make_var(random_tensor<D>(sb, rng));
    const auto coeff = projection<D>(Shape{sa.n, sa.c + sb.c, sa.h, sa.w}, inst);
    auto f = [&](const Var<D>&, Tape<D>* t) { return weighted_sum(concat_channels(a, b, t), coeff, t); };
    expect_close_grad(grad_check<D>(f, a), "concat instance " + std::to_string(inst) + " first");
    expect_close_grad(grad_check<D>(f, b), "concat instance " + std::to_string(inst) + " second");
  }
}

TEST(GradCheck, ReluAwayFromZero) {
  Rng rng(105);
  for (int inst = 0; inst < kInstances; ++inst) {
    const Shape s = random_shape(rng, 2, 3, 1, 6);
    auto x = make_var(random_away_from_zero<D>(s, rng, 0.01));
    const auto coeff = projection<D>(s, inst);
    auto f = [&](const Var<D>& v, Tape<D>* t) { return weighted_sum(relu(v, t), coeff, t); };
    expect_close_grad(grad_check<D>(f, x), "relu instance " + std::to_string(inst));
  }
}

TEST(GradCheck, Logistic) {
  Rng rng(106);
  for (int inst = 0; inst < kInstances; ++inst) {
    const Shape s = random_shape(rng, 2, 3, 1, 6);
    auto x = make_var(random_tensor<D>(s, rng, -6.0, 6.0));
    const auto coeff = projection<D>(s, inst);
    auto f = [&](const Var<D>& v, Tape<D>* t) { return weighted_sum(logistic(v, t), coeff, t); };
    expect_close_grad(grad_check<D>(f, x), "logistic instance " + std::to_string(inst));
  }
}

TEST(GradCheck, MseLossBothOperands) {
  Rng rng(107);
  for (int inst = 0; inst < kInstances; ++inst) {
    const Shape s = random_shape(rng, 2, 3, 1, 6);
    auto p = make_var(random_tensor<D>(s, rng, 0.0, 1.0));
    auto y = make_var(random_tensor<D>(s, rng, 0.0, 1.0));
    auto f = [&](const Var<D>&, Tape<D>* t) { return mse_loss(p, y, t); };
    expect_close_grad(grad_check<D>(f, p), "mse instance " + std::to_string(inst) + " prediction");
    expect_close_grad(grad_check<D>(f, y), "mse instance " + std::to_string(inst) + " target");
  }
}

TEST(GradCheck, RelativeErrorIsZeroForExactGradients) {
  auto x = make_var(Tensor<D>(Shape{1, 1, 1, 3}, std::vector<D>{1.0, -2.0, 3.0}));
  const Tensor<D> coeff(Shape{1, 1, 1, 3}, std::vector<D>{0.5, 0.25, -1.0});
  auto f = [&](const Var<D>& v, Tape<D>* t) { return weighted_sum(v, coeff, t); };
  const auto r = grad_check<D>(f, x);
  EXPECT_EQ(r.checked, 3u);
  EXPECT_LT(r.max_relative_error, 1e-9);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // x^2 summed, with a backward that reports 3x instead of 2x.
  auto x = make_var(Tensor<D>(Shape{1, 1, 1, 2}, std::vector<D>{0.7, -0.4}));
  auto f = [](const Var<D>& v, Tape<D>* t) {
    D s = 0;
    for (D e : v->values()) s += e * e;
    auto out = make_var(Tensor<D>(Shape{}, s), t != nullptr);
    if (t) t->record("bad_square", {v}, out, [v, out] {
      for (std::size_t i = 0; i < v->size(); ++i) v->grad()[i] += 3 * (*v)[i] * out->grad()[0];
    });
    return out;
  };
  EXPECT_GT(grad_check<D>(f, x).max_relative_error, 0.1);
}

TEST(GradCheck, SubsamplesCoordinatesWhenAsked) {
  Rng rng(5);
  auto x = make_var(random_tensor<D>(Shape{1, 2, 5, 5}, rng));
  const auto coeff = projection<D>(x->shape(), 1);
  auto f = [&](const Var<D>& v, Tape<D>* t) { return weighted_sum(logistic(v, t), coeff, t); };
  GradCheckOptions opt;
  opt.max_coordinates = 7;
  EXPECT_EQ(grad_check<D>(f, x, opt).checked, 7u);
}

TEST(GradCheck, SumOfSquaresExample) {
  // sum(x^2) = 2 * mse(x, 0) for two elements.
  auto x = make_var(Tensor<D>(Shape{1, 1, 1, 2}, std::vector<D>{1.0, 2.0}), true);
  auto zero = make_var(Tensor<D>(Shape{1, 1, 1, 2}, 0.0));
  const Tensor<D> two(Shape{}, 2.0);
  auto f = [&](const Var<D>& v, Tape<D>* t) { return weighted_sum(mse_loss(v, zero, t), two, t); };
  Tape<D> tape;
  x->zero_grad();
  tape.backward(f(x, &tape));
  EXPECT_NEAR(x->grad()[0], 2.0, 1e-12);
  EXPECT_NEAR(x->grad()[1], 4.0, 1e-12);
  const auto r = grad_check<D>(f, x);
  EXPECT_NEAR(r.worst_analytic, r.worst_numeric, 1e-6);
  EXPECT_LT(r.max_relative_error, 1e-6);
}

TEST(GradCheck, ConstantFunctionHasZeroGradients) {
  Rng rng(108);
  auto x = make_var(random_tensor<D>(Shape{1, 2, 3, 3}, rng));
  const Tensor<D> zeros(Shape{1, 2, 3, 3}, 0.0);
  auto f = [&](const Var<D>& v, Tape<D>* t) { return weighted_sum(v, zeros, t); };
  const auto r = grad_check<D>(f, x);
  EXPECT_EQ(r.max_relative_error, 0.0);
  EXPECT_EQ(r.worst_analytic, 0.0);
  EXPECT_EQ(r.worst_numeric, 0.0);
}

TEST(Backward, MseOfScalarAgainstZero) {
  auto x = make_var(Tensor<D>(Shape{}, 3.0), true);
  auto zero = make_var(Tensor<D>(Shape{}, 0.0));
  Tape<D> tape;
  auto loss = mse_loss(x, zero, &tape);
  EXPECT_EQ((*loss)[0], 9.0);
  tape.backward(loss);
  EXPECT_EQ(x->grad()[0], 6.0);
}
