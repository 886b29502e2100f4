#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_support.hpp"

using namespace nimbus;
using namespace nimbus::testing;

TEST(Tensor, ShapeAndStorage) {
  Tensor<float> t(Shape{2, 3, 4, 5}, 1.5f);
  EXPECT_EQ(t.size(), 120u);
  EXPECT_EQ(t.shape().plane(), 20u);
  EXPECT_FALSE(t.has_grad());
  t.at(1, 2, 3, 4) = 7.0f;
  EXPECT_EQ(t[t.size() - 1], 7.0f);
  EXPECT_EQ(t.offset(1, 0, 0, 0), 60u);
}

TEST(Tensor, FreshGradIsZeroAndSameLength) {
  Tensor<float> t(Shape{1, 2, 3, 3}, 4.0f);
  auto g = t.grad();
  ASSERT_EQ(g.size(), t.size());
  for (float v : g) EXPECT_EQ(v, 0.0f);
  g[0] = 3;
  t.zero_grad();
  EXPECT_EQ(t.grad()[0], 0.0f);
}

TEST(Tensor, RejectsBadShapesAndSizes) {
  EXPECT_THROW(Tensor<float>(Shape{1, 0, 2, 2}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{-1, 1, 2, 2}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{1, 1, 2, 2}, std::vector<float>(3)), ShapeError);
}

TEST(Conv2d, SlidingWindowExample) {
  Tensor<float> x(Shape{1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor<float> w(Shape{1, 1, 2, 2}, 1.0f);
  Tensor<float> b(Shape{1, 1, 1, 1}, 0.0f);
  const auto y = kernels::conv2d_forward(x, w, b, {1, 0});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y.values(), (std::vector<float>{12, 16, 24, 28}));
}

TEST(Conv2d, IdentityKernelCopiesInput) {
  Rng rng(2);
  const auto x = random_tensor<float>(Shape{2, 1, 7, 5}, rng);
  Tensor<float> w(Shape{1, 1, 1, 1}, 1.0f);
  Tensor<float> b(Shape{1, 1, 1, 1}, 0.0f);
  EXPECT_EQ(kernels::conv2d_forward(x, w, b, {}).values(), x.values());
}

TEST(Conv2d, ZeroInputGivesBias) {
  Rng rng(3);
  Tensor<float> x(Shape{2, 3, 6, 6}, 0.0f);
  const auto w = random_tensor<float>(Shape{4, 3, 3, 3}, rng);
  Tensor<float> b(Shape{1, 1, 1, 4}, {0.5f, -1.0f, 2.0f, 0.0f});
  const auto y = kernels::conv2d_forward(x, w, b, {1, 1});
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 4; ++c)
      for (int i = 0; i < 36; ++i) EXPECT_EQ(y.at(n, c, i / 6, i % 6), b[c]);
}

TEST(Conv2d, ChannelMismatchNamesBothShapes) {
  Tensor<float> x(Shape{1, 3, 4, 4});
  Tensor<float> w(Shape{2, 2, 3, 3});
  Tensor<float> b(Shape{1, 1, 1, 2});
  try {
    kernels::conv2d_forward(x, w, b, {1, 1});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(x.shape().str()), std::string::npos) << msg;
    EXPECT_NE(msg.find(w.shape().str()), std::string::npos) << msg;
  }
}

TEST(Conv2d, RejectsKernelLargerThanPaddedInput) {
  Tensor<float> x(Shape{1, 1, 2, 2});
  Tensor<float> w(Shape{1, 1, 5, 5});
  Tensor<float> b(Shape{1, 1, 1, 1});
  EXPECT_THROW(kernels::conv2d_forward(x, w, b, {1, 1}), ShapeError);
  EXPECT_THROW(kernels::conv2d_forward(x, w, b, {0, 2}), ShapeError);
}

TEST(Conv2d, MatchesNaiveReferenceOnRandomCases) {
  Rng rng(2024);
  for (int inst = 0; inst < 100; ++inst) {
    const int kh = 1 + static_cast<int>(rng.below(4));
    const int kw = 1 + static_cast<int>(rng.below(4));
    const int stride = 1 + static_cast<int>(rng.below(3));
    const int pad = static_cast<int>(rng.below(3));
    Shape xs = random_shape(rng, 3, 6, 1, 20);
    xs.h = std::max(xs.h, kh);
    xs.w = std::max(xs.w, kw);
    const Shape ws{1 + static_cast<int>(rng.below(20)), xs.c, kh, kw};
    const auto x = random_tensor<float>(xs, rng);
    const auto w = random_tensor<float>(ws, rng);
    const auto b = random_tensor<float>(Shape{1, 1, 1, ws.n}, rng);
    const auto got = kernels::conv2d_forward(x, w, b, {stride, pad});
    const auto want = naive_conv2d(x, w, &b, stride, pad);
    ASSERT_EQ(got.shape(), want.shape()) << "case " << inst;
    for (std::size_t i = 0; i < got.size(); ++i)
      ASSERT_NEAR(got[i], want[i], 1e-5) << "case " << inst << " element " << i;
  }
}

TEST(Conv2d, RepeatedCallsAreBitwiseIdentical) {
  Rng rng(4);
  const auto x = random_tensor<float>(Shape{2, 8, 16, 16}, rng);
  const auto w = random_tensor<float>(Shape{16, 8, 3, 3}, rng);
  const auto b = random_tensor<float>(Shape{1, 1, 1, 16}, rng);
  EXPECT_EQ(kernels::conv2d_forward(x, w, b, {1, 1}).values(), kernels::conv2d_forward(x, w, b, {1, 1}).values());
}

TEST(MaxPool2, SingleWindowAndConstant) {
  Tensor<float> x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(kernels::max_pool2_forward(x).output.values(), std::vector<float>{4});
  Tensor<float> c(Shape{2, 3, 6, 4}, 2.5f);
  const auto pooled = kernels::max_pool2_forward(c);
  for (float v : pooled.output.values()) EXPECT_EQ(v, 2.5f);
}

TEST(MaxPool2, MatchesBruteForceWindowScan) {
  Rng rng(5);
  const auto x = random_distinct<float>(Shape{1, 1, 4, 4}, rng, 0.1);
  const auto y = kernels::max_pool2_forward(x).output;
  for (int oy = 0; oy < 2; ++oy)
    for (int ox = 0; ox < 2; ++ox) {
      float m = -std::numeric_limits<float>::infinity();
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) m = std::max(m, x.at(0, 0, 2 * oy + dy, 2 * ox + dx));
      EXPECT_EQ(y.at(0, 0, oy, ox), m);
    }
}

TEST(MaxPool2, TiesRouteGradientToFirstCell) {
  Tape<float> tape;
  auto x = make_var(Tensor<float>(Shape{1, 1, 2, 2}, 1.0f), true);
  auto loss = weighted_sum(max_pool2(x, &tape), Tensor<float>(Shape{}, 1.0f), &tape);
  tape.backward(loss);
  EXPECT_EQ(std::vector<float>(x->grad().begin(), x->grad().end()), (std::vector<float>{1, 0, 0, 0}));
}

TEST(MaxPool2, OddSizeIsAShapeError) {
  EXPECT_THROW(kernels::max_pool2_forward(Tensor<float>(Shape{1, 1, 3, 4})), ShapeError);
  EXPECT_THROW(kernels::max_pool2_forward(Tensor<float>(Shape{1, 1, 4, 5})), ShapeError);
}

TEST(Upsample2, ReplicatesAndSumsGradients) {
  Tape<float> tape;
  auto x = make_var(Tensor<float>(Shape{1, 1, 2, 2}, {1, 2, 3, 4}), true);
  auto y = upsample2(x, &tape);
  EXPECT_EQ(y->values(), (std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
  tape.backward(weighted_sum(y, Tensor<float>(y->shape(), 1.0f), &tape));
  for (float g : x->grad()) EXPECT_EQ(g, 4.0f);
}

TEST(Upsample2, ThenMaxPoolIsIdentity) {
  Rng rng(6);
  const auto x = random_tensor<float>(Shape{2, 3, 5, 7}, rng);
  EXPECT_EQ(kernels::max_pool2_forward(kernels::upsample2_forward(x)).output.values(), x.values());
}

TEST(Concat, LayoutAndShapes) {
  Rng rng(7);
  const auto a = random_tensor<float>(Shape{1, 2, 4, 4}, rng);
  const auto b = random_tensor<float>(Shape{1, 3, 4, 4}, rng);
  const auto y = kernels::concat_channels_forward(a, b);
  EXPECT_EQ(y.shape(), (Shape{1, 5, 4, 4}));
  for (int i = 0; i < 16; ++i) EXPECT_EQ(y.at(0, 0, i / 4, i % 4), a.at(0, 0, i / 4, i % 4));
  for (int i = 0; i < 16; ++i) EXPECT_EQ(y.at(0, 2, i / 4, i % 4), b.at(0, 0, i / 4, i % 4));
}

TEST(Concat, SpatialOrBatchMismatchIsAShapeError) {
  EXPECT_THROW(kernels::concat_channels_forward(Tensor<float>(Shape{1, 1, 4, 4}), Tensor<float>(Shape{1, 1, 4, 2})),
               ShapeError);
  EXPECT_THROW(kernels::concat_channels_forward(Tensor<float>(Shape{1, 1, 4, 4}), Tensor<float>(Shape{2, 1, 4, 4})),
               ShapeError);
}

TEST(Relu, ValuesAndGradientMask) {
  Tape<float> tape;
  auto x = make_var(Tensor<float>(Shape{1, 1, 1, 4}, {-1.0f, 2.5f, 0.0f, 0.1f}), true);
  auto y = relu(x, &tape);
  EXPECT_EQ(y->values(), (std::vector<float>{0.0f, 2.5f, 0.0f, 0.1f}));
  tape.backward(weighted_sum(y, Tensor<float>(y->shape(), 1.0f), &tape));
  EXPECT_EQ(std::vector<float>(x->grad().begin(), x->grad().end()), (std::vector<float>{0, 1, 0, 1}));
}

TEST(Logistic, ValuesSaturationAndSymmetry) {
  EXPECT_EQ(kernels::logistic(0.0f), 0.5f);
  for (float big : {80.0f, 1000.0f, std::numeric_limits<float>::max()}) {
    const float hi = kernels::logistic(big);
    const float lo = kernels::logistic(-big);
    EXPECT_TRUE(std::isfinite(hi) && std::isfinite(lo));
    EXPECT_LE(hi, 1.0f);
    EXPECT_GE(lo, 0.0f);
  }
  EXPECT_LT(kernels::logistic(10.0), 1.0);
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const float x = static_cast<float>(rng.uniform(-30.0, 30.0));
    EXPECT_NEAR(kernels::logistic(-x), 1.0f - kernels::logistic(x), 1e-6f);
  }
}

TEST(Mse, Examples) {
  auto t = [](std::vector<float> v) { return Tensor<float>(Shape{1, 1, 1, static_cast<int>(v.size())}, v); };
  EXPECT_DOUBLE_EQ(kernels::mse(t({0.5f}), t({0.0f})), 0.25);
  EXPECT_DOUBLE_EQ(kernels::mse(t({0.3f, 0.7f}), t({0.3f, 0.7f})), 0.0);
  EXPECT_DOUBLE_EQ(kernels::mse(t({1.0f, 0.0f}), t({0.0f, 1.0f})), 1.0);
  EXPECT_THROW(kernels::mse(t({1.0f}), t({1.0f, 2.0f})), ShapeError);
}

TEST(Ops, FiniteOutputsOnFiniteInputs) {
  Rng rng(9);
  auto x = make_var(random_tensor<float>(Shape{2, 3, 8, 8}, rng, -50.0, 50.0));
  auto w = make_var(random_tensor<float>(Shape{4, 3, 3, 3}, rng));
  auto b = make_var(random_tensor<float>(Shape{1, 1, 1, 4}, rng));
  auto y = logistic(upsample2(max_pool2(relu(conv2d(x, w, b, {1, 1})))));
  for (float v : y->values()) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}
