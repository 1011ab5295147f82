#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "../support/gradcheck.hpp"
#include "osuda/stylemix.hpp"
#include "osuda/tensor.hpp"

using namespace osuda;
using osuda::testing::check_gradients;
using osuda::testing::project;
using osuda::testing::random_away_from_zero;
using osuda::testing::random_tensor;

namespace {

Tensor vec(std::vector<double> v, bool grad = false) {
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v), grad);
}

Shape random_shape(Rng& rng) {
  std::uniform_int_distribution<std::size_t> batch(1, 4), hw(1, 5);
  return Shape{batch(rng), batch(rng), hw(rng), hw(rng)};
}

constexpr int kInstances = 100;
constexpr double kTol = 1e-4;

// Runs a unary-op gradient check over kInstances random 4-D inputs.
void sweep(const std::string& name, const std::function<Tensor(Rng&, Shape)>& make_input,
           const std::function<Tensor(const Tensor&)>& op) {
  Rng rng(derive_seed(11, name));
  for (int i = 0; i < kInstances; ++i) {
    const Shape shape = random_shape(rng);
    Tensor x = make_input(rng, shape);
    const auto seed = rng();
    const auto r = check_gradients([&] { return project(op(x), seed); }, {x});
    ASSERT_LT(r.max_rel_error, kTol) << name << " instance " << i << " shape " << to_string(shape);
  }
}

Tensor uniform_input(Rng& rng, Shape s) { return random_tensor(rng, std::move(s)); }
Tensor positive_input(Rng& rng, Shape s) { return random_tensor(rng, std::move(s), 0.5, 2.0); }
Tensor nonzero_input(Rng& rng, Shape s) { return random_away_from_zero(rng, std::move(s), 0.05, 1.0); }

}  // namespace

TEST(TensorBasics, ShapeAndDataLengthMustAgree) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), ShapeError);
  const Tensor t = Tensor::zeros({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_FALSE(t.has_grad());
}

TEST(TensorOps, ReluExample) {
  const Tensor y = relu(vec({-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{0, 0, 2}));
}

TEST(TensorOps, SoftmaxOfEqualLogitsIsUniform) {
  const Tensor p = softmax_channels(Tensor::full({1, 4, 1, 1}, 3.7));
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(TensorOps, SoftmaxSurvivesLargeLogits) {
  const Tensor p = softmax_channels(Tensor(Shape{1, 2, 1, 1}, {1000.0, 0.0}));
  EXPECT_DOUBLE_EQ(p.data()[0], 1.0);
  EXPECT_TRUE(std::isfinite(p.data()[1]));
}

TEST(TensorOps, BinaryShapeMismatchNamesBothShapes) {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3,2]"), std::string::npos) << msg;
  }
}

TEST(TensorOps, ConvOutputExtent) {
  const Tensor x = Tensor::zeros({1, 3, 32, 32});
  const Tensor w = Tensor::zeros({8, 3, 3, 3});
  const Tensor b = Tensor::zeros({8});
  EXPECT_EQ(conv2d(x, w, b, 2, 1).shape(), (Shape{1, 8, 16, 16}));
  EXPECT_EQ(conv2d(x, w, b, 1, 1).shape(), (Shape{1, 8, 32, 32}));
  EXPECT_EQ(conv2d(x, w, b, 1, 0).shape(), (Shape{1, 8, 30, 30}));
  EXPECT_THROW(conv2d(x, Tensor::zeros({8, 2, 3, 3}), b, 1, 1), ShapeError);
}

// Direct nested-loop convolution as an oracle for the GEMM path.
TEST(TensorOps, ConvMatchesDirectLoops) {
  Rng rng(5);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      const Tensor x = random_tensor(rng, {2, 3, 7, 6}, -1, 1, false);
      const Tensor w = random_tensor(rng, {4, 3, 3, 3}, -1, 1, false);
      const Tensor b = random_tensor(rng, {4}, -1, 1, false);
      const Tensor y = conv2d(x, w, b, stride, pad);
      const std::size_t oh = y.dim(2), ow = y.dim(3);
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 4; ++o)
          for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
              double s = b.data()[o];
              for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t ky = 0; ky < 3; ++ky)
                  for (std::size_t kx = 0; kx < 3; ++kx) {
                    const long yy = static_cast<long>(i * stride + ky) - static_cast<long>(pad);
                    const long xx = static_cast<long>(j * stride + kx) - static_cast<long>(pad);
                    if (yy < 0 || xx < 0 || yy >= 7 || xx >= 6) continue;
                    s += w.data()[((o * 3 + c) * 3 + ky) * 3 + kx] * x.data()[((n * 3 + c) * 7 + yy) * 6 + xx];
                  }
              EXPECT_NEAR(y.data()[((n * 4 + o) * oh + i) * ow + j], s, 1e-12);
            }
    }
  }
}

TEST(TensorOps, UpsampleNearestRepeatsAndRecordsNoGradient) {
  const Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4}, true);
  const Tensor y = upsample_nearest(x, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  EXPECT_FALSE(y.requires_grad());
  const std::vector<double> expect{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), expect);
}

TEST(TensorOps, SliceAndReshape) {
  const Tensor x(Shape{2, 3}, {0, 1, 2, 3, 4, 5});
  const Tensor s = slice(x, 1, 1, 2);
  EXPECT_EQ(std::vector<double>(s.data().begin(), s.data().end()), (std::vector<double>{1, 2, 4, 5}));
  EXPECT_EQ(reshape(x, {3, 2}).shape(), (Shape{3, 2}));
  EXPECT_THROW(reshape(x, {4, 2}), ShapeError);
  EXPECT_THROW(slice(x, 1, 2, 2), ShapeError);
}

TEST(Autograd, SumOfSquares) {
  const Tensor x = vec({1, 2, 3}, true);
  sum(mul(x, x)).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Autograd, MeanSpreadsEvenly) {
  const Tensor x = vec({3, -1, 4, 1}, true);
  mean(x).backward();
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(Autograd, ReluMask) {
  const Tensor x = vec({-1, 2}, true);
  sum(relu(x)).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 1}));
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  const Tensor x = vec({2}, true);
  const Tensor y = mul(x, x);
  sum(add(y, y)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}

TEST(Autograd, NonScalarBackwardIsAnError) {
  const Tensor x = vec({1, 2}, true);
  EXPECT_THROW(mul(x, x).backward(), AutogradError);
}

TEST(Autograd, SecondBackwardOnSameGraphIsAnError) {
  const Tensor x = vec({1, 2}, true);
  const Tensor loss = sum(mul(x, x));
  loss.backward();
  EXPECT_THROW(loss.backward(), AutogradError);
}

TEST(Autograd, StaleLeafGradientIsAnError) {
  const Tensor x = vec({1, 2}, true);
  sum(mul(x, x)).backward();
  EXPECT_THROW(sum(mul(x, x)).backward(), AutogradError);
  Tensor y = x;
  y.zero_grad();
  EXPECT_NO_THROW(sum(mul(x, x)).backward());
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  const Tensor x = vec({1, 2}, true);
  Tensor y;
  {
    NoGradGuard g;
    y = sum(mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

TEST(Autograd, DetachCutsTheGraph) {
  const Tensor x = vec({3}, true);
  const Tensor y = mul(x, x.detach());
  sum(y).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
}

// ---------------------------------------------------------------------------
// Finite-difference sweeps, one per primitive.

TEST(GradCheck, Add) {
  sweep("add", uniform_input, [&](const Tensor& x) { return add(x, mul(x, x)); });
}
TEST(GradCheck, Sub) {
  sweep("sub", uniform_input, [](const Tensor& x) { return sub(mul_scalar(x, 3.0), mul(x, x)); });
}
TEST(GradCheck, Mul) {
  sweep("mul", uniform_input, [](const Tensor& x) { return mul(x, add_scalar(x, 0.5)); });
}
TEST(GradCheck, Div) {
  sweep("div", nonzero_input, [](const Tensor& x) { return div(add_scalar(x, 2.0), x); });
}
TEST(GradCheck, Scalars) {
  sweep("scalar", uniform_input, [](const Tensor& x) { return add_scalar(mul_scalar(x, -1.7), 0.3); });
}
TEST(GradCheck, Relu) {
  sweep("relu", nonzero_input, [](const Tensor& x) { return relu(x); });
}
TEST(GradCheck, Log) {
  sweep("log", positive_input, [](const Tensor& x) { return log(x); });
}
TEST(GradCheck, Sqrt) {
  sweep("sqrt", positive_input, [](const Tensor& x) { return osuda::sqrt(x); });
}
TEST(GradCheck, ClampMin) {
  sweep("clamp_min", nonzero_input, [](const Tensor& x) { return clamp_min(x, 0.0); });
}
TEST(GradCheck, SumAndMean) {
  sweep("sum", uniform_input, [](const Tensor& x) { return add(mul(sum(x), sum(x)), mean(mul(x, x))); });
}
TEST(GradCheck, ChannelMean) {
  sweep("channel_mean", uniform_input, [](const Tensor& x) { return channel_mean(x); });
}
TEST(GradCheck, ChannelStd) {
  sweep("channel_std",
        [](Rng& r, Shape s) {
          s[2] = std::max<std::size_t>(s[2], 2);  // a non-degenerate channel
          return random_tensor(r, std::move(s));
        },
        [](const Tensor& x) { return channel_std(x, kStatEpsilon); });
}
TEST(GradCheck, Broadcast) {
  sweep("broadcast", uniform_input, [](const Tensor& x) {
    return mul(x, broadcast_like(channel_mean(mul(x, x)), x));
  });
}
TEST(GradCheck, ReshapeAndSlice) {
  sweep("reshape_slice", uniform_input, [](const Tensor& x) {
    const Tensor r = reshape(x, Shape{x.numel()});
    const std::size_t half = std::max<std::size_t>(1, r.numel() / 2);
    return mul(slice(r, 0, 0, half), slice(r, 0, r.numel() - half, half));
  });
}
TEST(GradCheck, Softmax) {
  sweep("softmax", uniform_input, [](const Tensor& x) { return softmax_channels(mul_scalar(x, 2.0)); });
}
TEST(GradCheck, Conv2d) {
  Rng rng(derive_seed(11, "conv2d"));
  std::uniform_int_distribution<std::size_t> small(1, 4), extent(3, 5);
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t n = small(rng), c = small(rng), o = small(rng);
    const std::size_t stride = 1 + static_cast<std::size_t>(i % 2), pad = static_cast<std::size_t>((i / 2) % 2);
    const std::size_t k = (i % 5 == 0) ? 1 : 3;
    Tensor x = random_tensor(rng, {n, c, extent(rng), extent(rng)});
    Tensor w = random_tensor(rng, {o, c, k, k});
    Tensor b = random_tensor(rng, {o});
    const auto seed = rng();
    const auto r = check_gradients([&] { return project(conv2d(x, w, b, stride, pad), seed); }, {x, w, b});
    ASSERT_LT(r.max_rel_error, kTol) << "instance " << i;
  }
}

TEST(Determinism, SameSeedSameOpsSameBits) {
  auto run = [] {
    Rng rng(77);
    const Tensor x = random_tensor(rng, {2, 3, 5, 5});
    const Tensor w = random_tensor(rng, {4, 3, 3, 3});
    const Tensor b = random_tensor(rng, {4});
    const Tensor p = softmax_channels(relu(conv2d(x, w, b, 2, 1)));
    const Tensor loss = sum(log(clamp_min(p, 1e-12)));
    loss.backward();
    std::vector<double> out(p.data().begin(), p.data().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}
