#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "diat/gradcheck.hpp"
#include "diat/ops.hpp"
#include "test_util.hpp"

using namespace diat;
using diat::test::max_abs_diff;
using diat::test::random_off_zero;
using diat::test::random_tensor;

namespace {

// Direct-summation convolution used as an independent forward oracle.
std::vector<double> brute_conv(const Tensor& x, const Tensor& w, const Tensor& b, int pad, int stride) {
  const auto c = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const auto co = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  const auto ho = (h + 2 * pad - kh) / stride + 1, wo = (wd + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(co * ho * wo));
  for (std::int64_t o = 0; o < co; ++o)
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        double acc = b.at(o);
        for (std::int64_t ci = 0; ci < c; ++ci)
          for (std::int64_t i = 0; i < kh; ++i)
            for (std::int64_t j = 0; j < kw; ++j) {
              const auto iy = oy * stride - pad + i, ix = ox * stride - pad + j;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              acc += x.at((ci * h + iy) * wd + ix) * w.at(((o * c + ci) * kh + i) * kw + j);
            }
        out[(o * ho + oy) * wo + ox] = acc;
      }
  return out;
}

Tensor weighted_sum(const Tensor& t, const Tensor& r) { return sum(mul(t, r)); }

}  // namespace

TEST(Shape, RejectsNonPositiveAndHighRank) {
  EXPECT_THROW(Shape({2, 0}), ShapeError);
  EXPECT_THROW(Shape({1, 1, 1, 1, 1}), ShapeError);
  EXPECT_EQ(Shape({}).numel(), 1);
  EXPECT_EQ(Shape({2, 3, 4}).numel(), 24);
}

TEST(Tensor, ValueCountMustMatchShape) {
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  Tensor t(Shape{2, 2}, std::vector<float>{1, 2, 3, 4});
  EXPECT_EQ(t.numel(), 4);
  EXPECT_FALSE(t.has_grad());
}

TEST(Conv2d, PaperTransformFirstLayerShape) {
  auto x = Tensor::zeros({3, 128, 128});
  auto w = Tensor::zeros({32, 3, 9, 9});
  auto b = Tensor::zeros({32});
  EXPECT_EQ(conv2d(x, w, b, 4, 1).shape(), Shape({32, 128, 128}));
}

TEST(Conv2d, PaperDiscriminatorFirstLayerShape) {
  auto x = Tensor::zeros({3, 128, 128});
  auto w = Tensor::zeros({32, 3, 8, 8});
  auto b = Tensor::zeros({32});
  EXPECT_EQ(conv2d(x, w, b, 3, 2).shape(), Shape({32, 64, 64}));
}

TEST(Conv2d, UnitKernelIsIdentity) {
  Tensor x(Shape{1, 1, 1}, std::vector<float>{0.75f});
  Tensor w(Shape{1, 1, 1, 1}, std::vector<float>{1.0f});
  Tensor b(Shape{1}, std::vector<float>{0.0f});
  EXPECT_FLOAT_EQ(conv2d(x, w, b, 0, 1).item(), 0.75f);
}

TEST(Conv2d, RejectsChannelMismatch) {
  EXPECT_THROW(conv2d(Tensor::zeros({4, 8, 8}), Tensor::zeros({2, 3, 3, 3}), Tensor(), 1, 1), ShapeError);
}

TEST(Conv2d, MatchesBruteForceAndBatchesIndependently) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const int stride = 1 + trial % 3, pad = trial % 2, k = 1 + trial % 4;
    auto x = random_tensor({3, 7, 6}, rng);
    auto w = random_tensor({4, 3, k, k}, rng);
    auto b = random_tensor({4}, rng);
    auto expected = brute_conv(x, w, b, pad, stride);
    auto got = conv2d(x, w, b, pad, stride).to_vector();
    ASSERT_EQ(got.size(), expected.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-12);

    auto x2 = random_tensor({3, 7, 6}, rng);
    auto batch = conv2d(stack({x, x2}), w, b, pad, stride);
    EXPECT_LT(max_abs_diff(unstack_one(batch, 1), conv2d(x2, w, b, pad, stride)), 1e-12);
  }
}

TEST(ConvTranspose2d, PaperFinalLayerShape) {
  auto y = Tensor::zeros({32, 127, 127});
  auto w = Tensor::zeros({32, 3, 10, 10});
  EXPECT_EQ(conv_transpose2d(y, w, Tensor::zeros({3}), 4, 1, 0).shape(), Shape({3, 128, 128}));
}

TEST(ConvTranspose2d, StrideTwoWithOutputPadding) {
  // (32-1)*2 + 3 - 2 + 1 = 64
  EXPECT_EQ(deconv_out_extent(32, 3, 1, 2, 1), 64);
  auto y = Tensor::zeros({128, 32, 32});
  auto w = Tensor::zeros({128, 64, 3, 3});
  EXPECT_EQ(conv_transpose2d(y, w, Tensor(), 1, 2, 1).shape(), Shape({64, 64, 64}));
  // The next printed row uses out_pad 0: (64-1)*2 + 3 - 2 = 127.
  EXPECT_EQ(deconv_out_extent(64, 3, 1, 2, 0), 127);
}

TEST(ConvTranspose2d, UnitKernelIsIdentity) {
  std::mt19937_64 rng(2);
  auto y = random_tensor({1, 4, 5}, rng);
  Tensor w(Shape{1, 1, 1, 1}, std::vector<double>{1.0});
  EXPECT_LT(max_abs_diff(conv_transpose2d(y, w, Tensor(), 0, 1, 0), y), 1e-15);
}

TEST(ConvTranspose2d, RejectsOutPadNotBelowStride) {
  EXPECT_THROW(conv_transpose2d(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 1, 2, 2),
               ShapeError);
  EXPECT_THROW(conv_transpose2d(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 1, 1, 1),
               ShapeError);
}

// <conv2d(x,W), y> == <x, conv_transpose2d(y,W)> and the mirrored geometry
// restores the input extent.
TEST(ConvTranspose2d, AdjointOfConvAndShapeAlgebra) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> hs(3, 12), ks(1, 5), ss(1, 3), ps(0, 2), cs(1, 4);
  for (int trial = 0; trial < 40; ++trial) {
    const int h = hs(rng), w = hs(rng), k = ks(rng), stride = ss(rng), pad = ps(rng);
    if (k > h + 2 * pad || k > w + 2 * pad) continue;
    const int ci = cs(rng), co = cs(rng);
    auto x = random_tensor({ci, h, w}, rng);
    auto wt = random_tensor({co, ci, k, k}, rng);
    auto cx = conv2d(x, wt, Tensor(), pad, stride);
    auto y = random_tensor(cx.shape(), rng);
    const int out_pad_h = (h + 2 * pad - k) % stride;
    const int out_pad_w = (w + 2 * pad - k) % stride;
    if (out_pad_h != out_pad_w) continue;
    auto ty = conv_transpose2d(y, wt, Tensor(), pad, stride, out_pad_h);
    ASSERT_EQ(ty.shape(), x.shape());
    EXPECT_NEAR(dot(cx, y), dot(x, ty), 1e-10);
  }
}

TEST(Dense, PaperDiscriminatorHead) {
  auto features = Tensor::zeros({128, 8, 8});
  auto flat = reshape(features, Shape{8192});
  EXPECT_EQ(dense(flat, Tensor::zeros({1000, 8192}), Tensor::zeros({1000})).shape(), Shape({1000}));
}

TEST(Dense, IdentityAndHandMultiplied) {
  Tensor x(Shape{2}, std::vector<double>{3.0, -4.0});
  Tensor eye(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
  EXPECT_EQ(dense(x, eye, Tensor::zeros({2}, DType::f64)).to_vector(), x.to_vector());

  std::mt19937_64 rng(4);
  auto v = random_tensor({3}, rng);
  Tensor w(Shape{2, 3}, std::vector<double>{1, 2, 3, -1, 0.5, 2});
  Tensor b(Shape{2}, std::vector<double>{0.25, -0.5});
  auto out = dense(v, w, b).to_vector();
  EXPECT_NEAR(out[0], 1 * v.at(0) + 2 * v.at(1) + 3 * v.at(2) + 0.25, 1e-14);
  EXPECT_NEAR(out[1], -1 * v.at(0) + 0.5 * v.at(1) + 2 * v.at(2) - 0.5, 1e-14);
  EXPECT_THROW(dense(Tensor::zeros({4}, DType::f64), w, b), ShapeError);
}

TEST(Activations, KnownValues) {
  Tensor x(Shape{3}, std::vector<double>{-1, 0, 2});
  EXPECT_EQ(relu(x).to_vector(), (std::vector<double>{0, 0, 2}));
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0, DType::f64)).item(), 0.5);
  EXPECT_DOUBLE_EQ(leaky_relu(Tensor::scalar(-2.0, DType::f64), 0.2).item(), -0.4);
}

TEST(Reductions, KnownValues) {
  EXPECT_DOUBLE_EQ(frobenius_sq(Tensor::full({2, 2}, 1.0, DType::f64)).item(), 4.0);
  Tensor v(Shape{3}, std::vector<double>{1, 2, 3});
  EXPECT_DOUBLE_EQ(mean(v).item(), 2.0);
  EXPECT_THROW(add(v, Tensor::zeros({4}, DType::f64)), ShapeError);
}

TEST(GaussianBlur, PreservesConstants) {
  auto c = Tensor::full({3, 9, 7}, 0.3, DType::f64);
  EXPECT_LT(max_abs_diff(gaussian_blur(c, 1.8), c), 1e-12);
  auto tiny = Tensor::full({1, 4, 4}, 0.7, DType::f64);
  EXPECT_LT(max_abs_diff(gaussian_blur(tiny, 1.8), tiny), 1e-12);
}

TEST(GaussianBlur, ImpulseMatchesSampledGaussian) {
  const double sigma = 1.8;
  const int n = 31, c = 15, r = 6;  // ceil(3 * 1.8)
  std::vector<double> img(n * n, 0.0);
  img[c * n + c] = 1.0;
  auto out = gaussian_blur(Tensor(Shape{1, n, n}, img), sigma).to_vector();
  double z = 0.0;
  for (int d = -r; d <= r; ++d) z += std::exp(-d * d / (2 * sigma * sigma));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const int di = i - c, dj = j - c;
      double expected = 0.0;
      if (std::abs(di) <= r && std::abs(dj) <= r)
        expected = std::exp(-di * di / (2 * sigma * sigma)) * std::exp(-dj * dj / (2 * sigma * sigma)) / (z * z);
      EXPECT_NEAR(out[i * n + j], expected, 1e-14);
    }
}

TEST(GaussianBlur, RejectsNonPositiveSigma) {
  EXPECT_THROW(gaussian_blur(Tensor::zeros({1, 4, 4}), 0.0), std::invalid_argument);
  EXPECT_THROW(gaussian_blur(Tensor::zeros({1, 4, 4}), -1.0), std::invalid_argument);
}

TEST(Backward, FrobeniusGradient) {
  Tensor x(Shape{2}, std::vector<double>{1, 2});
  x.set_requires_grad(true);
  GradTape tape;
  tape.backward(frobenius_sq(x));
  EXPECT_EQ(x.grad().to_vector(), (std::vector<double>{2, 4}));
}

TEST(Backward, ConstantLeafGetsNoGrad) {
  Tensor x(Shape{2}, std::vector<double>{1, 2});
  Tensor c(Shape{2}, std::vector<double>{3, 4});
  x.set_requires_grad(true);
  GradTape tape;
  tape.backward(sum(mul(x, c)));
  EXPECT_FALSE(c.has_grad());
  EXPECT_EQ(x.grad().to_vector(), (std::vector<double>{3, 4}));
}

TEST(Backward, FanOutAccumulates) {
  Tensor x(Shape{1}, std::vector<double>{5});
  x.set_requires_grad(true);
  GradTape tape;
  tape.backward(sum(add(x, x)));
  EXPECT_DOUBLE_EQ(x.grad().item(), 2.0);
}

TEST(Backward, RejectsNonScalarRootAndConsumesTape) {
  Tensor x(Shape{2}, std::vector<double>{1, 2});
  x.set_requires_grad(true);
  GradTape tape;
  auto y = relu(x);
  EXPECT_THROW(tape.backward(y), ShapeError);
  auto s = sum(y);
  EXPECT_GT(tape.size(), 0u);
  tape.backward(s);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_TRUE(y.has_grad());  // intermediates reachable from the root get grads
}

TEST(Backward, NoRecordingWithoutTapeOrUnderGuard) {
  Tensor x(Shape{2}, std::vector<double>{1, 2});
  x.set_requires_grad(true);
  EXPECT_FALSE(sum(x).requires_grad());
  GradTape tape;
  {
    NoGradGuard guard;
    EXPECT_FALSE(sum(x).requires_grad());
  }
  EXPECT_TRUE(sum(x).requires_grad());
}

TEST(Backward, LinearityOfAccumulation) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({3, 5, 5}, rng);
  auto w = random_tensor({2, 3, 3, 3}, rng);
  auto r = random_tensor({2, 5, 5}, rng);
  auto f = [&](const Tensor& in) { return weighted_sum(relu(conv2d(in, w, Tensor(), 1, 1)), r); };
  auto g = [&](const Tensor& in) { return frobenius_sq(in); };
  auto grad_of = [&](auto fn) {
    Tensor leaf = x.clone();
    leaf.set_requires_grad(true);
    GradTape tape;
    tape.backward(fn(leaf));
    return leaf.grad().to_vector();
  };
  const double a = 0.7, b = -1.3;
  auto gf = grad_of(f), gg = grad_of(g);
  auto gc = grad_of([&](const Tensor& in) { return add(mul_scalar(f(in), a), mul_scalar(g(in), b)); });
  for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], a * gf[i] + b * gg[i], 1e-12);
}

TEST(Backward, DeterministicForward) {
  std::mt19937_64 r1(9), r2(9);
  auto x1 = random_tensor({2, 3, 8, 8}, r1, -1, 1, DType::f32);
  auto x2 = random_tensor({2, 3, 8, 8}, r2, -1, 1, DType::f32);
  auto w1 = random_tensor({4, 3, 3, 3}, r1, -1, 1, DType::f32);
  auto w2 = random_tensor({4, 3, 3, 3}, r2, -1, 1, DType::f32);
  auto a = conv2d(x1, w1, Tensor(), 1, 2).to_vector();
  auto b = conv2d(x2, w2, Tensor(), 1, 2).to_vector();
  EXPECT_EQ(a, b);
}

TEST(AnomalyDetection, ThrowsOnNonFinite) {
  set_anomaly_detection(true);
  Tensor x(Shape{1}, std::vector<double>{std::numeric_limits<double>::infinity()});
  EXPECT_THROW(mul_scalar(x, 0.0), NumericError);
  set_anomaly_detection(false);
  EXPECT_NO_THROW(mul_scalar(x, 0.0));
}

// Every differentiable op against central differences, 20 random instances
// each, relative error <= 1e-4 at eps 1e-5.
class GradCheckOps : public ::testing::TestWithParam<int> {};

TEST_P(GradCheckOps, AllDifferentiableOps) {
  std::mt19937_64 rng(100 + GetParam());
  const double tol = 1e-4;
  auto r_like = [&](const Tensor& t) { return random_tensor(t.shape(), rng); };

  {
    auto x = random_tensor({2, 2, 5, 6}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng);
    auto b = random_tensor({3}, rng);
    auto r = r_like(conv2d(x, w, b, 1, 2));
    EXPECT_LT(grad_check([&] { return weighted_sum(conv2d(x, w, b, 1, 2), r); }, {x, w, b}).max_rel_error, tol)
        << "conv2d";
  }
  {
    auto x = random_tensor({2, 3, 4, 3}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng);
    auto b = random_tensor({2}, rng);
    auto r = r_like(conv_transpose2d(x, w, b, 1, 2, 1));
    EXPECT_LT(grad_check([&] { return weighted_sum(conv_transpose2d(x, w, b, 1, 2, 1), r); }, {x, w, b})
                  .max_rel_error,
              tol)
        << "conv_transpose2d";
  }
  {
    auto x = random_tensor({3, 5}, rng);
    auto w = random_tensor({4, 5}, rng);
    auto b = random_tensor({4}, rng);
    auto r = random_tensor({3, 4}, rng);
    EXPECT_LT(grad_check([&] { return weighted_sum(dense(x, w, b), r); }, {x, w, b}).max_rel_error, tol)
        << "dense";
  }
  {
    auto x = random_off_zero({2, 3, 4}, rng);
    auto r = r_like(x);
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(relu(t), r); }, x), tol) << "relu";
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(leaky_relu(t, 0.2), r); }, x), tol)
        << "leaky_relu";
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(sigmoid(t), r); }, x), tol) << "sigmoid";
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(tanh(t), r); }, x), tol) << "tanh";
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(square(t), r); }, x), tol) << "square";
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(mul_scalar(t, -2.5), r); }, x), tol);
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(add_scalar(t, 0.3), r); }, x), tol);
    EXPECT_LT(grad_check([&](const Tensor& t) { return mean(t); }, x), tol) << "mean";
    EXPECT_LT(grad_check([&](const Tensor& t) { return sum(t); }, x), tol) << "sum";
    EXPECT_LT(grad_check([&](const Tensor& t) { return frobenius_sq(t); }, x), 1e-6) << "frobenius_sq";
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(reshape(t, Shape{24}), reshape(r, Shape{24})); }, x),
              tol)
        << "reshape";
  }
  {
    auto p = random_tensor({6}, rng, 0.05, 0.95);
    auto r = r_like(p);
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(log_clamped(t, 1e-7), r); }, p), tol)
        << "log_clamped";
  }
  {
    auto a = random_tensor({2, 3}, rng);
    auto b = random_tensor({2, 3}, rng);
    auto r = r_like(a);
    EXPECT_LT(grad_check([&] { return weighted_sum(add(a, b), r); }, {a, b}).max_rel_error, tol) << "add";
    EXPECT_LT(grad_check([&] { return weighted_sum(sub(a, b), r); }, {a, b}).max_rel_error, tol) << "sub";
    EXPECT_LT(grad_check([&] { return weighted_sum(mul(a, b), r); }, {a, b}).max_rel_error, tol) << "mul";
  }
  {
    auto a = random_tensor({2, 2, 3, 3}, rng);
    auto b = random_tensor({2, 1, 3, 3}, rng);
    auto r = random_tensor({2, 3, 3, 3}, rng);
    EXPECT_LT(grad_check([&] { return weighted_sum(concat_channels({a, b}), r); }, {a, b}).max_rel_error, tol)
        << "concat_channels";
  }
  {
    auto x = random_tensor({2, 3, 4, 4}, rng);
    auto gamma = random_tensor({3}, rng, 0.5, 1.5);
    auto beta = random_tensor({3}, rng);
    auto r = r_like(x);
    EXPECT_LT(grad_check([&] { return weighted_sum(instance_norm(x, gamma, beta), r); }, {x, gamma, beta})
                  .max_rel_error,
              tol)
        << "instance_norm";
  }
  {
    auto z = random_tensor({4, 5}, rng, -2, 2);
    std::vector<int> labels{0, 4, 2, 2};
    EXPECT_LT(grad_check([&](const Tensor& t) { return softmax_cross_entropy(t, labels); }, z), tol)
        << "softmax_cross_entropy";
  }
  {
    auto img = random_tensor({2, 5, 7}, rng);
    auto r = r_like(img);
    EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(gaussian_blur(t, 1.8), r); }, img), tol)
        << "gaussian_blur";
  }
  {
    // conv -> relu -> mean, with inputs kept away from the relu kinks.
    auto w = random_tensor({2, 1, 3, 3}, rng);
    Tensor x;
    for (int attempt = 0; attempt < 50; ++attempt) {
      x = random_tensor({1, 5, 5}, rng);
      auto pre = conv2d(x, w, Tensor(), 1, 1).to_vector();
      bool clear = true;
      for (double v : pre) clear = clear && std::abs(v) > 1e-3;
      if (clear) break;
    }
    EXPECT_LT(grad_check([&](const Tensor& t) { return mean(relu(conv2d(t, w, Tensor(), 1, 1))); }, x), tol)
        << "conv->relu->mean";
  }
}

INSTANTIATE_TEST_SUITE_P(Random, GradCheckOps, ::testing::Range(0, 20));
