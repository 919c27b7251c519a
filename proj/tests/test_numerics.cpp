#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "test_util.hpp"

using namespace mtkd;
using mtkd::testing::random_tensor;

namespace {

Tensor<double> t4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::vector<double> v) {
  return Tensor<double>({n, c, h, w}, std::move(v));
}

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

// Direct cross-correlation with zero padding.
std::vector<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                               std::size_t stride, std::size_t pad, std::size_t& ho, std::size_t& wo) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t F = w.dim(0), K = w.dim(2);
  ho = (H + 2 * pad - K) / stride + 1;
  wo = (W + 2 * pad - K) / stride + 1;
  std::vector<double> out(N * F * ho * wo);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = b[f];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < K; ++ky)
              for (std::size_t kx = 0; kx < K; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                acc += x[((n * C + c) * H + iy) * W + ix] * w[((f * C + c) * K + ky) * K + kx];
              }
          out[((n * F + f) * ho + oy) * wo + ox] = acc;
        }
  return out;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<double>({2, 2}, {1, 2, 3}), ShapeError);
  Tensor<double> t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.size(), numel(t.shape()));
}

TEST(Ops, ElementwiseShapeMismatchThrows) {
  Tensor<double> a({2}, {1, 2}), b({3}, {1, 2, 3});
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(mul(a, b), ShapeError);
}

TEST(Conv2d, IdentityKernel) {
  auto y = conv2d(t4(1, 1, 2, 2, {1, 2, 3, 4}), t4(1, 1, 1, 1, {1}), Tensor<double>({1}, {0}), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(values(y), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Conv2d, OnesKernelWithPadding) {
  auto y = conv2d(t4(1, 1, 2, 2, {1, 0, 0, 0}), Tensor<double>::full({1, 1, 3, 3}, 1.0),
                  Tensor<double>({1}, {0}), 1, 1);
  EXPECT_EQ(values(y), (std::vector<double>{1, 1, 1, 1}));
}

TEST(Conv2d, ZeroWeightGivesBias) {
  Rng rng(3);
  auto x = random_tensor(rng, {2, 3, 5, 5});
  auto y = conv2d(x, Tensor<double>::zeros({2, 3, 3, 3}), Tensor<double>({2}, {0.25, -1.5}), 1, 1);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], (i / 25) % 2 == 0 ? 0.25 : -1.5);
}

TEST(Conv2d, MatchesDirectLoopOverStrideAndPaddingGrid) {
  Rng rng(17);
  for (std::size_t stride : {1, 2}) {
    for (std::size_t pad : {0, 1}) {
      for (std::size_t k : {1, 3}) {
        // Sizes chosen so the output size is integral for every combination.
        const std::size_t H = stride == 2 ? (k == 3 ? (pad ? 7 : 9) : 7) : 6;
        const std::size_t W = stride == 2 ? (k == 3 ? (pad ? 5 : 7) : 5) : 5;
        auto x = random_tensor(rng, {2, 3, H, W});
        auto w = random_tensor(rng, {4, 3, k, k});
        auto b = random_tensor(rng, {4});
        std::size_t ho = 0, wo = 0;
        const auto ref = naive_conv(x, w, b, stride, pad, ho, wo);
        auto y = conv2d(x, w, b, stride, pad);
        ASSERT_EQ(y.shape(), (Shape{2, 4, ho, wo})) << "stride " << stride << " pad " << pad;
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
      }
    }
  }
}

TEST(Conv2d, Errors) {
  Rng rng(1);
  auto x = random_tensor(rng, {1, 2, 6, 6});
  EXPECT_THROW(conv2d(x, random_tensor(rng, {1, 3, 3, 3}), random_tensor(rng, {1}), 1, 1), ShapeError);
  EXPECT_THROW(conv2d(x, random_tensor(rng, {1, 2, 3, 3}), random_tensor(rng, {1}), 2, 1), ShapeError);
  EXPECT_THROW(conv2d(x, random_tensor(rng, {2, 2, 3, 3}), random_tensor(rng, {1}), 1, 1), ShapeError);
}

TEST(Conv2d, Deterministic) {
  Rng rng(5);
  auto x = random_tensor(rng, {1, 3, 8, 8});
  auto w = random_tensor(rng, {4, 3, 3, 3});
  auto b = random_tensor(rng, {4});
  auto y1 = conv2d(x, w, b, 1, 1), y2 = conv2d(x, w, b, 1, 1);
  EXPECT_EQ(std::memcmp(y1.raw(), y2.raw(), y1.size() * sizeof(double)), 0);
}

TEST(Activation, Examples) {
  Tensor<double> x({3}, {-1, 0, 2});
  EXPECT_EQ(values(relu(x)), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(sigmoid(Tensor<double>({1}, {0.0}))[0], 0.5);
  EXPECT_NEAR(sigmoid(Tensor<double>({1}, {std::log(3.0)}))[0], 0.75, 1e-15);
  EXPECT_EQ(values(activation(x, Activation::relu)), values(relu(x)));
}

TEST(Activation, RangeAndMonotone) {
  std::vector<double> xs;
  for (int i = -400; i <= 400; ++i) xs.push_back(i * 0.05);
  Tensor<float> x({xs.size()}, std::vector<float>(xs.begin(), xs.end()));
  auto s = sigmoid(x), r = relu(x);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    // Open interval until float rounding saturates.
    if (std::abs(xs[i]) <= 15.0) {
      EXPECT_GT(s[i], 0.0f);
      EXPECT_LT(s[i], 1.0f);
    }
    EXPECT_GE(s[i], 0.0f);
    EXPECT_LE(s[i], 1.0f);
    EXPECT_GE(r[i], 0.0f);
    if (i > 0) {
      EXPECT_GE(s[i], s[i - 1]);
      EXPECT_GE(r[i], r[i - 1]);
    }
  }
}

TEST(Maxpool, Examples) {
  EXPECT_EQ(values(maxpool2x2(t4(1, 1, 2, 2, {1, 2, 3, 4}))), (std::vector<double>{4}));
  std::vector<double> ramp(16);
  for (int i = 0; i < 16; ++i) ramp[i] = i + 1;
  EXPECT_EQ(values(maxpool2x2(t4(1, 1, 4, 4, ramp))), (std::vector<double>{6, 8, 14, 16}));
}

TEST(Maxpool, TieRoutesGradientToFirstElement) {
  auto x = Tensor<double>({1, 1, 2, 2}, {5, 5, 5, 5}, true);
  auto y = maxpool2x2(x);
  EXPECT_EQ(y[0], 5.0);
  sum(y).backward();
  EXPECT_EQ(x.grad(), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Maxpool, OddSizeThrows) {
  EXPECT_THROW(maxpool2x2(Tensor<double>::zeros({1, 1, 3, 4})), ShapeError);
}

TEST(Upsample, Examples) {
  EXPECT_EQ(values(upsample2x_nearest(t4(1, 1, 1, 1, {1}))), (std::vector<double>{1, 1, 1, 1}));
  EXPECT_EQ(values(upsample2x_nearest(t4(1, 1, 1, 2, {1, 2}))),
            (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2}));
  auto x = Tensor<double>({1, 1, 1, 1}, {3}, true);
  sum(upsample2x_nearest(x)).backward();
  EXPECT_EQ(x.grad()[0], 4.0);
}

TEST(Concat, Shapes) {
  EXPECT_EQ(concat_channels(Tensor<double>::zeros({1, 3, 4, 4}), Tensor<double>::zeros({1, 3, 4, 4})).shape(),
            (Shape{1, 6, 4, 4}));
  Rng rng(2);
  auto x = random_tensor(rng, {2, 3, 4, 4});
  auto y = concat_channels(x, Tensor<double>::zeros({2, 0, 4, 4}));
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(values(y), values(x));
  EXPECT_THROW(concat_channels(x, Tensor<double>::zeros({2, 1, 4, 5})), ShapeError);
  EXPECT_THROW(concat_channels(x, Tensor<double>::zeros({1, 1, 4, 4})), ShapeError);
}

TEST(BceLoss, Examples) {
  EXPECT_NEAR(bce_loss(Tensor<double>({1}, {0.5}), Tensor<double>({1}, {1})).item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(bce_loss(Tensor<double>({2}, {0.5, 0.5}), Tensor<double>({2}, {1, 0})).item(), std::log(2.0),
              1e-12);
  // Perfect predictions are clamped to 1 - eps.
  const double l = bce_loss(Tensor<double>({4}, {1, 0, 1, 0}), Tensor<double>({4}, {1, 0, 1, 0})).item();
  EXPECT_GE(l, 0.0);
  EXPECT_LE(l, -std::log(1.0 - kProbabilityClamp) * (1 + 1e-9));
}

TEST(BceLoss, Errors) {
  EXPECT_THROW(bce_loss(Tensor<double>({2}, {0.5, 0.5}), Tensor<double>({1}, {1})), ShapeError);
  EXPECT_THROW(bce_loss(Tensor<double>({1}, {0.5}), Tensor<double>({1}, {0.5})), Error);
}

TEST(MseLoss, Examples) {
  Rng rng(4);
  auto a = random_tensor(rng, {2, 3});
  EXPECT_EQ(mse_loss(a, a).item(), 0.0);
  EXPECT_EQ(mse_loss(Tensor<double>({2}, {1, 0}), Tensor<double>({2}, {0, 0})).item(), 0.5);
  EXPECT_EQ(mse_loss(Tensor<double>({1}, {0.5}), Tensor<double>({1}, {0.25})).item(), 0.0625);
  EXPECT_THROW(mse_loss(Tensor<double>({2}, {1, 0}), Tensor<double>({1}, {0})), ShapeError);
}

TEST(MseLoss, SecondArgumentReceivesNoGradient) {
  auto a = Tensor<double>({2}, {1.0, 2.0}, true);
  auto b = Tensor<double>({2}, {0.0, 0.5}, true);
  mse_loss(a, b).backward();
  EXPECT_EQ(a.grad(), (std::vector<double>{1.0, 1.5}));
  EXPECT_EQ(b.grad(), (std::vector<double>{0.0, 0.0}));
}

TEST(Backward, Examples) {
  Rng rng(6);
  auto x = random_tensor(rng, {2, 3});
  x.set_requires_grad(true);
  sum(x).backward();
  EXPECT_EQ(x.grad(), std::vector<double>(6, 1.0));

  auto y = Tensor<double>({1}, {3.0}, true);
  mse_loss(y, Tensor<double>({1}, {0.0})).backward();
  EXPECT_EQ(y.grad()[0], 6.0);
}

TEST(Backward, Errors) {
  auto x = Tensor<double>({2}, {1, 2}, true);
  EXPECT_THROW(relu(x).backward(), ShapeError);
  EXPECT_THROW(sum(Tensor<double>({2}, {1, 2})).backward(), Error);
}

TEST(Backward, Linear) {
  Rng rng(8);
  auto x = random_tensor(rng, {1, 2, 4, 4});
  x.set_requires_grad(true);
  auto w = random_tensor(rng, {3, 2, 3, 3});
  auto b = random_tensor(rng, {3});
  auto l1 = [&] { return sum(mul(conv2d(x, w, b, 1, 1), conv2d(x, w, b, 1, 1))); };
  auto l2 = [&] { return mean(sigmoid(x)); };
  const double alpha = 0.7, beta = -2.5;
  x.zero_grad();
  l1().backward();
  const auto g1 = x.grad();
  x.zero_grad();
  l2().backward();
  const auto g2 = x.grad();
  x.zero_grad();
  add(scale(l1(), alpha), scale(l2(), beta)).backward();
  const auto g = x.grad();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double want = alpha * g1[i] + beta * g2[i];
    EXPECT_NEAR(g[i], want, 1e-12 * std::max(1.0, std::abs(want)));
  }
}

TEST(Backward, AccumulatesUntilZeroGrad) {
  auto x = Tensor<double>({2}, {1, 2}, true);
  sum(x).backward();
  sum(x).backward();
  EXPECT_EQ(x.grad(), (std::vector<double>{2, 2}));
  x.zero_grad();
  sum(x).backward();
  EXPECT_EQ(x.grad(), (std::vector<double>{1, 1}));
}

TEST(Backward, NoGradRecordsNothing) {
  auto x = Tensor<double>({2}, {1, 2}, true);
  Tensor<double> y;
  {
    NoGradGuard guard;
    y = sum(x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_THROW(y.backward(), Error);
}

TEST(Ops, NonFiniteValuesAreRejected) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_THROW(add(Tensor<double>({1}, {inf}), Tensor<double>({1}, {1})), NumericError);
  EXPECT_THROW(sum(Tensor<double>({1}, {std::nan("")})), NumericError);
}

TEST(AdamW, HandExample) {
  std::vector<double> p = {1.0};
  const std::vector<double> g = {1.0};
  OptimizerState state;
  state.config = {0.9, 0.99, 1e-8, 0.01};
  adamw_step<double>(p, g, state, 0.1);
  // m_hat = v_hat = 1.
  EXPECT_NEAR(p[0], 1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.01), 1e-15);
  EXPECT_NEAR(p[0], 0.899, 1e-6);
}

TEST(AdamW, TwoStepsMatchClosedForm) {
  std::vector<double> p = {0.5, -2.0};
  OptimizerState state;
  state.config = {0.9, 0.99, 1e-8, 0.01};
  const std::vector<std::vector<double>> grads = {{0.3, -1.0}, {-0.2, 0.4}};
  std::vector<double> ref = p, m(2, 0.0), v(2, 0.0);
  for (int t = 1; t <= 2; ++t) {
    adamw_step<double>(p, grads[t - 1], state, 0.05);
    for (int i = 0; i < 2; ++i) {
      const double gi = grads[t - 1][i];
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.99 * v[i] + 0.01 * gi * gi;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.99, t));
      ref[i] -= 0.05 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * ref[i]);
    }
  }
  EXPECT_NEAR(p[0], ref[0], 1e-14);
  EXPECT_NEAR(p[1], ref[1], 1e-14);
}

TEST(AdamW, ZeroGradientWithoutDecayIsIdentity) {
  std::vector<float> p = {1.5f, -0.25f, 3.0f};
  const auto before = p;
  const std::vector<float> g(3, 0.0f);
  OptimizerState state;
  state.config.weight_decay = 0.0;
  for (int i = 0; i < 3; ++i) adamw_step<float>(p, g, state, 0.1);
  EXPECT_EQ(p, before);
}

TEST(AdamW, DeterministicAndRejectsNegativeRate) {
  auto run = [] {
    std::vector<float> p = {0.1f, 0.2f};
    const std::vector<float> g = {0.3f, -0.7f};
    OptimizerState state;
    adamw_step<float>(p, g, state, 1e-3);
    adamw_step<float>(p, g, state, 1e-3);
    return p;
  };
  EXPECT_EQ(run(), run());
  std::vector<float> p = {1.0f};
  const std::vector<float> g = {1.0f};
  OptimizerState state;
  EXPECT_THROW(adamw_step<float>(p, g, state, -0.1), Error);
}

TEST(LrSchedule, Examples) {
  LrSchedule s{LrKind::linear, 1000, 2000, 1e-6, 1e-4};
  EXPECT_EQ(lr_at(s, 0), 1e-6);
  EXPECT_EQ(lr_at(s, 1000), 1e-4);
  EXPECT_NEAR(lr_at(s, 1500), 5e-5, 1e-18);
  EXPECT_EQ(lr_at(s, 2000), 0.0);
  EXPECT_THROW(lr_at(s, 2001), Error);
}

TEST(LrSchedule, ContinuousAtWarmupEndAndZeroAtEnd) {
  for (LrKind kind : {LrKind::linear, LrKind::cosine}) {
    LrSchedule s{kind, 100, 400, 1e-6, 1e-3};
    EXPECT_NEAR(lr_at(s, 100), lr_at(s, 101), 1e-3 * 0.02);
    EXPECT_NEAR(lr_at(s, 99), lr_at(s, 100), 1e-3 * 0.02);
    EXPECT_NEAR(lr_at(s, 400), 0.0, 1e-18);
    for (std::size_t i = 101; i <= 400; ++i) EXPECT_LE(lr_at(s, i), lr_at(s, i - 1));
  }
  LrSchedule c{LrKind::cosine, 100, 300, 1e-6, 1e-3};
  EXPECT_NEAR(lr_at(c, 200), 5e-4, 1e-15);
}

TEST(LrSchedule, Validation) {
  EXPECT_EQ(lr_at(LrSchedule{LrKind::linear, 0, 10, 1e-6, 1e-3}, 0), 1e-3);
  EXPECT_THROW(lr_at(LrSchedule{LrKind::linear, 10, 10, 1e-6, 1e-3}, 0), ConfigError);
  EXPECT_THROW(parse_lr_kind("step"), ConfigError);
}
