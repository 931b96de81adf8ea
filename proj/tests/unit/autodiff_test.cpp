#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ordgaze/grad_check.hpp"
#include "ordgaze/ops.hpp"
#include "ordgaze/tensor.hpp"

namespace ordgaze {
namespace {

using TensorD = Tensor<double>;

TensorD random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true,
                      double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return TensorD::from(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from 0 so a finite-difference step never crosses the
// relu kink.
TensorD away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return TensorD::from(std::move(shape), std::move(v), true);
}

TEST(Forward, ReluClampsNegatives) {
  auto x = TensorD::from({3}, {-1, 0, 2});
  auto y = ops::relu(x);
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()),
            (std::vector<double>{0, 0, 2}));
}

TEST(Forward, SigmoidOfZeroIsHalf) {
  EXPECT_DOUBLE_EQ(ops::sigmoid(TensorD::scalar(0.0)).item(), 0.5);
}

TEST(Forward, SigmoidIsStableForLargeMagnitudes) {
  auto y = ops::sigmoid(TensorD::from({2}, {-800.0, 800.0}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 1.0);
}

TEST(Forward, DeltaKernelConvReturnsCenter) {
  auto x = TensorD::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto w = TensorD::from({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0});
  auto y = ops::conv2d(x, w, {1, 0});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 5.0);
}

TEST(Forward, ConvMatchesDirectLoop) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 3, 7, 6}, rng, false);
  auto w = random_tensor({4, 3, 3, 3}, rng, false);
  const ops::Conv2dParams p{2, 1};
  auto y = ops::conv2d(x, w, p);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 4, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t oy = 0; oy < 4; ++oy)
        for (std::size_t ox = 0; ox < 3; ++ox) {
          double acc = 0;
          for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < 3; ++i)
              for (std::size_t j = 0; j < 3; ++j) {
                const long iy = static_cast<long>(oy * 2 + i) - 1;
                const long ix = static_cast<long>(ox * 2 + j) - 1;
                if (iy < 0 || iy >= 7 || ix < 0 || ix >= 6) continue;
                acc += x[((n * 3 + c) * 7 + iy) * 6 + ix] * w[((o * 3 + c) * 3 + i) * 3 + j];
              }
          EXPECT_NEAR(y[((n * 4 + o) * 4 + oy) * 3 + ox], acc, 1e-12);
        }
}

TEST(Forward, ShapeMismatchNamesOpAndDims) {
  auto a = TensorD::zeros({2, 3});
  auto b = TensorD::zeros({3, 2});
  try {
    ops::add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.op(), "add");
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[3x2]"), std::string::npos);
  }
  EXPECT_THROW(ops::linear(TensorD::zeros({2, 3}), TensorD::zeros({4, 5})), ShapeError);
  EXPECT_THROW(ops::conv2d(TensorD::zeros({1, 2, 4, 4}), TensorD::zeros({1, 3, 3, 3})),
               ShapeError);
}

TEST(Backward, SquareSum) {
  auto w = TensorD::from({2}, {1, 2}, true);
  backward(ops::sum(ops::mul(w, w)));
  EXPECT_DOUBLE_EQ(w.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 4.0);
}

TEST(Backward, ConstantLossGivesZeroGrad) {
  auto w = TensorD::from({2}, {1, 2}, true);
  auto c = TensorD::from({2}, {3, 4}, false);
  // 0 * w + sum(c): the dependence on w is identically zero.
  backward(ops::add(ops::sum(ops::scale(w, 0.0)), ops::sum(c)));
  EXPECT_DOUBLE_EQ(w.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 0.0);
}

TEST(Backward, NonScalarLossIsRejected) {
  auto w = TensorD::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(ops::mul(w, w)), ShapeError);
}

TEST(Backward, DetachedGraphIsRejected) {
  auto w = TensorD::from({2}, {1, 2}, false);
  EXPECT_THROW(backward(ops::sum(w)), GraphError);
  auto v = TensorD::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(ops::sum(v.detach())), GraphError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto w = TensorD::from({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = ops::sum(ops::mul(w, w));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, TwoLayerNetMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int instance = 0; instance < 10; ++instance) {
    auto x = random_tensor({4, 5}, rng, false);
    auto w1 = away_from_zero({6, 5}, rng);
    auto b1 = random_tensor({6}, rng);
    auto w2 = random_tensor({3, 6}, rng);
    auto b2 = random_tensor({3}, rng);
    auto report = grad_check(
        "two_layer", {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}}, [&] {
          auto h = ops::relu(ops::linear(x, w1, b1));
          return ops::mean(ops::sigmoid(ops::linear(h, w2, b2)));
        });
    EXPECT_TRUE(report.passed()) << report.summary();
    EXPECT_LE(report.max_rel_error(), 1e-5);
  }
}

TEST(Backward, LinearityOfSummedLosses) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({3, 4}, rng, false);
  auto w = random_tensor({2, 4}, rng);
  auto l1 = [&] { return ops::sum(ops::sigmoid(ops::linear(x, w))); };
  auto l2 = [&] { return ops::mean(ops::mul(ops::linear(x, w), ops::linear(x, w))); };
  backward(ops::add(l1(), l2()));
  std::vector<double> joint(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(l1());
  backward(l2());
  for (std::size_t i = 0; i < joint.size(); ++i)
    EXPECT_NEAR(w.grad()[i], joint[i], 1e-12 * std::max(1.0, std::abs(joint[i])));
}

TEST(Backward, GradShapeMatchesValueShape) {
  std::mt19937_64 rng(8);
  auto x = random_tensor({2, 3, 5, 5}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng);
  backward(ops::sum(ops::conv2d(x, w, {1, 1})));
  EXPECT_EQ(x.grad().size(), x.numel());
  EXPECT_EQ(w.grad().size(), w.numel());
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs) {
  std::mt19937_64 a(99), b(99);
  auto xa = random_tensor({2, 3, 8, 8}, a, false);
  auto wa = random_tensor({5, 3, 3, 3}, a, false);
  auto xb = random_tensor({2, 3, 8, 8}, b, false);
  auto wb = random_tensor({5, 3, 3, 3}, b, false);
  auto ya = ops::conv2d(xa, wa, {2, 1});
  auto yb = ops::conv2d(xb, wb, {2, 1});
  ASSERT_EQ(ya.numel(), yb.numel());
  for (std::size_t i = 0; i < ya.numel(); ++i) EXPECT_EQ(ya[i], yb[i]);
}

// A square op whose backward rule is deliberately wrong (x instead of 2x).
TensorD broken_square(const TensorD& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * a[i];
  return make_result<double>("broken_square", a.shape(), std::move(out), {a},
                             [](Node<double>& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += self.grad[i] * self.inputs[0]->value[i];
                             });
}

TEST(GradCheck, CorruptedRuleFailsAndNamesOp) {
  auto w = TensorD::from({3}, {0.5, -1.0, 2.0}, true);
  auto report = grad_check("corrupted", {{"w", w}}, [&] { return ops::sum(broken_square(w)); });
  EXPECT_FALSE(report.passed());
  EXPECT_NE(report.summary().find("broken_square"), std::string::npos);
  EXPECT_NE(report.summary().find("FAIL"), std::string::npos);
}

TEST(GradCheck, NonFiniteGradientIsReported) {
  auto w = TensorD::from({1}, {0.0}, true);
  auto report = grad_check("nonfinite", {{"w", w}}, [&] {
    std::vector<double> out{std::sqrt(std::abs(w[0]))};
    return make_result<double>("sqrt_abs", {1}, std::move(out), {w}, [](Node<double>& self) {
      self.inputs[0]->ensure_grad()[0] += self.grad[0] / 0.0;
    });
  });
  EXPECT_FALSE(report.passed());
  EXPECT_FALSE(report.entries[0].finite);
}

TEST(GradCheck, LinearLayer) {
  std::mt19937_64 rng(21);
  auto x = random_tensor({5, 7}, rng);
  auto w = random_tensor({3, 7}, rng);
  auto b = random_tensor({3}, rng);
  auto report = grad_check("linear", {{"x", x}, {"w", w}, {"b", b}},
                           [&] { return ops::sum(ops::linear(x, w, b)); });
  EXPECT_TRUE(report.passed()) << report.summary();
}

TEST(GradCheck, BatchNormTrainingMode) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({4, 3, 3, 3}, rng);
  auto g = random_tensor({3}, rng, true, 0.5, 1.5);
  auto b = random_tensor({3}, rng);
  auto proj = random_tensor({4, 3, 3, 3}, rng, false);
  ops::BatchNormState<double> state(3);
  auto report = grad_check("batch_norm_train", {{"x", x}, {"scale", g}, {"shift", b}}, [&] {
    return ops::sum(ops::mul(ops::batch_norm(x, g, b, state, {true}), proj));
  }, {.tolerance = 1e-4});
  EXPECT_TRUE(report.passed()) << report.summary();
}

}  // namespace
}  // namespace ordgaze
