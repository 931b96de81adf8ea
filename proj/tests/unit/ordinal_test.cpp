#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ordgaze/ordinal.hpp"

namespace ordgaze {
namespace {

using Vec = std::vector<double>;

OrdinalConfig unit4() { return {4, 1.0, 0.0}; }

TEST(Encode, Examples) {
  EXPECT_EQ(encode(2.5, unit4()), (Vec{1, 1, 0, 0}));
  EXPECT_EQ(encode(0.0, unit4()), (Vec{0, 0, 0, 0}));
  EXPECT_EQ(encode(4.0, unit4()), (Vec{1, 1, 1, 1}));
  EXPECT_EQ(encode(4.99, unit4()), (Vec{1, 1, 1, 1}));
}

TEST(Encode, RangeMinOffset) {
  OrdinalConfig c{4, 0.5, 10.0};
  EXPECT_EQ(encode(11.2, c), (Vec{1, 1, 0, 0}));
}

TEST(Encode, OutOfRangeIsClamped) {
  EXPECT_EQ(encode(-3.0, unit4()), (Vec{0, 0, 0, 0}));
  EXPECT_EQ(encode(100.0, unit4()), (Vec{1, 1, 1, 1}));
}

TEST(Encode, NonFiniteThrows) {
  EXPECT_THROW(encode(std::nan(""), unit4()), std::invalid_argument);
  EXPECT_THROW(encode(INFINITY, unit4()), std::invalid_argument);
}

TEST(Encode, HardLabelsAreMonotonePrefixes) {
  std::mt19937_64 rng(1);
  auto cfg = OrdinalConfig::for_range(72, 0.0, 10.0);
  std::uniform_real_distribution<double> u(-1.0, 11.0);
  for (int i = 0; i < 10000; ++i) {
    auto bits = encode(u(rng), cfg);
    for (std::size_t b = 0; b + 1 < bits.size(); ++b) ASSERT_GE(bits[b], bits[b + 1]);
    for (double v : bits) ASSERT_TRUE(v == 0.0 || v == 1.0);
  }
}

TEST(Config, ForRangeSplitsIntoBPlusOneIntervals) {
  auto c = OrdinalConfig::for_range(72, 0.0, 10.0);
  EXPECT_NEAR(c.bin_size, 10.0 / 73.0, 1e-15);
  EXPECT_NEAR(c.range_max(), 10.0, 1e-12);
  EXPECT_THROW(OrdinalConfig::for_range(1, 0.0, 1.0), std::invalid_argument);
  EXPECT_THROW(OrdinalConfig::for_range(4, 1.0, 1.0), std::invalid_argument);
}

TEST(Decode, Examples) {
  Vec probs{0.9, 0.8, 0.3, 0.1};
  EXPECT_DOUBLE_EQ(decode<double>(probs, unit4()), 2.5);
  Vec none{0.1, 0.2, 0.49, 0.0};
  EXPECT_DOUBLE_EQ(decode<double>(none, unit4()), 0.5);
  Vec boundary{0.5, 0.5, 0.5, 0.5};
  EXPECT_DOUBLE_EQ(decode<double>(boundary, unit4()), 4.5);
}

TEST(Decode, RoundTripSweepStaysWithinBin) {
  for (auto cfg : {OrdinalConfig::for_range(72, 0.0, 10.0), OrdinalConfig::for_range(98, 0.0, 14.0),
                   OrdinalConfig{10, 0.7, -2.0}}) {
    const double step = cfg.bin_size / 10.0;
    std::size_t n = 0;
    for (double gt = cfg.range_min; gt < cfg.range_max(); gt += step, ++n) {
      auto bits = encode(gt, cfg);
      ASSERT_LE(std::abs(decode<double>(bits, cfg) - gt), cfg.bin_size) << gt;
    }
    EXPECT_GE(n, 10 * (cfg.bins + 1));
  }
}

TEST(Decode, MonotoneInEachComponent) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  auto cfg = OrdinalConfig{8, 1.0, 0.0};
  for (int trial = 0; trial < 500; ++trial) {
    Vec p(8);
    for (auto& v : p) v = u(rng);
    const double base = decode<double>(p, cfg);
    const std::size_t b = trial % 8;
    Vec q = p;
    q[b] = std::min(1.0, p[b] + u(rng));
    EXPECT_GE(decode<double>(q, cfg), base);
  }
}

TEST(Loss, PerfectPredictionIsNearZero) {
  Vec target{1, 1, 1, 0, 0, 0};
  EXPECT_LE(ordinal_loss_value<double>(target, target), 6 * 1e-6);
}

TEST(Loss, HalfProbabilitiesGiveBLn2) {
  Vec target{1, 1, 0, 0, 0};
  Vec half(5, 0.5);
  EXPECT_NEAR(ordinal_loss_value<double>(half, target), 5 * std::log(2.0), 1e-12);
}

TEST(Loss, LengthMismatchThrows) {
  Vec a{0.5, 0.5}, b{1, 0, 0};
  EXPECT_THROW(ordinal_loss_value<double>(a, b), ShapeError);
}

TEST(Loss, AveragesOverBatch) {
  auto p = Tensor<double>::from({2, 3}, {0.5, 0.5, 0.5, 0.9, 0.1, 0.1});
  Vec t{1, 0, 0, 1, 0, 0};
  const double row0 = 3 * std::log(2.0);
  const double row1 = -3 * std::log(0.9);
  EXPECT_NEAR(ordinal_loss<double>(p, t).item(), 0.5 * (row0 + row1), 1e-12);
}

// Soft predictions placed at count c + s: the loss must grow strictly with |s|.
TEST(Loss, GrowsWithDistanceFromTarget) {
  const std::size_t B = 10;
  auto soft = [&](std::size_t count) {
    Vec p(B);
    for (std::size_t b = 0; b < B; ++b) p[b] = b < count ? 0.9 : 0.1;
    return p;
  };
  for (std::size_t c = 0; c <= B; ++c) {
    Vec target(B);
    for (std::size_t b = 0; b < B; ++b) target[b] = b < c ? 1.0 : 0.0;
    for (int dir : {-1, 1}) {
      double prev = -1;
      for (int s = 0;; ++s) {
        const long count = static_cast<long>(c) + dir * s;
        if (count < 0 || count > static_cast<long>(B)) break;
        const double l = ordinal_loss_value<double>(soft(static_cast<std::size_t>(count)), target);
        EXPECT_GT(l, prev) << "c=" << c << " shift=" << dir * s;
        prev = l;
      }
    }
  }
}

TEST(Loss, NonNegativeAndZeroOnlyAtTarget) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    Vec p(6), t(6);
    for (auto& v : p) v = u(rng);
    for (auto& v : t) v = u(rng) < 0.5 ? 0.0 : 1.0;
    const double l = ordinal_loss_value<double>(p, t);
    EXPECT_GE(l, 0.0);
    EXPECT_GT(l, 6 * 1e-6);
  }
}

TEST(Mask, Examples) {
  Vec p(10, 0.0);
  for (int b = 0; b < 5; ++b) p[b] = 0.9;
  auto m = center_bin_mask<double>(p, 2);
  EXPECT_EQ(m, (std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1, 1, 0, 0, 0}));
  Vec zero(10, 0.0);
  EXPECT_EQ(center_bin_mask<double>(zero, 2), (std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0, 0, 0, 0, 0}));
  Vec full(10, 1.0);
  EXPECT_EQ(center_bin_mask<double>(full, 2), (std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 1, 1, 1, 1}));
  EXPECT_EQ(center_bin_mask<double>(p, 5), std::vector<std::uint8_t>(10, 1));
  EXPECT_THROW(center_bin_mask<double>(p, 0), std::invalid_argument);
  EXPECT_THROW(center_bin_mask<double>(p, OrdinalConfig{8, 1.0, 0.0}, 2), ShapeError);
}

TEST(Mask, WidthIsMinOf2kAndB) {
  for (std::size_t count = 0; count <= 6; ++count)
    for (std::size_t k = 1; k <= 5; ++k) {
      Vec p(6, 0.0);
      for (std::size_t b = 0; b < count; ++b) p[b] = 1.0;
      auto m = center_bin_mask<double>(p, k);
      std::size_t on = 0;
      for (auto v : m) on += v;
      EXPECT_EQ(on, std::min<std::size_t>(2 * k, 6));
    }
}

TEST(Mask, FullWindowEqualsFullLoss) {
  auto p = Tensor<double>::from({1, 6}, {0.9, 0.7, 0.4, 0.3, 0.2, 0.05});
  Vec t{1, 1, 1, 0, 0, 0};
  auto mask = center_bin_mask<double>(p.values(), 3);
  EXPECT_DOUBLE_EQ(ordinal_loss<double>(p, t, mask).item(), ordinal_loss<double>(p, t).item());
}

TEST(Mask, MaskedOutBinsHaveZeroLogitGradient) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0, 2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t B = 12;
    Vec z0(B);
    for (auto& v : z0) v = g(rng);
    Vec t = encode((trial % 13) * 1.0, OrdinalConfig{B, 1.0, 0.0});
    auto z = Tensor<double>::from({1, B}, z0, true);
    std::vector<std::uint8_t> mask;
    {
      NoGradGuard ng;
      mask = center_bin_mask<double>(ops::sigmoid(z).values(), 2);
    }
    auto loss_at = [&](const Vec& zv) {
      NoGradGuard ng;
      return ordinal_loss<double>(ops::sigmoid(Tensor<double>::from({1, B}, zv)), t, mask).item();
    };
    backward(ordinal_loss<double>(ops::sigmoid(z), t, mask));
    for (std::size_t b = 0; b < B; ++b) {
      Vec zp = z0, zm = z0;
      zp[b] += 1e-5;
      zm[b] -= 1e-5;
      const double fd = (loss_at(zp) - loss_at(zm)) / 2e-5;
      if (!mask[b]) {
        EXPECT_EQ(z.grad()[b], 0.0);
        EXPECT_LE(std::abs(fd), 1e-7);
      } else {
        EXPECT_NEAR(z.grad()[b], fd, 1e-6);
      }
    }
  }
}

}  // namespace
}  // namespace ordgaze
