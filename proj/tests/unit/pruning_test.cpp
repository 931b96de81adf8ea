#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "ordgaze/pruning.hpp"

namespace ordgaze {
namespace {

using Vec = std::vector<double>;

TEST(Scores, PairExamples) {
  Vec identical{1, 2, 3, 1, 2, 3};
  Vec orthogonal{1, 0, 0, 0, 1, 0};
  Vec anti{1, 2, 3, -1, -2, -3};
  EXPECT_EQ(cosine_scores<double>(identical, 2), (Vec{0.5, 0.5}));
  EXPECT_EQ(cosine_scores<double>(orthogonal, 2), (Vec{0.0, 0.0}));
  auto a = cosine_scores<double>(anti, 2);
  EXPECT_NEAR(a[0], -0.5, 1e-15);
  EXPECT_NEAR(a[1], -0.5, 1e-15);
  auto r = cosine_scores<double>(anti, 2, PruneMetric::Absolute);
  EXPECT_NEAR(r[0], 0.5, 1e-15);
  EXPECT_NEAR(cosine_scores<double>(identical, 2, PruneMetric::Absolute)[0], 0.5, 1e-15);
  EXPECT_EQ(cosine_scores<double>(orthogonal, 2, PruneMetric::Absolute), (Vec{0.0, 0.0}));
}

TEST(Scores, ZeroNormFilterScoresOne) {
  Vec w{0, 0, 0, 1, 2, 3, 3, 2, 1};
  auto s = cosine_scores<double>(w, 3);
  EXPECT_EQ(s[0], 1.0);
  EXPECT_NEAR(s[1], (10.0 / 14.0) / 3.0, 1e-15);
}

TEST(Scores, Errors) {
  Vec one{1, 2, 3};
  EXPECT_THROW(cosine_scores<double>(one, 1), std::invalid_argument);
  Vec odd{1, 2, 3};
  EXPECT_THROW(cosine_scores<double>(odd, 2), ShapeError);
}

TEST(Scores, BoundedAndInvariant) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0, 1);
  std::uniform_real_distribution<double> c(0.1, 10);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + trial % 9, d = 1 + trial % 12;
    Vec w(n * d);
    for (auto& v : w) v = g(rng);
    auto s = cosine_scores<double>(w, n);
    for (double v : s) EXPECT_LE(std::abs(v), 1 + 1e-9);
    // permutation equivariance
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Vec wp(n * d), ws = w;
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(w.begin() + perm[i] * d, d, wp.begin() + i * d);
    auto sp = cosine_scores<double>(wp, n);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(sp[i], s[perm[i]], 1e-12);
    // positive scaling
    for (std::size_t i = 0; i < n; ++i) {
      const double k = c(rng);
      for (std::size_t j = 0; j < d; ++j) ws[i * d + j] *= k;
    }
    auto ss = cosine_scores<double>(ws, n);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(ss[i], s[i], 1e-12);
  }
}

TEST(Select, SingleLayerQuota) {
  Vec s{0.1, 0.9, 0.3, 0.05, 0.8, 0.2, 0.0, -0.3, 0.4, 0.6};
  auto sel = select_prune_set({s}, 0.2, 0.5);
  EXPECT_EQ(sel.per_layer[0], (std::vector<std::size_t>{1, 4}));
  EXPECT_EQ(sel.quota, 2u);
  EXPECT_TRUE(select_prune_set({s}, 0.0, 0.5).empty());
}

TEST(Select, CapDefersQuotaToOtherLayer) {
  std::vector<Vec> s{{0.9, 0.9, 0.9, 0.9}, {0.1, 0.5, 0.3, 0.2}};
  auto sel = select_prune_set(s, 0.5, 0.5);
  EXPECT_EQ(sel.per_layer[0], (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(sel.per_layer[1], (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(sel.shortfall(), 0u);
}

TEST(Select, ShortfallWhenCapsBind) {
  std::vector<Vec> s{{0.9, 0.8, 0.7, 0.6}};
  auto sel = select_prune_set(s, 1.0, 0.5);
  EXPECT_EQ(sel.selected.size(), 2u);
  EXPECT_EQ(sel.shortfall(), 2u);
}

TEST(Select, FloorIsRobustToRounding) {
  EXPECT_EQ(floor_fraction(0.29, 100), 29u);
  EXPECT_EQ(floor_fraction(0.2, 10), 2u);
  EXPECT_EQ(floor_fraction(0.5, 7), 3u);
}

// Independent oracle: repeatedly take the best remaining admissible filter.
std::vector<std::pair<std::size_t, std::size_t>> oracle(const std::vector<Vec>& s, double p, double pm) {
  std::size_t total = 0;
  for (const auto& l : s) total += l.size();
  const std::size_t quota = static_cast<std::size_t>(std::floor(p * total + 1e-9));
  std::vector<std::size_t> used(s.size(), 0);
  std::vector<std::vector<bool>> taken(s.size());
  for (std::size_t l = 0; l < s.size(); ++l) taken[l].assign(s[l].size(), false);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  while (out.size() < quota) {
    bool found = false;
    std::size_t bl = 0, bf = 0;
    for (std::size_t l = 0; l < s.size(); ++l) {
      if (used[l] >= static_cast<std::size_t>(std::floor(pm * s[l].size() + 1e-9))) continue;
      for (std::size_t f = 0; f < s[l].size(); ++f) {
        if (taken[l][f]) continue;
        if (!found || s[l][f] > s[bl][bf]) {
          found = true;
          bl = l;
          bf = f;
        }
      }
    }
    if (!found) break;
    taken[bl][bf] = true;
    ++used[bl];
    out.emplace_back(bl, bf);
  }
  std::sort(out.begin(), out.end());
  return out;
}

TEST(Select, MatchesBruteForceOracle) {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> layers(1, 6), coarse(0, 4);
  std::uniform_real_distribution<double> u(-1, 1), frac(0, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    const int nl = layers(rng);
    std::vector<Vec> s(nl);
    std::size_t budget = 200;
    for (int l = 0; l < nl; ++l) {
      std::uniform_int_distribution<std::size_t> sz(2, std::max<std::size_t>(2, budget / (nl - l)));
      const std::size_t n = std::min(budget, sz(rng));
      budget -= n;
      for (std::size_t f = 0; f < n; ++f)
        s[l].push_back(trial % 3 == 0 ? coarse(rng) * 0.25 : u(rng));  // ties on every third trial
    }
    const double p = frac(rng), pm = frac(rng);
    auto sel = select_prune_set(s, p, pm);
    auto got = sel.selected;
    std::sort(got.begin(), got.end());
    ASSERT_EQ(got, oracle(s, p, pm)) << "trial " << trial;
    for (std::size_t l = 0; l < s.size(); ++l)
      ASSERT_LE(sel.per_layer[l].size(), static_cast<std::size_t>(std::floor(pm * s[l].size() + 1e-9)));
  }
}

TEST(Select, SignedAndAbsoluteDifferOnAntiCorrelatedLayers) {
  // Layer 0: two anti-parallel pairs; layer 1: mildly redundant positive filters.
  Vec anti{1, 0, 0, -1, 0, 0, 0, 1, 0, 0, -1, 0};
  Vec pos{1.1, 0.1, 0.1, 0.1, 0.1, 1.1, 0.1, 0.1, 0.1, 0.1, 1.1, 0.1, 0.1, 0.1, 0.1, 1.1};
  std::vector<Vec> sgn{cosine_scores<double>(anti, 4), cosine_scores<double>(pos, 4)};
  std::vector<Vec> abs{cosine_scores<double>(anti, 4, PruneMetric::Absolute),
                       cosine_scores<double>(pos, 4, PruneMetric::Absolute)};
  auto a = select_prune_set(sgn, 0.25, 0.5);
  auto b = select_prune_set(abs, 0.25, 0.5);
  EXPECT_TRUE(a.per_layer[0].empty());
  EXPECT_EQ(a.per_layer[1].size(), 2u);
  EXPECT_EQ(b.per_layer[0].size(), 2u);
  EXPECT_TRUE(b.per_layer[1].empty());
  EXPECT_NE(a.selected, b.selected);
  for (double v : sgn[0]) EXPECT_NEAR(v, -0.25, 1e-15);
  for (double v : abs[0]) EXPECT_NEAR(v, 0.25, 1e-15);
}

}  // namespace
}  // namespace ordgaze
