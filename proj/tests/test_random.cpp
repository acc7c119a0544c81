#include <array>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "partctx/random.hpp"

using partctx::Rng;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    differs |= x != c.next();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, SplitStreamsDiffer) {
  std::set<std::uint64_t> firsts;
  for (std::uint64_t s = 0; s < 64; ++s) firsts.insert(Rng::split(7, s).next());
  EXPECT_EQ(firsts.size(), 64u);
  EXPECT_EQ(Rng::split(7, 3).next(), Rng::split(7, 3).next());
}

TEST(Rng, UniformRange) {
  Rng r(1);
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / 100000, 0.5, 0.01);
}

TEST(Rng, IndexIsUniform) {
  Rng r(2);
  constexpr int n = 7, draws = 70000;
  std::array<int, n> counts{};
  for (int i = 0; i < draws; ++i) ++counts[r.index(n)];
  double chi2 = 0.0;
  const double expect = static_cast<double>(draws) / n;
  for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
  EXPECT_LT(chi2, 22.46);  // chi-square 6 dof, p = 0.001
}

TEST(Rng, NormalMoments) {
  Rng r(3);
  double s = 0.0, s2 = 0.0;
  constexpr int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}
