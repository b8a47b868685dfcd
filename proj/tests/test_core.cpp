#include "stable_dml/core.hpp"
#include "stable_dml/parallel.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

using namespace sdml;

TEST(DeriveSeed, EmptyPathIsIdentity) {
  EXPECT_EQ(derive_seed(SeedSpec{0, {}}), 0u);
  EXPECT_EQ(derive_seed(SeedSpec{12345, {}}), 12345u);
}

TEST(DeriveSeed, Deterministic) {
  const SeedSpec s{7, {{"rep", 3}}};
  EXPECT_EQ(derive_seed(s), derive_seed(s));
}

// Independent re-implementation of the documented mixing function.
namespace oracle {
std::uint64_t splitmix_finalize(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
std::uint64_t fnv(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}
std::uint64_t step(std::uint64_t seed, const std::string& tag, std::uint64_t index) {
  const std::uint64_t h = splitmix_finalize(seed ^ splitmix_finalize(fnv(tag) + 0x9E3779B97F4A7C15ULL));
  return splitmix_finalize(h ^ (index * 0xD1B54A32D192ED03ULL + 0x632BE59BD9B4E019ULL));
}
}  // namespace oracle

TEST(DeriveSeed, MatchesDocumentedHash) {
  EXPECT_EQ(derive_seed(SeedSpec{7, {{"rep", 3}}}), oracle::step(7, "rep", 3));
  EXPECT_EQ(derive_seed(SeedSpec{7, {{"rep", 3}, {"bag", 9}}}), oracle::step(oracle::step(7, "rep", 3), "bag", 9));
  EXPECT_NE(derive_seed(SeedSpec{7, {{"rep", 3}}}), derive_seed(SeedSpec{7, {{"rep", 4}}}));
}

TEST(DeriveSeed, DistinctPathsDistinctStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    seen.insert(derive_seed(SeedSpec{7, {{"rep", i}}}));
    seen.insert(derive_seed(SeedSpec{7, {{"bag", i}}}));
  }
  EXPECT_EQ(seen.size(), 2000u);
}

TEST(Rng, ChildMatchesDeriveSeed) {
  const Rng r(99);
  EXPECT_EQ(r.child("rep", 5).seed(), derive_seed(SeedSpec{99, {{"rep", 5}}}));
  EXPECT_EQ(r.child("a", 1).child("b", 2).seed(), derive_seed(SeedSpec{99, {{"a", 1}, {"b", 2}}}));
}

TEST(Rng, ChildIndependentOfParentConsumption) {
  Rng a(3), b(3);
  for (int i = 0; i < 100; ++i) a.next_u64();
  EXPECT_EQ(a.child("x", 1).seed(), b.child("x", 1).seed());
}

TEST(Rng, UniformAndNormalMoments) {
  Rng r(11);
  const int N = 200000;
  double su = 0, sn = 0, sn2 = 0;
  for (int i = 0; i < N; ++i) {
    const double u = r.uniform();
    ASSERT_GT(u, 0.0);
    ASSERT_LE(u, 1.0);
    su += u;
    const double z = r.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / N, 0.5, 4 * std::sqrt(1.0 / 12 / N));
  EXPECT_NEAR(sn / N, 0.0, 4 / std::sqrt(N));
  EXPECT_NEAR(sn2 / N, 1.0, 4 * std::sqrt(2.0 / N));
}

TEST(Rng, BelowInRange) {
  Rng r(5);
  for (int i = 0; i < 10000; ++i) {
    const auto v = r.below(7);
    ASSERT_LT(v, 7u);
  }
}

TEST(Subsample, FullSampleIsPermutation) {
  Rng r(1);
  auto idx = subsample_without_replacement(5, 5, r);
  std::sort(idx.begin(), idx.end());
  EXPECT_EQ(idx, (std::vector<Index>{0, 1, 2, 3, 4}));
}

TEST(Subsample, SingleDrawFrequencies) {
  // Binomial oracle: each of 3 indices with probability 1/3.
  const int N = 30000;
  std::array<int, 3> counts{};
  Rng r(2);
  for (int i = 0; i < N; ++i) ++counts[static_cast<std::size_t>(subsample_without_replacement(3, 1, r)[0])];
  const double sigma = std::sqrt((1.0 / 3) * (2.0 / 3) / N);
  for (int c : counts) EXPECT_NEAR(static_cast<double>(c) / N, 1.0 / 3, 3 * sigma);
}

TEST(Subsample, TwoPointsCoverBothOutcomes) {
  std::set<Index> seen;
  for (std::uint64_t s = 0; s < 64 && seen.size() < 2; ++s) {
    Rng r(s);
    seen.insert(subsample_without_replacement(2, 1, r)[0]);
  }
  EXPECT_EQ(seen, (std::set<Index>{0, 1}));
}

TEST(Subsample, DistinctIndicesAndDeterministicDrawCount) {
  Rng a(8), b(8);
  const auto idx = subsample_without_replacement(50, 20, a);
  std::set<Index> uniq(idx.begin(), idx.end());
  EXPECT_EQ(uniq.size(), 20u);
  for (Index i : idx) {
    EXPECT_GE(i, 0);
    EXPECT_LT(i, 50);
  }
  // m draws, one per Fisher-Yates step.
  for (int i = 0; i < 20; ++i) b.next_u64();
  EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Subsample, InvalidSizes) {
  Rng r(0);
  EXPECT_THROW(subsample_without_replacement(3, 0, r), std::invalid_argument);
  EXPECT_THROW(subsample_without_replacement(3, 4, r), std::invalid_argument);
}

TEST(Subsample, ChiSquareUniformOverPairs) {
  const int N = 60000;
  std::map<std::pair<Index, Index>, int> counts;
  Rng r(123);
  for (int i = 0; i < N; ++i) {
    auto s = subsample_without_replacement(4, 2, r);
    std::sort(s.begin(), s.end());
    ++counts[{s[0], s[1]}];
  }
  ASSERT_EQ(counts.size(), 6u);
  const double expected = N / 6.0;
  double chi2 = 0;
  for (const auto& [k, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
  const double crit = boost::math::quantile(boost::math::chi_squared_distribution<double>(5), 0.999);
  EXPECT_LT(chi2, crit);
}

TEST(Folds, Balanced) {
  Rng r(4);
  const auto f4 = make_folds(4, 2, r);
  EXPECT_EQ(f4.sizes(), (std::vector<Index>{2, 2}));
  const auto f5 = make_folds(5, 2, r);
  auto s = f5.sizes();
  std::sort(s.begin(), s.end());
  EXPECT_EQ(s, (std::vector<Index>{2, 3}));
  const auto f10 = make_folds(10, 3, r);
  for (Index v : f10.sizes()) {
    EXPECT_GE(v, 3);
    EXPECT_LE(v, 4);
  }
}

TEST(Folds, DeterministicAndPartition) {
  Rng a(77), b(77);
  const auto fa = make_folds(100, 2, a);
  const auto fb = make_folds(100, 2, b);
  EXPECT_EQ(fa.assignment, fb.assignment);
  auto m0 = fa.members(0), c0 = fa.complement(0);
  EXPECT_EQ(m0.size() + c0.size(), 100u);
  EXPECT_EQ(c0, fa.members(1));
}

TEST(Folds, InvalidK) {
  Rng r(0);
  EXPECT_THROW(make_folds(5, 1, r), std::invalid_argument);
  EXPECT_THROW(make_folds(5, 6, r), std::invalid_argument);
}

TEST(Dataset, Validation) {
  Dataset d;
  d.X = Eigen::MatrixXd::Zero(3, 1);
  d.T = Eigen::MatrixXd::Zero(3, 1);
  d.Y = Eigen::VectorXd::Zero(3);
  EXPECT_NO_THROW(d.validate());
  d.Y(1) = std::nan("");
  EXPECT_THROW(d.validate(), std::invalid_argument);
  d.Y = Eigen::VectorXd::Zero(2);
  EXPECT_THROW(d.validate(), std::invalid_argument);
  Dataset one;
  one.X = Eigen::MatrixXd::Zero(1, 1);
  one.T = Eigen::MatrixXd::Zero(1, 1);
  one.Y = Eigen::VectorXd::Zero(1);
  EXPECT_THROW(one.validate(), std::invalid_argument);
}

TEST(Parallel, ResultsIndependentOfThreads) {
  std::vector<std::uint64_t> a(500), b(500);
  parallel_for(a.size(), 1, [&](std::size_t i) { a[i] = Rng(9).child("i", i).next_u64(); });
  parallel_for(b.size(), 8, [&](std::size_t i) { b[i] = Rng(9).child("i", i).next_u64(); });
  EXPECT_EQ(a, b);
}

TEST(Parallel, PropagatesException) {
  EXPECT_THROW(parallel_for(10, 4,
                            [](std::size_t i) {
                              if (i == 3) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
}
