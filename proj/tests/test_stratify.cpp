#include <gtest/gtest.h>

#include <random>
#include <set>

#include "sss/stratify.hpp"

namespace {

using Members = std::vector<std::vector<std::size_t>>;

sss::Dataset linear_population(std::size_t n, double alpha, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  sss::Vector z(n), x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = n01(rng);
    x[i] = alpha * z[i] + n01(rng);
    y[i] = x[i] + n01(rng);
  }
  return {z, x, y};
}

}  // namespace

TEST(ResidualStratify, InterceptOnlyHandTrace) {
  const sss::Dataset d({1, 2, 3, 4}, {4, 1, 3, 2}, {0, 0, 0, 0});
  sss::ExposureModelSpec model;
  model.candidate_powers = {0};
  const auto a = sss::residual_stratify(d, 2, model);
  // 1-based {2,4} and {3,1}
  EXPECT_EQ(a.members(), (Members{{1, 3}, {0, 2}}));
  EXPECT_EQ(a.excluded_count, 0u);
  EXPECT_EQ(a.method, sss::StratifierKind::residual);
}

TEST(ResidualStratify, ExactFitFallsBackToIndexOrder) {
  const sss::Dataset d({0.3, 1.7, 2.2, -4, 5, 0.1}, {0.3, 1.7, 2.2, -4, 5, 0.1}, {0, 0, 0, 0, 0, 0});
  const auto a = sss::residual_stratify(d, 2);
  EXPECT_EQ(a.members(), (Members{{0, 1, 2}, {3, 4, 5}}));
}

TEST(ResidualStratify, LeftoverExcluded) {
  const sss::Dataset d({1, 2, 3, 4, 5}, {1.5, 1.9, 3.4, 4.2, 4.8}, {0, 0, 0, 0, 0});
  const auto a = sss::residual_stratify(d, 2);
  EXPECT_EQ(a.excluded_count, 1u);
  EXPECT_EQ(std::count(a.label.begin(), a.label.end(), sss::StratumAssignment::excluded), 1);
}

TEST(ResidualStratify, Errors) {
  const sss::Dataset flat({1, 1, 1, 1}, {1, 2, 3, 4}, {0, 0, 0, 0});
  EXPECT_THROW(sss::residual_stratify(flat, 2), sss::NumericalError);
  const sss::Dataset neg({1, 2, 3, 4}, {1, -2, 3, 4}, {0, 0, 0, 0});
  sss::ExposureModelSpec logm;
  logm.transform = sss::ExposureTransform::log;
  EXPECT_THROW(sss::residual_stratify(neg, 2, logm), sss::InputError);
}

TEST(ResidualStratify, BicDropsUselessTerms) {
  const auto d = linear_population(4000, 0.5, 3);
  sss::ExposureModelSpec model;
  model.candidate_powers = {0, 1, 2, 3};
  model.selection = sss::TermSelection::bic;
  // zero-intercept linear truth: only the z term survives
  EXPECT_EQ(sss::detail::select_terms(d.z(), d.x(), model), (std::vector<int>{1}));
  EXPECT_NO_THROW(sss::residual_stratify(d, 10, model));
}

TEST(DoublyRanked, HandTrace) {
  const sss::Dataset d({1, 2, 3, 4}, {5, 3, 9, 7}, {0, 0, 0, 0});
  const auto a = sss::doubly_ranked_stratify(d, 2, 2);
  EXPECT_EQ(a.members(), (Members{{1, 3}, {0, 2}}));
}

TEST(DoublyRanked, ConstantExposureUsesIndexTies) {
  const sss::Dataset d({4, 3, 2, 1, 6, 5}, {1, 1, 1, 1, 1, 1}, {0, 0, 0, 0, 0, 0});
  const auto a = sss::doubly_ranked_stratify(d, 2, 2);
  // pre-strata by z: {3,2}, {1,0}, {5,4}; lower index gets the lower rank
  EXPECT_EQ(a.members(), (Members{{0, 2, 4}, {1, 3, 5}}));
}

TEST(DoublyRanked, TrailingPreStratumExcluded) {
  const sss::Dataset d({5, 1, 4, 2, 3}, {1, 2, 3, 4, 5}, {0, 0, 0, 0, 0});
  const auto a = sss::doubly_ranked_stratify(d, 2, 2);
  EXPECT_EQ(a.excluded_count, 1u);
  EXPECT_EQ(a.label[0], sss::StratumAssignment::excluded);
}

TEST(DoublyRanked, Errors) {
  const sss::Dataset d({1, 2, 3, 4}, {1, 2, 3, 4}, {0, 0, 0, 0});
  EXPECT_THROW(sss::doubly_ranked_stratify(d, 2, 3), sss::InputError);
  EXPECT_THROW(sss::doubly_ranked_stratify(d, 2, 6), sss::InputError);
}

TEST(DoublyRanked, EqualSizesWhenDivisible) {
  const auto d = linear_population(1000, 0.5, 1);
  const auto a = sss::doubly_ranked_stratify(d, 10, 20);
  EXPECT_EQ(a.excluded_count, 0u);
  for (const auto& m : a.members()) EXPECT_EQ(m.size(), 100u);
}

TEST(DoublyRanked, PartitionProperty) {
  const auto d = linear_population(1037, 0.5, 2);
  const auto a = sss::doubly_ranked_stratify(d, 7, 14);
  std::set<std::size_t> seen;
  std::size_t total = 0;
  for (const auto& m : a.members()) {
    EXPECT_FALSE(m.empty());
    total += m.size();
    seen.insert(m.begin(), m.end());
  }
  EXPECT_EQ(seen.size(), total);
  EXPECT_EQ(total + a.excluded_count, d.size());
}

TEST(DoublyRanked, ExposureOrderingAndInstrumentBalance) {
  const std::size_t n = 20000;
  const auto d = linear_population(n, 0.5, 7);
  const auto a = sss::doubly_ranked_stratify(d, 10);
  const auto groups = a.members();
  double prev = -1e300;
  std::vector<double> zbar;
  for (const auto& g : groups) {
    double sx = 0, sz = 0;
    for (auto i : g) {
      sx += d.x()[i];
      sz += d.z()[i];
    }
    const double xm = sx / static_cast<double>(g.size());
    EXPECT_GT(xm, prev);
    prev = xm;
    zbar.push_back(sz / static_cast<double>(g.size()));
  }
  // z has unit variance; each stratum mean has MC s.e. about 1/sqrt(n/K)
  const double se = 1.0 / std::sqrt(static_cast<double>(n) / 10.0);
  const auto [lo, hi] = std::minmax_element(zbar.begin(), zbar.end());
  EXPECT_LT(*hi - *lo, 3.0 * std::sqrt(2.0) * se);
}

TEST(Stratify, Deterministic) {
  const auto d = linear_population(3000, 0.3, 11);
  sss::AnalysisConfig cfg;
  EXPECT_EQ(sss::stratify(d, cfg).label, sss::stratify(d, cfg).label);
  cfg.stratifier = sss::StratifierKind::residual;
  EXPECT_EQ(sss::stratify(d, cfg).label, sss::stratify(d, cfg).label);
}
