#include <gtest/gtest.h>

#include "sss/simulation.hpp"

namespace {

double covariance(std::span<const double> a, std::span<const double> b) {
  const double ma = sss::detail::mean(a), mb = sss::detail::mean(b);
  double c = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) c += (a[i] - ma) * (b[i] - mb);
  return c / static_cast<double>(a.size() - 1);
}

sss::MethodConfig method(sss::StudyMethod m, int K = 10) {
  sss::MethodConfig mc;
  mc.method = m;
  mc.analysis.strata_count = K;
  return mc;
}

}  // namespace

TEST(Generate, NullInstrumentHasNoCovariance) {
  auto spec = sss::named_scenario("part1-3");
  spec.instrument_effect = 0.0;
  const auto d = sss::generate(spec, 20000, 3);
  const double c = covariance(d.z(), d.x());
  const double se = std::sqrt(covariance(d.z(), d.z()) * covariance(d.x(), d.x()) / static_cast<double>(d.size()));
  EXPECT_LT(std::abs(c), 3.0 * se);
}

TEST(Generate, WeakInstrumentR2) {
  const auto d = sss::generate(sss::named_scenario("part1-1"), 5000, 9);
  const double c = covariance(d.z(), d.x());
  const double r2 = c * c / (covariance(d.z(), d.z()) * covariance(d.x(), d.x()));
  EXPECT_LT(r2, 0.02);
}

TEST(Generate, LognormalExposureIsSkewed) {
  sss::ScenarioSpec spec;
  spec.instrument = sss::InstrumentKind::standard_normal;
  spec.instrument_effect = 0.3;
  spec.link = sss::ExposureLink::exp;
  const auto d = sss::generate(spec, 50000, 5);
  const double m = sss::detail::mean(d.x());
  double m2 = 0.0, m3 = 0.0;
  for (double v : d.x()) {
    m2 += (v - m) * (v - m);
    m3 += (v - m) * (v - m) * (v - m);
  }
  m2 /= static_cast<double>(d.size());
  m3 /= static_cast<double>(d.size());
  EXPECT_GT(m3 / std::pow(m2, 1.5), 1.0);
}

TEST(Generate, SeededDeterminism) {
  const auto spec = sss::named_scenario("part3-4", 3);
  const auto a = sss::generate(spec, 1000, 77), b = sss::generate(spec, 1000, 77), c = sss::generate(spec, 1000, 78);
  EXPECT_TRUE(std::equal(a.y().begin(), a.y().end(), b.y().begin()));
  EXPECT_FALSE(std::equal(a.y().begin(), a.y().end(), c.y().begin()));
}

TEST(TrueEffect, Examples) {
  const auto lin = sss::named_scenario("part3-1", 1);
  EXPECT_EQ(sss::true_effect(lin, 2.0), std::make_pair(2.0, 1.0));
  const auto cp = sss::named_scenario("part3-1", 2);
  EXPECT_EQ(sss::true_effect(cp, -1.0), std::make_pair(0.0, 0.0));
  const auto two = sss::named_scenario("part3-1", 3);
  EXPECT_DOUBLE_EQ(sss::true_effect(two, 1.0).first, 1.25);
  EXPECT_DOUBLE_EQ(sss::true_effect(two, 1.0).second, 1.5);
  for (int c = 1; c <= 4; ++c)
    for (const char* name : {"part3-1", "part3-2", "part3-3", "part3-4"})
      EXPECT_EQ(sss::true_effect(sss::named_scenario(name, c), 0.0).first, 0.0) << name << " case " << c;
  const auto step = sss::named_scenario("part2");
  EXPECT_EQ(sss::true_effect(step, 0.0).second, 0.0);
  EXPECT_EQ(sss::true_effect(step, 1e-9).second, 1.0);
}

TEST(Scenarios, QuantilesAndNames) {
  const auto s1 = sss::named_scenario("part1-1");
  EXPECT_EQ(sss::exposure_quantile(s1, 0.5), 0.0);
  for (double p : {0.1, 0.3, 0.7, 0.9}) EXPECT_NEAR(sss::exposure_cdf(s1, sss::exposure_quantile(s1, p)), p, 1e-12);
  EXPECT_NEAR(sss::exposure_quantile(s1, 0.1), -sss::exposure_quantile(s1, 0.9), 1e-10);
  const auto s3 = sss::named_scenario("part3-4", 1);
  EXPECT_EQ(sss::exposure_quantile(s3, 0.5), 1.0);
  EXPECT_NEAR(sss::exposure_cdf(s3, sss::exposure_quantile(s3, 0.9)), 0.9, 1e-12);
  EXPECT_THROW(sss::named_scenario("part9"), sss::InputError);
  EXPECT_THROW(sss::named_scenario("part3-1", 7), sss::InputError);
  EXPECT_EQ(sss::parse_study_method("m3"), sss::StudyMethod::sos_polynomial);
  EXPECT_THROW(sss::parse_study_method("m4"), sss::InputError);
}

TEST(RunStudy, SingleReplicationMse) {
  const auto spec = sss::named_scenario("part1-1");
  const auto st = sss::run_study(spec, method(sss::StudyMethod::sos_polynomial), 5000, 1, {0.1, 0.9}, 4);
  ASSERT_EQ(st.replications.size(), 1u);
  for (std::size_t j = 0; j < 2; ++j) {
    const double e = st.replications[0].estimates[j] - st.truth[j];
    EXPECT_EQ(st.mse[j], e * e);
  }
}

TEST(RunStudy, MedianMseIsExactlyZero) {
  const auto spec = sss::named_scenario("part1-1");
  for (auto m : {sss::StudyMethod::control_function, sss::StudyMethod::iv_regression,
                 sss::StudyMethod::sos_polynomial, sss::StudyMethod::sss}) {
    const auto st = sss::run_study(spec, method(m), 5000, 5, {0.1, 0.5, 0.9}, 11);
    EXPECT_EQ(st.failures, 0u) << sss::to_string(m);
    EXPECT_EQ(st.mse[1], 0.0) << sss::to_string(m);
    EXPECT_GT(st.mse[0], 0.0) << sss::to_string(m);
  }
}

TEST(RunStudy, DeterministicAcrossThreadCounts) {
  const auto spec = sss::named_scenario("part2");
  const auto a = sss::run_study(spec, method(sss::StudyMethod::sof_indicator), 5000, 8, {0.3, 0.7}, 21, 1);
  const auto b = sss::run_study(spec, method(sss::StudyMethod::sof_indicator), 5000, 8, {0.3, 0.7}, 21, 4);
  EXPECT_EQ(a.mse, b.mse);
  for (std::size_t r = 0; r < 8; ++r) {
    EXPECT_EQ(a.replications[r].seed, b.replications[r].seed);
    EXPECT_EQ(a.replications[r].estimates, b.replications[r].estimates);
  }
}

TEST(RunStudy, FailuresAreRecorded) {
  const auto st = sss::run_study(sss::named_scenario("part1-1"), method(sss::StudyMethod::sos_polynomial), 15, 3,
                                 {0.5}, 1);
  EXPECT_EQ(st.failures, 3u);
  EXPECT_FALSE(st.replications[0].error.empty());
  EXPECT_THROW(sss::run_study(sss::named_scenario("part1-1"), method(sss::StudyMethod::sss), 100, 0, {0.5}, 1),
               sss::InputError);
}

TEST(RunStudy, OracleSosRecoversLinearTruth) {
  // h'(x) = b1 + b2 x with truth (1, 0)
  const auto spec = sss::named_scenario("part1-1");
  sss::AnalysisConfig cfg;
  const int reps = 60;
  std::vector<Eigen::Vector2d> b;
  for (int r = 0; r < reps; ++r) {
    const auto data = sss::generate(spec, 5000, sss::detail::derive_seed(123, static_cast<std::uint64_t>(r)));
    const auto [assign, sums] = sss::stratify_and_summarise(data, cfg);
    sss::Vector beta;
    for (const auto& s : sums) beta.push_back(s.beta_hat);
    b.push_back(sss::fit_weighted_ridge(sss::build_sos_design(sums, sss::BasisSet::polynomial(1)), beta, 0.0).b_hat);
  }
  for (int j = 0; j < 2; ++j) {
    double m = 0.0, v = 0.0;
    for (const auto& e : b) m += e(j) / reps;
    for (const auto& e : b) v += (e(j) - m) * (e(j) - m) / (reps - 1);
    EXPECT_LT(std::abs(m - (j == 0 ? 1.0 : 0.0)), 3.0 * std::sqrt(v / reps)) << "coefficient " << j;
  }
}
