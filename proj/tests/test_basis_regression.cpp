#include <gtest/gtest.h>

#include <random>

#include "sss/basis_regression.hpp"
#include "sss/workflow.hpp"

namespace {

sss::StratumSummary at(double x_bar, double se = 1.0) {
  sss::StratumSummary s;
  s.x_bar = x_bar;
  s.se_beta = se;
  return s;
}

sss::DesignMatrix design_of(const Eigen::MatrixXd& X, const sss::Vector& sigma_diag) {
  sss::DesignMatrix d;
  d.entries = X;
  d.sigma_diag = sigma_diag;
  d.penalty = Eigen::MatrixXd::Zero(X.cols(), X.cols());
  return d;
}

// Weighted least squares on whitened data by Householder QR.
Eigen::VectorXd qr_oracle(const Eigen::MatrixXd& X, const sss::Vector& sigma_diag, const sss::Vector& beta) {
  Eigen::MatrixXd Xw = X;
  Eigen::VectorXd yw(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double s = std::sqrt(sigma_diag[static_cast<std::size_t>(i)]);
    Xw.row(i) /= s;
    yw(i) = beta[static_cast<std::size_t>(i)] / s;
  }
  return Xw.householderQr().solve(yw);
}

}  // namespace

TEST(SofDesign, ConstantBasisIsNormalised) {
  sss::WeightFunction w;
  w.grid = {-1.0, 0.0, 0.5, 2.0};
  w.cum_above = {0.9, 0.7, 0.2, 0.05};
  std::vector<sss::StratumSummary> sums{at(0.0)};
  const auto d = sss::build_sof_design(std::vector<sss::WeightFunction>{w}, sums, sss::BasisSet::polynomial(0));
  EXPECT_NEAR(d.entries(0, 0), 1.0, 1e-15);
  EXPECT_EQ(d.mode, sss::DesignMode::sof);
}

TEST(SofDesign, IndicatorAtGridMinimumHasFullMass) {
  sss::WeightFunction w;
  w.grid = {0.0, 1.0, 2.0};
  w.cum_above = {1.0, 0.5, 0.0};
  std::vector<sss::StratumSummary> sums{at(1.0)};
  const auto d = sss::build_sof_design(std::vector<sss::WeightFunction>{w}, sums, sss::BasisSet::indicator({0.0}, false));
  EXPECT_NEAR(d.entries(0, 0), 1.0, 1e-15);
}

TEST(SofDesign, LinearBasisMatchesFineQuadrature) {
  sss::WeightFunction w;
  w.grid = {0.0, 1.0, 2.0};
  w.cum_above = {1.0, 0.3, 0.0};
  std::vector<sss::StratumSummary> sums{at(1.0)};
  const auto d = sss::build_sof_design(std::vector<sss::WeightFunction>{w}, sums, sss::BasisSet::polynomial(1));
  // density 0.7 on [0,1], 0.3 on [1,2]; midpoint rule on a fine grid
  double oracle = 0.0;
  const int m = 200000;
  for (int i = 0; i < m; ++i) {
    const double x = 2.0 * (i + 0.5) / m;
    oracle += x * (x < 1.0 ? 0.7 : 0.3) * 2.0 / m;
  }
  EXPECT_NEAR(d.entries(0, 1), oracle, 1e-9);
}

TEST(SosDesign, RowsAreBasisAtMeans) {
  std::vector<sss::StratumSummary> sums{at(0.0), at(1.0), at(2.0)};
  const auto d = sss::build_sos_design(sums, sss::BasisSet::polynomial(1));
  Eigen::MatrixXd expect(3, 2);
  expect << 1, 0, 1, 1, 1, 2;
  EXPECT_EQ(d.entries, expect);
  std::vector<sss::StratumSummary> neg{at(-1.0)};
  EXPECT_EQ(sss::build_sos_design(neg, sss::BasisSet::indicator({0.0}, false)).entries(0, 0), 0.0);
}

TEST(Penalty, PolynomialExamples) {
  EXPECT_TRUE(sss::penalty_matrix(sss::BasisSet::polynomial(1), 2).isZero(0.0));
  const auto R = sss::penalty_matrix(sss::BasisSet::polynomial(2, 0.0, 1.0), 2);
  Eigen::MatrixXd expect = Eigen::MatrixXd::Zero(3, 3);
  expect(2, 2) = 4.0;
  EXPECT_EQ(R, expect);
  const auto R3 = sss::penalty_matrix(sss::BasisSet::polynomial(4, -1.5, 2.0), 2);
  EXPECT_EQ(R3, R3.transpose());
}

TEST(Penalty, PiecewiseLinearFirstDerivative) {
  const auto b = sss::BasisSet::piecewise_linear_plus({0.5}, 0.0, 2.0);
  const auto R = b.penalty(1);
  // derivatives 0, 1, I{x >= 0.5} over [0, 2]
  EXPECT_EQ(R(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(R(1, 1), 2.0);
  EXPECT_DOUBLE_EQ(R(1, 2), 1.5);
  EXPECT_DOUBLE_EQ(R(2, 2), 1.5);
  EXPECT_EQ(R, R.transpose());
  EXPECT_THROW(b.penalty(2), sss::InputError);
  EXPECT_THROW(sss::BasisSet::indicator({0.0}).penalty(1), sss::InputError);
}

TEST(Ridge, IdentityDesignInterpolates) {
  const sss::Vector beta{0.3, -1.2, 4.5, 2.0};
  const auto d = design_of(Eigen::MatrixXd::Identity(4, 4), {1, 1, 1, 1});
  const auto f = sss::fit_weighted_ridge(d, beta, 0.0);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(f.b_hat(i), beta[static_cast<std::size_t>(i)], 1e-12);
}

TEST(Ridge, SquareFullRankInterpolatesExactly) {
  Eigen::MatrixXd X(3, 3);
  X << 1, 0.2, 0.5, 1, 1.1, -0.3, 1, 2.4, 0.9;
  const sss::Vector beta{1.0, -2.0, 0.5};
  const auto f = sss::fit_weighted_ridge(design_of(X, {0.04, 0.25, 1.7}), beta, 0.0);
  const Eigen::VectorXd back = X * f.b_hat;
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(back(i), beta[static_cast<std::size_t>(i)], 1e-8);
}

TEST(Ridge, LargeLambdaShrinksToZero) {
  Eigen::MatrixXd X(4, 2);
  X << 1, 0, 1, 1, 1, 2, 1, 3;
  auto d = design_of(X, {1, 1, 1, 1});
  d.penalty = Eigen::MatrixXd::Identity(2, 2);
  const sss::Vector beta{1, 3, 5, 7};
  const double n0 = sss::fit_weighted_ridge(d, beta, 0.0).b_hat.norm();
  const double n1 = sss::fit_weighted_ridge(d, beta, 1e3).b_hat.norm();
  const double n2 = sss::fit_weighted_ridge(d, beta, 1e9).b_hat.norm();
  EXPECT_GT(n0, n1);
  EXPECT_LT(n2, 1e-7);
}

TEST(Ridge, ToySystemMatchesQrOracle) {
  Eigen::MatrixXd X(3, 2);
  X << 1.0, 0.5, 1.0, 1.5, 1.0, 3.0;
  const sss::Vector sigma{0.1, 0.4, 0.2};
  const sss::Vector beta{0.8, 1.9, 3.7};
  const auto f = sss::fit_weighted_ridge(design_of(X, sigma), beta, 0.0);
  const auto oracle = qr_oracle(X, sigma, beta);
  EXPECT_NEAR(f.b_hat(0), oracle(0), 1e-12);
  EXPECT_NEAR(f.b_hat(1), oracle(1), 1e-12);
}

TEST(Ridge, RandomInstancesMatchQrOracle) {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> var(0.05, 2.0);
  for (int rep = 0; rep < 50; ++rep) {
    const int K = 8 + rep % 10, L = 2 + rep % 4;
    Eigen::MatrixXd X(K, L);
    sss::Vector sigma, beta;
    for (int i = 0; i < K; ++i) {
      for (int j = 0; j < L; ++j) X(i, j) = n01(rng);
      sigma.push_back(var(rng));
      beta.push_back(n01(rng));
    }
    const auto f = sss::fit_weighted_ridge(design_of(X, sigma), beta, 0.0);
    const auto oracle = qr_oracle(X, sigma, beta);
    EXPECT_LT((f.b_hat - oracle).norm(), 1e-8 * std::max(1.0, oracle.norm()));
  }
}

TEST(Ridge, SingularSystemReported) {
  Eigen::MatrixXd X(3, 2);
  X << 1, 2, 1, 2, 1, 2;
  EXPECT_THROW(sss::fit_weighted_ridge(design_of(X, {1, 1, 1}), sss::Vector{1, 2, 3}, 0.0), sss::NumericalError);
}

TEST(Gcv, SingleZeroCandidate) {
  Eigen::MatrixXd X(4, 2);
  X << 1, 0, 1, 1, 1, 2, 1, 3;
  const sss::Vector beta{0.1, 1.2, 1.9, 3.1};
  const auto f = sss::gcv_select(design_of(X, {1, 1, 1, 1}), beta, sss::Vector{0.0});
  EXPECT_EQ(f.lambda, 0.0);
  const auto plain = sss::fit_weighted_ridge(design_of(X, {1, 1, 1, 1}), beta, 0.0);
  EXPECT_EQ(f.b_hat, plain.b_hat);
  ASSERT_EQ(f.gcv_trace.size(), 1u);
}

TEST(Gcv, DegenerateTraceExcluded) {
  Eigen::MatrixXd X(3, 3);
  X << 1, 0, 0, 1, 1, 1, 1, 2, 4;
  auto d = design_of(X, {1, 1, 1});
  d.penalty = Eigen::MatrixXd::Identity(3, 3);
  const auto f = sss::gcv_select(d, sss::Vector{1, 2, 5}, sss::Vector{0.0, 1.0});
  EXPECT_EQ(f.lambda, 1.0);
  ASSERT_EQ(f.diagnostics.size(), 1u);
  EXPECT_NE(f.diagnostics[0].find("lambda=0"), std::string::npos);
  EXPECT_THROW(sss::gcv_select(d, sss::Vector{1, 2, 5}, sss::Vector{0.0}), sss::NumericalError);
}

TEST(Gcv, InvariantToRowPermutation) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01;
  const int K = 12;
  Eigen::MatrixXd X(K, 3);
  sss::Vector sigma, beta;
  for (int i = 0; i < K; ++i) {
    X.row(i) << 1.0, n01(rng), n01(rng);
    sigma.push_back(0.1 + std::abs(n01(rng)));
    beta.push_back(n01(rng));
  }
  auto d = design_of(X, sigma);
  d.penalty = Eigen::MatrixXd::Identity(3, 3);
  std::vector<int> perm(K);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Eigen::MatrixXd Xp(K, 3);
  sss::Vector sp, bp;
  for (int i = 0; i < K; ++i) {
    Xp.row(i) = X.row(perm[static_cast<std::size_t>(i)]);
    sp.push_back(sigma[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
    bp.push_back(beta[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
  }
  auto dp = design_of(Xp, sp);
  dp.penalty = d.penalty;
  for (double lambda : {0.0, 0.01, 1.0, 100.0}) {
    const double a = sss::gcv_score(d, beta, lambda).score;
    const double b = sss::gcv_score(dp, bp, lambda).score;
    EXPECT_NEAR(a, b, 1e-10 * a);
  }
}

TEST(Gcv, SelectedFitCloseToOracleLambda) {
  // quadratic intensity h'(x) = x^2 observed with noise at 60 stratum means,
  // fitted with a 5-knot piecewise-linear basis and a first-derivative penalty
  const sss::Vector knots{-1.2, -0.6, 0.0, 0.6, 1.2};
  auto basis = sss::BasisSet::piecewise_linear_plus(knots, -2.0, 2.0);
  sss::Vector grid_lambda;
  for (int i = 0; i <= 32; ++i) grid_lambda.push_back(std::pow(10.0, -4.0 + 0.25 * i));
  sss::Vector eval;
  for (int i = 0; i <= 100; ++i) eval.push_back(-1.8 + 3.6 * i / 100.0);

  std::mt19937_64 rng(12);
  std::normal_distribution<double> n01;
  const int reps = 40, K = 60;
  sss::Vector mse_by_lambda(grid_lambda.size(), 0.0);
  double mse_gcv = 0.0;
  for (int r = 0; r < reps; ++r) {
    std::vector<sss::StratumSummary> sums;
    sss::Vector beta;
    for (int s = 0; s < K; ++s) {
      const double x = -1.9 + 3.8 * s / (K - 1);
      sums.push_back(at(x, 0.4));
      beta.push_back(x * x + 0.4 * n01(rng));
    }
    auto d = sss::build_sos_design(sums, basis);
    d.penalty = basis.penalty(1);
    auto curve_mse = [&](const sss::FitResult& f) {
      double m = 0.0;
      for (double x : eval) {
        double v = 0.0;
        for (std::size_t l = 0; l < basis.size(); ++l) v += basis.evaluate(l, x) * f.b_hat(static_cast<Eigen::Index>(l));
        m += (v - x * x) * (v - x * x);
      }
      return m / static_cast<double>(eval.size());
    };
    for (std::size_t j = 0; j < grid_lambda.size(); ++j)
      mse_by_lambda[j] += curve_mse(sss::fit_weighted_ridge(d, beta, grid_lambda[j])) / reps;
    mse_gcv += curve_mse(sss::gcv_select(d, beta, grid_lambda)) / reps;
  }
  const double oracle = *std::min_element(mse_by_lambda.begin(), mse_by_lambda.end());
  EXPECT_LE(mse_gcv, 1.2 * oracle);
}

TEST(EffectFromFit, HandValues) {
  sss::FitResult f;
  f.b_hat = Eigen::Vector2d(1.0, 1.0);
  f.cov_b = Eigen::Matrix2d::Identity() * 0.01;
  const auto c = sss::effect_from_fit(f, sss::BasisSet::polynomial(1), sss::Vector{0.0, 3.0});
  EXPECT_EQ(c.h[0], 0.0);
  EXPECT_EQ(c.h_lo[0], 0.0);
  EXPECT_EQ(c.h_hi[0], 0.0);
  EXPECT_DOUBLE_EQ(c.h[1], 7.5);
  EXPECT_DOUBLE_EQ((*c.h_prime)[1], 4.0);
  EXPECT_LT(c.h_lo[1], c.h[1]);

  sss::FitResult g;
  g.b_hat = Eigen::VectorXd::Constant(1, 2.0);
  g.cov_b = Eigen::MatrixXd::Zero(1, 1);
  const auto lin = sss::effect_from_fit(g, sss::BasisSet::polynomial(0), sss::Vector{-1.5, 0.0, 2.0});
  EXPECT_DOUBLE_EQ(lin.h[0], -3.0);
  EXPECT_DOUBLE_EQ(lin.h[2], 4.0);
  for (double v : *lin.h_prime) EXPECT_EQ(v, 2.0);
}

TEST(SosSof, NarrowStrataAgree) {
  // bounded exposure noise keeps every residual stratum narrow
  const std::size_t n = 200000;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  sss::Vector z(n), x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = (rng() >> 63) ? 0.5 : -0.5;
    x[i] = 0.1 * z[i] + unif(rng);
    y[i] = x[i] + n01(rng);
  }
  const sss::Dataset data(z, x, y);
  sss::AnalysisConfig cfg;
  cfg.strata_count = 200;
  cfg.stratifier = sss::StratifierKind::residual;
  const auto [assign, sums] = sss::stratify_and_summarise(data, cfg);
  const auto grid = sss::quantile_grid(data.x(), 4000);
  const auto weights = sss::estimate_weight_functions(data, assign, grid);
  for (const auto& basis : {sss::BasisSet::polynomial(2), sss::BasisSet::piecewise_linear_plus({-0.5, 0.5})}) {
    const auto sof = sss::build_sof_design(weights, sums, basis);
    const auto sos = sss::build_sos_design(sums, basis);
    EXPECT_LT((sof.entries - sos.entries).cwiseAbs().maxCoeff(), 0.05);
  }
}
