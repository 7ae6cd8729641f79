#pragma once

// In-memory end-to-end analyses: stratify -> summaries -> weight functions ->
// change-point SuSiE (run_sss_analysis) or basis regression (run_parametric_analysis).

#include "sss/linearity.hpp"
#include "sss/susie.hpp"

namespace sss {

struct SssOptions {
  AnalysisConfig config;
  ExposureModelSpec exposure_model;
  bool test_linearity = false;
  QVariant q_variant = QVariant::standard;
  double credible_level = 0.95;
  std::size_t posterior_samples = 10000;
  Vector curve_grid;  // empty: 101 points between the 1% and 99% exposure quantiles
  bool sample_bands = true;
  int susie_max_iter = 100;
  double susie_tol = 1e-6;
  Vector knots;  // empty: pooled quantiles over the configured range, after t_0 = min
};

struct SssAnalysis {
  StratumAssignment assignment;
  std::vector<StratumSummary> summaries;
  std::vector<WeightFunction> weights;
  ChangePointDesign design;
  SusieFit fit;
  std::vector<ChangePointReport> changepoints;
  EffectCurve curve;
  std::optional<QTestResult> linearity;
  std::vector<std::string> warnings;
};

namespace detail {

inline Vector merge_sorted_unique(Vector a, std::span<const double> b) {
  a.insert(a.end(), b.begin(), b.end());
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  return a;
}

inline Vector default_curve_grid(std::span<const double> x, int points = 101) {
  Vector sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  const double lo = quantile_sorted(sorted, 0.01), hi = quantile_sorted(sorted, 0.99);
  Vector g;
  for (int i = 0; i < points; ++i) g.push_back(lo + (hi - lo) * i / (points - 1));
  return g;
}

}  // namespace detail

/// Stratification and stratum summaries shared by every analysis path.
inline std::pair<StratumAssignment, std::vector<StratumSummary>> stratify_and_summarise(
    const Dataset& data, const AnalysisConfig& cfg, const ExposureModelSpec& model = {}, bool with_gamma = false) {
  auto assignment = stratify(data, cfg, model);
  auto summaries = stratum_associations(data, assignment, cfg.se_order, cfg.weak_stratum_threshold, with_gamma);
  return {std::move(assignment), std::move(summaries)};
}

inline SssAnalysis run_sss_analysis(const Dataset& data, const SssOptions& opt) {
  const auto& cfg = opt.config;
  SssAnalysis a;
  const bool need_gamma = opt.test_linearity && opt.q_variant == QVariant::factorization;
  std::tie(a.assignment, a.summaries) = stratify_and_summarise(data, cfg, opt.exposure_model, need_gamma);
  for (const auto& s : a.summaries)
    if (s.weak) a.warnings.push_back("stratum " + std::to_string(s.stratum + 1) + " has a weak instrument association");
  if (opt.test_linearity) a.linearity = q_test(a.summaries, opt.q_variant);

  auto knots = opt.knots.empty() ? default_knots(data.x(), cfg.candidate_count, cfg.knot_lo, cfg.knot_hi, &a.warnings)
                                 : opt.knots;
  // weight functions tabulated on the quantile grid plus the knots, so C_s(t_p) is exact
  const auto grid = detail::merge_sorted_unique(quantile_grid(data.x(), cfg.candidate_count), knots);
  a.weights = estimate_weight_functions(data, a.assignment, grid);
  a.design = build_changepoint_design(a.summaries, a.weights, std::move(knots));
  for (const auto& w : a.design.warnings) a.warnings.push_back(w);

  SusieOptions so;
  so.max_effects = cfg.max_effects;
  so.max_iter = opt.susie_max_iter;
  so.tol = opt.susie_tol;
  a.fit = susie_ibss(a.design, so);
  if (!a.fit.converged) a.warnings.push_back("IBSS did not converge within " + std::to_string(so.max_iter) + " iterations");
  a.changepoints = changepoint_reports(a.fit, opt.credible_level);

  const Vector grid_x = opt.curve_grid.empty() ? detail::default_curve_grid(data.x()) : opt.curve_grid;
  if (opt.sample_bands && !a.fit.detected.empty())
    a.curve = effect_posterior_curve(a.fit, grid_x, opt.posterior_samples, opt.credible_level, cfg.seed);
  else
    a.curve = effect_posterior_mean(a.fit, grid_x);
  a.curve.level = opt.credible_level;
  return a;
}

struct ParametricOptions {
  AnalysisConfig config;
  ExposureModelSpec exposure_model;
  std::string basis = "poly:2";  // poly:<deg> | indicator:<t1,t2,...> | pwl:<t1,...>
  DesignMode mode = DesignMode::sof;
  std::optional<double> lambda;  // empty: GCV over the default grid
  int penalty_order = 0;  // 0: 2 for polynomials, 1 for piecewise-linear
  double level = 0.95;
  Vector curve_grid;
};

struct ParametricAnalysis {
  StratumAssignment assignment;
  std::vector<StratumSummary> summaries;
  BasisSet basis = BasisSet::polynomial(0);
  DesignMatrix design;
  FitResult fit;
  EffectCurve curve;
};

/// Parses poly:<degree>, indicator:<t1,...> or pwl:<t1,...>.
inline BasisSet parse_basis(const std::string& spec) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string arg = colon == std::string::npos ? std::string{} : spec.substr(colon + 1);
  Vector knots;
  if (!arg.empty() && kind != "poly")
    for (const auto& part : detail::split_line(arg, ',')) {
      const auto v = detail::parse_double(part);
      if (!v) throw InputError("bad knot '" + part + "' in basis '" + spec + "'");
      knots.push_back(*v);
    }
  if (kind == "poly") {
    const auto d = detail::parse_double(arg);
    if (!d || *d != std::floor(*d) || *d < 0) throw InputError("basis 'poly' expects a non-negative integer degree");
    return BasisSet::polynomial(static_cast<int>(*d));
  }
  if (kind == "indicator") return BasisSet::indicator(knots);
  if (kind == "pwl") return BasisSet::piecewise_linear_plus(knots);
  throw InputError("unknown basis '" + spec + "' (expected poly:<d>, indicator:<knots>, pwl:<knots>)");
}

inline ParametricAnalysis run_parametric_analysis(const Dataset& data, const ParametricOptions& opt) {
  ParametricAnalysis a;
  std::tie(a.assignment, a.summaries) = stratify_and_summarise(data, opt.config, opt.exposure_model);
  a.basis = parse_basis(opt.basis);
  const auto [mn, mx] = std::minmax_element(data.x().begin(), data.x().end());
  a.basis.set_domain(*mn, *mx > *mn ? *mx : *mn + 1.0);
  if (opt.mode == DesignMode::sof) {
    const auto grid = quantile_grid(data.x(), std::max(opt.config.candidate_count, 1000));
    const auto weights = estimate_weight_functions(data, a.assignment, grid);
    a.design = build_sof_design(weights, a.summaries, a.basis);
  } else {
    a.design = build_sos_design(a.summaries, a.basis);
  }
  Vector beta;
  for (const auto& s : a.summaries) beta.push_back(s.beta_hat);
  // the indicator basis has no roughness penalty, so it is always fitted unpenalised
  const bool indicator = a.basis.kind() == BasisSet::Kind::indicator;
  const std::optional<double> lambda = indicator ? std::optional<double>(0.0) : opt.lambda;
  if (!lambda || *lambda > 0.0) {
    int m = opt.penalty_order;
    if (m == 0) m = a.basis.kind() == BasisSet::Kind::polynomial ? 2 : 1;
    a.design.penalty = a.basis.penalty(m);
    a.design.derivative_order = m;
  }
  a.fit = lambda ? fit_weighted_ridge(a.design, beta, *lambda) : gcv_select(a.design, beta, default_lambda_grid());
  const Vector grid_x = opt.curve_grid.empty() ? detail::default_curve_grid(data.x()) : opt.curve_grid;
  a.curve = effect_from_fit(a.fit, a.basis, grid_x, opt.level);
  return a;
}

}  // namespace sss
