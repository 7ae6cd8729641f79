#pragma once

// Synthetic scenarios, baseline estimators and seeded replication studies.

#include <atomic>
#include <mutex>
#include <random>
#include <thread>

#include "sss/workflow.hpp"

namespace sss {

enum class InstrumentKind { bernoulli_centered, standard_normal };
enum class ExposureLink { identity, exp };
enum class Confounding { simple, complex };
enum class EffectCase {
  linear,
  one_changepoint,
  two_changepoint_normal,
  two_changepoint_lognormal,
  quadratic,
  indicator_step,
  exponential
};

struct ScenarioSpec {
  std::string name = "custom";
  InstrumentKind instrument = InstrumentKind::bernoulli_centered;
  double instrument_effect = 0.15;
  ExposureLink link = ExposureLink::identity;
  Confounding confounding = Confounding::simple;
  EffectCase effect = EffectCase::linear;
  double changepoint = 0.0;           // one_changepoint
  double quad_a = -1.0, quad_b = 0.5;  // quadratic: a x + b x^2
  double rate = 0.5;                   // exponential: exp(rate x) - 1

  void validate() const {
    for (double v : {instrument_effect, changepoint, quad_a, quad_b, rate})
      if (!std::isfinite(v)) throw InputError("scenario parameters must be finite");
  }
};

/// h(x) and h'(x) of the scenario's effect function; h(0) = 0.
inline std::pair<double, double> true_effect(const ScenarioSpec& spec, double x) {
  using detail::positive_part;
  auto step = [](double v) { return v > 0.0 ? 1.0 : 0.0; };
  switch (spec.effect) {
    case EffectCase::linear: return {x, 1.0};
    case EffectCase::one_changepoint: return {positive_part(x - spec.changepoint), step(x - spec.changepoint)};
    case EffectCase::two_changepoint_normal:
      return {0.5 * x + 0.5 * positive_part(x + 0.5) - 0.25 + 0.5 * positive_part(x - 0.5),
              0.5 + 0.5 * step(x + 0.5) + 0.5 * step(x - 0.5)};
    case EffectCase::two_changepoint_lognormal:
      return {0.5 * x + 0.5 * positive_part(x - 0.5) + 0.5 * positive_part(x - 2.5),
              0.5 + 0.5 * step(x - 0.5) + 0.5 * step(x - 2.5)};
    case EffectCase::quadratic: return {spec.quad_a * x + spec.quad_b * x * x, spec.quad_a + 2.0 * spec.quad_b * x};
    case EffectCase::indicator_step: return {step(x), 0.0};
    case EffectCase::exponential: return {std::exp(spec.rate * x) - 1.0, spec.rate * std::exp(spec.rate * x)};
  }
  return {0.0, 0.0};
}

/// Draws n individuals: X = g(gamma Z + U + eX), Y = h(X) + confounding + eY.
inline Dataset generate(const ScenarioSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  if (n < 1) throw InputError("sample size must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector z(n), x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double zi = spec.instrument == InstrumentKind::bernoulli_centered ? ((rng() >> 63) == 1 ? 0.5 : -0.5)
                                                                             : normal(rng);
    const double u = normal(rng);
    const double ex = normal(rng);
    const double ey = normal(rng);
    const double w = spec.instrument_effect * zi + u + ex;
    const double xi = spec.link == ExposureLink::identity ? w : std::exp(w);
    const double conf = spec.confounding == Confounding::simple
                            ? u
                            : std::abs(u) + ex * ex + 2.0 * std::abs(u) * std::abs(ex);
    z[i] = zi;
    x[i] = xi;
    y[i] = true_effect(spec, xi).first + conf + ey;
  }
  return {std::move(z), std::move(x), std::move(y)};
}

/// Marginal exposure CDF (mixture over the instrument law).
inline double exposure_cdf(const ScenarioSpec& spec, double x) {
  double w = x;
  if (spec.link == ExposureLink::exp) {
    if (x <= 0.0) return 0.0;
    w = std::log(x);
  }
  const double g = spec.instrument_effect;
  if (spec.instrument == InstrumentKind::standard_normal) return detail::normal_cdf(w / std::sqrt(2.0 + g * g));
  const double sd = std::sqrt(2.0);
  return 0.5 * detail::normal_cdf((w - 0.5 * g) / sd) + 0.5 * detail::normal_cdf((w + 0.5 * g) / sd);
}

/// Theoretical exposure quantile by bisection on the analytic CDF. The
/// identity-link laws are symmetric about 0, so the median is exactly 0.
inline double exposure_quantile(const ScenarioSpec& spec, double p) {
  if (!(p > 0.0 && p < 1.0)) throw InputError("quantile level must lie in (0, 1)");
  if (p == 0.5) return spec.link == ExposureLink::identity ? 0.0 : 1.0;
  const double span = 20.0 + 10.0 * std::abs(spec.instrument_effect);
  auto cdf_w = [&](double w) {
    return spec.link == ExposureLink::identity ? exposure_cdf(spec, w) : exposure_cdf(spec, std::exp(w));
  };
  const double w = detail::bisect_increasing(cdf_w, p, -span, span);
  return spec.link == ExposureLink::identity ? w : std::exp(w);
}

/// Named scenarios: part1-<1..4>, part2, part3-<1..4>, supp-<1..4>.
/// `effect_case` 1..4 selects the Part III effect function.
inline ScenarioSpec named_scenario(const std::string& name, int effect_case = 1) {
  ScenarioSpec s;
  s.name = name;
  auto index = [&](const std::string& prefix) {
    if (name.size() != prefix.size() + 1 || name.compare(0, prefix.size(), prefix) != 0)
      return 0;
    const int k = name.back() - '0';
    return (k >= 1 && k <= 4) ? k : 0;
  };
  if (int k = index("part1-"); k > 0) {
    s.instrument = k <= 2 ? InstrumentKind::bernoulli_centered : InstrumentKind::standard_normal;
    s.confounding = k % 2 == 1 ? Confounding::simple : Confounding::complex;
    s.effect = EffectCase::linear;
    return s;
  }
  if (int k = index("supp-"); k > 0) {
    s = named_scenario("part1-" + std::to_string(k));
    s.name = name;
    s.effect = EffectCase::indicator_step;
    return s;
  }
  if (name == "part2") {
    s.effect = EffectCase::one_changepoint;
    s.changepoint = 0.0;
    return s;
  }
  if (name == "part2-quadratic") {
    s.effect = EffectCase::quadratic;
    s.quad_a = 1.0;
    s.quad_b = 0.5;
    return s;
  }
  if (int k = index("part3-"); k > 0) {
    s.instrument = k % 2 == 1 ? InstrumentKind::bernoulli_centered : InstrumentKind::standard_normal;
    const bool lognormal = k >= 3;
    s.link = lognormal ? ExposureLink::exp : ExposureLink::identity;
    s.instrument_effect = lognormal ? 0.3 : 0.15;
    switch (effect_case) {
      case 1: s.effect = EffectCase::linear; break;
      case 2:
        s.effect = EffectCase::one_changepoint;
        s.changepoint = lognormal ? 2.5 : 0.0;
        break;
      case 3: s.effect = lognormal ? EffectCase::two_changepoint_lognormal : EffectCase::two_changepoint_normal; break;
      case 4:
        s.effect = EffectCase::quadratic;
        s.quad_a = lognormal ? -2.0 : -1.0;
        s.quad_b = 0.5;
        break;
      default: throw InputError("effect case must be 1..4");
    }
    return s;
  }
  throw InputError("unknown scenario '" + name + "'");
}

enum class StudyMethod {
  control_function,  // M1
  iv_regression,     // M2
  sos_polynomial,    // M3
  sos_indicator,     // Part II, scalar-on-scalar
  sof_indicator,     // Part II, scalar-on-function
  sss,               // M5
  q_test
};

inline std::string to_string(StudyMethod m) {
  switch (m) {
    case StudyMethod::control_function: return "control_function";
    case StudyMethod::iv_regression: return "iv_regression";
    case StudyMethod::sos_polynomial: return "sos_polynomial";
    case StudyMethod::sos_indicator: return "sos_indicator";
    case StudyMethod::sof_indicator: return "sof_indicator";
    case StudyMethod::sss: return "sss";
    case StudyMethod::q_test: return "q_test";
  }
  return "";
}

inline StudyMethod parse_study_method(const std::string& s) {
  for (auto m : {StudyMethod::control_function, StudyMethod::iv_regression, StudyMethod::sos_polynomial,
                 StudyMethod::sos_indicator, StudyMethod::sof_indicator, StudyMethod::sss, StudyMethod::q_test})
    if (to_string(m) == s) return m;
  if (s == "m1") return StudyMethod::control_function;
  if (s == "m2") return StudyMethod::iv_regression;
  if (s == "m3") return StudyMethod::sos_polynomial;
  if (s == "m5") return StudyMethod::sss;
  throw InputError("unknown simulation method '" + s + "'");
}

/// Indicator methods estimate h'(x); the others estimate h(x).
inline bool targets_derivative(StudyMethod m) {
  return m == StudyMethod::sos_indicator || m == StudyMethod::sof_indicator;
}

struct MethodConfig {
  StudyMethod method = StudyMethod::sss;
  AnalysisConfig analysis;  // strata, knots, L, se order for the stratified methods
  int weight_grid_points = 1000;
  double q_alpha = 0.05;
};

/// One replication's outcome.
struct ReplicationResult {
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  Vector estimates;  // at the evaluation points
  std::optional<double> changepoint_mode, changepoint_mean;
  int detected = 0;
  std::optional<double> q_p_value;
};

struct StudyResult {
  ScenarioSpec scenario;
  MethodConfig method;
  std::size_t n = 0;
  std::uint64_t master_seed = 0;
  Vector eval_quantiles;
  Vector eval_points;
  Vector truth;
  std::vector<ReplicationResult> replications;
  Vector mse;  // per evaluation point, over successful replications
  std::size_t failures = 0;

  /// Fraction of successful replications with p < alpha (q_test method).
  [[nodiscard]] double rejection_rate(double alpha) const {
    std::size_t hit = 0, total = 0;
    for (const auto& r : replications)
      if (!r.failed && r.q_p_value) {
        ++total;
        if (*r.q_p_value < alpha) ++hit;
      }
    return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
  }
};

namespace detail {

/// M1: residual of X on Z, then OLS of Y on (1, X, X^2, r).
inline Vector control_function_fit(const Dataset& d) {
  const auto n = static_cast<Eigen::Index>(d.size());
  Eigen::MatrixXd A(n, 2);
  Eigen::VectorXd xv(n), yv(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    A(i, 0) = 1.0;
    A(i, 1) = d.z()[static_cast<std::size_t>(i)];
    xv(i) = d.x()[static_cast<std::size_t>(i)];
    yv(i) = d.y()[static_cast<std::size_t>(i)];
  }
  const Eigen::VectorXd r = xv - A * A.colPivHouseholderQr().solve(xv);
  Eigen::MatrixXd B(n, 4);
  B.col(0).setOnes();
  B.col(1) = xv;
  B.col(2) = xv.array().square().matrix();
  B.col(3) = r;
  const Eigen::VectorXd c = B.colPivHouseholderQr().solve(yv);
  return {c(1), c(2)};
}

/// M2: exact identification from two instrument groups (no intercept).
inline Vector iv_regression_fit(const Dataset& d, InstrumentKind kind) {
  const auto z = d.z();
  double cut = 0.0;
  if (kind == InstrumentKind::standard_normal) cut = quantile(Vector(z.begin(), z.end()), 0.5);
  double m[2][3] = {{0, 0, 0}, {0, 0, 0}};
  double cnt[2] = {0, 0};
  for (std::size_t i = 0; i < d.size(); ++i) {
    const int g = z[i] > cut ? 1 : 0;
    const double x = d.x()[i];
    m[g][0] += x;
    m[g][1] += x * x;
    m[g][2] += d.y()[i];
    cnt[g] += 1.0;
  }
  if (cnt[0] == 0.0 || cnt[1] == 0.0) throw NumericalError("an instrument group is empty");
  Eigen::Matrix2d M;
  Eigen::Vector2d rhs;
  for (int g = 0; g < 2; ++g) {
    M(g, 0) = m[g][0] / cnt[g];
    M(g, 1) = m[g][1] / cnt[g];
    rhs(g) = m[g][2] / cnt[g];
  }
  if (std::abs(M.determinant()) < 1e-300) throw NumericalError("IV regression system is singular");
  const Eigen::Vector2d b = M.partialPivLu().solve(rhs);
  return {b(0), b(1)};
}

inline Vector beta_vector(std::span<const StratumSummary> s) {
  Vector b;
  for (const auto& m : s) b.push_back(m.beta_hat);
  return b;
}

inline ReplicationResult run_replication(const ScenarioSpec& spec, const MethodConfig& mc, std::size_t n,
                                         std::uint64_t seed, std::span<const double> points) {
  ReplicationResult r;
  r.seed = seed;
  const Dataset data = generate(spec, n, seed);
  const auto& cfg = mc.analysis;
  switch (mc.method) {
    case StudyMethod::control_function: {
      const auto b = control_function_fit(data);
      for (double x : points) r.estimates.push_back(b[0] * x + b[1] * x * x);
      break;
    }
    case StudyMethod::iv_regression: {
      const auto b = iv_regression_fit(data, spec.instrument);
      for (double x : points) r.estimates.push_back(b[0] * x + b[1] * x * x);
      break;
    }
    case StudyMethod::sos_polynomial: {
      const auto [assign, sums] = stratify_and_summarise(data, cfg);
      const auto fit = fit_weighted_ridge(build_sos_design(sums, BasisSet::polynomial(1)), beta_vector(sums), 0.0);
      for (double x : points) r.estimates.push_back(fit.b_hat(0) * x + 0.5 * fit.b_hat(1) * x * x);
      break;
    }
    case StudyMethod::sos_indicator:
    case StudyMethod::sof_indicator: {
      const auto [assign, sums] = stratify_and_summarise(data, cfg);
      const double t = spec.effect == EffectCase::one_changepoint ? spec.changepoint : 0.0;
      const auto basis = BasisSet::indicator({t});
      DesignMatrix design;
      if (mc.method == StudyMethod::sof_indicator) {
        const auto grid = merge_sorted_unique(quantile_grid(data.x(), mc.weight_grid_points), Vector{t});
        design = build_sof_design(estimate_weight_functions(data, assign, grid), sums, basis);
      } else {
        design = build_sos_design(sums, basis);
      }
      const auto fit = fit_weighted_ridge(design, beta_vector(sums), 0.0);
      // h'(x) = b_0 + b_1 I{x > t}, matching the truth's convention at the knot
      for (double x : points) r.estimates.push_back(fit.b_hat(0) + (x > t ? fit.b_hat(1) : 0.0));
      break;
    }
    case StudyMethod::sss: {
      SssOptions opt;
      opt.config = cfg;
      opt.sample_bands = false;
      opt.curve_grid.assign(points.begin(), points.end());
      const auto a = run_sss_analysis(data, opt);
      r.estimates = a.curve.h;
      r.detected = a.fit.l_star;
      if (!a.changepoints.empty()) {
        r.changepoint_mode = a.changepoints.front().set.mode_knot;
        r.changepoint_mean = a.changepoints.front().set.posterior_mean;
      }
      break;
    }
    case StudyMethod::q_test: {
      const auto [assign, sums] = stratify_and_summarise(data, cfg);
      r.q_p_value = q_linearity(sums).p_value;
      break;
    }
  }
  return r;
}

}  // namespace detail

/// Number of worker threads: explicit request, else SSS_THREADS, else 1.
inline unsigned resolve_threads(int requested) {
  if (requested > 0) return static_cast<unsigned>(requested);
  if (const char* env = std::getenv("SSS_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return 1;
}

/// Seeded replication study. Replication r uses derive_seed(seed, r), so
/// results do not depend on the thread count.
inline StudyResult run_study(const ScenarioSpec& spec, const MethodConfig& method, std::size_t n, std::size_t reps,
                             Vector eval_quantiles, std::uint64_t seed, int threads = 0) {
  if (reps < 1) throw InputError("replication count must be at least 1");
  if (n < 1) throw InputError("sample size must be positive");
  spec.validate();
  StudyResult out;
  out.scenario = spec;
  out.method = method;
  out.n = n;
  out.master_seed = seed;
  out.eval_quantiles = std::move(eval_quantiles);
  const bool deriv = targets_derivative(method.method);
  for (double p : out.eval_quantiles) {
    const double x = exposure_quantile(spec, p);
    out.eval_points.push_back(x);
    const auto [h, hp] = true_effect(spec, x);
    out.truth.push_back(deriv ? hp : h);
  }
  out.replications.resize(reps);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t r = next++; r < reps; r = next++) {
      const auto s = detail::derive_seed(seed, r);
      try {
        out.replications[r] = detail::run_replication(spec, method, n, s, out.eval_points);
      } catch (const std::exception& e) {
        ReplicationResult f;
        f.seed = s;
        f.failed = true;
        f.error = e.what();
        out.replications[r] = std::move(f);
      }
    }
  };
  const unsigned t = std::min<unsigned>(resolve_threads(threads), static_cast<unsigned>(reps));
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < t; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  out.mse.assign(out.eval_points.size(), 0.0);
  std::size_t ok = 0;
  for (const auto& r : out.replications) {
    if (r.failed) {
      ++out.failures;
      continue;
    }
    if (r.estimates.size() != out.eval_points.size()) continue;
    ++ok;
    for (std::size_t j = 0; j < out.mse.size(); ++j) {
      const double e = r.estimates[j] - out.truth[j];
      out.mse[j] += e * e;
    }
  }
  for (double& m : out.mse) m = ok > 0 ? m / static_cast<double>(ok) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace sss
