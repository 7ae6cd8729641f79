#pragma once

// Change-point model beta_s = b_0 + sum_p b_p C_s(t_p) + eps_s fitted by the
// sum-of-single-effects model (IBSS) on Sigma^{-1/2}-whitened data with unit
// residual variance.

#include <random>

#include <Eigen/Dense>

#include "sss/basis_regression.hpp"

namespace sss {

struct ChangePointDesign {
  Vector knots;             // t_0 < t_1 < ... < t_P
  Eigen::MatrixXd matrix;   // K x (P+1), entry (s, p) = C_s(t_p)
  Vector response;          // beta-hat, rows follow the summaries
  Vector sigma_diag;        // s.e.(beta-hat)^2
  std::vector<std::size_t> uninformative;  // all-zero columns
  std::vector<std::string> warnings;
};

/// t_0 = pooled exposure minimum followed by pooled quantiles at p/P for
/// p/P in [lo, hi]; collapsed duplicates are dropped with a warning.
inline Vector default_knots(std::span<const double> x, int P, double lo, double hi,
                            std::vector<std::string>* warnings = nullptr) {
  if (P < 1) throw InputError("candidate count must be positive");
  Vector sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  Vector knots{sorted.front()};
  std::size_t dropped = 0;
  for (int p = 0; p <= P; ++p) {
    const double level = static_cast<double>(p) / P;
    if (level < lo - 1e-12 || level > hi + 1e-12) continue;
    const double q = detail::quantile_sorted(sorted, level);
    if (q > knots.back())
      knots.push_back(q);
    else if (p > 0)
      ++dropped;
  }
  if (dropped > 0 && warnings)
    warnings->push_back(std::to_string(dropped) + " duplicate knot(s) removed after quantile collapse");
  return knots;
}

inline ChangePointDesign build_changepoint_design(std::span<const StratumSummary> summaries,
                                                  std::span<const WeightFunction> weights, Vector knots) {
  if (knots.empty()) throw InputError("change-point design needs at least one knot");
  for (std::size_t i = 1; i < knots.size(); ++i)
    if (!(knots[i] > knots[i - 1])) throw InputError("knots must be strictly increasing");
  const auto aligned = align_weights(weights, summaries);
  const auto K = static_cast<Eigen::Index>(summaries.size());
  const auto P1 = static_cast<Eigen::Index>(knots.size());
  ChangePointDesign d;
  d.matrix.resize(K, P1);
  for (Eigen::Index s = 0; s < K; ++s) {
    for (Eigen::Index p = 0; p < P1; ++p)
      d.matrix(s, p) = weight_integral_above(*aligned[static_cast<std::size_t>(s)], knots[static_cast<std::size_t>(p)]);
    d.response.push_back(summaries[static_cast<std::size_t>(s)].beta_hat);
    const double se = summaries[static_cast<std::size_t>(s)].se_beta;
    d.sigma_diag.push_back(se * se);
  }
  for (Eigen::Index p = 0; p < P1; ++p)
    if (d.matrix.col(p).cwiseAbs().maxCoeff() == 0.0) d.uninformative.push_back(static_cast<std::size_t>(p));
  if (!d.uninformative.empty())
    d.warnings.push_back(std::to_string(d.uninformative.size()) + " knot column(s) are identically zero");
  d.knots = std::move(knots);
  return d;
}

struct SerResult {
  Vector pi, mu, sigma;
  Vector log_bf;
  double log_marginal = 0.0;  // log sum_p pi_p BF_p
};

namespace detail {

/// log BF of b ~ N(0, s0) against b = 0 for one column with d = ||x||^2.
inline double log_bayes_factor(double d, double xty, double s0) {
  if (d == 0.0 || s0 == 0.0) return 0.0;
  const double shat2 = 1.0 / d;
  const double bhat = xty / d;
  return 0.5 * std::log(shat2 / (shat2 + s0)) + 0.5 * bhat * bhat / shat2 * s0 / (shat2 + s0);
}

inline double ser_log_marginal(std::span<const double> d, std::span<const double> xty, std::span<const double> log_prior,
                               double s0) {
  Vector terms(d.size());
  for (std::size_t p = 0; p < d.size(); ++p) terms[p] = log_prior[p] + log_bayes_factor(d[p], xty[p], s0);
  return log_sum_exp(terms);
}

inline SerResult ser_core(std::span<const double> d, std::span<const double> xty, std::span<const double> log_prior,
                          double s0) {
  const std::size_t P1 = d.size();
  SerResult r;
  r.pi.resize(P1);
  r.mu.resize(P1);
  r.sigma.resize(P1);
  r.log_bf.resize(P1);
  Vector w(P1);
  for (std::size_t p = 0; p < P1; ++p) {
    r.log_bf[p] = log_bayes_factor(d[p], xty[p], s0);
    w[p] = log_prior[p] + r.log_bf[p];
    if (s0 == 0.0) {
      r.mu[p] = 0.0;
      r.sigma[p] = 0.0;
    } else {
      const double post_var = 1.0 / (d[p] + 1.0 / s0);
      r.mu[p] = post_var * xty[p];
      r.sigma[p] = std::sqrt(post_var);
    }
  }
  r.log_marginal = log_sum_exp(w);
  double total = 0.0;
  for (std::size_t p = 0; p < P1; ++p) {
    r.pi[p] = std::exp(w[p] - r.log_marginal);
    total += r.pi[p];
  }
  for (double& v : r.pi) v /= total;
  return r;
}

inline Vector log_prior_of(std::span<const double> prior, std::size_t P1) {
  Vector lp(P1);
  if (prior.empty()) {
    std::fill(lp.begin(), lp.end(), -std::log(static_cast<double>(P1)));
    return lp;
  }
  if (prior.size() != P1) throw InputError("prior length must match the number of columns");
  double total = 0.0;
  for (double v : prior) {
    if (v < 0.0) throw InputError("prior probabilities must be non-negative");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-8) throw InputError("prior probabilities must sum to 1");
  for (std::size_t p = 0; p < P1; ++p) lp[p] = std::log(prior[p]);
  return lp;
}

}  // namespace detail

/// Single-effect regression on a whitened design (unit error variance).
inline SerResult single_effect_regression(const Eigen::MatrixXd& design, const Eigen::VectorXd& residual,
                                          double sigma0_sq, std::span<const double> prior_pi = {}) {
  if (sigma0_sq < 0.0) throw InputError("prior variance must be non-negative");
  const auto P1 = static_cast<std::size_t>(design.cols());
  if (P1 == 0) throw InputError("design has no columns");
  if (design.rows() != residual.size()) throw InputError("design and response disagree in length");
  const auto lp = detail::log_prior_of(prior_pi, P1);
  Vector d(P1), xty(P1);
  for (std::size_t p = 0; p < P1; ++p) {
    d[p] = design.col(static_cast<Eigen::Index>(p)).squaredNorm();
    xty[p] = design.col(static_cast<Eigen::Index>(p)).dot(residual);
  }
  return detail::ser_core(d, xty, lp, sigma0_sq);
}

struct SusieOptions {
  int max_effects = 10;
  double tol = 1e-6;
  int max_iter = 100;
  bool estimate_sigma0 = true;
  double sigma0_init = -1.0;  // negative: 0.2 x mean square of the response
  Vector prior;               // empty: uniform
};

struct SusieFit {
  Eigen::MatrixXd pi;     // L x (P+1)
  Eigen::MatrixXd mu;     // L x (P+1)
  Eigen::MatrixXd sigma;  // L x (P+1)
  Vector sigma0_sq;       // L
  Vector elbo_trace;
  int l_star = 0;
  std::vector<int> detected;  // effect indices counted in l_star
  bool converged = false;
  int iterations = 0;
  Vector knots;

  /// sum_l pi_l o mu_l, the posterior mean of each b_p.
  [[nodiscard]] Eigen::VectorXd coefficient_means() const { return pi.cwiseProduct(mu).colwise().sum().transpose(); }
};

namespace detail {

inline double response_scale(std::span<const double> y) {
  double ms = 0.0;
  for (double v : y) ms += v * v;
  return y.empty() ? 0.0 : ms / static_cast<double>(y.size());
}

/// Marks effect l detected when sigma0_l > 1e-6 x mean(beta^2) and its top
/// PIP exceeds twice the uniform prior mass.
inline void mark_detected(SusieFit& fit, double scale) {
  fit.detected.clear();
  const auto P1 = static_cast<double>(fit.pi.cols());
  const double pip_floor = 2.0 / P1;
  for (Eigen::Index l = 0; l < fit.pi.rows(); ++l) {
    const bool big = fit.sigma0_sq[static_cast<std::size_t>(l)] > 1e-6 * scale;
    const bool sharp = pip_floor >= 1.0 || fit.pi.row(l).maxCoeff() > pip_floor;
    if (big && sharp) fit.detected.push_back(static_cast<int>(l));
  }
  fit.l_star = static_cast<int>(fit.detected.size());
}

}  // namespace detail

/// Iterative Bayesian stepwise selection with optional empirical-Bayes
/// prior variances; stops when the ELBO changes by less than `tol`.
inline SusieFit susie_ibss(const ChangePointDesign& design, const SusieOptions& opt = {}) {
  if (opt.max_effects < 1) throw InputError("max_effects must be at least 1");
  const auto K = design.matrix.rows();
  const auto P1 = static_cast<std::size_t>(design.matrix.cols());
  if (K == 0 || P1 == 0) throw InputError("empty change-point design");
  if (design.response.size() != static_cast<std::size_t>(K) || design.sigma_diag.size() != static_cast<std::size_t>(K))
    throw InputError("design response/variance length mismatch");

  Eigen::MatrixXd X = design.matrix;
  Eigen::VectorXd y(K);
  for (Eigen::Index s = 0; s < K; ++s) {
    const double v = design.sigma_diag[static_cast<std::size_t>(s)];
    if (!(v > 0.0) || !std::isfinite(v)) throw NumericalError("stratum variances must be positive and finite");
    const double inv_sd = 1.0 / std::sqrt(v);
    X.row(s) *= inv_sd;
    y(s) = design.response[static_cast<std::size_t>(s)] * inv_sd;
  }
  const auto lp = detail::log_prior_of(opt.prior, P1);
  Vector d(P1);
  for (std::size_t p = 0; p < P1; ++p) d[p] = X.col(static_cast<Eigen::Index>(p)).squaredNorm();

  const auto L = static_cast<Eigen::Index>(opt.max_effects);
  const double scale = detail::response_scale(design.response);
  const double s0_init = opt.sigma0_init >= 0.0 ? opt.sigma0_init : std::max(0.2 * scale, 1e-4);

  SusieFit fit;
  fit.knots = design.knots;
  fit.pi = Eigen::MatrixXd::Constant(L, static_cast<Eigen::Index>(P1), 1.0 / static_cast<double>(P1));
  fit.mu = Eigen::MatrixXd::Zero(L, static_cast<Eigen::Index>(P1));
  fit.sigma = Eigen::MatrixXd::Zero(L, static_cast<Eigen::Index>(P1));
  fit.sigma0_sq.assign(static_cast<std::size_t>(L), s0_init);
  Vector kl(static_cast<std::size_t>(L), 0.0);

  // fitted values of each effect, X (pi_l o mu_l)
  Eigen::MatrixXd effect_fit = Eigen::MatrixXd::Zero(K, L);
  Eigen::VectorXd total_fit = Eigen::VectorXd::Zero(K);
  const double log2pi = std::log(2.0 * M_PI);
  const double Kd = static_cast<double>(K);

  Vector xty(P1);
  double prev_elbo = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < opt.max_iter; ++iter) {
    for (Eigen::Index l = 0; l < L; ++l) {
      const Eigen::VectorXd r = y - (total_fit - effect_fit.col(l));
      for (std::size_t p = 0; p < P1; ++p) xty[p] = X.col(static_cast<Eigen::Index>(p)).dot(r);

      double s0 = fit.sigma0_sq[static_cast<std::size_t>(l)];
      if (opt.estimate_sigma0) {
        auto neg = [&](double log_s0) { return -detail::ser_log_marginal(d, xty, lp, std::exp(log_s0)); };
        const auto [arg, val] = detail::golden_section(neg, std::log(1e-8), std::log(1e4), 1e-8);
        double best_s0 = std::exp(arg), best_val = -val;
        const double at_zero = 0.0;  // log marginal with s0 = 0 is log sum pi = 0
        if (at_zero >= best_val) {
          best_s0 = 0.0;
          best_val = at_zero;
        }
        const double at_prev = s0 > 0.0 ? detail::ser_log_marginal(d, xty, lp, s0) : 0.0;
        if (at_prev > best_val) best_s0 = s0;
        s0 = best_s0;
      }
      const auto ser = detail::ser_core(d, xty, lp, s0);
      fit.sigma0_sq[static_cast<std::size_t>(l)] = s0;

      Eigen::VectorXd bbar(static_cast<Eigen::Index>(P1));
      double eb2d = 0.0;
      for (std::size_t p = 0; p < P1; ++p) {
        const auto pi = static_cast<Eigen::Index>(p);
        fit.pi(l, pi) = ser.pi[p];
        fit.mu(l, pi) = ser.mu[p];
        fit.sigma(l, pi) = ser.sigma[p];
        bbar(pi) = ser.pi[p] * ser.mu[p];
        eb2d += ser.pi[p] * (ser.mu[p] * ser.mu[p] + ser.sigma[p] * ser.sigma[p]) * d[p];
      }
      const Eigen::VectorXd new_fit = X * bbar;
      // KL_l = E_q[log-lik of SER] - log marginal of SER
      const double rr = r.squaredNorm();
      const double e_loglik = -0.5 * Kd * log2pi - 0.5 * (rr - 2.0 * r.dot(new_fit) + eb2d);
      const double loglik = ser.log_marginal - 0.5 * Kd * log2pi - 0.5 * rr;
      kl[static_cast<std::size_t>(l)] = e_loglik - loglik;

      effect_fit.col(l) = new_fit;
      // rebuilt rather than updated so L = 1 sees the raw response exactly
      total_fit = effect_fit.rowwise().sum();
    }

    double erss = (y - total_fit).squaredNorm();
    for (Eigen::Index l = 0; l < L; ++l) {
      double eb2d = 0.0;
      for (std::size_t p = 0; p < P1; ++p) {
        const auto pi = static_cast<Eigen::Index>(p);
        eb2d += fit.pi(l, pi) * (fit.mu(l, pi) * fit.mu(l, pi) + fit.sigma(l, pi) * fit.sigma(l, pi)) * d[p];
      }
      erss += eb2d - effect_fit.col(l).squaredNorm();
    }
    double elbo = -0.5 * Kd * log2pi - 0.5 * erss;
    for (double k : kl) elbo -= k;
    fit.elbo_trace.push_back(elbo);
    fit.iterations = iter + 1;
    if (std::abs(elbo - prev_elbo) < opt.tol) {
      fit.converged = true;
      break;
    }
    prev_elbo = elbo;
  }
  detail::mark_detected(fit, scale);
  return fit;
}

struct CredibleSet {
  std::vector<std::size_t> indices;  // descending posterior mass
  double coverage = 0.0;
  double knot_min = 0.0, knot_max = 0.0;
  double posterior_mean = 0.0;
  std::size_t mode = 0;
  double mode_knot = 0.0;
  double one_sided_upper = 0.0;  // smallest knot with cumulative mass >= level, in knot order
};

/// Smallest set of knots, by descending mass, whose total reaches `level`.
inline CredibleSet credible_set(std::span<const double> pi_row, std::span<const double> knots, double level = 0.95) {
  if (pi_row.size() != knots.size() || pi_row.empty()) throw InputError("credible set needs one mass per knot");
  std::vector<std::size_t> order(pi_row.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return pi_row[a] > pi_row[b]; });
  CredibleSet cs;
  for (auto i : order) {
    cs.indices.push_back(i);
    cs.coverage += pi_row[i];
    if (cs.coverage >= level - 1e-12) break;
  }
  cs.knot_min = knots[*std::min_element(cs.indices.begin(), cs.indices.end())];
  cs.knot_max = knots[*std::max_element(cs.indices.begin(), cs.indices.end())];
  cs.mode = order.front();
  cs.mode_knot = knots[cs.mode];
  double cum = 0.0;
  cs.one_sided_upper = knots.back();
  bool found = false;
  for (std::size_t p = 0; p < pi_row.size(); ++p) {
    cs.posterior_mean += pi_row[p] * knots[p];
    cum += pi_row[p];
    if (!found && cum >= level - 1e-12) {
      cs.one_sided_upper = knots[p];
      found = true;
    }
  }
  return cs;
}

/// (x* - t)_+ - (x_i - t)_+ : contrast of moving x_i to x* through a unit
/// change-point at t.
inline double partial_contrast(double x_star, double x_i, double t) {
  return detail::positive_part(x_star - t) - detail::positive_part(x_i - t);
}

struct ChangePointReport {
  int effect = 0;
  CredibleSet set;  // over knots 1..P (column 0 carries the global slope)
};

/// Location summaries for each detected effect, renormalised over knots 1..P.
inline std::vector<ChangePointReport> changepoint_reports(const SusieFit& fit, double level = 0.95) {
  std::vector<ChangePointReport> out;
  const auto P1 = static_cast<std::size_t>(fit.pi.cols());
  if (P1 < 2) return out;
  for (int l : fit.detected) {
    Vector row(P1 - 1);
    double total = 0.0;
    for (std::size_t p = 1; p < P1; ++p) {
      row[p - 1] = fit.pi(l, static_cast<Eigen::Index>(p));
      total += row[p - 1];
    }
    if (!(total > 0.0)) continue;
    for (double& v : row) v /= total;
    out.push_back({l, credible_set(row, std::span<const double>(fit.knots).subspan(1), level)});
  }
  return out;
}

struct CounterfactualPrediction {
  Vector individual;
  double mean = 0.0;
};

/// Y_i(x*) = Y_i + sum_p f(x*; X_i, t_p) * sum_l pi_lp mu_lp.
inline CounterfactualPrediction counterfactual_predict(const SusieFit& fit, const Dataset& data, double x_star) {
  const Eigen::VectorXd coef = fit.coefficient_means();
  CounterfactualPrediction out;
  out.individual.resize(data.size());
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    double v = data.y()[i];
    for (std::size_t p = 0; p < fit.knots.size(); ++p)
      v += coef(static_cast<Eigen::Index>(p)) * partial_contrast(x_star, data.x()[i], fit.knots[p]);
    out.individual[i] = v;
    total += v;
  }
  out.mean = total / static_cast<double>(data.size());
  return out;
}

inline double effect_posterior_value(const SusieFit& fit, double x) {
  if (x == 0.0) return 0.0;
  const Eigen::VectorXd coef = fit.coefficient_means();
  double h = 0.0;
  for (std::size_t p = 0; p < fit.knots.size(); ++p)
    h += coef(static_cast<Eigen::Index>(p)) * partial_contrast(x, 0.0, fit.knots[p]);
  return h;
}

/// Posterior-mean effect curve (point estimates; bands left equal to h).
inline EffectCurve effect_posterior_mean(const SusieFit& fit, std::span<const double> x_grid) {
  EffectCurve c;
  c.provenance = CurveProvenance::susie_posterior;
  c.x_grid.assign(x_grid.begin(), x_grid.end());
  const Eigen::VectorXd coef = fit.coefficient_means();
  Vector hp;
  for (double x : x_grid) {
    double h = 0.0, slope = 0.0;
    if (x != 0.0)
      for (std::size_t p = 0; p < fit.knots.size(); ++p)
        h += coef(static_cast<Eigen::Index>(p)) * partial_contrast(x, 0.0, fit.knots[p]);
    for (std::size_t p = 0; p < fit.knots.size(); ++p)
      if (x >= fit.knots[p]) slope += coef(static_cast<Eigen::Index>(p));
    c.h.push_back(h);
    hp.push_back(slope);
  }
  c.h_lo = c.h;
  c.h_hi = c.h;
  c.h_prime = std::move(hp);
  return c;
}

/// Draws (knot, effect size) pairs for each detected effect from the
/// posterior mixture; reusable across evaluation points.
class PosteriorSampler {
public:
  PosteriorSampler(const SusieFit& fit, std::size_t n_samples, std::uint64_t seed) : knots_(fit.knots) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    effects_ = fit.detected.size();
    draws_.resize(n_samples * effects_);
    const auto P1 = static_cast<std::size_t>(fit.pi.cols());
    for (std::size_t e = 0; e < effects_; ++e) {
      const auto l = static_cast<Eigen::Index>(fit.detected[e]);
      Vector cdf(P1);
      double cum = 0.0;
      for (std::size_t p = 0; p < P1; ++p) cdf[p] = (cum += fit.pi(l, static_cast<Eigen::Index>(p)));
      for (std::size_t s = 0; s < n_samples; ++s) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * cum;
        auto p = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        p = std::min(p, P1 - 1);
        const auto pi = static_cast<Eigen::Index>(p);
        const double b = fit.mu(l, pi) + fit.sigma(l, pi) * normal(rng);
        draws_[s * effects_ + e] = {p, b};
      }
    }
    samples_ = n_samples;
  }

  [[nodiscard]] Vector values_at(double x) const {
    Vector v(samples_, 0.0);
    for (std::size_t s = 0; s < samples_; ++s)
      for (std::size_t e = 0; e < effects_; ++e) {
        const auto& [p, b] = draws_[s * effects_ + e];
        v[s] += partial_contrast(x, 0.0, knots_[p]) * b;
      }
    return v;
  }

  [[nodiscard]] std::pair<double, double> interval(double x, double level) const {
    auto v = values_at(x);
    std::sort(v.begin(), v.end());
    return {detail::quantile_sorted(v, (1.0 - level) / 2.0), detail::quantile_sorted(v, (1.0 + level) / 2.0)};
  }

private:
  Vector knots_;
  std::size_t effects_ = 0, samples_ = 0;
  std::vector<std::pair<std::size_t, double>> draws_;
};

inline std::pair<double, double> effect_credible_interval(const SusieFit& fit, double x_star, std::size_t n_samples,
                                                          double level, std::uint64_t seed) {
  if (n_samples < 1000) throw InputError("credible intervals need at least 1000 posterior samples");
  return PosteriorSampler(fit, n_samples, seed).interval(x_star, level);
}

/// Posterior-mean curve with sampled pointwise credible bands.
inline EffectCurve effect_posterior_curve(const SusieFit& fit, std::span<const double> x_grid, std::size_t n_samples,
                                          double level, std::uint64_t seed) {
  auto c = effect_posterior_mean(fit, x_grid);
  c.level = level;
  const PosteriorSampler sampler(fit, n_samples, seed);
  for (std::size_t i = 0; i < c.x_grid.size(); ++i) {
    const auto [lo, hi] = sampler.interval(c.x_grid[i], level);
    c.h_lo[i] = lo;
    c.h_hi[i] = hi;
  }
  return c;
}

}  // namespace sss
