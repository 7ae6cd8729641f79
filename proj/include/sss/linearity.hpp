#pragma once

// Cochran-type Q statistics for effect linearity across strata.

#include <map>

#include "sss/iv_summary.hpp"

namespace sss {

enum class QVariant { standard, decomposition, factorization };

inline std::string to_string(QVariant v) {
  switch (v) {
    case QVariant::standard: return "standard";
    case QVariant::decomposition: return "decomposition";
    case QVariant::factorization: return "factorization";
  }
  return "standard";
}

inline QVariant parse_q_variant(const std::string& s) {
  if (s == "standard") return QVariant::standard;
  if (s == "decomposition") return QVariant::decomposition;
  if (s == "factorization") return QVariant::factorization;
  throw InputError("unknown linearity test variant: " + s);
}

struct QTestResult {
  double q = 0.0;
  int df = 1;
  double p_value = 1.0;
  std::map<std::string, double> estimates;  // beta, c0, c1
  QVariant variant = QVariant::standard;
};

namespace detail {

inline double q_standard(std::span<const StratumSummary> s, double beta) {
  double q = 0.0;
  for (const auto& m : s) {
    const double r = m.theta_hat - beta * m.alpha_hat;
    const double v = m.se_theta * m.se_theta + beta * beta * m.se_alpha * m.se_alpha;
    if (v > 0.0)
      q += r * r / v;
    else if (r != 0.0)
      return std::numeric_limits<double>::infinity();
  }
  return q;
}

/// Q with an extra additive regressor g (c1 * g) and its standard error.
inline double q_general(std::span<const StratumSummary> s, double c0, double c1, double beta,
                        std::span<const double> g, std::span<const double> se_g) {
  double q = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& m = s[i];
    const double r = m.theta_hat - c0 - c1 * g[i] - beta * m.alpha_hat;
    const double v = m.se_theta * m.se_theta + c1 * c1 * se_g[i] * se_g[i] + beta * beta * m.se_alpha * m.se_alpha;
    if (v > 0.0)
      q += r * r / v;
    else if (r != 0.0)
      return std::numeric_limits<double>::infinity();
  }
  return q;
}

/// Weighted-mean intercept minimising q_general for fixed (c1, beta).
inline double profile_intercept(std::span<const StratumSummary> s, double c1, double beta, std::span<const double> g,
                                std::span<const double> se_g) {
  double sw = 0.0, swr = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& m = s[i];
    const double v = m.se_theta * m.se_theta + c1 * c1 * se_g[i] * se_g[i] + beta * beta * m.se_alpha * m.se_alpha;
    const double w = v > 0.0 ? 1.0 / v : 1e300;
    sw += w;
    swr += w * (m.theta_hat - c1 * g[i] - beta * m.alpha_hat);
  }
  return swr / sw;
}

/// Scan then golden-section refinement of a 1-D function over [lo, hi].
template <class F>
std::pair<double, double> scan_minimize(F&& f, double lo, double hi, int points = 2001) {
  double best_x = lo, best_f = f(lo);
  const double step = (hi - lo) / (points - 1);
  for (int i = 1; i < points; ++i) {
    const double x = lo + step * i;
    const double v = f(x);
    if (v < best_f) {
      best_f = v;
      best_x = x;
    }
  }
  auto [x, v] = golden_section(f, std::max(lo, best_x - step), std::min(hi, best_x + step), 1e-12);
  if (v <= best_f) return {x, v};
  return {best_x, best_f};
}

inline std::pair<double, double> ratio_range(std::span<const StratumSummary> s) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& m : s) {
    if (m.alpha_hat == 0.0) continue;
    const double r = m.theta_hat / m.alpha_hat;
    if (!std::isfinite(r)) continue;
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  if (!std::isfinite(lo)) return {-10.0, 10.0};
  const double w = std::max(hi - lo, 1.0);
  return {lo - 2.0 * w, hi + 2.0 * w};
}

inline QTestResult finish(QVariant variant, double q, int df, std::map<std::string, double> est) {
  QTestResult r;
  r.variant = variant;
  r.q = std::max(q, 0.0);
  r.df = df;
  r.p_value = chi_squared_upper(r.q, df);
  r.estimates = std::move(est);
  return r;
}

}  // namespace detail

/// Standard test: Q(beta) minimised over beta, df = K - 1.
inline QTestResult q_linearity(std::span<const StratumSummary> summaries) {
  if (summaries.size() < 2) throw InputError("linearity test needs at least 2 strata");
  auto f = [&](double b) { return detail::q_standard(summaries, b); };
  const auto [lo, hi] = detail::ratio_range(summaries);
  const auto [beta, q] = detail::scan_minimize(f, lo, hi);
  return detail::finish(QVariant::standard, q, static_cast<int>(summaries.size()) - 1, {{"beta", beta}});
}

/// Additive invalid-instrument test: theta_s = c0 + c1 alpha_s, df = K - 2.
inline QTestResult q_linearity_decomposition(std::span<const StratumSummary> summaries) {
  if (summaries.size() < 3) throw InputError("decomposition test needs at least 3 strata");
  const Vector zero(summaries.size(), 0.0);
  // c0 is profiled out exactly; the remaining search is over c1
  auto prof = [&](double c1) {
    const double c0 = detail::profile_intercept(summaries, 0.0, c1, zero, zero);
    return detail::q_general(summaries, c0, 0.0, c1, zero, zero);
  };
  const auto [lo, hi] = detail::ratio_range(summaries);
  auto [c1, q] = detail::scan_minimize(prof, lo, hi);
  double c0 = detail::profile_intercept(summaries, 0.0, c1, zero, zero);
  auto full = [&](const Vector& p) { return detail::q_general(summaries, p[0], 0.0, p[1], zero, zero); };
  auto [p, v] = detail::nelder_mead(full, {c0, c1}, 0.1, 1e-14, 4000);
  if (v < q) {
    c0 = p[0];
    c1 = p[1];
    q = v;
  }
  return detail::finish(QVariant::decomposition, q, static_cast<int>(summaries.size()) - 2, {{"c0", c0}, {"c1", c1}});
}

/// Factorisation test: theta_s = c0 + c1 gamma_s + beta alpha_s, df = K - 3.
inline QTestResult q_linearity_factorization(std::span<const StratumSummary> summaries) {
  if (summaries.size() < 4) throw InputError("factorization test needs at least 4 strata");
  Vector g, se_g;
  for (const auto& m : summaries) {
    if (!m.gamma_hat || !m.se_gamma) throw InputError("factorization test needs gamma_hat and se_gamma for every stratum");
    g.push_back(*m.gamma_hat);
    se_g.push_back(*m.se_gamma);
  }
  const std::size_t K = summaries.size();

  // weighted least squares start for (c0, c1, beta)
  Eigen::MatrixXd A(static_cast<Eigen::Index>(K), 3);
  Eigen::VectorXd rhs(static_cast<Eigen::Index>(K));
  for (std::size_t i = 0; i < K; ++i) {
    const auto& m = summaries[i];
    const double w = m.se_theta > 0.0 ? 1.0 / m.se_theta : 1.0;
    const auto r = static_cast<Eigen::Index>(i);
    A(r, 0) = w;
    A(r, 1) = w * g[i];
    A(r, 2) = w * m.alpha_hat;
    rhs(r) = w * m.theta_hat;
  }
  const Eigen::Vector3d start = A.colPivHouseholderQr().solve(rhs);

  // c0 profiled; minimise over (c1, beta) with restarts
  auto prof = [&](const Vector& p) {
    const double c0 = detail::profile_intercept(summaries, p[0], p[1], g, se_g);
    return detail::q_general(summaries, c0, p[0], p[1], g, se_g);
  };
  Vector best{start(1), start(2)};
  double best_q = prof(best);
  for (int restart = 0; restart < 5; ++restart) {
    auto [p, v] = detail::nelder_mead(prof, best, std::pow(0.5, restart), 1e-14, 4000);
    if (v <= best_q) {
      best = p;
      best_q = v;
    }
  }
  const double c0 = detail::profile_intercept(summaries, best[0], best[1], g, se_g);
  return detail::finish(QVariant::factorization, best_q, static_cast<int>(K) - 3,
                        {{"c0", c0}, {"c1", best[0]}, {"beta", best[1]}});
}

inline QTestResult q_test(std::span<const StratumSummary> summaries, QVariant variant) {
  switch (variant) {
    case QVariant::decomposition: return q_linearity_decomposition(summaries);
    case QVariant::factorization: return q_linearity_factorization(summaries);
    default: return q_linearity(summaries);
  }
}

}  // namespace sss
