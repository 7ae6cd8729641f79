#pragma once

// Stratum-level instrument associations, Wald ratios and the nonparametric
// weight function, stored through its upper integral
//   C_s(t) = Cov(Z, (X - t)_+ | S) / Cov(Z, X | S).

#include "sss/stratify.hpp"

namespace sss {

struct StratumSummary {
  int stratum = 0;  // 0-based stratum label
  std::size_t n_s = 0;
  double alpha_hat = 0.0, se_alpha = 0.0;
  double theta_hat = 0.0, se_theta = 0.0;
  double beta_hat = 0.0, se_beta = 0.0;
  double x_bar = 0.0;
  double z_bar = 0.0;
  std::optional<double> gamma_hat, se_gamma;
  bool weak = false;
};

struct SlopeFit {
  double slope = 0.0;
  double se = 0.0;
};

/// Simple-regression slope of `y` on `z` with the classical standard error.
inline SlopeFit simple_slope(std::span<const double> z, std::span<const double> y) {
  const std::size_t n = z.size();
  if (n < 3) throw NumericalError("slope standard error needs at least 3 observations");
  const double zbar = detail::mean(z), ybar = detail::mean(y);
  double szz = 0.0, szy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    szz += (z[i] - zbar) * (z[i] - zbar);
    szy += (z[i] - zbar) * (y[i] - ybar);
  }
  if (szz == 0.0) throw NumericalError("zero instrument variance in stratum");
  SlopeFit out;
  out.slope = szy / szz;
  const double intercept = ybar - out.slope * zbar;
  double rss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = y[i] - intercept - out.slope * z[i];
    rss += r * r;
  }
  out.se = std::sqrt(rss / static_cast<double>(n - 2) / szz);
  return out;
}

/// Delta-method standard error of theta/alpha.
inline double wald_se(double alpha, double se_alpha, double theta, double se_theta, SeOrder order) {
  if (alpha == 0.0) throw NumericalError("Wald ratio undefined for zero instrument-exposure association");
  const double a2 = alpha * alpha;
  if (order == SeOrder::first) return se_theta / std::abs(alpha);
  const double ratio = theta / alpha;
  return std::sqrt(se_theta * se_theta / a2 + ratio * ratio * se_alpha * se_alpha / a2);
}

/// Per-stratum associations, ordered by ascending stratum exposure mean.
inline std::vector<StratumSummary> stratum_associations(const Dataset& data, const StratumAssignment& assignment,
                                                        SeOrder order, double weak_threshold = 4.0,
                                                        bool with_gamma = false) {
  const auto groups = assignment.members();
  std::vector<StratumSummary> out;
  out.reserve(groups.size());
  Vector z, x, y, zx;
  for (std::size_t s = 0; s < groups.size(); ++s) {
    const auto& idx = groups[s];
    if (idx.size() < 3)
      throw NumericalError("stratum " + std::to_string(s + 1) + " has fewer than 3 members");
    z.clear();
    x.clear();
    y.clear();
    zx.clear();
    for (auto i : idx) {
      z.push_back(data.z()[i]);
      x.push_back(data.x()[i]);
      y.push_back(data.y()[i]);
      zx.push_back(data.z()[i] * data.x()[i]);
    }
    StratumSummary sm;
    sm.stratum = static_cast<int>(s);
    sm.n_s = idx.size();
    SlopeFit a, t;
    try {
      a = simple_slope(z, x);
      t = simple_slope(z, y);
    } catch (const NumericalError& e) {
      throw NumericalError("stratum " + std::to_string(s + 1) + ": " + e.what());
    }
    sm.alpha_hat = a.slope;
    sm.se_alpha = a.se;
    sm.theta_hat = t.slope;
    sm.se_theta = t.se;
    sm.beta_hat = sm.theta_hat / sm.alpha_hat;
    sm.se_beta = wald_se(sm.alpha_hat, sm.se_alpha, sm.theta_hat, sm.se_theta, order);
    sm.x_bar = detail::mean(x);
    sm.z_bar = detail::mean(z);
    sm.weak = sm.se_alpha > 0.0 && std::abs(sm.alpha_hat) / sm.se_alpha < weak_threshold;
    if (with_gamma) {
      const auto g = simple_slope(z, zx);
      sm.gamma_hat = g.slope;
      sm.se_gamma = g.se;
    }
    out.push_back(sm);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const StratumSummary& a, const StratumSummary& b) { return a.x_bar < b.x_bar; });
  return out;
}

/// Upper integral of a stratum weight function tabulated on an exposure grid.
struct WeightFunction {
  int stratum = 0;
  Vector grid;       // strictly increasing
  Vector cum_above;  // C_s(t) at each grid point
};

/// Exact empirical C_s(t) for one stratum, evaluated at arbitrary t.
class StratumWeight {
public:
  StratumWeight(std::span<const double> z, std::span<const double> x) {
    const std::size_t n = z.size();
    if (n < 2) throw NumericalError("weight function needs at least two members");
    const double zbar = detail::mean(z);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] < x[b]; });
    xs_.resize(n);
    for (std::size_t r = 0; r < n; ++r) xs_[r] = x[order[r]];
    xmin_ = xs_.front();
    // suffix sums of c_i and c_i (x_i - xmin) over x-sorted members
    s0_.assign(n + 1, 0.0);
    s1_.assign(n + 1, 0.0);
    for (std::size_t r = n; r-- > 0;) {
      const double c = z[order[r]] - zbar;
      s0_[r] = s0_[r + 1] + c;
      s1_[r] = s1_[r + 1] + c * (xs_[r] - xmin_);
    }
    denom_ = s1_[0];
    if (denom_ == 0.0) throw NumericalError("zero instrument-exposure covariance in stratum");
  }

  [[nodiscard]] double cum_above(double t) const {
    if (t <= xmin_) return 1.0;
    // first member strictly above t
    const auto r = static_cast<std::size_t>(std::upper_bound(xs_.begin(), xs_.end(), t) - xs_.begin());
    if (r == xs_.size()) return 0.0;
    return (s1_[r] - (t - xmin_) * s0_[r]) / denom_;
  }

  [[nodiscard]] double x_min() const { return xmin_; }
  [[nodiscard]] double x_max() const { return xs_.back(); }
  /// Unnormalised covariance scale, (n-1) * Cov(Z, X).
  [[nodiscard]] double denominator() const { return denom_; }

private:
  Vector xs_, s0_, s1_;
  double xmin_ = 0.0, denom_ = 0.0;
};

inline void check_grid(std::span<const double> grid) {
  if (grid.empty()) throw InputError("weight-function grid is empty");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1])) throw InputError("weight-function grid must be strictly increasing");
}

inline WeightFunction estimate_weight_function(const Dataset& data, const StratumAssignment& assignment,
                                               int stratum, std::span<const double> grid) {
  check_grid(grid);
  const auto groups = assignment.members();
  if (stratum < 0 || static_cast<std::size_t>(stratum) >= groups.size())
    throw InputError("stratum index out of range");
  Vector z, x;
  for (auto i : groups[static_cast<std::size_t>(stratum)]) {
    z.push_back(data.z()[i]);
    x.push_back(data.x()[i]);
  }
  const StratumWeight w(z, x);
  WeightFunction out;
  out.stratum = stratum;
  out.grid.assign(grid.begin(), grid.end());
  out.cum_above.reserve(grid.size());
  for (double t : grid) out.cum_above.push_back(w.cum_above(t));
  return out;
}

/// Weight functions for every stratum, in stratum-label order.
inline std::vector<WeightFunction> estimate_weight_functions(const Dataset& data,
                                                             const StratumAssignment& assignment,
                                                             std::span<const double> grid) {
  check_grid(grid);
  const auto groups = assignment.members();
  std::vector<WeightFunction> out;
  out.reserve(groups.size());
  Vector z, x;
  for (std::size_t s = 0; s < groups.size(); ++s) {
    z.clear();
    x.clear();
    for (auto i : groups[s]) {
      z.push_back(data.z()[i]);
      x.push_back(data.x()[i]);
    }
    const StratumWeight w(z, x);
    WeightFunction wf;
    wf.stratum = static_cast<int>(s);
    wf.grid.assign(grid.begin(), grid.end());
    for (double t : grid) wf.cum_above.push_back(w.cum_above(t));
    out.push_back(std::move(wf));
  }
  return out;
}

/// Linear interpolation of C_s; 1 below the grid and 0 above it.
inline double weight_integral_above(const WeightFunction& w, double t) {
  const auto& g = w.grid;
  if (t <= g.front()) return t == g.front() ? w.cum_above.front() : 1.0;
  if (t >= g.back()) return t == g.back() ? w.cum_above.back() : 0.0;
  const auto hi = static_cast<std::size_t>(std::upper_bound(g.begin(), g.end(), t) - g.begin());
  const std::size_t lo = hi - 1;
  if (t == g[lo]) return w.cum_above[lo];
  const double f = (t - g[lo]) / (g[hi] - g[lo]);
  return w.cum_above[lo] + f * (w.cum_above[hi] - w.cum_above[lo]);
}

/// Pooled-sample exposure quantiles at p/P, p = 0..P, with duplicates removed.
inline Vector quantile_grid(std::span<const double> x, int P) {
  Vector sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  Vector out;
  for (int p = 0; p <= P; ++p) {
    const double q = detail::quantile_sorted(sorted, static_cast<double>(p) / P);
    if (out.empty() || q > out.back()) out.push_back(q);
  }
  return out;
}

}  // namespace sss
