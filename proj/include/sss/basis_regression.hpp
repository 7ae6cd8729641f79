#pragma once

// Parametric effect-intensity models h'(x) = sum_l b_l phi_l(x): basis sets,
// scalar-on-function / scalar-on-scalar designs, roughness penalties,
// penalised weighted least squares and GCV.

#include <Eigen/Dense>

#include "sss/effect_curve.hpp"
#include "sss/iv_summary.hpp"

namespace sss {

/// A finite basis for the effect intensity h'(x) over an exposure domain.
class BasisSet {
public:
  enum class Kind { polynomial, indicator, piecewise_linear_plus };

  /// {1, x, ..., x^degree}
  static BasisSet polynomial(int degree, double lo = 0.0, double hi = 1.0) {
    if (degree < 0) throw InputError("polynomial degree must be non-negative");
    BasisSet b(Kind::polynomial, lo, hi);
    b.degree_ = degree;
    return b;
  }

  /// {1 (optional), I{x >= t_1}, ..., I{x >= t_m}}
  static BasisSet indicator(Vector knots, bool constant = true, double lo = 0.0, double hi = 1.0) {
    BasisSet b(Kind::indicator, lo, hi);
    b.knots_ = std::move(knots);
    b.constant_ = constant;
    b.check();
    return b;
  }

  /// {1, x, (x - t_1)_+, ..., (x - t_m)_+}
  static BasisSet piecewise_linear_plus(Vector knots, double lo = 0.0, double hi = 1.0) {
    BasisSet b(Kind::piecewise_linear_plus, lo, hi);
    b.knots_ = std::move(knots);
    b.check();
    return b;
  }

  [[nodiscard]] Kind kind() const { return kind_; }
  [[nodiscard]] const Vector& knots() const { return knots_; }
  [[nodiscard]] int degree() const { return degree_; }
  [[nodiscard]] bool has_constant() const { return constant_; }
  [[nodiscard]] double domain_lo() const { return lo_; }
  [[nodiscard]] double domain_hi() const { return hi_; }
  void set_domain(double lo, double hi) {
    if (!(hi > lo)) throw InputError("basis domain must have hi > lo");
    lo_ = lo;
    hi_ = hi;
  }

  [[nodiscard]] std::size_t size() const {
    switch (kind_) {
      case Kind::polynomial: return static_cast<std::size_t>(degree_) + 1;
      case Kind::indicator: return knots_.size() + (constant_ ? 1 : 0);
      case Kind::piecewise_linear_plus: return knots_.size() + 2;
    }
    return 0;
  }

  [[nodiscard]] double evaluate(std::size_t l, double x) const {
    switch (kind_) {
      case Kind::polynomial: return std::pow(x, static_cast<int>(l));
      case Kind::indicator:
        if (constant_ && l == 0) return 1.0;
        return x >= knots_[l - (constant_ ? 1 : 0)] ? 1.0 : 0.0;
      case Kind::piecewise_linear_plus:
        if (l == 0) return 1.0;
        if (l == 1) return x;
        return detail::positive_part(x - knots_[l - 2]);
    }
    return 0.0;
  }

  /// Integral of phi_l over [a, b] (signed; a > b flips the sign).
  [[nodiscard]] double antiderivative(std::size_t l, double a, double b) const {
    return primitive(l, b) - primitive(l, a);
  }

  /// Symmetric PSD matrix of <D^m phi_i, D^m phi_j> over the domain.
  [[nodiscard]] Eigen::MatrixXd penalty(int m) const {
    if (m < 1) throw InputError("penalty derivative order must be at least 1");
    const auto L = static_cast<Eigen::Index>(size());
    Eigen::MatrixXd R = Eigen::MatrixXd::Zero(L, L);
    switch (kind_) {
      case Kind::polynomial: {
        auto falling = [m](int k) {
          double f = 1.0;
          for (int j = 0; j < m; ++j) f *= static_cast<double>(k - j);
          return f;
        };
        for (int i = m; i <= degree_; ++i)
          for (int j = m; j <= degree_; ++j) {
            const int pw = i + j - 2 * m + 1;
            R(i, j) = falling(i) * falling(j) * (std::pow(hi_, pw) - std::pow(lo_, pw)) / pw;
          }
        break;
      }
      case Kind::indicator:
        throw InputError("roughness penalty is not defined for the indicator basis");
      case Kind::piecewise_linear_plus: {
        if (m != 1) throw InputError("piecewise-linear basis supports only a first-derivative penalty");
        // D phi: 0, 1, I{x >= t_k}
        auto start = [&](Eigen::Index l) { return l == 1 ? lo_ : std::max(lo_, knots_[static_cast<std::size_t>(l - 2)]); };
        for (Eigen::Index i = 1; i < L; ++i)
          for (Eigen::Index j = 1; j < L; ++j) R(i, j) = detail::positive_part(hi_ - std::max(start(i), start(j)));
        break;
      }
    }
    return R;
  }

private:
  BasisSet(Kind k, double lo, double hi) : kind_(k), lo_(lo), hi_(hi) {}

  void check() const {
    for (std::size_t i = 1; i < knots_.size(); ++i)
      if (!(knots_[i] > knots_[i - 1])) throw InputError("basis knots must be strictly increasing");
    if (size() == 0) throw InputError("basis must contain at least one function");
  }

  [[nodiscard]] double primitive(std::size_t l, double x) const {
    switch (kind_) {
      case Kind::polynomial: {
        const int k = static_cast<int>(l) + 1;
        return std::pow(x, k) / k;
      }
      case Kind::indicator:
        if (constant_ && l == 0) return x;
        return detail::positive_part(x - knots_[l - (constant_ ? 1 : 0)]);
      case Kind::piecewise_linear_plus:
        if (l == 0) return x;
        if (l == 1) return 0.5 * x * x;
        {
          const double p = detail::positive_part(x - knots_[l - 2]);
          return 0.5 * p * p;
        }
    }
    return 0.0;
  }

  Kind kind_;
  int degree_ = 0;
  Vector knots_;
  bool constant_ = true;
  double lo_, hi_;
};

enum class DesignMode { sof, sos };

struct DesignMatrix {
  Eigen::MatrixXd entries;  // K x L
  DesignMode mode = DesignMode::sos;
  Vector sigma_diag;        // s.e.(beta_s)^2
  Eigen::MatrixXd penalty;  // L x L
  int derivative_order = 2;
};

/// <phi_l, W_s> for a weight function stored as its piecewise-linear upper
/// integral C_s: W_s is piecewise constant between grid points, plus point
/// masses 1 - C_s(g_0) at the first and C_s(g_G) at the last grid point.
inline double basis_weight_inner_product(const BasisSet& basis, std::size_t l, const WeightFunction& w) {
  const auto& g = w.grid;
  const auto& c = w.cum_above;
  double total = (1.0 - c.front()) * basis.evaluate(l, g.front()) + c.back() * basis.evaluate(l, g.back());
  for (std::size_t j = 0; j + 1 < g.size(); ++j) {
    const double mass = c[j] - c[j + 1];
    if (mass == 0.0) continue;
    total += mass / (g[j + 1] - g[j]) * basis.antiderivative(l, g[j], g[j + 1]);
  }
  return total;
}

/// Weight functions reordered to follow `summaries` (matched on stratum label).
inline std::vector<const WeightFunction*> align_weights(std::span<const WeightFunction> weights,
                                                        std::span<const StratumSummary> summaries) {
  if (weights.size() != summaries.size()) throw InputError("one weight function per stratum is required");
  std::vector<const WeightFunction*> out;
  for (const auto& sm : summaries) {
    const auto it = std::find_if(weights.begin(), weights.end(),
                                 [&](const WeightFunction& w) { return w.stratum == sm.stratum; });
    if (it == weights.end()) throw InputError("no weight function for stratum " + std::to_string(sm.stratum + 1));
    out.push_back(&*it);
  }
  return out;
}

/// Rows follow `summaries`; entry (s, l) = <phi_l, W_s>.
inline DesignMatrix build_sof_design(std::span<const WeightFunction> weights, std::span<const StratumSummary> summaries,
                                     const BasisSet& basis) {
  const auto aligned = align_weights(weights, summaries);
  const auto K = static_cast<Eigen::Index>(aligned.size());
  const auto L = static_cast<Eigen::Index>(basis.size());
  DesignMatrix d;
  d.mode = DesignMode::sof;
  d.entries.resize(K, L);
  for (Eigen::Index s = 0; s < K; ++s) {
    const auto& w = *aligned[static_cast<std::size_t>(s)];
    if (w.grid.empty() || w.grid.size() != w.cum_above.size()) throw InputError("malformed weight function");
    for (Eigen::Index l = 0; l < L; ++l)
      d.entries(s, l) = basis_weight_inner_product(basis, static_cast<std::size_t>(l), w);
  }
  for (const auto& sm : summaries) d.sigma_diag.push_back(sm.se_beta * sm.se_beta);
  d.penalty = Eigen::MatrixXd::Zero(L, L);
  return d;
}

inline DesignMatrix build_sos_design(std::span<const StratumSummary> summaries, const BasisSet& basis) {
  if (summaries.empty()) throw InputError("scalar-on-scalar design needs at least one stratum");
  const auto K = static_cast<Eigen::Index>(summaries.size());
  const auto L = static_cast<Eigen::Index>(basis.size());
  DesignMatrix d;
  d.mode = DesignMode::sos;
  d.entries.resize(K, L);
  for (Eigen::Index s = 0; s < K; ++s)
    for (Eigen::Index l = 0; l < L; ++l)
      d.entries(s, l) = basis.evaluate(static_cast<std::size_t>(l), summaries[static_cast<std::size_t>(s)].x_bar);
  for (const auto& sm : summaries) d.sigma_diag.push_back(sm.se_beta * sm.se_beta);
  d.penalty = Eigen::MatrixXd::Zero(L, L);
  return d;
}

inline Eigen::MatrixXd penalty_matrix(const BasisSet& basis, int m) { return basis.penalty(m); }

struct FitResult {
  Eigen::VectorXd b_hat;
  Eigen::MatrixXd cov_b;
  double lambda = 0.0;
  std::vector<std::pair<double, double>> gcv_trace;  // (lambda, GCV)
  std::vector<std::string> diagnostics;
};

namespace detail {

struct Whitened {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
};

inline Whitened whiten(const DesignMatrix& d, std::span<const double> beta_hats) {
  const auto K = d.entries.rows();
  if (static_cast<std::size_t>(K) != beta_hats.size() || d.sigma_diag.size() != beta_hats.size())
    throw InputError("design, responses and variances disagree in length");
  Whitened w{d.entries, Eigen::VectorXd(K)};
  for (Eigen::Index s = 0; s < K; ++s) {
    const double v = d.sigma_diag[static_cast<std::size_t>(s)];
    if (!(v > 0.0) || !std::isfinite(v)) throw NumericalError("stratum variances must be positive and finite");
    const double inv_sd = 1.0 / std::sqrt(v);
    w.X.row(s) *= inv_sd;
    w.y(s) = beta_hats[static_cast<std::size_t>(s)] * inv_sd;
  }
  return w;
}

/// Inverse of X'X + lambda R via a Jacobi-scaled LDLT; throws when singular.
inline Eigen::MatrixXd regularised_inverse(const Eigen::MatrixXd& xtx, const Eigen::MatrixXd& R, double lambda) {
  const Eigen::MatrixXd M = xtx + lambda * R;
  const auto L = M.rows();
  Eigen::VectorXd scale(L);
  for (Eigen::Index i = 0; i < L; ++i) {
    if (!(M(i, i) > 0.0)) throw NumericalError("singular normal matrix (zero diagonal at column " + std::to_string(i) + ")");
    scale(i) = 1.0 / std::sqrt(M(i, i));
  }
  const Eigen::MatrixXd Ms = scale.asDiagonal() * M * scale.asDiagonal();
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(Ms);
  const double rcond = ldlt.rcond();
  const Eigen::VectorXd D = ldlt.vectorD();
  if (ldlt.info() != Eigen::Success || !(rcond > 1e-14) || !(D.minCoeff() > 1e-14 * D.maxCoeff()))
    throw NumericalError("singular normal matrix (reciprocal condition estimate " + std::to_string(rcond) + ")");
  const Eigen::MatrixXd inv_s = ldlt.solve(Eigen::MatrixXd::Identity(L, L));
  return scale.asDiagonal() * inv_s * scale.asDiagonal();
}

}  // namespace detail

/// b = (X' S^-1 X + lambda R)^-1 X' S^-1 beta with sandwich covariance.
inline FitResult fit_weighted_ridge(const DesignMatrix& design, std::span<const double> beta_hats, double lambda) {
  if (lambda < 0.0) throw InputError("lambda must be non-negative");
  const auto w = detail::whiten(design, beta_hats);
  const auto L = w.X.cols();
  const Eigen::MatrixXd R = design.penalty.size() == 0 ? Eigen::MatrixXd::Zero(L, L) : design.penalty;
  const Eigen::MatrixXd xtx = w.X.transpose() * w.X;
  const Eigen::MatrixXd inv = detail::regularised_inverse(xtx, R, lambda);
  FitResult out;
  out.lambda = lambda;
  out.b_hat = inv * (w.X.transpose() * w.y);
  out.cov_b = inv * xtx * inv;
  out.cov_b = 0.5 * (out.cov_b + out.cov_b.transpose()).eval();
  return out;
}

struct GcvScore {
  double score = 0.0;
  double trace = 0.0;
  double sse = 0.0;
};

/// GCV(lambda) = K/(K - tr H) * SSE/(K - tr H) on whitened data.
inline GcvScore gcv_score(const DesignMatrix& design, std::span<const double> beta_hats, double lambda) {
  const auto w = detail::whiten(design, beta_hats);
  const auto L = w.X.cols();
  const double K = static_cast<double>(w.X.rows());
  const Eigen::MatrixXd R = design.penalty.size() == 0 ? Eigen::MatrixXd::Zero(L, L) : design.penalty;
  const Eigen::MatrixXd inv = detail::regularised_inverse(w.X.transpose() * w.X, R, lambda);
  const Eigen::MatrixXd H = w.X * inv * w.X.transpose();
  GcvScore g;
  g.trace = H.trace();
  g.sse = (w.y - H * w.y).squaredNorm();
  const double dof = K - g.trace;
  g.score = dof > 1e-8 * K ? K * g.sse / (dof * dof) : std::numeric_limits<double>::infinity();
  return g;
}

inline Vector default_lambda_grid() {
  Vector grid{0.0};
  for (int i = 0; i < 50; ++i) grid.push_back(std::pow(10.0, -6.0 + 10.0 * i / 49.0));
  return grid;
}

/// Minimises GCV over the grid; ties go to the larger lambda. Candidates with
/// K - tr(H) ~ 0 or a singular system are skipped with a diagnostic.
inline FitResult gcv_select(const DesignMatrix& design, std::span<const double> beta_hats, std::span<const double> lambda_grid) {
  if (lambda_grid.empty()) throw InputError("lambda grid is empty");
  std::vector<std::pair<double, double>> trace;
  std::vector<std::string> diag;
  std::optional<double> best_lambda;
  double best = std::numeric_limits<double>::infinity();
  for (double lambda : lambda_grid) {
    if (lambda < 0.0) throw InputError("lambda values must be non-negative");
    try {
      const auto g = gcv_score(design, beta_hats, lambda);
      if (!std::isfinite(g.score)) {
        diag.push_back("lambda=" + detail::format_double(lambda) + " excluded: K - tr(H) is zero");
        continue;
      }
      trace.emplace_back(lambda, g.score);
      if (g.score < best || (g.score == best && best_lambda && lambda > *best_lambda)) {
        best = g.score;
        best_lambda = lambda;
      }
    } catch (const NumericalError& e) {
      diag.push_back("lambda=" + detail::format_double(lambda) + " excluded: " + e.what());
    }
  }
  if (!best_lambda) throw NumericalError("no lambda in the grid gives a usable GCV score");
  auto fit = fit_weighted_ridge(design, beta_hats, *best_lambda);
  fit.gcv_trace = std::move(trace);
  fit.diagnostics = std::move(diag);
  return fit;
}

/// h'(x) = phi(x)'b and h(x) = [int_0^x phi]'b with normal-theory bands.
inline EffectCurve effect_from_fit(const FitResult& fit, const BasisSet& basis, std::span<const double> x_grid,
                                   double level = 0.95) {
  const auto L = static_cast<Eigen::Index>(basis.size());
  if (fit.b_hat.size() != L) throw InputError("fit and basis dimensions disagree");
  const double zq = detail::normal_quantile(0.5 + level / 2.0);
  EffectCurve c;
  c.level = level;
  c.provenance = CurveProvenance::parametric_frequentist;
  c.x_grid.assign(x_grid.begin(), x_grid.end());
  Vector hp, hp_lo, hp_hi;
  Eigen::VectorXd phi(L), prim(L);
  for (double x : x_grid) {
    for (Eigen::Index l = 0; l < L; ++l) {
      phi(l) = basis.evaluate(static_cast<std::size_t>(l), x);
      prim(l) = x == 0.0 ? 0.0 : basis.antiderivative(static_cast<std::size_t>(l), 0.0, x);
    }
    const double h = prim.dot(fit.b_hat);
    const double sd_h = std::sqrt(std::max(0.0, prim.dot(fit.cov_b * prim)));
    const double d = phi.dot(fit.b_hat);
    const double sd_d = std::sqrt(std::max(0.0, phi.dot(fit.cov_b * phi)));
    c.h.push_back(h);
    c.h_lo.push_back(h - zq * sd_h);
    c.h_hi.push_back(h + zq * sd_h);
    hp.push_back(d);
    hp_lo.push_back(d - zq * sd_d);
    hp_hi.push_back(d + zq * sd_d);
  }
  c.h_prime = std::move(hp);
  c.h_prime_lo = std::move(hp_lo);
  c.h_prime_hi = std::move(hp_hi);
  return c;
}

}  // namespace sss
