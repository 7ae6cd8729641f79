#pragma once

// Stratification on the counterfactual exposure: residual (prediction) and
// doubly-ranked (matching) schemes. All rankings break ties by row index.

#include <optional>

#include <Eigen/Dense>

#include "sss/data.hpp"

namespace sss {

/// Per-individual stratum label, 0-based; `excluded` marks trailing leftovers.
struct StratumAssignment {
  static constexpr int excluded = -1;

  std::vector<int> label;
  int strata_count = 0;
  std::size_t excluded_count = 0;
  StratifierKind method = StratifierKind::doubly_ranked;

  [[nodiscard]] std::vector<std::vector<std::size_t>> members() const {
    std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(strata_count));
    for (std::size_t i = 0; i < label.size(); ++i)
      if (label[i] != excluded) out[static_cast<std::size_t>(label[i])].push_back(i);
    return out;
  }
};

enum class ExposureTransform { identity, log };
enum class TermSelection { fixed, bic };

/// Exposure model t^{-1}(X) = f(Z) + error, with f spanned by powers of z.
struct ExposureModelSpec {
  ExposureTransform transform = ExposureTransform::identity;
  std::vector<int> candidate_powers{0, 1};
  TermSelection selection = TermSelection::fixed;
};

namespace detail {

/// Indices 0..n-1 sorted by key, ties by index.
inline std::vector<std::size_t> rank_order(std::span<const double> key) {
  std::vector<std::size_t> idx(key.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });
  return idx;
}

struct LsFit {
  Vector fitted;
  double rss = 0.0;
};

inline LsFit least_squares_powers(std::span<const double> z, std::span<const double> target,
                                  const std::vector<int>& powers) {
  const auto n = static_cast<Eigen::Index>(z.size());
  LsFit out;
  out.fitted.assign(z.size(), 0.0);
  if (powers.empty()) {
    for (double t : target) out.rss += t * t;
    return out;
  }
  Eigen::MatrixXd design(n, static_cast<Eigen::Index>(powers.size()));
  Eigen::VectorXd rhs(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < powers.size(); ++j)
      design(i, static_cast<Eigen::Index>(j)) = std::pow(z[static_cast<std::size_t>(i)], powers[j]);
    rhs(i) = target[static_cast<std::size_t>(i)];
  }
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  const Eigen::VectorXd coef = qr.solve(rhs);
  const Eigen::VectorXd fit = design * coef;
  for (Eigen::Index i = 0; i < n; ++i) {
    out.fitted[static_cast<std::size_t>(i)] = fit(i);
    const double r = rhs(i) - fit(i);
    out.rss += r * r;
  }
  return out;
}

inline double bic(double rss, std::size_t n, std::size_t k) {
  const double nn = static_cast<double>(n);
  return nn * std::log(std::max(rss, 1e-300) / nn) + static_cast<double>(k) * std::log(nn);
}

/// Chooses the instrument terms of f: all subsets for <= 10 candidates,
/// forward stepwise otherwise.
inline std::vector<int> select_terms(std::span<const double> z, std::span<const double> target,
                                     const ExposureModelSpec& model) {
  const auto& cand = model.candidate_powers;
  if (model.selection == TermSelection::fixed) return cand;
  const std::size_t n = z.size();
  std::vector<int> best;
  double best_bic = std::numeric_limits<double>::infinity();
  if (cand.size() <= 10) {
    for (std::uint32_t mask = 1; mask < (1u << cand.size()); ++mask) {
      std::vector<int> terms;
      for (std::size_t j = 0; j < cand.size(); ++j)
        if (mask & (1u << j)) terms.push_back(cand[j]);
      const double b = bic(least_squares_powers(z, target, terms).rss, n, terms.size());
      if (b < best_bic) {
        best_bic = b;
        best = terms;
      }
    }
    return best;
  }
  std::vector<bool> used(cand.size(), false);
  best_bic = bic(least_squares_powers(z, target, {}).rss, n, 0);
  while (true) {
    std::optional<std::size_t> add;
    for (std::size_t j = 0; j < cand.size(); ++j) {
      if (used[j]) continue;
      auto trial = best;
      trial.push_back(cand[j]);
      const double b = bic(least_squares_powers(z, target, trial).rss, n, trial.size());
      if (b < best_bic) {
        best_bic = b;
        add = j;
      }
    }
    if (!add) break;
    used[*add] = true;
    best.push_back(cand[*add]);
  }
  return best;
}

}  // namespace detail

/// Ranks individuals by the residual of t^{-1}(x) on the fitted instrument
/// model; stratum k takes ranks k*m .. (k+1)*m - 1 with m = floor(n/K).
inline StratumAssignment residual_stratify(const Dataset& data, int strata_count,
                                           const ExposureModelSpec& model = {}) {
  const std::size_t n = data.size();
  if (strata_count < 1 || static_cast<std::size_t>(strata_count) > n)
    throw InputError("strata count must be in 1..n");
  if (model.candidate_powers.empty()) throw InputError("exposure model needs at least one term");

  const auto z = data.z();
  const double zbar = detail::mean(z);
  double zvar = 0.0;
  for (double v : z) zvar += (v - zbar) * (v - zbar);
  if (zvar == 0.0) throw NumericalError("degenerate instrument: zero variance");

  Vector target(data.x().begin(), data.x().end());
  if (model.transform == ExposureTransform::log) {
    for (double& v : target) {
      if (!(v > 0.0)) throw InputError("log transform requires all exposures to be positive");
      v = std::log(v);
    }
  }
  const auto terms = detail::select_terms(z, target, model);
  const auto fit = detail::least_squares_powers(z, target, terms);
  // Residuals at rounding level are exact zeros, so exact fits fall back to index order.
  double scale = 0.0;
  for (double v : target) scale = std::max(scale, std::abs(v));
  const double noise = 64.0 * std::numeric_limits<double>::epsilon() * std::max(scale, 1.0);
  Vector residual(n);
  for (std::size_t i = 0; i < n; ++i) {
    residual[i] = target[i] - fit.fitted[i];
    if (std::abs(residual[i]) <= noise) residual[i] = 0.0;
  }

  const auto order = detail::rank_order(residual);
  const std::size_t m = n / static_cast<std::size_t>(strata_count);
  StratumAssignment out;
  out.method = StratifierKind::residual;
  out.strata_count = strata_count;
  out.label.assign(n, StratumAssignment::excluded);
  for (std::size_t r = 0; r < m * static_cast<std::size_t>(strata_count); ++r)
    out.label[order[r]] = static_cast<int>(r / m);
  out.excluded_count = n - m * static_cast<std::size_t>(strata_count);
  return out;
}

/// Ranks by z into pre-strata of size S, ranks by x within each pre-stratum,
/// and gathers within-pre-stratum ranks k*S/K .. (k+1)*S/K - 1 into stratum k.
inline StratumAssignment doubly_ranked_stratify(const Dataset& data, int strata_count, int pre_stratum_size = 0) {
  const std::size_t n = data.size();
  if (pre_stratum_size == 0) pre_stratum_size = strata_count;
  if (strata_count < 1) throw InputError("strata count must be positive");
  if (pre_stratum_size < 1 || pre_stratum_size % strata_count != 0)
    throw InputError("pre-stratum size must be a positive multiple of the strata count");
  const auto S = static_cast<std::size_t>(pre_stratum_size);
  if (S > n) throw InputError("pre-stratum size exceeds the number of individuals");
  const std::size_t per = S / static_cast<std::size_t>(strata_count);

  const auto by_z = detail::rank_order(data.z());
  const auto x = data.x();
  StratumAssignment out;
  out.method = StratifierKind::doubly_ranked;
  out.strata_count = strata_count;
  out.label.assign(n, StratumAssignment::excluded);

  const std::size_t blocks = n / S;
  std::vector<std::size_t> block(S);
  for (std::size_t b = 0; b < blocks; ++b) {
    std::copy_n(by_z.begin() + static_cast<std::ptrdiff_t>(b * S), S, block.begin());
    std::sort(block.begin(), block.end(), [&](std::size_t i, std::size_t j) {
      return x[i] < x[j] || (x[i] == x[j] && i < j);
    });
    for (std::size_t r = 0; r < S; ++r) out.label[block[r]] = static_cast<int>(r / per);
  }
  out.excluded_count = n - blocks * S;
  return out;
}

inline StratumAssignment stratify(const Dataset& data, const AnalysisConfig& cfg,
                                  const ExposureModelSpec& model = {}) {
  cfg.validate(data.size());
  if (cfg.stratifier == StratifierKind::residual) return residual_stratify(data, cfg.strata_count, model);
  return doubly_ranked_stratify(data, cfg.strata_count, cfg.effective_pre_stratum_size());
}

}  // namespace sss
