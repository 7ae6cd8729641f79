#pragma once

// JSON / CSV serialisation of analysis results and the run manifest.

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "sss/simulation.hpp"

namespace sss {

using nlohmann::json;

namespace detail {

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// FNV-1a digest of a file's bytes.
inline std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open input file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return "fnv1a64:" + hex64(fnv1a(bytes));
}

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace detail

inline json config_json(const AnalysisConfig& c) {
  return {{"strata_count", c.strata_count},
          {"pre_stratum_size", c.effective_pre_stratum_size()},
          {"candidate_count", c.candidate_count},
          {"max_effects", c.max_effects},
          {"se_order", to_string(c.se_order)},
          {"stratifier", to_string(c.stratifier)},
          {"knot_quantile_range", {c.knot_lo, c.knot_hi}},
          {"seed", c.seed},
          {"weak_stratum_threshold", c.weak_stratum_threshold}};
}

inline json summary_json(const StratumSummary& s) {
  json j = {{"stratum", s.stratum + 1}, {"n_s", s.n_s},         {"alpha_hat", s.alpha_hat}, {"se_alpha", s.se_alpha},
            {"theta_hat", s.theta_hat}, {"se_theta", s.se_theta}, {"beta_hat", s.beta_hat},   {"se_beta", s.se_beta},
            {"x_bar", s.x_bar},         {"weak", s.weak}};
  if (s.gamma_hat) {
    j["gamma_hat"] = *s.gamma_hat;
    j["se_gamma"] = detail::optional_json(s.se_gamma);
  }
  return j;
}

inline json summaries_json(std::span<const StratumSummary> s) {
  json a = json::array();
  for (const auto& m : s) a.push_back(summary_json(m));
  return a;
}

inline json qtest_json(const QTestResult& q) {
  return {{"variant", to_string(q.variant)}, {"q", q.q}, {"df", q.df}, {"p_value", q.p_value}, {"estimates", q.estimates}};
}

inline json curve_json(const EffectCurve& c) {
  json j = {{"provenance", to_string(c.provenance)}, {"level", c.level}, {"x", c.x_grid},
            {"h", c.h},                              {"h_lo", c.h_lo},   {"h_hi", c.h_hi}};
  if (c.h_prime) j["h_prime"] = *c.h_prime;
  if (c.h_prime_lo) j["h_prime_lo"] = *c.h_prime_lo;
  if (c.h_prime_hi) j["h_prime_hi"] = *c.h_prime_hi;
  return j;
}

inline json credible_set_json(const CredibleSet& cs) {
  return {{"coverage", cs.coverage},       {"knot_min", cs.knot_min},   {"knot_max", cs.knot_max},
          {"posterior_mean", cs.posterior_mean}, {"posterior_mode", cs.mode_knot},
          {"one_sided_upper", cs.one_sided_upper}, {"size", cs.indices.size()}};
}

inline json susie_json(const SusieFit& f, std::span<const ChangePointReport> reports) {
  json pip = json::array(), mu = json::array();
  for (Eigen::Index l = 0; l < f.pi.rows(); ++l) {
    Vector prow, mrow;
    for (Eigen::Index p = 0; p < f.pi.cols(); ++p) {
      prow.push_back(f.pi(l, p));
      mrow.push_back(f.mu(l, p));
    }
    pip.push_back(prow);
    mu.push_back(mrow);
  }
  json cps = json::array();
  for (const auto& r : reports) cps.push_back({{"effect", r.effect + 1}, {"credible_set", credible_set_json(r.set)}});
  std::vector<int> detected;
  for (int l : f.detected) detected.push_back(l + 1);
  return {{"knots", f.knots},       {"l_star", f.l_star},         {"detected_effects", detected},
          {"sigma0_sq", f.sigma0_sq}, {"converged", f.converged}, {"iterations", f.iterations},
          {"elbo", f.elbo_trace},   {"pip", pip},                 {"posterior_mean_effect", mu},
          {"changepoints", cps}};
}

inline json fit_json(const FitResult& f) {
  json cov = json::array();
  for (Eigen::Index i = 0; i < f.cov_b.rows(); ++i) {
    Vector row;
    for (Eigen::Index j = 0; j < f.cov_b.cols(); ++j) row.push_back(f.cov_b(i, j));
    cov.push_back(row);
  }
  json trace = json::array();
  for (const auto& [l, g] : f.gcv_trace) trace.push_back({{"lambda", l}, {"gcv", g}});
  return {{"b_hat", Vector(f.b_hat.data(), f.b_hat.data() + f.b_hat.size())},
          {"cov_b", cov},
          {"lambda", f.lambda},
          {"gcv_trace", trace},
          {"diagnostics", f.diagnostics}};
}

inline json scenario_json(const ScenarioSpec& s) {
  static const char* effects[] = {"linear",    "one_changepoint", "two_changepoint_normal", "two_changepoint_lognormal",
                                  "quadratic", "indicator_step",  "exponential"};
  return {{"name", s.name},
          {"instrument", s.instrument == InstrumentKind::bernoulli_centered ? "bernoulli_centered" : "standard_normal"},
          {"instrument_effect", s.instrument_effect},
          {"exposure_link", s.link == ExposureLink::identity ? "identity" : "exp"},
          {"confounding", s.confounding == Confounding::simple ? "simple" : "complex"},
          {"effect_case", effects[static_cast<int>(s.effect)]},
          {"changepoint", s.changepoint}};
}

inline json study_json(const StudyResult& r) {
  json reps = json::array();
  for (std::size_t i = 0; i < r.replications.size(); ++i) {
    const auto& x = r.replications[i];
    json j = {{"replication", i + 1}, {"seed", x.seed}, {"failed", x.failed}};
    if (x.failed) j["error"] = x.error;
    if (!x.estimates.empty()) j["estimates"] = x.estimates;
    if (r.method.method == StudyMethod::sss) {
      j["detected"] = x.detected;
      j["changepoint_mode"] = detail::optional_json(x.changepoint_mode);
      j["changepoint_mean"] = detail::optional_json(x.changepoint_mean);
    }
    if (x.q_p_value) j["q_p_value"] = *x.q_p_value;
    reps.push_back(std::move(j));
  }
  json mse = json::array();
  for (double m : r.mse) mse.push_back(std::isfinite(m) ? json(m) : json(nullptr));
  json j = {{"scenario", scenario_json(r.scenario)},
            {"method", to_string(r.method.method)},
            {"target", targets_derivative(r.method.method) ? "h_prime" : "h"},
            {"analysis", config_json(r.method.analysis)},
            {"n", r.n},
            {"replications_requested", r.replications.size()},
            {"master_seed", r.master_seed},
            {"eval_quantiles", r.eval_quantiles},
            {"eval_points", r.eval_points},
            {"truth", r.truth},
            {"mse", mse},
            {"failures", r.failures},
            {"replications", reps}};
  if (r.method.method == StudyMethod::q_test) j["rejection_rate_5pct"] = r.rejection_rate(0.05);
  return j;
}

/// Output directory that refuses to overwrite existing files unless forced.
class OutputSink {
public:
  OutputSink(std::filesystem::path dir, bool force) : dir_(std::move(dir)), force_(force) {}

  /// Fails up front if any planned file exists and overwriting is not allowed.
  void reserve(const std::vector<std::string>& names) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw InputError("cannot create output directory: " + dir_.string());
    for (const auto& n : names) {
      if (!force_ && std::filesystem::exists(dir_ / n))
        throw InputError("refusing to overwrite existing file (use --force): " + (dir_ / n).string());
    }
  }

  void write_text(const std::string& name, const std::string& text) {
    const auto path = dir_ / name;
    if (!force_ && std::filesystem::exists(path))
      throw InputError("refusing to overwrite existing file (use --force): " + path.string());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write output file: " + path.string());
    out << text;
    written_.push_back(name);
  }

  void write_json(const std::string& name, const json& j) { write_text(name, j.dump(2) + "\n"); }

  [[nodiscard]] const std::vector<std::string>& written() const { return written_; }
  [[nodiscard]] const std::filesystem::path& dir() const { return dir_; }

private:
  std::filesystem::path dir_;
  bool force_;
  std::vector<std::string> written_;
};

/// Long-format CSV builder; numbers in shortest round-trip form.
class CsvTable {
public:
  explicit CsvTable(std::vector<std::string> header) : cols_(header.size()) { add_row_text(header); }

  template <class... Ts>
  void row(const Ts&... cells) {
    std::vector<std::string> r;
    (r.push_back(cell(cells)), ...);
    add_row_text(r);
  }

  [[nodiscard]] const std::string& text() const { return text_; }

private:
  static std::string cell(double v) { return std::isfinite(v) ? detail::format_double(v) : std::string("NA"); }
  static std::string cell(int v) { return std::to_string(v); }
  static std::string cell(std::size_t v) { return std::to_string(v); }
  static std::string cell(const std::string& v) { return v; }
  static std::string cell(const char* v) { return v; }

  void add_row_text(const std::vector<std::string>& r) {
    if (r.size() != cols_) throw std::logic_error("CSV row width mismatch");
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) text_ += ',';
      text_ += r[i];
    }
    text_ += '\n';
  }

  std::size_t cols_;
  std::string text_;
};

inline std::string summaries_csv(std::span<const StratumSummary> s) {
  CsvTable t({"stratum", "n_s", "x_bar", "alpha_hat", "se_alpha", "theta_hat", "se_theta", "beta_hat", "se_beta",
              "ci_lo", "ci_hi"});
  for (const auto& m : s)
    t.row(m.stratum + 1, m.n_s, m.x_bar, m.alpha_hat, m.se_alpha, m.theta_hat, m.se_theta, m.beta_hat, m.se_beta,
          m.beta_hat - 1.959963984540054 * m.se_beta, m.beta_hat + 1.959963984540054 * m.se_beta);
  return t.text();
}

inline std::string curve_csv(const EffectCurve& c) {
  CsvTable t({"x", "quantity", "estimate", "lower", "upper", "level", "provenance"});
  for (std::size_t i = 0; i < c.x_grid.size(); ++i)
    t.row(c.x_grid[i], "h", c.h[i], c.h_lo[i], c.h_hi[i], c.level, to_string(c.provenance));
  if (c.h_prime) {
    const auto& hp = *c.h_prime;
    for (std::size_t i = 0; i < c.x_grid.size(); ++i) {
      const double lo = c.h_prime_lo ? (*c.h_prime_lo)[i] : hp[i];
      const double hi = c.h_prime_hi ? (*c.h_prime_hi)[i] : hp[i];
      t.row(c.x_grid[i], "h_prime", hp[i], lo, hi, c.level, to_string(c.provenance));
    }
  }
  return t.text();
}

inline std::string pip_csv(const SusieFit& f) {
  CsvTable t({"effect", "knot_index", "knot", "pip", "posterior_mean", "posterior_sd", "detected"});
  for (Eigen::Index l = 0; l < f.pi.rows(); ++l) {
    const bool det = std::find(f.detected.begin(), f.detected.end(), static_cast<int>(l)) != f.detected.end();
    for (Eigen::Index p = 0; p < f.pi.cols(); ++p)
      t.row(static_cast<int>(l) + 1, static_cast<int>(p), f.knots[static_cast<std::size_t>(p)], f.pi(l, p), f.mu(l, p),
            f.sigma(l, p), det ? 1 : 0);
  }
  return t.text();
}

inline std::string mse_csv(const StudyResult& r) {
  CsvTable t({"scenario", "method", "target", "quantile", "x", "truth", "mse"});
  for (std::size_t j = 0; j < r.eval_points.size(); ++j)
    t.row(r.scenario.name, to_string(r.method.method), targets_derivative(r.method.method) ? "h_prime" : "h",
          r.eval_quantiles[j], r.eval_points[j], r.truth[j], r.mse[j]);
  return t.text();
}

}  // namespace sss
