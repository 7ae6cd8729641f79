// sss: stratification, scalar-on-function regression and SuSiE change-point
// analysis of instrumental-variable data.

#include <chrono>
#include <ctime>
#include <iostream>

#include <CLI11.hpp>

#include "sss/io.hpp"

namespace {

using namespace sss;

constexpr const char* kVersion = "0.1.0";

enum ExitCode { ok = 0, input_error = 2, numerical_error = 3, not_converged = 4 };

struct CommonOptions {
  std::string input;
  std::string config;
  std::string z_col = "z", x_col = "x", y_col = "y";
  char delim = ',';
  std::string output_dir = ".";
  bool force = false;
  int threads = 0;
  // flags overriding the config file, applied in this order
  std::vector<std::pair<std::string, std::string>> overrides;
  std::string exposure_transform = "identity";
  std::string exposure_terms = "0,1";
  bool bic = false;
};

struct RunContext {
  std::string subcommand;
  std::vector<std::string> argv;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  std::time_t started = std::time(nullptr);
};

void add_common(CLI::App* app, CommonOptions& o, bool needs_input = true) {
  auto* in = app->add_option("-i,--input", o.input, "Input CSV with instrument, exposure and outcome columns");
  if (needs_input) in->required();
  app->add_option("-c,--config", o.config, "key = value configuration file");
  app->add_option("--z-col", o.z_col, "Instrument column name");
  app->add_option("--x-col", o.x_col, "Exposure column name");
  app->add_option("--y-col", o.y_col, "Outcome column name");
  app->add_option("--delimiter", o.delim, "Field delimiter");
  app->add_option("-o,--output-dir", o.output_dir, "Directory for results");
  app->add_flag("--force", o.force, "Overwrite existing output files");
  app->add_option("--threads", o.threads, "Worker threads (default: SSS_THREADS or 1)");
  auto over = [&o](const std::string& key) {
    return [&o, key](const std::string& v) { o.overrides.emplace_back(key, v); };
  };
  app->add_option_function<std::string>("-K,--strata", over("strata_count"), "Number of strata");
  app->add_option_function<std::string>("-S,--pre-stratum-size", over("pre_stratum_size"), "Pre-stratum size (multiple of K)");
  app->add_option_function<std::string>("-P,--candidates", over("candidate_count"), "Number of change-point candidates");
  app->add_option_function<std::string>("-L,--max-effects", over("max_effects"), "Number of single effects");
  app->add_option_function<std::string>("--se-order", over("se_order"), "first | second");
  app->add_option_function<std::string>("--stratifier", over("stratifier"), "doubly_ranked | residual");
  app->add_option_function<std::string>("--knot-range", over("knot_quantile_range"), "lo,hi knot quantile range");
  app->add_option_function<std::string>("--seed", over("seed"), "Random seed");
  app->add_option_function<std::string>("--weak-threshold", over("weak_stratum_threshold"), "Weak-stratum |alpha|/se cut-off");
  app->add_option("--exposure-transform", o.exposure_transform, "identity | log (residual stratification)");
  app->add_option("--exposure-terms", o.exposure_terms, "Candidate instrument powers, e.g. 0,1,2");
  app->add_flag("--bic", o.bic, "Select exposure-model terms by BIC");
}

AnalysisConfig resolve_config(const CommonOptions& o) {
  AnalysisConfig cfg;
  if (!o.config.empty()) cfg = load_config(o.config, cfg);
  for (const auto& [k, v] : o.overrides) apply_config_value(cfg, k, v);
  return cfg;
}

ExposureModelSpec resolve_model(const CommonOptions& o) {
  ExposureModelSpec m;
  if (o.exposure_transform == "log")
    m.transform = ExposureTransform::log;
  else if (o.exposure_transform != "identity")
    throw InputError("exposure transform must be identity or log");
  m.candidate_powers.clear();
  for (const auto& part : detail::split_line(o.exposure_terms, ',')) {
    const auto v = detail::parse_double(part);
    if (!v || *v != std::floor(*v)) throw InputError("exposure terms must be integers: " + o.exposure_terms);
    m.candidate_powers.push_back(static_cast<int>(*v));
  }
  m.selection = o.bic ? TermSelection::bic : TermSelection::fixed;
  return m;
}

json model_json(const ExposureModelSpec& m) {
  return {{"transform", m.transform == ExposureTransform::log ? "log" : "identity"},
          {"candidate_powers", m.candidate_powers},
          {"selection", m.selection == TermSelection::bic ? "bic" : "fixed"}};
}

Dataset load_input(const CommonOptions& o) { return load_dataset(o.input, {o.z_col, o.x_col, o.y_col}, o.delim); }

/// Result envelope shared by every JSON output; contains no timing so that
/// seeded runs are byte-identical.
json envelope(const RunContext& ctx, const json& parameters, const std::string& input_digest) {
  const auto id = detail::hex64(detail::fnv1a(ctx.subcommand + "\n" + parameters.dump() + "\n" + input_digest));
  return {{"tool", "sss"},
          {"version", kVersion},
          {"subcommand", ctx.subcommand},
          {"run_id", id},
          {"manifest", "manifest.json"},
          {"parameters", parameters}};
}

void write_manifest(OutputSink& sink, const RunContext& ctx, const json& parameters, const std::string& input_path,
                    const std::string& input_digest, const json& env) {
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&ctx.started));
  json outputs = sink.written();
  json m = {{"tool", "sss"},
            {"version", kVersion},
            {"subcommand", ctx.subcommand},
            {"run_id", env["run_id"]},
            {"arguments", ctx.argv},
            {"config", parameters},
            {"input", {{"path", input_path}, {"digest", input_digest}}},
            {"seed", parameters.contains("analysis") ? parameters["analysis"]["seed"] : parameters.value("seed", json())},
            {"versions", {{"sss", kVersion}, {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                                          std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                                          std::to_string(EIGEN_MINOR_VERSION)},
                          {"compiler", __VERSION__}}},
            {"timing", {{"started_utc", stamp}, {"elapsed_seconds", elapsed}}},
            {"outputs", outputs}};
  sink.write_json("manifest.json", m);
}

std::string strata_csv(const StratumAssignment& a) {
  CsvTable t({"row", "stratum"});
  for (std::size_t i = 0; i < a.label.size(); ++i)
    t.row(i + 1, a.label[i] == StratumAssignment::excluded ? std::string("NA") : std::to_string(a.label[i] + 1));
  return t.text();
}

json analysis_parameters(const AnalysisConfig& cfg, const ExposureModelSpec& model) {
  return {{"analysis", config_json(cfg)}, {"exposure_model", model_json(model)}};
}

/// Reads knots from a file: numbers separated by commas, whitespace or newlines.
Vector read_knot_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open knot file: " + path);
  Vector knots;
  std::string tok;
  while (in >> tok) {
    for (const auto& part : detail::split_line(tok, ',')) {
      if (part.empty()) continue;
      const auto v = detail::parse_double(part);
      if (!v) throw InputError("knot file " + path + ": not a number: '" + part + "'");
      knots.push_back(*v);
    }
  }
  if (knots.empty()) throw InputError("knot file is empty: " + path);
  return knots;
}

/// indicator:<file> and pwl:<file> are expanded to inline knot lists.
std::string expand_basis(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) return spec;
  const std::string kind = spec.substr(0, colon), arg = spec.substr(colon + 1);
  if (kind == "poly" || arg.empty() || detail::parse_double(detail::split_line(arg, ',').front())) return spec;
  std::string out = kind + ":";
  const auto knots = read_knot_file(arg);
  for (std::size_t i = 0; i < knots.size(); ++i) out += (i ? "," : "") + detail::format_double(knots[i]);
  return out;
}

// ---- subcommands -----------------------------------------------------------

int cmd_stratify(const CommonOptions& o, const RunContext& ctx) {
  const auto cfg = resolve_config(o);
  const auto model = resolve_model(o);
  OutputSink sink(o.output_dir, o.force);
  sink.reserve({"stratify.json", "strata.csv", "manifest.json"});
  const auto data = load_input(o);
  const auto digest = detail::file_digest(o.input);
  const auto a = stratify(data, cfg, model);
  const json params = analysis_parameters(cfg, model);
  auto j = envelope(ctx, params, digest);
  std::vector<std::size_t> sizes;
  Vector x_means, z_means;
  for (const auto& m : a.members()) {
    sizes.push_back(m.size());
    double sx = 0.0, sz = 0.0;
    for (auto i : m) {
      sx += data.x()[i];
      sz += data.z()[i];
    }
    x_means.push_back(m.empty() ? 0.0 : sx / static_cast<double>(m.size()));
    z_means.push_back(m.empty() ? 0.0 : sz / static_cast<double>(m.size()));
  }
  j["method"] = to_string(a.method);
  j["strata_count"] = a.strata_count;
  j["stratum_sizes"] = sizes;
  j["exposure_means"] = x_means;
  j["instrument_means"] = z_means;
  j["excluded_count"] = a.excluded_count;
  sink.write_json("stratify.json", j);
  sink.write_text("strata.csv", strata_csv(a));
  write_manifest(sink, ctx, params, o.input, digest, j);
  return ok;
}

int cmd_summaries(const CommonOptions& o, const RunContext& ctx, bool gamma) {
  const auto cfg = resolve_config(o);
  const auto model = resolve_model(o);
  OutputSink sink(o.output_dir, o.force);
  sink.reserve({"summaries.json", "summaries.csv", "weights.csv", "manifest.json"});
  const auto data = load_input(o);
  const auto digest = detail::file_digest(o.input);
  const auto [a, s] = stratify_and_summarise(data, cfg, model, gamma);
  json params = analysis_parameters(cfg, model);
  params["with_gamma"] = gamma;
  auto j = envelope(ctx, params, digest);
  j["excluded_count"] = a.excluded_count;
  j["summaries"] = summaries_json(s);
  sink.write_json("summaries.json", j);
  sink.write_text("summaries.csv", summaries_csv(s));
  const auto grid = quantile_grid(data.x(), cfg.candidate_count);
  CsvTable w({"stratum", "t", "cum_above"});
  for (const auto& wf : estimate_weight_functions(data, a, grid))
    for (std::size_t k = 0; k < wf.grid.size(); ++k) w.row(wf.stratum + 1, wf.grid[k], wf.cum_above[k]);
  sink.write_text("weights.csv", w.text());
  write_manifest(sink, ctx, params, o.input, digest, j);
  return ok;
}

int cmd_test_linearity(const CommonOptions& o, const RunContext& ctx, const std::string& variant_name) {
  const auto cfg = resolve_config(o);
  const auto model = resolve_model(o);
  const auto variant = parse_q_variant(variant_name);
  OutputSink sink(o.output_dir, o.force);
  sink.reserve({"linearity.json", "manifest.json"});
  const auto data = load_input(o);
  const auto digest = detail::file_digest(o.input);
  const auto [a, s] = stratify_and_summarise(data, cfg, model, variant == QVariant::factorization);
  const auto q = q_test(s, variant);
  json params = analysis_parameters(cfg, model);
  params["variant"] = to_string(variant);
  auto j = envelope(ctx, params, digest);
  j["test"] = qtest_json(q);
  j["summaries"] = summaries_json(s);
  sink.write_json("linearity.json", j);
  write_manifest(sink, ctx, params, o.input, digest, j);
  return ok;
}

struct FitFlags {
  std::string basis = "poly:2";
  std::string mode = "sof";
  std::string lambda = "auto";
  int penalty_order = 0;
  double level = 0.95;
};

int cmd_fit(const CommonOptions& o, const RunContext& ctx, const FitFlags& f) {
  ParametricOptions opt;
  opt.config = resolve_config(o);
  opt.exposure_model = resolve_model(o);
  opt.basis = expand_basis(f.basis);
  if (f.mode == "sof")
    opt.mode = DesignMode::sof;
  else if (f.mode == "sos")
    opt.mode = DesignMode::sos;
  else
    throw InputError("--mode must be sof or sos");
  if (f.lambda != "auto") {
    const auto v = detail::parse_double(f.lambda);
    if (!v || *v < 0.0) throw InputError("--lambda must be 'auto' or a non-negative number");
    opt.lambda = *v;
  }
  opt.penalty_order = f.penalty_order;
  opt.level = f.level;
  parse_basis(opt.basis);  // validate before touching the data
  OutputSink sink(o.output_dir, o.force);
  sink.reserve({"fit.json", "curve.csv", "summaries.csv", "manifest.json"});
  const auto data = load_input(o);
  const auto digest = detail::file_digest(o.input);
  const auto a = run_parametric_analysis(data, opt);
  json params = analysis_parameters(opt.config, opt.exposure_model);
  params["basis"] = opt.basis;
  params["mode"] = f.mode;
  params["lambda"] = f.lambda;
  params["penalty_order"] = f.penalty_order;
  params["level"] = f.level;
  auto j = envelope(ctx, params, digest);
  j["fit"] = fit_json(a.fit);
  j["basis_size"] = a.basis.size();
  j["curve"] = curve_json(a.curve);
  j["summaries"] = summaries_json(a.summaries);
  sink.write_json("fit.json", j);
  sink.write_text("curve.csv", curve_csv(a.curve));
  sink.write_text("summaries.csv", summaries_csv(a.summaries));
  write_manifest(sink, ctx, params, o.input, digest, j);
  return ok;
}

struct SssFlags {
  bool test_linearity = false;
  std::string knots = "auto";
  double tol = 1e-6;
  std::string variant = "standard";
  double level = 0.95;
  std::size_t samples = 10000;
  int max_iter = 100;
};

SssOptions sss_options(const CommonOptions& o, const SssFlags& f) {
  SssOptions opt;
  opt.config = resolve_config(o);
  opt.exposure_model = resolve_model(o);
  opt.test_linearity = f.test_linearity;
  opt.q_variant = parse_q_variant(f.variant);
  opt.credible_level = f.level;
  opt.posterior_samples = f.samples;
  opt.susie_max_iter = f.max_iter;
  opt.susie_tol = f.tol;
  if (f.knots != "auto") opt.knots = read_knot_file(f.knots);
  if (!(f.tol > 0.0)) throw InputError("--tol must be positive");
  if (!(f.level > 0.0 && f.level < 1.0)) throw InputError("--level must lie in (0, 1)");
  if (f.samples < 1000) throw InputError("--samples must be at least 1000");
  return opt;
}

json sss_parameters(const SssOptions& opt, const SssFlags& f) {
  json p = analysis_parameters(opt.config, opt.exposure_model);
  p["test_linearity"] = f.test_linearity;
  p["variant"] = f.variant;
  p["level"] = f.level;
  p["samples"] = f.samples;
  p["max_iter"] = f.max_iter;
  p["tol"] = f.tol;
  p["knots"] = opt.knots.empty() ? json("auto") : json(opt.knots);
  return p;
}

/// `full` adds the effect curve, summaries and linearity output (the `sss` subcommand).
int cmd_sss(const CommonOptions& o, const RunContext& ctx, const SssFlags& f, bool full) {
  auto opt = sss_options(o, f);
  opt.sample_bands = full;
  OutputSink sink(o.output_dir, o.force);
  const std::string main = full ? "sss.json" : "susie.json";
  std::vector<std::string> planned{main, "pip.csv", "manifest.json"};
  if (full) {
    planned.push_back("summaries.csv");
    planned.push_back("curve.csv");
  }
  sink.reserve(planned);
  const auto data = load_input(o);
  const auto digest = detail::file_digest(o.input);
  const auto a = run_sss_analysis(data, opt);
  const json params = sss_parameters(opt, f);
  auto j = envelope(ctx, params, digest);
  j["status"] = a.fit.converged ? "ok" : "not_converged";
  j["warnings"] = a.warnings;
  j["susie"] = susie_json(a.fit, a.changepoints);
  if (full) {
    j["summaries"] = summaries_json(a.summaries);
    if (a.linearity) j["linearity"] = qtest_json(*a.linearity);
    j["curve"] = curve_json(a.curve);
  }
  sink.write_json(main, j);
  sink.write_text("pip.csv", pip_csv(a.fit));
  if (full) {
    sink.write_text("summaries.csv", summaries_csv(a.summaries));
    sink.write_text("curve.csv", curve_csv(a.curve));
  }
  write_manifest(sink, ctx, params, o.input, digest, j);
  return a.fit.converged ? ok : not_converged;
}

int cmd_predict(const CommonOptions& o, const RunContext& ctx, const SssFlags& f, const std::vector<double>& x_star) {
  if (x_star.empty()) throw InputError("--x-star is required");
  auto opt = sss_options(o, f);
  opt.sample_bands = false;
  OutputSink sink(o.output_dir, o.force);
  sink.reserve({"predict.json", "predictions.csv", "manifest.json"});
  const auto data = load_input(o);
  const auto digest = detail::file_digest(o.input);
  const auto a = run_sss_analysis(data, opt);
  json params = sss_parameters(opt, f);
  params["x_star"] = x_star;
  auto j = envelope(ctx, params, digest);
  j["status"] = a.fit.converged ? "ok" : "not_converged";
  j["l_star"] = a.fit.l_star;
  json preds = json::array();
  CsvTable t({"row", "x_star", "x", "y", "y_counterfactual"});
  std::optional<PosteriorSampler> sampler;
  if (!a.fit.detected.empty()) sampler.emplace(a.fit, opt.posterior_samples, opt.config.seed);
  for (double xs : x_star) {
    const auto cf = counterfactual_predict(a.fit, data, xs);
    json p = {{"x_star", xs}, {"mean_counterfactual_outcome", cf.mean}, {"effect", effect_posterior_value(a.fit, xs)}};
    if (sampler) {
      const auto [lo, hi] = sampler->interval(xs, f.level);
      p["effect_interval"] = {lo, hi};
    } else {
      p["effect_interval"] = nullptr;
    }
    preds.push_back(p);
    for (std::size_t i = 0; i < data.size(); ++i) t.row(i + 1, xs, data.x()[i], data.y()[i], cf.individual[i]);
  }
  j["predictions"] = preds;
  sink.write_json("predict.json", j);
  sink.write_text("predictions.csv", t.text());
  write_manifest(sink, ctx, params, o.input, digest, j);
  return a.fit.converged ? ok : not_converged;
}

struct SimFlags {
  std::string scenario = "part3-2";
  int effect_case = 2;
  std::string method = "sss";
  std::size_t n = 50000;
  std::size_t reps = 100;
  std::vector<double> quantiles{0.1, 0.3, 0.5, 0.7, 0.9};
  bool emit_data = false;
};

int cmd_simulate(const CommonOptions& o, const RunContext& ctx, const SimFlags& f) {
  AnalysisConfig cfg = resolve_config(o);
  const auto spec = named_scenario(f.scenario, f.effect_case);
  const std::uint64_t seed = cfg.seed;
  OutputSink sink(o.output_dir, o.force);
  json params = {{"scenario", scenario_json(spec)}, {"n", f.n}, {"seed", seed}};
  if (f.emit_data) {
    sink.reserve({"data.csv", "truth.csv", "simulate.json", "manifest.json"});
    const auto data = generate(spec, f.n, seed);
    write_dataset(data, (sink.dir() / "data.csv").string());
    CsvTable truth({"quantile", "x", "h", "h_prime"});
    for (double p : f.quantiles) {
      const double x = exposure_quantile(spec, p);
      const auto [h, hp] = true_effect(spec, x);
      truth.row(p, x, h, hp);
    }
    sink.write_text("truth.csv", truth.text());
    auto j = envelope(ctx, params, "");
    j["data"] = "data.csv";
    j["rows"] = f.n;
    sink.write_json("simulate.json", j);
    write_manifest(sink, ctx, params, "", "", j);
    return ok;
  }
  MethodConfig mc;
  mc.method = parse_study_method(f.method);
  mc.analysis = cfg;
  params["method"] = to_string(mc.method);
  params["reps"] = f.reps;
  params["quantiles"] = f.quantiles;
  params["analysis"] = config_json(cfg);
  sink.reserve({"study.json", "mse.csv", "replications.csv", "manifest.json"});
  const auto r = run_study(spec, mc, f.n, f.reps, f.quantiles, seed, o.threads);
  auto j = envelope(ctx, params, "");
  j["study"] = study_json(r);
  sink.write_json("study.json", j);
  sink.write_text("mse.csv", mse_csv(r));
  CsvTable reps({"replication", "seed", "failed", "quantile", "estimate", "truth", "detected", "changepoint_mode",
                 "changepoint_mean", "q_p_value"});
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t i = 0; i < r.replications.size(); ++i) {
    const auto& x = r.replications[i];
    const auto seed = std::to_string(x.seed);
    if (x.estimates.empty()) {
      reps.row(i + 1, seed, x.failed ? 1 : 0, nan, nan, nan, x.detected, x.changepoint_mode.value_or(nan),
               x.changepoint_mean.value_or(nan), x.q_p_value.value_or(nan));
      continue;
    }
    for (std::size_t k = 0; k < x.estimates.size(); ++k)
      reps.row(i + 1, seed, x.failed ? 1 : 0, r.eval_quantiles[k], x.estimates[k], r.truth[k], x.detected,
               x.changepoint_mode.value_or(nan), x.changepoint_mean.value_or(nan), x.q_p_value.value_or(nan));
  }
  sink.write_text("replications.csv", reps.text());
  write_manifest(sink, ctx, params, "", "", j);
  return ok;
}

void print_error(int code, const std::string& kind, const std::string& message) {
  json e = {{"status", "error"}, {"exit_code", code}, {"kind", kind}, {"message", message}};
  std::cerr << e.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stratification, scalar-on-function regression and SuSiE change-point analysis"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  CommonOptions common;
  RunContext ctx;
  for (int i = 0; i < argc; ++i) ctx.argv.emplace_back(argv[i]);

  auto* c_strat = app.add_subcommand("stratify", "Assign individuals to strata");
  add_common(c_strat, common);

  auto* c_sum = app.add_subcommand("summaries", "Per-stratum associations and Wald ratios");
  add_common(c_sum, common);
  bool with_gamma = false;
  c_sum->add_flag("--with-gamma", with_gamma, "Also estimate the instrument association with Z*X");

  auto* c_lin = app.add_subcommand("test-linearity", "Cochran-type Q test of effect linearity");
  add_common(c_lin, common);
  std::string variant = "standard";
  c_lin->add_option("--variant", variant, "standard | decomposition | factorization");

  auto* c_fit = app.add_subcommand("fit", "Parametric basis regression (SoF or SoS)");
  add_common(c_fit, common);
  FitFlags ff;
  c_fit->add_option("--basis", ff.basis, "poly:<degree> | indicator:<t1,...> | pwl:<t1,...>");
  c_fit->add_option("--mode", ff.mode, "sof | sos");
  c_fit->add_option("--lambda", ff.lambda, "Penalty weight or 'auto' for GCV");
  c_fit->add_option("--penalty-order", ff.penalty_order, "Derivative order of the roughness penalty (0: basis default)");
  c_fit->add_option("--level", ff.level, "Band level");

  SssFlags sf;
  auto add_sss_flags = [&sf](CLI::App* c) {
    c->add_option("--level", sf.level, "Credible level");
    c->add_option("--samples", sf.samples, "Posterior samples for credible intervals");
    c->add_option("--max-iter", sf.max_iter, "IBSS iteration cap");
    c->add_option("--tol", sf.tol, "ELBO convergence tolerance");
    c->add_option("--knots", sf.knots, "'auto' or a file of change-point candidates");
  };
  auto* c_susie = app.add_subcommand("susie", "Change-point SuSiE fit");
  add_common(c_susie, common);
  add_sss_flags(c_susie);

  auto* c_sss = app.add_subcommand("sss", "End-to-end stratification + SoF + SuSiE workflow");
  add_common(c_sss, common);
  add_sss_flags(c_sss);
  c_sss->add_flag("--test-linearity", sf.test_linearity, "Run the Q linearity test");
  c_sss->add_option("--variant", sf.variant, "Linearity test variant");

  auto* c_pred = app.add_subcommand("predict", "Counterfactual outcomes at --x-star");
  add_common(c_pred, common);
  add_sss_flags(c_pred);
  std::vector<double> x_star;
  c_pred->add_option("--x-star", x_star, "Target exposure level(s)")->required();

  auto* c_sim = app.add_subcommand("simulate", "Seeded simulation studies and synthetic data");
  add_common(c_sim, common, false);
  SimFlags simf;
  c_sim->add_option("--scenario", simf.scenario, "part1-<1..4> | part2 | part2-quadratic | part3-<1..4> | supp-<1..4>");
  c_sim->add_option("--case", simf.effect_case, "Effect case 1..4 (part3 scenarios)");
  c_sim->add_option("--method", simf.method,
                    "control_function | iv_regression | sos_polynomial | sos_indicator | sof_indicator | sss | q_test");
  c_sim->add_option("--n", simf.n, "Sample size");
  c_sim->add_option("--reps", simf.reps, "Replications");
  c_sim->add_option("--quantiles", simf.quantiles, "Evaluation quantiles");
  c_sim->add_flag("--emit-data", simf.emit_data, "Write one synthetic dataset instead of running a study");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error(input_error, "usage", e.what());
    return input_error;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    ctx.subcommand = sub->get_name();
    if (sub == c_strat) return cmd_stratify(common, ctx);
    if (sub == c_sum) return cmd_summaries(common, ctx, with_gamma);
    if (sub == c_lin) return cmd_test_linearity(common, ctx, variant);
    if (sub == c_fit) return cmd_fit(common, ctx, ff);
    if (sub == c_susie) return cmd_sss(common, ctx, sf, false);
    if (sub == c_sss) return cmd_sss(common, ctx, sf, true);
    if (sub == c_pred) return cmd_predict(common, ctx, sf, x_star);
    if (sub == c_sim) return cmd_simulate(common, ctx, simf);
  } catch (const InputError& e) {
    print_error(input_error, "input", e.what());
    return input_error;
  } catch (const NumericalError& e) {
    print_error(numerical_error, "numerical", e.what());
    return numerical_error;
  } catch (const std::exception& e) {
    print_error(numerical_error, "internal", e.what());
    return numerical_error;
  }
  return input_error;
}
