#pragma once

// Dataset container, delimited-text ingestion and the declarative run
// configuration.

#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sss/common.hpp"

namespace sss {

/// Aligned instrument / exposure / outcome columns, one row per individual.
class Dataset {
public:
  Dataset() = default;
  Dataset(Vector z, Vector x, Vector y) : z_(std::move(z)), x_(std::move(x)), y_(std::move(y)) {
    if (z_.size() != x_.size() || x_.size() != y_.size())
      throw InputError("dataset columns have different lengths");
    if (z_.empty()) throw InputError("dataset is empty");
    for (std::size_t i = 0; i < z_.size(); ++i)
      if (!std::isfinite(z_[i]) || !std::isfinite(x_[i]) || !std::isfinite(y_[i]))
        throw InputError("non-finite value in row " + std::to_string(i + 1));
  }

  [[nodiscard]] std::size_t size() const { return z_.size(); }
  [[nodiscard]] std::span<const double> z() const { return z_; }
  [[nodiscard]] std::span<const double> x() const { return x_; }
  [[nodiscard]] std::span<const double> y() const { return y_; }

private:
  Vector z_, x_, y_;
};

enum class SeOrder { first, second };
enum class StratifierKind { residual, doubly_ranked };

inline std::string to_string(SeOrder o) { return o == SeOrder::first ? "first" : "second"; }
inline std::string to_string(StratifierKind k) {
  return k == StratifierKind::residual ? "residual" : "doubly_ranked";
}

struct AnalysisConfig {
  int strata_count = 10;       // K
  int pre_stratum_size = 0;    // S; 0 means "same as K"
  int candidate_count = 100;   // P
  int max_effects = 10;        // L
  SeOrder se_order = SeOrder::second;
  StratifierKind stratifier = StratifierKind::doubly_ranked;
  double knot_lo = 0.05;
  double knot_hi = 0.95;
  std::uint64_t seed = 1;
  double weak_stratum_threshold = 4.0;

  [[nodiscard]] int effective_pre_stratum_size() const {
    return pre_stratum_size > 0 ? pre_stratum_size : strata_count;
  }

  void validate(std::size_t n) const {
    if (strata_count <= 1) throw InputError("strata_count must exceed 1");
    if (static_cast<std::size_t>(strata_count) > n)
      throw InputError("strata_count exceeds the number of individuals");
    if (!(knot_lo >= 0.0 && knot_lo < knot_hi && knot_hi <= 1.0))
      throw InputError("knot_quantile_range must satisfy 0 <= lo < hi <= 1");
    if (max_effects < 1) throw InputError("max_effects must be at least 1");
    if (candidate_count < 1) throw InputError("candidate_count must be at least 1");
    const int s = effective_pre_stratum_size();
    if (stratifier == StratifierKind::doubly_ranked && (s <= 0 || s % strata_count != 0))
      throw InputError("pre_stratum_size must be a positive multiple of strata_count");
  }
};

namespace detail {

inline std::vector<std::string> split_line(std::string_view line, char delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    auto field = line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
    while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.remove_suffix(1);
    while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
    if (field.size() >= 2 && field.front() == '"' && field.back() == '"')
      field = field.substr(1, field.size() - 2);
    out.emplace_back(field);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

/// Shortest decimal form that reads back to the same double.
inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

}  // namespace detail

struct ColumnMap {
  std::string z = "z";
  std::string x = "x";
  std::string y = "y";
};

/// Reads a delimited text file with a header row. Rows keep file order;
/// blank or non-numeric cells in mapped columns are rejected with the data
/// row number (1-based, header excluded).
inline Dataset load_dataset(const std::string& path, const ColumnMap& columns = {}, char delim = ',') {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open input file: " + path);

  std::string line;
  if (!std::getline(in, line)) throw InputError("input file has no header: " + path);
  const auto header = detail::split_line(line, delim);
  auto find_col = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw InputError("column '" + name + "' not found in " + path);
  };
  const std::array<std::size_t, 3> idx{find_col(columns.z), find_col(columns.x), find_col(columns.y)};
  const std::array<const std::string*, 3> names{&columns.z, &columns.x, &columns.y};

  Vector z, x, y;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    const auto fields = detail::split_line(line, delim);
    std::array<double, 3> vals{};
    for (int c = 0; c < 3; ++c) {
      const std::size_t j = idx[static_cast<std::size_t>(c)];
      std::optional<double> v;
      if (j < fields.size()) v = detail::parse_double(fields[j]);
      if (!v)
        throw InputError("row " + std::to_string(row) + ": missing or non-numeric value in column '" +
                         *names[static_cast<std::size_t>(c)] + "'");
      vals[static_cast<std::size_t>(c)] = *v;
    }
    z.push_back(vals[0]);
    x.push_back(vals[1]);
    y.push_back(vals[2]);
  }
  if (z.empty()) throw InputError("dataset is empty: " + path);
  return Dataset(std::move(z), std::move(x), std::move(y));
}

inline void write_dataset(const Dataset& data, const std::string& path, const ColumnMap& columns = {},
                          char delim = ',') {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write file: " + path);
  out << columns.z << delim << columns.x << delim << columns.y << '\n';
  for (std::size_t i = 0; i < data.size(); ++i)
    out << detail::format_double(data.z()[i]) << delim << detail::format_double(data.x()[i]) << delim
        << detail::format_double(data.y()[i]) << '\n';
}

/// Applies `key = value` pairs onto a config. Unknown keys are an error.
inline void apply_config_value(AnalysisConfig& cfg, const std::string& key, const std::string& value) {
  auto as_int = [&] {
    int v = 0;
    const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc{} || p != value.data() + value.size())
      throw InputError("config '" + key + "' expects an integer, got '" + value + "'");
    return v;
  };
  auto as_double = [&] {
    auto v = detail::parse_double(value);
    if (!v) throw InputError("config '" + key + "' expects a number, got '" + value + "'");
    return *v;
  };
  if (key == "strata_count" || key == "K") {
    cfg.strata_count = as_int();
  } else if (key == "pre_stratum_size" || key == "S") {
    cfg.pre_stratum_size = as_int();
  } else if (key == "candidate_count" || key == "P") {
    cfg.candidate_count = as_int();
  } else if (key == "max_effects" || key == "L") {
    cfg.max_effects = as_int();
  } else if (key == "se_order") {
    if (value == "first")
      cfg.se_order = SeOrder::first;
    else if (value == "second")
      cfg.se_order = SeOrder::second;
    else
      throw InputError("se_order must be first or second");
  } else if (key == "stratifier") {
    if (value == "residual")
      cfg.stratifier = StratifierKind::residual;
    else if (value == "doubly_ranked")
      cfg.stratifier = StratifierKind::doubly_ranked;
    else
      throw InputError("stratifier must be residual or doubly_ranked");
  } else if (key == "knot_quantile_range") {
    const auto parts = detail::split_line(value, ',');
    if (parts.size() != 2) throw InputError("knot_quantile_range expects 'lo,hi'");
    auto lo = detail::parse_double(parts[0]);
    auto hi = detail::parse_double(parts[1]);
    if (!lo || !hi) throw InputError("knot_quantile_range expects two numbers");
    cfg.knot_lo = *lo;
    cfg.knot_hi = *hi;
  } else if (key == "seed") {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc{} || p != value.data() + value.size()) throw InputError("seed must be unsigned");
    cfg.seed = v;
  } else if (key == "weak_stratum_threshold") {
    cfg.weak_stratum_threshold = as_double();
  } else {
    throw InputError("unknown config key '" + key + "'");
  }
}

inline AnalysisConfig load_config(const std::string& path, AnalysisConfig cfg = {}) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos)
      throw InputError("config line " + std::to_string(lineno) + ": expected key = value");
    apply_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

}  // namespace sss
