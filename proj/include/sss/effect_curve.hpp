#pragma once

#include <optional>
#include <string>

#include "sss/common.hpp"

namespace sss {

enum class CurveProvenance { susie_posterior, parametric_frequentist };

inline std::string to_string(CurveProvenance p) {
  return p == CurveProvenance::susie_posterior ? "susie_posterior" : "parametric_frequentist";
}

/// Pointwise effect estimates h(x) (anchored at h(0) = 0) with a band.
struct EffectCurve {
  Vector x_grid;
  Vector h;
  Vector h_lo, h_hi;
  std::optional<Vector> h_prime;
  std::optional<Vector> h_prime_lo, h_prime_hi;
  double level = 0.95;
  CurveProvenance provenance = CurveProvenance::parametric_frequentist;
};

}  // namespace sss
