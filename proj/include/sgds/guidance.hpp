#pragma once

// Surprise-augmented guidance score:
//
//   s = (1 - w_ctx) s_uncond + (w_ctx - w_txt) s_ctx + w_txt s_full - w_s grad S
//
// The three probability-score coefficients always sum to one.

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "sgds/error.hpp"

namespace sgds {

struct GuidanceWeights {
  double omega_ctx = 1.5;
  double omega_txt = 2.0;
  double omega_s = 0.5;

  void validate() const {
    require(std::isfinite(omega_ctx) && std::isfinite(omega_txt) && std::isfinite(omega_s),
            "guidance weights must be finite");
    require(omega_s >= 0.0, "omega_s must be >= 0");
  }
  bool operator==(const GuidanceWeights&) const = default;
};

struct ScoreTerms {
  std::vector<double> s_uncond;
  std::vector<double> s_ctx;
  std::vector<double> s_full;
  std::optional<std::vector<double>> grad_surprise;  // absent when omega_s == 0
};

struct GuidanceCoefficients {
  double c_uncond;
  double c_ctx;
  double c_full;
  double c_surprise;
};

inline GuidanceCoefficients coefficients(const GuidanceWeights& w) {
  return {1.0 - w.omega_ctx, w.omega_ctx - w.omega_txt, w.omega_txt, -w.omega_s};
}

namespace detail {

// out (+)= c * term; a zero coefficient leaves out untouched.
inline void accumulate_term(std::vector<double>& out, bool& started, double c, std::span<const double> term) {
  if (c == 0.0) return;
  if (!started) {
    out.resize(term.size());
    for (std::size_t i = 0; i < term.size(); ++i) out[i] = c * term[i];
    started = true;
    return;
  }
  for (std::size_t i = 0; i < term.size(); ++i) out[i] += c * term[i];
}

}  // namespace detail

inline std::vector<double> compose_score(const ScoreTerms& t, const GuidanceWeights& w) {
  w.validate();
  const std::size_t n = t.s_full.size();
  require_shape(t.s_uncond.size() == n && t.s_ctx.size() == n, "compose_score: score terms differ in length");
  if (w.omega_s > 0.0) {
    if (!t.grad_surprise) throw ContractViolation("compose_score: omega_s > 0 but no surprise gradient");
    require_shape(t.grad_surprise->size() == n, "compose_score: surprise gradient length mismatch");
  }
  const auto c = coefficients(w);
  std::vector<double> out;
  bool started = false;
  detail::accumulate_term(out, started, c.c_uncond, t.s_uncond);
  detail::accumulate_term(out, started, c.c_ctx, t.s_ctx);
  detail::accumulate_term(out, started, c.c_full, t.s_full);
  if (w.omega_s > 0.0) detail::accumulate_term(out, started, c.c_surprise, *t.grad_surprise);
  if (!started) out.assign(n, 0.0);
  return out;
}

}  // namespace sgds
