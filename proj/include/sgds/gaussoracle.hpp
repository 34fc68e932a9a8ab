#pragma once

// Linear-Gaussian testbed in which every score term of the guided sampler
// has a closed form:
//
//   context c ~ N(mu0, sigma0^2 I),  x | c, k ~ N(A c + b_k, sigma^2 I),
//   condition k uniform over the configured shifts,
//   surprise surrogate S_q(x) = lambda |x - mu_J|^2 / 2.
//
// With a single condition the composed score is affine in x, so the guided
// target is itself Gaussian and the DDPM sampler can be checked against it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "sgds/diffusion.hpp"
#include "sgds/error.hpp"
#include "sgds/guidance.hpp"
#include "sgds/parallel.hpp"
#include "sgds/rng.hpp"
#include "sgds/worldsim.hpp"

namespace sgds {

struct LinGaussModel {
  std::size_t d = 2;
  double A = 0.5;
  std::vector<std::vector<double>> b{{0.0, 0.0}};  // one shift per condition
  double sigma = 1.0;
  std::vector<double> mu0{0.0, 0.0};
  double sigma0 = 1.0;
  std::vector<double> mu_J{2.0, 2.0};
  double lambda = 1.0;

  std::size_t conditions() const { return b.size(); }

  void validate() const {
    require(d >= 1, "LinGaussModel: d must be >= 1");
    require(sigma > 0.0 && sigma0 > 0.0, "LinGaussModel: sigma and sigma0 must be > 0");
    require(lambda >= 0.0, "LinGaussModel: lambda must be >= 0");
    require(!b.empty(), "LinGaussModel: need at least one condition");
    for (const auto& bk : b) require_shape(bk.size() == d, "LinGaussModel: shift length != d");
    require_shape(mu0.size() == d && mu_J.size() == d, "LinGaussModel: mean length != d");
  }
};

namespace detail {

// Exact score of an equal-weight mixture of N(means[k], var I).
inline std::vector<double> mixture_score(std::span<const double> x, const std::vector<std::vector<double>>& means,
                                         double var) {
  std::vector<double> logw(means.size());
  for (std::size_t k = 0; k < means.size(); ++k) {
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - means[k][i]) * (x[i] - means[k][i]);
    logw[k] = -sq / (2.0 * var);
  }
  const double top = *std::max_element(logw.begin(), logw.end());
  double z = 0.0;
  for (auto& l : logw) z += (l = std::exp(l - top));
  std::vector<double> s(x.size(), 0.0);
  for (std::size_t k = 0; k < means.size(); ++k)
    for (std::size_t i = 0; i < x.size(); ++i) s[i] -= (logw[k] / z) * (x[i] - means[k][i]) / var;
  return s;
}

}  // namespace detail

inline ScoreTerms analytic_scores(const LinGaussModel& m, std::span<const double> x, std::span<const double> context,
                                  ConditionLabel cond) {
  m.validate();
  require_shape(x.size() == m.d && context.size() == m.d, "analytic_scores: vector length != d");
  require(!cond.is_null() && static_cast<std::size_t>(cond.id()) < m.conditions(),
          "analytic_scores: condition out of range");
  const double var = m.sigma * m.sigma;
  const double var_m = m.A * m.A * m.sigma0 * m.sigma0 + var;

  std::vector<std::vector<double>> ctx_means, prior_means;
  for (const auto& bk : m.b) {
    std::vector<double> cm(m.d), pm(m.d);
    for (std::size_t i = 0; i < m.d; ++i) {
      cm[i] = m.A * context[i] + bk[i];
      pm[i] = m.A * m.mu0[i] + bk[i];
    }
    ctx_means.push_back(std::move(cm));
    prior_means.push_back(std::move(pm));
  }

  ScoreTerms t;
  const auto& full_mean = ctx_means[static_cast<std::size_t>(cond.id())];
  t.s_full.resize(m.d);
  for (std::size_t i = 0; i < m.d; ++i) t.s_full[i] = -(x[i] - full_mean[i]) / var;
  t.s_ctx = detail::mixture_score(x, ctx_means, var);
  t.s_uncond = detail::mixture_score(x, prior_means, var_m);
  std::vector<double> gs(m.d);
  for (std::size_t i = 0; i < m.d; ++i) gs[i] = m.lambda * (x[i] - m.mu_J[i]);
  t.grad_surprise = std::move(gs);
  return t;
}

struct GuidedTarget {
  std::vector<double> mean;
  double variance = 0.0;  // isotropic
  double precision = 0.0;
};

inline GuidedTarget analytic_guided_target(const LinGaussModel& m, const GuidanceWeights& w,
                                           std::span<const double> context, ConditionLabel cond) {
  m.validate();
  w.validate();
  require(m.conditions() == 1, "analytic_guided_target: needs a single-condition model");
  require(!cond.is_null() && cond.id() == 0, "analytic_guided_target: condition must be 0");
  require_shape(context.size() == m.d, "analytic_guided_target: context length != d");
  const double var = m.sigma * m.sigma;
  const double var_m = m.A * m.A * m.sigma0 * m.sigma0 + var;
  const auto c = coefficients(w);

  const double tau = c.c_uncond / var_m + c.c_ctx / var + c.c_full / var + w.omega_s * m.lambda;
  if (!(tau > 0.0)) throw InvalidGuidedTarget(tau);
  GuidedTarget g;
  g.precision = tau;
  g.variance = 1.0 / tau;
  g.mean.resize(m.d);
  for (std::size_t i = 0; i < m.d; ++i) {
    const double mu_full = m.A * context[i] + m.b[0][i];
    const double mu_m = m.A * m.mu0[i] + m.b[0][i];
    g.mean[i] = (c.c_uncond * mu_m / var_m + c.c_ctx * mu_full / var + c.c_full * mu_full / var +
                 w.omega_s * m.lambda * m.mu_J[i]) /
                tau;
  }
  return g;
}

// The same world seen through the forward process at noise level alpha_bar:
// x_t = sqrt(ab) x + sqrt(1 - ab) eps. The context stays clean and the
// surprise anchor moves with the data.
inline LinGaussModel noised_model(const LinGaussModel& m, double alpha_bar) {
  LinGaussModel n = m;
  const double s = std::sqrt(alpha_bar);
  n.A = s * m.A;
  for (auto& bk : n.b)
    for (auto& v : bk) v *= s;
  n.sigma = std::sqrt(alpha_bar * m.sigma * m.sigma + (1.0 - alpha_bar));
  for (auto& v : n.mu_J) v *= s;
  return n;
}

struct OracleReport {
  GuidanceWeights weights;
  double lambda = 0.0;
  std::size_t n_samples = 0;
  int T = 0;
  std::vector<double> analytic_mean;
  double analytic_var = 0.0;
  std::vector<double> empirical_mean;
  std::vector<double> empirical_var;
  std::vector<double> mean_std_error;  // sqrt(analytic_var / n)
  double var_std_error = 0.0;          // analytic_var * sqrt(2 / (n - 1))
  std::vector<double> z_mean;
  std::vector<double> var_ratio;
  // Exact law of the discretized sampler (mean/variance recursion through
  // the affine composed score); separates sampler bugs from the gap between
  // composing noised scores and noising the composed target.
  std::vector<double> sampler_law_mean;
  double sampler_law_var = 0.0;
  std::vector<double> z_vs_sampler_law;
  bool mean_ok = false;
  bool var_ok = false;
};

inline constexpr double kOracleZLimit = 4.0;
inline constexpr double kOracleVarTolerance = 0.10;

inline std::vector<double> composed_noisy_score(const LinGaussModel& m, const GuidanceWeights& w,
                                                std::span<const double> x, std::span<const double> context,
                                                ConditionLabel cond, double alpha_bar) {
  return compose_score(analytic_scores(noised_model(m, alpha_bar), x, context, cond), w);
}

inline OracleReport sample_and_compare(const LinGaussModel& m, const GuidanceWeights& w,
                                       std::span<const double> context, ConditionLabel cond, std::size_t n_samples,
                                       const NoiseSchedule& sched, std::uint64_t seed, unsigned threads = 1) {
  require(n_samples >= 1, "sample_and_compare: need at least one sample");
  const auto target = analytic_guided_target(m, w, context, cond);
  const int T = sched.T();
  const double ab_T = sched.alpha_bar(T);
  const double init_sd = std::sqrt(ab_T * target.variance + 1.0 - ab_T);

  std::vector<std::vector<double>> samples(n_samples);
  parallel_for(n_samples, threads, [&](std::size_t k) {
    Rng rng = Rng::stream(seed, k);
    std::vector<double> x(m.d);
    for (std::size_t i = 0; i < m.d; ++i) x[i] = std::sqrt(ab_T) * target.mean[i] + init_sd * rng.normal();
    for (int t = T; t >= 1; --t) {
      const double ab = sched.alpha_bar(t);
      const auto eps = eps_from_score(composed_noisy_score(m, w, x, context, cond, ab), ab);
      x = sample_step(x, eps, t, sched, rng);
    }
    samples[k] = std::move(x);
  });

  OracleReport r;
  r.weights = w;
  r.lambda = m.lambda;
  r.n_samples = n_samples;
  r.T = T;
  r.analytic_mean = target.mean;
  r.analytic_var = target.variance;
  const double n = static_cast<double>(n_samples);
  r.empirical_mean.assign(m.d, 0.0);
  r.empirical_var.assign(m.d, 0.0);
  for (const auto& s : samples)
    for (std::size_t i = 0; i < m.d; ++i) r.empirical_mean[i] += s[i] / n;
  for (const auto& s : samples)
    for (std::size_t i = 0; i < m.d; ++i)
      r.empirical_var[i] += (s[i] - r.empirical_mean[i]) * (s[i] - r.empirical_mean[i]) / std::max(n - 1.0, 1.0);

  // Sampler law: per coordinate the composed score is -P x + h.
  std::vector<double> law_mean(m.d), zeros(m.d, 0.0), ones(m.d, 1.0);
  for (std::size_t i = 0; i < m.d; ++i) law_mean[i] = std::sqrt(ab_T) * target.mean[i];
  double law_var = init_sd * init_sd;
  for (int t = T; t >= 1; --t) {
    const double ab = sched.alpha_bar(t), beta = sched.beta(t), alpha = sched.alpha(t);
    const auto h = composed_noisy_score(m, w, zeros, context, cond, ab);
    const auto s1 = composed_noisy_score(m, w, ones, context, cond, ab);
    const double P = h[0] - s1[0];
    const double k = 1.0 - beta * P;
    for (std::size_t i = 0; i < m.d; ++i) law_mean[i] = (k * law_mean[i] + beta * h[i]) / std::sqrt(alpha);
    law_var = k * k * law_var / alpha + (t > 1 ? beta : 0.0);
  }
  r.sampler_law_mean = law_mean;
  r.sampler_law_var = law_var;

  r.mean_ok = true;
  r.var_ok = true;
  r.var_std_error = r.analytic_var * std::sqrt(2.0 / std::max(n - 1.0, 1.0));
  for (std::size_t i = 0; i < m.d; ++i) {
    const double se = std::sqrt(r.analytic_var / n);
    r.mean_std_error.push_back(se);
    r.z_mean.push_back((r.empirical_mean[i] - r.analytic_mean[i]) / se);
    r.z_vs_sampler_law.push_back((r.empirical_mean[i] - law_mean[i]) / std::sqrt(law_var / n));
    r.var_ratio.push_back(r.empirical_var[i] / r.analytic_var);
    r.mean_ok = r.mean_ok && std::abs(r.z_mean.back()) <= kOracleZLimit;
    r.var_ok = r.var_ok && std::abs(r.var_ratio.back() - 1.0) <= kOracleVarTolerance;
  }
  return r;
}

inline nlohmann::ordered_json to_json(const OracleReport& r) {
  return {
      {"weights", {{"omega_ctx", r.weights.omega_ctx}, {"omega_txt", r.weights.omega_txt}, {"omega_s", r.weights.omega_s}}},
      {"lambda", r.lambda},
      {"n_samples", r.n_samples},
      {"T", r.T},
      {"analytic_mean", r.analytic_mean},
      {"analytic_var", r.analytic_var},
      {"empirical_mean", r.empirical_mean},
      {"empirical_var", r.empirical_var},
      {"mean_std_error", r.mean_std_error},
      {"var_std_error", r.var_std_error},
      {"z_mean", r.z_mean},
      {"var_ratio", r.var_ratio},
      {"sampler_law_mean", r.sampler_law_mean},
      {"sampler_law_var", r.sampler_law_var},
      {"z_vs_sampler_law", r.z_vs_sampler_law},
      {"mean_ok", r.mean_ok},
      {"var_ok", r.var_ok},
  };
}

}  // namespace sgds
