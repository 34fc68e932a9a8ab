#include <gtest/gtest.h>

#include <bit>
#include <numeric>

#include "sgds/diffusion.hpp"

namespace sgds {
namespace {

WorldParams tiny_world() {
  WorldParams w;
  w.D = 6;
  w.F = 2;
  return w;
}

DenoiserConfig tiny_cfg() {
  DenoiserConfig c;
  c.hidden = {7};
  c.cond_dim = 3;
  return c;
}

FrameChunk random_chunk(Rng& rng, std::size_t f, std::size_t d) { return FrameChunk(f, d, rng.normal_vector(f * d)); }

class CountingSurprise final : public SurpriseModel {
 public:
  mutable int calls = 0;
  double surprise(const FrameChunk&, const FrameChunk&) const override {
    ++calls;
    return 0.0;
  }
  std::vector<double> surprise_grad(const FrameChunk&, const FrameChunk& c) const override {
    ++calls;
    return std::vector<double>(c.size(), 0.0);
  }
};

// Pulls every candidate value toward a fixed target: S = |x - target|^2 / 2.
class QuadraticSurprise final : public SurpriseModel {
 public:
  explicit QuadraticSurprise(double target) : target_(target) {}
  double surprise(const FrameChunk&, const FrameChunk& c) const override {
    double s = 0.0;
    for (double v : c.values) s += 0.5 * (v - target_) * (v - target_);
    return s;
  }
  std::vector<double> surprise_grad(const FrameChunk&, const FrameChunk& c) const override {
    std::vector<double> g(c.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = c.values[i] - target_;
    return g;
  }

 private:
  double target_;
};

TEST(Schedule, LinearBetas) {
  const auto s = make_schedule(100, 1e-4, 0.02);
  EXPECT_EQ(s.T(), 100);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(100), 0.02);
  double prod = 1.0;
  for (int t = 1; t <= 100; ++t) {
    prod *= 1.0 - s.beta(t);
    EXPECT_NEAR(s.alpha_bar(t), prod, 1e-15);
    if (t > 1) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
  }
  EXPECT_THROW(s.alpha_bar(0), ContractViolation);
  EXPECT_THROW(s.alpha_bar(101), ContractViolation);
  EXPECT_THROW(make_schedule(10, 0.1, 0.05), ContractViolation);
}

TEST(Schedule, HandExamples) {
  EXPECT_NEAR(make_schedule(1, 0.02, 0.02).alpha_bar(1), 0.98, 1e-15);
  const auto s = make_schedule(2, 0.1, 0.2);
  EXPECT_NEAR(s.alpha_bar(1), 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar(2), 0.72, 1e-15);
}

TEST(ForwardNoise, Examples) {
  const std::vector<double> x0{1.0}, e{0.0};
  EXPECT_DOUBLE_EQ(forward_noise(x0, e, 0.81)[0], 0.9);
  EXPECT_DOUBLE_EQ(forward_noise(std::vector<double>{0.0}, std::vector<double>{1.0}, 0.72)[0], std::sqrt(0.28));
  EXPECT_DOUBLE_EQ(forward_noise(x0, std::vector<double>{1.0}, 1.0)[0], 1.0);
  EXPECT_DOUBLE_EQ(forward_noise(std::vector<double>{2.0}, e, 0.64)[0], 1.6);
  EXPECT_THROW(forward_noise(x0, std::vector<double>{1.0, 2.0}, 0.5), ShapeError);
}

TEST(ScoreConversion, ExamplesAndRoundTrip) {
  EXPECT_DOUBLE_EQ(score_from_eps(std::vector<double>{1.0}, 0.75)[0], -2.0);
  EXPECT_EQ(score_from_eps(std::vector<double>{0.0}, 0.75)[0], 0.0);
  EXPECT_THROW(score_from_eps(std::vector<double>{1.0}, 1.0), ContractViolation);
  EXPECT_THROW(eps_from_score(std::vector<double>{1.0}, 1.0), ContractViolation);
  Rng rng(5);
  const auto s = make_schedule(100, 1e-4, 0.02);
  for (int t : {1, 37, 100}) {
    const auto e = rng.normal_vector(12);
    const auto back = eps_from_score(score_from_eps(e, t, s), t, s);
    for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(back[i], e[i], 1e-12);
  }
}

TEST(Tweedie, HandExamples) {
  const std::vector<double> xt(5, 0.9), e(5, 0.5);
  for (double v : tweedie_x0(xt, e, 0.81)) EXPECT_NEAR(v, (0.9 - std::sqrt(0.19) * 0.5) / 0.9, 1e-15);
  EXPECT_NEAR(tweedie_x0(xt, e, 0.81)[0], 0.7578, 1e-4);
  EXPECT_EQ(tweedie_x0(xt, std::vector<double>(5, 0.0), 1.0), xt);
}

TEST(Tweedie, InvertsForwardNoiseWithTrueEps) {
  EXPECT_NEAR(tweedie_x0(std::vector<double>{1.0}, std::vector<double>{0.1}, 0.81)[0], (1.0 - std::sqrt(0.19) * 0.1) / 0.9,
              1e-15);
  EXPECT_NEAR(tweedie_x0(std::vector<double>{1.0}, std::vector<double>{0.1}, 0.81)[0], 1.0626, 1e-4);
  Rng rng(6);
  const auto x0 = rng.normal_vector(10), e = rng.normal_vector(10);
  const auto back = tweedie_x0(forward_noise(x0, e, 0.3), e, 0.3);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(back[i], x0[i], 1e-12);
}

TEST(SampleStep, NoNoiseAtFinalStep) {
  const auto s = make_schedule(10, 1e-4, 0.02);
  Rng a(1), b(2);
  const std::vector<double> x{0.3, -0.2}, e{0.5, 0.5};
  EXPECT_EQ(sample_step(x, e, 1, s, a), sample_step(x, e, 1, s, b));
  EXPECT_NE(sample_step(x, e, 2, s, a), sample_step(x, e, 2, s, b));
  const double expect = (0.3 - s.beta(1) / std::sqrt(1 - s.alpha_bar(1)) * 0.5) / std::sqrt(s.alpha(1));
  Rng c(3);
  EXPECT_NEAR(sample_step(x, e, 1, s, c)[0], expect, 1e-15);
}

TEST(SampleStep, VanishingBetaKeepsState) {
  // With the true eps of x_t and beta -> 0 the step barely moves.
  const auto s = make_schedule(3, 1e-12, 1e-12);
  Rng rng(4);
  const std::vector<double> x0{0.4, -0.7}, e{0.3, 1.1};
  const auto xt = forward_noise(x0, 2, e, s);
  const auto next = sample_step(xt, e, 2, s, rng);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(next[i], xt[i], 1e-5);
}

TEST(TimeEmbedding, RangeAndDistinct) {
  const auto a = time_embedding(1, 100), b = time_embedding(2, 100);
  EXPECT_NE(a, b);
  for (double v : a) EXPECT_LE(std::abs(v), 1.0);
}

TEST(Denoiser, InitDeterministicAndSized) {
  const auto w = tiny_world();
  const auto d1 = make_denoiser(w, tiny_cfg(), 11);
  const auto d2 = make_denoiser(w, tiny_cfg(), 11);
  EXPECT_EQ(d1.params, d2.params);
  EXPECT_EQ(d1.chunk, 12u);
  EXPECT_EQ(d1.spec.input_size(), 2 * 12u + 3u + kTimeEmbeddingSize);
  EXPECT_EQ(d1.params.values.size(), d1.spec.param_count() + 12u + 3u * 3u);
  const auto back = denoiser_from_params(d1.params, 2);
  EXPECT_EQ(back.cond_offset(ConditionLabel::null()), d1.cond_offset(ConditionLabel::null()));
  EXPECT_EQ(back.spec.widths, d1.spec.widths);
}

TEST(Denoiser, PredictShapeAndNullTokensMatter) {
  const auto d = make_denoiser(tiny_world(), tiny_cfg(), 12);
  Rng rng(3);
  const auto x = rng.normal_vector(12);
  const auto ctx = rng.normal_vector(12);
  const auto full = predict_eps(d, {x, 5, std::span<const double>(ctx), ConditionLabel(1)}, 10);
  const auto nul = predict_eps(d, {x, 5, std::nullopt, ConditionLabel::null()}, 10);
  EXPECT_EQ(full.size(), 12u);
  EXPECT_NE(full, nul);
  EXPECT_THROW(predict_eps(d, {std::span<const double>(ctx).first(5), 5, std::nullopt, ConditionLabel(0)}, 10),
               ShapeError);
  EXPECT_THROW(predict_eps(d, {x, 0, std::nullopt, ConditionLabel(0)}, 10), ContractViolation);
}

std::vector<DenoiserItem> tiny_batch(Rng& rng, int n) {
  std::vector<DenoiserItem> batch;
  for (int i = 0; i < n; ++i)
    batch.push_back({random_chunk(rng, 2, 6), random_chunk(rng, 2, 6), ConditionLabel(i % 2)});
  return batch;
}

TEST(DsmLoss, GradientMatchesFiniteDifferences) {
  // Fixed rng seed per evaluation makes the loss a deterministic function of
  // the parameters, covering MLP block, null context and condition rows.
  auto d = make_denoiser(tiny_world(), tiny_cfg(), 13);
  Rng data_rng(4);
  const auto batch = tiny_batch(data_rng, 6);
  const auto sched = make_schedule(10, 1e-4, 0.02);
  auto loss_at = [&](const std::vector<double>& p, std::vector<double>* g) {
    Denoiser dd = d;
    dd.params.values = p;
    Rng r(99);
    auto lg = dsm_loss(dd, batch, sched, 0.5, 0.5, r);
    if (g) *g = lg.grad;
    return lg.loss;
  };
  std::vector<double> g;
  loss_at(d.params.values, &g);
  const double eps = 1e-6;
  auto p = d.params.values;
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double v = p[i];
    p[i] = v + eps;
    const double up = loss_at(p, nullptr);
    p[i] = v - eps;
    const double down = loss_at(p, nullptr);
    p[i] = v;
    const double n = (up - down) / (2 * eps);
    worst = std::max(worst, std::abs(n - g[i]) / std::max({std::abs(n), std::abs(g[i]), 1e-6}));
  }
  EXPECT_LE(worst, 1e-5);
  // Null tokens received gradient only because dropout happened.
  double null_mass = 0.0;
  for (std::size_t i = 0; i < d.chunk; ++i) null_mass += std::abs(g[d.null_context_offset() + i]);
  EXPECT_GT(null_mass, 0.0);
}

TEST(DsmLoss, NoDropoutLeavesNullTokensUntouched) {
  auto d = make_denoiser(tiny_world(), tiny_cfg(), 14);
  Rng data_rng(5);
  const auto batch = tiny_batch(data_rng, 8);
  Rng r(1);
  const auto lg = dsm_loss(d, batch, make_schedule(10, 1e-4, 0.02), 0.0, 0.0, r);
  for (std::size_t i = 0; i < d.chunk; ++i) EXPECT_EQ(lg.grad[d.null_context_offset() + i], 0.0);
  for (std::size_t i = 0; i < d.cond_dim; ++i) EXPECT_EQ(lg.grad[d.cond_offset(ConditionLabel::null()) + i], 0.0);
}

TEST(DsmLoss, UntrainedLossIsAboutOne) {
  const WorldParams w;
  const auto d = make_denoiser(w, DenoiserConfig{}, 15);
  std::vector<Episode> eps;
  for (int i = 0; i < 16; ++i) eps.push_back(make_episode(100 + i, ConditionLabel(i % 2), 16, w));
  const auto items = denoiser_items(eps, 4);
  Rng r(2);
  const auto lg = dsm_loss(d, items, make_schedule(100, 1e-4, 0.02), 0.1, 0.1, r);
  EXPECT_NEAR(lg.loss, 1.0, 0.5);
}

TEST(TrainDenoiser, ZeroEpochsReturnsInitialisation) {
  const auto w = tiny_world();
  Rng rng(6);
  const auto data = tiny_batch(rng, 4);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 21;
  const auto d = train_denoiser(data, w, tiny_cfg(), cfg, make_schedule(10, 1e-4, 0.02));
  EXPECT_EQ(d.params, make_denoiser(w, tiny_cfg(), 21).params);
}

TEST(TrainDenoiser, DeterministicAndLossDecreases) {
  const WorldParams w;
  std::vector<Episode> eps;
  for (int i = 0; i < 24; ++i) eps.push_back(make_episode(500 + i, ConditionLabel(i % 2), 16, w));
  const auto items = denoiser_items(eps, 4);
  EXPECT_EQ(items.size(), 24u * 3u);
  DenoiserConfig dc;
  dc.hidden = {64};
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 8;
  cfg.learning_rate = 3e-3;
  cfg.seed = 3;
  const auto sched = make_schedule(100, 1e-4, 0.02);
  DenoiserTrainLog log1, log2;
  const auto d1 = train_denoiser(items, w, dc, cfg, sched, &log1);
  const auto d2 = train_denoiser(items, w, dc, cfg, sched, &log2);
  EXPECT_EQ(d1.params, d2.params);
  ASSERT_EQ(log1.epoch_loss.size(), 30u);
  // Same rng draws for both evaluations, so only the parameters differ.
  const auto init = make_denoiser(w, dc, cfg.seed);
  Rng r1(77), r2(77);
  const double before = dsm_loss(init, items, sched, 0.0, 0.0, r1).loss;
  const double after = dsm_loss(d1, items, sched, 0.0, 0.0, r2).loss;
  EXPECT_LT(after, 0.8 * before);

  // The trained model tells the two conditions apart.
  Rng probe(5);
  int differ = 0;
  for (int k = 0; k < 100; ++k) {
    const auto x = probe.normal_vector(d1.chunk), ctx = probe.normal_vector(d1.chunk);
    const int t = probe.uniform_int(1, sched.T());
    differ += predict_eps(d1, {x, t, std::span<const double>(ctx), ConditionLabel(0)}, sched.T()) !=
              predict_eps(d1, {x, t, std::span<const double>(ctx), ConditionLabel(1)}, sched.T());
  }
  EXPECT_GE(differ, 90);
}

// Reference loop for plain conditional DDPM with the same draw order.
std::vector<double> reference_conditional(const Denoiser& d, const FrameChunk& ctx, ConditionLabel c,
                                          const NoiseSchedule& s, Rng& rng) {
  auto x = rng.normal_vector(d.chunk);
  for (int t = s.T(); t >= 1; --t) {
    const auto eps = predict_eps(d, {x, t, std::span<const double>(ctx.values), c}, s.T());
    x = sample_step(x, eps, t, s, rng);
  }
  return x;
}

TEST(GenerateChunk, ConditionalWeightsMatchPlainSamplerBitExactly) {
  const auto d = make_denoiser(tiny_world(), tiny_cfg(), 16);
  const auto s = make_schedule(20, 1e-4, 0.02);
  Rng crng(7);
  const auto ctx = random_chunk(crng, 2, 6);
  CountingSurprise counter;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng a(seed), b(seed);
    const auto got = generate_chunk(d, ctx, ConditionLabel(0), {1.0, 1.0, 0.0}, &counter, s, a);
    const auto want = reference_conditional(d, ctx, ConditionLabel(0), s, b);
    ASSERT_EQ(got.values.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(got.values[i]), std::bit_cast<std::uint64_t>(want[i]));
  }
  EXPECT_EQ(counter.calls, 0);
}

TEST(GenerateChunk, ZeroSurpriseWeightNeverQueriesSurprise) {
  const auto d = make_denoiser(tiny_world(), tiny_cfg(), 17);
  const auto s = make_schedule(15, 1e-4, 0.02);
  Rng crng(8);
  const auto ctx = random_chunk(crng, 2, 6);
  CountingSurprise counter;
  Rng rng(1);
  generate_chunk(d, ctx, ConditionLabel(1), {1.5, 2.0, 0.0}, &counter, s, rng);
  EXPECT_EQ(counter.calls, 0);
  Rng rng2(1);
  generate_chunk(d, ctx, ConditionLabel(1), {1.5, 2.0, 0.0}, nullptr, s, rng2);
  Rng rng3(1);
  generate_chunk(d, ctx, ConditionLabel(1), {1.5, 2.0, 0.5}, &counter, s, rng3);
  EXPECT_EQ(counter.calls, 15);
  SamplerOptions late;
  late.guidance_start_step = 4;
  counter.calls = 0;
  Rng rng4(1);
  generate_chunk(d, ctx, ConditionLabel(1), {1.5, 2.0, 0.5}, &counter, s, rng4, late);
  EXPECT_EQ(counter.calls, 4);
}

TEST(GenerateChunk, Errors) {
  const auto d = make_denoiser(tiny_world(), tiny_cfg(), 18);
  const auto s = make_schedule(5, 1e-4, 0.02);
  Rng rng(1);
  const FrameChunk ctx(2, 6);
  EXPECT_THROW(generate_chunk(d, ctx, ConditionLabel(0), {1.5, 2.0, 0.5}, nullptr, s, rng), ContractViolation);
  EXPECT_THROW(generate_chunk(d, ctx, ConditionLabel::null(), {1.0, 1.0, 0.0}, nullptr, s, rng), ContractViolation);
  EXPECT_THROW(generate_chunk(d, FrameChunk(1, 6), ConditionLabel(0), {1.0, 1.0, 0.0}, nullptr, s, rng), ShapeError);
}

TEST(GenerateChunk, SurpriseGuidancePullsTowardLowSurprise) {
  // With a quadratic surprise around 0.8 a large omega_s should pull the
  // sample mean toward the target compared with no guidance.
  const auto d = make_denoiser(tiny_world(), tiny_cfg(), 19);
  const auto s = make_schedule(30, 1e-4, 0.02);
  const FrameChunk ctx(2, 6);
  const QuadraticSurprise q(0.8);
  double plain = 0.0, guided = 0.0;
  for (SurpriseInput mode : {SurpriseInput::X0Hat, SurpriseInput::Xt}) {
    SamplerOptions opt;
    opt.surprise_input = mode;
    plain = guided = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng a(seed), b(seed);
      plain += q.surprise(ctx, generate_chunk(d, ctx, ConditionLabel(0), {1.0, 1.0, 0.0}, &q, s, a, opt));
      guided += q.surprise(ctx, generate_chunk(d, ctx, ConditionLabel(0), {1.0, 1.0, 1.0}, &q, s, b, opt));
    }
    EXPECT_LT(guided, plain);
  }
}

TEST(SurpriseGradAt, X0HatChainRuleMatchesFiniteDifferences) {
  const auto d = make_denoiser(tiny_world(), tiny_cfg(), 20);
  const auto s = make_schedule(10, 1e-4, 0.2);
  Rng rng(9);
  const auto ctx = random_chunk(rng, 2, 6);
  const QuadraticSurprise q(0.3);
  const int t = 6;
  auto x = rng.normal_vector(12);
  auto objective = [&](const std::vector<double>& xt) {
    const auto e = predict_eps(d, {xt, t, std::span<const double>(ctx.values), ConditionLabel(1)}, s.T());
    return q.surprise(ctx, FrameChunk(2, 6, tweedie_x0(xt, e, t, s)));
  };
  MlpTape tape;
  mlp_forward_tape(d.spec, d.mlp_block(), denoiser_features(d, {x, t, std::span<const double>(ctx.values), ConditionLabel(1)}, s.T()),
                   tape);
  const auto g = surprise_grad_at(d, tape, x, ctx, t, s, q, SurpriseInput::X0Hat);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i], h = 1e-6;
    x[i] = v + h;
    const double up = objective(x);
    x[i] = v - h;
    const double down = objective(x);
    x[i] = v;
    EXPECT_NEAR(g[i], (up - down) / (2 * h), 1e-5 * std::max(1.0, std::abs(g[i])));
  }
}

TEST(GenerateSequence, FeedsEachChunkAsNextContext) {
  const auto d = make_denoiser(tiny_world(), tiny_cfg(), 21);
  const auto s = make_schedule(8, 1e-4, 0.02);
  Rng crng(10);
  const auto seed_ctx = random_chunk(crng, 2, 6);
  std::vector<FrameChunk> seen;
  Rng rng(4);
  const auto out = generate_sequence(d, seed_ctx, ConditionLabel(0), 3, {1.5, 2.0, 0.0}, nullptr, s, rng, {},
                                     [&](std::size_t, const FrameChunk& c) { seen.push_back(c); });
  ASSERT_EQ(out.size(), 3u);
  ASSERT_EQ(seen.size(), 3u);
  EXPECT_EQ(seen[0].values, seed_ctx.values);
  EXPECT_EQ(seen[1].values, out[0].values);
  EXPECT_EQ(seen[2].values, out[1].values);
  Rng again(4);
  EXPECT_EQ(generate_sequence(d, seed_ctx, ConditionLabel(0), 3, {1.5, 2.0, 0.0}, nullptr, s, again)[2].values,
            out[2].values);
}

}  // namespace
}  // namespace sgds
