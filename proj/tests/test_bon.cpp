#include <gtest/gtest.h>

#include <algorithm>

#include "sgds/bon.hpp"

namespace sgds {
namespace {

CandidateSet from_matrix(const std::vector<std::vector<double>>& m) {
  CandidateSet s;
  s.chunk_surprises = m;
  s.candidates.resize(m.size());
  return s;
}

std::size_t brute_force_best(const std::vector<std::vector<double>>& m) {
  std::vector<double> avg;
  for (const auto& row : m) {
    double s = 0.0;
    for (double v : row) s += v;
    avg.push_back(s / static_cast<double>(row.size()));
  }
  const double lo = *std::min_element(avg.begin(), avg.end());
  for (std::size_t i = 0; i < avg.size(); ++i)
    if (avg[i] == lo) return i;
  return avg.size();
}

TEST(SelectBest, MatchesBruteForceIncludingTies) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_int(0, 19));
    const std::size_t k = 1 + static_cast<std::size_t>(rng.uniform_int(0, 3));
    std::vector<std::vector<double>> m(n, std::vector<double>(k));
    // Values on a coarse grid so ties are common.
    for (auto& row : m)
      for (auto& v : row) v = rng.uniform_int(0, 4) * 0.25;
    if (n > 2 && trial % 3 == 0) m[n - 1] = m[1];
    EXPECT_EQ(select_best(from_matrix(m)), brute_force_best(m));
  }
}

TEST(AverageSurprise, Examples) {
  const auto s = from_matrix({{0.2, 0.4}, {0.7}, {0.5, 0.5}});
  EXPECT_NEAR(average_surprise(s, 0), 0.3, 1e-15);
  EXPECT_EQ(average_surprise(s, 1), 0.7);
  EXPECT_EQ(average_surprise(s, 2), 0.5);
  EXPECT_THROW(average_surprise(s, 3), ContractViolation);
}

TEST(SelectBest, Examples) {
  EXPECT_EQ(select_best(from_matrix({{0.3}, {0.1}, {0.5}})), 1u);
  EXPECT_EQ(select_best(from_matrix({{0.2}, {0.2}})), 0u);
  EXPECT_EQ(select_best(from_matrix({{0.5}, {0.2}, {0.2}, {0.9}})), 1u);
  EXPECT_EQ(select_best(from_matrix({{0.3, 0.1}, {0.2, 0.2}})), 0u);
  EXPECT_EQ(select_best(from_matrix({{1.0}})), 0u);
  EXPECT_THROW(select_best(CandidateSet{}), ContractViolation);
}

TEST(SelectBest, PermutationMovesTheWinner) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> m(8, std::vector<double>(3));
    for (auto& row : m)
      for (auto& v : row) v = rng.uniform(0, 2);
    const auto best = select_best(from_matrix(m));
    std::vector<std::size_t> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    std::vector<std::vector<double>> pm(8);
    for (std::size_t i = 0; i < 8; ++i) pm[i] = m[perm[i]];
    EXPECT_EQ(perm[select_best(from_matrix(pm))], best);
  }
}

// A toy generator whose output depends only on its rng stream.
SequenceGenerator toy_generator(std::size_t chunks) {
  return [chunks](Rng& rng) {
    std::vector<FrameChunk> out;
    for (std::size_t k = 0; k < chunks; ++k) out.emplace_back(2, 3, rng.normal_vector(6));
    return out;
  };
}

double toy_surprise(const FrameChunk& ctx, const FrameChunk& cand) {
  double s = 0.0;
  for (std::size_t i = 0; i < cand.size(); ++i) s += (cand.values[i] - ctx.values[i]) * (cand.values[i] - ctx.values[i]);
  return s;
}

TEST(GenerateCandidates, StreamsAndContextsAreWiredCorrectly) {
  const FrameChunk seed_ctx(2, 3, std::vector<double>(6, 0.5));
  const auto set = generate_candidates(5, toy_generator(3), toy_surprise, seed_ctx, 42);
  ASSERT_EQ(set.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    Rng r = Rng::stream(42, i);
    const auto expect = toy_generator(3)(r);
    EXPECT_EQ(set.candidates[i], expect);
    EXPECT_EQ(set.chunk_surprises[i][0], toy_surprise(seed_ctx, expect[0]));
    EXPECT_EQ(set.chunk_surprises[i][1], toy_surprise(expect[0], expect[1]));
    EXPECT_EQ(set.chunk_surprises[i][2], toy_surprise(expect[1], expect[2]));
  }
  EXPECT_NE(set.candidates[0], set.candidates[1]);
}

TEST(GenerateCandidates, ThreadCountDoesNotChangeResult) {
  const FrameChunk seed_ctx(2, 3);
  const auto serial = generate_candidates(16, toy_generator(2), toy_surprise, seed_ctx, 7, 1);
  for (unsigned threads : {2u, 4u, 16u}) {
    const auto par = generate_candidates(16, toy_generator(2), toy_surprise, seed_ctx, 7, threads);
    EXPECT_EQ(par, serial);
    EXPECT_EQ(select_best(par), select_best(serial));
  }
}

TEST(GenerateCandidates, SingleCandidateIsTheFirstStream) {
  const FrameChunk seed_ctx(2, 3);
  const auto one = generate_candidates(1, toy_generator(2), toy_surprise, seed_ctx, 9);
  Rng r = Rng::stream(9, 0);
  EXPECT_EQ(one.candidates[select_best(one)], toy_generator(2)(r));
  const auto many = generate_candidates(4, toy_generator(2), toy_surprise, seed_ctx, 9);
  EXPECT_EQ(many.candidates[0], one.candidates[0]);
}

TEST(GenerateCandidates, GeneratorErrorsPropagate) {
  const FrameChunk seed_ctx(2, 3);
  const SequenceGenerator bad = [](Rng&) -> std::vector<FrameChunk> { throw ContractViolation("boom"); };
  EXPECT_THROW(generate_candidates(4, bad, toy_surprise, seed_ctx, 1, 2), ContractViolation);
  EXPECT_THROW(generate_candidates(0, toy_generator(1), toy_surprise, seed_ctx, 1), ContractViolation);
}

TEST(RngStream, DistinctAndReproducible) {
  Rng a = Rng::stream(5, 0), b = Rng::stream(5, 1), c = Rng::stream(5, 0);
  const auto x = a.normal(), y = b.normal(), z = c.normal();
  EXPECT_NE(x, y);
  EXPECT_EQ(x, z);
  EXPECT_NE(stream_seed(5, 1), stream_seed(6, 0));
}

}  // namespace
}  // namespace sgds
