#pragma once

// Best-of-N: draw N candidate sequences from independent rng streams and
// keep the one whose generated chunks are least surprising on average.

#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "sgds/error.hpp"
#include "sgds/parallel.hpp"
#include "sgds/rng.hpp"
#include "sgds/worldsim.hpp"

namespace sgds {

inline constexpr std::size_t kDefaultBestOfN = 16;

struct CandidateSet {
  std::vector<std::vector<FrameChunk>> candidates;
  std::vector<std::vector<double>> chunk_surprises;  // N x num_chunks
  std::uint64_t base_seed = 0;

  std::size_t size() const { return candidates.size(); }
  bool operator==(const CandidateSet&) const = default;
};

using SequenceGenerator = std::function<std::vector<FrameChunk>(Rng&)>;
using SurpriseFn = std::function<double(const FrameChunk& context, const FrameChunk& candidate)>;

// Candidate i always uses Rng::stream(base_seed, i), so the set does not
// depend on how candidates are scheduled across threads.
inline CandidateSet generate_candidates(std::size_t N, const SequenceGenerator& generator,
                                        const SurpriseFn& surprise_fn, const FrameChunk& seed_context,
                                        std::uint64_t base_seed, unsigned threads = 1) {
  require(N >= 1, "generate_candidates: N must be >= 1");
  CandidateSet set;
  set.base_seed = base_seed;
  set.candidates.resize(N);
  set.chunk_surprises.resize(N);
  parallel_for(N, threads, [&](std::size_t i) {
    Rng rng = Rng::stream(base_seed, i);
    auto seq = generator(rng);
    std::vector<double> s;
    s.reserve(seq.size());
    const FrameChunk* ctx = &seed_context;
    for (const auto& chunk : seq) {
      s.push_back(surprise_fn(*ctx, chunk));
      ctx = &chunk;
    }
    set.candidates[i] = std::move(seq);
    set.chunk_surprises[i] = std::move(s);
  });
  return set;
}

inline double average_surprise(const CandidateSet& set, std::size_t i) {
  require(i < set.chunk_surprises.size(), "average_surprise: index out of range");
  const auto& row = set.chunk_surprises[i];
  require(!row.empty(), "average_surprise: candidate has no chunks");
  return std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size());
}

// Argmin of the average surprise; ties go to the lowest index.
inline std::size_t select_best(const CandidateSet& set) {
  require(set.size() >= 1, "select_best: empty candidate set");
  std::size_t best = 0;
  double best_value = average_surprise(set, 0);
  for (std::size_t i = 1; i < set.size(); ++i) {
    const double v = average_surprise(set, i);
    if (v < best_value) {
      best = i;
      best_value = v;
    }
  }
  return best;
}

}  // namespace sgds
