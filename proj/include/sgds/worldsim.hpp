#pragma once

// Toy 1-D physics world: a single ball bouncing between two walls,
// rendered as a Gaussian bump on a line of D pixels.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sgds/error.hpp"
#include "sgds/rng.hpp"

namespace sgds {

struct WorldParams {
  int D = 32;             // pixels per frame
  int F = 4;              // frames per chunk
  int C = 2;              // number of condition labels
  double sigma_px = 1.5;  // bump width in pixels
  double v_max = 0.25;

  std::size_t chunk_size() const { return static_cast<std::size_t>(D) * static_cast<std::size_t>(F); }
  // Minimum distance from a wall for a position to count as interior.
  double wall_margin() const { return 2.0 * sigma_px / (D - 1); }
};

struct WorldState {
  double position = 0.5;
  double velocity = 0.0;
};

// A discrete condition id in [0, C), or the null token used for the
// unconditional branches of classifier-free guidance.
class ConditionLabel {
 public:
  constexpr ConditionLabel() = default;
  constexpr explicit ConditionLabel(int id) : id_(id) {}
  static constexpr ConditionLabel null() { return ConditionLabel(); }

  constexpr bool is_null() const { return id_ < 0; }
  constexpr int id() const { return id_; }
  constexpr bool operator==(const ConditionLabel&) const = default;

 private:
  int id_ = -1;
};

// Velocity multiplier applied on each wall contact.
inline double restitution(ConditionLabel cond) {
  require(!cond.is_null(), "null condition has no physics");
  switch (cond.id()) {
    case 0: return 1.0;
    case 1: return 0.5;
    default: throw ContractViolation("unknown condition id " + std::to_string(cond.id()));
  }
}

using Frame = std::vector<double>;

// F consecutive frames stored row-major (frame-major), F x D.
struct FrameChunk {
  std::size_t frames = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  FrameChunk() = default;
  FrameChunk(std::size_t f, std::size_t d) : frames(f), dim(d), values(f * d, 0.0) {}
  FrameChunk(std::size_t f, std::size_t d, std::vector<double> v) : frames(f), dim(d), values(std::move(v)) {
    require_shape(values.size() == f * d, "chunk payload does not match F x D");
  }

  std::span<const double> frame(std::size_t i) const { return {values.data() + i * dim, dim}; }
  std::span<double> frame(std::size_t i) { return {values.data() + i * dim, dim}; }
  std::size_t size() const { return values.size(); }
  bool operator==(const FrameChunk&) const = default;
};

struct Episode {
  std::uint64_t seed = 0;
  ConditionLabel condition;
  std::vector<Frame> frames;
};

inline WorldState step_state(const WorldState& s, ConditionLabel cond) {
  require(!cond.is_null(), "step_state: null condition");
  require(s.position >= 0.0 && s.position <= 1.0, "step_state: position outside [0,1]");
  const double e = restitution(cond);
  WorldState next{s.position + s.velocity, s.velocity};
  if (next.position > 1.0) {
    next.position = 1.0 - e * (next.position - 1.0);
    next.velocity = -e * s.velocity;
  } else if (next.position < 0.0) {
    next.position = -e * next.position;
    next.velocity = -e * s.velocity;
  }
  return next;
}

// True when the step from s bounces off a wall.
inline bool step_reflects(const WorldState& s) {
  const double p = s.position + s.velocity;
  return p > 1.0 || p < 0.0;
}

inline Frame render_frame(const WorldState& s, int D, double sigma_px = 1.5) {
  require(D >= 8, "render_frame: D must be >= 8");
  const double center = s.position * (D - 1);
  const double inv = 1.0 / (2.0 * sigma_px * sigma_px);
  Frame f(static_cast<std::size_t>(D));
  for (int i = 0; i < D; ++i) {
    const double d = i - center;
    f[static_cast<std::size_t>(i)] = -1.0 + 2.0 * std::exp(-d * d * inv);
  }
  return f;
}

// Intensity centroid in [0,1]. Pixels are clamped to [-1,1] first.
inline double decode_position(std::span<const double> f) {
  require(f.size() >= 2, "decode_position: frame too short");
  double mass = 0.0;
  double moment = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double w = (std::clamp(f[i], -1.0, 1.0) + 1.0) * 0.5;
    mass += w;
    moment += w * static_cast<double>(i);
  }
  if (mass < 1e-9) throw UndecodableFrame();
  return moment / mass / static_cast<double>(f.size() - 1);
}

inline std::vector<WorldState> simulate(WorldState s, ConditionLabel cond, std::size_t steps) {
  std::vector<WorldState> out;
  out.reserve(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    out.push_back(s);
    s = step_state(s, cond);
  }
  return out;
}

inline WorldState initial_state(std::uint64_t seed) {
  Rng rng(seed);
  WorldState s;
  s.position = rng.uniform(0.1, 0.9);
  const double speed = rng.uniform(0.05, 0.2);
  s.velocity = rng.bernoulli(0.5) ? speed : -speed;
  return s;
}

inline std::vector<WorldState> episode_states(std::uint64_t seed, ConditionLabel cond, std::size_t num_frames) {
  return simulate(initial_state(seed), cond, num_frames);
}

inline Episode make_episode(std::uint64_t seed, ConditionLabel cond, std::size_t num_frames,
                            const WorldParams& world = {}) {
  require(!cond.is_null(), "make_episode: null condition");
  require(cond.id() < world.C, "make_episode: condition id out of range");
  if (num_frames % static_cast<std::size_t>(world.F) != 0)
    throw ContractViolation("make_episode: frame count " + std::to_string(num_frames) +
                            " is not a multiple of F=" + std::to_string(world.F));
  Episode e{seed, cond, {}};
  e.frames.reserve(num_frames);
  for (const auto& s : episode_states(seed, cond, num_frames))
    e.frames.push_back(render_frame(s, world.D, world.sigma_px));
  return e;
}

inline std::vector<FrameChunk> chunk_frames(std::span<const Frame> frames, std::size_t F) {
  require(F >= 1 && frames.size() % F == 0, "chunk_frames: frame count not a multiple of F");
  std::vector<FrameChunk> out;
  for (std::size_t k = 0; k < frames.size(); k += F) {
    const std::size_t D = frames[k].size();
    FrameChunk c(F, D);
    for (std::size_t j = 0; j < F; ++j) {
      require_shape(frames[k + j].size() == D, "chunk_frames: ragged frames");
      std::copy(frames[k + j].begin(), frames[k + j].end(), c.frame(j).begin());
    }
    out.push_back(std::move(c));
  }
  return out;
}

inline std::vector<FrameChunk> chunk_episode(const Episode& e, std::size_t F) { return chunk_frames(e.frames, F); }

inline std::vector<Frame> unchunk(std::span<const FrameChunk> chunks) {
  std::vector<Frame> out;
  for (const auto& c : chunks)
    for (std::size_t j = 0; j < c.frames; ++j) out.emplace_back(c.frame(j).begin(), c.frame(j).end());
  return out;
}

// Context frames must be real data: an undecodable context throws.
// Undecodable generated frames count as error 1.0.
inline double plausibility_error(std::span<const Frame> generated, std::span<const Frame> context,
                                 ConditionLabel cond, double v_max = 0.25) {
  require(context.size() >= 2, "plausibility_error: need at least two context frames");
  const double p_prev = decode_position(context[context.size() - 2]);
  const double p_last = decode_position(context[context.size() - 1]);
  WorldState s{std::clamp(p_last, 0.0, 1.0), std::clamp(p_last - p_prev, -v_max, v_max)};
  if (generated.empty()) return 0.0;
  double sq = 0.0;
  for (const auto& g : generated) {
    s = step_state(s, cond);
    try {
      const double d = decode_position(g) - s.position;
      sq += d * d;
    } catch (const UndecodableFrame&) {
      sq += 1.0;
    }
  }
  return std::sqrt(sq / static_cast<double>(generated.size()));
}

// Whether the last two of the first `context_frames` frames are safe to fit
// a velocity from: both away from the walls and no bounce between them.
inline bool interior_context(std::uint64_t seed, ConditionLabel cond, std::size_t context_frames,
                             const WorldParams& world) {
  require(context_frames >= 2, "interior_context: need at least two frames");
  const auto states = episode_states(seed, cond, context_frames);
  const double m = world.wall_margin();
  for (std::size_t i = context_frames - 2; i < context_frames; ++i)
    if (states[i].position < m || states[i].position > 1.0 - m) return false;
  return !step_reflects(states[context_frames - 2]);
}

// ---- dataset file -------------------------------------------------------

namespace detail {

template <class T>
void write_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  char buf[sizeof(T)];
  if (!is.read(buf, sizeof(T))) throw IoError("unexpected end of file");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

struct Dataset {
  WorldParams world;
  std::vector<Episode> episodes;
};

inline void write_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "SGDS-DATA v1, D=" << ds.world.D << ", F=" << ds.world.F << ", C=" << ds.world.C << '\n';
  for (const auto& e : ds.episodes) {
    detail::write_le<std::uint64_t>(os, e.seed);
    detail::write_le<std::int32_t>(os, e.condition.id());
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.frames.size()));
    for (const auto& f : e.frames) {
      require_shape(f.size() == static_cast<std::size_t>(ds.world.D), "write_dataset: frame width != D");
      for (double v : f) detail::write_le<float>(os, static_cast<float>(v));
    }
  }
  if (!os) throw IoError("write failed: " + path);
}

// Frames come back rounded to 32-bit precision; world fields not stored in
// the header keep their defaults.
inline Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::string header;
  std::getline(is, header);
  Dataset ds;
  if (std::sscanf(header.c_str(), "SGDS-DATA v1, D=%d, F=%d, C=%d", &ds.world.D, &ds.world.F, &ds.world.C) != 3)
    throw IoError("unrecognized dataset header in " + path);
  while (is.peek() != std::char_traits<char>::eof()) {
    Episode e;
    e.seed = detail::read_le<std::uint64_t>(is);
    e.condition = ConditionLabel(detail::read_le<std::int32_t>(is));
    const auto n = detail::read_le<std::uint32_t>(is);
    e.frames.assign(n, Frame(static_cast<std::size_t>(ds.world.D)));
    for (auto& f : e.frames)
      for (auto& v : f) v = detail::read_le<float>(is);
    ds.episodes.push_back(std::move(e));
  }
  return ds;
}

}  // namespace sgds
