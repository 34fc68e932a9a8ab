#pragma once

// Dataset and checkpoint cache, three-arm evaluation and its report.
//
// Cache files live in cfg.cache_dir and carry the hash of every config key
// that influenced them. A cached file whose recorded hash disagrees with the
// current config is an error, never silently reused. Models are always used
// as read back from disk, so cold and warm runs see identical weights.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgds/bon.hpp"
#include "sgds/diffusion.hpp"
#include "sgds/gaussoracle.hpp"
#include "sgds/harness/config.hpp"
#include "sgds/jepa.hpp"
#include "sgds/parallel.hpp"
#include "sgds/worldsim.hpp"

#ifndef SGDS_VERSION
#define SGDS_VERSION "0.0.0"
#endif

namespace sgds {

inline std::string version_string() { return std::string("v") + SGDS_VERSION; }

class CacheMismatch : public Error {
 public:
  using Error::Error;
};

using Logger = std::function<void(const std::string&)>;

// ---- data -------------------------------------------------------------------

inline std::uint64_t train_episode_seed(const ExperimentConfig& c, std::size_t i) {
  return stream_seed(stream_seed(c.base_seed, 0), i);
}
inline std::uint64_t eval_episode_seed(const ExperimentConfig& c, std::size_t i) {
  return stream_seed(stream_seed(c.base_seed, 1), i);
}

inline Dataset make_dataset(const ExperimentConfig& c) {
  Dataset ds{c.world, {}};
  const std::size_t frames = c.episode_chunks * static_cast<std::size_t>(c.world.F);
  for (std::size_t i = 0; i < c.num_episodes; ++i)
    ds.episodes.push_back(
        make_episode(train_episode_seed(c, i), ConditionLabel(static_cast<int>(i % c.world.C)), frames, c.world));
  return ds;
}

struct CachePaths {
  std::filesystem::path dataset, denoiser, jepa_prefix;
};

inline CachePaths cache_paths(const ExperimentConfig& c) {
  return {c.cache_dir / ("dataset-" + hex64(dataset_hash(c)) + ".bin"),
          c.cache_dir / ("denoiser-" + hex64(denoiser_hash(c)) + ".ckpt"),
          c.cache_dir / ("jepa-" + hex64(jepa_hash(c)))};
}

// The dataset file has no room for a hash, so a sidecar records it.
inline Dataset load_or_make_dataset(const ExperimentConfig& c, const Logger& log = {}) {
  const auto paths = cache_paths(c);
  const auto sidecar = paths.dataset.string() + ".hash";
  const auto want = hex64(dataset_hash(c));
  if (!std::filesystem::exists(paths.dataset)) {
    std::filesystem::create_directories(c.cache_dir);
    if (log) log("generating " + std::to_string(c.num_episodes) + " training episodes");
    write_dataset(paths.dataset.string(), make_dataset(c));
    std::ofstream(sidecar) << want << '\n';
  }
  std::string got;
  std::ifstream(sidecar) >> got;
  if (got != want)
    throw CacheMismatch("cached dataset " + paths.dataset.string() + " has hash '" + got + "', expected " + want);
  auto ds = read_dataset(paths.dataset.string());
  ds.world = c.world;
  return ds;
}

inline std::vector<std::vector<FrameChunk>> chunk_dataset(const Dataset& ds, std::size_t F) {
  std::vector<std::vector<FrameChunk>> out;
  out.reserve(ds.episodes.size());
  for (const auto& e : ds.episodes) out.push_back(chunk_episode(e, F));
  return out;
}

inline void check_hash(const std::map<std::string, std::string>& meta, std::uint64_t want, const std::string& what) {
  const auto it = meta.find("config_hash");
  const std::string got = it == meta.end() ? "<none>" : it->second;
  if (got != hex64(want)) throw CacheMismatch(what + " was trained under config hash " + got + ", expected " + hex64(want));
}

// ---- training -------------------------------------------------------------

struct TrainSummary {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  bool cached = false;
};

inline TrainSummary train_and_save_denoiser(const ExperimentConfig& c, const Logger& log = {}) {
  const auto ds = load_or_make_dataset(c, log);
  const auto items = denoiser_items(ds.episodes, static_cast<std::size_t>(c.world.F));
  if (log) log("training denoiser on " + std::to_string(items.size()) + " chunk pairs");
  DenoiserTrainLog tl;
  auto d = train_denoiser(items, c.world, c.denoiser, c.train_denoiser, c.schedule(), &tl);
  d.params.meta["config_hash"] = hex64(denoiser_hash(c));
  std::filesystem::create_directories(c.cache_dir);
  save_params(d.params, cache_paths(c).denoiser.string());
  return {tl.initial_loss, tl.epoch_loss.empty() ? tl.initial_loss : tl.epoch_loss.back(), false};
}

inline TrainSummary train_and_save_jepa(const ExperimentConfig& c, const Logger& log = {}) {
  const auto ds = load_or_make_dataset(c, log);
  if (log) log("training jepa on " + std::to_string(ds.episodes.size()) + " episodes");
  JepaTrainLog tl;
  const auto h = train_jepa(chunk_dataset(ds, static_cast<std::size_t>(c.world.F)), c.train_jepa, c.jepa, &tl);
  std::filesystem::create_directories(c.cache_dir);
  save_jepa(h, cache_paths(c).jepa_prefix.string(), {{"config_hash", hex64(jepa_hash(c))}});
  const double last = tl.epoch_loss.empty() ? 0.0 : tl.epoch_loss.back();
  return {tl.epoch_loss.empty() ? 0.0 : tl.epoch_loss.front(), last, false};
}

inline Denoiser load_denoiser(const ExperimentConfig& c) {
  auto p = load_params(cache_paths(c).denoiser.string());
  check_hash(p.meta, denoiser_hash(c), "cached denoiser");
  return denoiser_from_params(std::move(p), c.world.F);
}

inline JepaHandles load_cached_jepa(const ExperimentConfig& c) {
  std::map<std::string, std::string> meta;
  auto h = load_jepa(cache_paths(c).jepa_prefix.string(), &meta);
  check_hash(meta, jepa_hash(c), "cached jepa");
  return h;
}

struct Models {
  Denoiser denoiser;
  JepaHandles jepa;
  bool denoiser_cached = false;
  bool jepa_cached = false;
};

inline Models load_or_train(const ExperimentConfig& c, const Logger& log = {}) {
  Models m;
  const auto paths = cache_paths(c);
  m.denoiser_cached = std::filesystem::exists(paths.denoiser);
  if (!m.denoiser_cached) train_and_save_denoiser(c, log);
  m.denoiser = load_denoiser(c);
  m.jepa_cached = std::filesystem::exists(paths.jepa_prefix.string() + ".encoder.ckpt");
  if (!m.jepa_cached) train_and_save_jepa(c, log);
  m.jepa = load_cached_jepa(c);
  return m;
}

// ---- evaluation -------------------------------------------------------------

struct EvalCondition {
  std::size_t index = 0;  // position in the held-out seed stream
  std::uint64_t seed = 0;
  ConditionLabel condition;
  Episode episode;  // context chunk followed by the true continuation
};

// Held-out rows: successive eval seeds, conditions cycling, kept only when
// the context ends away from the walls with no bounce in its last step.
inline std::vector<EvalCondition> eval_conditions(const ExperimentConfig& c) {
  std::vector<EvalCondition> rows;
  const std::size_t F = static_cast<std::size_t>(c.world.F);
  for (std::size_t i = 0; rows.size() < c.num_conditions; ++i) {
    const ConditionLabel cond(static_cast<int>(i % c.world.C));
    const auto seed = eval_episode_seed(c, i);
    if (!interior_context(seed, cond, F, c.world)) continue;
    rows.push_back({i, seed, cond, make_episode(seed, cond, F * (1 + c.horizon), c.world)});
  }
  return rows;
}

struct ArmResult {
  double plausibility_error = 0.0;
  double mean_surprise = 0.0;
  std::vector<double> chunk_surprise;
  bool operator==(const ArmResult&) const = default;
};

struct RowResult {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  int condition = 0;
  ArmResult a, b, c;
  std::size_t best_index = 0;
  bool operator==(const RowResult&) const = default;
};

struct ArmSummary {
  std::string arm;
  double mean_plausibility_error = 0.0;
  double median_plausibility_error = 0.0;
  double mean_surprise = 0.0;
  std::size_t n_conditions = 0;
  bool operator==(const ArmSummary&) const = default;
};

struct Report {
  std::string version;
  nlohmann::ordered_json config;
  std::string denoiser_hash, jepa_hash;
  std::vector<ArmSummary> arms;  // a, b, c
  std::vector<RowResult> rows;
  std::size_t c_wins_or_ties = 0;  // rows with c error <= a error
  bool operator==(const Report&) const = default;
};

struct Timings {
  double load_or_train_s = 0.0;
  double evaluate_s = 0.0;
  bool denoiser_cached = false;
  bool jepa_cached = false;
};

inline ArmResult score_sequence(const JepaHandles& jepa, const std::vector<FrameChunk>& seq, const FrameChunk& context,
                                std::span<const Frame> context_frames, ConditionLabel cond, double v_max) {
  ArmResult r;
  const FrameChunk* prev = &context;
  for (const auto& ch : seq) {
    r.chunk_surprise.push_back(surprise(jepa, *prev, ch));
    prev = &ch;
  }
  r.mean_surprise = std::accumulate(r.chunk_surprise.begin(), r.chunk_surprise.end(), 0.0) /
                    static_cast<double>(r.chunk_surprise.size());
  r.plausibility_error = plausibility_error(unchunk(seq), context_frames, cond, v_max);
  return r;
}

inline GuidanceWeights vanilla_weights(const ExperimentConfig& c) {
  return {c.guidance.omega_ctx, c.guidance.omega_txt, 0.0};
}

// One arm for one row. Arm a and b use Rng::stream(row seed, 0); arm c's
// candidate i uses Rng::stream(row seed, i), so its candidate 0 is arm b.
inline std::vector<FrameChunk> generate_arm(const ExperimentConfig& c, const Models& m, const EvalCondition& row,
                                            char arm, std::size_t* best_index = nullptr,
                                            CandidateSet* candidates = nullptr) {
  const auto sched = c.schedule();
  const auto context = chunk_episode(row.episode, static_cast<std::size_t>(c.world.F)).front();
  const JepaSurprise sm(m.jepa);
  const auto w = arm == 'a' ? vanilla_weights(c) : c.guidance;
  auto gen = [&](Rng& rng) {
    return generate_sequence(m.denoiser, context, row.condition, c.horizon, w, w.omega_s > 0.0 ? &sm : nullptr, sched,
                             rng, c.sampler);
  };
  if (arm == 'a' || arm == 'b') {
    Rng rng = Rng::stream(row.seed, 0);
    return gen(rng);
  }
  require(arm == 'c', "unknown arm");
  auto set = generate_candidates(
      c.bon_n, gen, [&](const FrameChunk& ctx, const FrameChunk& cand) { return surprise(m.jepa, ctx, cand); }, context,
      row.seed, 1);
  const auto best = select_best(set);
  if (best_index) *best_index = best;
  auto out = set.candidates[best];
  if (candidates) *candidates = std::move(set);
  return out;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline Report evaluate(const ExperimentConfig& c, const Models& m, unsigned threads = 1, const Logger& log = {}) {
  const auto rows = eval_conditions(c);
  const std::size_t F = static_cast<std::size_t>(c.world.F);
  std::vector<RowResult> results(rows.size());
  std::atomic<std::size_t> done{0};
  std::mutex log_mutex;
  parallel_for(rows.size(), threads, [&](std::size_t i) {
    const auto& row = rows[i];
    const auto context = chunk_episode(row.episode, F).front();
    const std::span<const Frame> ctx_frames(row.episode.frames.data(), F);
    RowResult r{row.index, row.seed, row.condition.id(), {}, {}, {}, 0};
    const double vmax = c.world.v_max;
    r.a = score_sequence(m.jepa, generate_arm(c, m, row, 'a'), context, ctx_frames, row.condition, vmax);
    CandidateSet set;
    const auto best = generate_arm(c, m, row, 'c', &r.best_index, &set);
    r.b = score_sequence(m.jepa, set.candidates[0], context, ctx_frames, row.condition, vmax);
    r.c = score_sequence(m.jepa, best, context, ctx_frames, row.condition, vmax);
    results[i] = std::move(r);
    const auto k = ++done;
    if (log) {
      std::lock_guard lock(log_mutex);
      log("row " + std::to_string(k) + "/" + std::to_string(rows.size()));
    }
  });

  Report rep;
  rep.version = version_string();
  rep.config = config_echo(c);
  rep.denoiser_hash = hex64(denoiser_hash(c));
  rep.jepa_hash = hex64(jepa_hash(c));
  rep.rows = std::move(results);
  for (char arm : {'a', 'b', 'c'}) {
    std::vector<double> errs;
    double s = 0.0;
    for (const auto& r : rep.rows) {
      const auto& x = arm == 'a' ? r.a : arm == 'b' ? r.b : r.c;
      errs.push_back(x.plausibility_error);
      s += x.mean_surprise;
    }
    const double n = static_cast<double>(errs.size());
    rep.arms.push_back({std::string(1, arm), std::accumulate(errs.begin(), errs.end(), 0.0) / n, median(errs), s / n,
                        errs.size()});
  }
  for (const auto& r : rep.rows) rep.c_wins_or_ties += r.c.plausibility_error <= r.a.plausibility_error;
  return rep;
}

// ---- report files -------------------------------------------------------------

// JSON text with every float written as %.9g, so files are byte-stable.
inline void write_json9(std::ostream& os, const nlohmann::ordered_json& j, int indent = 0) {
  const std::string pad(static_cast<std::size_t>(indent) * 2, ' '), inner(static_cast<std::size_t>(indent + 1) * 2, ' ');
  switch (j.type()) {
    case nlohmann::ordered_json::value_t::object: {
      if (j.empty()) {
        os << "{}";
        return;
      }
      os << "{\n";
      std::size_t k = 0;
      for (auto it = j.begin(); it != j.end(); ++it, ++k) {
        os << inner << nlohmann::ordered_json(it.key()).dump() << ": ";
        write_json9(os, it.value(), indent + 1);
        os << (k + 1 < j.size() ? ",\n" : "\n");
      }
      os << pad << '}';
      return;
    }
    case nlohmann::ordered_json::value_t::array: {
      bool flat = std::all_of(j.begin(), j.end(), [](const auto& e) { return e.is_primitive(); });
      if (flat) {
        os << '[';
        for (std::size_t k = 0; k < j.size(); ++k) {
          if (k) os << ", ";
          write_json9(os, j[k], indent + 1);
        }
        os << ']';
        return;
      }
      os << "[\n";
      for (std::size_t k = 0; k < j.size(); ++k) {
        os << inner;
        write_json9(os, j[k], indent + 1);
        os << (k + 1 < j.size() ? ",\n" : "\n");
      }
      os << pad << ']';
      return;
    }
    case nlohmann::ordered_json::value_t::number_float: {
      const double v = j.get<double>();
      if (!std::isfinite(v)) {
        os << "null";
        return;
      }
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g", v);
      os << buf;
      return;
    }
    default:
      os << j.dump();
  }
}

inline std::string fmt9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline nlohmann::ordered_json to_json(const ArmResult& a) {
  return {{"plausibility_error", a.plausibility_error}, {"mean_surprise", a.mean_surprise},
          {"chunk_surprise", a.chunk_surprise}};
}

inline nlohmann::ordered_json to_json(const Report& r) {
  nlohmann::ordered_json arms = nlohmann::ordered_json::object();
  for (const auto& a : r.arms)
    arms[a.arm] = {{"mean_plausibility_error", a.mean_plausibility_error},
                   {"median_plausibility_error", a.median_plausibility_error},
                   {"mean_surprise", a.mean_surprise},
                   {"n_conditions", a.n_conditions}};
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& x : r.rows)
    rows.push_back({{"index", x.index},
                    {"seed", x.seed},
                    {"condition", x.condition},
                    {"a", to_json(x.a)},
                    {"b", to_json(x.b)},
                    {"c", to_json(x.c)},
                    {"c_best_index", x.best_index}});
  return {{"version", r.version},
          {"config", r.config},
          {"checkpoints", {{"denoiser_hash", r.denoiser_hash}, {"jepa_hash", r.jepa_hash}}},
          {"arms", arms},
          {"c_wins_or_ties", r.c_wins_or_ties},
          {"rows", rows}};
}

inline ArmResult arm_from_json(const nlohmann::json& j) {
  return {j.at("plausibility_error").get<double>(), j.at("mean_surprise").get<double>(),
          j.at("chunk_surprise").get<std::vector<double>>()};
}

inline Report report_from_json(const nlohmann::ordered_json& j) {
  Report r;
  r.version = j.at("version").get<std::string>();
  r.config = j.at("config");
  r.denoiser_hash = j.at("checkpoints").at("denoiser_hash").get<std::string>();
  r.jepa_hash = j.at("checkpoints").at("jepa_hash").get<std::string>();
  for (const auto& [name, a] : j.at("arms").items())
    r.arms.push_back({name, a.at("mean_plausibility_error").get<double>(), a.at("median_plausibility_error").get<double>(),
                      a.at("mean_surprise").get<double>(), a.at("n_conditions").get<std::size_t>()});
  r.c_wins_or_ties = j.at("c_wins_or_ties").get<std::size_t>();
  for (const auto& x : j.at("rows"))
    r.rows.push_back({x.at("index").get<std::size_t>(), x.at("seed").get<std::uint64_t>(), x.at("condition").get<int>(),
                      arm_from_json(x.at("a")), arm_from_json(x.at("b")), arm_from_json(x.at("c")),
                      x.at("c_best_index").get<std::size_t>()});
  return r;
}

inline std::string report_json_text(const Report& r) {
  std::ostringstream os;
  write_json9(os, to_json(r));
  os << '\n';
  return os.str();
}

inline std::string summary_csv_text(const Report& r) {
  std::string s = "arm,mean_plausibility_error,median,mean_surprise,n_conditions\n";
  for (const auto& a : r.arms)
    s += a.arm + "," + fmt9(a.mean_plausibility_error) + "," + fmt9(a.median_plausibility_error) + "," +
         fmt9(a.mean_surprise) + "," + std::to_string(a.n_conditions) + "\n";
  return s;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  os << text;
  if (!os) throw IoError("write failed: " + p.string());
}

// report.json and summary.csv depend only on the config; wall-clock
// timings go to a separate timings.json.
inline void write_report(const Report& r, const std::filesystem::path& out_dir, const Timings* t = nullptr) {
  std::filesystem::create_directories(out_dir);
  write_text(out_dir / "report.json", report_json_text(r));
  write_text(out_dir / "summary.csv", summary_csv_text(r));
  if (t) {
    const nlohmann::ordered_json tj{{"load_or_train_seconds", t->load_or_train_s},
                                    {"evaluate_seconds", t->evaluate_s},
                                    {"denoiser_cached", t->denoiser_cached},
                                    {"jepa_cached", t->jepa_cached}};
    std::ostringstream os;
    write_json9(os, tj);
    os << '\n';
    write_text(out_dir / "timings.json", os.str());
  }
}

inline Report read_report(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return report_from_json(nlohmann::ordered_json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad report " + path.string() + ": " + e.what());
  }
}

// ---- Gaussian oracle grid ------------------------------------------------------

struct OracleSetting {
  GuidanceWeights w;
  double lambda;
  bool check_variance;
};

inline std::vector<OracleSetting> oracle_grid(const ExperimentConfig& c) {
  const double l = c.oracle.lambda;
  return {{{1.0, 1.0, 0.0}, 0.0, true},
          {{1.5, 2.0, 0.5}, l, false},
          {{1.0, 1.0, 0.5}, l, false},
          {{1.2, 1.5, 0.0}, l, false},
          {{0.8, 1.2, 0.2}, l, false}};
}

struct OracleCheck {
  std::vector<OracleReport> reports;
  std::vector<bool> checked_variance;
  bool pass = true;
};

inline OracleCheck run_oracle_check(const ExperimentConfig& c, unsigned threads = 1) {
  const auto sched = make_schedule(c.oracle.T, c.beta_min, c.beta_max);
  OracleCheck out;
  const std::vector<double> ctx{1.0, 1.0};
  std::size_t k = 0;
  for (const auto& s : oracle_grid(c)) {
    LinGaussModel m;
    m.sigma0 = c.oracle.sigma0;
    m.lambda = s.lambda;
    auto r = sample_and_compare(m, s.w, ctx, ConditionLabel(0), c.oracle.n_samples, sched,
                                stream_seed(c.oracle.seed, k++), threads);
    out.pass = out.pass && r.mean_ok && (!s.check_variance || r.var_ok);
    out.reports.push_back(std::move(r));
    out.checked_variance.push_back(s.check_variance);
  }
  return out;
}

inline nlohmann::ordered_json to_json(const OracleCheck& oc) {
  nlohmann::ordered_json settings = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < oc.reports.size(); ++i) {
    auto j = to_json(oc.reports[i]);
    j["variance_checked"] = oc.checked_variance[i];
    settings.push_back(std::move(j));
  }
  return {{"version", version_string()}, {"pass", oc.pass}, {"settings", settings}};
}

}  // namespace sgds
