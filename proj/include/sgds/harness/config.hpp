#pragma once

// Experiment configuration: a strict `section.key = value` file.
// Blank lines and lines starting with '#' are ignored. Every key has a
// default, so an empty file is a valid config. Unknown keys are errors.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgds/diffusion.hpp"
#include "sgds/guidance.hpp"
#include "sgds/jepa.hpp"
#include "sgds/nnkit.hpp"
#include "sgds/worldsim.hpp"

namespace sgds {

class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what) : Error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct OracleConfig {
  std::size_t n_samples = 20000;
  int T = 200;
  std::uint64_t seed = 11;
  double sigma0 = 0.5;
  double lambda = 1.0;
};

struct ExperimentConfig {
  WorldParams world;
  std::size_t episode_chunks = 4;  // chunks per training episode
  std::size_t num_episodes = 8000;

  int T = 100;
  double beta_min = 1e-4;
  double beta_max = 0.02;

  DenoiserConfig denoiser;
  JepaConfig jepa{32, {128}, {32}, 0.99};
  TrainConfig train_denoiser{40, 32, 1e-3, 0.1, 0.1, 3};
  TrainConfig train_jepa{60, 32, 1e-3, 0.0, 0.0, 7};

  GuidanceWeights guidance;
  SamplerOptions sampler;

  std::size_t bon_n = kDefaultBestOfN;
  std::size_t num_conditions = 50;
  std::size_t horizon = 3;
  std::uint64_t base_seed = 2024;
  std::filesystem::path cache_dir = "cache";

  OracleConfig oracle;

  NoiseSchedule schedule() const { return make_schedule(T, beta_min, beta_max); }
  void validate() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  is >> v;
  if (!is || !is.eof()) throw ConfigError(key, "bad value for " + key + ": '" + text + "'");
  if constexpr (std::is_unsigned_v<T>)
    if (text.find('-') != std::string::npos) throw ConfigError(key, "bad value for " + key + ": '" + text + "'");
  return v;
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  if (text.empty()) return out;  // no hidden layers
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  return out;
}

inline std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
  Setter set;
  Getter get;
};

template <class T>
std::string fmt(T v) {
  if constexpr (std::is_floating_point_v<T>) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
  } else {
    return std::to_string(v);
  }
}

template <class T, class Acc>
Field number(Acc acc) {
  return {[acc](ExperimentConfig& c, const std::string& v) { acc(c) = parse_number<T>("", v); },
          [acc](const ExperimentConfig& c) { return fmt(acc(const_cast<ExperimentConfig&>(c))); }};
}

template <class Acc>
Field int_list(Acc acc) {
  return {[acc](ExperimentConfig& c, const std::string& v) { acc(c) = parse_int_list("", v); },
          [acc](const ExperimentConfig& c) { return join(acc(const_cast<ExperimentConfig&>(c))); }};
}

// Ordered schema; the order is also the echo order in reports.
inline const std::vector<std::pair<std::string, Field>>& schema() {
  using C = ExperimentConfig;
  static const std::vector<std::pair<std::string, Field>> s = {
      {"world.D", number<int>([](C& c) -> int& { return c.world.D; })},
      {"world.F", number<int>([](C& c) -> int& { return c.world.F; })},
      {"world.C", number<int>([](C& c) -> int& { return c.world.C; })},
      {"world.sigma_px", number<double>([](C& c) -> double& { return c.world.sigma_px; })},
      {"world.v_max", number<double>([](C& c) -> double& { return c.world.v_max; })},
      {"data.episode_chunks", number<std::size_t>([](C& c) -> std::size_t& { return c.episode_chunks; })},
      {"data.num_episodes", number<std::size_t>([](C& c) -> std::size_t& { return c.num_episodes; })},
      {"schedule.T", number<int>([](C& c) -> int& { return c.T; })},
      {"schedule.beta_min", number<double>([](C& c) -> double& { return c.beta_min; })},
      {"schedule.beta_max", number<double>([](C& c) -> double& { return c.beta_max; })},
      {"denoiser.hidden", int_list([](C& c) -> std::vector<int>& { return c.denoiser.hidden; })},
      {"denoiser.cond_dim", number<int>([](C& c) -> int& { return c.denoiser.cond_dim; })},
      {"jepa.E", number<int>([](C& c) -> int& { return c.jepa.E; })},
      {"jepa.encoder_hidden", int_list([](C& c) -> std::vector<int>& { return c.jepa.encoder_hidden; })},
      {"jepa.predictor_hidden", int_list([](C& c) -> std::vector<int>& { return c.jepa.predictor_hidden; })},
      {"jepa.momentum", number<double>([](C& c) -> double& { return c.jepa.momentum; })},
      {"train_denoiser.epochs", number<int>([](C& c) -> int& { return c.train_denoiser.epochs; })},
      {"train_denoiser.batch_size", number<int>([](C& c) -> int& { return c.train_denoiser.batch_size; })},
      {"train_denoiser.learning_rate", number<double>([](C& c) -> double& { return c.train_denoiser.learning_rate; })},
      {"train_denoiser.dropout_ctx", number<double>([](C& c) -> double& { return c.train_denoiser.dropout_ctx; })},
      {"train_denoiser.dropout_txt", number<double>([](C& c) -> double& { return c.train_denoiser.dropout_txt; })},
      {"train_denoiser.seed", number<std::uint64_t>([](C& c) -> std::uint64_t& { return c.train_denoiser.seed; })},
      {"train_jepa.epochs", number<int>([](C& c) -> int& { return c.train_jepa.epochs; })},
      {"train_jepa.batch_size", number<int>([](C& c) -> int& { return c.train_jepa.batch_size; })},
      {"train_jepa.learning_rate", number<double>([](C& c) -> double& { return c.train_jepa.learning_rate; })},
      {"train_jepa.seed", number<std::uint64_t>([](C& c) -> std::uint64_t& { return c.train_jepa.seed; })},
      {"guidance.omega_ctx", number<double>([](C& c) -> double& { return c.guidance.omega_ctx; })},
      {"guidance.omega_txt", number<double>([](C& c) -> double& { return c.guidance.omega_txt; })},
      {"guidance.omega_s", number<double>([](C& c) -> double& { return c.guidance.omega_s; })},
      {"guidance.surprise_input",
       {[](C& c, const std::string& v) {
          if (v == "x0hat")
            c.sampler.surprise_input = SurpriseInput::X0Hat;
          else if (v == "xt")
            c.sampler.surprise_input = SurpriseInput::Xt;
          else
            throw ConfigError("", "bad value for guidance.surprise_input: '" + v + "' (expected x0hat or xt)");
        },
        [](const C& c) { return std::string(c.sampler.surprise_input == SurpriseInput::X0Hat ? "x0hat" : "xt"); }}},
      {"guidance.start_step", number<int>([](C& c) -> int& { return c.sampler.guidance_start_step; })},
      {"bon.n", number<std::size_t>([](C& c) -> std::size_t& { return c.bon_n; })},
      {"eval.num_conditions", number<std::size_t>([](C& c) -> std::size_t& { return c.num_conditions; })},
      {"eval.horizon", number<std::size_t>([](C& c) -> std::size_t& { return c.horizon; })},
      {"experiment.base_seed", number<std::uint64_t>([](C& c) -> std::uint64_t& { return c.base_seed; })},
      {"experiment.cache_dir",
       {[](C& c, const std::string& v) { c.cache_dir = v; }, [](const C& c) { return c.cache_dir.string(); }}},
      {"oracle.n_samples", number<std::size_t>([](C& c) -> std::size_t& { return c.oracle.n_samples; })},
      {"oracle.T", number<int>([](C& c) -> int& { return c.oracle.T; })},
      {"oracle.seed", number<std::uint64_t>([](C& c) -> std::uint64_t& { return c.oracle.seed; })},
      {"oracle.sigma0", number<double>([](C& c) -> double& { return c.oracle.sigma0; })},
      {"oracle.lambda", number<double>([](C& c) -> double& { return c.oracle.lambda; })},
  };
  return s;
}

inline const Field* find_field(const std::string& key) {
  for (const auto& [k, f] : schema())
    if (k == key) return &f;
  return nullptr;
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  auto check = [](bool ok, const char* key, const std::string& what) {
    if (!ok) throw ConfigError(key, std::string(key) + ": " + what);
  };
  check(world.D >= 2, "world.D", "must be >= 2");
  check(world.F >= 1, "world.F", "must be >= 1");
  check(world.C >= 1 && world.C <= 2, "world.C", "only conditions 0 (elastic) and 1 (damped) are defined");
  check(world.sigma_px > 0.0, "world.sigma_px", "must be > 0");
  check(world.v_max > 0.0, "world.v_max", "must be > 0");
  check(episode_chunks >= 2, "data.episode_chunks", "must be >= 2");
  check(num_episodes >= 1, "data.num_episodes", "must be >= 1");
  check(T >= 1, "schedule.T", "must be >= 1");
  check(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0, "schedule.beta_min",
        "need 0 < beta_min <= beta_max < 1");
  for (int h : denoiser.hidden) check(h >= 1, "denoiser.hidden", "widths must be >= 1");
  check(denoiser.cond_dim >= 1, "denoiser.cond_dim", "must be >= 1");
  check(jepa.E >= 1, "jepa.E", "must be >= 1");
  for (int h : jepa.encoder_hidden) check(h >= 1, "jepa.encoder_hidden", "widths must be >= 1");
  for (int h : jepa.predictor_hidden) check(h >= 1, "jepa.predictor_hidden", "widths must be >= 1");
  check(jepa.momentum >= 0.0 && jepa.momentum <= 1.0, "jepa.momentum", "must be in [0, 1]");
  auto check_train = [&](const TrainConfig& t, const std::string& p) {
    try {
      t.validate();
    } catch (const ContractViolation& e) {
      throw ConfigError(p, p + ": " + e.what());
    }
  };
  check_train(train_denoiser, "train_denoiser");
  check_train(train_jepa, "train_jepa");
  try {
    guidance.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError("guidance", std::string("guidance: ") + e.what());
  }
  check(bon_n >= 1, "bon.n", "must be >= 1");
  check(num_conditions >= 1, "eval.num_conditions", "must be >= 1");
  check(horizon >= 1, "eval.horizon", "must be >= 1");
  check(oracle.n_samples >= 2, "oracle.n_samples", "must be >= 2");
  check(oracle.T >= 1, "oracle.T", "must be >= 1");
  check(oracle.sigma0 > 0.0, "oracle.sigma0", "must be > 0");
  check(oracle.lambda >= 0.0, "oracle.lambda", "must be >= 0");
}

// Parses config text. A relative cache_dir is resolved against `base_dir`.
inline ExperimentConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir = {}) {
  ExperimentConfig cfg;
  std::map<std::string, int> seen;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("", "line " + std::to_string(lineno) + ": expected 'key = value'");
    const auto key = detail::trim(t.substr(0, eq));
    const auto value = detail::trim(t.substr(eq + 1));
    const auto* field = detail::find_field(key);
    if (!field) throw ConfigError(key, "unknown key " + key);
    if (seen.count(key))
      throw ConfigError(key, "duplicate key " + key + " (first set on line " + std::to_string(seen[key]) + ")");
    seen[key] = lineno;
    try {
      field->set(cfg, value);
    } catch (const ConfigError&) {
      throw ConfigError(key, "bad value for " + key + ": '" + value + "'");
    }
  }
  if (cfg.cache_dir.is_relative() && !base_dir.empty()) cfg.cache_dir = base_dir / cfg.cache_dir;
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("", "cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str(), std::filesystem::absolute(path).parent_path());
}

// Every key with its effective value, in schema order. cache_dir is left
// out since it depends on where the config file lives, not on its content.
inline nlohmann::ordered_json config_echo(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, f] : detail::schema())
    if (k != "experiment.cache_dir") j[k] = f.get(cfg);
  return j;
}

// FNV-1a over the echoed values of the listed key prefixes.
inline std::uint64_t config_hash(const ExperimentConfig& cfg, const std::vector<std::string>& prefixes) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](const std::string& s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    h ^= 0xff;
    h *= 1099511628211ULL;
  };
  for (const auto& [k, f] : detail::schema())
    for (const auto& p : prefixes)
      if (k.rfind(p, 0) == 0) {
        feed(k);
        feed(f.get(cfg));
        break;
      }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t dataset_hash(const ExperimentConfig& c) {
  return config_hash(c, {"world.", "data.", "experiment.base_seed"});
}
inline std::uint64_t denoiser_hash(const ExperimentConfig& c) {
  return config_hash(c, {"world.", "data.", "experiment.base_seed", "schedule.", "denoiser.", "train_denoiser."});
}
inline std::uint64_t jepa_hash(const ExperimentConfig& c) {
  return config_hash(c, {"world.", "data.", "experiment.base_seed", "jepa.", "train_jepa."});
}

}  // namespace sgds
