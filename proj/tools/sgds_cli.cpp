#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "sgds/harness/experiment.hpp"

namespace {

enum Exit { kOk = 0, kUsage = 1, kConfig = 2, kRuntime = 3, kAcceptance = 4 };

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void log_line(const std::string& s) { std::cerr << "[sgds] " << s << std::endl; }

int cmd_train_denoiser(const std::string& cfg_path) {
  const auto c = sgds::parse_config(cfg_path);
  const auto t0 = Clock::now();
  const auto s = sgds::train_and_save_denoiser(c, log_line);
  std::printf("denoiser %s\ninitial_loss %s\nfinal_loss %s\nseconds %.1f\n",
              sgds::cache_paths(c).denoiser.string().c_str(), sgds::fmt9(s.initial_loss).c_str(),
              sgds::fmt9(s.final_loss).c_str(), seconds_since(t0));
  return kOk;
}

int cmd_train_jepa(const std::string& cfg_path) {
  const auto c = sgds::parse_config(cfg_path);
  const auto t0 = Clock::now();
  const auto s = sgds::train_and_save_jepa(c, log_line);
  std::printf("jepa %s\nfirst_epoch_loss %s\nfinal_loss %s\nseconds %.1f\n",
              sgds::cache_paths(c).jepa_prefix.string().c_str(), sgds::fmt9(s.initial_loss).c_str(),
              sgds::fmt9(s.final_loss).c_str(), seconds_since(t0));
  return kOk;
}

int cmd_generate(const std::string& cfg_path, std::uint64_t seed, const std::string& arm, int cond_id) {
  const auto c = sgds::parse_config(cfg_path);
  if (cond_id < 0 || cond_id >= c.world.C) {
    std::cerr << "error: --cond must be in [0, " << c.world.C << ")\n";
    return kUsage;
  }
  const auto models = sgds::load_or_train(c, log_line);
  const sgds::ConditionLabel cond(cond_id);
  const std::size_t F = static_cast<std::size_t>(c.world.F);
  sgds::EvalCondition row{0, seed, cond, sgds::make_episode(seed, cond, F * (1 + c.horizon), c.world)};
  std::size_t best = 0;
  const auto seq = sgds::generate_arm(c, models, row, arm[0], &best);
  const auto context = sgds::chunk_episode(row.episode, F).front();
  const auto scored = sgds::score_sequence(models.jepa, seq, context,
                                           std::span<const sgds::Frame>(row.episode.frames.data(), F), cond,
                                           c.world.v_max);
  nlohmann::ordered_json out{{"seed", seed},
                             {"condition", cond_id},
                             {"arm", arm},
                             {"interior_context", sgds::interior_context(seed, cond, F, c.world)},
                             {"plausibility_error", scored.plausibility_error},
                             {"mean_surprise", scored.mean_surprise},
                             {"chunk_surprise", scored.chunk_surprise}};
  if (arm == "c") out["best_index"] = best;
  out["frames"] = sgds::unchunk(seq);
  sgds::write_json9(std::cout, out);
  std::cout << '\n';
  return kOk;
}

int cmd_evaluate(const std::string& cfg_path, const std::string& out_dir, unsigned threads) {
  const auto c = sgds::parse_config(cfg_path);
  sgds::Timings t;
  auto t0 = Clock::now();
  const auto models = sgds::load_or_train(c, log_line);
  t.load_or_train_s = seconds_since(t0);
  t.denoiser_cached = models.denoiser_cached;
  t.jepa_cached = models.jepa_cached;
  t0 = Clock::now();
  const auto rep = sgds::evaluate(c, models, threads, log_line);
  t.evaluate_s = seconds_since(t0);
  sgds::write_report(rep, out_dir, &t);
  std::cout << sgds::summary_csv_text(rep);
  std::printf("c_wins_or_ties %zu/%zu\n", rep.c_wins_or_ties, rep.rows.size());
  return kOk;
}

int cmd_oracle_check(const std::string& cfg_path, const std::string& out_dir, unsigned threads) {
  const auto c = sgds::parse_config(cfg_path);
  const auto oc = sgds::run_oracle_check(c, threads);
  std::filesystem::create_directories(out_dir);
  std::ostringstream os;
  sgds::write_json9(os, sgds::to_json(oc));
  os << '\n';
  sgds::write_text(std::filesystem::path(out_dir) / "oracle_report.json", os.str());
  for (const auto& r : oc.reports) {
    std::printf("w=(%g,%g,%g) lambda=%g |z|max=%.3f var_ratio=(", r.weights.omega_ctx, r.weights.omega_txt,
                r.weights.omega_s, r.lambda, std::max(std::abs(r.z_mean[0]), std::abs(r.z_mean[1])));
    for (std::size_t i = 0; i < r.var_ratio.size(); ++i) std::printf(i ? ",%.4f" : "%.4f", r.var_ratio[i]);
    std::printf(")\n");
  }
  std::printf("oracle %s\n", oc.pass ? "PASS" : "FAIL");
  return oc.pass ? kOk : kAcceptance;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Surprise-guided diffusion sampling, desk-scale experiments"};
  app.require_subcommand(1);
  std::string cfg, out, arm;
  std::uint64_t seed = 0;
  int cond = 0;
  unsigned threads = sgds::default_threads();

  auto* td = app.add_subcommand("train-denoiser", "Train the denoiser and write it to the cache");
  td->add_option("config", cfg, "Config file")->required();
  auto* tj = app.add_subcommand("train-jepa", "Train the JEPA surprise model and write it to the cache");
  tj->add_option("config", cfg, "Config file")->required();
  auto* gen = app.add_subcommand("generate", "Generate one continuation of a held-out episode and print it as JSON");
  gen->add_option("config", cfg, "Config file")->required();
  gen->add_option("--seed", seed, "Episode seed")->required();
  gen->add_option("--arm", arm, "a: vanilla, b: surprise-guided, c: guided + best-of-N")
      ->required()
      ->check(CLI::IsMember({"a", "b", "c"}));
  gen->add_option("--cond", cond, "Condition id")->capture_default_str();
  auto* ev = app.add_subcommand("evaluate", "Run the three-arm comparison and write report.json and summary.csv");
  ev->add_option("config", cfg, "Config file")->required();
  ev->add_option("--out", out, "Output directory")->required();
  ev->add_option("--threads", threads, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
  auto* oc = app.add_subcommand("oracle-check", "Check the guided sampler against the Gaussian oracle");
  oc->add_option("config", cfg, "Config file")->required();
  oc->add_option("--out", out, "Output directory")->required();
  oc->add_option("--threads", threads, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*td) return cmd_train_denoiser(cfg);
    if (*tj) return cmd_train_jepa(cfg);
    if (*gen) return cmd_generate(cfg, seed, arm, cond);
    if (*ev) return cmd_evaluate(cfg, out, threads);
    if (*oc) return cmd_oracle_check(cfg, out, threads);
  } catch (const sgds::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
