#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "cnuav/harness.hpp"

using namespace cnuav;
using namespace cnuav::harness;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> episodes;
  std::string preset;
  std::string out;
  std::string model;
};

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("cnuav");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* lvl = std::getenv("CNUAV_LOG_LEVEL")) {
    const auto parsed = spdlog::level::from_str(lvl);
    if (parsed == spdlog::level::off && std::string(lvl) != "off")
      spdlog::warn("CNUAV_LOG_LEVEL='{}' not recognised, keeping info", lvl);
    else
      spdlog::set_level(parsed);
  }
}

ExperimentConfig resolve(const Flags& f) {
  ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
  if (f.seed) cfg.seeds = {*f.seed};
  if (f.episodes) cfg.episodes = *f.episodes;
  if (!f.preset.empty()) cfg.preset = f.preset;
  if (!f.out.empty()) cfg.output_dir = f.out;
  cfg.validate();
  spdlog::debug("config hash {}", config_hash(cfg));
  return cfg;
}

std::string model_path(const Flags& f, const ExperimentConfig& cfg) {
  return f.model.empty() ? (fs::path(cfg.output_dir) / "model.json").string() : f.model;
}

int cmd_train(const Flags& f) {
  const auto cfg = resolve(f);
  const auto seed = cfg.seeds.front();
  spdlog::info("training vocabularies for seed {}", seed);
  const auto models = train_models(cfg, cfg.env, seed);
  spdlog::info("clusters: noise {}, pu {}, combined {}", models.noise.num_clusters(), models.pu.num_clusters(),
               models.combined.num_clusters());
  const auto path = model_path(f, cfg);
  save_model(models, cfg, path);
  spdlog::info("model written to {}", path);
  return 0;
}

int cmd_run(const Flags& f) {
  const auto cfg = resolve(f);
  std::optional<gdbn::Models> loaded;
  if (!f.model.empty()) {
    loaded = load_model(f.model, &cfg);
    spdlog::info("loaded model {}", f.model);
  }
  ExperimentResult res;
  for (auto seed : cfg.seeds) {
    const auto models = loaded ? *loaded : train_models(cfg, cfg.env, seed);
    auto run = run_agent(cfg, cfg.env, models, seed, "gdbn");
    const auto s = summarize(run.record);
    spdlog::info("seed {}: final sum rate {:.4g} bit/s, episodes to 95% {}, {:.2f} s", seed, s.final_sum_rate_bps,
                 s.episodes_to_95, run.record.wall_clock_s);
    res.records.push_back(std::move(run.record));
  }
  write_outputs(cfg, "run", res);
  spdlog::info("{} files written to {}", res.files.size(), cfg.output_dir);
  return 0;
}

int cmd_sweep(const Flags& f) {
  const auto cfg = resolve(f);
  spdlog::info("preset {} with {} seed(s), {} episodes", cfg.preset, cfg.seeds.size(), cfg.episodes);
  const auto res = run_experiment(cfg);
  for (const auto& r : res.records) spdlog::debug("{} seed {}: {:.2f} s", r.curve, r.seed, r.wall_clock_s);
  spdlog::info("{} files written to {}", res.files.size(), cfg.output_dir);
  return 0;
}

int cmd_oracle(const Flags& f) {
  const auto cfg = resolve(f);
  const sim::Environment env(cfg.env, cfg.seeds.front());
  const auto r = baselines::exhaustive_oracle(env, cfg.grid);
  json out = {{"seed", cfg.seeds.front()},
              {"assignment", r.assignment},
              {"grid_power_w", r.grid_power},
              {"sum_rate_bps", r.sum_rate},
              {"evaluated", r.evaluated}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_report(const Flags& f) {
  const fs::path dir = f.out.empty() ? fs::path("out") : fs::path(f.out);
  const auto records = read_records(dir);
  std::cout << emit_report(records);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Cognitive NOMA UAV uplink allocation: training, runs, sweeps and reports"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "flat JSON configuration file");
  app.add_option("--seed", f.seed, "single seed (overrides the config)");
  app.add_option("--episodes", f.episodes, "number of episodes");
  app.add_option("--preset", f.preset, "experiment preset for sweep");
  app.add_option("--out", f.out, "output directory");
  app.add_option("--model", f.model, "model document path");
  auto* train = app.add_subcommand("train", "learn vocabularies offline and save a model");
  auto* run = app.add_subcommand("run", "run online episodes (from --model, or a freshly trained one)");
  auto* sweep = app.add_subcommand("sweep", "run an experiment preset");
  auto* oracle = app.add_subcommand("oracle", "exact solve of a small instance");
  auto* report = app.add_subcommand("report", "summarise the records in --out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(f);
    if (*run) return cmd_run(f);
    if (*sweep) return cmd_sweep(f);
    if (*oracle) return cmd_oracle(f);
    if (*report) return cmd_report(f);
  } catch (const ConfigError& e) {
    spdlog::error("config error [{}]: {}", e.key(), e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 3;
  }
  return 2;
}
