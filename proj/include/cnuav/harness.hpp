#pragma once

// Experiment configuration, seeded orchestration of the figure presets,
// CSV/manifest persistence, model documents and summary reports.

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "cnuav/agent.hpp"
#include "cnuav/baselines.hpp"
#include "cnuav/env.hpp"
#include "cnuav/error.hpp"
#include "cnuav/gdbn.hpp"

namespace cnuav::harness {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"fig3_convergence", "fig4_cum_abnormality", "fig5_gng_lr",
                                              "fig6_baselines", "fig7_inphase_errors"};
  return names;
}

struct ExperimentConfig {
  sim::EnvConfig env;
  agent::AgentConfig agent;
  gdbn::LearningConfig learning;
  baselines::QLearningConfig qlearning;
  baselines::PowerGrid grid;
  std::string preset = "fig3_convergence";
  std::vector<int> m_values{1, 3, 5, 7};
  std::vector<double> learning_rates{0.1, 0.01, 0.001};
  int episodes = 100;
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "out";
  int threads = 0;  // 0: hardware concurrency

  void validate() const {
    env.validate();
    agent.validate(env.p_max);
    learning.gng.validate();
    require(learning.gng.resolution >= 0.0, "gng_resolution", "must be non-negative");
    require(learning.gng.max_edge_age >= 1, "gng_max_edge_age", "must be >= 1");
    require(learning.transition_smoothing >= 0.0, "transition_smoothing", "must be non-negative");
    require(learning.process_noise_floor >= 0.0, "process_noise_floor", "must be non-negative");
    qlearning.validate();
    try {
      grid.validate(env.p_max);
    } catch (const ConfigError& e) {
      throw ConfigError("power_grid", e.what());
    }
    require(std::find(preset_names().begin(), preset_names().end(), preset) != preset_names().end(), "preset",
            "unknown preset '" + preset + "'");
    require(!m_values.empty(), "m_values", "must not be empty");
    for (int m : m_values) require(m >= 1, "m_values", "entries must be >= 1");
    require(!learning_rates.empty(), "learning_rates", "must not be empty");
    for (double lr : learning_rates) require(lr > 0.0 && lr < 1.0, "learning_rates", "entries must lie in (0, 1)");
    require(episodes >= 1, "episodes", "must be >= 1");
    require(!seeds.empty(), "seeds", "must not be empty");
    require(!output_dir.empty(), "output_dir", "must not be empty");
    require(threads >= 0, "threads", "must be >= 0");
  }
};

/// Every documented key, in serialization order.
template <class C, class F>
void visit_fields(C& c, F&& f) {
  f("num_sus", c.env.num_sus);
  f("num_subchannels", c.env.num_subchannels);
  f("episode_length", c.env.episode_length);
  f("cell_radius", c.env.cell_radius);
  f("uav_altitude", c.env.uav_altitude);
  f("min_distance", c.env.min_distance);
  f("rho0", c.env.rho0);
  f("rician_k", c.env.rician_k);
  f("bandwidth_hz", c.env.bandwidth_hz);
  f("noise_psd_dbm_hz", c.env.noise_psd_dbm_hz);
  f("p_max", c.env.p_max);
  f("max_per_channel", c.env.max_per_channel);
  f("delta_y", c.env.delta_y);
  f("p_th", c.env.p_th);
  f("pu_channels", c.env.pu_channels);
  f("pu_stay_vacant", c.env.pu_stay_vacant);
  f("pu_stay_occupied", c.env.pu_stay_occupied);
  f("pu_snr_db", c.env.pu_snr_db);
  f("mobility_step", c.env.mobility_step);
  f("redraw_fading", c.env.redraw_fading);
  f("observation_noise_std", c.env.observation_noise_std);
  f("initial_power", c.agent.initial_power);
  f("pu_skip_threshold", c.agent.pu_skip_threshold);
  f("step_size", c.agent.step_size);
  f("harmonic_decay", c.agent.harmonic_decay);
  f("temperature", c.agent.temperature);
  f("power_gain", c.agent.power_gain);
  f("num_particles", c.agent.num_particles);
  f("tau_segments", c.agent.tau_segments);
  f("training_traces", c.agent.training_traces);
  f("relax_rate", c.agent.relax_rate);
  f("gng_learning_rate", c.learning.gng.learning_rate);
  f("gng_max_nodes", c.learning.gng.max_nodes);
  f("gng_epochs", c.learning.gng.epochs);
  f("gng_max_edge_age", c.learning.gng.max_edge_age);
  f("gng_insertion_interval", c.learning.gng.insertion_interval);
  f("gng_resolution", c.learning.gng.resolution);
  f("transition_smoothing", c.learning.transition_smoothing);
  f("process_noise_floor", c.learning.process_noise_floor);
  f("q_alpha", c.qlearning.alpha);
  f("q_gamma", c.qlearning.gamma);
  f("q_epsilon_start", c.qlearning.epsilon_start);
  f("q_epsilon_end", c.qlearning.epsilon_end);
  f("q_gain_buckets", c.qlearning.gain_buckets);
  f("power_grid", c.grid.levels);
  f("preset", c.preset);
  f("m_values", c.m_values);
  f("learning_rates", c.learning_rates);
  f("episodes", c.episodes);
  f("seeds", c.seeds);
  f("output_dir", c.output_dir);
  f("threads", c.threads);
}

namespace detail {

template <class T>
struct elem {
  using type = T;
};
template <class T>
struct elem<std::vector<T>> {
  using type = T;
};
template <class T>
struct elem<std::set<T>> {
  using type = T;
};

inline void check_scalar_kind(const json& v, bool integral, bool is_unsigned, const std::string& key) {
  if (integral && !v.is_number_integer()) throw ConfigError(key, "expected an integer");
  if (is_unsigned && !v.is_number_unsigned()) throw ConfigError(key, "expected a non-negative integer");
}

template <class T>
void read_field(const json& v, T& out, const std::string& key) {
  using E = typename elem<T>::type;
  constexpr bool integral = std::is_integral_v<E> && !std::is_same_v<E, bool>;
  constexpr bool is_unsigned = integral && std::is_unsigned_v<E>;
  if constexpr (!std::is_same_v<E, T>) {
    if (!v.is_array()) throw ConfigError(key, "expected an array");
    for (const auto& x : v) check_scalar_kind(x, integral, is_unsigned, key);
  } else {
    check_scalar_kind(v, integral, is_unsigned, key);
  }
  try {
    out = v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(key, std::string("wrong type: ") + e.what());
  }
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  json j = json::object();
  visit_fields(c, [&](const char* key, const auto& v) { j[key] = v; });
  j["combiner"] = c.agent.combiner == mjpf::Combiner::Sum ? "sum" : "max";
  return j;
}

/// Keys absent from the document keep their defaults; unknown keys are rejected.
inline ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config", "document must be a JSON object");
  ExperimentConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "combiner") {
      if (value == "sum") c.agent.combiner = mjpf::Combiner::Sum;
      else if (value == "max") c.agent.combiner = mjpf::Combiner::Max;
      else throw ConfigError("combiner", "must be \"sum\" or \"max\"");
      continue;
    }
    bool known = false;
    visit_fields(c, [&](const char* name, auto& field) {
      if (known || key != name) return;
      known = true;
      detail::read_field(value, field, key);
    });
    if (!known) throw ConfigError(key, "unknown key");
  }
  c.validate();
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  if (std::all_of(text.begin(), text.end(), [](unsigned char ch) { return std::isspace(ch); }))
    return config_from_json(json::object());
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("parse error: ") + e.what());
  }
  return config_from_json(j);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ExperimentConfig load_config(const fs::path& path) { return parse_config(read_file(path)); }

// ---------------------------------------------------------------------------

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xF]);
  }
  return out;
}

inline std::string config_hash(const ExperimentConfig& c) { return sha256_hex(to_json(c).dump()); }

/// Shortest round-trip decimal form; locale independent.
inline std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

/// Independent generator for (seed, stream).
inline Rng stream_rng(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return Rng(seq);
}

// ---------------------------------------------------------------------------
// Runs

struct EpisodeRow {
  int episode = 0;
  double sum_rate_bps = 0.0;
  double cum_sum_rate_bps = 0.0;
  double cum_abnormality = std::numeric_limits<double>::quiet_NaN();
  double mean_inphase_error = std::numeric_limits<double>::quiet_NaN();
};

struct RunRecord {
  std::string curve;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<EpisodeRow> rows;
  double wall_clock_s = 0.0;

  std::vector<double> sum_rates() const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.sum_rate_bps);
    return v;
  }
  std::vector<double> abnormalities() const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.cum_abnormality);
    return v;
  }
};

inline void append_row(RunRecord& rec, double sum_rate, double abnormality, double inphase) {
  EpisodeRow r;
  r.episode = static_cast<int>(rec.rows.size()) + 1;
  r.sum_rate_bps = sum_rate;
  r.cum_sum_rate_bps = (rec.rows.empty() ? 0.0 : rec.rows.back().cum_sum_rate_bps) + sum_rate;
  r.cum_abnormality = abnormality;
  r.mean_inphase_error = inphase;
  rec.rows.push_back(r);
}

struct AgentRun {
  RunRecord record;
  std::vector<std::vector<double>> slot_inphase;  // [episode][slot]
};

inline gdbn::LearningConfig learning_for(const ExperimentConfig& cfg, const sim::EnvConfig& env_cfg) {
  gdbn::LearningConfig lc = cfg.learning;
  lc.observation_noise_std = env_cfg.observation_noise_std;
  lc.tau_segments = cfg.agent.tau_segments;
  return lc;
}

/// Offline perception for the cell drawn from `seed`.
inline gdbn::Models train_models(const ExperimentConfig& cfg, const sim::EnvConfig& env_cfg, std::uint64_t seed) {
  const sim::Environment env(env_cfg, seed);
  Rng rng = stream_rng(seed, 1);
  const auto set = agent::make_training_set(env, cfg.agent, rng);
  return gdbn::learn_vocabularies(set, learning_for(cfg, env_cfg), rng);
}

inline AgentRun run_agent(const ExperimentConfig& cfg, const sim::EnvConfig& env_cfg, const gdbn::Models& models,
                          std::uint64_t seed, std::string curve) {
  const auto t0 = std::chrono::steady_clock::now();
  sim::Environment env(env_cfg, seed);
  agent::Agent ag(models, cfg.agent, env, stream_rng(seed, 2)());
  AgentRun out;
  out.record.curve = std::move(curve);
  out.record.config_hash = config_hash(cfg);
  out.record.seed = seed;
  for (int e = 0; e < cfg.episodes; ++e) {
    const auto tr = ag.run_episode(env);
    append_row(out.record, tr.mean_sum_rate, tr.cum_abnormality, tr.mean_inphase_error);
    std::vector<double> per_slot;
    for (const auto& s : tr.slots) per_slot.push_back(s.inphase_error);
    out.slot_inphase.push_back(std::move(per_slot));
  }
  out.record.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline AgentRun train_and_run(const ExperimentConfig& cfg, const sim::EnvConfig& env_cfg, std::uint64_t seed,
                              std::string curve) {
  return run_agent(cfg, env_cfg, train_models(cfg, env_cfg, seed), seed, std::move(curve));
}

inline RunRecord run_qlearning(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  sim::Environment env(cfg.env, seed);
  Rng rng = stream_rng(seed, 3);
  const auto res = baselines::q_learning_allocate(env, cfg.episodes, cfg.qlearning, cfg.grid, rng);
  RunRecord rec{"qlearning", config_hash(cfg), seed, {}, 0.0};
  for (double r : res.episode_sum_rate) append_row(rec, r, std::numeric_limits<double>::quiet_NaN(),
                                                   std::numeric_limits<double>::quiet_NaN());
  rec.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

/// Constant comparator: the exact oracle when the instance is small enough,
/// otherwise the round-robin full-power allocation.
inline RunRecord run_reference(const ExperimentConfig& cfg, std::uint64_t seed) {
  const sim::Environment env(cfg.env, seed);
  const double combos = std::pow(env.num_channels() + 1.0, env.num_sus()) *
                        std::pow(static_cast<double>(cfg.grid.size()), env.num_sus());
  RunRecord rec{"", config_hash(cfg), seed, {}, 0.0};
  double rate = 0.0;
  if (combos <= 1e7) {
    rec.curve = "oracle";
    rate = baselines::exhaustive_oracle(env, cfg.grid).sum_rate;
  } else {
    rec.curve = "greedy_reference";
    rate = env.rates(baselines::greedy_allocate(env)).sum_rate;
  }
  for (int e = 0; e < cfg.episodes; ++e)
    append_row(rec, rate, std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN());
  return rec;
}

// ---------------------------------------------------------------------------
// CSV

inline const char* kEpisodeHeader = "episode,sum_rate_bps,cum_sum_rate_bps,cum_abnormality,mean_inphase_error,seed";

inline std::string to_csv(const RunRecord& rec) {
  std::string out = std::string(kEpisodeHeader) + "\n";
  for (const auto& r : rec.rows) {
    out += std::to_string(r.episode) + "," + format_number(r.sum_rate_bps) + "," +
           format_number(r.cum_sum_rate_bps) + "," + format_number(r.cum_abnormality) + "," +
           format_number(r.mean_inphase_error) + "," + std::to_string(rec.seed) + "\n";
  }
  return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  return out;
}

inline double parse_number(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double x = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw Error("csv: bad number '" + s + "'");
  return x;
}

inline RunRecord record_from_csv(const std::string& text, std::string curve) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kEpisodeHeader) throw Error("csv: unexpected header in " + curve);
  RunRecord rec;
  rec.curve = std::move(curve);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 6) throw Error("csv: expected 6 columns in " + rec.curve);
    EpisodeRow r;
    r.episode = std::stoi(f[0]);
    r.sum_rate_bps = parse_number(f[1]);
    r.cum_sum_rate_bps = parse_number(f[2]);
    r.cum_abnormality = parse_number(f[3]);
    r.mean_inphase_error = parse_number(f[4]);
    rec.seed = std::stoull(f[5]);
    rec.rows.push_back(r);
  }
  return rec;
}

/// Per-slot in-phase error for selected episodes (1-based), one column each.
inline std::string inphase_csv(const AgentRun& run, const std::vector<int>& episodes) {
  std::string out = "slot";
  for (int e : episodes) out += ",episode_" + std::to_string(e);
  out += ",seed\n";
  const std::size_t slots = run.slot_inphase.empty() ? 0 : run.slot_inphase.front().size();
  for (std::size_t t = 0; t < slots; ++t) {
    out += std::to_string(t + 1);
    for (int e : episodes) out += "," + format_number(run.slot_inphase[static_cast<std::size_t>(e - 1)][t]);
    out += "," + std::to_string(run.record.seed) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

inline double final_mean(const std::vector<double>& x, int window = 10) {
  if (x.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto n = std::min<std::size_t>(x.size(), static_cast<std::size_t>(window));
  double s = 0.0;
  for (std::size_t i = x.size() - n; i < x.size(); ++i) s += x[i];
  return s / static_cast<double>(n);
}

/// First episode (1-based) whose value reaches `fraction` of the final mean.
inline int episodes_to_fraction(const std::vector<double>& x, double fraction = 0.95, int window = 10) {
  const double target = fraction * final_mean(x, window);
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] >= target) return static_cast<int>(i) + 1;
  return static_cast<int>(x.size());
}

/// First episode (1-based, end of the smoothing window) at which the
/// `smooth`-episode moving average comes within `band` of the way from its
/// peak down to the floor; the floor is the mean of the last `window` episodes.
inline std::optional<int> episodes_to_floor(const std::vector<double>& x, int smooth = 5, int window = 10,
                                            double band = 0.05) {
  if (x.empty() || std::any_of(x.begin(), x.end(), [](double v) { return std::isnan(v); })) return std::nullopt;
  const auto w = static_cast<std::size_t>(std::clamp<int>(smooth, 1, static_cast<int>(x.size())));
  std::vector<double> ma;
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += x[i];
    if (i >= w) s -= x[i - w];
    if (i + 1 >= w) ma.push_back(s / static_cast<double>(w));
  }
  const double floor = final_mean(x, window);
  const double peak = *std::max_element(ma.begin(), ma.end());
  const double level = floor + band * std::max(0.0, peak - floor);
  for (std::size_t i = 0; i < ma.size(); ++i)
    if (ma[i] <= level) return static_cast<int>(i + w);
  return static_cast<int>(x.size());
}

struct ReportRow {
  std::string curve;
  std::uint64_t seed = 0;
  double final_sum_rate_bps = 0.0;
  int episodes_to_95 = 0;
  double total_abnormality = 0.0;
  std::optional<int> episodes_to_floor;
};

inline ReportRow summarize(const RunRecord& rec) {
  ReportRow r;
  r.curve = rec.curve;
  r.seed = rec.seed;
  const auto rates = rec.sum_rates();
  r.final_sum_rate_bps = final_mean(rates);
  r.episodes_to_95 = episodes_to_fraction(rates);
  const auto abn = rec.abnormalities();
  r.total_abnormality = 0.0;
  for (double a : abn) r.total_abnormality += a;
  r.episodes_to_floor = episodes_to_floor(abn);
  return r;
}

/// Summary CSV, one row per record in input order.
inline std::string emit_report(const std::vector<RunRecord>& records) {
  require(!records.empty(), "records", "report needs at least one record");
  std::string out = "curve,seed,final_sum_rate_bps,episodes_to_95,total_abnormality,episodes_to_floor\n";
  for (const auto& rec : records) {
    const auto r = summarize(rec);
    out += r.curve + "," + std::to_string(r.seed) + "," + format_number(r.final_sum_rate_bps) + "," +
           std::to_string(r.episodes_to_95) + "," + format_number(r.total_abnormality) + "," +
           (r.episodes_to_floor ? std::to_string(*r.episodes_to_floor) : std::string()) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentResult {
  std::vector<RunRecord> records;
  std::vector<AgentRun> inphase_runs;  // fig7 only
  std::vector<std::string> files;      // relative to output_dir, manifest last
};

namespace detail {

struct JobOutput {
  std::vector<RunRecord> records;
  std::vector<AgentRun> inphase;
};

inline std::string lr_label(double lr) { return format_number(lr); }

inline std::vector<std::function<JobOutput()>> preset_jobs(const ExperimentConfig& cfg) {
  std::vector<std::function<JobOutput()>> jobs;
  const auto& p = cfg.preset;
  for (std::uint64_t seed : cfg.seeds) {
    if (p == "fig3_convergence") {
      for (int m : cfg.m_values)
        jobs.emplace_back([cfg, seed, m] {
          auto env = cfg.env;
          env.max_per_channel = m;
          return JobOutput{{train_and_run(cfg, env, seed, "M" + std::to_string(m)).record}, {}};
        });
    } else if (p == "fig4_cum_abnormality") {
      jobs.emplace_back([cfg, seed] { return JobOutput{{train_and_run(cfg, cfg.env, seed, "gdbn").record}, {}}; });
    } else if (p == "fig5_gng_lr") {
      for (double lr : cfg.learning_rates)
        jobs.emplace_back([cfg, seed, lr] {
          auto c = cfg;
          c.learning.gng.learning_rate = lr;
          auto run = train_and_run(c, c.env, seed, "lr" + lr_label(lr));
          run.record.config_hash = config_hash(cfg);
          return JobOutput{{run.record}, {}};
        });
    } else if (p == "fig6_baselines") {
      jobs.emplace_back([cfg, seed] { return JobOutput{{train_and_run(cfg, cfg.env, seed, "gdbn").record}, {}}; });
      jobs.emplace_back([cfg, seed] { return JobOutput{{run_qlearning(cfg, seed)}, {}}; });
      jobs.emplace_back([cfg, seed] { return JobOutput{{run_reference(cfg, seed)}, {}}; });
    } else if (p == "fig7_inphase_errors") {
      jobs.emplace_back([cfg, seed] {
        auto run = train_and_run(cfg, cfg.env, seed, "gdbn");
        return JobOutput{{run.record}, {run}};
      });
    }
  }
  return jobs;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace detail

inline std::string curve_file(const std::string& preset, const RunRecord& rec) {
  return preset + "_" + rec.curve + "_seed" + std::to_string(rec.seed) + ".csv";
}

/// Writes one CSV per record, the per-slot in-phase tables, a summary report
/// and a manifest (file list with SHA-256, config and completion status).
inline void write_outputs(const ExperimentConfig& cfg, const std::string& label, ExperimentResult& res,
                          const std::optional<std::string>& error = std::nullopt) {
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  json files = json::array();
  auto emit = [&](const std::string& name, const std::string& text, long rows) {
    detail::write_text(dir / name, text);
    files.push_back({{"path", name}, {"sha256", sha256_hex(text)}, {"rows", rows}});
    res.files.push_back(name);
  };
  for (const auto& rec : res.records)
    emit(curve_file(label, rec), to_csv(rec), static_cast<long>(rec.rows.size()));
  for (const auto& run : res.inphase_runs) {
    const auto text = inphase_csv(run, {1, 10, 30});
    emit(label + "_inphase_seed" + std::to_string(run.record.seed) + ".csv", text,
         static_cast<long>(run.slot_inphase.front().size()));
  }
  if (!res.records.empty()) emit("report.csv", emit_report(res.records), static_cast<long>(res.records.size()));

  json manifest = {{"preset", label},
                   {"config_hash", config_hash(cfg)},
                   {"config", to_json(cfg)},
                   {"status", error ? "failed" : "complete"},
                   {"files", files}};
  if (error) manifest["error"] = *error;
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  res.files.push_back("manifest.json");
}

/// Runs the configured preset with replicas in parallel, then writes one CSV
/// per curve, a summary report and a manifest in a fixed order. If a replica
/// fails, the completed curves are still written and the manifest is marked
/// failed before the error propagates.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.preset == "fig7_inphase_errors")
    require(cfg.episodes >= 30, "episodes", "fig7_inphase_errors needs at least 30 episodes");
  const auto jobs = detail::preset_jobs(cfg);
  const std::size_t width = cfg.threads > 0 ? static_cast<std::size_t>(cfg.threads)
                                            : std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::optional<detail::JobOutput>> done(jobs.size());
  std::exception_ptr first_error;
  std::string error_text;
  for (std::size_t start = 0; start < jobs.size(); start += width) {
    std::vector<std::future<detail::JobOutput>> batch;
    const std::size_t end = std::min(jobs.size(), start + width);
    for (std::size_t i = start; i < end; ++i) batch.push_back(std::async(std::launch::async, jobs[i]));
    for (std::size_t i = start; i < end; ++i) {
      try {
        done[i] = batch[i - start].get();
      } catch (const std::exception& e) {
        if (!first_error) {
          first_error = std::current_exception();
          error_text = e.what();
        }
      }
    }
  }

  ExperimentResult res;
  for (auto& d : done) {
    if (!d) continue;
    for (auto& r : d->records) res.records.push_back(std::move(r));
    for (auto& a : d->inphase) res.inphase_runs.push_back(std::move(a));
  }

  write_outputs(cfg, cfg.preset, res, first_error ? std::optional<std::string>(error_text) : std::nullopt);
  if (first_error) std::rethrow_exception(first_error);
  return res;
}

/// Episode records listed in a manifest (per-episode CSVs only).
inline std::vector<RunRecord> read_records(const fs::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw ConfigError("manifest", e.what());
  }
  std::vector<RunRecord> out;
  for (const auto& f : manifest.at("files")) {
    const auto name = f.at("path").get<std::string>();
    const auto text = read_file(dir / name);
    if (text.rfind(kEpisodeHeader, 0) != 0) continue;
    if (sha256_hex(text) != f.at("sha256").get<std::string>()) throw ModelError("manifest: hash mismatch for " + name);
    auto stem = fs::path(name).stem().string();
    const auto seed_pos = stem.rfind("_seed");
    const auto preset = manifest.at("preset").get<std::string>();
    std::string curve = stem.substr(0, seed_pos);
    if (curve.rfind(preset + "_", 0) == 0) curve = curve.substr(preset.size() + 1);
    auto rec = record_from_csv(text, curve);
    rec.config_hash = manifest.at("config_hash").get<std::string>();
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model documents

inline constexpr int kModelVersion = 1;

namespace detail {

inline json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (long r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (long c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from(const json& j, long rows = -1, long cols = -1) {
  if (!j.is_array()) throw ModelError("model: matrix must be an array of rows");
  const long r = static_cast<long>(j.size());
  const long c = r == 0 ? 0 : static_cast<long>(j.front().size());
  if ((rows >= 0 && r != rows) || (cols >= 0 && c != cols)) throw ModelError("model: matrix has the wrong shape");
  Eigen::MatrixXd m(r, c);
  for (long i = 0; i < r; ++i) {
    if (static_cast<long>(j[static_cast<std::size_t>(i)].size()) != c) throw ModelError("model: ragged matrix");
    for (long k = 0; k < c; ++k) m(i, k) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)].get<double>();
  }
  return m;
}

inline json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

template <int N>
Eigen::Matrix<double, N, 1> vec_from(const json& j) {
  const auto v = j.get<std::vector<double>>();
  if (static_cast<int>(v.size()) != N) throw ModelError("model: vector has the wrong length");
  return Eigen::Map<const Eigen::Matrix<double, N, 1>>(v.data());
}

inline json vocab_json(const gdbn::Vocabulary& v) {
  json clusters = json::array();
  for (const auto& c : v.clusters)
    clusters.push_back({{"id", c.id}, {"mean", vec_json(c.mean)}, {"covariance", matrix_json(c.covariance)},
                        {"hit_count", c.hit_count}});
  json transitions = json::array();
  for (const auto& t : v.transitions) transitions.push_back(matrix_json(t));
  json control = json::array();
  for (const auto& u : v.dynamics.control) control.push_back(vec_json(u));
  return {{"entity", gdbn::to_string(v.entity)},
          {"gng_learning_rate", v.gng_learning_rate},
          {"clusters", clusters},
          {"transitions", transitions},
          {"dynamics",
           {{"C", matrix_json(v.dynamics.C)},
            {"D", matrix_json(v.dynamics.D)},
            {"control", control},
            {"Q", matrix_json(v.dynamics.Q)},
            {"H", matrix_json(v.dynamics.H)},
            {"R", matrix_json(v.dynamics.R)}}},
          {"preferred", {{"mean", vec_json(v.preferred.mean)}, {"cov", matrix_json(v.preferred.cov)}}}};
}

inline gdbn::Vocabulary vocab_from(const json& j, gdbn::Entity entity) {
  gdbn::Vocabulary v;
  v.entity = entity;
  if (j.at("entity").get<std::string>() != gdbn::to_string(entity)) throw ModelError("model: entity label mismatch");
  v.gng_learning_rate = j.at("gng_learning_rate").get<double>();
  for (const auto& c : j.at("clusters")) {
    gdbn::DiscreteCluster dc;
    dc.id = c.at("id").get<int>();
    dc.mean = vec_from<4>(c.at("mean"));
    dc.covariance = matrix_from(c.at("covariance"), 4, 4);
    dc.hit_count = c.at("hit_count").get<long>();
    v.clusters.push_back(dc);
  }
  const long n = v.num_clusters();
  for (const auto& t : j.at("transitions")) v.transitions.push_back(matrix_from(t, n, n));
  const auto& d = j.at("dynamics");
  v.dynamics.C = matrix_from(d.at("C"), 4, 4);
  v.dynamics.D = matrix_from(d.at("D"), 4, 4);
  for (const auto& u : d.at("control")) v.dynamics.control.push_back(vec_from<4>(u));
  v.dynamics.Q = matrix_from(d.at("Q"), 4, 4);
  v.dynamics.H = matrix_from(d.at("H"), 2, 4);
  v.dynamics.R = matrix_from(d.at("R"), 2, 2);
  v.preferred.mean = vec_from<2>(j.at("preferred").at("mean"));
  v.preferred.cov = matrix_from(j.at("preferred").at("cov"), 2, 2);
  if (static_cast<long>(v.dynamics.control.size()) != n) throw ModelError("model: one control vector per cluster");
  if (v.transitions.empty()) throw ModelError("model: no transition matrices");
  return v;
}

}  // namespace detail

inline json model_json(const gdbn::Models& m, const ExperimentConfig& cfg) {
  json vocab = {{"noise", detail::vocab_json(m.noise)},
                {"pu", detail::vocab_json(m.pu)},
                {"combined", detail::vocab_json(m.combined)}};
  return {{"format", "cnuav-model"},
          {"version", kModelVersion},
          {"config_hash", config_hash(cfg)},
          {"num_subchannels", cfg.env.num_subchannels},
          {"num_sus", cfg.env.num_sus},
          {"tau_segments", cfg.agent.tau_segments},
          {"gng_learning_rate", cfg.learning.gng.learning_rate},
          {"payload_sha256", sha256_hex(vocab.dump())},
          {"vocabularies", vocab}};
}

inline void save_model(const gdbn::Models& m, const ExperimentConfig& cfg, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  detail::write_text(path, model_json(m, cfg).dump(1) + "\n");
}

/// Parses and checks a model document; when `expect` is given, the recorded
/// dimensions must match it.
inline gdbn::Models model_from_json(const json& j, const ExperimentConfig* expect = nullptr) {
  try {
    if (j.at("format") != "cnuav-model") throw ModelError("model: not a cnuav model document");
    if (j.at("version").get<int>() != kModelVersion)
      throw ModelError("model: version " + j.at("version").dump() + " is not supported (expected " +
                       std::to_string(kModelVersion) + ")");
    const auto& vocab = j.at("vocabularies");
    if (sha256_hex(vocab.dump()) != j.at("payload_sha256").get<std::string>())
      throw ModelError("model: payload hash mismatch (corrupted document)");
    if (expect) {
      if (j.at("num_subchannels").get<int>() != expect->env.num_subchannels)
        throw ConfigError("num_subchannels", "model was trained for " + j.at("num_subchannels").dump() +
                                                 " subchannels, config has " +
                                                 std::to_string(expect->env.num_subchannels));
      if (j.at("num_sus").get<int>() != expect->env.num_sus)
        throw ConfigError("num_sus", "model was trained for " + j.at("num_sus").dump() + " SUs, config has " +
                                         std::to_string(expect->env.num_sus));
      if (j.at("tau_segments").get<int>() != expect->agent.tau_segments)
        throw ConfigError("tau_segments", "model segment count differs from the config");
    }
    gdbn::Models m;
    m.noise = detail::vocab_from(vocab.at("noise"), gdbn::Entity::Noise);
    m.pu = detail::vocab_from(vocab.at("pu"), gdbn::Entity::Pu);
    m.combined = detail::vocab_from(vocab.at("combined"), gdbn::Entity::Combined);
    return m;
  } catch (const json::exception& e) {
    throw ModelError(std::string("model: malformed document: ") + e.what());
  }
}

inline gdbn::Models load_model(const fs::path& path, const ExperimentConfig* expect = nullptr) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ModelError(std::string("model: parse error: ") + e.what());
  }
  return model_from_json(j, expect);
}

}  // namespace cnuav::harness
