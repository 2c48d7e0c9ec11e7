// SPDX-License-Identifier: Apache-2.0
//
// Experiment runner.
//
// Config file: INI text, `key = value` lines under `[section]` headers, '#' or
// ';' comments. Every key is optional; defaults are the toy preset.
//
//   [run]          seed, steps, async_level, out_dir, mode (local|live),
//                  timeout_seconds, validate (true|false)
//   [data]         n_tasks, filter_k, filter_low, filter_high
//   [pretrain]     steps, lr, batch
//   [train]        lr, kl_coef, entropy_coef, alpha, epsilon, delta, grad_clip,
//                  warmup_steps, group_size, prompts_per_step, micro_steps, k_max
//   [workers]      count, groups_per_file, adversarial ("i:attack,..."),
//                  attack_from_step, crash ("i:step,...")
//   [validators]   count, q
//   [relays]       count, shard_size, bandwidth (bytes/s), corrupt_prob,
//                  throttled (count of relays that throttle everyone)
//   [orchestrator] heartbeat_interval, max_missed
//
// Run directory contents: config.ini, dataset.jsonl, base.ckpt, metrics.csv,
// consumed.jsonl, ledger.jsonl, summary.json, reward.svg (plus logs/ in live mode).

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "swarm/adversarial.hpp"
#include "swarm/grpo.hpp"
#include "swarm/ledger.hpp"
#include "swarm/tasks.hpp"
#include "swarm/trainer.hpp"

namespace swarm::harness {

struct RunConfig {
    std::uint64_t seed = 1;
    int steps = 200;
    int async_level = 2;
    std::filesystem::path out_dir = "runs/default";
    std::string mode = "local";
    double timeout_seconds = 1800.0;
    bool validate = true;

    int n_tasks = 32;
    tasks::OfflineFilterOptions filter;
    tasks::PretrainOptions pretrain;
    policy::TrainConfig train = policy::TrainConfig::toy();
    std::uint64_t k_max = 5;

    int workers = 4;
    int groups_per_file = 2;
    std::map<int, adversarial::Attack> adversarial;
    std::map<int, std::uint64_t> crash;  // worker index -> step at which it dies
    std::uint64_t attack_from_step = 0;   // adversaries behave honestly before this step

    int validators = 1;
    double q = 1.0;

    int relays = 3;
    std::uint64_t shard_size = 16 * 1024;
    double relay_bandwidth = 1e8;
    double corrupt_prob = 0.0;
    int throttled_relays = 0;

    double heartbeat_interval = 0.5;
    std::uint32_t max_missed = 3;
};

RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& text);
std::string to_ini(const RunConfig& cfg);

/// Deterministic identities derived from the master seed.
crypto::KeyPair worker_key(const RunConfig& cfg, int index);
crypto::KeyPair validator_key(const RunConfig& cfg, int index);
crypto::KeyPair trainer_key(const RunConfig& cfg);
crypto::KeyPair owner_key(const RunConfig& cfg);

/// Worker indices ordered by address, which is the canonical consumption order.
std::vector<int> canonical_worker_order(const RunConfig& cfg);

struct Prepared {
    std::vector<tasks::Task> raw;
    std::vector<tasks::Task> dataset;  // after the offline filter
    policy::PolicyParams base;
};

/// Dataset generation, base-policy pretraining and offline filtering.
Prepared prepare(const RunConfig& cfg);
void save_prepared(const Prepared& p, const std::filesystem::path& dir);
Prepared load_prepared(const std::filesystem::path& dir);

struct SlashRecord {
    int worker = -1;
    std::uint64_t step = 0;
    validator::Check failed_check = validator::Check::kNone;
};

struct RunResult {
    std::vector<trainer::MetricsRow> rows;
    std::string metrics_csv;
    std::string consumed_log;
    std::vector<orchestrator::LedgerEvent> ledger;
    std::vector<SlashRecord> slashes;
    std::vector<int> dead_workers;
    std::map<int, std::uint64_t> death_sweep;  // worker -> sweep index it was declared dead
    std::map<int, std::uint64_t> silent_since;  // worker -> first sweep without its heartbeat
    std::size_t files_validated = 0;
    std::size_t files_rejected = 0;
    std::size_t downloads = 0;
    std::size_t corrupt_shards_seen = 0;
    std::size_t checkpoint_mismatches = 0;  // downloaded params != published params
    std::vector<std::vector<std::string>> allowlists;  // allowlist after each step
    std::vector<double> relay_probabilities;  // first live worker's selection law at the end
    std::size_t max_versions_held = 0;        // over all relays
    std::vector<std::string> adversary_file_ids;  // files produced by attacking workers
    bool halted = false;
    bool liveness_failure = false;
    std::string halt_reason;
    double seconds = 0.0;

    /// Mean of task_reward over the first / last n steps (one value per step).
    double first_mean(std::size_t n) const;
    double final_mean(std::size_t n) const;
    double first_penalty(std::size_t n) const;
    double final_penalty(std::size_t n) const;
};

/// Per-step task_reward (one value per step, taken from micro-step 0).
std::vector<double> step_rewards(const std::vector<trainer::MetricsRow>& rows);
std::vector<double> step_penalties(const std::vector<trainer::MetricsRow>& rows);

/// In-process, single-threaded driver. Uses the same collector, learner,
/// validator, orchestrator state machine and shardcast code as the live mode;
/// heartbeats and sweeps advance on a simulated clock (one tick per file round).
RunResult run_local(const RunConfig& cfg, const Prepared& prepared,
                    const std::function<void(const trainer::MetricsRow&)>& on_row = {});

/// Writes metrics.csv, consumed.jsonl, ledger.jsonl, summary.json and reward.svg.
void write_run_dir(const RunConfig& cfg, const RunResult& r);

/// Static line chart of one or more series against step index.
std::string svg_plot(const std::string& title, const std::vector<std::string>& names,
                     const std::vector<std::vector<double>>& series);

struct AblationResult {
    std::vector<int> levels;
    std::vector<RunResult> runs;
    std::string csv;  // step,reward_k0,reward_k1,...
};

AblationResult run_ablation(const RunConfig& base, const std::vector<int>& levels,
                            const Prepared& prepared);

// ---- fault scenarios -------------------------------------------------------

struct Assertion {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct ScenarioReport {
    std::string kind;
    std::vector<Assertion> assertions;
    bool passed() const;
};

const std::vector<std::string>& fault_kinds();
ScenarioReport run_fault(const std::string& kind, const RunConfig& base, const Prepared& prepared);

// ---- live mode ------------------------------------------------------------------

struct LiveResult {
    bool ok = false;
    bool liveness_failure = false;
    std::string message;
    std::filesystem::path run_dir;
};

/// Launches orchestrator, relays, trainer, validators and workers as child
/// processes of `self_exe` over loopback and supervises them until the trainer
/// finishes, a child fails, or the timeout expires. Always tears every child down.
LiveResult run_live(const RunConfig& cfg, const std::filesystem::path& self_exe);

/// Child-process entry points (invoked through the CLI).
int role_orchestrator(const RunConfig& cfg, const std::filesystem::path& run_dir);
int role_relay(const RunConfig& cfg, const std::filesystem::path& run_dir, int index);
int role_trainer(const RunConfig& cfg, const std::filesystem::path& run_dir);
int role_worker(const RunConfig& cfg, const std::filesystem::path& run_dir, int index);
int role_validator(const RunConfig& cfg, const std::filesystem::path& run_dir, int index);

}  // namespace swarm::harness
