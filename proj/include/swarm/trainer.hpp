// SPDX-License-Identifier: Apache-2.0
//
// Trusted training loop: canonical-order batch assembly with the online
// filter, GRPO micro-steps, metrics, and the step-counter service.
//
// Canonical consumption order. For step s the trainer walks files
//   (submission 0, worker 0), (0, 1), ..., (0, n-1), (1, 0), ...
// with workers sorted by address. Rejected files are skipped; once a worker
// has a rejected file it is skipped for the rest of the step. Within a file,
// groups are taken in order. Groups whose rewards are all equal, or whose
// checkpoint_version is older than (s - k_max), are discarded. The step's
// batch is the first P surviving groups.
//
// Metrics CSV, one row per micro-step, columns in this order:
//   step,micro_step,optimizer_step,lr,loss,grad_norm,clip_fraction,entropy,kl,
//   task_reward,length_penalty,groups_scanned,groups_degenerate,groups_stale,files_skipped
// grad_norm is the pre-clip norm. task_reward and length_penalty are means
// over every record of every scanned group of the step (repeated on each row
// of that step). Reals use %.17g, so identical runs give identical bytes.
//
// Consumed-batch log, one JSON line per consumed group:
//   {"advantages":[..],"file_id":..,"group":i,"rewards":[..],"step":s,"task_id":t,
//    "versions":[..]}
//
// Trainer HTTP surface:
//   GET /step     -> {"step":s,"version":v}  (v = max(0, s - k), the checkpoint
//                    rollouts for s must be generated with)
//   GET /metrics  -> text/event-stream, one JSON object per CSV row, keyed by
//                    the CSV column names; ?format=json returns them as an array
//   GET /status   -> {"consumed_steps":n,"halted":bool,"published":v|null}

#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "swarm/event_stream.hpp"
#include "swarm/grpo.hpp"
#include "swarm/rollout.hpp"
#include "swarm/tasks.hpp"

namespace httplib {
class Server;
}

namespace swarm::trainer {

struct Group {
    std::string file_id;
    std::size_t index_in_file = 0;
    std::uint64_t task_id = 0;
    std::vector<rollout::RolloutRecord> records;
};

struct Batch {
    std::uint64_t step = 0;
    std::vector<Group> groups;
    std::size_t groups_scanned = 0;
    std::size_t groups_degenerate = 0;
    std::size_t groups_stale = 0;
    std::size_t files_skipped = 0;
    std::size_t records_scanned = 0;
    double sum_task_reward = 0.0;
    double sum_length_penalty = 0.0;

    double mean_task_reward() const;
    double mean_length_penalty() const;
};

/// True when every reward in the group is identical (zero advantage vector).
bool degenerate(const std::vector<rollout::RolloutRecord>& group);

/// Feeds files for one step in canonical order until P groups survive.
class BatchCollector {
public:
    BatchCollector(std::size_t group_size, std::size_t prompts_per_step, std::uint64_t k_max);

    void begin(std::uint64_t step);
    /// An accepted file. Returns true once the batch is complete; later groups
    /// of the same file are not scanned.
    bool add_file(const std::string& file_id, const rollout::RolloutFile& file);
    void skip_file();
    bool complete() const { return batch_.groups.size() >= prompts_; }
    std::uint64_t step() const { return batch_.step; }
    Batch take();

private:
    std::size_t group_size_;
    std::size_t prompts_;
    std::uint64_t k_max_;
    Batch batch_;
};

struct MetricsRow {
    std::uint64_t step = 0;
    int micro_step = 0;
    int optimizer_step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double clip_fraction = 0.0;
    double entropy = 0.0;
    double kl = 0.0;
    double task_reward = 0.0;
    double length_penalty = 0.0;
    std::size_t groups_scanned = 0;
    std::size_t groups_degenerate = 0;
    std::size_t groups_stale = 0;
    std::size_t files_skipped = 0;
};

std::string csv_header();
std::string csv_row(const MetricsRow& r);
std::string metrics_json(const MetricsRow& r);
std::vector<MetricsRow> parse_csv(const std::string& text);

/// Non-finite loss or gradient. The learner has already rolled back.
class TrainingHalted : public NumericError {
public:
    using NumericError::NumericError;
};

class Learner {
public:
    Learner(policy::PolicyParams initial, policy::TrainConfig cfg,
            std::vector<tasks::Task> dataset);

    /// One rollout step: old log-probs for the whole batch under the current
    /// params, then micro_steps equal slices with clipped SGD updates. On a
    /// numeric failure params revert to the start of the step and
    /// TrainingHalted is thrown.
    std::vector<MetricsRow> train_step(const Batch& batch);

    const policy::PolicyParams& params() const { return params_; }
    const policy::PolicyParams& reference() const { return reference_; }
    /// Number of completed rollout steps, which is also the current version.
    std::uint64_t version() const { return version_; }
    const policy::TrainConfig& config() const { return cfg_; }

private:
    std::vector<policy::Sample> build_samples(const Batch& batch) const;

    policy::PolicyParams params_;
    policy::PolicyParams reference_;
    policy::TrainConfig cfg_;
    std::vector<tasks::Task> dataset_;
    std::uint64_t version_ = 0;
    int optimizer_step_ = 0;
};

/// Appends consumed groups to the consumed-batch log.
std::string consumed_log_lines(const Batch& batch);

/// Audits a consumed-batch log: number of consumed groups whose rewards are
/// all equal (must be zero).
std::size_t audit_consumed_log(const std::string& text);

/// Step counter shared by the scanner and the HTTP endpoint. Monotone.
class StepCounter {
public:
    explicit StepCounter(std::uint64_t k) : k_(k) {}
    std::uint64_t step() const { return step_.load(); }
    std::uint64_t version_for(std::uint64_t s) const { return s > k_ ? s - k_ : 0; }
    void advance_to(std::uint64_t s);

private:
    std::uint64_t k_;
    std::atomic<std::uint64_t> step_{0};
};

/// HTTP front of a live trainer: /step, /metrics, /status.
class TrainerServer {
public:
    TrainerServer(StepCounter& counter, EventStream& metrics, std::string host = "127.0.0.1",
                  int port = 0);
    ~TrainerServer();
    TrainerServer(const TrainerServer&) = delete;
    TrainerServer& operator=(const TrainerServer&) = delete;

    int port() const { return port_; }
    void set_status(std::uint64_t consumed, bool halted, std::optional<std::uint64_t> published);
    void stop();

private:
    StepCounter& counter_;
    EventStream& metrics_;
    std::unique_ptr<httplib::Server> http_;
    std::thread thread_;
    std::atomic<bool> stopping_{false};
    std::mutex status_mu_;
    std::string status_ = R"({"consumed_steps":0,"halted":false,"published":null})";
    int port_ = 0;
};

/// Client helper used by workers: GET /step. nullopt when unreachable.
struct StepInfo {
    std::uint64_t step = 0;
    std::uint64_t version = 0;
};
std::optional<StepInfo> poll_step(const std::string& host, int port);

}  // namespace swarm::trainer
