// SPDX-License-Identifier: Apache-2.0
//
// Trusted validation of rollout files. Everything a worker claims is either
// re-derived (prompt set, rewards, advantages, hidden-state commitments,
// token probabilities) or checked against a statistical bound.
//
// Verdict record (one compact JSON object, keys ascending):
//   {"details":<text>,"failed_check":"none"|"schema"|"seed"|"bounds"|
//    "termination"|"sampling"|"commitment","file_id":<text>,
//    "node_address":<hex32>|"","result":"accept"|"reject","step":<u64>,
//    "submission_index":<u64>}

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "swarm/grpo.hpp"
#include "swarm/rollout.hpp"
#include "swarm/tasks.hpp"

namespace swarm::validator {

enum class Check { kNone, kSchema, kSeed, kBounds, kTermination, kSampling, kCommitment };

std::string_view check_name(Check c);
Check check_from_name(std::string_view name);

struct Verdict {
    std::string file_id;
    bool accepted = false;
    Check failed_check = Check::kNone;
    std::string details;
    std::string node_address;  // hex, empty if the header never parsed
    std::uint64_t step = 0;
    std::uint64_t submission_index = 0;
};

std::string encode_verdict(const Verdict& v);
Verdict decode_verdict(const std::string& text);

struct ValidatorConfig {
    policy::ModelConfig model;
    int group_size = 8;
    int groups_per_file = 2;
    double alpha = 0.01;
    double adv_eps = 1e-6;
    policy::AdvantageMode advantage_mode = policy::AdvantageMode::kMeanStd;
    int commit_interval = rollout::kCommitInterval;
    double eos_threshold = 0.1;
    double p_low = 0.02;
    double theta = 0.25;
    int min_sampling_len = 16;
    double q = 1.0;            // fraction of records whose commitments are recomputed
    std::uint64_t q_seed = 0;  // subset choice is a hash of (q_seed, file_id, record index)
    double prob_tolerance = 1e-12;
    double reward_tolerance = 1e-9;
};

/// Returns nullptr for versions the validator does not hold.
using CheckpointLookup = std::function<std::shared_ptr<const policy::PolicyParams>(std::uint64_t)>;

/// Outcome of one check stage.
struct CheckResult {
    Check failed = Check::kNone;
    std::string details;
    bool ok() const { return failed == Check::kNone; }
};

/// Recomputed view of one record under its claimed checkpoint.
struct Recompute {
    std::vector<double> chosen_probs;
    std::vector<double> eos_probs;  // P(eos) at each output position
    std::vector<std::vector<double>> hidden;
};

class Validator {
public:
    Validator(ValidatorConfig cfg, std::vector<tasks::Task> dataset, CheckpointLookup checkpoints);

    const ValidatorConfig& config() const { return cfg_; }

    /// Full pipeline: schema, seed, bounds, termination, sampling, commitment.
    Verdict validate(const std::string& bytes, const std::string& file_id,
                     rollout::RolloutFile* parsed = nullptr) const;

    CheckResult check_schema(const std::string& bytes, rollout::RolloutFile& out) const;
    CheckResult check_seed(const rollout::RolloutFile& file) const;
    CheckResult check_bounds(const rollout::RolloutFile& file) const;
    CheckResult check_termination(const rollout::RolloutRecord& r, const Recompute& rc) const;
    CheckResult check_sampling(const rollout::RolloutRecord& r, const Recompute& rc) const;
    CheckResult check_commitment(const rollout::RolloutRecord& r, const Recompute& rc) const;

    /// Teacher-forced prefill of the record under `params`.
    Recompute recompute(const rollout::RolloutRecord& r, const policy::PolicyParams& params) const;

    const tasks::Task* task(std::uint64_t task_id) const;

    /// Whether record `index` of `file_id` is in the commitment subset.
    bool in_commitment_subset(const std::string& file_id, std::size_t index) const;

private:
    ValidatorConfig cfg_;
    std::vector<tasks::Task> dataset_;
    std::unordered_map<std::uint64_t, std::size_t> by_id_;
    CheckpointLookup checkpoints_;
};

}  // namespace swarm::validator
