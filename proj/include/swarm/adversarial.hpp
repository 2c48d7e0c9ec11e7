// SPDX-License-Identifier: Apache-2.0
//
// Dishonest worker behaviours. Each attack breaks exactly one property the
// validator audits and keeps every earlier check satisfied, so the verdict
// should name that property.

#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "swarm/rollout.hpp"
#include "swarm/validator.hpp"

namespace swarm::adversarial {

enum class Attack {
    kWrongModel,         // sampled from a quantised copy of the claimed checkpoint
    kStaleCheckpoint,    // sampled from an older checkpoint, newer version claimed
    kEarlyEos,           // one completion cut short with an improbable EOS
    kCherryPick,         // a group built on a prompt the seed did not select
    kPermuted,           // seed-selected prompts in the wrong order
    kForgedReward,       // one r_task flipped, totals and advantages kept consistent
    kTruncated,          // file bytes cut mid-record
    kShortGroup,         // one record dropped from a group
    kTokenSubstitution,  // reasoning replaced by random tokens, correct answer kept
};

std::string_view attack_name(Attack a);
Attack attack_from_name(std::string_view name);
const std::vector<Attack>& all_attacks();
validator::Check expected_check(Attack a);

struct AttackInput {
    const policy::PolicyParams* params = nullptr;  // the claimed checkpoint
    std::uint64_t version = 0;
    const policy::PolicyParams* stale_params = nullptr;  // used by kStaleCheckpoint
    const std::vector<tasks::Task>* dataset = nullptr;
    const crypto::KeyPair* key = nullptr;
    std::uint64_t step = 0;
    std::uint64_t submission_index = 0;
    rollout::WorkerOptions opts;
    std::uint64_t seed = 0;  // attack-specific randomness
};

/// Encoded (and, except for truncation, correctly signed) rollout file.
std::string make_file(Attack a, const AttackInput& in);

/// Rebuilds chosen_probs, eos_prob_at_end and commitments of `r` honestly
/// under `params` for its current output_tokens.
void rederive(rollout::RolloutRecord& r, const policy::PolicyParams& params,
              const tasks::Task& task, int commit_interval);

/// Recomputes r_task, r_total and the group advantages of one group in place.
void rescore_group(std::span<rollout::RolloutRecord> group, const tasks::Task& task,
                   const rollout::WorkerOptions& opts);

/// Copy of `params` with every weight rounded to a multiple of `quantum`.
policy::PolicyParams quantize(const policy::PolicyParams& params, double quantum);

}  // namespace swarm::adversarial
