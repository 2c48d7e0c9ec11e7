// SPDX-License-Identifier: Apache-2.0
//
// Synthetic verifiable tasks: "a op b mod 10" rendered in a 21-token
// vocabulary, with a length budget token in the prompt.
//
// Output format: <reasoning tokens> ANSWER <answer digits> EOS

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "swarm/policy.hpp"

namespace swarm::tasks {

using policy::Token;

namespace vocab {
// 0..9 are the digits themselves.
inline constexpr Token kPlus = 10;
inline constexpr Token kMinus = 11;
inline constexpr Token kTimes = 12;
inline constexpr Token kThink = 13;
inline constexpr Token kAnswer = 14;  // reasoning delimiter
inline constexpr Token kBudgetBase = 15;  // 15..18 encode the budgets below
inline constexpr Token kEos = 19;
inline constexpr Token kPad = 20;
inline constexpr int kSize = 21;
}  // namespace vocab

inline constexpr std::array<int, 4> kLengthBudgets = {8, 16, 24, 32};

/// Toy model shape: V=21, W=L_max=48, E=8, H=32.
policy::ModelConfig toy_model_config();

Token budget_token(int l_target);

struct Task {
    std::uint64_t task_id = 0;
    std::vector<Token> prompt_tokens;
    std::vector<Token> target_answer;
    int l_target = 0;

    bool operator==(const Task&) const = default;
};

struct RewardBreakdown {
    double r_task = 0.0;
    double length_penalty = 0.0;
    double r_total = 0.0;
};

std::vector<Task> generate_dataset(std::uint64_t seed, std::size_t n);

/// 1 iff the span between the first ANSWER token and EOS (or the end) equals
/// the target answer. Never throws.
int verify(const Task& task, std::span<const Token> output);

RewardBreakdown total_reward(const Task& task, std::span<const Token> output, double alpha);

struct OfflineFilterOptions {
    int k = 8;
    double low = 0.125;
    double high = 0.5;
    std::uint64_t rng_seed = 0;
    double eos_floor = 0.1;  // same generation law as the rollout workers
};

/// Per-task success counts out of k samples; sampling stream is derived from
/// (rng_seed, task_id) so results do not depend on dataset order.
std::vector<int> pass_at_k_counts(const std::vector<Task>& dataset,
                                  const policy::PolicyParams& params, int k,
                                  std::uint64_t rng_seed, double eos_floor = 0.1);

std::uint64_t filter_task_seed(std::uint64_t rng_seed, std::uint64_t task_id);

/// Keeps tasks whose success count c satisfies low*k <= c <= high*k.
std::vector<Task> offline_filter(const std::vector<Task>& dataset,
                                 const policy::PolicyParams& params,
                                 const OfflineFilterOptions& opts);

/// Dataset file: one JSON object per line with keys
/// l_target, prompt_tokens, target_answer, task_id (sorted, compact).
std::string encode_task(const Task& task);
Task decode_task(const std::string& line);
void write_dataset(const std::filesystem::path& path, const std::vector<Task>& dataset);
std::vector<Task> read_dataset(const std::filesystem::path& path);

/// Likelihood pretraining on well-formed completions whose answer digit is
/// drawn uniformly at random: yields a base policy that knows the output
/// format and spreads its reasoning length, but solves tasks only at chance.
struct PretrainOptions {
    std::uint64_t seed = 7;
    int steps = 600;
    int batch = 32;
    double lr = 1.0;
    int max_think = 32;
};
policy::PolicyParams pretrain_base_policy(const policy::ModelConfig& config,
                                          const PretrainOptions& opts);

}  // namespace swarm::tasks
