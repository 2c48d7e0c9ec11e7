// SPDX-License-Identifier: Apache-2.0
//
// GRPO with two-sided ratio clipping, token-level aggregation, a
// nonnegative KL penalty against a reference policy, and an entropy bonus.

#pragma once

#include <limits>
#include <span>
#include <vector>

#include "swarm/policy.hpp"

namespace swarm::policy {

enum class AdvantageMode { kMeanStd, kMeanOnly };
enum class KlReference { kInitial, kLatestBroadcast };
enum class OldLogprobMode { kOncePerStep, kPerMicroStep };

struct TrainConfig {
    double epsilon = 0.2;
    double delta = 4.0;  // +inf disables the upper bound for negative advantages
    double alpha = 0.0003;
    double kl_coef = 0.001;
    double entropy_coef = 1e-4;
    double lr = 5e-2;
    int warmup_steps = 25;
    double grad_clip = 0.1;
    int group_size = 16;
    int prompts_per_step = 256;
    int micro_steps = 8;
    int async_level = 2;
    double adv_eps = 1e-6;
    AdvantageMode advantage_mode = AdvantageMode::kMeanStd;
    KlReference kl_reference = KlReference::kInitial;
    OldLogprobMode old_logprob_mode = OldLogprobMode::kOncePerStep;

    void validate() const;

    /// Large-model settings: lr 3e-7, group 16 x 256 prompts.
    static TrainConfig large_scale();
    /// Desk-scale preset used by the simulator and acceptance suite.
    static TrainConfig toy();
};

/// Group-relative advantages. All-equal rewards short-circuit to exact zeros.
std::vector<double> compute_advantages(std::span<const double> rewards, double adv_eps,
                                       AdvantageMode mode = AdvantageMode::kMeanStd);

/// exp(ref - new) - (ref - new) - 1, always >= 0.
double kl_estimate(double new_logp, double ref_logp);
std::vector<double> kl_estimate(std::span<const double> new_logp,
                                std::span<const double> ref_logp);

/// Per-token objective term min(min(rho, delta) * A, clip(rho, 1-eps, 1+eps) * A).
double clipped_term(double ratio, double advantage, double epsilon, double delta);

struct ObjectiveStats {
    double clip_fraction = 0.0;
    double mean_entropy = 0.0;
    double mean_kl = 0.0;
    double mean_ratio = 0.0;
};

struct ObjectiveResult {
    double loss = 0.0;
    ObjectiveStats stats;
};

/// Token-aligned inputs over a whole rollout batch. `entropy` may be empty.
struct TokenTerms {
    std::span<const double> new_logp;
    std::span<const double> old_logp;
    std::span<const double> ref_logp;
    std::span<const double> advantage;
    std::span<const double> entropy;
};

/// Loss = -(sum of clipped terms)/N + kl_coef * mean KL - entropy_coef * mean entropy,
/// with N the total token count. Throws NumericError on non-finite inputs.
ObjectiveResult grpo_objective(const TokenTerms& terms, const TrainConfig& cfg);

/// One completion in a training batch.
struct Sample {
    std::vector<Token> prompt;
    std::vector<Token> output;
    double advantage = 0.0;
    std::vector<double> old_logp;
    std::vector<double> ref_logp;
};

struct GradientResult {
    PolicyParams grads;
    double loss = 0.0;
    double pre_clip_norm = 0.0;
    ObjectiveStats stats;
    std::size_t tokens = 0;
};

/// Analytic gradient of grpo_objective over `batch`, rescaled so its global
/// norm is at most `cfg.grad_clip`. Pass clip <= 0 via `clip = false` for raw grads.
GradientResult gradient(const PolicyParams& params, std::span<const Sample> batch,
                        const TrainConfig& cfg, bool clip = true);

/// Loss value only (no gradient), used by finite-difference checks.
double batch_loss(const PolicyParams& params, std::span<const Sample> batch,
                  const TrainConfig& cfg);

/// Rescales `grads` in place to norm <= max_norm; returns the pre-clip norm.
double clip_global_norm(PolicyParams& grads, double max_norm);

/// Linear warmup: lr * min(1, (step + 1) / warmup_steps).
double scheduled_lr(const TrainConfig& cfg, int optimizer_step);

/// Plain SGD update params -= lr * grads.
void sgd_step(PolicyParams& params, const PolicyParams& grads, double lr);

}  // namespace swarm::policy
