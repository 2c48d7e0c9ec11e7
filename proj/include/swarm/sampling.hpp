// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "swarm/policy.hpp"
#include "swarm/rng.hpp"

namespace swarm::policy {

struct SamplingOptions {
    double temperature = 1.0;
    bool greedy = false;
    /// EOS is only drawable where its probability exceeds this floor, so every
    /// EOS-terminated completion passes the validator's termination check.
    double eos_floor = 0.0;
};

struct Completion {
    std::vector<Token> tokens;
    /// Policy probability (temperature 1) of each emitted token.
    std::vector<double> chosen_probs;
    std::optional<double> eos_prob_at_end;
    std::vector<std::vector<double>> hidden;
};

/// Draws one token index from `probs` (optionally tempered) by inverse CDF.
/// `eos` names the token subject to opts.eos_floor (negative: none).
Token sample_token(std::span<const double> probs, SplitMix64& rng, const SamplingOptions& opts,
                   int eos = -1);

/// Autoregressive generation until eos_id or until prompt + output reaches L_max.
Completion sample_completion(const PolicyParams& params, std::span<const Token> prompt,
                             SplitMix64& rng, const SamplingOptions& opts = {});

/// Process-wide count of sample_token() calls; validation must never move it.
std::uint64_t sampling_draws();

}  // namespace swarm::policy
