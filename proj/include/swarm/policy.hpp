// SPDX-License-Identifier: Apache-2.0
//
// Toy autoregressive policy: one tanh hidden layer over a fixed window of
// embedded context tokens, evaluated in double precision with a fixed
// summation order so every node computes bit-identical probabilities.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "swarm/common.hpp"

namespace swarm::policy {

using Token = int;

struct ModelConfig {
    int vocab = 0;        // V
    int window = 0;       // W, context tokens seen by forward()
    int embed_dim = 0;    // E
    int hidden_dim = 0;   // H
    int max_len = 0;      // L_max, prompt + output tokens
    Token eos_id = 0;
    Token pad_id = 0;

    void validate() const;
    int input_dim() const { return window * embed_dim; }
    bool operator==(const ModelConfig&) const = default;
};

/// All weights of the policy. Matrices are row-major.
struct PolicyParams {
    ModelConfig config;
    std::vector<double> embed;     // V x E
    std::vector<double> hidden_w;  // (W*E) x H
    std::vector<double> hidden_b;  // H
    std::vector<double> out_w;     // H x V
    std::vector<double> out_b;     // V

    static PolicyParams zeros(const ModelConfig& config);
    static PolicyParams random(const ModelConfig& config, std::uint64_t seed, double scale = 0.1);

    std::size_t size() const;
    bool all_finite() const;
    bool operator==(const PolicyParams&) const = default;

    /// Visits every weight in canonical field order.
    template <class F>
    void for_each(F&& f) {
        for (auto* block : {&embed, &hidden_w, &hidden_b, &out_w, &out_b}) {
            for (double& v : *block) {
                f(v);
            }
        }
    }
    template <class F>
    void for_each(F&& f) const {
        for (const auto* block : {&embed, &hidden_w, &hidden_b, &out_w, &out_b}) {
            for (double v : *block) {
                f(v);
            }
        }
    }

    double norm() const;
    void scale(double factor);
    /// this += factor * other
    void add_scaled(const PolicyParams& other, double factor);
};

/// Canonical bytes: seven little-endian u64 config fields (V, W, E, H, L_max,
/// eos_id, pad_id) followed by every weight as a little-endian IEEE-754 double
/// in field order. This layout is what checkpoint digests are taken over.
Bytes serialize(const PolicyParams& params);
PolicyParams deserialize(ByteView bytes);

struct TokenDist {
    std::vector<double> probs;
};

/// Builds the left-padded W-token context preceding position `upto` of `tokens`.
std::vector<Token> context_window(const ModelConfig& config, std::span<const Token> tokens,
                                  std::size_t upto);

/// Activations of one forward pass, kept for commitments and backprop.
struct ForwardTrace {
    std::vector<Token> context;
    std::vector<double> hidden;  // tanh activations, H
    std::vector<double> probs;     // V
    std::vector<double> logprobs;  // V, log-softmax computed directly
};

ForwardTrace forward_trace(const PolicyParams& params, std::span<const Token> context);
TokenDist forward(const PolicyParams& params, std::span<const Token> context);

struct SequenceScores {
    std::vector<double> logprobs;             // log p of each output token
    std::vector<std::vector<double>> hidden;  // hidden vector at each output position
    std::vector<double> entropies;            // entropy of the full distribution per position
    std::vector<std::vector<double>> probs;   // full distribution per position
};

/// Teacher-forced pass: one trace per output position.
std::vector<ForwardTrace> prefill(const PolicyParams& params, std::span<const Token> prompt,
                                  std::span<const Token> output);

/// Teacher-forced prefill over `output` conditioned on `prompt`.
SequenceScores sequence_logprobs(const PolicyParams& params, std::span<const Token> prompt,
                                 std::span<const Token> output);

double entropy(std::span<const double> probs);

/// Accumulates into `grads` the backward pass of the network for the given
/// traces, where dlogits[t] is dL/dlogits at trace t. Every loss on top of
/// the policy (GRPO, likelihood pretraining) reduces to per-position logit
/// gradients and shares this routine.
void backprop(const PolicyParams& params, std::span<const ForwardTrace> traces,
              std::span<const std::vector<double>> dlogits, PolicyParams& grads);

}  // namespace swarm::policy
