// SPDX-License-Identifier: Apache-2.0

#include "swarm/sampling.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace swarm::policy {

namespace {
std::atomic<std::uint64_t> g_draws{0};
}  // namespace

std::uint64_t sampling_draws() { return g_draws.load(std::memory_order_relaxed); }

Token sample_token(std::span<const double> probs, SplitMix64& rng, const SamplingOptions& opts,
                   int eos) {
    g_draws.fetch_add(1, std::memory_order_relaxed);
    std::vector<double> weights(probs.begin(), probs.end());
    if (eos >= 0 && static_cast<std::size_t>(eos) < weights.size() &&
        weights[static_cast<std::size_t>(eos)] <= opts.eos_floor) {
        weights[static_cast<std::size_t>(eos)] = 0.0;
    }
    if (opts.greedy) {
        return static_cast<Token>(std::max_element(weights.begin(), weights.end()) - weights.begin());
    }
    if (!(opts.temperature > 0.0)) {
        throw InvalidInput("temperature must be > 0");
    }
    if (opts.temperature != 1.0) {
        const double inv_t = 1.0 / opts.temperature;
        double mx = 0.0;
        for (double p : weights) {
            mx = std::max(mx, p);
        }
        for (double& w : weights) {
            w = w > 0.0 ? std::exp(inv_t * (std::log(w) - std::log(mx))) : 0.0;
        }
    }
    double total = 0.0;
    for (double w : weights) {
        total += w;
    }
    const double u = rng.uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (u < acc) {
            return static_cast<Token>(i);
        }
    }
    // Rounding can leave u == total; fall back to the last nonzero entry.
    for (std::size_t i = weights.size(); i-- > 0;) {
        if (weights[i] > 0.0) {
            return static_cast<Token>(i);
        }
    }
    return 0;
}

Completion sample_completion(const PolicyParams& params, std::span<const Token> prompt,
                             SplitMix64& rng, const SamplingOptions& opts) {
    const ModelConfig& c = params.config;
    if (prompt.size() >= static_cast<std::size_t>(c.max_len)) {
        throw InvalidInput("prompt leaves no room for output");
    }
    std::vector<Token> seq(prompt.begin(), prompt.end());
    Completion out;
    while (seq.size() < static_cast<std::size_t>(c.max_len)) {
        const auto ctx = context_window(c, seq, seq.size());
        ForwardTrace tr = forward_trace(params, ctx);
        const Token tok = sample_token(tr.probs, rng, opts, opts.eos_floor > 0.0 ? c.eos_id : -1);
        const double p = tr.probs[static_cast<std::size_t>(tok)];
        out.tokens.push_back(tok);
        out.chosen_probs.push_back(p);
        out.hidden.push_back(std::move(tr.hidden));
        seq.push_back(tok);
        if (tok == c.eos_id) {
            out.eos_prob_at_end = p;
            break;
        }
    }
    return out;
}

}  // namespace swarm::policy
