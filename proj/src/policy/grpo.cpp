// SPDX-License-Identifier: Apache-2.0

#include "swarm/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace swarm::policy {

void TrainConfig::validate() const {
    if (!(epsilon > 0.0 && epsilon < 1.0)) {
        throw InvalidInput("epsilon must lie in (0, 1)");
    }
    if (!(delta > 1.0 + epsilon)) {
        throw InvalidInput("delta must exceed 1 + epsilon");
    }
    if (!(alpha >= 0.0)) {
        throw InvalidInput("alpha must be >= 0");
    }
    if (!(grad_clip > 0.0)) {
        throw InvalidInput("grad_clip must be > 0");
    }
    if (async_level < 0) {
        throw InvalidInput("async_level must be >= 0");
    }
    if (group_size < 2) {
        throw InvalidInput("group_size must be >= 2");
    }
    if (prompts_per_step < 1 || micro_steps < 1) {
        throw InvalidInput("prompts_per_step and micro_steps must be >= 1");
    }
    if (!(lr > 0.0) || warmup_steps < 0 || !(adv_eps >= 0.0)) {
        throw InvalidInput("lr > 0, warmup_steps >= 0 and adv_eps >= 0 are required");
    }
}

TrainConfig TrainConfig::large_scale() {
    TrainConfig c;
    c.lr = 3e-7;
    c.warmup_steps = 25;
    c.group_size = 16;
    c.prompts_per_step = 256;
    c.micro_steps = 8;
    c.async_level = 2;
    return c;
}

TrainConfig TrainConfig::toy() {
    TrainConfig c;
    c.alpha = 0.01;
    c.kl_coef = 0.02;
    c.entropy_coef = 1e-4;
    c.lr = 0.5;
    c.warmup_steps = 5;
    c.grad_clip = 0.2;
    c.group_size = 8;
    c.prompts_per_step = 16;
    c.micro_steps = 4;
    c.async_level = 2;
    return c;
}

std::vector<double> compute_advantages(std::span<const double> rewards, double adv_eps,
                                       AdvantageMode mode) {
    const std::size_t n = rewards.size();
    std::vector<double> adv(n, 0.0);
    if (n == 0) {
        return adv;
    }
    const bool all_equal =
        std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; });
    if (all_equal) {
        return adv;
    }
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double r : rewards) {
        var += (r - mean) * (r - mean);
    }
    const double std_dev = std::sqrt(var / static_cast<double>(n));
    const double denom = mode == AdvantageMode::kMeanStd ? std_dev + adv_eps : 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        adv[i] = (rewards[i] - mean) / denom;
    }
    return adv;
}

double kl_estimate(double new_logp, double ref_logp) {
    const double x = ref_logp - new_logp;
    // expm1 keeps precision when x is tiny; result is clamped at the exact floor.
    return std::max(0.0, std::expm1(x) - x);
}

std::vector<double> kl_estimate(std::span<const double> new_logp,
                                std::span<const double> ref_logp) {
    if (new_logp.size() != ref_logp.size()) {
        throw InvalidInput("kl_estimate: length mismatch");
    }
    std::vector<double> out(new_logp.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = kl_estimate(new_logp[i], ref_logp[i]);
    }
    return out;
}

double clipped_term(double ratio, double advantage, double epsilon, double delta) {
    const double bounded = std::min(ratio, delta) * advantage;
    const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage;
    return std::min(bounded, clipped);
}

namespace {

// d(term)/d(new_logp); the ratio's derivative w.r.t. new_logp is the ratio itself.
double clipped_term_grad(double ratio, double advantage, double epsilon, double delta) {
    const double bounded = std::min(ratio, delta) * advantage;
    const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage;
    if (bounded <= clipped) {
        return ratio < delta ? advantage * ratio : 0.0;
    }
    return (ratio > 1.0 - epsilon && ratio < 1.0 + epsilon) ? advantage * ratio : 0.0;
}

void require_finite(std::span<const double> xs, const char* what) {
    for (double x : xs) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string("non-finite value in ") + what);
        }
    }
}

}  // namespace

ObjectiveResult grpo_objective(const TokenTerms& terms, const TrainConfig& cfg) {
    const std::size_t n = terms.new_logp.size();
    if (terms.old_logp.size() != n || terms.ref_logp.size() != n || terms.advantage.size() != n ||
        (!terms.entropy.empty() && terms.entropy.size() != n)) {
        throw InvalidInput("grpo_objective: token arrays are not aligned");
    }
    require_finite(terms.new_logp, "new_logp");
    require_finite(terms.old_logp, "old_logp");
    require_finite(terms.ref_logp, "ref_logp");
    require_finite(terms.advantage, "advantage");
    require_finite(terms.entropy, "entropy");

    ObjectiveResult res;
    if (n == 0) {
        return res;
    }
    double term_sum = 0.0;
    double kl_sum = 0.0;
    double ent_sum = 0.0;
    double ratio_sum = 0.0;
    std::size_t changed = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double ratio = std::exp(terms.new_logp[i] - terms.old_logp[i]);
        const double adv = terms.advantage[i];
        const double term = clipped_term(ratio, adv, cfg.epsilon, cfg.delta);
        if (term != ratio * adv) {
            ++changed;
        }
        term_sum += term;
        ratio_sum += ratio;
        kl_sum += kl_estimate(terms.new_logp[i], terms.ref_logp[i]);
        if (!terms.entropy.empty()) {
            ent_sum += terms.entropy[i];
        }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    res.stats.clip_fraction = static_cast<double>(changed) * inv_n;
    res.stats.mean_kl = kl_sum * inv_n;
    res.stats.mean_entropy = ent_sum * inv_n;
    res.stats.mean_ratio = ratio_sum * inv_n;
    res.loss = -term_sum * inv_n + cfg.kl_coef * res.stats.mean_kl -
               cfg.entropy_coef * res.stats.mean_entropy;
    if (!std::isfinite(res.loss)) {
        throw NumericError("grpo_objective: non-finite loss");
    }
    return res;
}

namespace {

struct FlatTerms {
    std::vector<double> new_logp;
    std::vector<double> old_logp;
    std::vector<double> ref_logp;
    std::vector<double> advantage;
    std::vector<double> entropy;

    TokenTerms view() const { return {new_logp, old_logp, ref_logp, advantage, entropy}; }
};

void append_sample_terms(FlatTerms& flat, const Sample& s, std::span<const ForwardTrace> traces) {
    if (s.old_logp.size() != s.output.size() ||
        (!s.ref_logp.empty() && s.ref_logp.size() != s.output.size())) {
        throw InvalidInput("sample log-prob arrays must match output length");
    }
    for (std::size_t t = 0; t < traces.size(); ++t) {
        const double lp = traces[t].logprobs[static_cast<std::size_t>(s.output[t])];
        flat.new_logp.push_back(lp);
        flat.old_logp.push_back(s.old_logp[t]);
        flat.ref_logp.push_back(s.ref_logp.empty() ? lp : s.ref_logp[t]);
        flat.advantage.push_back(s.advantage);
        flat.entropy.push_back(entropy(traces[t].probs));
    }
}

}  // namespace

double batch_loss(const PolicyParams& params, std::span<const Sample> batch,
                  const TrainConfig& cfg) {
    FlatTerms flat;
    for (const Sample& s : batch) {
        const auto traces = prefill(params, s.prompt, s.output);
        append_sample_terms(flat, s, traces);
    }
    return grpo_objective(flat.view(), cfg).loss;
}

GradientResult gradient(const PolicyParams& params, std::span<const Sample> batch,
                        const TrainConfig& cfg, bool clip) {
    if (batch.empty()) {
        throw InvalidInput("gradient: empty batch");
    }
    std::vector<std::vector<ForwardTrace>> traces;
    traces.reserve(batch.size());
    FlatTerms flat;
    for (const Sample& s : batch) {
        traces.push_back(prefill(params, s.prompt, s.output));
        append_sample_terms(flat, s, traces.back());
    }
    const ObjectiveResult obj = grpo_objective(flat.view(), cfg);

    GradientResult res{PolicyParams::zeros(params.config), obj.loss, 0.0, obj.stats, 0};
    const std::size_t n = flat.new_logp.size();
    res.tokens = n;
    if (n == 0) {
        return res;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    const auto v = static_cast<std::size_t>(params.config.vocab);

    std::size_t flat_index = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const Sample& s = batch[b];
        const auto& seq_traces = traces[b];
        std::vector<std::vector<double>> dlogits(seq_traces.size(), std::vector<double>(v, 0.0));
        for (std::size_t t = 0; t < seq_traces.size(); ++t, ++flat_index) {
            const ForwardTrace& tr = seq_traces[t];
            const double new_lp = flat.new_logp[flat_index];
            const double ratio = std::exp(new_lp - flat.old_logp[flat_index]);
            const double dterm = clipped_term_grad(ratio, s.advantage, cfg.epsilon, cfg.delta);
            double dnew = -dterm * inv_n;
            if (cfg.kl_coef != 0.0) {
                dnew += cfg.kl_coef * inv_n * (1.0 - std::exp(flat.ref_logp[flat_index] - new_lp));
            }
            const auto chosen = static_cast<std::size_t>(s.output[t]);
            std::vector<double>& g = dlogits[t];
            if (dnew != 0.0) {
                for (std::size_t k = 0; k < v; ++k) {
                    g[k] -= dnew * tr.probs[k];
                }
                g[chosen] += dnew;
            }
            if (cfg.entropy_coef != 0.0) {
                const double h = flat.entropy[flat_index];
                const double c = cfg.entropy_coef * inv_n;
                for (std::size_t k = 0; k < v; ++k) {
                    g[k] += c * tr.probs[k] * (tr.logprobs[k] + h);
                }
            }
        }
        backprop(params, seq_traces, dlogits, res.grads);
    }
    if (!res.grads.all_finite()) {
        throw NumericError("gradient: non-finite gradient");
    }
    if (clip) {
        res.pre_clip_norm = clip_global_norm(res.grads, cfg.grad_clip);
    } else {
        res.pre_clip_norm = res.grads.norm();
    }
    return res;
}

double clip_global_norm(PolicyParams& grads, double max_norm) {
    const double norm = grads.norm();
    if (norm > max_norm && norm > 0.0) {
        grads.scale(max_norm / norm);
    }
    return norm;
}

double scheduled_lr(const TrainConfig& cfg, int optimizer_step) {
    if (cfg.warmup_steps <= 0) {
        return cfg.lr;
    }
    const double frac = static_cast<double>(optimizer_step + 1) / static_cast<double>(cfg.warmup_steps);
    return cfg.lr * std::min(1.0, frac);
}

void sgd_step(PolicyParams& params, const PolicyParams& grads, double lr) {
    params.add_scaled(grads, -lr);
    if (!params.all_finite()) {
        throw NumericError("sgd_step produced non-finite parameters");
    }
}

}  // namespace swarm::policy
