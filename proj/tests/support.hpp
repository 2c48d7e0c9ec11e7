// SPDX-License-Identifier: Apache-2.0
//
// Oracles and generators shared by the unit tests and the acceptance binary.
// Everything here is written against the public headers only, and the
// reference formulas are re-derived independently of src/.

#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "swarm/adversarial.hpp"
#include "swarm/grpo.hpp"
#include "swarm/harness.hpp"
#include "swarm/orchestrator.hpp"
#include "swarm/rng.hpp"
#include "swarm/rollout.hpp"
#include "swarm/tasks.hpp"
#include "swarm/validator.hpp"

namespace swarm::testing {

/// Reference per-token term, written from the objective definition.
inline double ref_term(double rho, double adv, double eps, double delta) {
    const double upper = (rho < delta ? rho : delta) * adv;
    double c = rho;
    if (c < 1.0 - eps) c = 1.0 - eps;
    if (c > 1.0 + eps) c = 1.0 + eps;
    const double clipped = c * adv;
    return upper < clipped ? upper : clipped;
}

/// A small random policy so finite differences stay cheap.
inline policy::ModelConfig small_config() {
    policy::ModelConfig c;
    c.vocab = 7;
    c.window = 4;
    c.embed_dim = 3;
    c.hidden_dim = 5;
    c.max_len = 16;
    c.eos_id = 5;
    c.pad_id = 6;
    return c;
}

struct GradInstance {
    policy::PolicyParams params;
    std::vector<policy::Sample> batch;
    policy::TrainConfig cfg;
};

/// Random batch whose old log-probs are the current ones shifted by a random
/// log-ratio; `spread` controls how far ratios wander from 1. Tokens whose
/// ratio lands within `margin` (in log space) of a kink are nudged away so
/// central differences never straddle a non-differentiable point.
inline GradInstance make_grad_instance(std::uint64_t seed, double spread = 0.4) {
    SplitMix64 rng(seed);
    GradInstance g;
    const auto cfg = small_config();
    g.params = policy::PolicyParams::random(cfg, mix_seed(seed, 1), 0.5);
    const auto ref = policy::PolicyParams::random(cfg, mix_seed(seed, 2), 0.5);
    g.cfg = policy::TrainConfig::toy();
    g.cfg.kl_coef = 0.05 * rng.uniform();
    g.cfg.entropy_coef = 0.01 * rng.uniform();
    const int n = 2 + static_cast<int>(rng.below(3));
    const double margin = 1e-3;
    const double kinks[] = {std::log(1.0 - g.cfg.epsilon), std::log(1.0 + g.cfg.epsilon),
                            std::log(g.cfg.delta)};
    for (int i = 0; i < n; ++i) {
        policy::Sample s;
        const int plen = 1 + static_cast<int>(rng.below(3));
        const int olen = 1 + static_cast<int>(rng.below(6));
        for (int t = 0; t < plen; ++t) s.prompt.push_back(static_cast<int>(rng.below(5)));
        for (int t = 0; t < olen; ++t) s.output.push_back(static_cast<int>(rng.below(7)));
        s.advantage = 2.0 * rng.uniform() - 1.0;
        const auto cur = policy::sequence_logprobs(g.params, s.prompt, s.output).logprobs;
        const auto rl = policy::sequence_logprobs(ref, s.prompt, s.output).logprobs;
        for (std::size_t t = 0; t < cur.size(); ++t) {
            double shift = spread * (2.0 * rng.uniform() - 1.0);
            for (double k : kinks) {
                if (std::abs(shift - k) < margin) {
                    shift = k + (shift < k ? -margin : margin);
                }
            }
            s.old_logp.push_back(cur[t] - shift);
        }
        s.ref_logp = rl;
        g.batch.push_back(std::move(s));
    }
    return g;
}

struct FdResult {
    double worst_rel = 0.0;  // over checked coordinates and the random direction
    std::size_t checked = 0;
};

/// Central differences of batch_loss against gradient(clip=false).
inline FdResult finite_difference_check(const GradInstance& g, std::uint64_t seed,
                                        int coords = 12, double h = 1e-6) {
    FdResult out;
    const auto analytic = policy::gradient(g.params, g.batch, g.cfg, false).grads;
    std::vector<double> flat_a;
    analytic.for_each([&](double v) { flat_a.push_back(v); });
    auto loss_at = [&](const policy::PolicyParams& p) {
        return policy::batch_loss(p, g.batch, g.cfg);
    };
    auto perturbed = [&](std::size_t idx, double d) {
        policy::PolicyParams p = g.params;
        std::size_t i = 0;
        p.for_each([&](double& v) {
            if (i++ == idx) v += d;
        });
        return p;
    };
    // Scale: the gradient norm, so coordinates with tiny gradients are judged
    // relative to the overall magnitude rather than to a near-zero value.
    double gnorm = 0.0;
    for (double v : flat_a) gnorm += v * v;
    gnorm = std::sqrt(gnorm);
    const double floor = std::max(gnorm * 1e-3, 1e-8);
    SplitMix64 rng(seed);
    // Coordinates with the largest analytic gradient plus random ones.
    std::vector<std::size_t> order(flat_a.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::partial_sort(order.begin(), order.begin() + std::min<std::size_t>(coords / 2, order.size()),
                      order.end(), [&](std::size_t a, std::size_t b) {
                          return std::abs(flat_a[a]) > std::abs(flat_a[b]);
                      });
    std::vector<std::size_t> pick(order.begin(), order.begin() + std::min<std::size_t>(coords / 2, order.size()));
    while (static_cast<int>(pick.size()) < coords) pick.push_back(rng.below(flat_a.size()));
    for (std::size_t idx : pick) {
        const double fd = (loss_at(perturbed(idx, h)) - loss_at(perturbed(idx, -h))) / (2.0 * h);
        const double rel = std::abs(fd - flat_a[idx]) / std::max({std::abs(fd), std::abs(flat_a[idx]), floor});
        out.worst_rel = std::max(out.worst_rel, rel);
        ++out.checked;
    }
    // Directional derivative along a random unit direction.
    policy::PolicyParams dir = policy::PolicyParams::zeros(g.params.config);
    double n2 = 0.0;
    dir.for_each([&](double& v) {
        v = rng.normal();
        n2 += v * v;
    });
    dir.scale(1.0 / std::sqrt(n2));
    double dot = 0.0;
    {
        std::size_t i = 0;
        dir.for_each([&](double v) { dot += v * flat_a[i++]; });
    }
    policy::PolicyParams plus = g.params;
    policy::PolicyParams minus = g.params;
    plus.add_scaled(dir, h);
    minus.add_scaled(dir, -h);
    const double fd = (loss_at(plus) - loss_at(minus)) / (2.0 * h);
    out.worst_rel = std::max(out.worst_rel,
                             std::abs(fd - dot) / std::max({std::abs(fd), std::abs(dot), floor}));
    ++out.checked;
    return out;
}

/// Batch of one completion per prompt in which every token has ratio rho
/// and the sample's advantage is `adv`.
inline GradInstance make_ratio_batch(double rho, double adv, double delta) {
    GradInstance g;
    const auto cfg = tasks::toy_model_config();
    g.params = policy::PolicyParams::random(cfg, 99, 0.3);
    g.cfg = policy::TrainConfig::toy();
    g.cfg.delta = delta;
    SplitMix64 rng(3);
    for (int i = 0; i < 4; ++i) {
        policy::Sample s;
        for (int t = 0; t < 5; ++t) s.prompt.push_back(static_cast<int>(rng.below(10)));
        for (int t = 0; t < 12; ++t) s.output.push_back(static_cast<int>(rng.below(19)));
        s.advantage = adv;
        const auto cur = policy::sequence_logprobs(g.params, s.prompt, s.output).logprobs;
        for (double lp : cur) s.old_logp.push_back(lp - std::log(rho));
        s.ref_logp = cur;
        g.batch.push_back(std::move(s));
    }
    return g;
}

/// Reference answer check: the tokens strictly between the first ANSWER and
/// the next EOS (or the end) must equal the target.
inline int oracle_verify(const tasks::Task& task, const std::vector<policy::Token>& out) {
    std::size_t i = 0;
    while (i < out.size() && out[i] != tasks::vocab::kAnswer) ++i;
    if (i == out.size()) return 0;
    std::vector<policy::Token> span;
    for (std::size_t j = i + 1; j < out.size() && out[j] != tasks::vocab::kEos; ++j) span.push_back(out[j]);
    return span == task.target_answer ? 1 : 0;
}

/// Reference generation law: inverse CDF over the forward distribution with
/// EOS removed wherever its probability is at or below `eos_floor`.
inline std::vector<policy::Token> oracle_generate(const policy::PolicyParams& p,
                                                  const std::vector<policy::Token>& prompt,
                                                  SplitMix64& rng, double eos_floor) {
    const auto& c = p.config;
    std::vector<policy::Token> seq = prompt;
    std::vector<policy::Token> out;
    while (static_cast<int>(seq.size()) < c.max_len) {
        std::vector<policy::Token> ctx(static_cast<std::size_t>(c.window), c.pad_id);
        const std::size_t n = std::min(seq.size(), ctx.size());
        std::copy(seq.end() - static_cast<std::ptrdiff_t>(n), seq.end(), ctx.end() - static_cast<std::ptrdiff_t>(n));
        auto w = policy::forward(p, ctx).probs;
        auto& e = w[static_cast<std::size_t>(c.eos_id)];
        if (e <= eos_floor) e = 0.0;
        double total = 0.0;
        for (double x : w) total += x;
        const double u = rng.uniform() * total;
        double acc = 0.0;
        std::size_t tok = w.size();
        for (std::size_t i = 0; i < w.size(); ++i) {
            acc += w[i];
            if (u < acc) {
                tok = i;
                break;
            }
        }
        if (tok == w.size()) {
            tok = w.size() - 1;
            while (w[tok] == 0.0) --tok;
        }
        out.push_back(static_cast<policy::Token>(tok));
        seq.push_back(static_cast<policy::Token>(tok));
        if (static_cast<int>(tok) == c.eos_id) break;
    }
    return out;
}

/// Success count out of k for one task, simulated from scratch. The stream
/// seed is mix_seed(filter_seed, task_id + 1).
inline int oracle_pass_count(const policy::PolicyParams& p, const tasks::Task& task, int k,
                             std::uint64_t filter_seed, double eos_floor = 0.1) {
    SplitMix64 rng(mix_seed(filter_seed, task.task_id + 1));
    int c = 0;
    for (int i = 0; i < k; ++i) c += oracle_verify(task, oracle_generate(p, task.prompt_tokens, rng, eos_floor));
    return c;
}

/// The default prepared dataset and base policy, plus a nearby "version 1"
/// checkpoint, for validator and corpus tests.
struct ValidatorWorld {
    harness::Prepared prep;
    std::shared_ptr<const policy::PolicyParams> v0;
    std::shared_ptr<const policy::PolicyParams> v1;
    rollout::WorkerOptions opts;

    ValidatorWorld() : prep(harness::prepare(harness::RunConfig{})) {
        v0 = std::make_shared<const policy::PolicyParams>(prep.base);
        policy::PolicyParams p = prep.base;
        SplitMix64 rng(404);
        p.for_each([&](double& w) { w += 0.02 * rng.normal(); });
        v1 = std::make_shared<const policy::PolicyParams>(std::move(p));
    }

    validator::Validator make_validator(double q = 1.0) const {
        validator::ValidatorConfig c;
        c.model = tasks::toy_model_config();
        c.group_size = opts.group_size;
        c.groups_per_file = opts.groups_per_file;
        c.q = q;
        auto a = v0;
        auto b = v1;
        return validator::Validator(c, prep.dataset, [a, b](std::uint64_t v) -> std::shared_ptr<const policy::PolicyParams> {
            if (v == 0) return a;
            if (v == 1) return b;
            return nullptr;
        });
    }

    std::string honest(const crypto::KeyPair& key, std::uint64_t step, std::uint64_t sub) const {
        return rollout::encode_file(
            rollout::generate_file(*v1, 1, prep.dataset, key.public_key(), step, sub, opts), key);
    }

    std::string attack(adversarial::Attack a, const crypto::KeyPair& key, std::uint64_t step,
                       std::uint64_t sub, std::uint64_t seed) const {
        adversarial::AttackInput in;
        in.params = v1.get();
        in.version = 1;
        in.stale_params = v0.get();
        in.dataset = &prep.dataset;
        in.key = &key;
        in.step = step;
        in.submission_index = sub;
        in.opts = opts;
        in.seed = seed;
        return adversarial::make_file(a, in);
    }
};

inline const ValidatorWorld& validator_world() {
    static const ValidatorWorld w;
    return w;
}

struct LivenessTrial {
    std::uint32_t missed_at_death = 0;   // silent sweep periods until the node was flagged
    bool alive_before = true;            // still active after m-1 silent periods
    std::uint32_t sweeps_to_reinvite = 0;  // after re-registering, sweeps until an invite arrived
    bool rejoined = false;               // accepted the new invite and became active again
};

/// Drives one node through join, `beats` healthy periods, silence until death,
/// and re-registration, against an orchestrator whose clock is the sweep loop.
inline LivenessTrial liveness_trial(std::uint32_t m, int beats, std::uint64_t seed) {
    orchestrator::OrchestratorConfig cfg;
    cfg.max_missed = m;
    orchestrator::Orchestrator orch(cfg, crypto::KeyPair::from_seed(seed));
    const auto key = crypto::KeyPair::from_seed(seed + 1);
    const auto addr = key.public_key();
    std::uint64_t nonce = 0;
    auto beat = [&] {
        orchestrator::HeartbeatRequest hb;
        hb.address = addr;
        hb.nonce = ++nonce;
        return orch.heartbeat(hb);
    };
    auto join = [&]() -> std::uint32_t {
        orch.register_node(addr, "sim", "cpu", orchestrator::TaskKind::kRolloutWorker);
        for (std::uint32_t sweeps = 1; sweeps <= 10; ++sweeps) {
            orch.sweep();
            const auto r = beat();
            if (r.invite) {
                orch.accept_invite(addr, *r.invite);
                return sweeps;
            }
        }
        return 0;
    };
    LivenessTrial out;
    join();
    orch.sweep();  // closes the period that contained the invite acceptance
    for (int i = 0; i < beats; ++i) {
        beat();
        orch.sweep();
    }
    for (std::uint32_t silent = 1; silent <= m + 5; ++silent) {
        const auto died = orch.sweep();
        if (!died.empty()) {
            out.missed_at_death = silent;
            break;
        }
        if (silent + 1 == m) out.alive_before = orch.node(addr)->state == orchestrator::NodeState::kActive;
    }
    if (m == 1) out.alive_before = true;
    out.sweeps_to_reinvite = join();
    out.rejoined = orch.node(addr)->state == orchestrator::NodeState::kActive;
    return out;
}

}  // namespace swarm::testing
