// SPDX-License-Identifier: Apache-2.0

#include "swarm/adversarial.hpp"

#include <algorithm>
#include <cmath>

#include "swarm/sampling.hpp"

namespace swarm::adversarial {

using rollout::RolloutFile;
using rollout::RolloutRecord;

namespace {

constexpr std::pair<Attack, std::string_view> kNames[] = {
    {Attack::kWrongModel, "wrong-model"},
    {Attack::kStaleCheckpoint, "stale-checkpoint"},
    {Attack::kEarlyEos, "early-eos"},
    {Attack::kCherryPick, "cherry-pick"},
    {Attack::kPermuted, "permuted"},
    {Attack::kForgedReward, "forged-reward"},
    {Attack::kTruncated, "truncated"},
    {Attack::kShortGroup, "short-group"},
    {Attack::kTokenSubstitution, "token-substitution"},
};

const tasks::Task& find_task(const std::vector<tasks::Task>& dataset, std::uint64_t id) {
    for (const auto& t : dataset) {
        if (t.task_id == id) {
            return t;
        }
    }
    throw InvalidInput("unknown task id " + std::to_string(id));
}

// Whether `r` would clear the termination and sampling audits under `truth`.
bool plausible(const RolloutRecord& r, const policy::PolicyParams& truth, const tasks::Task& task) {
    const validator::ValidatorConfig vc;
    const auto traces = policy::prefill(truth, task.prompt_tokens, r.output_tokens);
    const auto eos = static_cast<std::size_t>(truth.config.eos_id);
    const bool ends_eos = r.output_tokens.back() == truth.config.eos_id;
    const bool full = task.prompt_tokens.size() + r.output_tokens.size() ==
                      static_cast<std::size_t>(truth.config.max_len);
    if (ends_eos ? traces.back().probs[eos] <= vc.eos_threshold : !full) {
        return false;
    }
    if (static_cast<int>(r.output_tokens.size()) >= vc.min_sampling_len) {
        std::size_t low = 0;
        for (std::size_t i = 0; i < traces.size(); ++i) {
            low += traces[i].probs[static_cast<std::size_t>(r.output_tokens[i])] < vc.p_low ? 1 : 0;
        }
        if (static_cast<double>(low) > vc.theta * static_cast<double>(traces.size())) {
            return false;
        }
    }
    return true;
}

RolloutFile shell(const AttackInput& in, std::uint64_t submission_index) {
    RolloutFile f;
    f.header.node_address = in.key->public_key();
    f.header.step = in.step;
    f.header.submission_index = submission_index;
    return f;
}

void stamp(RolloutFile& f) {
    for (auto& r : f.records) {
        r.node_address = f.header.node_address;
        r.step = f.header.step;
        r.submission_index = f.header.submission_index;
    }
}

// Groups sampled from `sampler` for `prompts`, each resampled until it would
// pass termination and sampling under the claimed checkpoint.
RolloutFile sampled_elsewhere(const AttackInput& in, const policy::PolicyParams& sampler) {
    const auto& ds = *in.dataset;
    const auto seed = rollout::derive_seed(in.key->public_key(), in.step, in.submission_index);
    const auto prompts = rollout::select_prompts(seed, ds.size(),
                                                 static_cast<std::size_t>(in.opts.groups_per_file));
    SplitMix64 rng(mix_seed(in.seed, 0xbad));
    RolloutFile f = shell(in, in.submission_index);
    for (std::size_t idx : prompts) {
        std::vector<RolloutRecord> group;
        for (int attempt = 0; attempt < 64; ++attempt) {
            group = rollout::generate_group(sampler, in.version, ds[idx], rng, in.opts);
            const bool ok = std::all_of(group.begin(), group.end(), [&](const RolloutRecord& r) {
                return plausible(r, *in.params, ds[idx]);
            });
            if (ok) {
                break;
            }
        }
        f.records.insert(f.records.end(), group.begin(), group.end());
    }
    stamp(f);
    return f;
}

std::span<RolloutRecord> group_span(RolloutFile& f, std::size_t g, int group_size) {
    return {f.records.data() + g * static_cast<std::size_t>(group_size),
            static_cast<std::size_t>(group_size)};
}

}  // namespace

std::string_view attack_name(Attack a) {
    for (const auto& [k, n] : kNames) {
        if (k == a) {
            return n;
        }
    }
    return "unknown";
}

Attack attack_from_name(std::string_view name) {
    for (const auto& [k, n] : kNames) {
        if (n == name) {
            return k;
        }
    }
    throw InvalidInput("unknown attack: " + std::string(name));
}

const std::vector<Attack>& all_attacks() {
    static const std::vector<Attack> all = [] {
        std::vector<Attack> v;
        for (const auto& [k, _] : kNames) {
            v.push_back(k);
        }
        return v;
    }();
    return all;
}

validator::Check expected_check(Attack a) {
    using validator::Check;
    switch (a) {
        case Attack::kWrongModel:
        case Attack::kStaleCheckpoint: return Check::kCommitment;
        case Attack::kEarlyEos: return Check::kTermination;
        case Attack::kCherryPick:
        case Attack::kPermuted: return Check::kSeed;
        case Attack::kForgedReward: return Check::kBounds;
        case Attack::kTruncated:
        case Attack::kShortGroup: return Check::kSchema;
        case Attack::kTokenSubstitution: return Check::kSampling;
    }
    return Check::kNone;
}

void rederive(RolloutRecord& r, const policy::PolicyParams& params, const tasks::Task& task,
              int commit_interval) {
    const auto traces = policy::prefill(params, task.prompt_tokens, r.output_tokens);
    r.chosen_probs.clear();
    std::vector<std::vector<double>> hidden;
    for (std::size_t i = 0; i < traces.size(); ++i) {
        r.chosen_probs.push_back(traces[i].probs[static_cast<std::size_t>(r.output_tokens[i])]);
        hidden.push_back(traces[i].hidden);
    }
    r.eos_prob_at_end.reset();
    if (!r.output_tokens.empty() && r.output_tokens.back() == params.config.eos_id) {
        r.eos_prob_at_end = r.chosen_probs.back();
    }
    r.commitments = rollout::build_commitments(hidden, commit_interval);
}

void rescore_group(std::span<RolloutRecord> group, const tasks::Task& task,
                   const rollout::WorkerOptions& opts) {
    std::vector<double> rewards;
    for (auto& r : group) {
        const auto rb = tasks::total_reward(task, r.output_tokens, opts.alpha);
        r.r_task = rb.r_task;
        r.r_total = rb.r_total;
        rewards.push_back(rb.r_total);
    }
    const auto adv = policy::compute_advantages(rewards, opts.adv_eps, opts.advantage_mode);
    for (std::size_t i = 0; i < group.size(); ++i) {
        group[i].advantage = adv[i];
    }
}

policy::PolicyParams quantize(const policy::PolicyParams& params, double quantum) {
    policy::PolicyParams q = params;
    q.for_each([quantum](double& w) { w = std::round(w / quantum) * quantum; });
    return q;
}

std::string make_file(Attack a, const AttackInput& in) {
    if (!in.params || !in.dataset || !in.key || in.dataset->empty()) {
        throw InvalidInput("attack input is incomplete");
    }
    const auto& ds = *in.dataset;
    const auto& params = *in.params;
    const int g = in.opts.group_size;
    SplitMix64 rng(mix_seed(in.seed, static_cast<std::uint64_t>(a) + 1));
    auto honest = [&](std::uint64_t sub) {
        return rollout::generate_file(params, in.version, ds, in.key->public_key(), in.step, sub,
                                      in.opts);
    };

    switch (a) {
        case Attack::kWrongModel:
            return rollout::encode_file(sampled_elsewhere(in, quantize(params, 1.0 / 64.0)),
                                        *in.key);

        case Attack::kStaleCheckpoint: {
            if (!in.stale_params) {
                throw InvalidInput("stale-checkpoint attack needs stale params");
            }
            return rollout::encode_file(sampled_elsewhere(in, *in.stale_params), *in.key);
        }

        case Attack::kEarlyEos: {
            RolloutFile f = honest(in.submission_index);
            const tasks::Task& task = find_task(ds, f.records.front().task_id);
            // Longest completion in group 0 gives the most room to cut.
            std::size_t victim = 0;
            for (std::size_t i = 0; i < static_cast<std::size_t>(g); ++i) {
                if (f.records[i].output_tokens.size() > f.records[victim].output_tokens.size()) {
                    victim = i;
                }
            }
            auto& r = f.records[victim];
            const auto traces = policy::prefill(params, task.prompt_tokens, r.output_tokens);
            const auto eos = static_cast<std::size_t>(params.config.eos_id);
            std::size_t cut = 0;
            double best = 2.0;
            for (std::size_t t = 0; t < traces.size(); ++t) {
                if (traces[t].probs[eos] < best) {
                    best = traces[t].probs[eos];
                    cut = t;
                }
            }
            r.output_tokens.resize(cut);
            r.output_tokens.push_back(params.config.eos_id);
            rederive(r, params, task, in.opts.commit_interval);
            rescore_group(group_span(f, 0, g), task, in.opts);
            return rollout::encode_file(f, *in.key);
        }

        case Attack::kCherryPick: {
            const auto seed = rollout::derive_seed(in.key->public_key(), in.step, in.submission_index);
            auto prompts = rollout::select_prompts(seed, ds.size(),
                                                   static_cast<std::size_t>(in.opts.groups_per_file));
            prompts[0] = (prompts[0] + 1 + rng.below(ds.size() - 1)) % ds.size();
            SplitMix64 srng(rollout::sampling_seed(seed));
            RolloutFile f = shell(in, in.submission_index);
            for (std::size_t idx : prompts) {
                auto grp = rollout::generate_group(params, in.version, ds[idx], srng, in.opts);
                f.records.insert(f.records.end(), grp.begin(), grp.end());
            }
            stamp(f);
            return rollout::encode_file(f, *in.key);
        }

        case Attack::kPermuted: {
            // Needs at least two distinct prompts; try successive submissions.
            for (std::uint64_t sub = in.submission_index;; ++sub) {
                RolloutFile f = honest(sub);
                const std::size_t groups = f.records.size() / static_cast<std::size_t>(g);
                if (groups < 2) {
                    throw InvalidInput("permuted attack needs >= 2 groups per file");
                }
                if (f.records.front().task_id == f.records.back().task_id) {
                    continue;
                }
                std::rotate(f.records.begin(), f.records.begin() + g, f.records.end());
                return rollout::encode_file(f, *in.key);
            }
        }

        case Attack::kForgedReward: {
            RolloutFile f = honest(in.submission_index);
            auto grp = group_span(f, 0, g);
            auto& r = grp[0];
            const double penalty = r.r_task - r.r_total;
            r.r_task = 1.0 - r.r_task;
            r.r_total = r.r_task - penalty;
            std::vector<double> rewards;
            for (const auto& x : grp) {
                rewards.push_back(x.r_total);
            }
            const auto adv =
                policy::compute_advantages(rewards, in.opts.adv_eps, in.opts.advantage_mode);
            for (std::size_t i = 0; i < grp.size(); ++i) {
                grp[i].advantage = adv[i];
            }
            return rollout::encode_file(f, *in.key);
        }

        case Attack::kTruncated: {
            const std::string bytes = rollout::encode_file(honest(in.submission_index), *in.key);
            return bytes.substr(0, bytes.size() / 2);
        }

        case Attack::kShortGroup: {
            RolloutFile f = honest(in.submission_index);
            f.records.erase(f.records.begin() + (g - 1));
            return rollout::encode_file(f, *in.key);
        }

        case Attack::kTokenSubstitution: {
            RolloutFile f = honest(in.submission_index);
            const tasks::Task& task = find_task(ds, f.records.front().task_id);
            auto& r = f.records.front();
            const int think = std::min(21, params.config.max_len -
                                               static_cast<int>(task.prompt_tokens.size()) -
                                               static_cast<int>(task.target_answer.size()) - 2);
            for (int attempt = 0; attempt < 64; ++attempt) {
                r.output_tokens.clear();
                for (int i = 0; i < think; ++i) {
                    r.output_tokens.push_back(static_cast<policy::Token>(rng.below(13)));
                }
                r.output_tokens.push_back(tasks::vocab::kAnswer);
                r.output_tokens.insert(r.output_tokens.end(), task.target_answer.begin(),
                                       task.target_answer.end());
                r.output_tokens.push_back(params.config.eos_id);
                rederive(r, params, task, in.opts.commit_interval);
                std::size_t low = 0;
                for (double p : r.chosen_probs) {
                    low += p < validator::ValidatorConfig{}.p_low ? 1 : 0;
                }
                const bool flagged = static_cast<double>(low) >
                                     validator::ValidatorConfig{}.theta *
                                         static_cast<double>(r.chosen_probs.size());
                if (flagged && r.eos_prob_at_end &&
                    *r.eos_prob_at_end > validator::ValidatorConfig{}.eos_threshold) {
                    break;
                }
            }
            rescore_group(group_span(f, 0, g), task, in.opts);
            return rollout::encode_file(f, *in.key);
        }
    }
    throw InvalidInput("unhandled attack");
}

}  // namespace swarm::adversarial
