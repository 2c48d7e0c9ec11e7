// SPDX-License-Identifier: Apache-2.0

#include "swarm/validator.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

namespace swarm::validator {

using nlohmann::json;
using rollout::RolloutFile;
using rollout::RolloutRecord;

namespace {

constexpr std::pair<Check, std::string_view> kNames[] = {
    {Check::kNone, "none"},
    {Check::kSchema, "schema"},
    {Check::kSeed, "seed"},
    {Check::kBounds, "bounds"},
    {Check::kTermination, "termination"},
    {Check::kSampling, "sampling"},
    {Check::kCommitment, "commitment"},
};

CheckResult fail(Check c, std::string details) { return {c, std::move(details)}; }

std::string rec_label(std::size_t i) { return "record " + std::to_string(i) + ": "; }

}  // namespace

std::string_view check_name(Check c) {
    for (const auto& [k, name] : kNames) {
        if (k == c) {
            return name;
        }
    }
    return "none";
}

Check check_from_name(std::string_view name) {
    for (const auto& [k, n] : kNames) {
        if (n == name) {
            return k;
        }
    }
    throw InvalidInput("unknown check name: " + std::string(name));
}

std::string encode_verdict(const Verdict& v) {
    json j;
    j["details"] = v.details;
    j["failed_check"] = std::string(check_name(v.failed_check));
    j["file_id"] = v.file_id;
    j["node_address"] = v.node_address;
    j["result"] = v.accepted ? "accept" : "reject";
    j["step"] = v.step;
    j["submission_index"] = v.submission_index;
    return j.dump();
}

Verdict decode_verdict(const std::string& text) {
    try {
        const json j = json::parse(text);
        Verdict v;
        v.details = j.at("details").get<std::string>();
        v.failed_check = check_from_name(j.at("failed_check").get<std::string>());
        v.file_id = j.at("file_id").get<std::string>();
        v.node_address = j.at("node_address").get<std::string>();
        const auto result = j.at("result").get<std::string>();
        if (result != "accept" && result != "reject") {
            throw InvalidInput("verdict result must be accept or reject");
        }
        v.accepted = result == "accept";
        v.step = j.at("step").get<std::uint64_t>();
        v.submission_index = j.at("submission_index").get<std::uint64_t>();
        if (v.accepted != (v.failed_check == Check::kNone)) {
            throw InvalidInput("verdict result and failed_check disagree");
        }
        return v;
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("malformed verdict: ") + e.what());
    }
}

Validator::Validator(ValidatorConfig cfg, std::vector<tasks::Task> dataset,
                     CheckpointLookup checkpoints)
    : cfg_(std::move(cfg)), dataset_(std::move(dataset)), checkpoints_(std::move(checkpoints)) {
    cfg_.model.validate();
    if (cfg_.group_size < 2 || cfg_.groups_per_file < 1) {
        throw InvalidInput("validator needs group_size >= 2 and groups_per_file >= 1");
    }
    if (dataset_.empty()) {
        throw InvalidInput("validator needs a nonempty dataset");
    }
    for (std::size_t i = 0; i < dataset_.size(); ++i) {
        by_id_.emplace(dataset_[i].task_id, i);
    }
}

const tasks::Task* Validator::task(std::uint64_t task_id) const {
    const auto it = by_id_.find(task_id);
    return it == by_id_.end() ? nullptr : &dataset_[it->second];
}

CheckResult Validator::check_schema(const std::string& bytes, RolloutFile& out) const {
    try {
        out = rollout::parse_file(bytes);
    } catch (const InvalidInput& e) {
        return fail(Check::kSchema, e.what());
    }
    const auto g = static_cast<std::size_t>(cfg_.group_size);
    const std::size_t expected = g * static_cast<std::size_t>(cfg_.groups_per_file);
    if (out.records.size() != expected) {
        return fail(Check::kSchema, "expected " + std::to_string(expected) + " records, found " +
                                        std::to_string(out.records.size()));
    }
    const auto& h = out.header;
    for (std::size_t i = 0; i < out.records.size(); ++i) {
        const RolloutRecord& r = out.records[i];
        if (r.node_address != h.node_address || r.step != h.step ||
            r.submission_index != h.submission_index) {
            return fail(Check::kSchema, rec_label(i) + "identity fields disagree with header");
        }
        if (r.output_tokens.empty()) {
            return fail(Check::kSchema, rec_label(i) + "empty output");
        }
        if (r.output_tokens.size() > static_cast<std::size_t>(cfg_.model.max_len)) {
            return fail(Check::kSchema, rec_label(i) + "output longer than L_max");
        }
        for (auto t : r.output_tokens) {
            if (t < 0 || t >= cfg_.model.vocab) {
                return fail(Check::kSchema, rec_label(i) + "token outside vocabulary");
            }
        }
        if (r.chosen_probs.size() != r.output_tokens.size()) {
            return fail(Check::kSchema, rec_label(i) + "chosen_probs length mismatch");
        }
        const std::size_t k = static_cast<std::size_t>(cfg_.commit_interval);
        if (r.commitments.size() != (r.output_tokens.size() + k - 1) / k) {
            return fail(Check::kSchema, rec_label(i) + "wrong number of commitments");
        }
        const bool ends_eos = r.output_tokens.back() == cfg_.model.eos_id;
        if (ends_eos != r.eos_prob_at_end.has_value()) {
            return fail(Check::kSchema, rec_label(i) + "eos_prob_at_end presence disagrees with last token");
        }
        if (i % g != 0 && r.task_id != out.records[i - 1].task_id) {
            return fail(Check::kSchema, rec_label(i) + "group of " + std::to_string(g) +
                                            " records is not contiguous");
        }
        if (i % g == 0) {
            for (std::size_t j = i; j < i + g; ++j) {
                if (out.records[j].checkpoint_version != r.checkpoint_version) {
                    return fail(Check::kSchema, rec_label(j) + "checkpoint differs within group");
                }
            }
        }
    }
    return {};
}

CheckResult Validator::check_seed(const RolloutFile& file) const {
    const std::uint64_t seed = rollout::derive_seed(file.header.node_address, file.header.step,
                                                    file.header.submission_index);
    const auto prompts = rollout::select_prompts(seed, dataset_.size(),
                                                 static_cast<std::size_t>(cfg_.groups_per_file));
    const auto g = static_cast<std::size_t>(cfg_.group_size);
    for (std::size_t gi = 0; gi < prompts.size(); ++gi) {
        const std::uint64_t want = dataset_[prompts[gi]].task_id;
        const std::uint64_t got = file.records[gi * g].task_id;
        if (want != got) {
            return fail(Check::kSeed, "group " + std::to_string(gi) + ": task_id " +
                                          std::to_string(got) + " but seed selects " +
                                          std::to_string(want));
        }
    }
    return {};
}

CheckResult Validator::check_bounds(const RolloutFile& file) const {
    const auto g = static_cast<std::size_t>(cfg_.group_size);
    const double a_max = std::sqrt(static_cast<double>(cfg_.group_size));
    const double r_min = -cfg_.alpha * cfg_.model.max_len;
    const double tol = cfg_.reward_tolerance;
    for (std::size_t start = 0; start < file.records.size(); start += g) {
        std::vector<double> rewards;
        for (std::size_t i = start; i < start + g; ++i) {
            const RolloutRecord& r = file.records[i];
            const tasks::Task* t = task(r.task_id);
            if (t == nullptr) {
                return fail(Check::kBounds, rec_label(i) + "unknown task_id");
            }
            if (r.r_task != 0.0 && r.r_task != 1.0) {
                return fail(Check::kBounds, rec_label(i) + "r_task not in {0,1}");
            }
            if (!(r.r_total >= r_min - tol && r.r_total <= 1.0 + tol)) {
                return fail(Check::kBounds, rec_label(i) + "r_total outside [-alpha*L_max, 1]");
            }
            if (!(std::abs(r.advantage) <= a_max)) {
                return fail(Check::kBounds, rec_label(i) + "advantage outside [-sqrt(G), sqrt(G)]");
            }
            const auto rb = tasks::total_reward(*t, r.output_tokens, cfg_.alpha);
            if (rb.r_task != r.r_task) {
                return fail(Check::kBounds, rec_label(i) + "r_task disagrees with the verifier");
            }
            if (std::abs(rb.r_total - r.r_total) > tol) {
                return fail(Check::kBounds, rec_label(i) + "r_total disagrees with recomputation");
            }
            rewards.push_back(r.r_total);
        }
        const auto adv = policy::compute_advantages(rewards, cfg_.adv_eps, cfg_.advantage_mode);
        for (std::size_t j = 0; j < g; ++j) {
            if (std::abs(adv[j] - file.records[start + j].advantage) > tol) {
                return fail(Check::kBounds,
                            rec_label(start + j) + "advantage disagrees with group recomputation");
            }
        }
    }
    return {};
}

Recompute Validator::recompute(const RolloutRecord& r, const policy::PolicyParams& params) const {
    const tasks::Task* t = task(r.task_id);
    if (t == nullptr) {
        throw InvalidInput("recompute: unknown task_id");
    }
    auto traces = policy::prefill(params, t->prompt_tokens, r.output_tokens);
    Recompute rc;
    const auto eos = static_cast<std::size_t>(cfg_.model.eos_id);
    for (std::size_t i = 0; i < traces.size(); ++i) {
        rc.chosen_probs.push_back(traces[i].probs[static_cast<std::size_t>(r.output_tokens[i])]);
        rc.eos_probs.push_back(traces[i].probs[eos]);
        rc.hidden.push_back(std::move(traces[i].hidden));
    }
    return rc;
}

CheckResult Validator::check_termination(const RolloutRecord& r, const Recompute& rc) const {
    const tasks::Task* t = task(r.task_id);
    const std::size_t total = t->prompt_tokens.size() + r.output_tokens.size();
    const auto l_max = static_cast<std::size_t>(cfg_.model.max_len);
    if (total > l_max) {
        return fail(Check::kTermination, "sequence longer than L_max");
    }
    const auto first_eos =
        std::find(r.output_tokens.begin(), r.output_tokens.end(), cfg_.model.eos_id);
    if (first_eos != r.output_tokens.end() && first_eos + 1 != r.output_tokens.end()) {
        return fail(Check::kTermination, "tokens continue after EOS");
    }
    if (total == l_max) {
        return {};
    }
    if (r.output_tokens.back() != cfg_.model.eos_id) {
        return fail(Check::kTermination, "ends before L_max without EOS");
    }
    const double p = rc.eos_probs.back();
    if (!(p > cfg_.eos_threshold)) {
        std::ostringstream os;
        os << "recomputed EOS probability " << p << " <= " << cfg_.eos_threshold;
        return fail(Check::kTermination, os.str());
    }
    return {};
}

CheckResult Validator::check_sampling(const RolloutRecord& r, const Recompute& rc) const {
    if (r.output_tokens.size() < static_cast<std::size_t>(cfg_.min_sampling_len)) {
        return {};
    }
    std::size_t low = 0;
    for (double p : rc.chosen_probs) {
        low += p < cfg_.p_low ? 1 : 0;
    }
    const double frac = static_cast<double>(low) / static_cast<double>(rc.chosen_probs.size());
    if (frac > cfg_.theta) {
        std::ostringstream os;
        os << "fraction " << frac << " of tokens below p=" << cfg_.p_low << " exceeds " << cfg_.theta;
        return fail(Check::kSampling, os.str());
    }
    return {};
}

CheckResult Validator::check_commitment(const RolloutRecord& r, const Recompute& rc) const {
    const auto digests = rollout::build_commitments(rc.hidden, cfg_.commit_interval);
    for (std::size_t j = 0; j < digests.size(); ++j) {
        if (digests[j] != r.commitments[j]) {
            return fail(Check::kCommitment, "commitment " + std::to_string(j) + " does not match prefill");
        }
    }
    for (std::size_t i = 0; i < rc.chosen_probs.size(); ++i) {
        if (!(std::abs(rc.chosen_probs[i] - r.chosen_probs[i]) <= cfg_.prob_tolerance)) {
            return fail(Check::kCommitment, "chosen_probs[" + std::to_string(i) + "] does not match prefill");
        }
    }
    if (r.eos_prob_at_end &&
        !(std::abs(*r.eos_prob_at_end - rc.eos_probs.back()) <= cfg_.prob_tolerance)) {
        return fail(Check::kCommitment, "eos_prob_at_end does not match prefill");
    }
    return {};
}

bool Validator::in_commitment_subset(const std::string& file_id, std::size_t index) const {
    if (cfg_.q >= 1.0) {
        return true;
    }
    const auto d = crypto::sha256(file_id);
    const std::uint64_t h = get_u64_le(ByteView(d.data(), d.size()), 0);
    SplitMix64 r(mix_seed(cfg_.q_seed ^ h, index));
    return r.uniform() < cfg_.q;
}

Verdict Validator::validate(const std::string& bytes, const std::string& file_id,
                            RolloutFile* parsed) const {
    Verdict v;
    v.file_id = file_id;
    RolloutFile file;
    auto finish = [&](const CheckResult& res) {
        v.accepted = res.ok();
        v.failed_check = res.failed;
        v.details = res.details;
        if (parsed != nullptr) {
            *parsed = file;
        }
        return v;
    };

    CheckResult res = check_schema(bytes, file);
    if (!res.ok()) {
        // Identity is still reported when the header alone parsed.
        try {
            const auto nl = bytes.find('\n');
            const json h = json::parse(bytes.substr(0, nl));
            v.node_address = h.at("node_address").get<std::string>();
            v.step = h.at("step").get<std::uint64_t>();
            v.submission_index = h.at("submission_index").get<std::uint64_t>();
        } catch (const std::exception&) {
        }
        return finish(res);
    }
    v.node_address = to_hex(file.header.node_address);
    v.step = file.header.step;
    v.submission_index = file.header.submission_index;

    if (res = check_seed(file); !res.ok()) {
        return finish(res);
    }
    if (res = check_bounds(file); !res.ok()) {
        return finish(res);
    }

    std::vector<Recompute> rcs;
    rcs.reserve(file.records.size());
    for (std::size_t i = 0; i < file.records.size(); ++i) {
        const auto params = checkpoints_(file.records[i].checkpoint_version);
        if (!params) {
            return finish(fail(Check::kCommitment, "unknown checkpoint"));
        }
        try {
            rcs.push_back(recompute(file.records[i], *params));
        } catch (const InvalidInput& e) {
            return finish(fail(Check::kTermination, rec_label(i) + e.what()));
        }
    }
    for (std::size_t i = 0; i < file.records.size(); ++i) {
        if (res = check_termination(file.records[i], rcs[i]); !res.ok()) {
            res.details = rec_label(i) + res.details;
            return finish(res);
        }
    }
    for (std::size_t i = 0; i < file.records.size(); ++i) {
        if (res = check_sampling(file.records[i], rcs[i]); !res.ok()) {
            res.details = rec_label(i) + res.details;
            return finish(res);
        }
    }
    for (std::size_t i = 0; i < file.records.size(); ++i) {
        if (!in_commitment_subset(file_id, i)) {
            continue;
        }
        if (res = check_commitment(file.records[i], rcs[i]); !res.ok()) {
            res.details = rec_label(i) + res.details;
            return finish(res);
        }
    }
    return finish({});
}

}  // namespace swarm::validator
