// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <set>

#include <nlohmann/json.hpp>

#include "swarm/harness.hpp"

namespace swarm::harness {

using nlohmann::json;

namespace {

Assertion check(std::string name, bool ok, std::string detail = {}) {
    return Assertion{std::move(name), ok, std::move(detail)};
}

// Files whose groups reached a consumed batch.
std::set<std::string> consumed_files(const std::string& log) {
    std::set<std::string> out;
    std::size_t pos = 0;
    while (pos < log.size()) {
        const auto nl = log.find('\n', pos);
        const std::string line = log.substr(pos, nl - pos);
        if (!line.empty()) {
            out.insert(json::parse(line).at("file_id").get<std::string>());
        }
        pos = nl == std::string::npos ? log.size() : nl + 1;
    }
    return out;
}

void common_assertions(ScenarioReport& rep, const RunConfig& cfg, const RunResult& r) {
    rep.assertions.push_back(check("run completed every step",
                                   !r.halted && !r.liveness_failure &&
                                       step_rewards(r.rows).size() == static_cast<std::size_t>(cfg.steps),
                                   r.halt_reason));
    const auto bad = orchestrator::ledger_verify(r.ledger);
    rep.assertions.push_back(check("ledger verifies", !bad.has_value(),
                                   bad ? "first bad index " + std::to_string(*bad) : ""));
    rep.assertions.push_back(check("no degenerate group consumed",
                                   trainer::audit_consumed_log(r.consumed_log) == 0));
    rep.assertions.push_back(check("no corrupted checkpoint accepted", r.checkpoint_mismatches == 0,
                                   std::to_string(r.checkpoint_mismatches) + " mismatches"));
    rep.assertions.push_back(check("relays hold at most 5 versions", r.max_versions_held <= 5,
                                   std::to_string(r.max_versions_held)));
}

}  // namespace

bool ScenarioReport::passed() const {
    return std::all_of(assertions.begin(), assertions.end(),
                       [](const Assertion& a) { return a.passed; });
}

const std::vector<std::string>& fault_kinds() {
    static const std::vector<std::string> kinds = {"crash", "adversarial", "corrupted-shard",
                                                   "throttled-relay", "no-workers"};
    return kinds;
}

ScenarioReport run_fault(const std::string& kind, const RunConfig& base, const Prepared& prepared) {
    ScenarioReport rep;
    rep.kind = kind;
    RunConfig cfg = base;
    cfg.steps = std::min(cfg.steps, 6);

    if (kind == "crash") {
        const int victim = canonical_worker_order(cfg).at(1);
        cfg.crash = {{victim, 2}};
        const RunResult r = run_local(cfg, prepared);
        common_assertions(rep, cfg, r);
        const bool died = std::count(r.dead_workers.begin(), r.dead_workers.end(), victim) == 1;
        rep.assertions.push_back(check("crashed worker declared dead", died));
        if (died) {
            const auto missed = r.death_sweep.at(victim) - r.silent_since.at(victim) + 1;
            rep.assertions.push_back(check("death after exactly max_missed silent sweeps",
                                           missed == cfg.max_missed,
                                           std::to_string(missed) + " sweeps"));
        }
        const bool slashed = std::any_of(r.ledger.begin(), r.ledger.end(), [](const auto& e) {
            return e.kind == orchestrator::EventKind::kSlash;
        });
        rep.assertions.push_back(check("death is not slashing", !slashed && r.slashes.empty()));
        return rep;
    }

    if (kind == "adversarial") {
        const auto& attacks = adversarial::all_attacks();
        cfg.workers = 3 + static_cast<int>(attacks.size());
        cfg.adversarial.clear();
        for (std::size_t a = 0; a < attacks.size(); ++a) {
            cfg.adversarial[3 + static_cast<int>(a)] = attacks[a];
        }
        // The first step whose version has a predecessor, so a stale checkpoint exists.
        cfg.attack_from_step = static_cast<std::uint64_t>(cfg.async_level) + 1;
        cfg.steps = cfg.async_level + 2;
        const RunResult r = run_local(cfg, prepared);
        common_assertions(rep, cfg, r);
        for (const auto& [wi, attack] : cfg.adversarial) {
            const auto it = std::find_if(r.slashes.begin(), r.slashes.end(),
                                         [wi = wi](const SlashRecord& s) { return s.worker == wi; });
            const bool ok = it != r.slashes.end() && it->failed_check == adversarial::expected_check(attack);
            rep.assertions.push_back(check(
                std::string("slashed for ") + std::string(adversarial::attack_name(attack)), ok,
                it == r.slashes.end() ? "not slashed"
                                      : std::string("failed_check=") +
                                            std::string(validator::check_name(it->failed_check))));
        }
        const auto consumed = consumed_files(r.consumed_log);
        const bool leaked = std::any_of(r.adversary_file_ids.begin(), r.adversary_file_ids.end(),
                                        [&](const std::string& f) { return consumed.count(f) != 0; });
        rep.assertions.push_back(check("no adversarial file consumed", !leaked));
        bool absent = !r.allowlists.empty();
        if (absent) {
            const auto& last = r.allowlists.back();
            for (const auto& [wi, _] : cfg.adversarial) {
                absent = absent && std::find(last.begin(), last.end(),
                                             worker_key(cfg, wi).address_hex()) == last.end();
            }
        }
        rep.assertions.push_back(check("slashed workers absent from relay allowlists", absent));
        const auto honest_slashed = std::count_if(r.slashes.begin(), r.slashes.end(),
                                                  [](const SlashRecord& s) { return s.worker < 3; });
        rep.assertions.push_back(check("honest workers never slashed", honest_slashed == 0));
        return rep;
    }

    if (kind == "corrupted-shard") {
        cfg.corrupt_prob = 0.3;
        cfg.shard_size = 8 * 1024;
        const RunResult r = run_local(cfg, prepared);
        common_assertions(rep, cfg, r);
        rep.assertions.push_back(check("corrupted shards were served and rejected",
                                       r.corrupt_shards_seen > 0,
                                       std::to_string(r.corrupt_shards_seen) + " corrupt shards"));
        return rep;
    }

    if (kind == "throttled-relay") {
        cfg.relays = std::max(cfg.relays, 3);
        cfg.throttled_relays = 1;
        const RunResult r = run_local(cfg, prepared);
        common_assertions(rep, cfg, r);
        const double p0 = r.relay_probabilities.empty() ? 1.0 : r.relay_probabilities[0];
        rep.assertions.push_back(check("throttled relay selected at the floor rate",
                                       p0 <= 0.05 + 1e-9, "p=" + std::to_string(p0)));
        return rep;
    }

    if (kind == "no-workers") {
        cfg.workers = 0;
        const RunResult r = run_local(cfg, prepared);
        rep.assertions.push_back(check("reported as a liveness failure", r.liveness_failure,
                                       r.halt_reason));
        rep.assertions.push_back(check("no step consumed", r.rows.empty()));
        return rep;
    }

    throw InvalidInput("unknown fault kind: " + kind);
}

}  // namespace swarm::harness
