// SPDX-License-Identifier: Apache-2.0

#include <chrono>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "swarm/harness.hpp"
#include "swarm/orchestrator.hpp"
#include "swarm/shardcast.hpp"
#include "swarm/validator.hpp"

namespace swarm::harness {

using nlohmann::json;
namespace orch = swarm::orchestrator;

namespace {

rollout::WorkerOptions worker_options(const RunConfig& cfg) {
    rollout::WorkerOptions o;
    o.group_size = cfg.train.group_size;
    o.groups_per_file = cfg.groups_per_file;
    o.alpha = cfg.train.alpha;
    o.adv_eps = cfg.train.adv_eps;
    o.advantage_mode = cfg.train.advantage_mode;
    return o;
}

validator::ValidatorConfig validator_config(const RunConfig& cfg) {
    validator::ValidatorConfig v;
    v.model = tasks::toy_model_config();
    v.group_size = cfg.train.group_size;
    v.groups_per_file = cfg.groups_per_file;
    v.alpha = cfg.train.alpha;
    v.adv_eps = cfg.train.adv_eps;
    v.advantage_mode = cfg.train.advantage_mode;
    v.q = cfg.q;
    v.q_seed = cfg.seed;
    return v;
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t to) {
    if (to <= from) {
        return 0.0;
    }
    return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(from),
                           v.begin() + static_cast<std::ptrdiff_t>(to), 0.0) /
           static_cast<double>(to - from);
}

struct SimNode {
    int index = -1;  // worker index, or -1 - validator index
    crypto::KeyPair key;
    orch::TaskKind role = orch::TaskKind::kRolloutWorker;
    std::uint64_t nonce = 0;
    bool has_task = false;
    bool crashed = false;
};

struct SimWorker {
    SimWorker(int i, crypto::KeyPair k) : index(i), key(std::move(k)) {}
    int index = 0;
    crypto::KeyPair key;
    std::unique_ptr<shardcast::Client> client;
    std::map<std::uint64_t, std::shared_ptr<const policy::PolicyParams>> cache;
    std::optional<adversarial::Attack> attack;
    std::optional<std::uint64_t> crash_step;
    bool crashed = false;
};

class Cluster {
public:
    Cluster(const RunConfig& cfg, const Prepared& prep)
        : cfg_(cfg), prep_(prep), orch_(orch_config(cfg), owner_key(cfg)),
          trainer_key_(trainer_key(cfg)) {
        for (int r = 0; r < cfg.relays; ++r) {
            shardcast::RelayOptions ro;
            ro.enforce_allowlist = true;
            ro.rate = 1e9;
            ro.burst = 1e9;
            auto store = std::make_shared<shardcast::RelayStore>(trainer_key_.public_key(), ro);
            shardcast::LocalRelay::Faults f;
            f.bandwidth = cfg.relay_bandwidth;
            f.corrupt_prob = cfg.corrupt_prob;
            f.throttle_all = r < cfg.throttled_relays;
            f.seed = mix_seed(cfg.seed, 0x50000 + static_cast<std::uint64_t>(r));
            stores_.push_back(store);
            relays_.push_back(std::make_shared<shardcast::LocalRelay>(store, f));
        }
        origin_ = std::make_unique<shardcast::Origin>(trainer_key_, relays_, cfg.shard_size);
        for (int i = 0; i < cfg.workers; ++i) {
            SimWorker w(i, worker_key(cfg, i));
            shardcast::ClientOptions co;
            co.seed = mix_seed(cfg.seed, 0x60000 + static_cast<std::uint64_t>(i));
            co.concurrency = 1;
            w.client = std::make_unique<shardcast::Client>(relays_, trainer_key_.public_key(),
                                                           w.key.address_hex(), co);
            if (auto it = cfg.adversarial.find(i); it != cfg.adversarial.end()) {
                w.attack = it->second;
            }
            if (auto it = cfg.crash.find(i); it != cfg.crash.end()) {
                w.crash_step = it->second;
            }
            workers_.emplace(i, std::move(w));
            nodes_.push_back(SimNode{i, worker_key(cfg, i), orch::TaskKind::kRolloutWorker});
        }
        for (int v = 0; v < cfg.validators; ++v) {
            nodes_.push_back(SimNode{-1 - v, validator_key(cfg, v), orch::TaskKind::kValidator});
        }
        order_ = canonical_worker_order(cfg);
        validator_ = std::make_unique<validator::Validator>(
            validator_config(cfg), prep.dataset,
            [this](std::uint64_t v) -> std::shared_ptr<const policy::PolicyParams> {
                return v < published_.size() ? published_[v] : nullptr;
            });
    }

    RunResult run(const std::function<void(const trainer::MetricsRow&)>& on_row) {
        const auto t0 = std::chrono::steady_clock::now();
        bring_up();
        trainer::Learner learner(prep_.base, train_config(), prep_.dataset);
        trainer::BatchCollector collector(static_cast<std::size_t>(cfg_.train.group_size),
                                          static_cast<std::size_t>(cfg_.train.prompts_per_step),
                                          cfg_.k_max);
        publish(learner.params(), 0);
        res_.metrics_csv = trainer::csv_header() + "\n";
        const auto opts = worker_options(cfg_);
        for (int s = 0; s < cfg_.steps; ++s) {
            const auto step = static_cast<std::uint64_t>(s);
            const std::uint64_t version =
                step > static_cast<std::uint64_t>(cfg_.async_level) ? step - static_cast<std::uint64_t>(cfg_.async_level) : 0;
            collector.begin(step);
            std::set<int> skip;  // workers excluded for the rest of this step
            std::uint64_t sub = 0;
            std::size_t cursor = 0;
            std::size_t rounds = 0;
            while (!collector.complete()) {
                if (order_.empty() || skip.size() == order_.size()) {
                    return starve(step, "no eligible rollout workers");
                }
                if (cursor == order_.size()) {
                    cursor = 0;
                    ++sub;
                    tick();
                    if (++rounds > 2000) {
                        return starve(step, "step did not fill within 2000 rounds");
                    }
                }
                const int wi = order_[cursor];
                SimWorker& w = workers_.at(wi);
                if (skip.count(wi) != 0) {
                    ++cursor;
                    continue;
                }
                const auto rec = orch_.node(w.key.public_key());
                if (!rec || rec->state == orch::NodeState::kSlashed ||
                    rec->state == orch::NodeState::kDead) {
                    skip.insert(wi);
                    ++cursor;
                    continue;
                }
                if (w.crash_step && step >= *w.crash_step && !w.crashed) {
                    w.crashed = true;
                    for (auto& n : nodes_) {
                        if (n.index == wi) {
                            n.crashed = true;
                        }
                    }
                    res_.silent_since[wi] = sweeps_ + 1;
                }
                if (w.crashed) {
                    // The file never arrives; wait for the liveness sweep to give up on it.
                    tick();
                    continue;
                }
                const std::string file_id = rollout::storage_key(w.key.public_key(), step, sub);
                const std::string bytes = produce(w, step, sub, version, opts);
                ++cursor;
                if (!cfg_.validate) {
                    collector.add_file(file_id, rollout::parse_file(bytes));
                    continue;
                }
                rollout::RolloutFile parsed;
                const validator::Verdict verdict = validator_->validate(bytes, file_id, &parsed);
                ++res_.files_validated;
                if (verdict.accepted) {
                    orch_.record_contribution(w.key.public_key(), verdict, parsed.records.size());
                    collector.add_file(file_id, parsed);
                } else {
                    ++res_.files_rejected;
                    orch_.slash(w.key.public_key(), verdict);
                    res_.slashes.push_back(SlashRecord{wi, step, verdict.failed_check});
                    sync_allowlist();
                    collector.skip_file();
                    skip.insert(wi);
                }
            }
            trainer::Batch batch = collector.take();
            res_.consumed_log += trainer::consumed_log_lines(batch);
            try {
                for (const auto& row : learner.train_step(batch)) {
                    res_.rows.push_back(row);
                    res_.metrics_csv += trainer::csv_row(row) + "\n";
                    if (on_row) {
                        on_row(row);
                    }
                }
            } catch (const trainer::TrainingHalted& e) {
                res_.halted = true;
                res_.halt_reason = e.what();
                break;
            }
            publish(learner.params(), learner.version());
            res_.allowlists.push_back(orch_.allowlist());
        }
        finish();
        res_.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return std::move(res_);
    }

private:
    static orch::OrchestratorConfig orch_config(const RunConfig& cfg) {
        orch::OrchestratorConfig oc;
        oc.heartbeat_interval = cfg.heartbeat_interval;
        oc.max_missed = cfg.max_missed;
        return oc;
    }

    policy::TrainConfig train_config() const {
        policy::TrainConfig t = cfg_.train;
        t.async_level = cfg_.async_level;
        return t;
    }

    void bring_up() {
        for (int i = 0; i < cfg_.workers; ++i) {
            orch_.create_task(orch::TaskKind::kRolloutWorker, "{}");
        }
        for (int v = 0; v < cfg_.validators; ++v) {
            orch_.create_task(orch::TaskKind::kValidator, "{}");
        }
        for (auto& n : nodes_) {
            orch_.register_node(n.key.public_key(), "sim", "sim-cpu", n.role);
        }
        // register -> invite (sweep) -> accept (heartbeat) -> task (heartbeat)
        for (int i = 0; i < 3; ++i) {
            tick();
        }
    }

    void tick() {
        for (auto& n : nodes_) {
            if (n.crashed) {
                continue;
            }
            orch::HeartbeatRequest hb;
            hb.address = n.key.public_key();
            hb.status = n.has_task ? "busy" : "idle";
            hb.nonce = ++n.nonce;
            const auto r = orch_.heartbeat(hb);
            if (r.refusal != orch::Refusal::kNone) {
                continue;
            }
            if (r.invite && orch::verify_invite(*r.invite, orch_.owner(), n.key.public_key(),
                                                orch_.config().pool_id, orch_.config().domain_id)) {
                orch_.accept_invite(n.key.public_key(), *r.invite);
            }
            if (r.task) {
                n.has_task = true;
            }
        }
        ++sweeps_;
        for (const auto& dead : orch_.sweep()) {
            for (auto& [wi, w] : workers_) {
                if (w.key.public_key() == dead) {
                    res_.dead_workers.push_back(wi);
                    res_.death_sweep[wi] = sweeps_;
                }
            }
        }
        sync_allowlist();
    }

    void sync_allowlist() {
        const auto epoch = orch_.allowlist_epoch();
        if (epoch == pushed_epoch_) {
            return;
        }
        const auto list = orch_.allowlist();
        for (auto& s : stores_) {
            s->set_allowlist(std::set<std::string>(list.begin(), list.end()));
        }
        pushed_epoch_ = epoch;
    }

    void publish(const policy::PolicyParams& params, std::uint64_t version) {
        const Bytes bytes = policy::serialize(params);
        origin_->publish(ByteView(bytes.data(), bytes.size()), version);
        published_.push_back(std::make_shared<const policy::PolicyParams>(params));
        published_digest_.push_back(crypto::sha256(ByteView(bytes.data(), bytes.size())));
        for (const auto& s : stores_) {
            res_.max_versions_held = std::max(res_.max_versions_held, s->max_versions_held());
        }
    }

    std::shared_ptr<const policy::PolicyParams> checkpoint(SimWorker& w, std::uint64_t version,
                                                           std::uint64_t* got_version) {
        auto it = w.cache.find(version);
        if (it != w.cache.end()) {
            *got_version = version;
            return it->second;
        }
        const auto latest = published_.size() - 1;
        shardcast::DownloadReport rep = w.client->download_at_least(version, latest);
        ++res_.downloads;
        res_.corrupt_shards_seen += rep.corrupt_shards;
        const auto digest = crypto::sha256(ByteView(rep.bytes.data(), rep.bytes.size()));
        if (digest != published_digest_.at(rep.version)) {
            ++res_.checkpoint_mismatches;
        }
        auto params = std::make_shared<const policy::PolicyParams>(
            policy::deserialize(ByteView(rep.bytes.data(), rep.bytes.size())));
        w.cache[rep.version] = params;
        while (w.cache.size() > 6) {
            w.cache.erase(w.cache.begin());
        }
        *got_version = rep.version;
        return params;
    }

    std::string produce(SimWorker& w, std::uint64_t step, std::uint64_t sub, std::uint64_t version,
                        const rollout::WorkerOptions& opts) {
        std::uint64_t got = version;
        const auto params = checkpoint(w, version, &got);
        const bool attacking = w.attack && step >= cfg_.attack_from_step &&
                               !(*w.attack == adversarial::Attack::kStaleCheckpoint && got == 0);
        if (!attacking) {
            return rollout::encode_file(
                rollout::generate_file(*params, got, prep_.dataset, w.key.public_key(), step, sub, opts),
                w.key);
        }
        adversarial::AttackInput in;
        in.params = params.get();
        in.version = got;
        std::uint64_t older = 0;
        const auto stale = got > 0 ? checkpoint(w, got - 1, &older) : nullptr;
        in.stale_params = stale.get();
        in.dataset = &prep_.dataset;
        in.key = &w.key;
        in.step = step;
        in.submission_index = sub;
        in.opts = opts;
        in.seed = mix_seed(cfg_.seed, step * 131 + sub);
        res_.adversary_file_ids.push_back(rollout::storage_key(w.key.public_key(), step, sub));
        return adversarial::make_file(*w.attack, in);
    }

    RunResult starve(std::uint64_t step, const std::string& why) {
        res_.liveness_failure = true;
        res_.halt_reason = "liveness failure at step " + std::to_string(step) + ": " + why;
        finish();
        return std::move(res_);
    }

    void finish() {
        res_.ledger = orch_.ledger_events();
        for (auto& [wi, w] : workers_) {
            if (!w.crashed && !w.attack) {
                res_.relay_probabilities = w.client->probabilities();
                break;
            }
        }
    }

    const RunConfig& cfg_;
    const Prepared& prep_;
    orch::Orchestrator orch_;
    crypto::KeyPair trainer_key_;
    std::vector<std::shared_ptr<shardcast::RelayStore>> stores_;
    std::vector<std::shared_ptr<shardcast::RelayEndpoint>> relays_;
    std::unique_ptr<shardcast::Origin> origin_;
    std::map<int, SimWorker> workers_;
    std::vector<SimNode> nodes_;
    std::vector<int> order_;
    std::unique_ptr<validator::Validator> validator_;
    std::vector<std::shared_ptr<const policy::PolicyParams>> published_;
    std::vector<crypto::Digest> published_digest_;
    std::uint64_t pushed_epoch_ = ~std::uint64_t{0};
    std::uint64_t sweeps_ = 0;
    RunResult res_;
};

}  // namespace

std::vector<double> step_rewards(const std::vector<trainer::MetricsRow>& rows) {
    std::vector<double> out;
    for (const auto& r : rows) {
        if (r.micro_step == 0) {
            out.push_back(r.task_reward);
        }
    }
    return out;
}

std::vector<double> step_penalties(const std::vector<trainer::MetricsRow>& rows) {
    std::vector<double> out;
    for (const auto& r : rows) {
        if (r.micro_step == 0) {
            out.push_back(r.length_penalty);
        }
    }
    return out;
}

double RunResult::first_mean(std::size_t n) const {
    const auto v = step_rewards(rows);
    return mean_of(v, 0, std::min(n, v.size()));
}

double RunResult::final_mean(std::size_t n) const {
    const auto v = step_rewards(rows);
    return mean_of(v, v.size() - std::min(n, v.size()), v.size());
}

double RunResult::first_penalty(std::size_t n) const {
    const auto v = step_penalties(rows);
    return mean_of(v, 0, std::min(n, v.size()));
}

double RunResult::final_penalty(std::size_t n) const {
    const auto v = step_penalties(rows);
    return mean_of(v, v.size() - std::min(n, v.size()), v.size());
}

RunResult run_local(const RunConfig& cfg, const Prepared& prepared,
                    const std::function<void(const trainer::MetricsRow&)>& on_row) {
    Cluster cluster(cfg, prepared);
    return cluster.run(on_row);
}

void write_run_dir(const RunConfig& cfg, const RunResult& r) {
    const auto& dir = cfg.out_dir;
    std::filesystem::create_directories(dir);
    auto write = [&](const char* name, const std::string& text) {
        std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
        out << text;
    };
    write("config.ini", to_ini(cfg));
    write("metrics.csv", r.metrics_csv);
    write("consumed.jsonl", r.consumed_log);
    std::string ledger;
    for (const auto& e : r.ledger) {
        ledger += orch::encode_event(e) + "\n";
    }
    write("ledger.jsonl", ledger);
    json s;
    s["steps_completed"] = step_rewards(r.rows).size();
    s["first10_task_reward"] = r.first_mean(10);
    s["final10_task_reward"] = r.final_mean(10);
    s["first20_length_penalty"] = r.first_penalty(20);
    s["final20_length_penalty"] = r.final_penalty(20);
    s["files_validated"] = r.files_validated;
    s["files_rejected"] = r.files_rejected;
    s["halted"] = r.halted;
    s["liveness_failure"] = r.liveness_failure;
    s["reason"] = r.halt_reason;
    s["seconds"] = r.seconds;
    write("summary.json", s.dump(2) + "\n");
    write("reward.svg", svg_plot("mean task reward", {"task reward", "length penalty"},
                                 {step_rewards(r.rows), step_penalties(r.rows)}));
}

AblationResult run_ablation(const RunConfig& base, const std::vector<int>& levels,
                            const Prepared& prepared) {
    AblationResult out;
    out.levels = levels;
    for (int k : levels) {
        RunConfig c = base;
        c.async_level = k;
        c.train.async_level = k;
        out.runs.push_back(run_local(c, prepared));
    }
    out.csv = "step";
    for (int k : levels) {
        out.csv += ",reward_k" + std::to_string(k);
    }
    out.csv += "\n";
    std::vector<std::vector<double>> series;
    for (const auto& r : out.runs) {
        series.push_back(step_rewards(r.rows));
    }
    std::size_t n = 0;
    for (const auto& s : series) {
        n = std::max(n, s.size());
    }
    for (std::size_t i = 0; i < n; ++i) {
        out.csv += std::to_string(i);
        for (const auto& s : series) {
            char buf[40];
            std::snprintf(buf, sizeof buf, "%.17g", i < s.size() ? s[i] : 0.0);
            out.csv += ",";
            out.csv += i < s.size() ? buf : "";
        }
        out.csv += "\n";
    }
    return out;
}

}  // namespace swarm::harness
