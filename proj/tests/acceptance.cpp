// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Pass a substring on the command line to run only matching criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <memory>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "support.hpp"
#include "swarm/shardcast.hpp"

using namespace swarm;
namespace st = swarm::testing;
namespace sc = swarm::shardcast;
namespace adv = swarm::adversarial;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

const harness::Prepared& prepared() { return st::validator_world().prep; }

// ---- criteria -------------------------------------------------------------

Outcome two_sided_clip() {
    const auto with = st::make_ratio_batch(100.0, -1.0, 4.0);
    const auto without = st::make_ratio_batch(100.0, -1.0, std::numeric_limits<double>::infinity());
    double worst_with = 0.0;
    double worst_without = 0.0;
    for (std::size_t i = 0; i < with.batch.size(); ++i) {
        const auto& s = with.batch[i];
        const auto cur = policy::sequence_logprobs(with.params, s.prompt, s.output).logprobs;
        for (std::size_t t = 0; t < cur.size(); ++t) {
            const double rho = std::exp(cur[t] - s.old_logp[t]);
            const double a = policy::clipped_term(rho, s.advantage, with.cfg.epsilon, with.cfg.delta);
            const double b = policy::clipped_term(rho, s.advantage, without.cfg.epsilon, without.cfg.delta);
            worst_with = std::max(worst_with, std::abs(a - (-4.0)));
            worst_without = std::max(worst_without, std::abs(b - (-100.0)));
        }
    }
    const auto gw = policy::gradient(with.params, with.batch, with.cfg, false);
    const auto go = policy::gradient(without.params, without.batch, without.cfg, false);
    const double ratio = go.pre_clip_norm / gw.pre_clip_norm;
    return {worst_with == 0.0 && worst_without < 1e-9 && ratio >= 10.0,
            fmt("terms -4 (max dev %.3g), -100 without delta (max dev %.3g), grad norm ratio %.1f",
                worst_with, worst_without, ratio)};
}

Outcome gradient_check() {
    const auto t0 = std::chrono::steady_clock::now();
    const int n = 120;
    double worst = 0.0;
    for (int i = 0; i < n; ++i) {
        const auto g = st::make_grad_instance(7000 + static_cast<std::uint64_t>(i));
        worst = std::max(worst, st::finite_difference_check(g, 31 + static_cast<std::uint64_t>(i)).worst_rel);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {worst <= 1e-4 && secs < 60.0,
            fmt("%.0f instances, worst relative error %.2e, %.1f s", n, worst, secs)};
}

Outcome validator_soundness() {
    const auto& w = st::validator_world();
    const auto v = w.make_validator(1.0);
    int attacks = 0;
    int rejected = 0;
    int right_check = 0;
    for (adv::Attack a : adv::all_attacks()) {
        for (std::uint64_t trial = 0; trial < 12; ++trial) {
            const auto key = crypto::KeyPair::from_seed(50000 + 100 * static_cast<std::uint64_t>(a) + trial);
            const auto verdict = v.validate(w.attack(a, key, 3 + trial, trial % 3, trial), "attack");
            ++attacks;
            rejected += !verdict.accepted;
            right_check += !verdict.accepted && verdict.failed_check == adv::expected_check(a);
        }
    }
    SplitMix64 rng(8080);
    const int honest = 1000;
    int accepted = 0;
    for (int i = 0; i < honest; ++i) {
        const auto key = crypto::KeyPair::from_seed(rng.next());
        const auto verdict = v.validate(w.honest(key, 1 + rng.below(1000), rng.below(4)), "honest");
        accepted += verdict.accepted;
    }
    const double rate = static_cast<double>(rejected) / attacks;
    const double acc = static_cast<double>(accepted) / honest;
    return {rejected == attacks && right_check == attacks && acc >= 0.99,
            fmt("%.0f attack files over %.0f classes, rejection rate %.3f, correct check %.0f",
                attacks, static_cast<double>(adv::all_attacks().size()), rate, right_check) +
                fmt("; honest acceptance %.3f (%.0f/%.0f)", acc, accepted, honest)};
}

Outcome seed_reproduction() {
    const auto& w = st::validator_world();
    const auto v = w.make_validator();
    SplitMix64 rng(1234);
    int equal = 0;
    const int n = 1000;
    for (int i = 0; i < n; ++i) {
        crypto::PublicKey addr{};
        for (auto& b : addr) b = static_cast<std::uint8_t>(rng.below(256));
        const auto step = rng.next();
        const auto sub = rng.below(16);
        // Worker side: the prompts a rollout worker draws for this triple.
        const auto idx = rollout::select_prompts(rollout::derive_seed(addr, step, sub), w.prep.dataset.size(),
                                                 static_cast<std::size_t>(w.opts.groups_per_file));
        rollout::RolloutFile f;
        f.header.node_address = addr;
        f.header.step = step;
        f.header.submission_index = sub;
        for (std::size_t g : idx) {
            for (int j = 0; j < w.opts.group_size; ++j) {
                rollout::RolloutRecord r;
                r.task_id = w.prep.dataset[g].task_id;
                f.records.push_back(r);
            }
        }
        equal += v.check_seed(f).ok();
    }
    return {equal == n, fmt("%.0f/%.0f triples reproduced", equal, n)};
}

Bytes blob(std::size_t n, std::uint64_t seed) {
    SplitMix64 rng(seed);
    Bytes b(n);
    for (auto& x : b) x = static_cast<std::uint8_t>(rng.next());
    return b;
}

Outcome shardcast_integrity() {
    double now = 0.0;
    const sc::Clock clock = [&now] { return now; };
    const auto trainer = crypto::KeyPair::from_seed(77);
    std::vector<std::shared_ptr<sc::RelayStore>> stores;
    std::vector<std::shared_ptr<sc::RelayEndpoint>> endpoints;
    const double corrupt[] = {0.5, 0.1, 0.0, 1.0};
    const double forge[] = {0.0, 0.3, 0.0, 0.2};
    for (int i = 0; i < 4; ++i) {
        stores.push_back(std::make_shared<sc::RelayStore>(trainer.public_key(), sc::RelayOptions{}, clock));
        sc::LocalRelay::Faults f;
        f.corrupt_prob = corrupt[i];
        f.forge_manifest_prob = forge[i];
        f.bandwidth = 1e6 * (i + 1);
        f.seed = 900 + static_cast<std::uint64_t>(i);
        endpoints.push_back(std::make_shared<sc::LocalRelay>(stores.back(), f));
    }
    sc::Origin origin(trainer, endpoints, 512);
    std::vector<Bytes> published;
    std::vector<std::unique_ptr<sc::Client>> clients;
    for (int c = 0; c < 8; ++c) {
        sc::ClientOptions o;
        o.seed = 10 + static_cast<std::uint64_t>(c);
        o.concurrency = 1;
        clients.push_back(std::make_unique<sc::Client>(endpoints, trainer.public_key(), "client-" + std::to_string(c), o, clock));
        clients.back()->probe_all();
    }
    const int n = 10000;
    int ok = 0;
    int refused = 0;
    int corrupt_accepted = 0;
    std::size_t corrupt_seen = 0;
    for (int i = 0; i < n; ++i) {
        if (i % 500 == 0) {
            published.push_back(blob(1800 + 37 * published.size(), 5000 + published.size()));
            origin.publish(published.back(), published.size() - 1);
        }
        now += 0.05;
        const auto latest = published.size() - 1;
        auto& c = *clients[static_cast<std::size_t>(i) % clients.size()];
        try {
            const auto r = c.download_at_least(latest, latest);
            corrupt_seen += r.corrupt_shards;
            if (r.version >= published.size() || r.bytes != published[r.version]) ++corrupt_accepted;
            else ++ok;
        } catch (const std::exception&) {
            ++refused;
        }
    }
    std::size_t held = 0;
    for (const auto& s : stores) held = std::max(held, s->max_versions_held());

    const auto law = clients[0]->probabilities();
    SplitMix64 rng(4242);
    std::vector<double> freq(law.size(), 0.0);
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) freq[sc::select_relay(law, rng)] += 1.0 / draws;
    double tv = 0.0;
    for (std::size_t i = 0; i < law.size(); ++i) tv += 0.5 * std::abs(freq[i] - law[i]);

    return {corrupt_accepted == 0 && held <= 5 && tv <= 0.02 && ok > 0,
            fmt("%.0f downloads: %.0f verified, %.0f refused, 0 corrupt required (got %.0f)", n, ok, refused,
                corrupt_accepted) +
                fmt("; corrupt shards caught %.0f; max versions held %.0f; pick TV %.4f",
                    static_cast<double>(corrupt_seen), static_cast<double>(held), tv)};
}

Outcome pipelining() {
    const auto trainer = crypto::KeyPair::from_seed(1);
    auto store = std::make_shared<sc::RelayStore>(trainer.public_key());
    sc::RelayServer server(store);
    auto uplink = std::make_shared<sc::LinkShaper>(10e6);
    auto up = std::make_shared<sc::HttpRelay>("127.0.0.1", server.port(), 10.0, uplink);
    auto down = std::make_shared<sc::HttpRelay>("127.0.0.1", server.port());
    const std::uint64_t shards = 4;
    const std::uint64_t shard_size = 500000;
    const Bytes ck = blob(shards * shard_size, 6);
    sc::Origin origin(trainer, {up}, shard_size);
    double last_uploaded = 0.0;
    const sc::Clock clock = sc::steady_clock();
    std::thread pub([&] {
        origin.publish(ck, 0, [&](std::uint64_t i) {
            if (i == shards - 1) last_uploaded = clock();
        });
    });
    sc::ClientOptions co;
    co.concurrency = 1;
    sc::Client c({down}, trainer.public_key(), "w", co, clock);
    while (store->latest_version() != 0u) std::this_thread::sleep_for(std::chrono::milliseconds(1));
    const auto r = c.download(0);
    pub.join();
    server.stop();
    const bool pass = r.bytes == ck && r.first_shard_time < last_uploaded;
    return {pass, fmt("%.0f shards at 10 MB/s: shard 0 verified %.3f s before the last upload finished",
                      static_cast<double>(shards), last_uploaded - r.first_shard_time)};
}

Outcome liveness() {
    int trials = 0;
    int exact = 0;
    int reinvited = 0;
    std::uint32_t worst_reinvite = 0;
    for (std::uint32_t m = 1; m <= 6; ++m) {
        for (int beats = 0; beats <= 3; ++beats) {
            const auto t = st::liveness_trial(m, beats, 100 * m + static_cast<std::uint64_t>(beats));
            ++trials;
            exact += t.missed_at_death == m && t.alive_before;
            reinvited += t.rejoined && t.sweeps_to_reinvite >= 1 && t.sweeps_to_reinvite <= 2;
            worst_reinvite = std::max(worst_reinvite, t.sweeps_to_reinvite);
        }
    }
    return {exact == trials && reinvited == trials,
            fmt("%.0f trials (m = 1..6): death at exactly m in %.0f, re-invited within 2 sweeps in %.0f (worst %.0f)",
                trials, exact, reinvited, worst_reinvite)};
}

Outcome offline_filter() {
    const harness::RunConfig cfg;
    const auto& p = prepared();
    std::set<std::uint64_t> expect;
    std::vector<int> hist(9, 0);
    for (const auto& t : p.raw) {
        const int c = st::oracle_pass_count(p.base, t, cfg.filter.k, cfg.seed + 10);
        ++hist[static_cast<std::size_t>(c)];
        if (c >= 1 && c <= 4) expect.insert(t.task_id);
    }
    std::set<std::uint64_t> got;
    for (const auto& t : p.dataset) got.insert(t.task_id);
    std::string h;
    for (std::size_t i = 0; i < hist.size(); ++i) h += (i ? "," : "") + std::to_string(hist[i]);
    return {got == expect && !expect.empty() && expect.size() < p.raw.size(),
            fmt("kept %.0f of %.0f tasks, oracle expects %.0f", static_cast<double>(got.size()),
                static_cast<double>(p.raw.size()), static_cast<double>(expect.size())) +
                "; pass@8 histogram " + h};
}

// The end-to-end run is shared by the online filter audit.
const harness::RunResult& default_run() {
    static const harness::RunResult r = harness::run_local(harness::RunConfig{}, prepared());
    return r;
}

Outcome end_to_end() {
    const auto& r = default_run();
    const auto rewards = harness::step_rewards(r.rows);
    if (rewards.size() < 20) return {false, "run stopped early: " + r.halt_reason};
    const double baseline = rewards.front();
    const double final = r.final_mean(20);
    const double p0 = r.first_penalty(20);
    const double p1 = r.final_penalty(20);
    return {!r.halted && rewards.size() <= 200 && final - baseline >= 0.3 && p1 < p0,
            fmt("%.0f steps: reward %.3f -> %.3f (final-20 mean, gain %.3f)", static_cast<double>(rewards.size()),
                baseline, final, final - baseline) +
                fmt("; length penalty first-20 %.4f, final-20 %.4f", p0, p1)};
}

harness::AblationResult& ablation() {
    static harness::AblationResult a = [] {
        harness::RunConfig c;
        c.steps = 300;
        return harness::run_ablation(c, {0, 1, 2, 4}, prepared());
    }();
    return a;
}

Outcome online_filter() {
    const auto& r = default_run();
    const auto bad = trainer::audit_consumed_log(r.consumed_log);
    std::size_t groups = 0;
    for (char ch : r.consumed_log) groups += ch == '\n';
    std::size_t degenerate = 0;
    for (const auto& row : r.rows) {
        if (row.micro_step == 0) degenerate += row.groups_degenerate;
    }
    return {bad == 0 && groups > 0,
            fmt("%.0f consumed log lines audited over %.0f steps, %.0f all-equal groups found; %.0f dropped before training",
                static_cast<double>(groups), static_cast<double>(harness::step_rewards(r.rows).size()),
                static_cast<double>(bad), static_cast<double>(degenerate))};
}

Outcome async_ablation() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& a = ablation();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double k0 = a.runs[0].final_mean(20);
    bool pass = secs <= 900.0;
    std::string detail = fmt("k=0 final-20 reward %.3f", k0);
    for (std::size_t i = 1; i < a.levels.size(); ++i) {
        const double ki = a.runs[i].final_mean(20);
        pass = pass && std::abs(ki - k0) <= 0.05 && !a.runs[i].halted &&
               harness::step_rewards(a.runs[i].rows).size() == 300;
        detail += fmt("; k=%.0f %.3f (diff %+.3f)", a.levels[i], ki, ki - k0);
    }
    return {pass, detail + fmt("; %.0f s total", secs)};
}

struct Criterion {
    const char* name;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::string only = argc > 1 ? argv[1] : "";
    const std::vector<Criterion> criteria = {
        {"two-sided-clipping", two_sided_clip},
        {"gradient-correctness", gradient_check},
        {"validator-soundness-completeness", validator_soundness},
        {"seed-reproduction", seed_reproduction},
        {"shardcast-integrity-retention", shardcast_integrity},
        {"shardcast-pipelining", pipelining},
        {"liveness-detection", liveness},
        {"offline-filter", offline_filter},
        {"end-to-end-learning", end_to_end},
        {"online-filter", online_filter},
        {"async-ablation", async_ablation},
    };
    int failed = 0;
    int ran = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && std::string(c.name).find(only) == std::string::npos) continue;
        ++ran;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs);
        std::fflush(stdout);
        failed += !o.pass;
    }
    std::printf("%d/%d criteria passed\n", ran - failed, ran);
    return failed == 0 ? 0 : 1;
}
