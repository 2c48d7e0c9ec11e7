// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <httplib.h>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "swarm/event_stream.hpp"
#include "swarm/ledger.hpp"
#include "swarm/orchestrator.hpp"

using namespace swarm;
using namespace swarm::orchestrator;
using nlohmann::json;
namespace st = swarm::testing;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    const auto d = std::filesystem::temp_directory_path() / ("swarm_orch_" + name);
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

validator::Verdict reject_verdict(const std::string& file_id) {
    validator::Verdict v;
    v.file_id = file_id;
    v.failed_check = validator::Check::kSeed;
    v.details = "prompt 0 not seed-selected";
    return v;
}

/// Joins `key` to `orch` as an active member of `role`.
void make_active(Orchestrator& orch, const crypto::KeyPair& key, TaskKind role, std::uint64_t& nonce) {
    REQUIRE(orch.register_node(key.public_key(), "e", "cpu", role) == Refusal::kNone);
    orch.sweep();
    HeartbeatRequest hb;
    hb.address = key.public_key();
    hb.nonce = ++nonce;
    const auto r = orch.heartbeat(hb);
    REQUIRE(r.invite);
    REQUIRE(orch.accept_invite(key.public_key(), *r.invite) == Refusal::kNone);
}

}  // namespace

// ---- ledger ---------------------------------------------------------------------

TEST_CASE("ledger chain: hashes, signatures and tamper detection") {
    Ledger l;
    const auto k = crypto::KeyPair::from_seed(1);
    l.append(EventKind::kRegister, R"({"address":"aa"})", k);
    l.append(EventKind::kContribution, R"({"records":16})", k);
    l.append(EventKind::kSlash, R"({"failed_check":"seed"})", k);
    const auto& ev = l.events();
    REQUIRE(ev.size() == 3);
    CHECK(ev[0].prev_hash == crypto::Digest{});
    // Oracle: this_hash = SHA-256(prev || canonical) with canonical keys ascending.
    for (std::size_t i = 0; i < ev.size(); ++i) {
        CHECK(ev[i].seq == i);
        if (i > 0) CHECK(ev[i].prev_hash == ev[i - 1].this_hash);
        std::string canon = canonical_event(ev[i]);
        CHECK(canon.rfind("{\"kind\":", 0) == 0);
        Bytes msg(ev[i].prev_hash.begin(), ev[i].prev_hash.end());
        msg.insert(msg.end(), canon.begin(), canon.end());
        CHECK(ev[i].this_hash == crypto::sha256(msg));
        CHECK(crypto::verify(k.public_key(), ByteView(ev[i].this_hash.data(), 32), ev[i].signature));
    }
    CHECK(canonical_event(ev[1]) ==
          R"({"kind":"contribution","payload":{"records":16},"seq":1,"signer":")" + k.address_hex() + "\"}");
    CHECK_FALSE(ledger_verify(ev).has_value());
    const auto parsed = Ledger::parse(l.dump());
    CHECK(parsed == ev);

    SUBCASE("payload edit") {
        auto t = ev;
        t[1].payload = R"({"records":17})";
        CHECK(ledger_verify(t) == 1u);
    }
    SUBCASE("dropped event") {
        auto t = ev;
        t.erase(t.begin() + 1);
        CHECK(ledger_verify(t) == 1u);
    }
    SUBCASE("re-hashed but unsigned edit") {
        auto t = ev;
        t[2].payload = R"({"failed_check":"none"})";
        t[2].this_hash = event_hash(t[2].prev_hash, t[2]);
        CHECK(ledger_verify(t) == 2u);
    }
    SUBCASE("reordered") {
        auto t = ev;
        std::swap(t[0], t[1]);
        CHECK(ledger_verify(t) == 0u);
    }
}

TEST_CASE("ledger writes through to a file") {
    const auto d = temp_dir("ledger");
    {
        Ledger l(d / "ledger.jsonl");
        const auto k = crypto::KeyPair::from_seed(2);
        for (int i = 0; i < 5; ++i) l.append(EventKind::kRegister, R"({"i":)" + std::to_string(i) + "}", k);
    }
    const auto ev = Ledger::load(d / "ledger.jsonl");
    CHECK(ev.size() == 5);
    CHECK_FALSE(ledger_verify(ev).has_value());
    CHECK(event_kind_from_name(event_kind_name(EventKind::kInviteAccept)) == EventKind::kInviteAccept);
    CHECK_THROWS_AS(decode_event("{}"), InvalidInput);
    std::filesystem::remove_all(d);
}

// ---- envelopes and invites -----------------------------------------------------------

TEST_CASE("signed envelopes") {
    const auto k = crypto::KeyPair::from_seed(3);
    json p;
    p["address"] = k.address_hex();
    p["x"] = 1;
    const auto env = seal(p.dump(), k);
    const auto o = open(env);
    CHECK(o.signer == k.public_key());
    CHECK(json::parse(o.payload) == p);
    auto j = json::parse(env);
    j["payload"]["x"] = 2;
    CHECK_THROWS_AS(open(j.dump()), InvalidInput);
    // Claiming another address fails.
    json q;
    q["address"] = crypto::KeyPair::from_seed(4).address_hex();
    CHECK_THROWS_AS(open(seal(q.dump(), k)), InvalidInput);
    CHECK_THROWS_AS(open("[]"), InvalidInput);
}

TEST_CASE("invites name the node and pool and carry the owner signature") {
    const auto owner = crypto::KeyPair::from_seed(10);
    const auto node = crypto::KeyPair::from_seed(11);
    const auto inv = make_invite(node.public_key(), "pool-0", "toy", owner);
    CHECK(verify_invite(inv, owner.public_key(), node.public_key(), "pool-0", "toy"));
    CHECK_FALSE(verify_invite(inv, owner.public_key(), node.public_key(), "pool-1", "toy"));
    CHECK_FALSE(verify_invite(inv, owner.public_key(), owner.public_key(), "pool-0", "toy"));
    CHECK_FALSE(verify_invite(inv, node.public_key(), node.public_key(), "pool-0", "toy"));
    CHECK(decode_invite(encode_invite(inv)) == inv);
    auto forged = inv;
    forged.domain_id = "other";
    CHECK_FALSE(verify_invite(forged, owner.public_key(), node.public_key(), "pool-0", "other"));
}

// ---- state machine -------------------------------------------------------------------

TEST_CASE("join flow: discovered, invited, active") {
    Orchestrator orch({}, crypto::KeyPair::from_seed(20));
    const auto k = crypto::KeyPair::from_seed(21);
    CHECK(orch.register_node(k.public_key(), "e", "cpu", TaskKind::kRolloutWorker) == Refusal::kNone);
    CHECK(orch.node(k.public_key())->state == NodeState::kDiscovered);
    HeartbeatRequest hb;
    hb.address = k.public_key();
    hb.nonce = 1;
    CHECK_FALSE(orch.heartbeat(hb).invite);  // no invite before a sweep
    orch.sweep();
    CHECK(orch.node(k.public_key())->state == NodeState::kInvited);
    hb.nonce = 2;
    const auto r = orch.heartbeat(hb);
    REQUIRE(r.invite);
    CHECK(verify_invite(*r.invite, orch.owner(), k.public_key(), "pool-0", "toy-arith"));
    auto wrong = *r.invite;
    wrong.pool_id = "x";
    CHECK(orch.accept_invite(k.public_key(), wrong) == Refusal::kBadRequest);
    CHECK(orch.accept_invite(k.public_key(), *r.invite) == Refusal::kNone);
    CHECK(orch.node(k.public_key())->state == NodeState::kActive);
    CHECK(orch.allowlist() == std::vector<std::string>{k.address_hex()});
    const auto ev = orch.ledger_events();
    REQUIRE(ev.size() == 2);
    CHECK(ev[0].kind == EventKind::kRegister);
    CHECK(ev[1].kind == EventKind::kInviteAccept);
}

TEST_CASE("heartbeat nonces must increase") {
    Orchestrator orch({}, crypto::KeyPair::from_seed(22));
    const auto k = crypto::KeyPair::from_seed(23);
    std::uint64_t nonce = 0;
    make_active(orch, k, TaskKind::kRolloutWorker, nonce);
    HeartbeatRequest hb;
    hb.address = k.public_key();
    hb.nonce = nonce;
    CHECK(orch.heartbeat(hb).refusal == Refusal::kBadRequest);
    hb.nonce = nonce + 1;
    CHECK(orch.heartbeat(hb).refusal == Refusal::kNone);
    HeartbeatRequest stranger;
    stranger.address = crypto::KeyPair::from_seed(99).public_key();
    stranger.nonce = 1;
    CHECK(orch.heartbeat(stranger).refusal == Refusal::kUnknown);
}

TEST_CASE("liveness: death after exactly m silent sweeps, re-invite within two") {
    for (std::uint32_t m = 1; m <= 6; ++m) {
        for (int beats = 0; beats < 4; ++beats) {
            const auto t = st::liveness_trial(m, beats, 100 + m * 10 + static_cast<std::uint64_t>(beats));
            CAPTURE(m);
            CAPTURE(beats);
            CHECK(t.missed_at_death == m);
            CHECK(t.alive_before);
            CHECK(t.sweeps_to_reinvite >= 1);
            CHECK(t.sweeps_to_reinvite <= 2);
            CHECK(t.rejoined);
        }
    }
}

TEST_CASE("a heartbeat resets the miss counter") {
    OrchestratorConfig cfg;
    cfg.max_missed = 3;
    Orchestrator orch(cfg, crypto::KeyPair::from_seed(30));
    const auto k = crypto::KeyPair::from_seed(31);
    std::uint64_t nonce = 0;
    make_active(orch, k, TaskKind::kRolloutWorker, nonce);
    orch.sweep();
    orch.sweep();
    orch.sweep();
    CHECK(orch.node(k.public_key())->missed_heartbeats == 2);
    HeartbeatRequest hb;
    hb.address = k.public_key();
    hb.nonce = ++nonce;
    orch.heartbeat(hb);
    CHECK(orch.node(k.public_key())->missed_heartbeats == 0);
    orch.sweep();
    orch.sweep();
    orch.sweep();
    CHECK(orch.node(k.public_key())->state == NodeState::kActive);
    CHECK(orch.sweep().size() == 1);
    CHECK(orch.node(k.public_key())->state == NodeState::kDead);
    hb.nonce = ++nonce;
    CHECK(orch.heartbeat(hb).refusal == Refusal::kUnknown);
    CHECK(orch.allowlist().empty());
}

TEST_CASE("pull scheduling, task completion and reassignment on death") {
    OrchestratorConfig cfg;
    cfg.max_missed = 2;
    Orchestrator orch(cfg, crypto::KeyPair::from_seed(40));
    const auto w = crypto::KeyPair::from_seed(41);
    const auto v = crypto::KeyPair::from_seed(42);
    std::uint64_t nw = 0;
    std::uint64_t nv = 0;
    make_active(orch, w, TaskKind::kRolloutWorker, nw);
    make_active(orch, v, TaskKind::kValidator, nv);
    const auto t0 = orch.create_task(TaskKind::kRolloutWorker, "a");
    const auto t1 = orch.create_task(TaskKind::kValidator, "b");
    HeartbeatRequest hb;
    hb.address = w.public_key();
    hb.nonce = ++nw;
    hb.status = "busy";
    CHECK_FALSE(orch.heartbeat(hb).task);  // busy nodes get nothing
    hb.status = "idle";
    hb.nonce = ++nw;
    auto r = orch.heartbeat(hb);
    REQUIRE(r.task);
    CHECK(r.task->id == t0);
    CHECK(r.task->assigned == w.public_key());
    HeartbeatRequest hv;
    hv.address = v.public_key();
    hv.nonce = ++nv;
    r = orch.heartbeat(hv);
    REQUIRE(r.task);
    CHECK(r.task->id == t1);
    hv.nonce = ++nv;
    hv.task_done = t1;
    orch.heartbeat(hv);
    for (const auto& t : orch.tasks()) {
        if (t.id == t1) CHECK(t.status == TaskStatus::kDone);
        if (t.id == t0) CHECK(t.status == TaskStatus::kRunning);
    }
    // The worker dies; its task returns to the pool.
    for (int i = 0; i < 3; ++i) {
        hv.task_done.reset();
        hv.nonce = ++nv;
        orch.heartbeat(hv);
        orch.sweep();
    }
    CHECK(orch.node(w.public_key())->state == NodeState::kDead);
    for (const auto& t : orch.tasks()) {
        if (t.id == t0) {
            CHECK(t.status == TaskStatus::kPending);
            CHECK_FALSE(t.assigned);
        }
    }
}

TEST_CASE("restart requests are delivered once") {
    Orchestrator orch({}, crypto::KeyPair::from_seed(50));
    const auto k = crypto::KeyPair::from_seed(51);
    std::uint64_t n = 0;
    CHECK_FALSE(orch.request_restart(k.public_key()));
    make_active(orch, k, TaskKind::kRolloutWorker, n);
    CHECK(orch.request_restart(k.public_key()));
    HeartbeatRequest hb;
    hb.address = k.public_key();
    hb.nonce = ++n;
    CHECK(orch.heartbeat(hb).restart);
    hb.nonce = ++n;
    CHECK_FALSE(orch.heartbeat(hb).restart);
}

TEST_CASE("slashing is final and recorded") {
    Orchestrator orch({}, crypto::KeyPair::from_seed(60));
    const auto k = crypto::KeyPair::from_seed(61);
    std::uint64_t n = 0;
    make_active(orch, k, TaskKind::kRolloutWorker, n);
    validator::Verdict ok;
    ok.file_id = "f0";
    ok.accepted = true;
    orch.record_contribution(k.public_key(), ok, 16);
    orch.slash(k.public_key(), reject_verdict("f1"));
    orch.slash(k.public_key(), reject_verdict("f2"));  // idempotent
    CHECK(orch.node(k.public_key())->state == NodeState::kSlashed);
    CHECK(orch.register_node(k.public_key(), "e", "cpu", TaskKind::kRolloutWorker) == Refusal::kSlashed);
    HeartbeatRequest hb;
    hb.address = k.public_key();
    hb.nonce = ++n;
    CHECK(orch.heartbeat(hb).refusal == Refusal::kSlashed);
    CHECK(orch.allowlist().empty());
    for (int i = 0; i < 10; ++i) orch.sweep();
    CHECK(orch.node(k.public_key())->state == NodeState::kSlashed);
    const auto ev = orch.ledger_events();
    REQUIRE(ev.size() == 4);
    CHECK(ev[2].kind == EventKind::kContribution);
    CHECK(ev[3].kind == EventKind::kSlash);
    CHECK(json::parse(ev[3].payload).at("failed_check") == "seed");
    CHECK_FALSE(ledger_verify(ev).has_value());
}

TEST_CASE("heartbeat payload and response codecs") {
    HeartbeatRequest hb;
    hb.address = crypto::KeyPair::from_seed(1).public_key();
    hb.logs = {"a", "b"};
    hb.nonce = 9;
    hb.task_done = 4;
    const auto back = decode_heartbeat_payload(encode_heartbeat_payload(hb));
    CHECK(back.address == hb.address);
    CHECK(back.logs == hb.logs);
    CHECK(back.nonce == 9);
    CHECK(back.task_done == 4u);
    HeartbeatResponse r;
    r.state = NodeState::kActive;
    r.restart = true;
    const auto rb = decode_heartbeat_response(encode_heartbeat_response(r));
    CHECK(rb.state == NodeState::kActive);
    CHECK(rb.restart);
    CHECK_FALSE(rb.task);
    for (auto s : {NodeState::kDiscovered, NodeState::kInvited, NodeState::kActive, NodeState::kDead,
                   NodeState::kSlashed}) {
        CHECK(node_state_from_name(node_state_name(s)) == s);
    }
}

// ---- rollout storage -------------------------------------------------------------------

TEST_CASE("storage keys") {
    const auto k = crypto::KeyPair::from_seed(5);
    const auto key = rollout::storage_key(k.public_key(), 7, 1);
    const auto p = parse_storage_key(key);
    REQUIRE(p);
    CHECK(p->step == 7);
    CHECK(p->address == k.public_key());
    CHECK(p->submission_index == 1);
    CHECK_FALSE(parse_storage_key("step-7/xyz-1.rollout"));
    CHECK_FALSE(parse_storage_key("../" + key));
}

TEST_CASE("rollout store leases and finalisation") {
    const auto d = temp_dir("store");
    RolloutStore s(d, 10.0);
    const auto w = crypto::KeyPair::from_seed(1).public_key();
    const auto v1 = crypto::KeyPair::from_seed(2).public_key();
    const auto v2 = crypto::KeyPair::from_seed(3).public_key();
    const auto k0 = rollout::storage_key(w, 1, 0);
    const auto k1 = rollout::storage_key(w, 1, 1);
    CHECK(s.put(k1, "one"));
    CHECK(s.put(k0, "zero"));
    CHECK_FALSE(s.put(k0, "again"));
    CHECK_THROWS_AS(s.put("bad", "x"), InvalidInput);
    // Claims come in upload order.
    auto c = s.claim(v1, 0.0);
    REQUIRE(c);
    CHECK(c->key == k1);
    CHECK(c->bytes == "one");
    auto c2 = s.claim(v2, 0.0);
    REQUIRE(c2);
    CHECK(c2->key == k0);
    CHECK_FALSE(s.claim(v2, 5.0));
    // Expired leases can be re-claimed; the old holder can no longer finalise.
    auto c3 = s.claim(v2, 11.0);
    REQUIRE(c3);
    CHECK(c3->key == k1);
    CHECK_FALSE(s.finalize(k1, v1, true));
    CHECK(s.finalize(k1, v2, true));
    CHECK(s.finalize(k0, v2, false));
    CHECK(s.status(k1) == FileStatus::kAccepted);
    CHECK(s.status(k0) == FileStatus::kRejected);
    CHECK(s.read_accepted(k1) == std::optional<std::string>("one"));
    CHECK_FALSE(s.read_accepted(k0));
    CHECK(std::filesystem::exists(d / "accepted" / k1));
    CHECK(std::filesystem::exists(d / "rejected" / k0));
    const auto listing = s.list_step(1);
    CHECK(listing.size() == 2);
    CHECK(s.list_step(10).empty());
    std::filesystem::remove_all(d);
}

// ---- event stream ----------------------------------------------------------------------

TEST_CASE("event stream reads block until data or timeout") {
    EventStream es;
    CHECK(es.publish("a") == 0);
    CHECK(es.publish("b") == 1);
    CHECK(es.read_from(1, std::chrono::milliseconds(0)) == std::vector<std::string>{"b"});
    std::thread t([&] {
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
        es.publish("c");
    });
    CHECK(es.read_from(2, std::chrono::milliseconds(2000)) == std::vector<std::string>{"c"});
    t.join();
    CHECK(es.read_from(3, std::chrono::milliseconds(10)).empty());
    es.close();
    CHECK(es.closed());
}

// ---- HTTP surface ----------------------------------------------------------------------

TEST_CASE("orchestrator HTTP surface") {
    const auto d = temp_dir("http");
    OrchestratorConfig cfg;
    cfg.heartbeat_interval = 0.05;
    cfg.max_missed = 3;
    Orchestrator orch(cfg, crypto::KeyPair::from_seed(70));
    RolloutStore store(d / "rollouts");
    ServerOptions so;
    so.run_sweeper = false;
    OrchestratorServer server(orch, store, so);
    httplib::Client http("127.0.0.1", server.port());
    http.set_read_timeout(std::chrono::seconds(5));

    const auto wk = crypto::KeyPair::from_seed(71);
    const auto vk = crypto::KeyPair::from_seed(72);
    NodeClient worker("127.0.0.1", server.port(), wk);
    NodeClient val("127.0.0.1", server.port(), vk);
    CHECK(worker.register_node("w", "cpu", TaskKind::kRolloutWorker) == 200);
    CHECK(val.register_node("v", "cpu", TaskKind::kValidator) == 200);
    orch.sweep();
    for (auto* c : {&worker, &val}) {
        const auto r = c->heartbeat({});
        REQUIRE(r);
        REQUIRE(r->invite);
        CHECK(c->accept_invite(*r->invite) == 200);
    }

    SUBCASE("GET /nodes") {
        auto res = http.Get("/nodes");
        REQUIRE(res);
        CHECK(res->status == 200);
        const auto arr = json::parse(res->body);
        REQUIRE(arr.size() == 2);
        for (const auto& n : arr) {
            CHECK(n.at("state") == "active");
            CHECK(n.contains("missed_heartbeats"));
            CHECK(n.contains("current_task"));
            CHECK(n.contains("hardware"));
            CHECK(n.contains("last_status"));
        }
        const auto rows = worker.list_nodes();
        REQUIRE(rows);
        CHECK(rows->size() == 2);
    }

    SUBCASE("POST /tasks then assignment on the next heartbeat") {
        auto res = http.Post("/tasks", R"({"config":"steps=5","kind":"rollout-worker"})", "application/json");
        REQUIRE(res);
        CHECK(res->status == 200);
        const auto t = json::parse(res->body);
        CHECK(t.at("status") == "pending");
        CHECK(t.at("assigned").is_null());
        const auto r = worker.heartbeat({});
        REQUIRE(r);
        REQUIRE(r->task);
        CHECK(r->task->id == t.at("id").get<std::uint64_t>());
        CHECK(r->task->config == "steps=5");
        const auto listed = json::parse(http.Get("/tasks")->body);
        CHECK(listed.at(0).at("status") == "running");
        CHECK(http.Post("/tasks", R"({"kind":"miner"})", "application/json")->status == 400);
    }

    SUBCASE("POST /nodes/{id}/restart") {
        auto res = http.Post("/nodes/" + wk.address_hex() + "/restart", "", "application/json");
        REQUIRE(res);
        CHECK(res->status == 200);
        const auto r = worker.heartbeat({});
        REQUIRE(r);
        CHECK(r->restart);
        const auto unknown = crypto::KeyPair::from_seed(1000).address_hex();
        CHECK(http.Post("/nodes/" + unknown + "/restart", "", "application/json")->status == 404);
    }

    SUBCASE("GET /events streams node, task and verdict events") {
        orch.create_task(TaskKind::kValidator, "x");
        std::string body;
        auto res = http.Get("/events?from=0", [&](const char* data, std::size_t n) {
            body.append(data, n);
            return body.find("\"type\":\"task\"") == std::string::npos;
        });
        CHECK(body.rfind("id: 0\ndata: {", 0) == 0);
        CHECK(body.find("\"type\":\"node\"") != std::string::npos);
        CHECK(body.find("\"type\":\"task\"") != std::string::npos);
    }

    SUBCASE("upload, claim, verdict and slash over HTTP") {
        const auto key = rollout::storage_key(wk.public_key(), 0, 0);
        CHECK(worker.put_rollout(key, "header\nrecord\n") == 201);
        CHECK(worker.put_rollout(key, "header\nrecord\n") == 409);
        // Somebody else's key is refused.
        const auto other = rollout::storage_key(vk.public_key(), 0, 0);
        CHECK(worker.put_rollout(other, "x\n") == 403);
        auto c = val.claim();
        REQUIRE(c);
        CHECK(c->key == key);
        CHECK_FALSE(val.claim());
        CHECK(worker.list_step(0).at(key) == FileStatus::kClaimed);
        validator::Verdict v;
        v.file_id = key;
        v.accepted = true;
        CHECK(val.post_verdict(v) == 200);
        CHECK(worker.fetch_accepted(key) == std::optional<std::string>("header\nrecord\n"));
        const auto key2 = rollout::storage_key(wk.public_key(), 0, 1);
        CHECK(worker.put_rollout(key2, "bad\n") == 201);
        c = val.claim();
        REQUIRE(c);
        CHECK(val.post_verdict(reject_verdict(key2)) == 200);
        CHECK(orch.node(wk.public_key())->state == NodeState::kSlashed);
        int status = 0;
        CHECK_FALSE(worker.heartbeat({}, &status));
        CHECK(status == 403);
        // Workers cannot claim or post verdicts.
        CHECK_FALSE(worker.claim());
        const auto ledger = http.Get("/ledger");
        REQUIRE(ledger);
        const auto ev = Ledger::parse(ledger->body);
        CHECK_FALSE(ledger_verify(ev).has_value());
        CHECK(ev.back().kind == EventKind::kSlash);
    }

    SUBCASE("node logs") {
        HeartbeatRequest hb;
        hb.logs = {"hello"};
        worker.heartbeat(hb);
        auto res = http.Get("/nodes/" + wk.address_hex() + "/logs");
        REQUIRE(res);
        CHECK(json::parse(res->body).at("logs") == json::array({"hello"}));
    }

    server.stop();
    std::filesystem::remove_all(d);
}

TEST_CASE("the HTTP sweeper declares silent nodes dead") {
    const auto d = temp_dir("sweeper");
    OrchestratorConfig cfg;
    cfg.heartbeat_interval = 0.05;
    cfg.max_missed = 2;
    Orchestrator orch(cfg, crypto::KeyPair::from_seed(80));
    RolloutStore store(d);
    OrchestratorServer server(orch, store, {});
    NodeClient c("127.0.0.1", server.port(), crypto::KeyPair::from_seed(81));
    CHECK(c.register_node("e", "cpu", TaskKind::kRolloutWorker) == 200);
    for (int i = 0; i < 100 && orch.node(c.key().public_key())->state != NodeState::kDead; ++i) {
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    CHECK(orch.node(c.key().public_key())->state == NodeState::kDead);
    server.stop();
    std::filesystem::remove_all(d);
}
