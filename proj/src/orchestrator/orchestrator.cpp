// SPDX-License-Identifier: Apache-2.0

#include "swarm/orchestrator.hpp"

#include <fstream>
#include <regex>
#include <sstream>

#include <nlohmann/json.hpp>

namespace swarm::orchestrator {

using nlohmann::json;

namespace {

json parse_object(const std::string& text, const char* what) {
    try {
        json j = json::parse(text);
        if (!j.is_object()) {
            throw InvalidInput(std::string(what) + ": not an object");
        }
        return j;
    } catch (const json::exception& e) {
        throw InvalidInput(std::string(what) + ": " + e.what());
    }
}

std::string hex(const crypto::PublicKey& k) { return to_hex(k); }

}  // namespace

// ---- envelopes -------------------------------------------------------------

std::string seal(const std::string& payload_json, const crypto::KeyPair& key) {
    const json payload = parse_object(payload_json, "envelope payload");
    const std::string canonical = payload.dump();
    json env;
    env["payload"] = payload;
    env["signature"] = to_hex(key.sign(canonical));
    return env.dump();
}

Opened open(const std::string& envelope) {
    const json env = parse_object(envelope, "envelope");
    try {
        const json& payload = env.at("payload");
        if (!payload.is_object()) {
            throw InvalidInput("envelope payload is not an object");
        }
        Opened out;
        out.payload = payload.dump();
        out.signer = crypto::public_key_from_hex(payload.at("address").get<std::string>());
        const auto sig = crypto::signature_from_hex(env.at("signature").get<std::string>());
        if (!crypto::verify(out.signer, out.payload, sig)) {
            throw InvalidInput("envelope signature does not verify");
        }
        return out;
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("envelope: ") + e.what());
    }
}

// ---- invites -----------------------------------------------------------------

std::string invite_signing_payload(const Invite& inv) {
    json j;
    j["domain_id"] = inv.domain_id;
    j["node"] = hex(inv.node);
    j["pool_id"] = inv.pool_id;
    return j.dump();
}

Invite make_invite(const crypto::PublicKey& node, const std::string& pool_id,
                   const std::string& domain_id, const crypto::KeyPair& owner) {
    Invite inv{node, pool_id, domain_id, {}};
    inv.signature = owner.sign(invite_signing_payload(inv));
    return inv;
}

std::string encode_invite(const Invite& inv) {
    json j = json::parse(invite_signing_payload(inv));
    j["signature"] = to_hex(inv.signature);
    return j.dump();
}

Invite decode_invite(const std::string& text) {
    const json j = parse_object(text, "invite");
    try {
        Invite inv;
        inv.domain_id = j.at("domain_id").get<std::string>();
        inv.node = crypto::public_key_from_hex(j.at("node").get<std::string>());
        inv.pool_id = j.at("pool_id").get<std::string>();
        inv.signature = crypto::signature_from_hex(j.at("signature").get<std::string>());
        return inv;
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("invite: ") + e.what());
    }
}

bool verify_invite(const Invite& inv, const crypto::PublicKey& owner,
                   const crypto::PublicKey& self, const std::string& pool_id,
                   const std::string& domain_id) {
    return inv.node == self && inv.pool_id == pool_id && inv.domain_id == domain_id &&
           crypto::verify(owner, invite_signing_payload(inv), inv.signature);
}

// ---- enums -------------------------------------------------------------------

std::string_view node_state_name(NodeState s) {
    switch (s) {
        case NodeState::kDiscovered: return "discovered";
        case NodeState::kInvited: return "invited";
        case NodeState::kActive: return "active";
        case NodeState::kDead: return "dead";
        case NodeState::kSlashed: return "slashed";
    }
    return "discovered";
}

NodeState node_state_from_name(std::string_view s) {
    for (auto st : {NodeState::kDiscovered, NodeState::kInvited, NodeState::kActive,
                    NodeState::kDead, NodeState::kSlashed}) {
        if (node_state_name(st) == s) {
            return st;
        }
    }
    throw InvalidInput("unknown node state: " + std::string(s));
}

std::string_view task_kind_name(TaskKind k) {
    return k == TaskKind::kValidator ? "validator" : "rollout-worker";
}

TaskKind task_kind_from_name(std::string_view s) {
    if (s == "validator") {
        return TaskKind::kValidator;
    }
    if (s == "rollout-worker") {
        return TaskKind::kRolloutWorker;
    }
    throw InvalidInput("unknown task kind: " + std::string(s));
}

std::string_view task_status_name(TaskStatus s) {
    switch (s) {
        case TaskStatus::kPending: return "pending";
        case TaskStatus::kRunning: return "running";
        case TaskStatus::kFailed: return "failed";
        case TaskStatus::kDone: return "done";
    }
    return "pending";
}

namespace {

TaskStatus task_status_from_name(std::string_view s) {
    for (auto st : {TaskStatus::kPending, TaskStatus::kRunning, TaskStatus::kFailed,
                    TaskStatus::kDone}) {
        if (task_status_name(st) == s) {
            return st;
        }
    }
    throw InvalidInput("unknown task status: " + std::string(s));
}

json task_json(const TaskSpec& t) {
    json j;
    j["assigned"] = t.assigned ? json(hex(*t.assigned)) : json(nullptr);
    j["config"] = t.config;
    j["id"] = t.id;
    j["kind"] = std::string(task_kind_name(t.kind));
    j["status"] = std::string(task_status_name(t.status));
    return j;
}

TaskSpec task_from_json(const json& j) {
    TaskSpec t;
    if (!j.at("assigned").is_null()) {
        t.assigned = crypto::public_key_from_hex(j.at("assigned").get<std::string>());
    }
    t.config = j.at("config").get<std::string>();
    t.id = j.at("id").get<std::uint64_t>();
    t.kind = task_kind_from_name(j.at("kind").get<std::string>());
    t.status = task_status_from_name(j.at("status").get<std::string>());
    return t;
}

}  // namespace

std::string encode_task(const TaskSpec& t) { return task_json(t).dump(); }

std::string encode_heartbeat_payload(const HeartbeatRequest& hb) {
    json j;
    j["address"] = hex(hb.address);
    j["logs"] = hb.logs;
    j["metrics"] = parse_object(hb.metrics, "heartbeat metrics");
    j["nonce"] = hb.nonce;
    j["status"] = hb.status;
    j["task_done"] = hb.task_done ? json(*hb.task_done) : json(nullptr);
    return j.dump();
}

HeartbeatRequest decode_heartbeat_payload(const std::string& text) {
    const json j = parse_object(text, "heartbeat");
    try {
        HeartbeatRequest hb;
        hb.address = crypto::public_key_from_hex(j.at("address").get<std::string>());
        hb.logs = j.at("logs").get<std::vector<std::string>>();
        if (!j.at("metrics").is_object()) {
            throw InvalidInput("heartbeat metrics must be an object");
        }
        hb.metrics = j.at("metrics").dump();
        hb.nonce = j.at("nonce").get<std::uint64_t>();
        hb.status = j.at("status").get<std::string>();
        if (hb.status != "idle" && hb.status != "busy") {
            throw InvalidInput("heartbeat status must be idle or busy");
        }
        if (!j.at("task_done").is_null()) {
            hb.task_done = j.at("task_done").get<std::uint64_t>();
        }
        return hb;
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("heartbeat: ") + e.what());
    }
}

std::string encode_heartbeat_response(const HeartbeatResponse& r) {
    json j;
    j["invite"] = r.invite ? json::parse(encode_invite(*r.invite)) : json(nullptr);
    j["ok"] = r.refusal == Refusal::kNone;
    j["restart"] = r.restart;
    j["state"] = std::string(node_state_name(r.state));
    j["task"] = r.task ? task_json(*r.task) : json(nullptr);
    return j.dump();
}

HeartbeatResponse decode_heartbeat_response(const std::string& text) {
    const json j = parse_object(text, "heartbeat response");
    try {
        HeartbeatResponse r;
        if (!j.at("invite").is_null()) {
            r.invite = decode_invite(j.at("invite").dump());
        }
        r.restart = j.at("restart").get<bool>();
        r.state = node_state_from_name(j.at("state").get<std::string>());
        if (!j.at("task").is_null()) {
            r.task = task_from_json(j.at("task"));
        }
        return r;
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("heartbeat response: ") + e.what());
    }
}

// ---- state machine -----------------------------------------------------------

Orchestrator::Orchestrator(OrchestratorConfig cfg, crypto::KeyPair owner)
    : cfg_(std::move(cfg)), owner_(std::move(owner)), ledger_(cfg_.ledger_path) {
    if (cfg_.max_missed == 0 || !(cfg_.heartbeat_interval > 0.0)) {
        throw InvalidInput("orchestrator needs max_missed >= 1 and a positive interval");
    }
}

void Orchestrator::set_state(NodeRecord& n, NodeState s) {
    const bool was_allowed = n.state == NodeState::kActive;
    n.state = s;
    if (was_allowed != (s == NodeState::kActive)) {
        ++allowlist_epoch_;
    }
    json e;
    e["address"] = hex(n.address);
    e["missed_heartbeats"] = n.missed_heartbeats;
    e["state"] = std::string(node_state_name(s));
    e["type"] = "node";
    events_.publish(e.dump());
}

void Orchestrator::emit_task(const TaskSpec& t) {
    json e = task_json(t);
    e["type"] = "task";
    events_.publish(e.dump());
}

void Orchestrator::release_task(NodeRecord& n) {
    if (!n.current_task) {
        return;
    }
    auto it = tasks_.find(*n.current_task);
    n.current_task.reset();
    if (it != tasks_.end() && it->second.status == TaskStatus::kRunning) {
        it->second.status = TaskStatus::kPending;
        it->second.assigned.reset();
        emit_task(it->second);
    }
}

Refusal Orchestrator::register_node(const crypto::PublicKey& address, const std::string& endpoint,
                                    const std::string& hardware, TaskKind role) {
    std::lock_guard lock(mu_);
    auto it = nodes_.find(address);
    if (it != nodes_.end()) {
        NodeRecord& n = it->second;
        if (n.state == NodeState::kSlashed) {
            return Refusal::kSlashed;
        }
        n.endpoint = endpoint;
        n.hardware = hardware;
        n.beat_since_sweep = true;
        if (n.state != NodeState::kDead) {
            return Refusal::kNone;
        }
        n.role = role;
        n.missed_heartbeats = 0;
        n.invite.reset();
        n.restart_pending = false;
        set_state(n, NodeState::kDiscovered);
    } else {
        NodeRecord n;
        n.address = address;
        n.endpoint = endpoint;
        n.hardware = hardware;
        n.role = role;
        n.beat_since_sweep = true;
        it = nodes_.emplace(address, std::move(n)).first;
        set_state(it->second, NodeState::kDiscovered);
    }
    json p;
    p["address"] = hex(address);
    p["hardware"] = hardware;
    p["role"] = std::string(task_kind_name(role));
    ledger_.append(EventKind::kRegister, p.dump(), owner_);
    return Refusal::kNone;
}

HeartbeatResponse Orchestrator::heartbeat(const HeartbeatRequest& hb) {
    std::lock_guard lock(mu_);
    HeartbeatResponse r;
    auto it = nodes_.find(hb.address);
    if (it == nodes_.end() || it->second.state == NodeState::kDead) {
        r.refusal = Refusal::kUnknown;
        r.state = it == nodes_.end() ? NodeState::kDiscovered : NodeState::kDead;
        return r;
    }
    NodeRecord& n = it->second;
    r.state = n.state;
    if (n.state == NodeState::kSlashed) {
        r.refusal = Refusal::kSlashed;
        return r;
    }
    if (hb.nonce <= n.last_nonce) {
        r.refusal = Refusal::kBadRequest;
        return r;
    }
    n.last_nonce = hb.nonce;
    n.beat_since_sweep = true;
    if (n.missed_heartbeats != 0) {
        n.missed_heartbeats = 0;
        set_state(n, n.state);
    }
    n.last_status = hb.status;
    n.metrics = hb.metrics;
    for (const auto& line : hb.logs) {
        n.logs.push_back(line);
    }
    while (n.logs.size() > cfg_.log_lines) {
        n.logs.pop_front();
    }
    if (hb.task_done && n.current_task == hb.task_done) {
        TaskSpec& t = tasks_.at(*hb.task_done);
        t.status = TaskStatus::kDone;
        n.current_task.reset();
        emit_task(t);
    }
    if (n.state == NodeState::kInvited) {
        r.invite = n.invite;
        return r;
    }
    if (n.state != NodeState::kActive) {
        return r;
    }
    if (n.restart_pending) {
        r.restart = true;
        n.restart_pending = false;
    }
    if (hb.status != "idle") {
        return r;
    }
    if (n.current_task) {
        // An idle node that still owns a task lost it (restart or crash); hand it back.
        r.task = tasks_.at(*n.current_task);
        return r;
    }
    for (auto& [id, t] : tasks_) {
        if (t.status == TaskStatus::kPending && t.kind == n.role) {
            t.status = TaskStatus::kRunning;
            t.assigned = n.address;
            n.current_task = id;
            emit_task(t);
            r.task = t;
            break;
        }
    }
    return r;
}

Refusal Orchestrator::accept_invite(const crypto::PublicKey& address, const Invite& inv) {
    std::lock_guard lock(mu_);
    auto it = nodes_.find(address);
    if (it == nodes_.end()) {
        return Refusal::kUnknown;
    }
    NodeRecord& n = it->second;
    if (n.state == NodeState::kSlashed) {
        return Refusal::kSlashed;
    }
    if (n.state != NodeState::kInvited || !n.invite || !(*n.invite == inv)) {
        return Refusal::kBadRequest;
    }
    n.beat_since_sweep = true;
    set_state(n, NodeState::kActive);
    json p;
    p["address"] = hex(address);
    p["domain_id"] = inv.domain_id;
    p["pool_id"] = inv.pool_id;
    ledger_.append(EventKind::kInviteAccept, p.dump(), owner_);
    return Refusal::kNone;
}

std::vector<crypto::PublicKey> Orchestrator::sweep() {
    std::lock_guard lock(mu_);
    std::vector<crypto::PublicKey> died;
    for (auto& [addr, n] : nodes_) {
        if (n.state == NodeState::kDead || n.state == NodeState::kSlashed) {
            continue;
        }
        if (n.beat_since_sweep) {
            n.beat_since_sweep = false;
        } else {
            ++n.missed_heartbeats;
            if (n.missed_heartbeats >= cfg_.max_missed) {
                release_task(n);
                n.invite.reset();
                set_state(n, NodeState::kDead);
                died.push_back(addr);
                continue;
            }
            set_state(n, n.state);
        }
        if (n.state == NodeState::kDiscovered) {
            n.invite = make_invite(addr, cfg_.pool_id, cfg_.domain_id, owner_);
            set_state(n, NodeState::kInvited);
        }
    }
    return died;
}

void Orchestrator::slash(const crypto::PublicKey& address, const validator::Verdict& verdict) {
    std::lock_guard lock(mu_);
    auto it = nodes_.find(address);
    if (it == nodes_.end()) {
        NodeRecord n;
        n.address = address;
        it = nodes_.emplace(address, std::move(n)).first;
    }
    NodeRecord& n = it->second;
    if (n.state == NodeState::kSlashed) {
        return;
    }
    release_task(n);
    n.invite.reset();
    set_state(n, NodeState::kSlashed);
    json p;
    p["address"] = hex(address);
    p["details"] = verdict.details;
    p["failed_check"] = std::string(validator::check_name(verdict.failed_check));
    p["file_id"] = verdict.file_id;
    p["step"] = verdict.step;
    p["submission_index"] = verdict.submission_index;
    ledger_.append(EventKind::kSlash, p.dump(), owner_);
}

void Orchestrator::record_contribution(const crypto::PublicKey& address,
                                       const validator::Verdict& verdict, std::size_t records) {
    std::lock_guard lock(mu_);
    json p;
    p["address"] = hex(address);
    p["file_id"] = verdict.file_id;
    p["records"] = records;
    p["step"] = verdict.step;
    p["submission_index"] = verdict.submission_index;
    ledger_.append(EventKind::kContribution, p.dump(), owner_);
}

std::uint64_t Orchestrator::create_task(TaskKind kind, std::string config) {
    std::lock_guard lock(mu_);
    TaskSpec t;
    t.id = next_task_++;
    t.kind = kind;
    t.config = std::move(config);
    tasks_.emplace(t.id, t);
    emit_task(t);
    return t.id;
}

bool Orchestrator::request_restart(const crypto::PublicKey& address) {
    std::lock_guard lock(mu_);
    auto it = nodes_.find(address);
    if (it == nodes_.end() || it->second.state != NodeState::kActive) {
        return false;
    }
    it->second.restart_pending = true;
    return true;
}

std::vector<NodeRecord> Orchestrator::nodes() const {
    std::lock_guard lock(mu_);
    std::vector<NodeRecord> out;
    for (const auto& [_, n] : nodes_) {
        out.push_back(n);
    }
    return out;
}

std::optional<NodeRecord> Orchestrator::node(const crypto::PublicKey& address) const {
    std::lock_guard lock(mu_);
    auto it = nodes_.find(address);
    if (it == nodes_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::vector<TaskSpec> Orchestrator::tasks() const {
    std::lock_guard lock(mu_);
    std::vector<TaskSpec> out;
    for (const auto& [_, t] : tasks_) {
        out.push_back(t);
    }
    return out;
}

std::vector<std::string> Orchestrator::allowlist() const {
    std::lock_guard lock(mu_);
    std::vector<std::string> out;
    for (const auto& [addr, n] : nodes_) {
        if (n.state == NodeState::kActive) {
            out.push_back(hex(addr));
        }
    }
    return out;
}

std::uint64_t Orchestrator::allowlist_epoch() const {
    std::lock_guard lock(mu_);
    return allowlist_epoch_;
}

std::vector<LedgerEvent> Orchestrator::ledger_events() const {
    std::lock_guard lock(mu_);
    return ledger_.events();
}

std::string Orchestrator::ledger_dump() const {
    std::lock_guard lock(mu_);
    return ledger_.dump();
}

// ---- storage -----------------------------------------------------------------

std::string_view file_status_name(FileStatus s) {
    switch (s) {
        case FileStatus::kUnknown: return "unknown";
        case FileStatus::kPending: return "pending";
        case FileStatus::kClaimed: return "claimed";
        case FileStatus::kAccepted: return "accepted";
        case FileStatus::kRejected: return "rejected";
    }
    return "unknown";
}

FileStatus file_status_from_name(std::string_view s) {
    for (auto st : {FileStatus::kUnknown, FileStatus::kPending, FileStatus::kClaimed,
                    FileStatus::kAccepted, FileStatus::kRejected}) {
        if (file_status_name(st) == s) {
            return st;
        }
    }
    throw InvalidInput("unknown file status: " + std::string(s));
}

std::optional<KeyParts> parse_storage_key(const std::string& key) {
    static const std::regex re(R"(step-(\d{1,19})/([0-9a-f]{64})-(\d{1,19})\.rollout)");
    std::smatch m;
    if (!std::regex_match(key, m, re)) {
        return std::nullopt;
    }
    KeyParts k;
    try {
        k.step = std::stoull(m[1].str());
        k.address = crypto::public_key_from_hex(m[2].str());
        k.submission_index = std::stoull(m[3].str());
    } catch (const std::exception&) {
        return std::nullopt;
    }
    return k;
}

namespace {

void write_atomic(const std::filesystem::path& tmp_dir, const std::filesystem::path& dest,
                  const std::string& bytes) {
    std::filesystem::create_directories(dest.parent_path());
    static std::atomic<std::uint64_t> counter{0};
    const auto tmp = tmp_dir / ("put-" + std::to_string(counter++) + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw InvalidInput("short write to " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, dest);
}

std::string read_all(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

RolloutStore::RolloutStore(std::filesystem::path root, double lease_seconds)
    : root_(std::move(root)), lease_seconds_(lease_seconds) {
    for (const char* d : {"incoming", "accepted", "rejected", "tmp"}) {
        std::filesystem::create_directories(root_ / d);
    }
}

bool RolloutStore::put(const std::string& key, const std::string& bytes) {
    if (!parse_storage_key(key)) {
        throw InvalidInput("malformed storage key: " + key);
    }
    std::lock_guard lock(mu_);
    if (entries_.count(key) != 0) {
        return false;
    }
    write_atomic(root_ / "tmp", root_ / "incoming" / key, bytes);
    Entry e;
    e.order = next_order_++;
    entries_.emplace(key, e);
    return true;
}

std::optional<RolloutStore::Claim> RolloutStore::claim(const crypto::PublicKey& validator,
                                                       double now) {
    std::lock_guard lock(mu_);
    std::map<std::string, Entry>::iterator best = entries_.end();
    for (auto it = entries_.begin(); it != entries_.end(); ++it) {
        const Entry& e = it->second;
        const bool free = e.status == FileStatus::kPending ||
                          (e.status == FileStatus::kClaimed && e.lease_expiry <= now);
        if (free && (best == entries_.end() || e.order < best->second.order)) {
            best = it;
        }
    }
    if (best == entries_.end()) {
        return std::nullopt;
    }
    best->second.status = FileStatus::kClaimed;
    best->second.holder = validator;
    best->second.lease_expiry = now + lease_seconds_;
    return Claim{best->first, read_all(root_ / "incoming" / best->first)};
}

bool RolloutStore::finalize(const std::string& key, const crypto::PublicKey& validator,
                            bool accepted) {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end() || it->second.status != FileStatus::kClaimed ||
        it->second.holder != validator) {
        return false;
    }
    const auto dest = root_ / (accepted ? "accepted" : "rejected") / key;
    std::filesystem::create_directories(dest.parent_path());
    std::filesystem::rename(root_ / "incoming" / key, dest);
    it->second.status = accepted ? FileStatus::kAccepted : FileStatus::kRejected;
    it->second.holder.reset();
    return true;
}

FileStatus RolloutStore::status(const std::string& key) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key);
    return it == entries_.end() ? FileStatus::kUnknown : it->second.status;
}

std::map<std::string, FileStatus> RolloutStore::list_step(std::uint64_t step) const {
    const std::string prefix = "step-" + std::to_string(step) + "/";
    std::lock_guard lock(mu_);
    std::map<std::string, FileStatus> out;
    for (auto it = entries_.lower_bound(prefix);
         it != entries_.end() && it->first.compare(0, prefix.size(), prefix) == 0; ++it) {
        out.emplace(it->first, it->second.status);
    }
    return out;
}

std::optional<std::string> RolloutStore::read_accepted(const std::string& key) const {
    {
        std::lock_guard lock(mu_);
        auto it = entries_.find(key);
        if (it == entries_.end() || it->second.status != FileStatus::kAccepted) {
            return std::nullopt;
        }
    }
    return read_all(root_ / "accepted" / key);
}

}  // namespace swarm::orchestrator
