// SPDX-License-Identifier: Apache-2.0
//
// Coordination plane: discovery, signed pool invites, heartbeat liveness,
// pull-based task scheduling, rollout storage with validator leases, slashing.
//
// Every node-originated request is a signed envelope (compact JSON):
//   {"payload":<object>,"signature":<hex64>}
// where `signature` is Ed25519 over payload.dump() (keys ascending, no spaces)
// by the key in payload["address"].
//
// HTTP surface (JSON bodies unless noted):
//   POST /register           envelope, payload {"address","endpoint","hardware","role"}
//                            role is "rollout-worker" | "validator"
//                            -> {"ok":true,"state":<state>} | 403 {"error"}
//   POST /heartbeat          envelope, payload {"address","logs":[str],"metrics":{},
//                            "nonce":u64,"status":"idle"|"busy","task_done":u64|null}
//                            -> {"invite":<invite>|null,"ok":true,"restart":bool,
//                                "state":<state>,"task":<task>|null}
//                            403 for slashed or unsigned, 404 for unknown or dead nodes
//   POST /invites/accept     envelope, payload {"address","invite":<invite>}
//                            -> {"ok":true} | 403 {"error"}
//   GET  /nodes              -> [{"address","current_task":u64|null,"hardware",
//                                "last_status","missed_heartbeats","role","state"}]
//   GET  /nodes/{id}/logs    -> {"address","logs":[str]}
//   POST /tasks              {"config":<string>,"kind":"rollout-worker"|"validator"} -> <task>
//   GET  /tasks              -> [<task>]
//   POST /nodes/{id}/restart -> {"ok":true} | 404
//   PUT  /rollouts/{key}     raw file bytes; headers X-Node-Address (hex) and
//                            X-Signature (hex Ed25519 over SHA-256 of the body) -> 201 | 4xx
//   GET  /rollouts/{key}     raw bytes of an accepted file | 404
//   GET  /rollouts?step=N    -> {"files":{<key>:"pending"|"claimed"|"accepted"|"rejected"}}
//   POST /claims             envelope, payload {"address","nonce"} ->
//                            {"file_id":<key>} with body in "data" (string) | 204
//   POST /verdicts           envelope, payload {"address","verdict":<verdict>} -> {"ok":true}
//   GET  /ledger             text/plain ledger lines
//   GET  /events[?from=N]    text/event-stream of JSON objects with a "type" field:
//                            "node" {"address","state","missed_heartbeats"}
//                            "task" {"id","status","assigned"}
//                            "verdict" {"file_id","accepted","failed_check","node"}
//
// <invite> = {"domain_id","node","pool_id","signature"} with the signature by the
// pool owner over compact JSON {"domain_id","node","pool_id"}.
// <task>   = {"assigned":<hex>|null,"config","id","kind","status"}.

#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "swarm/crypto.hpp"
#include "swarm/event_stream.hpp"
#include "swarm/ledger.hpp"
#include "swarm/validator.hpp"

namespace httplib {
class Server;
}

namespace swarm::orchestrator {

// ---- signed envelopes --------------------------------------------------

/// Signs `payload_json` (an object with an "address" field) with `key`.
std::string seal(const std::string& payload_json, const crypto::KeyPair& key);

struct Opened {
    std::string payload;  // compact JSON
    crypto::PublicKey signer{};
};

/// Parses and verifies an envelope; throws InvalidInput on any defect.
Opened open(const std::string& envelope);

// ---- invites -------------------------------------------------------------

struct Invite {
    crypto::PublicKey node{};
    std::string pool_id;
    std::string domain_id;
    crypto::Signature signature{};

    bool operator==(const Invite&) const = default;
};

std::string invite_signing_payload(const Invite& inv);
Invite make_invite(const crypto::PublicKey& node, const std::string& pool_id,
                   const std::string& domain_id, const crypto::KeyPair& owner);
std::string encode_invite(const Invite& inv);
Invite decode_invite(const std::string& json);

/// Node-side check before accepting: the invite names this node and pool and
/// carries the pool owner's signature.
bool verify_invite(const Invite& inv, const crypto::PublicKey& owner,
                   const crypto::PublicKey& self, const std::string& pool_id,
                   const std::string& domain_id);

// ---- nodes and tasks -----------------------------------------------------

enum class NodeState { kDiscovered, kInvited, kActive, kDead, kSlashed };
std::string_view node_state_name(NodeState s);
NodeState node_state_from_name(std::string_view s);

enum class TaskKind { kRolloutWorker, kValidator };
std::string_view task_kind_name(TaskKind k);
TaskKind task_kind_from_name(std::string_view s);

enum class TaskStatus { kPending, kRunning, kFailed, kDone };
std::string_view task_status_name(TaskStatus s);

struct NodeRecord {
    crypto::PublicKey address{};
    std::string endpoint;
    std::string hardware;
    TaskKind role = TaskKind::kRolloutWorker;
    NodeState state = NodeState::kDiscovered;
    std::uint32_t missed_heartbeats = 0;
    std::optional<std::uint64_t> current_task;
    std::string last_status = "idle";
    std::string metrics = "{}";
    std::deque<std::string> logs;
    std::optional<Invite> invite;
    bool restart_pending = false;
    bool beat_since_sweep = false;
    std::uint64_t last_nonce = 0;
};

struct TaskSpec {
    std::uint64_t id = 0;
    TaskKind kind = TaskKind::kRolloutWorker;
    std::string config;
    std::optional<crypto::PublicKey> assigned;
    TaskStatus status = TaskStatus::kPending;
};

std::string encode_task(const TaskSpec& t);

struct HeartbeatRequest {
    crypto::PublicKey address{};
    std::string status = "idle";
    std::string metrics = "{}";
    std::vector<std::string> logs;
    std::uint64_t nonce = 0;
    std::optional<std::uint64_t> task_done;
};

std::string encode_heartbeat_payload(const HeartbeatRequest& hb);
HeartbeatRequest decode_heartbeat_payload(const std::string& json);

enum class Refusal { kNone, kUnknown, kSlashed, kBadRequest };

struct HeartbeatResponse {
    Refusal refusal = Refusal::kNone;
    NodeState state = NodeState::kDiscovered;
    std::optional<Invite> invite;
    std::optional<TaskSpec> task;
    bool restart = false;
};

std::string encode_heartbeat_response(const HeartbeatResponse& r);
HeartbeatResponse decode_heartbeat_response(const std::string& json);

struct OrchestratorConfig {
    std::string pool_id = "pool-0";
    std::string domain_id = "toy-arith";
    double heartbeat_interval = 2.0;  // also the sweep period
    std::uint32_t max_missed = 3;
    std::size_t log_lines = 200;
    std::filesystem::path ledger_path;  // empty: in-memory ledger
};

/// Transport-independent state machine. Time enters only through sweep(), so a
/// simulated clock is just a loop that calls it. One mutex serialises node
/// mutations and task assignment.
class Orchestrator {
public:
    Orchestrator(OrchestratorConfig cfg, crypto::KeyPair owner);

    const OrchestratorConfig& config() const { return cfg_; }
    const crypto::PublicKey& owner() const { return owner_.public_key(); }

    /// New or dead nodes enter `discovered`; a slashed node is refused.
    Refusal register_node(const crypto::PublicKey& address, const std::string& endpoint,
                          const std::string& hardware, TaskKind role);
    HeartbeatResponse heartbeat(const HeartbeatRequest& hb);
    Refusal accept_invite(const crypto::PublicKey& address, const Invite& inv);

    /// One liveness pass; invites discovered nodes. Returns addresses that died.
    std::vector<crypto::PublicKey> sweep();

    void slash(const crypto::PublicKey& address, const validator::Verdict& verdict);
    void record_contribution(const crypto::PublicKey& address, const validator::Verdict& verdict,
                             std::size_t records);

    std::uint64_t create_task(TaskKind kind, std::string config);
    bool request_restart(const crypto::PublicKey& address);

    std::vector<NodeRecord> nodes() const;
    std::optional<NodeRecord> node(const crypto::PublicKey& address) const;
    std::vector<TaskSpec> tasks() const;
    std::vector<std::string> allowlist() const;
    /// Bumped whenever the allowlist content may have changed.
    std::uint64_t allowlist_epoch() const;
    std::vector<LedgerEvent> ledger_events() const;
    std::string ledger_dump() const;

    EventStream& events() { return events_; }

private:
    void set_state(NodeRecord& n, NodeState s);
    void release_task(NodeRecord& n);
    void emit_task(const TaskSpec& t);

    OrchestratorConfig cfg_;
    crypto::KeyPair owner_;
    mutable std::mutex mu_;
    std::map<crypto::PublicKey, NodeRecord> nodes_;
    std::map<std::uint64_t, TaskSpec> tasks_;
    std::uint64_t next_task_ = 0;
    std::uint64_t allowlist_epoch_ = 0;
    Ledger ledger_;
    EventStream events_;
};

// ---- rollout storage -----------------------------------------------------

enum class FileStatus { kUnknown, kPending, kClaimed, kAccepted, kRejected };
std::string_view file_status_name(FileStatus s);
FileStatus file_status_from_name(std::string_view s);

/// Directory-backed store: incoming/<key>, accepted/<key>, rejected/<key>,
/// where keys look like "step-N/<addr>-<sub>.rollout". Writes go through a
/// temporary file and a rename.
class RolloutStore {
public:
    explicit RolloutStore(std::filesystem::path root, double lease_seconds = 30.0);

    /// False if the key already exists.
    bool put(const std::string& key, const std::string& bytes);

    struct Claim {
        std::string key;
        std::string bytes;
    };
    std::optional<Claim> claim(const crypto::PublicKey& validator, double now);

    /// Finalises a claimed file if `validator` holds its lease. False otherwise.
    bool finalize(const std::string& key, const crypto::PublicKey& validator, bool accepted);

    FileStatus status(const std::string& key) const;
    std::map<std::string, FileStatus> list_step(std::uint64_t step) const;
    std::optional<std::string> read_accepted(const std::string& key) const;

    const std::filesystem::path& root() const { return root_; }

private:
    struct Entry {
        FileStatus status = FileStatus::kPending;
        std::optional<crypto::PublicKey> holder;
        double lease_expiry = 0.0;
        std::uint64_t order = 0;
    };

    std::filesystem::path root_;
    double lease_seconds_;
    mutable std::mutex mu_;
    std::map<std::string, Entry> entries_;
    std::uint64_t next_order_ = 0;
};

/// Parses "step-N/<64 hex>-<sub>.rollout"; nullopt if malformed.
struct KeyParts {
    std::uint64_t step = 0;
    crypto::PublicKey address{};
    std::uint64_t submission_index = 0;
};
std::optional<KeyParts> parse_storage_key(const std::string& key);

// ---- HTTP server -----------------------------------------------------------

struct ServerOptions {
    std::string host = "127.0.0.1";
    int port = 0;
    std::vector<std::string> relay_endpoints;  // "host:port" receiving POST /allowlist
    std::vector<std::string> static_allow;     // always present in pushed allowlists
    bool run_sweeper = true;
};

class OrchestratorServer {
public:
    OrchestratorServer(Orchestrator& orch, RolloutStore& store, ServerOptions opts);
    ~OrchestratorServer();
    OrchestratorServer(const OrchestratorServer&) = delete;
    OrchestratorServer& operator=(const OrchestratorServer&) = delete;

    int port() const { return port_; }
    void stop();

    /// Pushes the current allowlist to every relay if it changed since the last push.
    void sync_allowlist();

private:
    void install_routes();
    void handle_verdict(const crypto::PublicKey& validator, const validator::Verdict& v);

    Orchestrator& orch_;
    RolloutStore& store_;
    ServerOptions opts_;
    std::unique_ptr<httplib::Server> http_;
    std::thread thread_;
    std::thread sweeper_;
    std::atomic<bool> stopping_{false};
    std::mutex push_mu_;
    std::uint64_t pushed_epoch_ = ~std::uint64_t{0};
    int port_ = 0;
    double t0_ = 0.0;
};

// ---- node-side client ------------------------------------------------------

/// Thin HTTP client used by workers, validators and the trainer.
class NodeClient {
public:
    NodeClient(std::string host, int port, crypto::KeyPair key);

    const crypto::KeyPair& key() const { return key_; }

    /// Returns the HTTP status (0 when unreachable).
    int register_node(const std::string& endpoint, const std::string& hardware, TaskKind role);
    std::optional<HeartbeatResponse> heartbeat(const HeartbeatRequest& hb, int* status = nullptr);
    int accept_invite(const Invite& inv);
    int put_rollout(const std::string& key, const std::string& bytes);
    std::optional<RolloutStore::Claim> claim();
    int post_verdict(const validator::Verdict& v);

    std::map<std::string, FileStatus> list_step(std::uint64_t step);
    std::optional<std::string> fetch_accepted(const std::string& key);
    /// GET /nodes parsed into (address, role, state) rows.
    struct NodeRow {
        crypto::PublicKey address{};
        TaskKind role = TaskKind::kRolloutWorker;
        NodeState state = NodeState::kDiscovered;
    };
    std::optional<std::vector<NodeRow>> list_nodes();

private:
    std::string host_;
    int port_;
    crypto::KeyPair key_;
    std::uint64_t nonce_ = 0;
};

}  // namespace swarm::orchestrator
