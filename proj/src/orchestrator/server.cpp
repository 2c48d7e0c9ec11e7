// SPDX-License-Identifier: Apache-2.0

#include <chrono>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "swarm/orchestrator.hpp"

namespace swarm::orchestrator {

using nlohmann::json;

namespace {

constexpr const char* kJson = "application/json";

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

void error(httplib::Response& res, int status, const std::string& msg) {
    json j;
    j["error"] = msg;
    res.status = status;
    res.set_content(j.dump(), kJson);
}

int refusal_status(Refusal r) {
    switch (r) {
        case Refusal::kNone: return 200;
        case Refusal::kUnknown: return 404;
        case Refusal::kSlashed: return 403;
        case Refusal::kBadRequest: return 400;
    }
    return 400;
}

std::pair<std::string, int> split_endpoint(const std::string& ep) {
    const auto colon = ep.rfind(':');
    if (colon == std::string::npos) {
        throw InvalidInput("endpoint must be host:port: " + ep);
    }
    return {ep.substr(0, colon), std::stoi(ep.substr(colon + 1))};
}

json node_json(const NodeRecord& n) {
    json j;
    j["address"] = to_hex(n.address);
    j["current_task"] = n.current_task ? json(*n.current_task) : json(nullptr);
    j["hardware"] = n.hardware;
    j["last_status"] = n.last_status;
    j["missed_heartbeats"] = n.missed_heartbeats;
    j["role"] = std::string(task_kind_name(n.role));
    j["state"] = std::string(node_state_name(n.state));
    return j;
}

}  // namespace

OrchestratorServer::OrchestratorServer(Orchestrator& orch, RolloutStore& store, ServerOptions opts)
    : orch_(orch), store_(store), opts_(std::move(opts)),
      http_(std::make_unique<httplib::Server>()), t0_(now_seconds()) {
    install_routes();
    port_ = opts_.port == 0 ? http_->bind_to_any_port(opts_.host)
                            : (http_->bind_to_port(opts_.host, opts_.port) ? opts_.port : -1);
    if (port_ < 0) {
        throw std::runtime_error("orchestrator could not bind " + opts_.host + ":" +
                                 std::to_string(opts_.port));
    }
    thread_ = std::thread([this] { http_->listen_after_bind(); });
    http_->wait_until_ready();
    if (opts_.run_sweeper) {
        sweeper_ = std::thread([this] {
            const auto period = std::chrono::duration<double>(orch_.config().heartbeat_interval);
            auto next = std::chrono::steady_clock::now() + period;
            while (!stopping_) {
                if (std::chrono::steady_clock::now() < next) {
                    std::this_thread::sleep_for(std::chrono::milliseconds(10));
                    continue;
                }
                next += std::chrono::duration_cast<std::chrono::steady_clock::duration>(period);
                orch_.sweep();
                sync_allowlist();
            }
        });
    }
}

OrchestratorServer::~OrchestratorServer() { stop(); }

void OrchestratorServer::stop() {
    if (stopping_.exchange(true)) {
        return;
    }
    orch_.events().close();
    if (sweeper_.joinable()) {
        sweeper_.join();
    }
    http_->stop();
    if (thread_.joinable()) {
        thread_.join();
    }
}

void OrchestratorServer::sync_allowlist() {
    std::lock_guard lock(push_mu_);
    const auto epoch = orch_.allowlist_epoch();
    if (epoch == pushed_epoch_) {
        return;
    }
    json body;
    auto allow = orch_.allowlist();
    allow.insert(allow.end(), opts_.static_allow.begin(), opts_.static_allow.end());
    body["allow"] = allow;
    const std::string text = body.dump();
    for (const auto& ep : opts_.relay_endpoints) {
        auto [host, port] = split_endpoint(ep);
        httplib::Client cli(host, port);
        cli.set_connection_timeout(std::chrono::seconds(2));
        cli.Post("/allowlist", text, kJson);
    }
    pushed_epoch_ = epoch;
}

void OrchestratorServer::handle_verdict(const crypto::PublicKey& validator,
                                        const validator::Verdict& v) {
    const auto parts = parse_storage_key(v.file_id);
    if (!parts) {
        throw InvalidInput("verdict names a malformed file id");
    }
    std::size_t records = 0;
    if (v.accepted) {
        if (!store_.finalize(v.file_id, validator, true)) {
            throw std::logic_error("validator does not hold the lease");
        }
        const auto bytes = store_.read_accepted(v.file_id).value_or("");
        records = static_cast<std::size_t>(std::count(bytes.begin(), bytes.end(), '\n'));
        records = records == 0 ? 0 : records - 1;
        orch_.record_contribution(parts->address, v, records);
    } else {
        if (!store_.finalize(v.file_id, validator, false)) {
            throw std::logic_error("validator does not hold the lease");
        }
        // The uploader signed the body, so the key identifies the author even
        // when the file header is unreadable.
        orch_.slash(parts->address, v);
        sync_allowlist();
    }
    json e;
    e["accepted"] = v.accepted;
    e["failed_check"] = std::string(validator::check_name(v.failed_check));
    e["file_id"] = v.file_id;
    e["node"] = to_hex(parts->address);
    e["type"] = "verdict";
    orch_.events().publish(e.dump());
}

void OrchestratorServer::install_routes() {
    auto& s = *http_;

    s.Post("/register", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            const Opened env = open(req.body);
            const json p = json::parse(env.payload);
            const auto role = task_kind_from_name(p.at("role").get<std::string>());
            const Refusal r = orch_.register_node(env.signer, p.at("endpoint").get<std::string>(),
                                                  p.at("hardware").get<std::string>(), role);
            if (r != Refusal::kNone) {
                return error(res, refusal_status(r), "registration refused");
            }
            json out;
            out["ok"] = true;
            out["state"] = std::string(node_state_name(orch_.node(env.signer)->state));
            res.set_content(out.dump(), kJson);
        } catch (const std::exception& e) {
            error(res, 400, e.what());
        }
    });

    s.Post("/heartbeat", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            const Opened env = open(req.body);
            const HeartbeatRequest hb = decode_heartbeat_payload(env.payload);
            const HeartbeatResponse r = orch_.heartbeat(hb);
            if (r.refusal != Refusal::kNone) {
                return error(res, refusal_status(r.refusal),
                             std::string("heartbeat refused, state ") +
                                 std::string(node_state_name(r.state)));
            }
            res.set_content(encode_heartbeat_response(r), kJson);
        } catch (const std::exception& e) {
            error(res, 403, e.what());
        }
    });

    s.Post("/invites/accept", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            const Opened env = open(req.body);
            const json p = json::parse(env.payload);
            const Invite inv = decode_invite(p.at("invite").dump());
            const Refusal r = orch_.accept_invite(env.signer, inv);
            if (r != Refusal::kNone) {
                return error(res, r == Refusal::kUnknown ? 404 : 403, "invite refused");
            }
            sync_allowlist();
            res.set_content(R"({"ok":true})", kJson);
        } catch (const std::exception& e) {
            error(res, 400, e.what());
        }
    });

    s.Get("/nodes", [this](const httplib::Request&, httplib::Response& res) {
        json arr = json::array();
        for (const auto& n : orch_.nodes()) {
            arr.push_back(node_json(n));
        }
        res.set_content(arr.dump(), kJson);
    });

    s.Get(R"(/nodes/([0-9a-f]{64})/logs)", [this](const httplib::Request& req,
                                                 httplib::Response& res) {
        const auto n = orch_.node(crypto::public_key_from_hex(req.matches[1].str()));
        if (!n) {
            return error(res, 404, "unknown node");
        }
        json j;
        j["address"] = req.matches[1].str();
        j["logs"] = std::vector<std::string>(n->logs.begin(), n->logs.end());
        res.set_content(j.dump(), kJson);
    });

    s.Post(R"(/nodes/([0-9a-f]{64})/restart)", [this](const httplib::Request& req,
                                                    httplib::Response& res) {
        if (!orch_.request_restart(crypto::public_key_from_hex(req.matches[1].str()))) {
            return error(res, 404, "no active node with that address");
        }
        res.set_content(R"({"ok":true})", kJson);
    });

    s.Post("/tasks", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            const json j = json::parse(req.body);
            const auto kind = task_kind_from_name(j.at("kind").get<std::string>());
            const auto id = orch_.create_task(kind, j.at("config").get<std::string>());
            for (const auto& t : orch_.tasks()) {
                if (t.id == id) {
                    res.set_content(encode_task(t), kJson);
                }
            }
        } catch (const std::exception& e) {
            error(res, 400, e.what());
        }
    });

    s.Get("/tasks", [this](const httplib::Request&, httplib::Response& res) {
        json arr = json::array();
        for (const auto& t : orch_.tasks()) {
            arr.push_back(json::parse(encode_task(t)));
        }
        res.set_content(arr.dump(), kJson);
    });

    static const char* kKeyRe = R"(/rollouts/(step-\d+/[0-9a-f]{64}-\d+\.rollout))";

    s.Put(kKeyRe, [this](const httplib::Request& req, httplib::Response& res) {
        try {
            const std::string key = req.matches[1].str();
            const auto parts = parse_storage_key(key);
            if (!parts) {
                return error(res, 400, "malformed key");
            }
            const auto claimed = crypto::public_key_from_hex(req.get_header_value("X-Node-Address"));
            const auto sig = crypto::signature_from_hex(req.get_header_value("X-Signature"));
            const auto digest = crypto::sha256(as_bytes(req.body));
            if (claimed != parts->address ||
                !crypto::verify(claimed, ByteView(digest.data(), digest.size()), sig)) {
                return error(res, 403, "upload signature does not match the key's node");
            }
            const auto n = orch_.node(claimed);
            if (!n || n->state != NodeState::kActive) {
                return error(res, 403, "uploader is not an active pool member");
            }
            if (!store_.put(key, req.body)) {
                return error(res, 409, "file already exists");
            }
            res.status = 201;
        } catch (const std::exception& e) {
            error(res, 400, e.what());
        }
    });

    s.Get(kKeyRe, [this](const httplib::Request& req, httplib::Response& res) {
        const auto bytes = store_.read_accepted(req.matches[1].str());
        if (!bytes) {
            return error(res, 404, "no accepted file with that key");
        }
        res.set_content(*bytes, "application/x-ndjson");
    });

    s.Get("/rollouts", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            const auto step = std::stoull(req.get_param_value("step"));
            json files = json::object();
            for (const auto& [k, st] : store_.list_step(step)) {
                files[k] = std::string(file_status_name(st));
            }
            json j;
            j["files"] = files;
            res.set_content(j.dump(), kJson);
        } catch (const std::exception& e) {
            error(res, 400, e.what());
        }
    });

    s.Post("/claims", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            const Opened env = open(req.body);
            const auto n = orch_.node(env.signer);
            if (!n || n->state != NodeState::kActive || n->role != TaskKind::kValidator) {
                return error(res, 403, "claims require an active validator");
            }
            const auto c = store_.claim(env.signer, now_seconds() - t0_);
            if (!c) {
                res.status = 204;
                return;
            }
            json j;
            j["data"] = c->bytes;
            j["file_id"] = c->key;
            res.set_content(j.dump(), kJson);
        } catch (const std::exception& e) {
            error(res, 400, e.what());
        }
    });

    s.Post("/verdicts", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            const Opened env = open(req.body);
            const auto n = orch_.node(env.signer);
            if (!n || n->state != NodeState::kActive || n->role != TaskKind::kValidator) {
                return error(res, 403, "verdicts require an active validator");
            }
            const json p = json::parse(env.payload);
            handle_verdict(env.signer, validator::decode_verdict(p.at("verdict").dump()));
            res.set_content(R"({"ok":true})", kJson);
        } catch (const std::logic_error& e) {
            error(res, 409, e.what());
        } catch (const std::exception& e) {
            error(res, 400, e.what());
        }
    });

    s.Get("/ledger", [this](const httplib::Request&, httplib::Response& res) {
        res.set_content(orch_.ledger_dump(), "text/plain");
    });

    s.Get("/events", [this](const httplib::Request& req, httplib::Response& res) {
        std::uint64_t from = 0;
        if (req.has_param("from")) {
            from = std::stoull(req.get_param_value("from"));
        }
        serve_event_stream(res, orch_.events(), from, stopping_);
    });
}

// ---- client --------------------------------------------------------------------

namespace {

std::unique_ptr<httplib::Client> make_client(const std::string& host, int port) {
    auto cli = std::make_unique<httplib::Client>(host, port);
    cli->set_connection_timeout(std::chrono::seconds(2));
    cli->set_read_timeout(std::chrono::seconds(10));
    cli->set_write_timeout(std::chrono::seconds(10));
    return cli;
}

}  // namespace

NodeClient::NodeClient(std::string host, int port, crypto::KeyPair key)
    : host_(std::move(host)), port_(port), key_(std::move(key)) {}

int NodeClient::register_node(const std::string& endpoint, const std::string& hardware,
                              TaskKind role) {
    json p;
    p["address"] = key_.address_hex();
    p["endpoint"] = endpoint;
    p["hardware"] = hardware;
    p["role"] = std::string(task_kind_name(role));
    auto res = make_client(host_, port_)->Post("/register", seal(p.dump(), key_), kJson);
    return res ? res->status : 0;
}

std::optional<HeartbeatResponse> NodeClient::heartbeat(const HeartbeatRequest& hb_in,
                                                       int* status) {
    HeartbeatRequest hb = hb_in;
    hb.address = key_.public_key();
    hb.nonce = ++nonce_;
    auto res = make_client(host_, port_)->Post("/heartbeat", seal(encode_heartbeat_payload(hb), key_),
                                               kJson);
    if (status) {
        *status = res ? res->status : 0;
    }
    if (!res || res->status != 200) {
        return std::nullopt;
    }
    return decode_heartbeat_response(res->body);
}

int NodeClient::accept_invite(const Invite& inv) {
    json p;
    p["address"] = key_.address_hex();
    p["invite"] = json::parse(encode_invite(inv));
    auto res = make_client(host_, port_)->Post("/invites/accept", seal(p.dump(), key_), kJson);
    return res ? res->status : 0;
}

int NodeClient::put_rollout(const std::string& key, const std::string& bytes) {
    const auto digest = crypto::sha256(as_bytes(bytes));
    httplib::Headers h{{"X-Node-Address", key_.address_hex()},
                       {"X-Signature", to_hex(key_.sign(ByteView(digest.data(), digest.size())))}};
    auto res = make_client(host_, port_)->Put("/rollouts/" + key, h, bytes, "application/x-ndjson");
    return res ? res->status : 0;
}

std::optional<RolloutStore::Claim> NodeClient::claim() {
    json p;
    p["address"] = key_.address_hex();
    p["nonce"] = ++nonce_;
    auto res = make_client(host_, port_)->Post("/claims", seal(p.dump(), key_), kJson);
    if (!res || res->status != 200) {
        return std::nullopt;
    }
    const json j = json::parse(res->body);
    return RolloutStore::Claim{j.at("file_id").get<std::string>(), j.at("data").get<std::string>()};
}

int NodeClient::post_verdict(const validator::Verdict& v) {
    json p;
    p["address"] = key_.address_hex();
    p["verdict"] = json::parse(validator::encode_verdict(v));
    auto res = make_client(host_, port_)->Post("/verdicts", seal(p.dump(), key_), kJson);
    return res ? res->status : 0;
}

std::map<std::string, FileStatus> NodeClient::list_step(std::uint64_t step) {
    auto res = make_client(host_, port_)->Get("/rollouts?step=" + std::to_string(step));
    std::map<std::string, FileStatus> out;
    if (!res || res->status != 200) {
        return out;
    }
    const json body = json::parse(res->body);
    for (const auto& [k, v] : body.at("files").items()) {
        out.emplace(k, file_status_from_name(v.get<std::string>()));
    }
    return out;
}

std::optional<std::string> NodeClient::fetch_accepted(const std::string& key) {
    auto res = make_client(host_, port_)->Get("/rollouts/" + key);
    if (!res || res->status != 200) {
        return std::nullopt;
    }
    return res->body;
}

std::optional<std::vector<NodeClient::NodeRow>> NodeClient::list_nodes() {
    auto res = make_client(host_, port_)->Get("/nodes");
    if (!res || res->status != 200) {
        return std::nullopt;
    }
    std::vector<NodeRow> out;
    for (const auto& j : json::parse(res->body)) {
        NodeRow r;
        r.address = crypto::public_key_from_hex(j.at("address").get<std::string>());
        r.role = task_kind_from_name(j.at("role").get<std::string>());
        r.state = node_state_from_name(j.at("state").get<std::string>());
        out.push_back(r);
    }
    return out;
}

}  // namespace swarm::orchestrator
