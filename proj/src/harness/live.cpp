// SPDX-License-Identifier: Apache-2.0

#include <fcntl.h>
#include <signal.h>
#include <sys/prctl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <csignal>
#include <deque>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "swarm/harness.hpp"
#include "swarm/orchestrator.hpp"
#include "swarm/shardcast.hpp"
#include "swarm/validator.hpp"

namespace swarm::harness {

using nlohmann::json;
namespace orch = swarm::orchestrator;
using namespace std::chrono_literals;

namespace {

constexpr int kExpectedCrash = 42;

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

void install_signal_handlers() {
    struct sigaction sa {};
    sa.sa_handler = on_signal;
    sigemptyset(&sa.sa_mask);
    sigaction(SIGTERM, &sa, nullptr);
    sigaction(SIGINT, &sa, nullptr);
    signal(SIGPIPE, SIG_IGN);
}

void log_line(const std::string& who, const std::string& msg) {
    std::cerr << who << ": " << msg << std::endl;
}

std::filesystem::path port_file(const std::filesystem::path& run_dir, const std::string& name) {
    return run_dir / "ports" / name;
}

void write_port(const std::filesystem::path& run_dir, const std::string& name, int port) {
    std::filesystem::create_directories(run_dir / "ports");
    const auto tmp = port_file(run_dir, name + ".tmp");
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << port << '\n';
    }
    std::filesystem::rename(tmp, port_file(run_dir, name));
}

std::optional<int> read_port(const std::filesystem::path& run_dir, const std::string& name) {
    std::ifstream in(port_file(run_dir, name));
    int port = 0;
    if (in >> port) {
        return port;
    }
    return std::nullopt;
}

int wait_port(const std::filesystem::path& run_dir, const std::string& name, double timeout = 60.0) {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout);
    while (std::chrono::steady_clock::now() < deadline && !g_stop) {
        if (auto p = read_port(run_dir, name)) {
            return *p;
        }
        std::this_thread::sleep_for(20ms);
    }
    throw std::runtime_error("timed out waiting for " + name + " to publish its port");
}

std::vector<std::shared_ptr<shardcast::RelayEndpoint>> relay_clients(
    const RunConfig& cfg, const std::filesystem::path& run_dir) {
    std::vector<std::shared_ptr<shardcast::RelayEndpoint>> out;
    for (int r = 0; r < cfg.relays; ++r) {
        out.push_back(std::make_shared<shardcast::HttpRelay>(
            "127.0.0.1", wait_port(run_dir, "relay-" + std::to_string(r))));
    }
    return out;
}

rollout::WorkerOptions live_worker_options(const RunConfig& cfg) {
    rollout::WorkerOptions o;
    o.group_size = cfg.train.group_size;
    o.groups_per_file = cfg.groups_per_file;
    o.alpha = cfg.train.alpha;
    o.adv_eps = cfg.train.adv_eps;
    o.advantage_mode = cfg.train.advantage_mode;
    return o;
}

/// Registration, invite handling and heartbeats for a pool member.
class Membership {
public:
    Membership(const RunConfig& cfg, const std::filesystem::path& run_dir, crypto::KeyPair key,
               orch::TaskKind role, std::string name)
        : cfg_(cfg), name_(std::move(name)), role_(role),
          client_("127.0.0.1", wait_port(run_dir, "orchestrator"), key),
          owner_(owner_key(cfg).public_key()) {}

    ~Membership() { stop(); }

    void start() {
        while (!g_stop && client_.register_node("127.0.0.1:0", "desk-cpu", role_) != 200) {
            std::this_thread::sleep_for(100ms);
        }
        thread_ = std::thread([this] { loop(); });
    }

    void stop() {
        quit_ = true;
        if (thread_.joinable()) {
            thread_.join();
        }
    }

    bool wait_for_task() {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return has_task_ || g_stop || quit_; });
        return has_task_;
    }

    bool take_restart() { return restart_.exchange(false); }
    bool slashed() const { return slashed_; }
    void set_busy(bool b) { busy_ = b; }
    void log(const std::string& line) {
        std::lock_guard lock(mu_);
        pending_logs_.push_back(line);
        log_line(name_, line);
    }
    orch::NodeClient& client() { return client_; }

private:
    void loop() {
        const auto period = std::chrono::duration<double>(cfg_.heartbeat_interval);
        while (!g_stop && !quit_) {
            orch::HeartbeatRequest hb;
            hb.status = busy_ ? "busy" : "idle";
            {
                std::lock_guard lock(mu_);
                hb.logs.swap(pending_logs_);
            }
            int status = 0;
            const auto r = client_.heartbeat(hb, &status);
            if (status == 403) {
                slashed_ = true;
            } else if (status == 404) {
                client_.register_node("127.0.0.1:0", "desk-cpu", role_);
            }
            if (r) {
                if (r->invite) {
                    if (orch::verify_invite(*r->invite, owner_, client_.key().public_key(), "pool-0",
                                            "toy-arith")) {
                        client_.accept_invite(*r->invite);
                    } else {
                        log_line(name_, "refused an invite that does not verify");
                    }
                }
                if (r->restart) {
                    restart_ = true;
                }
                if (r->task) {
                    std::lock_guard lock(mu_);
                    has_task_ = true;
                    busy_ = true;
                    cv_.notify_all();
                }
            }
            const auto until = std::chrono::steady_clock::now() + period;
            while (!g_stop && !quit_ && std::chrono::steady_clock::now() < until) {
                std::this_thread::sleep_for(10ms);
            }
        }
        cv_.notify_all();
    }

    const RunConfig& cfg_;
    std::string name_;
    orch::TaskKind role_;
    orch::NodeClient client_;
    crypto::PublicKey owner_;
    std::thread thread_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::vector<std::string> pending_logs_;
    bool has_task_ = false;
    std::atomic<bool> busy_{false};
    std::atomic<bool> restart_{false};
    std::atomic<bool> slashed_{false};
    std::atomic<bool> quit_{false};
};

/// Checkpoint cache over a shardcast client.
class Checkpoints {
public:
    Checkpoints(std::vector<std::shared_ptr<shardcast::RelayEndpoint>> relays,
                const crypto::PublicKey& trainer, const std::string& address, std::uint64_t seed) {
        shardcast::ClientOptions co;
        co.seed = seed;
        client_ = std::make_unique<shardcast::Client>(std::move(relays), trainer, address, co);
    }

    /// Blocks until `version` (or, after an integrity failure, a newer one) is
    /// available. Sets *got to the version actually obtained.
    std::shared_ptr<const policy::PolicyParams> get(std::uint64_t version, std::uint64_t* got) {
        std::lock_guard lock(mu_);
        if (auto it = cache_.find(version); it != cache_.end()) {
            *got = version;
            return it->second;
        }
        while (!g_stop) {
            const auto latest = client_->latest_version();
            if (latest && *latest >= version) {
                try {
                    auto rep = client_->download_at_least(version, *latest);
                    auto p = std::make_shared<const policy::PolicyParams>(
                        policy::deserialize(ByteView(rep.bytes.data(), rep.bytes.size())));
                    cache_[rep.version] = p;
                    while (cache_.size() > 6) {
                        cache_.erase(cache_.begin());
                    }
                    *got = rep.version;
                    return p;
                } catch (const std::exception&) {
                    // Not yet allowlisted or relays busy; retry below.
                }
            }
            std::this_thread::sleep_for(20ms);
        }
        return nullptr;
    }

    /// Non-blocking lookup for validators: nullptr if the version is not retained.
    std::shared_ptr<const policy::PolicyParams> lookup(std::uint64_t version) {
        std::lock_guard lock(mu_);
        if (auto it = cache_.find(version); it != cache_.end()) {
            return it->second;
        }
        for (int attempt = 0; attempt < 200 && !g_stop; ++attempt) {
            const auto latest = client_->latest_version();
            if (latest && *latest >= version) {
                try {
                    auto rep = client_->download(version);
                    auto p = std::make_shared<const policy::PolicyParams>(
                        policy::deserialize(ByteView(rep.bytes.data(), rep.bytes.size())));
                    cache_[version] = p;
                    while (cache_.size() > 8) {
                        cache_.erase(cache_.begin());
                    }
                    return p;
                } catch (const InvalidInput&) {
                    return nullptr;
                } catch (const std::exception&) {
                }
            } else if (latest) {
                return nullptr;
            }
            std::this_thread::sleep_for(20ms);
        }
        return nullptr;
    }

    void clear() {
        std::lock_guard lock(mu_);
        cache_.clear();
    }

private:
    std::mutex mu_;
    std::unique_ptr<shardcast::Client> client_;
    std::map<std::uint64_t, std::shared_ptr<const policy::PolicyParams>> cache_;
};

void append_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::app);
    out << text;
    out.flush();
}

}  // namespace

// ---- roles -----------------------------------------------------------------------

int role_relay(const RunConfig& cfg, const std::filesystem::path& run_dir, int index) {
    install_signal_handlers();
    shardcast::RelayOptions ro;
    ro.enforce_allowlist = true;
    auto store = std::make_shared<shardcast::RelayStore>(trainer_key(cfg).public_key(), ro);
    auto shaper = std::make_shared<shardcast::LinkShaper>(cfg.relay_bandwidth, 0.0);
    shardcast::RelayServer server(store, "127.0.0.1", 0, shaper);
    write_port(run_dir, "relay-" + std::to_string(index), server.port());
    while (!g_stop) {
        std::this_thread::sleep_for(50ms);
    }
    server.stop();
    return 0;
}

int role_orchestrator(const RunConfig& cfg, const std::filesystem::path& run_dir) {
    install_signal_handlers();
    orch::OrchestratorConfig oc;
    oc.heartbeat_interval = cfg.heartbeat_interval;
    oc.max_missed = cfg.max_missed;
    oc.ledger_path = run_dir / "ledger.jsonl";
    orch::Orchestrator o(oc, owner_key(cfg));
    orch::RolloutStore store(run_dir / "storage");
    orch::ServerOptions so;
    for (int r = 0; r < cfg.relays; ++r) {
        so.relay_endpoints.push_back("127.0.0.1:" +
                                     std::to_string(wait_port(run_dir, "relay-" + std::to_string(r))));
    }
    for (int i = 0; i < cfg.workers; ++i) {
        o.create_task(orch::TaskKind::kRolloutWorker, R"({"role":"rollout-worker"})");
    }
    for (int v = 0; v < cfg.validators; ++v) {
        o.create_task(orch::TaskKind::kValidator, R"({"role":"validator"})");
    }
    orch::OrchestratorServer server(o, store, so);
    write_port(run_dir, "orchestrator", server.port());
    while (!g_stop) {
        std::this_thread::sleep_for(50ms);
    }
    server.stop();
    return 0;
}

int role_trainer(const RunConfig& cfg, const std::filesystem::path& run_dir) {
    install_signal_handlers();
    const Prepared prep = load_prepared(run_dir);
    policy::TrainConfig tc = cfg.train;
    tc.async_level = cfg.async_level;
    trainer::Learner learner(prep.base, tc, prep.dataset);
    trainer::StepCounter counter(static_cast<std::uint64_t>(cfg.async_level));
    EventStream metrics;
    trainer::TrainerServer server(counter, metrics);
    auto relays = relay_clients(cfg, run_dir);
    shardcast::Origin origin(trainer_key(cfg), relays, cfg.shard_size);
    orch::NodeClient oc("127.0.0.1", wait_port(run_dir, "orchestrator"), trainer_key(cfg));

    const auto csv_path = run_dir / "metrics.csv";
    const auto consumed_path = run_dir / "consumed.jsonl";
    std::ofstream(csv_path, std::ios::trunc) << trainer::csv_header() << '\n';
    std::ofstream(consumed_path, std::ios::trunc);

    {
        const Bytes b = policy::serialize(learner.params());
        origin.publish(ByteView(b.data(), b.size()), 0);
    }
    write_port(run_dir, "trainer", server.port());

    // Publisher: versions leave in order; training never waits for clients.
    std::mutex pub_mu;
    std::condition_variable pub_cv;
    std::deque<std::pair<std::uint64_t, Bytes>> pub_queue;
    std::atomic<std::uint64_t> published{0};
    bool pub_done = false;
    std::thread publisher([&] {
        while (true) {
            std::unique_lock lock(pub_mu);
            pub_cv.wait(lock, [&] { return pub_done || !pub_queue.empty(); });
            if (pub_queue.empty()) {
                return;
            }
            auto [v, bytes] = std::move(pub_queue.front());
            pub_queue.pop_front();
            lock.unlock();
            try {
                origin.publish(ByteView(bytes.data(), bytes.size()), v);
                published = v;
            } catch (const std::exception& e) {
                log_line("trainer", std::string("publish failed: ") + e.what());
            }
        }
    });

    // Scanner: canonical-order collection, feeding a queue of ready batches.
    std::mutex batch_mu;
    std::condition_variable batch_cv;
    std::deque<trainer::Batch> ready;
    std::atomic<bool> scan_failed{false};
    std::thread scanner([&] {
        trainer::BatchCollector collector(static_cast<std::size_t>(tc.group_size),
                                          static_cast<std::size_t>(tc.prompts_per_step), cfg.k_max);
        std::vector<crypto::PublicKey> roster;
        while (!g_stop && static_cast<int>(roster.size()) < cfg.workers) {
            roster.clear();
            if (auto nodes = oc.list_nodes()) {
                for (const auto& n : *nodes) {
                    if (n.role == orch::TaskKind::kRolloutWorker) {
                        roster.push_back(n.address);
                    }
                }
            }
            std::this_thread::sleep_for(50ms);
        }
        std::sort(roster.begin(), roster.end());
        std::map<crypto::PublicKey, orch::NodeState> states;
        auto refresh_states = [&] {
            if (auto nodes = oc.list_nodes()) {
                for (const auto& n : *nodes) {
                    states[n.address] = n.state;
                }
            }
        };
        for (std::uint64_t s = 0; s < static_cast<std::uint64_t>(cfg.steps) && !g_stop; ++s) {
            collector.begin(s);
            std::set<crypto::PublicKey> skip;
            std::uint64_t sub = 0;
            std::size_t cursor = 0;
            auto files = oc.list_step(s);
            refresh_states();
            while (!collector.complete() && !g_stop) {
                if (roster.empty() || skip.size() == roster.size()) {
                    std::this_thread::sleep_for(100ms);
                    refresh_states();
                    for (const auto& w : roster) {
                        if (states[w] != orch::NodeState::kDead && states[w] != orch::NodeState::kSlashed) {
                            skip.erase(w);
                        }
                    }
                    continue;
                }
                if (cursor == roster.size()) {
                    cursor = 0;
                    ++sub;
                }
                const auto& w = roster[cursor];
                if (skip.count(w) != 0) {
                    ++cursor;
                    continue;
                }
                const std::string key = rollout::storage_key(w, s, sub);
                const auto it = files.find(key);
                const auto st = it == files.end() ? orch::FileStatus::kUnknown : it->second;
                if (st == orch::FileStatus::kAccepted) {
                    const auto bytes = oc.fetch_accepted(key);
                    if (!bytes) {
                        std::this_thread::sleep_for(20ms);
                        continue;
                    }
                    collector.add_file(key, rollout::parse_file(*bytes));
                    ++cursor;
                } else if (st == orch::FileStatus::kRejected) {
                    collector.skip_file();
                    skip.insert(w);
                    ++cursor;
                } else if (st == orch::FileStatus::kUnknown &&
                           (states[w] == orch::NodeState::kDead ||
                            states[w] == orch::NodeState::kSlashed)) {
                    skip.insert(w);
                    ++cursor;
                } else {
                    std::this_thread::sleep_for(20ms);
                    files = oc.list_step(s);
                    refresh_states();
                }
            }
            if (g_stop) {
                break;
            }
            {
                std::lock_guard lock(batch_mu);
                ready.push_back(collector.take());
            }
            batch_cv.notify_all();
            counter.advance_to(s + 1);
        }
        batch_cv.notify_all();
    });

    int rc = 0;
    for (int s = 0; s < cfg.steps; ++s) {
        trainer::Batch batch;
        {
            std::unique_lock lock(batch_mu);
            batch_cv.wait_for(lock, 200ms, [&] { return !ready.empty() || g_stop; });
            if (g_stop) {
                rc = 1;
                break;
            }
            if (ready.empty()) {
                --s;
                continue;
            }
            batch = std::move(ready.front());
            ready.pop_front();
        }
        append_file(consumed_path, trainer::consumed_log_lines(batch));
        try {
            std::string rows;
            for (const auto& row : learner.train_step(batch)) {
                rows += trainer::csv_row(row) + "\n";
                metrics.publish(trainer::metrics_json(row));
            }
            append_file(csv_path, rows);
        } catch (const trainer::TrainingHalted& e) {
            log_line("trainer", std::string("halted: ") + e.what());
            const Bytes b = policy::serialize(learner.params());
            std::ofstream(run_dir / "last_good.ckpt", std::ios::binary)
                .write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
            server.set_status(learner.version(), true, published.load());
            rc = 3;
            break;
        }
        {
            std::lock_guard lock(pub_mu);
            pub_queue.emplace_back(learner.version(), policy::serialize(learner.params()));
        }
        pub_cv.notify_all();
        server.set_status(learner.version(), false, published.load());
        log_line("trainer", "step " + std::to_string(s) + " reward " +
                                std::to_string(batch.mean_task_reward()));
    }
    {
        std::lock_guard lock(pub_mu);
        pub_done = true;
    }
    pub_cv.notify_all();
    publisher.join();
    g_stop = true;
    scanner.join();
    server.stop();
    return rc;
}

int role_worker(const RunConfig& cfg, const std::filesystem::path& run_dir, int index) {
    install_signal_handlers();
    const Prepared prep = load_prepared(run_dir);
    const crypto::KeyPair key = worker_key(cfg, index);
    const std::string name = "worker-" + std::to_string(index);
    Membership m(cfg, run_dir, key, orch::TaskKind::kRolloutWorker, name);
    m.start();
    if (!m.wait_for_task()) {
        return 0;
    }
    Checkpoints ckpts(relay_clients(cfg, run_dir), trainer_key(cfg).public_key(), key.address_hex(),
                      mix_seed(cfg.seed, 0x60000 + static_cast<std::uint64_t>(index)));
    const int trainer_port = wait_port(run_dir, "trainer");
    const auto opts = live_worker_options(cfg);
    std::optional<adversarial::Attack> attack;
    if (auto it = cfg.adversarial.find(index); it != cfg.adversarial.end()) {
        attack = it->second;
    }
    std::optional<std::uint64_t> crash_step;
    if (auto it = cfg.crash.find(index); it != cfg.crash.end()) {
        crash_step = it->second;
    }
    auto& oc = m.client();
    int backoff_ms = 20;
    while (!g_stop) {
        if (m.slashed()) {
            std::this_thread::sleep_for(100ms);
            continue;
        }
        if (m.take_restart()) {
            m.log("restart requested; dropping cached checkpoints");
            ckpts.clear();
        }
        const auto info = trainer::poll_step("127.0.0.1", trainer_port);
        if (!info) {
            std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms));
            backoff_ms = std::min(backoff_ms * 2, 1000);
            continue;
        }
        backoff_ms = 20;
        if (info->step >= static_cast<std::uint64_t>(cfg.steps)) {
            std::this_thread::sleep_for(50ms);
            continue;
        }
        if (crash_step && info->step >= *crash_step) {
            m.log("simulated crash");
            std::_Exit(kExpectedCrash);
        }
        std::uint64_t sub = 0;
        for (const auto& [k, _] : oc.list_step(info->step)) {
            if (k.find(key.address_hex()) != std::string::npos) {
                ++sub;
            }
        }
        std::uint64_t got = info->version;
        const auto params = ckpts.get(info->version, &got);
        if (!params) {
            break;
        }
        std::string bytes;
        const bool attacking = attack && info->step >= cfg.attack_from_step &&
                               !(*attack == adversarial::Attack::kStaleCheckpoint && got == 0);
        if (attacking) {
            adversarial::AttackInput in;
            in.params = params.get();
            in.version = got;
            std::uint64_t older = 0;
            const auto stale = got > 0 ? ckpts.get(got - 1, &older) : nullptr;
            in.stale_params = stale.get();
            in.dataset = &prep.dataset;
            in.key = &key;
            in.step = info->step;
            in.submission_index = sub;
            in.opts = opts;
            in.seed = mix_seed(cfg.seed, info->step * 131 + sub);
            bytes = adversarial::make_file(*attack, in);
        } else {
            bytes = rollout::encode_file(rollout::generate_file(*params, got, prep.dataset,
                                                                key.public_key(), info->step, sub, opts),
                                         key);
        }
        const std::string file_key = rollout::storage_key(key.public_key(), info->step, sub);
        const int status = oc.put_rollout(file_key, bytes);
        if (status != 201) {
            m.log("upload of " + file_key + " returned " + std::to_string(status));
            std::this_thread::sleep_for(100ms);
            continue;
        }
        // Backpressure: wait for the verdict or for the step to move on.
        while (!g_stop) {
            const auto files = oc.list_step(info->step);
            const auto it = files.find(file_key);
            if (it != files.end() && (it->second == orch::FileStatus::kAccepted ||
                                      it->second == orch::FileStatus::kRejected)) {
                break;
            }
            const auto now = trainer::poll_step("127.0.0.1", trainer_port);
            if (now && now->step != info->step) {
                break;
            }
            std::this_thread::sleep_for(20ms);
        }
    }
    m.stop();
    return 0;
}

int role_validator(const RunConfig& cfg, const std::filesystem::path& run_dir, int index) {
    install_signal_handlers();
    const Prepared prep = load_prepared(run_dir);
    const crypto::KeyPair key = validator_key(cfg, index);
    Membership m(cfg, run_dir, key, orch::TaskKind::kValidator, "validator-" + std::to_string(index));
    m.start();
    if (!m.wait_for_task()) {
        return 0;
    }
    Checkpoints ckpts(relay_clients(cfg, run_dir), trainer_key(cfg).public_key(), key.address_hex(),
                      mix_seed(cfg.seed, 0x70000 + static_cast<std::uint64_t>(index)));
    validator::ValidatorConfig vc;
    vc.model = tasks::toy_model_config();
    vc.group_size = cfg.train.group_size;
    vc.groups_per_file = cfg.groups_per_file;
    vc.alpha = cfg.train.alpha;
    vc.adv_eps = cfg.train.adv_eps;
    vc.advantage_mode = cfg.train.advantage_mode;
    vc.q = cfg.q;
    vc.q_seed = cfg.seed;
    validator::Validator val(vc, prep.dataset,
                             [&](std::uint64_t v) { return ckpts.lookup(v); });
    auto& oc = m.client();
    while (!g_stop) {
        const auto claim = oc.claim();
        if (!claim) {
            std::this_thread::sleep_for(20ms);
            continue;
        }
        const auto verdict = val.validate(claim->bytes, claim->key);
        if (!verdict.accepted) {
            m.log("rejected " + claim->key + " at " +
                  std::string(validator::check_name(verdict.failed_check)) + ": " + verdict.details);
        }
        oc.post_verdict(verdict);
    }
    m.stop();
    return 0;
}

// ---- supervisor ----------------------------------------------------------------------

namespace {

struct Child {
    std::string name;
    pid_t pid = -1;
    bool exited = false;
    int status = 0;
};

pid_t spawn(const std::filesystem::path& exe, const std::vector<std::string>& args,
            const std::filesystem::path& log_path) {
    const pid_t parent = getpid();
    const pid_t pid = fork();
    if (pid < 0) {
        throw std::runtime_error("fork failed");
    }
    if (pid == 0) {
        prctl(PR_SET_PDEATHSIG, SIGKILL);
        if (getppid() != parent) {
            _exit(127);
        }
        const int fd = ::open(log_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        if (fd >= 0) {
            dup2(fd, STDOUT_FILENO);
            dup2(fd, STDERR_FILENO);
            close(fd);
        }
        std::vector<char*> argv;
        argv.push_back(const_cast<char*>(exe.c_str()));
        for (const auto& a : args) {
            argv.push_back(const_cast<char*>(a.c_str()));
        }
        argv.push_back(nullptr);
        execv(exe.c_str(), argv.data());
        _exit(127);
    }
    return pid;
}

void teardown(std::vector<Child>& children) {
    for (auto& c : children) {
        if (!c.exited) {
            kill(c.pid, SIGTERM);
        }
    }
    const auto deadline = std::chrono::steady_clock::now() + 5s;
    for (auto& c : children) {
        while (!c.exited) {
            const pid_t r = waitpid(c.pid, &c.status, WNOHANG);
            if (r == c.pid || r < 0) {
                c.exited = true;
                break;
            }
            if (std::chrono::steady_clock::now() > deadline) {
                kill(c.pid, SIGKILL);
                waitpid(c.pid, &c.status, 0);
                c.exited = true;
                break;
            }
            std::this_thread::sleep_for(10ms);
        }
    }
}

}  // namespace

LiveResult run_live(const RunConfig& cfg_in, const std::filesystem::path& self_exe) {
    RunConfig cfg = cfg_in;
    cfg.mode = "live";
    LiveResult out;
    out.run_dir = std::filesystem::absolute(cfg.out_dir);
    const auto& dir = out.run_dir;
    std::filesystem::remove_all(dir / "ports");
    std::filesystem::remove_all(dir / "storage");
    std::filesystem::create_directories(dir / "logs");
    save_prepared(prepare(cfg), dir);
    const auto config_path = dir / "config.ini";
    {
        std::ofstream(config_path, std::ios::trunc) << to_ini(cfg);
    }

    std::vector<Child> children;
    auto launch = [&](const std::string& name, std::vector<std::string> args) {
        args.insert(args.begin(), {"role", "--config", config_path.string(), "--run-dir", dir.string()});
        children.push_back(Child{name, spawn(self_exe, args, dir / "logs" / (name + ".log"))});
    };
    const auto t0 = std::chrono::steady_clock::now();
    try {
        for (int r = 0; r < cfg.relays; ++r) {
            launch("relay-" + std::to_string(r), {"relay", "--index", std::to_string(r)});
        }
        for (int r = 0; r < cfg.relays; ++r) {
            wait_port(dir, "relay-" + std::to_string(r));
        }
        launch("orchestrator", {"orchestrator"});
        wait_port(dir, "orchestrator");
        launch("trainer", {"trainer"});
        for (int v = 0; v < cfg.validators; ++v) {
            launch("validator-" + std::to_string(v), {"validator", "--index", std::to_string(v)});
        }
        for (int i = 0; i < cfg.workers; ++i) {
            launch("worker-" + std::to_string(i), {"worker", "--index", std::to_string(i)});
        }
    } catch (const std::exception& e) {
        teardown(children);
        out.message = std::string("startup failed: ") + e.what();
        return out;
    }

    const auto timeout = std::chrono::duration<double>(cfg.timeout_seconds);
    while (true) {
        bool trainer_done = false;
        for (auto& c : children) {
            if (c.exited) {
                continue;
            }
            if (waitpid(c.pid, &c.status, WNOHANG) == c.pid) {
                c.exited = true;
                const int code = WIFEXITED(c.status) ? WEXITSTATUS(c.status) : 128 + WTERMSIG(c.status);
                if (c.name == "trainer") {
                    trainer_done = true;
                    out.ok = code == 0;
                    out.message = code == 0 ? "trainer finished" : "trainer exited with " + std::to_string(code);
                } else if (!(c.name.rfind("worker-", 0) == 0 && code == kExpectedCrash)) {
                    out.message = c.name + " exited unexpectedly with " + std::to_string(code);
                    teardown(children);
                    return out;
                }
            }
        }
        if (trainer_done) {
            break;
        }
        if (std::chrono::steady_clock::now() - t0 > timeout) {
            out.liveness_failure = true;
            out.message = "liveness failure: trainer did not finish within " +
                          std::to_string(static_cast<int>(cfg.timeout_seconds)) + " s";
            break;
        }
        std::this_thread::sleep_for(50ms);
    }
    teardown(children);
    return out;
}

}  // namespace swarm::harness
