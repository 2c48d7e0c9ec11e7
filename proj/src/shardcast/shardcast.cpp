// SPDX-License-Identifier: Apache-2.0

#include "swarm/shardcast.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <regex>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace swarm::shardcast {

using nlohmann::json;

Clock steady_clock() {
    return [] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
            .count();
    };
}

// ---- manifest ---------------------------------------------------------------

namespace {

json manifest_json(const Manifest& m) {
    json j;
    j["assembled_digest"] = crypto::digest_hex(m.assembled_digest);
    j["num_shards"] = m.num_shards;
    std::vector<std::string> digests;
    for (const auto& d : m.shard_digests) {
        digests.push_back(crypto::digest_hex(d));
    }
    j["shard_digests"] = digests;
    j["shard_size"] = m.shard_size;
    j["version"] = m.version;
    return j;
}

std::string status_text(Status s) {
    switch (s) {
        case Status::kOk: return "ok";
        case Status::kDenied: return "denied";
        case Status::kNotFound: return "not found";
        case Status::kThrottled: return "throttled";
        case Status::kNotYet: return "not yet available";
        case Status::kUnreachable: return "unreachable";
    }
    return "?";
}

}  // namespace

std::string manifest_signing_payload(const Manifest& m) { return manifest_json(m).dump(); }

std::string encode_manifest(const Manifest& m) {
    json j = manifest_json(m);
    j["trainer_signature"] = to_hex(m.trainer_signature);
    return j.dump();
}

Manifest decode_manifest(const std::string& text) {
    try {
        const json j = json::parse(text);
        Manifest m;
        m.assembled_digest = crypto::digest_from_hex(j.at("assembled_digest").get<std::string>());
        m.num_shards = j.at("num_shards").get<std::uint64_t>();
        for (const auto& d : j.at("shard_digests").get<std::vector<std::string>>()) {
            m.shard_digests.push_back(crypto::digest_from_hex(d));
        }
        m.shard_size = j.at("shard_size").get<std::uint64_t>();
        m.trainer_signature = crypto::signature_from_hex(j.at("trainer_signature").get<std::string>());
        m.version = j.at("version").get<std::uint64_t>();
        if (m.shard_digests.size() != m.num_shards) {
            throw InvalidInput("manifest shard count disagrees with digest list");
        }
        return m;
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("malformed manifest: ") + e.what());
    }
}

bool verify_manifest(const Manifest& m, const crypto::PublicKey& trainer) {
    return m.shard_digests.size() == m.num_shards &&
           crypto::verify(trainer, manifest_signing_payload(m), m.trainer_signature);
}

std::vector<Bytes> split_shards(ByteView checkpoint, std::uint64_t shard_size) {
    if (shard_size == 0) {
        throw InvalidInput("shard_size must be positive");
    }
    std::vector<Bytes> out;
    for (std::size_t off = 0; off < checkpoint.size(); off += shard_size) {
        const std::size_t end = std::min<std::size_t>(checkpoint.size(), off + shard_size);
        out.emplace_back(checkpoint.begin() + static_cast<std::ptrdiff_t>(off),
                         checkpoint.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

Manifest make_manifest(ByteView checkpoint, std::uint64_t version, std::uint64_t shard_size,
                       const crypto::KeyPair& trainer) {
    Manifest m;
    m.version = version;
    m.shard_size = shard_size;
    for (const auto& shard : split_shards(checkpoint, shard_size)) {
        m.shard_digests.push_back(crypto::sha256(shard));
    }
    m.num_shards = m.shard_digests.size();
    m.assembled_digest = crypto::sha256(checkpoint);
    m.trainer_signature = trainer.sign(manifest_signing_payload(m));
    return m;
}

// ---- relay ------------------------------------------------------------------

bool TokenBucket::take(const std::string& client, double now) {
    auto [it, fresh] = state_.try_emplace(client, State{burst_, now});
    State& s = it->second;
    if (!fresh) {
        s.tokens = std::min(burst_, s.tokens + std::max(0.0, now - s.last) * rate_);
        s.last = now;
    }
    if (s.tokens >= 1.0) {
        s.tokens -= 1.0;
        return true;
    }
    return false;
}

RelayStore::RelayStore(crypto::PublicKey trainer, RelayOptions opts, Clock clock)
    : trainer_(trainer), opts_(opts), clock_(std::move(clock)), bucket_(opts.rate, opts.burst) {
    if (opts_.retention < 1) {
        throw InvalidInput("retention must be >= 1");
    }
}

void RelayStore::put_manifest(const Manifest& m) {
    if (!verify_manifest(m, trainer_)) {
        throw InvalidInput("manifest signature does not verify");
    }
    std::lock_guard lock(mu_);
    if (newest_ && m.version <= *newest_) {
        throw InvalidInput("version " + std::to_string(m.version) + " is not newer than " +
                           std::to_string(*newest_));
    }
    Entry e;
    e.manifest = m;
    e.shards.resize(m.num_shards);
    versions_.emplace(m.version, std::move(e));
    newest_ = m.version;
    const auto keep = static_cast<std::uint64_t>(opts_.retention - 1);
    const std::uint64_t oldest = m.version >= keep ? m.version - keep : 0;
    versions_.erase(versions_.begin(), versions_.lower_bound(oldest));
    max_held_ = std::max(max_held_, versions_.size());
}

void RelayStore::put_shard(std::uint64_t version, std::uint64_t index, Bytes bytes) {
    std::lock_guard lock(mu_);
    const auto it = versions_.find(version);
    if (it == versions_.end()) {
        throw InvalidInput("shard for unknown or retired version " + std::to_string(version));
    }
    Entry& e = it->second;
    if (index >= e.manifest.num_shards) {
        throw InvalidInput("shard index out of range");
    }
    if (crypto::sha256(bytes) != e.manifest.shard_digests[index]) {
        throw InvalidInput("shard bytes do not match the manifest digest");
    }
    e.shards[index] = std::move(bytes);
}

std::optional<Reply> RelayStore::admit(const std::string& client) {
    if (opts_.enforce_allowlist && !allow_.contains(client)) {
        return Reply{Status::kDenied, {}};
    }
    if (!bucket_.take(client, clock_())) {
        return Reply{Status::kThrottled, {}};
    }
    return std::nullopt;
}

Reply RelayStore::get_manifest(const std::string& client, std::uint64_t version) {
    std::lock_guard lock(mu_);
    if (auto r = admit(client)) {
        return *r;
    }
    const auto it = versions_.find(version);
    if (it == versions_.end()) {
        return {Status::kNotFound, {}};
    }
    const std::string text = encode_manifest(it->second.manifest);
    return {Status::kOk, Bytes(text.begin(), text.end())};
}

Reply RelayStore::get_latest_manifest(const std::string& client) {
    std::lock_guard lock(mu_);
    if (auto r = admit(client)) {
        return *r;
    }
    if (versions_.empty()) {
        return {Status::kNotFound, {}};
    }
    const std::string text = encode_manifest(versions_.rbegin()->second.manifest);
    return {Status::kOk, Bytes(text.begin(), text.end())};
}

Reply RelayStore::get_shard(const std::string& client, std::uint64_t version, std::uint64_t index) {
    std::lock_guard lock(mu_);
    if (auto r = admit(client)) {
        return *r;
    }
    const auto it = versions_.find(version);
    if (it == versions_.end() || index >= it->second.manifest.num_shards) {
        return {Status::kNotFound, {}};
    }
    const auto& shard = it->second.shards[index];
    if (!shard) {
        return {Status::kNotYet, {}};
    }
    return {Status::kOk, *shard};
}

Reply RelayStore::probe(const std::string& client) {
    std::lock_guard lock(mu_);
    if (auto r = admit(client)) {
        return *r;
    }
    return {Status::kOk, Bytes(opts_.probe_bytes, 0)};
}

void RelayStore::set_allowlist(std::set<std::string> addresses) {
    std::lock_guard lock(mu_);
    allow_ = std::move(addresses);
}

std::set<std::string> RelayStore::allowlist() const {
    std::lock_guard lock(mu_);
    return allow_;
}

std::size_t RelayStore::versions_held() const {
    std::lock_guard lock(mu_);
    return versions_.size();
}

std::optional<std::uint64_t> RelayStore::latest_version() const {
    std::lock_guard lock(mu_);
    return newest_;
}

std::size_t RelayStore::max_versions_held() const {
    std::lock_guard lock(mu_);
    return max_held_;
}

Reply dispatch_get(RelayStore& store, const std::string& path, const std::string& client) {
    static const std::regex manifest_re(R"(^/manifest/(\d+)$)");
    static const std::regex shard_re(R"(^/shard/(\d+)/(\d+)$)");
    std::smatch m;
    if (path == "/probe") {
        return store.probe(client);
    }
    if (path == "/manifest/latest") {
        return store.get_latest_manifest(client);
    }
    try {
        if (std::regex_match(path, m, manifest_re)) {
            return store.get_manifest(client, std::stoull(m[1].str()));
        }
        if (std::regex_match(path, m, shard_re)) {
            return store.get_shard(client, std::stoull(m[1].str()), std::stoull(m[2].str()));
        }
    } catch (const std::out_of_range&) {
    }
    return {Status::kNotFound, {}};
}

void LinkShaper::transfer(std::size_t bytes) {
    using namespace std::chrono;
    steady_clock::time_point done;
    {
        std::lock_guard lock(mu_);
        const auto now = steady_clock::now();
        const auto start = std::max(now, busy_until_);
        busy_until_ = start + duration_cast<steady_clock::duration>(
                                  duration<double>(static_cast<double>(bytes) / rate_));
        done = busy_until_ + duration_cast<steady_clock::duration>(duration<double>(latency_));
    }
    std::this_thread::sleep_until(done);
}

LocalRelay::LocalRelay(std::shared_ptr<RelayStore> store, Faults faults)
    : store_(std::move(store)), faults_(faults), rng_(faults.seed) {}

void LocalRelay::set_faults(Faults f) {
    std::lock_guard lock(mu_);
    faults_ = f;
    rng_ = SplitMix64(f.seed);
}

Reply LocalRelay::get(const std::string& path, const std::string& client) {
    Faults f;
    {
        std::lock_guard lock(mu_);
        f = faults_;
    }
    if (f.deny_all) {
        return {Status::kDenied, {}};
    }
    if (f.throttle_all) {
        return {Status::kThrottled, {}};
    }
    Reply r = dispatch_get(*store_, path, client);
    if (r.status == Status::kOk) {
        std::lock_guard lock(mu_);
        if (path.starts_with("/shard/") && !r.body.empty() && rng_.uniform() < f.corrupt_prob) {
            r.body[rng_.below(r.body.size())] ^= 0x01;
        }
        if (path.starts_with("/manifest/") && rng_.uniform() < f.forge_manifest_prob) {
            Manifest m = decode_manifest(to_string(r.body));
            m.assembled_digest[0] ^= 0x01;
            const std::string text = encode_manifest(m);
            r.body.assign(text.begin(), text.end());
        }
    }
    r.seconds = static_cast<double>(r.body.size() + 200) / f.bandwidth;
    return r;
}

// ---- HTTP -------------------------------------------------------------------

namespace {

const char* kAddressHeader = "X-Node-Address";

std::string client_id(const httplib::Request& req) {
    const auto a = req.get_header_value(kAddressHeader);
    return a.empty() ? req.remote_addr : a;
}

}  // namespace

RelayServer::RelayServer(std::shared_ptr<RelayStore> store, std::string host, int port,
                         std::shared_ptr<LinkShaper> egress)
    : store_(std::move(store)), egress_(std::move(egress)),
      server_(std::make_unique<httplib::Server>()) {
    auto serve = [this](const httplib::Request& req, httplib::Response& res) {
        Reply r = dispatch_get(*store_, req.path, client_id(req));
        if (r.status == Status::kOk && egress_) {
            egress_->transfer(r.body.size());
        }
        res.status = static_cast<int>(r.status);
        res.set_content(std::string(r.body.begin(), r.body.end()), "application/octet-stream");
    };
    server_->Get("/probe", serve);
    server_->Get(R"(/manifest/(latest|\d+))", serve);
    server_->Get(R"(/shard/(\d+)/(\d+))", serve);
    server_->Put(R"(/manifest/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            store_->put_manifest(decode_manifest(req.body));
            res.status = 200;
        } catch (const InvalidInput& e) {
            res.status = 400;
            res.set_content(e.what(), "text/plain");
        }
    });
    server_->Put(R"(/shard/(\d+)/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            store_->put_shard(std::stoull(req.matches[1].str()), std::stoull(req.matches[2].str()),
                              Bytes(req.body.begin(), req.body.end()));
            res.status = 200;
        } catch (const std::exception& e) {
            res.status = 400;
            res.set_content(e.what(), "text/plain");
        }
    });
    server_->Post("/allowlist", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            const json j = json::parse(req.body);
            const auto list = j.at("allow").get<std::vector<std::string>>();
            store_->set_allowlist(std::set<std::string>(list.begin(), list.end()));
            res.status = 200;
        } catch (const json::exception& e) {
            res.status = 400;
            res.set_content(e.what(), "text/plain");
        }
    });
    port_ = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
    if (port_ < 0) {
        throw std::runtime_error("relay could not bind " + host + ":" + std::to_string(port));
    }
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
}

RelayServer::~RelayServer() { stop(); }

void RelayServer::stop() {
    if (thread_.joinable()) {
        server_->stop();
        thread_.join();
    }
}

HttpRelay::HttpRelay(std::string host, int port, double timeout_sec,
                     std::shared_ptr<LinkShaper> uplink)
    : host_(std::move(host)), port_(port), timeout_(timeout_sec), uplink_(std::move(uplink)) {}

Reply HttpRelay::get(const std::string& path, const std::string& client) {
    httplib::Client cli(host_, port_);
    const auto t = std::chrono::duration<double>(timeout_);
    cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(t));
    cli.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(t));
    auto res = cli.Get(path, {{kAddressHeader, client}});
    if (!res) {
        return {Status::kUnreachable, {}};
    }
    Reply r;
    switch (res->status) {
        case 200: r.status = Status::kOk; break;
        case 403: r.status = Status::kDenied; break;
        case 429: r.status = Status::kThrottled; break;
        case 503: r.status = Status::kNotYet; break;
        default: r.status = Status::kNotFound; break;
    }
    r.body.assign(res->body.begin(), res->body.end());
    return r;
}

void HttpRelay::put_manifest(const Manifest& m) {
    const std::string text = encode_manifest(m);
    if (uplink_) {
        uplink_->transfer(text.size());
    }
    httplib::Client cli(host_, port_);
    auto res = cli.Put("/manifest/" + std::to_string(m.version), text, "application/json");
    if (!res || res->status != 200) {
        throw InvalidInput("relay refused manifest: " + (res ? res->body : std::string("unreachable")));
    }
}

void HttpRelay::put_shard(std::uint64_t version, std::uint64_t index, const Bytes& bytes) {
    if (uplink_) {
        uplink_->transfer(bytes.size());
    }
    httplib::Client cli(host_, port_);
    auto res = cli.Put("/shard/" + std::to_string(version) + "/" + std::to_string(index),
                       std::string(bytes.begin(), bytes.end()), "application/octet-stream");
    if (!res || res->status != 200) {
        throw InvalidInput("relay refused shard: " + (res ? res->body : std::string("unreachable")));
    }
}

// ---- origin -----------------------------------------------------------------

Origin::Origin(crypto::KeyPair trainer, std::vector<std::shared_ptr<RelayEndpoint>> relays,
               std::uint64_t shard_size)
    : trainer_(std::move(trainer)), relays_(std::move(relays)), shard_size_(shard_size) {}

Manifest Origin::publish(ByteView checkpoint, std::uint64_t version,
                         const std::function<void(std::uint64_t)>& on_shard) {
    if (last_ && version <= *last_) {
        throw InvalidInput("duplicate or out-of-order checkpoint version " + std::to_string(version));
    }
    Manifest m = make_manifest(checkpoint, version, shard_size_, trainer_);
    const auto shards = split_shards(checkpoint, shard_size_);
    // A relay that is down misses this version; the others still get it.
    std::vector<bool> live(relays_.size(), true);
    for (std::size_t r = 0; r < relays_.size(); ++r) {
        try {
            relays_[r]->put_manifest(m);
        } catch (const std::exception&) {
            live[r] = false;
        }
    }
    for (std::size_t i = 0; i < shards.size(); ++i) {
        for (std::size_t r = 0; r < relays_.size(); ++r) {
            if (!live[r]) {
                continue;
            }
            try {
                relays_[r]->put_shard(version, i, shards[i]);
            } catch (const std::exception&) {
                live[r] = false;
            }
        }
        if (on_shard) {
            on_shard(i);
        }
    }
    last_ = version;
    return m;
}

// ---- selection --------------------------------------------------------------

std::vector<double> selection_probabilities(const std::vector<RelayStats>& stats, double p_min) {
    const std::size_t n = stats.size();
    if (n == 0) {
        return {};
    }
    std::vector<double> w(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        w[i] = std::max(0.0, stats[i].success_ema * stats[i].bandwidth_ema);
        total += w[i];
    }
    const double uniform = 1.0 / static_cast<double>(n);
    if (!(total > 0.0) || p_min * static_cast<double>(n) >= 1.0) {
        return std::vector<double>(n, uniform);
    }
    std::vector<double> p(n);
    std::vector<bool> floored(n, false);
    for (;;) {
        double free_weight = 0.0;
        std::size_t n_floored = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (floored[i]) {
                ++n_floored;
            } else {
                free_weight += w[i];
            }
        }
        const double free_mass = 1.0 - p_min * static_cast<double>(n_floored);
        const std::size_t n_free = n - n_floored;
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (floored[i]) {
                p[i] = p_min;
            } else {
                p[i] = free_weight > 0.0 ? free_mass * w[i] / free_weight
                                         : free_mass / static_cast<double>(n_free);
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (!floored[i] && p[i] < p_min) {
                floored[i] = true;
                changed = true;
            }
        }
        if (!changed) {
            return p;
        }
    }
}

std::size_t select_relay(const std::vector<double>& probs, SplitMix64& rng) {
    if (probs.empty()) {
        throw InvalidInput("no relays to select from");
    }
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) {
            return i;
        }
    }
    for (std::size_t i = probs.size(); i-- > 0;) {
        if (probs[i] > 0.0) {
            return i;
        }
    }
    return probs.size() - 1;
}

void update_stats(RelayStats& s, double observed_bytes_per_sec, bool success, double beta,
                  double now) {
    s.bandwidth_ema = (1.0 - beta) * s.bandwidth_ema + beta * observed_bytes_per_sec;
    s.success_ema = (1.0 - beta) * s.success_ema + beta * (success ? 1.0 : 0.0);
    s.last_probe = now;
    s.probed = true;
}

void heal(std::vector<RelayStats>& stats, double now, const SelectionOptions& opts) {
    if (stats.empty()) {
        return;
    }
    double mean = 0.0;
    for (const auto& s : stats) {
        mean += s.bandwidth_ema;
    }
    mean /= static_cast<double>(stats.size());
    for (auto& s : stats) {
        if (now - s.last_probe > opts.heal_after) {
            s.bandwidth_ema += opts.heal_pull * (mean - s.bandwidth_ema);
        }
    }
}

// ---- client -----------------------------------------------------------------

Client::Client(std::vector<std::shared_ptr<RelayEndpoint>> relays, crypto::PublicKey trainer,
               std::string client_address, ClientOptions opts, Clock clock)
    : relays_(std::move(relays)), trainer_(trainer), address_(std::move(client_address)),
      opts_(opts), clock_(std::move(clock)), stats_(relays_.size()), rng_(opts.seed) {
    if (relays_.empty()) {
        throw InvalidInput("client needs at least one relay");
    }
    last_heal_ = clock_();
}

void Client::observe(std::size_t relay, std::size_t bytes, double seconds, bool success) {
    std::lock_guard lock(mu_);
    RelayStats& s = stats_[relay];
    const double now = clock_();
    double bw = s.bandwidth_ema;
    if (success && seconds > 0.0) {
        bw = static_cast<double>(bytes) / seconds;
    } else if (!success) {
        bw = 0.0;
    }
    if (success && !s.probed) {
        // First successful measurement seeds the estimate directly.
        s.bandwidth_ema = bw;
        s.last_probe = now;
        s.probed = true;
        s.success_ema = (1.0 - opts_.selection.beta) * s.success_ema + opts_.selection.beta;
        return;
    }
    if (success) {
        update_stats(s, bw, true, opts_.selection.beta, now);
    } else {
        // A failure says nothing about bandwidth; only the success rate moves.
        s.success_ema = (1.0 - opts_.selection.beta) * s.success_ema;
        s.last_probe = now;
    }
}

void Client::probe_all() {
    for (std::size_t i = 0; i < relays_.size(); ++i) {
        const double t0 = clock_();
        const Reply r = relays_[i]->get("/probe", address_);
        const double dt = r.seconds > 0.0 ? r.seconds : clock_() - t0;
        observe(i, r.body.size(), dt, r.status == Status::kOk);
    }
}

std::vector<RelayStats> Client::stats() const {
    std::lock_guard lock(mu_);
    return stats_;
}

std::vector<double> Client::probabilities() const {
    std::lock_guard lock(mu_);
    return selection_probabilities(stats_, opts_.selection.p_min);
}

std::size_t Client::pick(const std::vector<bool>& excluded) {
    std::lock_guard lock(mu_);
    const double now = clock_();
    if (now - last_heal_ >= 1.0) {
        heal(stats_, now, opts_.selection);
        last_heal_ = now;
    }
    auto p = selection_probabilities(stats_, opts_.selection.p_min);
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (excluded[i]) {
            p[i] = 0.0;
        }
        total += p[i];
    }
    if (!(total > 0.0)) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] = excluded[i] ? 0.0 : 1.0;
            total += p[i];
        }
    }
    for (double& x : p) {
        x /= total;
    }
    return select_relay(p, rng_);
}

Manifest Client::fetch_manifest(std::uint64_t version) {
    const std::size_t n = relays_.size();
    std::vector<bool> excluded(n, false);
    std::size_t refused = 0;
    std::size_t forged = 0;
    for (std::size_t attempt = 0; attempt < n; ++attempt) {
        const std::size_t idx = pick(excluded);
        excluded[idx] = true;
        const double t0 = clock_();
        const Reply r = relays_[idx]->get("/manifest/" + std::to_string(version), address_);
        const double dt = r.seconds > 0.0 ? r.seconds : clock_() - t0;
        if (r.status == Status::kOk) {
            try {
                Manifest m = decode_manifest(to_string(r.body));
                if (m.version == version && verify_manifest(m, trainer_)) {
                    observe(idx, r.body.size(), dt, true);
                    return m;
                }
            } catch (const InvalidInput&) {
            }
            ++forged;
            observe(idx, 0, dt, false);
            continue;
        }
        if (r.status == Status::kDenied || r.status == Status::kThrottled) {
            ++refused;
        }
        observe(idx, 0, dt, false);
    }
    if (refused == n) {
        throw StalenessError("every relay denied or throttled the manifest request");
    }
    if (forged > 0) {
        throw InvalidInput("no relay served a manifest that verifies for version " +
                           std::to_string(version));
    }
    throw StalenessError("version " + std::to_string(version) + " is not available on any relay");
}

Bytes Client::fetch_shard(const Manifest& m, std::uint64_t index, DownloadReport& report,
                          std::mutex& report_mu) {
    const std::size_t n = relays_.size();
    const std::string path = "/shard/" + std::to_string(m.version) + "/" + std::to_string(index);
    const double wait_start = clock_();
    for (int round = 0; round < opts_.max_fetch_rounds; ++round) {
        std::vector<bool> excluded(n, false);
        std::size_t refused = 0;
        std::size_t tried = 0;
        while (tried < n) {
            const std::size_t idx = pick(excluded);
            const double t0 = clock_();
            const Reply r = relays_[idx]->get(path, address_);
            const double dt = r.seconds > 0.0 ? r.seconds : clock_() - t0;
            {
                std::lock_guard lock(report_mu);
                ++report.shard_fetches;
            }
            if (r.status == Status::kNotYet) {
                if (clock_() - wait_start > opts_.not_ready_timeout) {
                    throw StalenessError("shard " + std::to_string(index) + " never became available");
                }
                std::this_thread::sleep_for(std::chrono::duration<double>(opts_.not_ready_wait));
                continue;
            }
            excluded[idx] = true;
            ++tried;
            if (r.status == Status::kOk) {
                if (crypto::sha256(r.body) == m.shard_digests[index]) {
                    observe(idx, r.body.size(), dt, true);
                    return r.body;
                }
                std::lock_guard lock(report_mu);
                ++report.corrupt_shards;
            } else if (r.status == Status::kDenied || r.status == Status::kThrottled) {
                ++refused;
            }
            observe(idx, 0, dt, false);
        }
        if (refused == n) {
            throw StalenessError("every relay denied or throttled shard " + std::to_string(index) +
                                 " (" + status_text(Status::kThrottled) + "/" +
                                 status_text(Status::kDenied) + ")");
        }
    }
    throw StalenessError("shard " + std::to_string(index) + " could not be fetched intact");
}

DownloadReport Client::download(std::uint64_t version) {
    if (failed_versions_.contains(version)) {
        throw InvalidInput("version " + std::to_string(version) + " already failed verification");
    }
    DownloadReport report;
    report.version = version;
    Manifest m;
    try {
        m = fetch_manifest(version);
    } catch (const InvalidInput&) {
        failed_versions_.insert(version);
        throw;
    }
    std::vector<Bytes> shards(m.num_shards);
    std::mutex report_mu;
    std::atomic<std::uint64_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto work = [&] {
        for (;;) {
            const std::uint64_t i = next.fetch_add(1);
            if (i >= m.num_shards) {
                return;
            }
            {
                std::lock_guard lock(error_mu);
                if (error) {
                    return;
                }
            }
            try {
                shards[i] = fetch_shard(m, i, report, report_mu);
                if (i == 0) {
                    std::lock_guard lock(report_mu);
                    report.first_shard_time = clock_();
                }
            } catch (...) {
                std::lock_guard lock(error_mu);
                if (!error) {
                    error = std::current_exception();
                }
                return;
            }
        }
    };
    const auto threads = static_cast<std::size_t>(std::max(1, opts_.concurrency));
    if (threads == 1 || m.num_shards <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < std::min<std::uint64_t>(threads, m.num_shards); ++t) {
            pool.emplace_back(work);
        }
        for (auto& t : pool) {
            t.join();
        }
    }
    if (error) {
        std::rethrow_exception(error);
    }
    crypto::Sha256 h;
    for (const auto& s : shards) {
        report.bytes.insert(report.bytes.end(), s.begin(), s.end());
        h.update(s);
    }
    if (h.finish() != m.assembled_digest) {
        failed_versions_.insert(version);
        throw InvalidInput("checkpoint digest mismatch for version " + std::to_string(version));
    }
    return report;
}

DownloadReport Client::download_at_least(std::uint64_t version, std::uint64_t max_version) {
    std::vector<std::uint64_t> skipped;
    for (std::uint64_t v = version; v <= max_version; ++v) {
        if (failed_versions_.contains(v)) {
            skipped.push_back(v);
            continue;
        }
        try {
            DownloadReport r = download(v);
            r.skipped_versions = skipped;
            return r;
        } catch (const StalenessError&) {
            throw;
        } catch (const InvalidInput&) {
            skipped.push_back(v);
        }
    }
    throw StalenessError("no verifiable checkpoint between versions " + std::to_string(version) +
                         " and " + std::to_string(max_version));
}

std::optional<std::uint64_t> Client::latest_version() {
    std::optional<std::uint64_t> best;
    for (const auto& relay : relays_) {
        const Reply r = relay->get("/manifest/latest", address_);
        if (r.status != Status::kOk) {
            continue;
        }
        try {
            const Manifest m = decode_manifest(to_string(r.body));
            if (verify_manifest(m, trainer_) && (!best || m.version > *best)) {
                best = m.version;
            }
        } catch (const InvalidInput&) {
        }
    }
    return best;
}

}  // namespace swarm::shardcast
