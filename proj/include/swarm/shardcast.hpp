// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint broadcast: the origin splits a serialized checkpoint into
// fixed-size shards, publishes a signed manifest, and streams shards to relays;
// clients pick relays in proportion to their observed throughput and verify
// every shard and the assembled stream against the manifest.
//
// Manifest (compact JSON, keys ascending):
//   {"assembled_digest":<hex32>,"num_shards":<u64>,"shard_digests":[<hex32>...],
//    "shard_size":<u64>,"trainer_signature":<hex64>,"version":<u64>}
// The signature covers the same object without "trainer_signature".
//
// Relay HTTP surface:
//   GET  /manifest/{v}        200 manifest | 404 unknown or retired
//   GET  /manifest/latest     200 newest manifest | 404 none yet
//   GET  /shard/{v}/{i}       200 bytes | 404 unknown/retired | 503 not uploaded yet
//   GET  /probe               200 fixed dummy payload
//   PUT  /manifest/{v}        origin upload (manifest must verify)
//   PUT  /shard/{v}/{i}       origin upload (bytes must match the manifest digest)
//   POST /allowlist           {"allow":[<hex32>...]} replaces the allowlist
// Clients identify with header X-Node-Address: <hex32>. Status 429 means
// throttled, 403 means not on the allowlist.

#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "swarm/common.hpp"
#include "swarm/crypto.hpp"
#include "swarm/rng.hpp"

namespace httplib {
class Server;
}

namespace swarm::shardcast {

/// Seconds on some monotone clock; tests substitute a simulated one.
using Clock = std::function<double()>;
Clock steady_clock();

inline constexpr std::uint64_t kDefaultShardSize = 1u << 20;
inline constexpr int kRetention = 5;

struct Manifest {
    std::uint64_t version = 0;
    std::uint64_t num_shards = 0;
    std::uint64_t shard_size = kDefaultShardSize;
    std::vector<crypto::Digest> shard_digests;
    crypto::Digest assembled_digest{};
    crypto::Signature trainer_signature{};

    bool operator==(const Manifest&) const = default;
};

std::string manifest_signing_payload(const Manifest& m);
std::string encode_manifest(const Manifest& m);
Manifest decode_manifest(const std::string& text);
bool verify_manifest(const Manifest& m, const crypto::PublicKey& trainer);

std::vector<Bytes> split_shards(ByteView checkpoint, std::uint64_t shard_size);
Manifest make_manifest(ByteView checkpoint, std::uint64_t version, std::uint64_t shard_size,
                       const crypto::KeyPair& trainer);

/// Per-client token bucket: `rate` tokens per second, capacity `burst`.
class TokenBucket {
public:
    TokenBucket(double rate, double burst) : rate_(rate), burst_(burst) {}
    /// Consumes one token for `client` at time `now`; false means throttle.
    bool take(const std::string& client, double now);

private:
    struct State {
        double tokens;
        double last;
    };
    double rate_;
    double burst_;
    std::map<std::string, State> state_;
};

enum class Status {
    kUnreachable = 0,
    kOk = 200,
    kDenied = 403,
    kNotFound = 404,
    kThrottled = 429,
    kNotYet = 503,
};

struct Reply {
    Status status = Status::kNotFound;
    Bytes body;
    double seconds = 0.0;  // transfer time if the transport models it, else 0
};

struct RelayOptions {
    int retention = kRetention;
    double rate = 200.0;  // requests per second per client
    double burst = 400.0;
    bool enforce_allowlist = false;
    std::size_t probe_bytes = 64 * 1024;
};

/// Transport-independent relay state: stored versions, retention, rate
/// limiting and the orchestrator-fed allowlist. Thread-safe.
class RelayStore {
public:
    RelayStore(crypto::PublicKey trainer, RelayOptions opts = {}, Clock clock = steady_clock());

    /// Registers a version. Throws InvalidInput on a bad signature or a version
    /// that is not newer than every version seen so far.
    void put_manifest(const Manifest& m);
    /// Stores shard bytes after checking them against the manifest digest.
    void put_shard(std::uint64_t version, std::uint64_t index, Bytes bytes);

    Reply get_manifest(const std::string& client, std::uint64_t version);
    Reply get_latest_manifest(const std::string& client);
    Reply get_shard(const std::string& client, std::uint64_t version, std::uint64_t index);
    Reply probe(const std::string& client);

    void set_allowlist(std::set<std::string> addresses);
    std::set<std::string> allowlist() const;

    std::size_t versions_held() const;
    std::optional<std::uint64_t> latest_version() const;
    /// Largest number of versions ever held at once.
    std::size_t max_versions_held() const;

private:
    struct Entry {
        Manifest manifest;
        std::vector<std::optional<Bytes>> shards;
    };
    std::optional<Reply> admit(const std::string& client);

    crypto::PublicKey trainer_;
    RelayOptions opts_;
    Clock clock_;
    mutable std::mutex mu_;
    std::map<std::uint64_t, Entry> versions_;
    std::optional<std::uint64_t> newest_;
    std::size_t max_held_ = 0;
    TokenBucket bucket_;
    std::set<std::string> allow_;
};

/// Bandwidth shaping for one link: transfers are serialized on the link and
/// each takes latency + bytes / rate seconds of wall time.
class LinkShaper {
public:
    LinkShaper(double bytes_per_sec, double latency_sec = 0.0)
        : rate_(bytes_per_sec), latency_(latency_sec) {}
    /// Blocks until a transfer of `bytes` would have completed on this link.
    void transfer(std::size_t bytes);
    double rate() const { return rate_; }

private:
    double rate_;
    double latency_;
    std::mutex mu_;
    std::chrono::steady_clock::time_point busy_until_{};
};

/// One relay as seen by a client.
class RelayEndpoint {
public:
    virtual ~RelayEndpoint() = default;
    /// GET `path` ("/manifest/3", "/shard/3/0", "/probe", "/manifest/latest").
    virtual Reply get(const std::string& path, const std::string& client) = 0;
    /// Origin uploads.
    virtual void put_manifest(const Manifest& m) = 0;
    virtual void put_shard(std::uint64_t version, std::uint64_t index, const Bytes& bytes) = 0;
};

/// Direct in-process relay access, with optional fault injection.
class LocalRelay : public RelayEndpoint {
public:
    struct Faults {
        double corrupt_prob = 0.0;         // flip one byte of a served shard
        double forge_manifest_prob = 0.0;  // serve a manifest with a bad signature
        bool deny_all = false;
        bool throttle_all = false;
        double bandwidth = 1e8;  // bytes/s reported as the transfer time of each reply
        std::uint64_t seed = 0;
    };
    explicit LocalRelay(std::shared_ptr<RelayStore> store) : LocalRelay(std::move(store), Faults{}) {}
    LocalRelay(std::shared_ptr<RelayStore> store, Faults faults);

    Reply get(const std::string& path, const std::string& client) override;
    void put_manifest(const Manifest& m) override { store_->put_manifest(m); }
    void put_shard(std::uint64_t version, std::uint64_t index, const Bytes& bytes) override {
        store_->put_shard(version, index, bytes);
    }
    RelayStore& store() { return *store_; }
    void set_faults(Faults f);

private:
    std::shared_ptr<RelayStore> store_;
    std::mutex mu_;
    Faults faults_;
    SplitMix64 rng_;
};

/// Routes a GET path to a RelayStore; shared by LocalRelay and the HTTP server.
Reply dispatch_get(RelayStore& store, const std::string& path, const std::string& client);

/// HTTP relay server over cpp-httplib.
class RelayServer {
public:
    RelayServer(std::shared_ptr<RelayStore> store, std::string host = "127.0.0.1", int port = 0,
                std::shared_ptr<LinkShaper> egress = nullptr);
    ~RelayServer();
    RelayServer(const RelayServer&) = delete;
    RelayServer& operator=(const RelayServer&) = delete;

    int port() const { return port_; }
    void stop();
    RelayStore& store() { return *store_; }

private:
    std::shared_ptr<RelayStore> store_;
    std::shared_ptr<LinkShaper> egress_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
    int port_ = 0;
};

/// Client side of an HTTP relay.
class HttpRelay : public RelayEndpoint {
public:
    HttpRelay(std::string host, int port, double timeout_sec = 10.0,
              std::shared_ptr<LinkShaper> uplink = nullptr);
    Reply get(const std::string& path, const std::string& client) override;
    void put_manifest(const Manifest& m) override;
    void put_shard(std::uint64_t version, std::uint64_t index, const Bytes& bytes) override;

private:
    std::string host_;
    int port_;
    double timeout_;
    std::shared_ptr<LinkShaper> uplink_;
};

/// Publishes checkpoints to every relay: manifest first, then shards in order.
class Origin {
public:
    Origin(crypto::KeyPair trainer, std::vector<std::shared_ptr<RelayEndpoint>> relays,
           std::uint64_t shard_size = kDefaultShardSize);

    /// Throws InvalidInput if `version` is not newer than the last one. The
    /// optional callback fires after shard i has reached every relay.
    Manifest publish(ByteView checkpoint, std::uint64_t version,
                     const std::function<void(std::uint64_t)>& on_shard = {});
    std::optional<std::uint64_t> last_version() const { return last_; }
    const crypto::PublicKey& public_key() const { return trainer_.public_key(); }

private:
    crypto::KeyPair trainer_;
    std::vector<std::shared_ptr<RelayEndpoint>> relays_;
    std::uint64_t shard_size_;
    std::optional<std::uint64_t> last_;
};

// ---- relay selection ------------------------------------------------------

struct RelayStats {
    double bandwidth_ema = 0.0;  // bytes/s
    double success_ema = 1.0;
    double last_probe = 0.0;
    bool probed = false;
};

struct SelectionOptions {
    double beta = 0.3;
    double p_min = 0.05;
    double heal_after = 30.0;  // seconds without a probe before healing applies
    double heal_pull = 0.1;
};

/// Weight law: w_s = success_ema * bandwidth_ema. Probabilities are w / sum(w),
/// then every relay below p_min is raised to p_min with the remaining mass
/// shared in proportion to the other weights. All-zero weights give uniform.
std::vector<double> selection_probabilities(const std::vector<RelayStats>& stats, double p_min);

/// Inverse-CDF draw from `probs`.
std::size_t select_relay(const std::vector<double>& probs, SplitMix64& rng);

/// ema <- (1 - beta) ema + beta obs for both bandwidth and success.
void update_stats(RelayStats& s, double observed_bytes_per_sec, bool success, double beta,
                  double now);

/// One healing tick: relays unprobed for more than heal_after have their
/// bandwidth_ema moved heal_pull of the way to the fleet mean.
void heal(std::vector<RelayStats>& stats, double now, const SelectionOptions& opts);

// ---- client ---------------------------------------------------------------

struct ClientOptions {
    SelectionOptions selection;
    int concurrency = 4;
    std::uint64_t seed = 1;
    int max_fetch_rounds = 8;       // passes over the relay set per shard
    double not_ready_wait = 0.005;  // seconds to wait on 503 before retrying
    double not_ready_timeout = 30.0;
};

struct DownloadReport {
    std::uint64_t version = 0;
    Bytes bytes;
    std::size_t shard_fetches = 0;
    std::size_t corrupt_shards = 0;
    std::vector<std::uint64_t> skipped_versions;
    double first_shard_time = 0.0;  // clock time when shard 0 verified
};

class Client {
public:
    Client(std::vector<std::shared_ptr<RelayEndpoint>> relays, crypto::PublicKey trainer,
           std::string client_address, ClientOptions opts = {}, Clock clock = steady_clock());

    /// Dummy fetch from every relay to seed bandwidth and success estimates.
    void probe_all();

    /// Downloads exactly `version`. Throws StalenessError if every relay
    /// denies or throttles, or InvalidInput("checkpoint digest mismatch") if
    /// the assembled bytes fail the manifest (the caller must not retry it).
    DownloadReport download(std::uint64_t version);

    /// Downloads `version`, or on an integrity failure the next newer
    /// version, up to `max_version`. Never fetches a failed version twice.
    DownloadReport download_at_least(std::uint64_t version, std::uint64_t max_version);

    /// Newest version any relay advertises.
    std::optional<std::uint64_t> latest_version();

    std::vector<RelayStats> stats() const;
    std::vector<double> probabilities() const;

private:
    Manifest fetch_manifest(std::uint64_t version);
    Bytes fetch_shard(const Manifest& m, std::uint64_t index, DownloadReport& report,
                      std::mutex& report_mu);
    std::size_t pick(const std::vector<bool>& excluded);
    void observe(std::size_t relay, std::size_t bytes, double seconds, bool success);

    std::vector<std::shared_ptr<RelayEndpoint>> relays_;
    crypto::PublicKey trainer_;
    std::string address_;
    ClientOptions opts_;
    Clock clock_;
    mutable std::mutex mu_;
    std::vector<RelayStats> stats_;
    SplitMix64 rng_;
    double last_heal_ = 0.0;
    std::set<std::uint64_t> failed_versions_;
};

}  // namespace swarm::shardcast
