// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <httplib.h>

#include <thread>

#include "swarm/shardcast.hpp"

using namespace swarm;
using namespace swarm::shardcast;

namespace {

Bytes blob(std::size_t n, std::uint64_t seed) {
    SplitMix64 rng(seed);
    Bytes b(n);
    for (auto& x : b) x = static_cast<std::uint8_t>(rng.next());
    return b;
}

struct SimClock {
    double t = 0.0;
    Clock fn() {
        return [this] { return t; };
    }
};

struct Fleet {
    crypto::KeyPair trainer = crypto::KeyPair::from_seed(1);
    std::vector<std::shared_ptr<RelayStore>> stores;
    std::vector<std::shared_ptr<LocalRelay>> relays;
    std::vector<std::shared_ptr<RelayEndpoint>> endpoints;

    explicit Fleet(int n, RelayOptions o = {}, Clock clock = steady_clock()) {
        for (int i = 0; i < n; ++i) {
            stores.push_back(std::make_shared<RelayStore>(trainer.public_key(), o, clock));
            relays.push_back(std::make_shared<LocalRelay>(stores.back()));
            endpoints.push_back(relays.back());
        }
    }
};

}  // namespace

TEST_CASE("manifest codec, signature and shard split") {
    const auto key = crypto::KeyPair::from_seed(2);
    const Bytes ck = blob(2500, 1);
    const auto shards = split_shards(ck, 1000);
    REQUIRE(shards.size() == 3);
    CHECK(shards[2].size() == 500);
    const auto m = make_manifest(ck, 7, 1000, key);
    CHECK(m.num_shards == 3);
    CHECK(m.assembled_digest == crypto::sha256(ck));
    for (std::size_t i = 0; i < 3; ++i) CHECK(m.shard_digests[i] == crypto::sha256(shards[i]));
    CHECK(verify_manifest(m, key.public_key()));
    CHECK_FALSE(verify_manifest(m, crypto::KeyPair::from_seed(3).public_key()));
    const auto text = encode_manifest(m);
    CHECK(text.rfind("{\"assembled_digest\":", 0) == 0);
    CHECK(decode_manifest(text) == m);
    auto bad = m;
    bad.version = 8;
    CHECK_FALSE(verify_manifest(bad, key.public_key()));
    CHECK(manifest_signing_payload(m).find("trainer_signature") == std::string::npos);
    CHECK_THROWS_AS(decode_manifest("{}"), InvalidInput);
    CHECK(split_shards(Bytes{}, 10).empty());
}

TEST_CASE("token bucket allows a burst then refills at the rate") {
    TokenBucket b(2.0, 3.0);
    CHECK(b.take("a", 0.0));
    CHECK(b.take("a", 0.0));
    CHECK(b.take("a", 0.0));
    CHECK_FALSE(b.take("a", 0.0));
    CHECK(b.take("b", 0.0));  // per client
    CHECK_FALSE(b.take("a", 0.49));
    CHECK(b.take("a", 0.5));
    CHECK_FALSE(b.take("a", 0.5));
    // Refill caps at the burst size.
    int n = 0;
    while (b.take("a", 100.0)) ++n;
    CHECK(n == 3);
}

TEST_CASE("relay retention never exceeds five versions") {
    Fleet f(1);
    auto& s = *f.stores[0];
    for (std::uint64_t v = 0; v < 12; ++v) {
        s.put_manifest(make_manifest(blob(100, v), v, 64, f.trainer));
        CHECK(s.versions_held() <= 5);
    }
    CHECK(s.max_versions_held() == 5);
    CHECK(s.latest_version() == 11u);
    CHECK(s.get_manifest("c", 6).status == Status::kNotFound);
    CHECK(s.get_manifest("c", 7).status == Status::kOk);
    // Shards for a retired version are refused, stale manifests are refused.
    CHECK_THROWS_AS(s.put_shard(3, 0, blob(64, 3)), InvalidInput);
    CHECK_THROWS_AS(s.put_manifest(make_manifest(blob(100, 1), 11, 64, f.trainer)), InvalidInput);
    CHECK_THROWS_AS(s.put_manifest(make_manifest(blob(100, 1), 20, 64, crypto::KeyPair::from_seed(9))),
                    InvalidInput);
}

TEST_CASE("relay serves shards only after upload and only intact ones are stored") {
    Fleet f(1);
    auto& s = *f.stores[0];
    const Bytes ck = blob(300, 4);
    const auto m = make_manifest(ck, 0, 128, f.trainer);
    s.put_manifest(m);
    CHECK(s.get_shard("c", 0, 0).status == Status::kNotYet);
    CHECK(s.get_shard("c", 0, 9).status == Status::kNotFound);
    auto shards = split_shards(ck, 128);
    auto bad = shards[0];
    bad[0] ^= 1;
    CHECK_THROWS_AS(s.put_shard(0, 0, bad), InvalidInput);
    s.put_shard(0, 0, shards[0]);
    const auto r = s.get_shard("c", 0, 0);
    CHECK(r.status == Status::kOk);
    CHECK(r.body == shards[0]);
    CHECK(dispatch_get(s, "/shard/0/0", "c").body == shards[0]);
    CHECK(dispatch_get(s, "/manifest/latest", "c").status == Status::kOk);
    CHECK(dispatch_get(s, "/probe", "c").body.size() == RelayOptions{}.probe_bytes);
    CHECK(dispatch_get(s, "/nope", "c").status == Status::kNotFound);
    CHECK(dispatch_get(s, "/shard/99999999999999999999999/0", "c").status == Status::kNotFound);
}

TEST_CASE("allowlist and rate limiting at the relay") {
    SimClock clk;
    RelayOptions o;
    o.enforce_allowlist = true;
    o.rate = 1.0;
    o.burst = 2.0;
    RelayStore s(crypto::KeyPair::from_seed(1).public_key(), o, clk.fn());
    CHECK(s.probe("alice").status == Status::kDenied);
    s.set_allowlist({"alice"});
    CHECK(s.probe("alice").status == Status::kOk);
    CHECK(s.probe("alice").status == Status::kOk);
    CHECK(s.probe("alice").status == Status::kThrottled);
    clk.t = 1.0;
    CHECK(s.probe("alice").status == Status::kOk);
    CHECK(s.probe("bob").status == Status::kDenied);
    s.set_allowlist({});
    CHECK(s.probe("alice").status == Status::kDenied);
}

TEST_CASE("selection law oracle values") {
    auto stats = [](std::vector<double> bw) {
        std::vector<RelayStats> out;
        for (double b : bw) {
            RelayStats s;
            s.bandwidth_ema = b;
            out.push_back(s);
        }
        return out;
    };
    auto p = selection_probabilities(stats({1, 1, 0}), 0.05);
    CHECK(p[0] == doctest::Approx(0.475));
    CHECK(p[1] == doctest::Approx(0.475));
    CHECK(p[2] == doctest::Approx(0.05));
    p = selection_probabilities(stats({100, 1, 1, 1}), 0.05);
    CHECK(p[0] == doctest::Approx(0.85));
    CHECK(p[3] == doctest::Approx(0.05));
    p = selection_probabilities(stats({3, 1}), 0.05);
    CHECK(p[0] == doctest::Approx(0.75));
    p = selection_probabilities(stats({0, 0, 0, 0}), 0.05);
    for (double x : p) CHECK(x == doctest::Approx(0.25));
    auto s = stats({2, 2});
    s[1].success_ema = 0.5;
    p = selection_probabilities(s, 0.05);
    CHECK(p[0] == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("selection law invariants (property)") {
    SplitMix64 rng(12);
    for (int trial = 0; trial < 2000; ++trial) {
        const std::size_t n = 1 + rng.below(8);
        std::vector<RelayStats> st(n);
        for (auto& s : st) {
            s.bandwidth_ema = rng.below(4) == 0 ? 0.0 : 1e6 * rng.uniform();
            s.success_ema = rng.uniform();
        }
        const auto p = selection_probabilities(st, 0.05);
        double sum = 0.0;
        for (double x : p) {
            sum += x;
            REQUIRE(x >= 0.05 - 1e-12);
        }
        REQUIRE(sum == doctest::Approx(1.0).epsilon(1e-9));
        // Relays above the floor keep probabilities proportional to their weights.
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (p[i] > 0.05 + 1e-12 && p[j] > 0.05 + 1e-12) {
                    const double wi = st[i].bandwidth_ema * st[i].success_ema;
                    const double wj = st[j].bandwidth_ema * st[j].success_ema;
                    REQUIRE(p[i] * wj == doctest::Approx(p[j] * wi).epsilon(1e-9));
                }
            }
        }
    }
}

TEST_CASE("relay picks follow the law within total variation 0.02") {
    const std::vector<double> p = {0.6, 0.25, 0.1, 0.05};
    SplitMix64 rng(99);
    std::vector<double> freq(p.size(), 0.0);
    const int n = 10000;
    for (int i = 0; i < n; ++i) freq[select_relay(p, rng)] += 1.0 / n;
    double tv = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) tv += 0.5 * std::abs(freq[i] - p[i]);
    CHECK(tv <= 0.02);
    CHECK_THROWS_AS(select_relay({}, rng), InvalidInput);
}

TEST_CASE("ema update and healing") {
    RelayStats s;
    s.bandwidth_ema = 100.0;
    update_stats(s, 200.0, false, 0.3, 5.0);
    CHECK(s.bandwidth_ema == doctest::Approx(130.0));
    CHECK(s.success_ema == doctest::Approx(0.7));
    CHECK(s.last_probe == 5.0);
    std::vector<RelayStats> fleet(2);
    fleet[0].bandwidth_ema = 0.0;
    fleet[0].last_probe = 0.0;
    fleet[1].bandwidth_ema = 100.0;
    fleet[1].last_probe = 95.0;
    SelectionOptions o;
    heal(fleet, 100.0, o);
    CHECK(fleet[0].bandwidth_ema == doctest::Approx(5.0));  // 10% toward the mean of 50
    CHECK(fleet[1].bandwidth_ema == 100.0);
}

TEST_CASE("client downloads through corrupt relays without accepting bad bytes") {
    Fleet f(3);
    LocalRelay::Faults bad;
    bad.corrupt_prob = 1.0;
    bad.seed = 3;
    f.relays[0]->set_faults(bad);
    Origin origin(f.trainer, f.endpoints, 256);
    const Bytes ck = blob(2000, 8);
    origin.publish(ck, 0);
    CHECK_THROWS_AS(origin.publish(ck, 0), InvalidInput);
    Client c(f.endpoints, f.trainer.public_key(), "w0");
    c.probe_all();
    for (int i = 0; i < 20; ++i) {
        const auto r = c.download(0);
        REQUIRE(r.bytes == ck);
    }
    CHECK(c.latest_version() == 0u);
    // The corrupt relay's success rate decays.
    CHECK(c.stats()[0].success_ema < c.stats()[1].success_ema);
}

TEST_CASE("forged manifests make the client fall forward to a newer version") {
    Fleet f(2);
    Origin origin(f.trainer, f.endpoints, 512);
    origin.publish(blob(1000, 1), 0);
    origin.publish(blob(1000, 2), 1);
    LocalRelay::Faults forge;
    forge.forge_manifest_prob = 1.0;
    for (auto& r : f.relays) r->set_faults(forge);
    Client c(f.endpoints, f.trainer.public_key(), "w0");
    CHECK_THROWS_AS(c.download(0), InvalidInput);
    CHECK_THROWS_AS(c.download(0), InvalidInput);  // never refetched
    for (auto& r : f.relays) r->set_faults({});
    const auto r = c.download_at_least(0, 1);
    CHECK(r.version == 1);
    CHECK(r.skipped_versions == std::vector<std::uint64_t>{0});
    CHECK(r.bytes == blob(1000, 2));
}

TEST_CASE("refusing relays make the download stale") {
    Fleet f(2);
    Origin origin(f.trainer, f.endpoints, 512);
    origin.publish(blob(1000, 1), 0);
    LocalRelay::Faults deny;
    deny.deny_all = true;
    f.relays[0]->set_faults(deny);
    LocalRelay::Faults thr;
    thr.throttle_all = true;
    f.relays[1]->set_faults(thr);
    Client c(f.endpoints, f.trainer.public_key(), "w0");
    CHECK_THROWS_AS(c.download(0), StalenessError);
    CHECK_THROWS_AS(c.download(5), StalenessError);
}

TEST_CASE("http relay end to end with allowlist endpoint") {
    const auto trainer = crypto::KeyPair::from_seed(1);
    RelayOptions o;
    o.enforce_allowlist = true;
    auto store = std::make_shared<RelayStore>(trainer.public_key(), o);
    RelayServer server(store);
    auto ep = std::make_shared<HttpRelay>("127.0.0.1", server.port());
    Origin origin(trainer, {ep}, 700);
    const Bytes ck = blob(3000, 5);
    origin.publish(ck, 2);
    CHECK(ep->get("/probe", "w1").status == Status::kDenied);
    httplib::Client admin("127.0.0.1", server.port());
    auto res = admin.Post("/allowlist", R"({"allow":["w1"]})", "application/json");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(store->allowlist() == std::set<std::string>{"w1"});
    Client c({ep}, trainer.public_key(), "w1");
    const auto r = c.download(2);
    CHECK(r.bytes == ck);
    CHECK(ep->get("/shard/2/99", "w1").status == Status::kNotFound);
    CHECK(admin.Post("/allowlist", "nonsense", "application/json")->status == 400);
    // Corrupt uploads are refused by the relay.
    auto m = make_manifest(blob(10, 1), 3, 700, trainer);
    ep->put_manifest(m);
    CHECK_THROWS_AS(ep->put_shard(3, 0, blob(10, 2)), InvalidInput);
    server.stop();
    CHECK(ep->get("/probe", "w1").status == Status::kUnreachable);
}

TEST_CASE("shards are fetchable before the origin finishes uploading") {
    const auto trainer = crypto::KeyPair::from_seed(1);
    auto store = std::make_shared<RelayStore>(trainer.public_key());
    RelayServer server(store);
    auto uplink = std::make_shared<LinkShaper>(10e6);
    auto up = std::make_shared<HttpRelay>("127.0.0.1", server.port(), 10.0, uplink);
    auto down = std::make_shared<HttpRelay>("127.0.0.1", server.port());
    const Bytes ck = blob(4 * 500000, 6);
    Origin origin(trainer, {up}, 500000);
    double last_uploaded = 0.0;
    const Clock clock = steady_clock();
    std::thread pub([&] {
        origin.publish(ck, 0, [&](std::uint64_t i) {
            if (i == 3) last_uploaded = clock();
        });
    });
    ClientOptions co;
    co.concurrency = 1;
    Client c({down}, trainer.public_key(), "w", co, clock);
    while (store->latest_version() != 0u) std::this_thread::sleep_for(std::chrono::milliseconds(1));
    const auto r = c.download(0);
    pub.join();
    CHECK(r.bytes == ck);
    CHECK(r.first_shard_time < last_uploaded);
}
