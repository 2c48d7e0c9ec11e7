// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "support.hpp"
#include "swarm/tasks.hpp"

using namespace swarm;
using namespace swarm::tasks;
namespace st = swarm::testing;

namespace {

Task sample_task() {
    Task t;
    t.task_id = 3;
    t.prompt_tokens = {budget_token(16), 7, vocab::kPlus, 5};
    t.target_answer = {2};
    t.l_target = 16;
    return t;
}

struct PolicyParamsHolder {
    policy::PolicyParams params;
};
const PolicyParamsHolder& base() {
    static const PolicyParamsHolder h{[] {
        PretrainOptions o;
        o.steps = 200;
        return pretrain_base_policy(toy_model_config(), o);
    }()};
    return h;
}
}  // namespace

TEST_CASE("budget tokens") {
    CHECK(budget_token(8) == 15);
    CHECK(budget_token(32) == 18);
    CHECK_THROWS_AS(budget_token(12), InvalidInput);
}

TEST_CASE("verify reads the span after the first delimiter") {
    const Task t = sample_task();
    using V = std::vector<Token>;
    CHECK(verify(t, V{13, 7, vocab::kAnswer, 2, vocab::kEos}) == 1);
    CHECK(verify(t, V{vocab::kAnswer, 2}) == 1);
    CHECK(verify(t, V{vocab::kAnswer, 3, vocab::kEos}) == 0);
    CHECK(verify(t, V{vocab::kAnswer, 2, 2, vocab::kEos}) == 0);
    CHECK(verify(t, V{2, vocab::kEos}) == 0);
    CHECK(verify(t, V{}) == 0);
    CHECK(verify(t, V{vocab::kAnswer, 2, vocab::kAnswer, 2}) == 0);
    CHECK(verify(t, V{vocab::kAnswer, vocab::kEos, 2}) == 0);
}

TEST_CASE("verify agrees with the reference on random outputs (property)") {
    const Task t = sample_task();
    SplitMix64 rng(4);
    for (int i = 0; i < 20000; ++i) {
        std::vector<Token> out(rng.below(8));
        for (auto& x : out) {
            // Bias toward the interesting tokens.
            const auto r = rng.below(6);
            x = r == 0 ? vocab::kAnswer : r == 1 ? vocab::kEos : r == 2 ? 2 : static_cast<Token>(rng.below(21));
        }
        REQUIRE(verify(t, out) == st::oracle_verify(t, out));
    }
}

TEST_CASE("total reward") {
    const Task t = sample_task();
    const std::vector<Token> out = {13, 13, 13, 13, 13, 13, 13, vocab::kAnswer, 2, vocab::kEos};
    const auto r = total_reward(t, out, 0.01);
    CHECK(r.r_task == 1.0);
    CHECK(r.length_penalty == doctest::Approx(0.06));
    CHECK(r.r_total == doctest::Approx(0.94));
    const std::vector<Token> long_wrong(30, 13);
    const auto w = total_reward(t, long_wrong, 0.01);
    CHECK(w.r_task == 0.0);
    CHECK(w.r_total == doctest::Approx(-0.14));
}

TEST_CASE("dataset generation is deterministic and well formed") {
    const auto a = generate_dataset(1, 64);
    const auto b = generate_dataset(1, 64);
    CHECK(a == b);
    CHECK(a != generate_dataset(2, 64));
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& t = a[i];
        CHECK(t.task_id == i);
        REQUIRE(t.prompt_tokens.size() == 4);
        CHECK(t.prompt_tokens[0] == budget_token(t.l_target));
        const int x = t.prompt_tokens[1];
        const int y = t.prompt_tokens[3];
        int expect = 0;
        switch (t.prompt_tokens[2]) {
            case vocab::kPlus: expect = (x + y) % 10; break;
            case vocab::kMinus: expect = (x - y + 10) % 10; break;
            case vocab::kTimes: expect = (x * y) % 10; break;
            default: FAIL("unknown operator");
        }
        CHECK(t.target_answer == std::vector<Token>{expect});
    }
    CHECK_THROWS_AS(generate_dataset(1, 0), InvalidInput);
}

TEST_CASE("task record codec") {
    const Task t = sample_task();
    const auto line = encode_task(t);
    CHECK(line == R"({"l_target":16,"prompt_tokens":[16,7,10,5],"target_answer":[2],"task_id":3})");
    CHECK(decode_task(line) == t);
    CHECK_THROWS_AS(decode_task("{\"task_id\":1}"), InvalidInput);
    CHECK_THROWS_AS(decode_task("not json"), InvalidInput);
    const auto dir = std::filesystem::temp_directory_path() / "swarm_test_tasks";
    std::filesystem::create_directories(dir);
    const auto ds = generate_dataset(9, 10);
    write_dataset(dir / "d.jsonl", ds);
    CHECK(read_dataset(dir / "d.jsonl") == ds);
    std::filesystem::remove_all(dir);
}

TEST_CASE("pretrained base emits the output format") {
    const auto& p = base().params;
    const auto ds = generate_dataset(1, 16);
    int with_answer = 0;
    int terminated = 0;
    SplitMix64 rng(8);
    for (const auto& t : ds) {
        const auto out = st::oracle_generate(p, t.prompt_tokens, rng, 0.1);
        with_answer += std::count(out.begin(), out.end(), vocab::kAnswer) > 0;
        terminated += !out.empty() && out.back() == vocab::kEos;
    }
    CHECK(with_answer >= 12);
    CHECK(terminated >= 12);
}

TEST_CASE("pass counts match direct re-simulation") {
    const auto& p = base().params;
    const auto ds = generate_dataset(5, 12);
    const auto counts = pass_at_k_counts(ds, p, 8, 77);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CAPTURE(i);
        CHECK(counts[i] == st::oracle_pass_count(p, ds[i], 8, 77));
    }
    // Order independence: the stream depends on task_id, not position.
    std::vector<Task> rev(ds.rbegin(), ds.rend());
    const auto rc = pass_at_k_counts(rev, p, 8, 77);
    for (std::size_t i = 0; i < ds.size(); ++i) CHECK(rc[ds.size() - 1 - i] == counts[i]);
}

TEST_CASE("offline filter keeps exactly the tasks with counts 1 to 4") {
    const auto& p = base().params;
    const auto ds = generate_dataset(3, 24);
    OfflineFilterOptions o;
    o.rng_seed = 13;
    const auto kept = offline_filter(ds, p, o);
    std::set<std::uint64_t> expect;
    for (const auto& t : ds) {
        const int c = st::oracle_pass_count(p, t, 8, 13);
        if (c >= 1 && c <= 4) expect.insert(t.task_id);
    }
    std::set<std::uint64_t> got;
    for (const auto& t : kept) got.insert(t.task_id);
    CHECK_FALSE(expect.empty());
    CHECK(expect.size() < ds.size());
    CHECK(got == expect);
    // Kept tasks preserve dataset order.
    for (std::size_t i = 1; i < kept.size(); ++i) CHECK(kept[i - 1].task_id < kept[i].task_id);
}

TEST_CASE("pretraining is deterministic") {
    PretrainOptions o;
    o.steps = 5;
    CHECK(pretrain_base_policy(toy_model_config(), o) == pretrain_base_policy(toy_model_config(), o));
}
