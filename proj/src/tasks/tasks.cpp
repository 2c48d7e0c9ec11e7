// SPDX-License-Identifier: Apache-2.0

#include "swarm/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "swarm/grpo.hpp"
#include "swarm/rng.hpp"
#include "swarm/sampling.hpp"

namespace swarm::tasks {

using nlohmann::json;

policy::ModelConfig toy_model_config() {
    policy::ModelConfig c;
    c.vocab = vocab::kSize;
    c.window = 48;
    c.embed_dim = 8;
    c.hidden_dim = 32;
    c.max_len = 48;
    c.eos_id = vocab::kEos;
    c.pad_id = vocab::kPad;
    return c;
}

Token budget_token(int l_target) {
    for (std::size_t i = 0; i < kLengthBudgets.size(); ++i) {
        if (kLengthBudgets[i] == l_target) {
            return vocab::kBudgetBase + static_cast<Token>(i);
        }
    }
    throw InvalidInput("length budget not in the configured set: " + std::to_string(l_target));
}

namespace {

Task make_task(std::uint64_t id, int a, int op, int b, int l_target) {
    Task t;
    t.task_id = id;
    t.l_target = l_target;
    static constexpr Token kOps[] = {vocab::kPlus, vocab::kMinus, vocab::kTimes};
    t.prompt_tokens = {budget_token(l_target), a, kOps[op], b};
    int answer = 0;
    switch (op) {
        case 0: answer = (a + b) % 10; break;
        case 1: answer = ((a - b) % 10 + 10) % 10; break;
        default: answer = (a * b) % 10; break;
    }
    t.target_answer = {answer};
    return t;
}

}  // namespace

std::vector<Task> generate_dataset(std::uint64_t seed, std::size_t n) {
    if (n < 1) {
        throw InvalidInput("dataset size must be >= 1");
    }
    SplitMix64 rng(seed);
    std::vector<Task> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int a = static_cast<int>(rng.below(10));
        const int op = static_cast<int>(rng.below(3));
        const int b = static_cast<int>(rng.below(10));
        const int l_target = kLengthBudgets[rng.below(kLengthBudgets.size())];
        out.push_back(make_task(i, a, op, b, l_target));
    }
    return out;
}

int verify(const Task& task, std::span<const Token> output) {
    const auto delim = std::find(output.begin(), output.end(), vocab::kAnswer);
    if (delim == output.end()) {
        return 0;
    }
    const auto end = std::find(delim + 1, output.end(), vocab::kEos);
    const std::span<const Token> span(delim + 1, end);
    if (span.size() != task.target_answer.size()) {
        return 0;
    }
    return std::equal(span.begin(), span.end(), task.target_answer.begin()) ? 1 : 0;
}

RewardBreakdown total_reward(const Task& task, std::span<const Token> output, double alpha) {
    RewardBreakdown r;
    r.r_task = verify(task, output);
    const double l_y = static_cast<double>(output.size());
    r.length_penalty = alpha * std::abs(static_cast<double>(task.l_target) - l_y);
    r.r_total = r.r_task - r.length_penalty;
    return r;
}

std::uint64_t filter_task_seed(std::uint64_t rng_seed, std::uint64_t task_id) {
    return mix_seed(rng_seed, task_id + 1);
}

std::vector<int> pass_at_k_counts(const std::vector<Task>& dataset,
                                  const policy::PolicyParams& params, int k,
                                  std::uint64_t rng_seed, double eos_floor) {
    if (k < 1) {
        throw InvalidInput("k must be >= 1");
    }
    std::vector<int> counts;
    counts.reserve(dataset.size());
    for (const Task& task : dataset) {
        SplitMix64 rng(filter_task_seed(rng_seed, task.task_id));
        policy::SamplingOptions so;
        so.eos_floor = eos_floor;
        int c = 0;
        for (int i = 0; i < k; ++i) {
            const auto comp = policy::sample_completion(params, task.prompt_tokens, rng, so);
            c += verify(task, comp.tokens);
        }
        counts.push_back(c);
    }
    return counts;
}

std::vector<Task> offline_filter(const std::vector<Task>& dataset,
                                 const policy::PolicyParams& params,
                                 const OfflineFilterOptions& opts) {
    const auto counts = pass_at_k_counts(dataset, params, opts.k, opts.rng_seed, opts.eos_floor);
    const double lo = opts.low * opts.k;
    const double hi = opts.high * opts.k;
    constexpr double kSlack = 1e-9;
    std::vector<Task> kept;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const double c = counts[i];
        if (c >= lo - kSlack && c <= hi + kSlack) {
            kept.push_back(dataset[i]);
        }
    }
    return kept;
}

std::string encode_task(const Task& task) {
    json j;
    j["task_id"] = task.task_id;
    j["prompt_tokens"] = task.prompt_tokens;
    j["target_answer"] = task.target_answer;
    j["l_target"] = task.l_target;
    return j.dump();
}

Task decode_task(const std::string& line) {
    try {
        const json j = json::parse(line);
        Task t;
        t.task_id = j.at("task_id").get<std::uint64_t>();
        t.prompt_tokens = j.at("prompt_tokens").get<std::vector<Token>>();
        t.target_answer = j.at("target_answer").get<std::vector<Token>>();
        t.l_target = j.at("l_target").get<int>();
        return t;
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("malformed task record: ") + e.what());
    }
}

void write_dataset(const std::filesystem::path& path, const std::vector<Task>& dataset) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw InvalidInput("cannot write dataset file " + path.string());
    }
    for (const Task& t : dataset) {
        out << encode_task(t) << '\n';
    }
}

std::vector<Task> read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InvalidInput("cannot read dataset file " + path.string());
    }
    std::vector<Task> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            out.push_back(decode_task(line));
        }
    }
    return out;
}

policy::PolicyParams pretrain_base_policy(const policy::ModelConfig& config,
                                          const PretrainOptions& opts) {
    policy::PolicyParams params = policy::PolicyParams::random(config, opts.seed);
    SplitMix64 rng(mix_seed(opts.seed, 0x5eed));
    const auto v = static_cast<std::size_t>(config.vocab);
    const int max_cycles = std::min(opts.max_think, config.max_len - 4 - 3) / 3;
    for (int step = 0; step < opts.steps; ++step) {
        policy::PolicyParams grads = policy::PolicyParams::zeros(config);
        std::vector<std::vector<Token>> prompts;
        std::vector<std::vector<Token>> outputs;
        std::size_t total_tokens = 0;
        for (int i = 0; i < opts.batch; ++i) {
            const Task task = make_task(0, static_cast<int>(rng.below(10)), static_cast<int>(rng.below(3)),
                                        static_cast<int>(rng.below(10)),
                                        kLengthBudgets[rng.below(kLengthBudgets.size())]);
            // Reasoning restates the problem: (a op b) repeated `cycles` times.
            const int cycles = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_cycles) + 1));
            std::vector<Token> out;
            for (int c = 0; c < cycles; ++c) {
                out.insert(out.end(), task.prompt_tokens.begin() + 1, task.prompt_tokens.end());
            }
            out.push_back(vocab::kAnswer);
            out.push_back(static_cast<Token>(rng.below(10)));
            out.push_back(vocab::kEos);
            total_tokens += out.size();
            prompts.push_back(task.prompt_tokens);
            outputs.push_back(std::move(out));
        }
        const double inv_n = 1.0 / static_cast<double>(total_tokens);
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            const auto traces = policy::prefill(params, prompts[i], outputs[i]);
            std::vector<std::vector<double>> dlogits(traces.size(), std::vector<double>(v));
            for (std::size_t t = 0; t < traces.size(); ++t) {
                for (std::size_t k = 0; k < v; ++k) {
                    dlogits[t][k] = traces[t].probs[k] * inv_n;
                }
                dlogits[t][static_cast<std::size_t>(outputs[i][t])] -= inv_n;
            }
            policy::backprop(params, traces, dlogits, grads);
        }
        policy::clip_global_norm(grads, 1.0);
        policy::sgd_step(params, grads, opts.lr);
    }
    return params;
}

}  // namespace swarm::tasks
