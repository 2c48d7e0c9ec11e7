// SPDX-License-Identifier: Apache-2.0

#include "swarm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace swarm::trainer {

using nlohmann::json;

double Batch::mean_task_reward() const {
    return records_scanned == 0 ? 0.0 : sum_task_reward / static_cast<double>(records_scanned);
}

double Batch::mean_length_penalty() const {
    return records_scanned == 0 ? 0.0 : sum_length_penalty / static_cast<double>(records_scanned);
}

bool degenerate(const std::vector<rollout::RolloutRecord>& group) {
    for (const auto& r : group) {
        if (r.r_total != group.front().r_total) {
            return false;
        }
    }
    return true;
}

BatchCollector::BatchCollector(std::size_t group_size, std::size_t prompts_per_step,
                               std::uint64_t k_max)
    : group_size_(group_size), prompts_(prompts_per_step), k_max_(k_max) {
    if (group_size_ == 0 || prompts_ == 0) {
        throw InvalidInput("collector needs positive group size and prompt count");
    }
}

void BatchCollector::begin(std::uint64_t step) {
    batch_ = Batch{};
    batch_.step = step;
}

bool BatchCollector::add_file(const std::string& file_id, const rollout::RolloutFile& file) {
    const auto& recs = file.records;
    if (recs.size() % group_size_ != 0) {
        throw InvalidInput("accepted file does not hold whole groups: " + file_id);
    }
    const std::uint64_t oldest = batch_.step > k_max_ ? batch_.step - k_max_ : 0;
    for (std::size_t g = 0; g * group_size_ < recs.size() && !complete(); ++g) {
        std::vector<rollout::RolloutRecord> group(
            recs.begin() + static_cast<std::ptrdiff_t>(g * group_size_),
            recs.begin() + static_cast<std::ptrdiff_t>((g + 1) * group_size_));
        ++batch_.groups_scanned;
        for (const auto& r : group) {
            ++batch_.records_scanned;
            batch_.sum_task_reward += r.r_task;
            batch_.sum_length_penalty += r.r_task - r.r_total;
        }
        if (group.front().checkpoint_version < oldest) {
            ++batch_.groups_stale;
            continue;
        }
        if (degenerate(group)) {
            ++batch_.groups_degenerate;
            continue;
        }
        batch_.groups.push_back(Group{file_id, g, group.front().task_id, std::move(group)});
    }
    return complete();
}

void BatchCollector::skip_file() { ++batch_.files_skipped; }

Batch BatchCollector::take() {
    if (!complete()) {
        throw InvalidInput("batch for step " + std::to_string(batch_.step) + " is incomplete");
    }
    Batch out = std::move(batch_);
    batch_ = Batch{};
    return out;
}

// ---- metrics -------------------------------------------------------------------

namespace {

constexpr const char* kColumns[] = {
    "step",          "micro_step", "optimizer_step", "lr",
    "loss",          "grad_norm",  "clip_fraction",  "entropy",
    "kl",            "task_reward", "length_penalty", "groups_scanned",
    "groups_degenerate", "groups_stale", "files_skipped"};

std::string real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string csv_header() {
    std::string out;
    for (const char* c : kColumns) {
        if (!out.empty()) {
            out += ',';
        }
        out += c;
    }
    return out;
}

std::string csv_row(const MetricsRow& r) {
    std::ostringstream os;
    os << r.step << ',' << r.micro_step << ',' << r.optimizer_step << ',' << real(r.lr) << ','
       << real(r.loss) << ',' << real(r.grad_norm) << ',' << real(r.clip_fraction) << ','
       << real(r.entropy) << ',' << real(r.kl) << ',' << real(r.task_reward) << ','
       << real(r.length_penalty) << ',' << r.groups_scanned << ',' << r.groups_degenerate << ','
       << r.groups_stale << ',' << r.files_skipped;
    return os.str();
}

std::string metrics_json(const MetricsRow& r) {
    json j;
    j["step"] = r.step;
    j["micro_step"] = r.micro_step;
    j["optimizer_step"] = r.optimizer_step;
    j["lr"] = r.lr;
    j["loss"] = r.loss;
    j["grad_norm"] = r.grad_norm;
    j["clip_fraction"] = r.clip_fraction;
    j["entropy"] = r.entropy;
    j["kl"] = r.kl;
    j["task_reward"] = r.task_reward;
    j["length_penalty"] = r.length_penalty;
    j["groups_scanned"] = r.groups_scanned;
    j["groups_degenerate"] = r.groups_degenerate;
    j["groups_stale"] = r.groups_stale;
    j["files_skipped"] = r.files_skipped;
    return j.dump();
}

std::vector<MetricsRow> parse_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != csv_header()) {
        throw InvalidInput("metrics CSV header mismatch");
    }
    std::vector<MetricsRow> out;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> f;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) {
            f.push_back(cell);
        }
        if (f.size() != std::size(kColumns)) {
            throw InvalidInput("metrics CSV row has wrong arity: " + line);
        }
        MetricsRow r;
        r.step = std::stoull(f[0]);
        r.micro_step = std::stoi(f[1]);
        r.optimizer_step = std::stoi(f[2]);
        r.lr = std::stod(f[3]);
        r.loss = std::stod(f[4]);
        r.grad_norm = std::stod(f[5]);
        r.clip_fraction = std::stod(f[6]);
        r.entropy = std::stod(f[7]);
        r.kl = std::stod(f[8]);
        r.task_reward = std::stod(f[9]);
        r.length_penalty = std::stod(f[10]);
        r.groups_scanned = std::stoull(f[11]);
        r.groups_degenerate = std::stoull(f[12]);
        r.groups_stale = std::stoull(f[13]);
        r.files_skipped = std::stoull(f[14]);
        out.push_back(r);
    }
    return out;
}

// ---- learner -------------------------------------------------------------------

Learner::Learner(policy::PolicyParams initial, policy::TrainConfig cfg,
                 std::vector<tasks::Task> dataset)
    : params_(initial), reference_(std::move(initial)), cfg_(cfg), dataset_(std::move(dataset)) {
    cfg_.validate();
}

std::vector<policy::Sample> Learner::build_samples(const Batch& batch) const {
    std::vector<policy::Sample> samples;
    for (const auto& g : batch.groups) {
        const auto it = std::find_if(dataset_.begin(), dataset_.end(),
                                     [&](const tasks::Task& t) { return t.task_id == g.task_id; });
        if (it == dataset_.end()) {
            throw InvalidInput("group references unknown task " + std::to_string(g.task_id));
        }
        const auto& prompt = it->prompt_tokens;
        for (const auto& r : g.records) {
            policy::Sample s;
            s.prompt = prompt;
            s.output = r.output_tokens;
            s.advantage = r.advantage;
            s.old_logp = policy::sequence_logprobs(params_, prompt, r.output_tokens).logprobs;
            s.ref_logp = policy::sequence_logprobs(reference_, prompt, r.output_tokens).logprobs;
            samples.push_back(std::move(s));
        }
    }
    return samples;
}

std::vector<MetricsRow> Learner::train_step(const Batch& batch) {
    if (batch.groups.empty()) {
        throw InvalidInput("empty batch");
    }
    if (cfg_.kl_reference == policy::KlReference::kLatestBroadcast) {
        reference_ = params_;
    }
    const policy::PolicyParams start = params_;
    const int start_opt = optimizer_step_;
    std::vector<policy::Sample> samples = build_samples(batch);
    const std::size_t micro = static_cast<std::size_t>(cfg_.micro_steps);
    const std::size_t per = samples.size() / micro;
    if (per == 0) {
        throw InvalidInput("batch smaller than micro_steps");
    }
    std::vector<MetricsRow> rows;
    try {
        for (std::size_t m = 0; m < micro; ++m) {
            const std::size_t begin = m * per;
            const std::size_t end = m + 1 == micro ? samples.size() : begin + per;
            if (m > 0 && cfg_.old_logprob_mode == policy::OldLogprobMode::kPerMicroStep) {
                for (std::size_t i = begin; i < end; ++i) {
                    samples[i].old_logp =
                        policy::sequence_logprobs(params_, samples[i].prompt, samples[i].output)
                            .logprobs;
                }
            }
            std::span<const policy::Sample> slice(samples.data() + begin, end - begin);
            auto g = policy::gradient(params_, slice, cfg_);
            if (!std::isfinite(g.loss) || !std::isfinite(g.pre_clip_norm)) {
                throw NumericError("non-finite loss or gradient norm");
            }
            const double lr = policy::scheduled_lr(cfg_, optimizer_step_);
            policy::sgd_step(params_, g.grads, lr);
            MetricsRow r;
            r.step = batch.step;
            r.micro_step = static_cast<int>(m);
            r.optimizer_step = optimizer_step_++;
            r.lr = lr;
            r.loss = g.loss;
            r.grad_norm = g.pre_clip_norm;
            r.clip_fraction = g.stats.clip_fraction;
            r.entropy = g.stats.mean_entropy;
            r.kl = g.stats.mean_kl;
            r.task_reward = batch.mean_task_reward();
            r.length_penalty = batch.mean_length_penalty();
            r.groups_scanned = batch.groups_scanned;
            r.groups_degenerate = batch.groups_degenerate;
            r.groups_stale = batch.groups_stale;
            r.files_skipped = batch.files_skipped;
            rows.push_back(r);
        }
        if (!params_.all_finite()) {
            throw NumericError("non-finite parameter after update");
        }
    } catch (const NumericError& e) {
        params_ = start;
        optimizer_step_ = start_opt;
        throw TrainingHalted(std::string("step ") + std::to_string(batch.step) + ": " + e.what());
    }
    ++version_;
    return rows;
}

std::string consumed_log_lines(const Batch& batch) {
    std::string out;
    for (const auto& g : batch.groups) {
        json j;
        std::vector<double> adv, rew;
        std::vector<std::uint64_t> ver;
        for (const auto& r : g.records) {
            adv.push_back(r.advantage);
            rew.push_back(r.r_total);
            ver.push_back(r.checkpoint_version);
        }
        j["advantages"] = adv;
        j["file_id"] = g.file_id;
        j["group"] = g.index_in_file;
        j["rewards"] = rew;
        j["step"] = batch.step;
        j["task_id"] = g.task_id;
        j["versions"] = ver;
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::size_t audit_consumed_log(const std::string& text) {
    std::size_t bad = 0;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        const auto rewards = j.at("rewards").get<std::vector<double>>();
        const auto adv = j.at("advantages").get<std::vector<double>>();
        bool all_equal = true;
        for (double r : rewards) {
            all_equal = all_equal && r == rewards.front();
        }
        bool all_zero = true;
        for (double a : adv) {
            all_zero = all_zero && a == 0.0;
        }
        bad += (all_equal || all_zero) ? 1 : 0;
    }
    return bad;
}

void StepCounter::advance_to(std::uint64_t s) {
    std::uint64_t cur = step_.load();
    while (s > cur && !step_.compare_exchange_weak(cur, s)) {
    }
}

// ---- HTTP ------------------------------------------------------------------------

TrainerServer::TrainerServer(StepCounter& counter, EventStream& metrics, std::string host,
                             int port)
    : counter_(counter), metrics_(metrics), http_(std::make_unique<httplib::Server>()) {
    http_->Get("/step", [this](const httplib::Request&, httplib::Response& res) {
        const auto s = counter_.step();
        json j;
        j["step"] = s;
        j["version"] = counter_.version_for(s);
        res.set_content(j.dump(), "application/json");
    });
    http_->Get("/status", [this](const httplib::Request&, httplib::Response& res) {
        std::lock_guard lock(status_mu_);
        res.set_content(status_, "application/json");
    });
    http_->Get("/metrics", [this](const httplib::Request& req, httplib::Response& res) {
        if (req.has_param("format") && req.get_param_value("format") == "json") {
            std::string out = "[";
            auto rows = metrics_.read_from(0, std::chrono::milliseconds(0));
            for (std::size_t i = 0; i < rows.size(); ++i) {
                out += (i ? "," : "") + rows[i];
            }
            out += "]";
            res.set_content(out, "application/json");
            return;
        }
        std::uint64_t from = 0;
        if (req.has_param("from")) {
            from = std::stoull(req.get_param_value("from"));
        }
        serve_event_stream(res, metrics_, from, stopping_);
    });
    port_ = port == 0 ? http_->bind_to_any_port(host)
                      : (http_->bind_to_port(host, port) ? port : -1);
    if (port_ < 0) {
        throw std::runtime_error("trainer could not bind " + host + ":" + std::to_string(port));
    }
    thread_ = std::thread([this] { http_->listen_after_bind(); });
    http_->wait_until_ready();
}

TrainerServer::~TrainerServer() { stop(); }

void TrainerServer::stop() {
    if (stopping_.exchange(true)) {
        return;
    }
    http_->stop();
    if (thread_.joinable()) {
        thread_.join();
    }
}

void TrainerServer::set_status(std::uint64_t consumed, bool halted,
                               std::optional<std::uint64_t> published) {
    json j;
    j["consumed_steps"] = consumed;
    j["halted"] = halted;
    j["published"] = published ? json(*published) : json(nullptr);
    std::lock_guard lock(status_mu_);
    status_ = j.dump();
}

std::optional<StepInfo> poll_step(const std::string& host, int port) {
    httplib::Client cli(host, port);
    cli.set_connection_timeout(std::chrono::seconds(1));
    cli.set_read_timeout(std::chrono::seconds(5));
    auto res = cli.Get("/step");
    if (!res || res->status != 200) {
        return std::nullopt;
    }
    try {
        const json j = json::parse(res->body);
        return StepInfo{j.at("step").get<std::uint64_t>(), j.at("version").get<std::uint64_t>()};
    } catch (const json::exception&) {
        return std::nullopt;
    }
}

}  // namespace swarm::trainer
