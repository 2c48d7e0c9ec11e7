// SPDX-License-Identifier: Apache-2.0

#include "swarm/rollout.hpp"

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "swarm/sampling.hpp"

namespace swarm::rollout {

using nlohmann::json;

namespace {

constexpr std::uint64_t kSamplingSalt = 0x73616d706c65ULL;  // "sample"

std::vector<std::string> split_lines(const std::string& bytes) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < bytes.size()) {
        const std::size_t nl = bytes.find('\n', start);
        if (nl == std::string::npos) {
            throw SchemaError("last line is not newline-terminated (truncated file)");
        }
        lines.push_back(bytes.substr(start, nl - start));
        start = nl + 1;
    }
    return lines;
}

template <class T>
T get_field(const json& j, const char* key) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw SchemaError(std::string("field '") + key + "': " + e.what());
    }
}

double get_number(const json& j, const char* key) {
    const auto it = j.find(key);
    if (it == j.end() || !it->is_number()) {
        throw SchemaError(std::string("field '") + key + "' missing or not a number");
    }
    return it->get<double>();
}

std::uint64_t get_u64(const json& j, const char* key) {
    const auto it = j.find(key);
    if (it == j.end() || !it->is_number_unsigned()) {
        if (it != j.end() && it->is_number_integer() && it->get<std::int64_t>() >= 0) {
            return it->get<std::uint64_t>();
        }
        throw SchemaError(std::string("field '") + key + "' missing or not an unsigned integer");
    }
    return it->get<std::uint64_t>();
}

crypto::PublicKey get_key(const json& j, const char* key) {
    try {
        return crypto::public_key_from_hex(get_field<std::string>(j, key));
    } catch (const SchemaError&) {
        throw;
    } catch (const InvalidInput& e) {
        throw SchemaError(std::string("field '") + key + "': " + e.what());
    }
}

json header_json(const FileHeader& h, bool with_signature) {
    json j;
    j["kind"] = "header";
    j["node_address"] = to_hex(h.node_address);
    j["schema_version"] = h.schema_version;
    j["step"] = h.step;
    j["submission_index"] = h.submission_index;
    if (with_signature) {
        j["signature"] = to_hex(h.signature);
    }
    return j;
}

}  // namespace

std::uint64_t address_int(const crypto::PublicKey& address) {
    return get_u64_le(ByteView(address.data(), address.size()), 0);
}

std::uint64_t derive_seed(std::uint64_t addr_int, std::uint64_t step,
                          std::uint64_t submission_index) {
    return addr_int * step + submission_index;
}

std::uint64_t derive_seed(const crypto::PublicKey& address, std::uint64_t step,
                          std::uint64_t submission_index) {
    return derive_seed(address_int(address), step, submission_index);
}

std::vector<std::size_t> select_prompts(std::uint64_t seed, std::size_t dataset_size,
                                        std::size_t count) {
    if (dataset_size == 0) {
        throw InvalidInput("cannot select prompts from an empty dataset");
    }
    SplitMix64 rng(seed);
    std::vector<std::size_t> out(count);
    for (auto& idx : out) {
        idx = static_cast<std::size_t>(rng.below(dataset_size));
    }
    return out;
}

std::uint64_t sampling_seed(std::uint64_t seed) { return mix_seed(seed, kSamplingSalt); }

void append_rounded(Bytes& out, std::span<const double> values) {
    for (double v : values) {
        const auto q = static_cast<std::int64_t>(std::llround(v * 1e6));
        put_u64_le(out, static_cast<std::uint64_t>(q));
    }
}

std::vector<crypto::Digest> build_commitments(std::span<const std::vector<double>> hidden,
                                              int interval) {
    if (interval < 1) {
        throw InvalidInput("commitment interval must be >= 1");
    }
    const auto k = static_cast<std::size_t>(interval);
    std::vector<crypto::Digest> out;
    crypto::Digest prev{};
    for (std::size_t start = 0; start < hidden.size(); start += k) {
        Bytes chunk;
        const std::size_t end = std::min(hidden.size(), start + k);
        for (std::size_t t = start; t < end; ++t) {
            append_rounded(chunk, hidden[t]);
        }
        crypto::Sha256 h;
        h.update(ByteView(prev.data(), prev.size()));
        h.update(chunk);
        prev = h.finish();
        out.push_back(prev);
    }
    return out;
}

std::string encode_record(const RolloutRecord& r) {
    json j;
    j["advantage"] = r.advantage;
    j["checkpoint_version"] = r.checkpoint_version;
    j["chosen_probs"] = r.chosen_probs;
    std::vector<std::string> commits;
    commits.reserve(r.commitments.size());
    for (const auto& d : r.commitments) {
        commits.push_back(crypto::digest_hex(d));
    }
    j["commitments"] = commits;
    j["eos_prob_at_end"] = r.eos_prob_at_end ? json(*r.eos_prob_at_end) : json(nullptr);
    j["node_address"] = to_hex(r.node_address);
    j["output_tokens"] = r.output_tokens;
    j["r_task"] = r.r_task;
    j["r_total"] = r.r_total;
    j["step"] = r.step;
    j["submission_index"] = r.submission_index;
    j["task_id"] = r.task_id;
    return j.dump();
}

RolloutRecord decode_record(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw SchemaError(std::string("record is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || j.contains("kind")) {
        throw SchemaError("record line is not a record object");
    }
    RolloutRecord r;
    r.advantage = get_number(j, "advantage");
    r.checkpoint_version = get_u64(j, "checkpoint_version");
    const auto& probs = j.find("chosen_probs");
    if (probs == j.end() || !probs->is_array()) {
        throw SchemaError("field 'chosen_probs' missing or not an array");
    }
    for (const auto& p : *probs) {
        if (!p.is_number()) {
            throw SchemaError("chosen_probs holds a non-number");
        }
        r.chosen_probs.push_back(p.get<double>());
    }
    for (const auto& c : get_field<std::vector<std::string>>(j, "commitments")) {
        try {
            r.commitments.push_back(crypto::digest_from_hex(c));
        } catch (const InvalidInput& e) {
            throw SchemaError(std::string("bad commitment digest: ") + e.what());
        }
    }
    const auto eos = j.find("eos_prob_at_end");
    if (eos == j.end()) {
        throw SchemaError("field 'eos_prob_at_end' missing");
    }
    if (!eos->is_null()) {
        if (!eos->is_number()) {
            throw SchemaError("eos_prob_at_end is neither null nor a number");
        }
        r.eos_prob_at_end = eos->get<double>();
    }
    r.node_address = get_key(j, "node_address");
    const auto toks = j.find("output_tokens");
    if (toks == j.end() || !toks->is_array()) {
        throw SchemaError("field 'output_tokens' missing or not an array");
    }
    for (const auto& t : *toks) {
        if (!t.is_number_integer()) {
            throw SchemaError("output_tokens holds a non-integer");
        }
        r.output_tokens.push_back(t.get<Token>());
    }
    r.r_task = get_number(j, "r_task");
    r.r_total = get_number(j, "r_total");
    r.step = get_u64(j, "step");
    r.submission_index = get_u64(j, "submission_index");
    r.task_id = get_u64(j, "task_id");
    if (j.size() != 12) {
        throw SchemaError("record has unexpected fields");
    }
    return r;
}

std::string signing_payload(const RolloutFile& file) {
    std::string out = header_json(file.header, false).dump();
    out += '\n';
    for (const auto& r : file.records) {
        out += encode_record(r);
        out += '\n';
    }
    return out;
}

std::string encode_file_unsigned(const RolloutFile& file) {
    std::string out = header_json(file.header, true).dump();
    out += '\n';
    for (const auto& r : file.records) {
        out += encode_record(r);
        out += '\n';
    }
    return out;
}

std::string encode_file(RolloutFile file, const crypto::KeyPair& key) {
    file.header.node_address = key.public_key();
    file.header.signature = key.sign(signing_payload(file));
    return encode_file_unsigned(file);
}

RolloutFile parse_file(const std::string& bytes) {
    const auto lines = split_lines(bytes);
    if (lines.empty()) {
        throw SchemaError("empty rollout file");
    }
    json h;
    try {
        h = json::parse(lines[0]);
    } catch (const json::exception& e) {
        throw SchemaError(std::string("header is not valid JSON: ") + e.what());
    }
    if (!h.is_object() || h.value("kind", std::string()) != "header") {
        throw SchemaError("first line is not a header");
    }
    RolloutFile file;
    const auto version = get_u64(h, "schema_version");
    if (version != static_cast<std::uint64_t>(kSchemaVersion)) {
        throw SchemaError("unsupported schema version " + std::to_string(version));
    }
    file.header.schema_version = static_cast<int>(version);
    file.header.node_address = get_key(h, "node_address");
    file.header.step = get_u64(h, "step");
    file.header.submission_index = get_u64(h, "submission_index");
    try {
        file.header.signature = crypto::signature_from_hex(get_field<std::string>(h, "signature"));
    } catch (const SchemaError&) {
        throw;
    } catch (const InvalidInput& e) {
        throw SchemaError(std::string("bad signature field: ") + e.what());
    }
    if (h.size() != 6) {
        throw SchemaError("header has unexpected fields");
    }

    std::string payload = header_json(file.header, false).dump();
    payload += '\n';
    for (std::size_t i = 1; i < lines.size(); ++i) {
        file.records.push_back(decode_record(lines[i]));
        payload += lines[i];
        payload += '\n';
    }
    if (!crypto::verify(file.header.node_address, payload, file.header.signature)) {
        throw SchemaError("header signature does not verify against node_address");
    }
    return file;
}

std::string storage_key(const crypto::PublicKey& address, std::uint64_t step,
                        std::uint64_t submission_index) {
    std::ostringstream os;
    os << "step-" << step << '/' << to_hex(address) << '-' << submission_index << ".rollout";
    return os.str();
}

std::vector<RolloutRecord> generate_group(const policy::PolicyParams& params,
                                          std::uint64_t checkpoint_version,
                                          const tasks::Task& task, SplitMix64& rng,
                                          const WorkerOptions& opts) {
    if (opts.group_size < 2) {
        throw InvalidInput("group size must be >= 2");
    }
    if (!(opts.temperature > 0.0)) {
        throw InvalidInput("temperature must be > 0");
    }
    policy::SamplingOptions so;
    so.temperature = opts.temperature;
    so.eos_floor = opts.eos_floor;
    std::vector<RolloutRecord> group;
    std::vector<double> rewards;
    for (int g = 0; g < opts.group_size; ++g) {
        auto comp = policy::sample_completion(params, task.prompt_tokens, rng, so);
        RolloutRecord r;
        r.task_id = task.task_id;
        r.checkpoint_version = checkpoint_version;
        r.commitments = build_commitments(comp.hidden, opts.commit_interval);
        r.output_tokens = std::move(comp.tokens);
        r.chosen_probs = std::move(comp.chosen_probs);
        r.eos_prob_at_end = comp.eos_prob_at_end;
        const auto rb = tasks::total_reward(task, r.output_tokens, opts.alpha);
        r.r_task = rb.r_task;
        r.r_total = rb.r_total;
        rewards.push_back(rb.r_total);
        group.push_back(std::move(r));
    }
    const auto adv = policy::compute_advantages(rewards, opts.adv_eps, opts.advantage_mode);
    for (std::size_t i = 0; i < group.size(); ++i) {
        group[i].advantage = adv[i];
    }
    return group;
}

RolloutFile generate_file(const policy::PolicyParams& params, std::uint64_t checkpoint_version,
                          const std::vector<tasks::Task>& dataset,
                          const crypto::PublicKey& address, std::uint64_t step,
                          std::uint64_t submission_index, const WorkerOptions& opts) {
    const std::uint64_t seed = derive_seed(address, step, submission_index);
    const auto prompts =
        select_prompts(seed, dataset.size(), static_cast<std::size_t>(opts.groups_per_file));
    SplitMix64 rng(sampling_seed(seed));
    RolloutFile file;
    file.header.node_address = address;
    file.header.step = step;
    file.header.submission_index = submission_index;
    for (std::size_t idx : prompts) {
        for (auto& r : generate_group(params, checkpoint_version, dataset[idx], rng, opts)) {
            r.node_address = address;
            r.step = step;
            r.submission_index = submission_index;
            file.records.push_back(std::move(r));
        }
    }
    return file;
}

}  // namespace swarm::rollout
