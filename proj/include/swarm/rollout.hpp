// SPDX-License-Identifier: Apache-2.0
//
// Rollout worker: deterministic prompt selection, group sampling, interval
// commitments over hidden states, and the signed rollout file format.
//
// Rollout file (UTF-8, '\n'-terminated lines, every line a compact JSON
// object with keys in ascending byte order):
//
//   line 0   header  {"kind":"header","node_address":<hex32>,"schema_version":1,
//                     "signature":<hex64>,"step":<u64>,"submission_index":<u64>}
//   line 1.. record  {"advantage":<f64>,"checkpoint_version":<u64>,
//                     "chosen_probs":[<f64>...],"commitments":[<hex32>...],
//                     "eos_prob_at_end":<f64>|null,"node_address":<hex32>,
//                     "output_tokens":[<int>...],"r_task":<f64>,"r_total":<f64>,
//                     "step":<u64>,"submission_index":<u64>,"task_id":<u64>}
//
// Doubles use the shortest representation that round-trips. Records of one
// prompt group are contiguous. The Ed25519 signature covers the header line
// with the "signature" key removed, then '\n', then every record line with
// its trailing '\n'.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "swarm/crypto.hpp"
#include "swarm/grpo.hpp"
#include "swarm/policy.hpp"
#include "swarm/rng.hpp"
#include "swarm/tasks.hpp"

namespace swarm::rollout {

using policy::Token;

inline constexpr int kSchemaVersion = 1;
inline constexpr int kCommitInterval = 32;

/// Little-endian integer of the first 8 bytes of the address.
std::uint64_t address_int(const crypto::PublicKey& address);

/// addr_int * step + submission_index, wrapping mod 2^64.
std::uint64_t derive_seed(std::uint64_t addr_int, std::uint64_t step,
                          std::uint64_t submission_index);
std::uint64_t derive_seed(const crypto::PublicKey& address, std::uint64_t step,
                          std::uint64_t submission_index);

/// Dataset indices of the prompts a file must cover, in order: `count` draws of
/// SplitMix64(seed).below(dataset_size), repeats allowed.
std::vector<std::size_t> select_prompts(std::uint64_t seed, std::size_t dataset_size,
                                        std::size_t count);

/// Seed of the token-sampling stream for a file; separate from prompt selection
/// so that validators never touch it.
std::uint64_t sampling_seed(std::uint64_t seed);

/// Canonical bytes of one hidden vector: each value as llround(v * 1e6) in a
/// little-endian two's-complement int64.
void append_rounded(Bytes& out, std::span<const double> values);

/// digest_j = SHA-256(digest_{j-1} || rounded hidden vectors of positions
/// [jK, (j+1)K)), digest_{-1} = 32 zero bytes. Returns ceil(n / K) digests.
std::vector<crypto::Digest> build_commitments(std::span<const std::vector<double>> hidden,
                                              int interval = kCommitInterval);

struct RolloutRecord {
    crypto::PublicKey node_address{};
    std::uint64_t step = 0;
    std::uint64_t submission_index = 0;
    std::uint64_t task_id = 0;
    std::uint64_t checkpoint_version = 0;
    std::vector<Token> output_tokens;
    std::vector<double> chosen_probs;
    std::vector<crypto::Digest> commitments;
    std::optional<double> eos_prob_at_end;
    double r_task = 0.0;
    double r_total = 0.0;
    double advantage = 0.0;

    bool operator==(const RolloutRecord&) const = default;
};

struct FileHeader {
    int schema_version = kSchemaVersion;
    crypto::PublicKey node_address{};
    std::uint64_t step = 0;
    std::uint64_t submission_index = 0;
    crypto::Signature signature{};
};

struct RolloutFile {
    FileHeader header;
    std::vector<RolloutRecord> records;
};

/// Any structural defect in a rollout file.
class SchemaError : public InvalidInput {
public:
    using InvalidInput::InvalidInput;
};

std::string encode_record(const RolloutRecord& r);
RolloutRecord decode_record(const std::string& line);

/// Serializes the file and signs it with `key`; header.signature is replaced.
std::string encode_file(RolloutFile file, const crypto::KeyPair& key);
/// Serializes with the signature already in the header (no re-signing).
std::string encode_file_unsigned(const RolloutFile& file);
/// Bytes the signature covers for a file with this content.
std::string signing_payload(const RolloutFile& file);

/// Parses and checks the signature. Throws SchemaError on any defect,
/// including a missing final newline.
RolloutFile parse_file(const std::string& bytes);

/// Storage key "step-<s>/<address hex>-<submission index>.rollout".
std::string storage_key(const crypto::PublicKey& address, std::uint64_t step,
                        std::uint64_t submission_index);

struct WorkerOptions {
    int group_size = 8;
    int groups_per_file = 2;
    double temperature = 1.0;
    double eos_floor = 0.1;  // matches the validator's termination threshold
    double alpha = 0.01;
    double adv_eps = 1e-6;
    policy::AdvantageMode advantage_mode = policy::AdvantageMode::kMeanStd;
    int commit_interval = kCommitInterval;
};

/// Samples G completions for one task; rewards, advantages and commitments
/// are filled, identity fields (address, step, submission) are left zero.
std::vector<RolloutRecord> generate_group(const policy::PolicyParams& params,
                                          std::uint64_t checkpoint_version,
                                          const tasks::Task& task, SplitMix64& rng,
                                          const WorkerOptions& opts);

/// The full honest output of one worker submission.
RolloutFile generate_file(const policy::PolicyParams& params, std::uint64_t checkpoint_version,
                          const std::vector<tasks::Task>& dataset,
                          const crypto::PublicKey& address, std::uint64_t step,
                          std::uint64_t submission_index, const WorkerOptions& opts);

}  // namespace swarm::rollout
