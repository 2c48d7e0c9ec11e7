// SPDX-License-Identifier: Apache-2.0
//
// Append-only, hash-chained, signed event log.
//
// Each event is stored as one compact JSON line:
//   {"kind":"register"|"invite_accept"|"contribution"|"slash","payload":<object>,
//    "prev_hash":<hex32>,"seq":<u64>,"signature":<hex64>,"signer":<hex32>,
//    "this_hash":<hex32>}
// canonical(e) = compact JSON {"kind","payload","seq","signer"} (keys ascending)
// this_hash    = SHA-256(prev_hash || canonical(e)), prev_hash of event 0 = 32 zero bytes
// signature    = Ed25519 by `signer` over the 32 bytes of this_hash

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "swarm/crypto.hpp"

namespace swarm::orchestrator {

enum class EventKind { kRegister, kInviteAccept, kContribution, kSlash };

std::string_view event_kind_name(EventKind k);
EventKind event_kind_from_name(std::string_view name);

struct LedgerEvent {
    std::uint64_t seq = 0;
    EventKind kind = EventKind::kRegister;
    std::string payload;  // compact JSON object
    crypto::PublicKey signer{};
    crypto::Signature signature{};
    crypto::Digest prev_hash{};
    crypto::Digest this_hash{};

    bool operator==(const LedgerEvent&) const = default;
};

std::string canonical_event(const LedgerEvent& e);
crypto::Digest event_hash(const crypto::Digest& prev, const LedgerEvent& e);

std::string encode_event(const LedgerEvent& e);
LedgerEvent decode_event(const std::string& line);

/// Index of the first event that breaks the chain (wrong seq, prev_hash,
/// this_hash or signature), or nullopt if the log is intact.
std::optional<std::size_t> ledger_verify(const std::vector<LedgerEvent>& events);

class Ledger {
public:
    /// `path` empty keeps the log in memory only; otherwise every append is
    /// also written through to the file.
    explicit Ledger(std::filesystem::path path = {});

    const LedgerEvent& append(EventKind kind, const std::string& payload_json,
                              const crypto::KeyPair& signer);
    const std::vector<LedgerEvent>& events() const { return events_; }
    std::string dump() const;

    static std::vector<LedgerEvent> parse(const std::string& text);
    static std::vector<LedgerEvent> load(const std::filesystem::path& path);

private:
    std::filesystem::path path_;
    std::vector<LedgerEvent> events_;
};

}  // namespace swarm::orchestrator
