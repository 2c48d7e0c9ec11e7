// SPDX-License-Identifier: Apache-2.0

#include "swarm/ledger.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace swarm::orchestrator {

using nlohmann::json;

namespace {

constexpr std::pair<EventKind, std::string_view> kKinds[] = {
    {EventKind::kRegister, "register"},
    {EventKind::kInviteAccept, "invite_accept"},
    {EventKind::kContribution, "contribution"},
    {EventKind::kSlash, "slash"},
};

}  // namespace

std::string_view event_kind_name(EventKind k) {
    for (const auto& [kind, name] : kKinds) {
        if (kind == k) {
            return name;
        }
    }
    return "register";
}

EventKind event_kind_from_name(std::string_view name) {
    for (const auto& [kind, n] : kKinds) {
        if (n == name) {
            return kind;
        }
    }
    throw InvalidInput("unknown ledger event kind: " + std::string(name));
}

std::string canonical_event(const LedgerEvent& e) {
    json j;
    j["kind"] = std::string(event_kind_name(e.kind));
    j["payload"] = json::parse(e.payload);
    j["seq"] = e.seq;
    j["signer"] = to_hex(e.signer);
    return j.dump();
}

crypto::Digest event_hash(const crypto::Digest& prev, const LedgerEvent& e) {
    crypto::Sha256 h;
    h.update(ByteView(prev.data(), prev.size()));
    h.update(canonical_event(e));
    return h.finish();
}

std::string encode_event(const LedgerEvent& e) {
    json j;
    j["kind"] = std::string(event_kind_name(e.kind));
    j["payload"] = json::parse(e.payload);
    j["prev_hash"] = crypto::digest_hex(e.prev_hash);
    j["seq"] = e.seq;
    j["signature"] = to_hex(e.signature);
    j["signer"] = to_hex(e.signer);
    j["this_hash"] = crypto::digest_hex(e.this_hash);
    return j.dump();
}

LedgerEvent decode_event(const std::string& line) {
    try {
        const json j = json::parse(line);
        LedgerEvent e;
        e.kind = event_kind_from_name(j.at("kind").get<std::string>());
        e.payload = j.at("payload").dump();
        e.prev_hash = crypto::digest_from_hex(j.at("prev_hash").get<std::string>());
        e.seq = j.at("seq").get<std::uint64_t>();
        e.signature = crypto::signature_from_hex(j.at("signature").get<std::string>());
        e.signer = crypto::public_key_from_hex(j.at("signer").get<std::string>());
        e.this_hash = crypto::digest_from_hex(j.at("this_hash").get<std::string>());
        return e;
    } catch (const json::exception& ex) {
        throw InvalidInput(std::string("malformed ledger event: ") + ex.what());
    }
}

std::optional<std::size_t> ledger_verify(const std::vector<LedgerEvent>& events) {
    crypto::Digest prev{};
    for (std::size_t i = 0; i < events.size(); ++i) {
        const LedgerEvent& e = events[i];
        if (e.seq != i || e.prev_hash != prev) {
            return i;
        }
        crypto::Digest h;
        try {
            h = event_hash(prev, e);
        } catch (const json::exception&) {
            return i;
        }
        if (h != e.this_hash ||
            !crypto::verify(e.signer, ByteView(h.data(), h.size()), e.signature)) {
            return i;
        }
        prev = e.this_hash;
    }
    return std::nullopt;
}

Ledger::Ledger(std::filesystem::path path) : path_(std::move(path)) {
    if (!path_.empty()) {
        std::ofstream out(path_, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw InvalidInput("cannot create ledger file " + path_.string());
        }
    }
}

const LedgerEvent& Ledger::append(EventKind kind, const std::string& payload_json,
                                  const crypto::KeyPair& signer) {
    LedgerEvent e;
    e.seq = events_.size();
    e.kind = kind;
    e.payload = json::parse(payload_json).dump();
    e.signer = signer.public_key();
    e.prev_hash = events_.empty() ? crypto::Digest{} : events_.back().this_hash;
    e.this_hash = event_hash(e.prev_hash, e);
    e.signature = signer.sign(ByteView(e.this_hash.data(), e.this_hash.size()));
    events_.push_back(e);
    if (!path_.empty()) {
        std::ofstream out(path_, std::ios::binary | std::ios::app);
        out << encode_event(e) << '\n';
    }
    return events_.back();
}

std::string Ledger::dump() const {
    std::string out;
    for (const auto& e : events_) {
        out += encode_event(e);
        out += '\n';
    }
    return out;
}

std::vector<LedgerEvent> Ledger::parse(const std::string& text) {
    std::vector<LedgerEvent> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            out.push_back(decode_event(line));
        }
    }
    return out;
}

std::vector<LedgerEvent> Ledger::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InvalidInput("cannot read ledger file " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

}  // namespace swarm::orchestrator
