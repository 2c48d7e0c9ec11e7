// SPDX-License-Identifier: Apache-2.0
//
// SHA-256 digests and Ed25519 identities. Node addresses are raw 32-byte
// Ed25519 public keys.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "swarm/common.hpp"

namespace swarm::crypto {

using Digest = std::array<std::uint8_t, 32>;
using PublicKey = std::array<std::uint8_t, 32>;
using Signature = std::array<std::uint8_t, 64>;

Digest sha256(ByteView data);
inline Digest sha256(std::string_view s) { return sha256(as_bytes(s)); }

/// Incremental hasher for chained or streamed inputs.
class Sha256 {
public:
    Sha256();
    Sha256& update(ByteView data);
    Sha256& update(std::string_view s) { return update(as_bytes(s)); }
    Digest finish();

private:
    alignas(64) std::array<std::uint8_t, 128> state_{};
};

std::string digest_hex(const Digest& d);
Digest digest_from_hex(std::string_view hex);
PublicKey public_key_from_hex(std::string_view hex);
Signature signature_from_hex(std::string_view hex);

class KeyPair {
public:
    /// Deterministic key from a 32-byte seed; used by the simulator so runs replay.
    static KeyPair from_seed(std::uint64_t seed);
    static KeyPair generate();

    const PublicKey& public_key() const { return public_key_; }
    std::string address_hex() const;
    Signature sign(ByteView message) const;
    Signature sign(std::string_view message) const { return sign(as_bytes(message)); }

private:
    KeyPair() = default;
    PublicKey public_key_{};
    std::array<std::uint8_t, 64> secret_key_{};
};

bool verify(const PublicKey& key, ByteView message, const Signature& sig);
inline bool verify(const PublicKey& key, std::string_view message, const Signature& sig) {
    return verify(key, as_bytes(message), sig);
}

}  // namespace swarm::crypto
