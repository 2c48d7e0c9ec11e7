// SPDX-License-Identifier: Apache-2.0

#include "swarm/crypto.hpp"

#include <sodium.h>

#include <algorithm>
#include <cstring>

#include "swarm/rng.hpp"

namespace swarm::crypto {

namespace {

struct SodiumInit {
    SodiumInit() {
        if (sodium_init() < 0) {
            throw std::runtime_error("libsodium initialisation failed");
        }
    }
};

void ensure_sodium() { static const SodiumInit init; }

template <std::size_t N>
std::array<std::uint8_t, N> fixed_from_hex(std::string_view hex) {
    const Bytes raw = from_hex(hex);
    if (raw.size() != N) {
        throw InvalidInput("expected " + std::to_string(N) + " bytes of hex, got " +
                           std::to_string(raw.size()));
    }
    std::array<std::uint8_t, N> out{};
    std::copy(raw.begin(), raw.end(), out.begin());
    return out;
}

static_assert(sizeof(crypto_hash_sha256_state) <= 128);

}  // namespace

Digest sha256(ByteView data) {
    ensure_sodium();
    Digest out{};
    crypto_hash_sha256(out.data(), data.data(), data.size());
    return out;
}

Sha256::Sha256() {
    ensure_sodium();
    crypto_hash_sha256_init(reinterpret_cast<crypto_hash_sha256_state*>(state_.data()));
}

Sha256& Sha256::update(ByteView data) {
    crypto_hash_sha256_update(reinterpret_cast<crypto_hash_sha256_state*>(state_.data()),
                              data.data(), data.size());
    return *this;
}

Digest Sha256::finish() {
    Digest out{};
    crypto_hash_sha256_final(reinterpret_cast<crypto_hash_sha256_state*>(state_.data()),
                             out.data());
    return out;
}

std::string digest_hex(const Digest& d) { return to_hex(d); }
Digest digest_from_hex(std::string_view hex) { return fixed_from_hex<32>(hex); }
PublicKey public_key_from_hex(std::string_view hex) { return fixed_from_hex<32>(hex); }
Signature signature_from_hex(std::string_view hex) { return fixed_from_hex<64>(hex); }

KeyPair KeyPair::from_seed(std::uint64_t seed) {
    ensure_sodium();
    std::array<std::uint8_t, crypto_sign_SEEDBYTES> key_seed{};
    SplitMix64 rng(seed);
    for (std::size_t i = 0; i < key_seed.size(); i += 8) {
        const std::uint64_t v = rng.next();
        std::memcpy(key_seed.data() + i, &v, 8);
    }
    KeyPair kp;
    crypto_sign_seed_keypair(kp.public_key_.data(), kp.secret_key_.data(), key_seed.data());
    return kp;
}

KeyPair KeyPair::generate() {
    ensure_sodium();
    KeyPair kp;
    crypto_sign_keypair(kp.public_key_.data(), kp.secret_key_.data());
    return kp;
}

std::string KeyPair::address_hex() const { return to_hex(public_key_); }

Signature KeyPair::sign(ByteView message) const {
    Signature sig{};
    crypto_sign_detached(sig.data(), nullptr, message.data(), message.size(),
                         secret_key_.data());
    return sig;
}

bool verify(const PublicKey& key, ByteView message, const Signature& sig) {
    ensure_sodium();
    return crypto_sign_verify_detached(sig.data(), message.data(), message.size(),
                                       key.data()) == 0;
}

}  // namespace swarm::crypto
