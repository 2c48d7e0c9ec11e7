// SPDX-License-Identifier: Apache-2.0
//
// Shared byte helpers and error types used across every swarm module.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace swarm {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

/// Malformed arguments: out-of-range token ids, overlong sequences, bad configs.
class InvalidInput : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// NaN or Inf reached a training computation. Training must halt on this.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// No usable checkpoint could be obtained in time.
class StalenessError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string to_hex(ByteView bytes);
Bytes from_hex(std::string_view hex);

inline ByteView as_bytes(std::string_view s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

inline std::string to_string(ByteView bytes) {
    return {reinterpret_cast<const char*>(bytes.data()), bytes.size()};
}

void put_u64_le(Bytes& out, std::uint64_t v);
std::uint64_t get_u64_le(ByteView in, std::size_t offset);

}  // namespace swarm
