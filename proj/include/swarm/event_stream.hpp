// SPDX-License-Identifier: Apache-2.0
//
// In-memory append-only event feed with blocking reads, and a helper that
// serves it as a text/event-stream response.

#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <string>
#include <vector>

namespace httplib {
struct Response;
}

namespace swarm {

class EventStream {
public:
    /// Returns the sequence number assigned to `data` (0-based).
    std::uint64_t publish(std::string data);

    /// Events with seq >= from, waiting up to `timeout` if none are available yet.
    std::vector<std::string> read_from(std::uint64_t from, std::chrono::milliseconds timeout);
    std::uint64_t size() const;
    void close();
    bool closed() const;

private:
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::vector<std::string> events_;
    bool closed_ = false;
};

/// Streams `stream` from `from` as SSE frames ("id: N\ndata: <json>\n\n") until
/// the client disconnects, the stream closes, or `stop` becomes true.
void serve_event_stream(httplib::Response& res, EventStream& stream, std::uint64_t from,
                        const std::atomic<bool>& stop);

}  // namespace swarm
