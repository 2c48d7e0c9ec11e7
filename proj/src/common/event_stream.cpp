// SPDX-License-Identifier: Apache-2.0

#include "swarm/event_stream.hpp"

#include <memory>

#include <httplib.h>

namespace swarm {

std::uint64_t EventStream::publish(std::string data) {
    std::uint64_t seq;
    {
        std::lock_guard lock(mu_);
        seq = events_.size();
        events_.push_back(std::move(data));
    }
    cv_.notify_all();
    return seq;
}

std::vector<std::string> EventStream::read_from(std::uint64_t from,
                                                std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    cv_.wait_for(lock, timeout, [&] { return closed_ || events_.size() > from; });
    if (events_.size() <= from) {
        return {};
    }
    return {events_.begin() + static_cast<std::ptrdiff_t>(from), events_.end()};
}

std::uint64_t EventStream::size() const {
    std::lock_guard lock(mu_);
    return events_.size();
}

void EventStream::close() {
    {
        std::lock_guard lock(mu_);
        closed_ = true;
    }
    cv_.notify_all();
}

bool EventStream::closed() const {
    std::lock_guard lock(mu_);
    return closed_;
}

void serve_event_stream(httplib::Response& res, EventStream& stream, std::uint64_t from,
                        const std::atomic<bool>& stop) {
    auto next = std::make_shared<std::uint64_t>(from);
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream",
        [&stream, &stop, next](std::size_t, httplib::DataSink& sink) {
            if (stop.load() || stream.closed()) {
                sink.done();
                return true;
            }
            auto batch = stream.read_from(*next, std::chrono::milliseconds(500));
            if (batch.empty()) {
                // Comment frame doubles as a disconnect probe.
                static const std::string keepalive = ": keepalive\n\n";
                return sink.write(keepalive.data(), keepalive.size());
            }
            std::string out;
            for (const auto& e : batch) {
                out += "id: " + std::to_string((*next)++) + "\ndata: " + e + "\n\n";
            }
            return sink.write(out.data(), out.size());
        });
}

}  // namespace swarm
