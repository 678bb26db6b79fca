#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "splitf/tinyformer.hpp"
#include "splitf/wire.hpp"

namespace splitf {

struct ServerConfig {
    int layer_begin = 2;
    int layer_end = 6;
    double session_expiry_s = 300.0;
    int max_sessions = 64;
    // Response tensors mirror the request dtype unless pinned here.
    std::optional<wire::WireDtype> response_dtype;
};

// The untrusted-side engine: hosted middle layers plus per-session caches.
// handle() maps any request frame to a response frame and never throws;
// failures come back as categorized error frames. The only tensors it ever
// sees or returns are hidden states and masks.
class ServerEngine {
public:
    ServerEngine(Weights weights, ServerConfig config);

    wire::Frame handle(const wire::Frame& request);

    // Removes sessions idle longer than session_expiry_s; returns the count.
    size_t expire_sessions();
    size_t session_count() const;

    // Live cache state for one session, for tests and invariant checks.
    struct SessionView {
        int cache_len = 0;
        int committed_len = 0;
        int provisional = 0;
    };
    std::optional<SessionView> session_view(const std::string& session_id) const;

    const ServerConfig& config() const { return config_; }
    const ModelConfig& model_config() const { return weights_.config; }

    // Injectable clock (seconds, monotonic) so expiry is testable.
    void set_clock(std::function<double()> now_s) { now_s_ = std::move(now_s); }

private:
    struct Session {
        CacheBank bank;
        double last_active = 0.0;
        std::mutex mutex;
    };

    wire::Frame handle_prompt(const wire::Frame& request);
    wire::Frame handle_step(const wire::Frame& request);
    wire::Frame handle_ping(const wire::Frame& request);

    std::shared_ptr<Session> find_session(const std::string& id);
    std::shared_ptr<Session> create_or_reset_session(const std::string& id);

    HiddenStates frame_to_hidden(const wire::Frame& request) const;
    wire::Frame hidden_to_response(const wire::Frame& request, const HiddenStates& h,
                                   double server_ms) const;
    AttentionMask mask_from_frame(const wire::Frame& request, int cache_len, int seq) const;

    Weights weights_;
    ServerConfig config_;
    std::function<double()> now_s_;

    mutable std::mutex table_mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
};

} // namespace splitf
