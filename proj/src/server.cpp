#include "splitf/server.hpp"

#include <chrono>
#include <cmath>
#include <vector>

namespace splitf {

namespace {

double steady_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

wire::Frame error_frame(const std::string& session_id, const std::string& msg) {
    wire::Frame f;
    f.header.kind = wire::FrameKind::error;
    f.header.session_id = session_id;
    f.header.tensor_shape = {0};
    f.header.error_msg = msg;
    return f;
}

} // namespace

ServerEngine::ServerEngine(Weights weights, ServerConfig config)
    : weights_(std::move(weights)), config_(config), now_s_(steady_seconds) {
    weights_.config.validate();
    if (config_.layer_begin <= 0 || config_.layer_end >= weights_.config.n_layers ||
        config_.layer_begin >= config_.layer_end) {
        throw SplitError(ErrorKind::config,
                         "hosted layer range must be non-empty and strictly inside the model");
    }
    if (config_.session_expiry_s <= 0) {
        throw SplitError(ErrorKind::config, "session expiry must be positive");
    }
    if (config_.max_sessions < 1) {
        throw SplitError(ErrorKind::config, "max_sessions must be >= 1");
    }
}

size_t ServerEngine::expire_sessions() {
    const double now = now_s_();
    std::lock_guard<std::mutex> lock(table_mutex_);
    size_t removed = 0;
    for (auto it = sessions_.begin(); it != sessions_.end();) {
        if (now - it->second->last_active > config_.session_expiry_s) {
            it = sessions_.erase(it);
            ++removed;
        } else {
            ++it;
        }
    }
    return removed;
}

size_t ServerEngine::session_count() const {
    std::lock_guard<std::mutex> lock(table_mutex_);
    return sessions_.size();
}

std::optional<ServerEngine::SessionView> ServerEngine::session_view(
    const std::string& session_id) const {
    std::lock_guard<std::mutex> lock(table_mutex_);
    const auto it = sessions_.find(session_id);
    if (it == sessions_.end()) return std::nullopt;
    SessionView view;
    view.cache_len = it->second->bank.len();
    view.committed_len = it->second->bank.committed_len();
    view.provisional = it->second->bank.provisional();
    return view;
}

std::shared_ptr<ServerEngine::Session> ServerEngine::find_session(const std::string& id) {
    const double now = now_s_();
    std::lock_guard<std::mutex> lock(table_mutex_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) return nullptr;
    if (now - it->second->last_active > config_.session_expiry_s) {
        sessions_.erase(it); // lazy expiry on access
        return nullptr;
    }
    return it->second;
}

std::shared_ptr<ServerEngine::Session> ServerEngine::create_or_reset_session(
    const std::string& id) {
    std::lock_guard<std::mutex> lock(table_mutex_);
    auto it = sessions_.find(id);
    if (it != sessions_.end()) return it->second; // prompt handling resets it
    if (static_cast<int>(sessions_.size()) >= config_.max_sessions) {
        throw SplitError(ErrorKind::capacity, "session table full");
    }
    auto session = std::make_shared<Session>();
    session->bank = CacheBank(weights_.config, config_.layer_begin, config_.layer_end);
    sessions_[id] = session;
    return session;
}

HiddenStates ServerEngine::frame_to_hidden(const wire::Frame& request) const {
    const auto& h = request.header;
    if (h.tensor_shape.size() != 2) {
        throw SplitError(ErrorKind::protocol, "hidden tensor must be rank 2 [seq, hidden]");
    }
    const int seq = static_cast<int>(h.tensor_shape[0]);
    const int dim = static_cast<int>(h.tensor_shape[1]);
    if (dim != weights_.config.hidden_dim) {
        throw SplitError(ErrorKind::protocol, "hidden dim mismatch");
    }
    if (seq < 1) throw SplitError(ErrorKind::protocol, "empty batch");
    if (static_cast<int>(h.positions.size()) != seq) {
        throw SplitError(ErrorKind::protocol, "positions must match the batch seq dim");
    }
    HiddenStates hs;
    hs.seq = seq;
    hs.dim = dim;
    hs.data = wire::decode_values(request.tensor_bytes, h.dtype);
    if (hs.data.size() != static_cast<size_t>(seq) * dim) {
        throw SplitError(ErrorKind::protocol, "tensor payload does not match declared shape");
    }
    hs.positions.reserve(static_cast<size_t>(seq));
    for (int64_t p : h.positions) {
        if (p < 0 || p >= weights_.config.max_seq_len) {
            throw SplitError(ErrorKind::capacity, "position exceeds max_seq_len");
        }
        hs.positions.push_back(static_cast<int>(p));
    }
    for (float v : hs.data) {
        if (!std::isfinite(v)) throw SplitError(ErrorKind::numeric, "non-finite hidden payload");
    }
    return hs;
}

wire::Frame ServerEngine::hidden_to_response(const wire::Frame& request, const HiddenStates& h,
                                             double server_ms) const {
    wire::Frame out;
    out.header.kind = wire::FrameKind::response;
    out.header.session_id = request.header.session_id;
    out.header.tensor_shape = {h.seq, h.dim};
    out.header.dtype = config_.response_dtype.value_or(request.header.dtype);
    out.header.server_ms = server_ms;
    wire::CodecStats stats;
    out.tensor_bytes = wire::encode_values(h.data, out.header.dtype, &stats);
    return out;
}

AttentionMask ServerEngine::mask_from_frame(const wire::Frame& request, int cache_len,
                                            int seq) const {
    const auto& h = request.header;
    if (!h.mask_shape.has_value()) {
        return build_attention_mask(seq, cache_len);
    }
    const auto& ms = *h.mask_shape;
    if (ms.size() != 4 || ms[0] != 1 || ms[1] != 1) {
        throw SplitError(ErrorKind::protocol, "mask_shape must be [1, 1, q, kv]");
    }
    AttentionMask mask;
    mask.q_len = static_cast<int>(ms[2]);
    mask.kv_len = static_cast<int>(ms[3]);
    if (mask.q_len != seq || mask.kv_len != cache_len + seq) {
        throw SplitError(ErrorKind::protocol, "mask shape does not match cache length plus batch");
    }
    mask.data = wire::decode_values(request.mask_bytes, wire::WireDtype::f16);
    for (float v : mask.data) {
        if (!(v == 0.0f || (std::isinf(v) && v < 0.0f))) {
            throw SplitError(ErrorKind::protocol, "mask entries must be 0 or -inf");
        }
    }
    return mask;
}

wire::Frame ServerEngine::handle(const wire::Frame& request) {
    const std::string& sid = request.header.session_id;
    try {
        switch (request.header.kind) {
            case wire::FrameKind::ping: return handle_ping(request);
            case wire::FrameKind::prompt: return handle_prompt(request);
            case wire::FrameKind::step:
            case wire::FrameKind::accept_and_step: return handle_step(request);
            case wire::FrameKind::response:
            case wire::FrameKind::error:
                throw SplitError(ErrorKind::protocol, "response/error frames are not requests");
        }
        throw SplitError(ErrorKind::protocol, "unhandled frame kind");
    } catch (const SplitError& e) {
        return error_frame(sid, e.what());
    } catch (const std::exception& e) {
        return error_frame(sid, std::string("internal: ") + e.what());
    }
}

wire::Frame ServerEngine::handle_ping(const wire::Frame& request) {
    wire::Frame out;
    out.header.kind = wire::FrameKind::response;
    out.header.session_id = request.header.session_id;
    out.header.tensor_shape = {0};
    out.header.dtype = request.header.dtype;
    out.header.server_ms = 0.0;
    return out;
}

wire::Frame ServerEngine::handle_prompt(const wire::Frame& request) {
    if (request.header.session_id.empty()) {
        throw SplitError(ErrorKind::protocol, "prompt frame requires a session_id");
    }
    HiddenStates h = frame_to_hidden(request);
    if (h.seq > weights_.config.max_seq_len) {
        throw SplitError(ErrorKind::capacity, "prompt exceeds max_seq_len");
    }
    auto session = create_or_reset_session(request.header.session_id);
    std::lock_guard<std::mutex> lock(session->mutex);
    session->bank.reset(); // a prompt frame always reinitializes

    const double t0 = steady_seconds();
    AttentionMask mask = mask_from_frame(request, 0, h.seq);
    HiddenStates out = forward_layers(weights_, config_.layer_begin, config_.layer_end, h,
                                      session->bank, mask);
    // The whole prompt is committed context.
    session->bank.mark_committed(session->bank.len());
    session->last_active = now_s_();
    const double server_ms = (steady_seconds() - t0) * 1000.0;
    return hidden_to_response(request, out, server_ms);
}

wire::Frame ServerEngine::handle_step(const wire::Frame& request) {
    auto session = find_session(request.header.session_id);
    if (!session) {
        throw SplitError(ErrorKind::session,
                         "unknown or expired session: " + request.header.session_id);
    }
    std::lock_guard<std::mutex> lock(session->mutex);
    HiddenStates h = frame_to_hidden(request);

    const double t0 = steady_seconds();

    // Resolve the previous provisional batch first. A step without keep
    // indices drops any outstanding tail (pure rollback).
    std::vector<int> keep;
    if (request.header.keep_indices.has_value()) {
        keep.reserve(request.header.keep_indices->size());
        for (int64_t k : *request.header.keep_indices) keep.push_back(static_cast<int>(k));
    }
    if (!keep.empty() || session->bank.provisional() > 0) {
        session->bank.resolve(keep);
    }

    if (request.header.crop_pos.has_value()) {
        const int64_t pos = *request.header.crop_pos;
        if (pos < 0 || pos > session->bank.len()) {
            throw SplitError(ErrorKind::protocol, "crop position exceeds session length");
        }
        session->bank.crop(static_cast<int>(pos));
    }

    const int cache_len = session->bank.len();
    AttentionMask mask = mask_from_frame(request, cache_len, h.seq);
    // forward_layers appends the batch; it stays provisional (committed_len
    // untouched) until the next frame's keep indices.
    HiddenStates out = forward_layers(weights_, config_.layer_begin, config_.layer_end, h,
                                      session->bank, mask);
    session->last_active = now_s_();
    const double server_ms = (steady_seconds() - t0) * 1000.0;
    return hidden_to_response(request, out, server_ms);
}

} // namespace splitf
