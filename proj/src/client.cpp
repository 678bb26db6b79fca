#include "splitf/client.hpp"

#include <chrono>
#include <random>

namespace splitf {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string random_session_id() {
    static const char* hex = "0123456789abcdef";
    std::random_device rd;
    std::mt19937_64 rng((static_cast<uint64_t>(rd()) << 32) ^ rd());
    std::string id = "sess-";
    for (int i = 0; i < 16; ++i) id.push_back(hex[rng() & 0xf]);
    return id;
}

ErrorKind kind_from_error_message(const std::string& msg) {
    const size_t colon = msg.find(':');
    const std::string head = colon == std::string::npos ? msg : msg.substr(0, colon);
    for (ErrorKind k : {ErrorKind::config, ErrorKind::input, ErrorKind::protocol,
                        ErrorKind::transport, ErrorKind::capacity, ErrorKind::session,
                        ErrorKind::numeric, ErrorKind::training, ErrorKind::decomposition,
                        ErrorKind::internal}) {
        if (head == to_string(k)) return k;
    }
    return ErrorKind::protocol;
}

} // namespace

void SplitConfig::validate(const ModelConfig& model) const {
    if (prefix_layers < 1 || suffix_layers < 1) {
        throw SplitError(ErrorKind::config, "prefix and suffix must each host >= 1 layer");
    }
    if (prefix_layers + suffix_layers >= model.n_layers) {
        throw SplitError(ErrorKind::config, "prefix + suffix must leave a non-empty middle range");
    }
}

SplitClient::SplitClient(const Weights& weights, SplitConfig config, Channel& channel,
                         std::string session_id)
    : weights_(weights), config_(config), channel_(channel),
      session_id_(session_id.empty() ? random_session_id() : std::move(session_id)) {
    weights_.config.validate();
    config_.validate(weights_.config);
    prefix_bank_ = CacheBank(weights_.config, 0, config_.prefix_layers);
    suffix_bank_ = CacheBank(weights_.config, weights_.config.n_layers - config_.suffix_layers,
                             weights_.config.n_layers);
}

wire::Frame SplitClient::make_request(wire::FrameKind kind, const HiddenStates& h,
                                      const AttentionMask* mask, std::span<const int> keep,
                                      bool send_keep, std::optional<int> crop_pos,
                                      double* serialization_ms) {
    const auto t0 = Clock::now();
    wire::Frame frame;
    frame.header.kind = kind;
    frame.header.session_id = session_id_;
    frame.header.tensor_shape = {h.seq, h.dim};
    frame.header.dtype = config_.dtype;
    frame.header.positions.assign(h.positions.begin(), h.positions.end());
    if (send_keep) {
        frame.header.keep_indices.emplace(keep.begin(), keep.end());
    }
    if (crop_pos) frame.header.crop_pos = *crop_pos;
    frame.tensor_bytes = wire::encode_values(h.data, config_.dtype, &codec_stats_);
    if (mask != nullptr) {
        frame.header.mask_shape = {{1, 1, mask->q_len, mask->kv_len}};
        frame.mask_bytes = wire::encode_values(mask->data, wire::WireDtype::f16, nullptr);
    }
    if (serialization_ms) *serialization_ms += ms_since(t0);
    return frame;
}

HiddenStates SplitClient::exchange_hidden(const wire::Frame& request, int expect_seq,
                                          StepTiming& timing) {
    timing.payload_bytes_up = request.tensor_bytes.size() + request.mask_bytes.size();
    wire::Frame response;
    try {
        response = channel_.exchange(request);
    } catch (...) {
        dead_ = true; // no retry: abort and surface the failure
        throw;
    }
    if (response.header.kind == wire::FrameKind::error) {
        dead_ = true;
        const std::string msg = response.header.error_msg.value_or("unspecified server error");
        throw SplitError(kind_from_error_message(msg), "server: " + msg);
    }
    if (response.header.kind != wire::FrameKind::response) {
        dead_ = true;
        throw SplitError(ErrorKind::protocol, "unexpected response kind");
    }
    timing.payload_bytes_down = response.tensor_bytes.size();
    timing.remote_reported_ms = response.header.server_ms.value_or(0.0);

    const auto t0 = Clock::now();
    if (response.header.tensor_shape.size() != 2 ||
        response.header.tensor_shape[0] != expect_seq ||
        response.header.tensor_shape[1] != weights_.config.hidden_dim) {
        dead_ = true;
        throw SplitError(ErrorKind::protocol, "response tensor shape mismatch");
    }
    HiddenStates h;
    h.seq = expect_seq;
    h.dim = weights_.config.hidden_dim;
    h.data = wire::decode_values(response.tensor_bytes, response.header.dtype);
    timing.serialization_ms += ms_since(t0);
    return h;
}

int SplitClient::prefill(std::span<const int> prompt) {
    if (prompt.empty()) throw SplitError(ErrorKind::input, "prompt must be non-empty");
    if (dead_) throw SplitError(ErrorKind::transport, "session is dead");
    const ModelConfig& cfg = weights_.config;
    if (static_cast<int>(prompt.size()) > cfg.max_seq_len) {
        throw SplitError(ErrorKind::capacity, "prompt exceeds max_seq_len");
    }

    prefix_bank_.reset();
    suffix_bank_.reset();
    prefilled_ = false;
    first_step_done_ = false;

    const auto t0 = Clock::now();
    StepTiming timing;
    timing.batch_len = static_cast<int>(prompt.size());

    const auto local0 = Clock::now();
    HiddenStates h = embed(weights_, prompt, 0);
    AttentionMask mask = build_attention_mask(h.seq, 0);
    h = forward_layers(weights_, 0, config_.prefix_layers, h, prefix_bank_, mask);
    prefix_bank_.mark_committed(prefix_bank_.len());
    timing.local_ms += ms_since(local0);

    // The prompt frame carries no mask: the server applies the standard
    // causal mask for a fresh sequence.
    wire::Frame request = make_request(wire::FrameKind::prompt, h, nullptr, {}, false,
                                       std::nullopt, &timing.serialization_ms);
    HiddenStates mid = exchange_hidden(request, h.seq, timing);
    mid.positions = h.positions;

    const auto local1 = Clock::now();
    HiddenStates out = forward_layers(weights_, cfg.n_layers - config_.suffix_layers, cfg.n_layers,
                                      mid, suffix_bank_, mask);
    suffix_bank_.mark_committed(suffix_bank_.len());
    Logits logits = finalize(weights_, out);
    timing.local_ms += ms_since(local1);

    const int first = argmax_row(logits, logits.seq - 1);
    prefill_logits_.seq = 1;
    prefill_logits_.vocab = logits.vocab;
    prefill_logits_.data.assign(logits.row(logits.seq - 1),
                                logits.row(logits.seq - 1) + logits.vocab);
    prompt_len_ = static_cast<int>(prompt.size());
    prefilled_ = true;
    prefill_ms_ = ms_since(t0);
    return first;
}

Logits SplitClient::decode_step(std::span<const int> tokens, std::span<const int> positions,
                                const AttentionMask& mask, std::span<const int> keep,
                                std::optional<int> crop_pos) {
    if (!prefilled_) throw SplitError(ErrorKind::input, "decode_step before prefill");
    if (dead_) throw SplitError(ErrorKind::transport, "session is dead");
    if (tokens.empty()) throw SplitError(ErrorKind::input, "empty decode batch");

    const auto t0 = Clock::now();
    StepTiming timing;
    timing.batch_len = static_cast<int>(tokens.size());

    // Mirror the server's pre-forward bookkeeping on the local banks. Any
    // failure past this point leaves local and remote state out of sync, so
    // the session is unusable afterwards.
    const auto local0 = Clock::now();
    HiddenStates h;
    try {
        if (!keep.empty() || prefix_bank_.provisional() > 0) {
            prefix_bank_.resolve(keep);
            suffix_bank_.resolve(keep);
        }
        if (crop_pos) {
            prefix_bank_.crop(*crop_pos);
            suffix_bank_.crop(*crop_pos);
        }
        if (prefix_bank_.len() != suffix_bank_.len()) {
            throw SplitError(ErrorKind::internal, "local cache banks desynced");
        }
        if (mask.q_len != static_cast<int>(tokens.size()) ||
            mask.kv_len != prefix_bank_.len() + mask.q_len) {
            throw SplitError(ErrorKind::protocol, "mask shape does not match local cache state");
        }
        h = embed_at(weights_, tokens, positions);
        h = forward_layers(weights_, 0, config_.prefix_layers, h, prefix_bank_, mask);
    } catch (...) {
        dead_ = true;
        throw;
    }
    timing.local_ms += ms_since(local0);

    const bool send_keep = first_step_done_;
    const wire::FrameKind kind =
        send_keep ? wire::FrameKind::accept_and_step : wire::FrameKind::step;
    wire::Frame request =
        make_request(kind, h, &mask, keep, send_keep, crop_pos, &timing.serialization_ms);
    HiddenStates mid = exchange_hidden(request, h.seq, timing);
    mid.positions = h.positions;

    const auto local1 = Clock::now();
    const ModelConfig& cfg = weights_.config;
    HiddenStates out = forward_layers(weights_, cfg.n_layers - config_.suffix_layers, cfg.n_layers,
                                      mid, suffix_bank_, mask);
    Logits logits = finalize(weights_, out);
    timing.local_ms += ms_since(local1);

    first_step_done_ = true;
    timing.wall_ms = ms_since(t0);
    step_log_.push_back(timing);
    return logits;
}

} // namespace splitf
