#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "splitf/tinyformer.hpp"
#include "splitf/transport.hpp"
#include "splitf/wire.hpp"

namespace splitf {

struct SplitConfig {
    int prefix_layers = 2; // local layers before the wire
    int suffix_layers = 2; // local layers after the wire
    wire::WireDtype dtype = wire::WireDtype::f16;

    void validate(const ModelConfig& model) const;
};

// Per-exchange timing and size record. rtt_ms is stamped by the harness from
// an independent measure_rtt run; everything else is measured in-line.
struct StepTiming {
    double wall_ms = 0.0;
    double rtt_ms = 0.0;
    double local_ms = 0.0;
    double remote_reported_ms = 0.0;
    double serialization_ms = 0.0;
    size_t payload_bytes_up = 0;
    size_t payload_bytes_down = 0;
    int batch_len = 0;
    int accepted = 0;   // filled by the decode strategy
    bool pool_hit = false;
};

// The trusted-side runtime: embedding, prefix and suffix layer segments with
// their own caches, final norm + LM head, and the per-step exchange. Token
// ids and logits exist only on this side; the channel carries hidden states,
// masks, positions, and protocol metadata.
class SplitClient {
public:
    SplitClient(const Weights& weights, SplitConfig config, Channel& channel,
                std::string session_id = {});

    // Embeds the prompt, runs the prefix segment, makes exactly one round
    // trip, populates local caches for every prompt position, and returns the
    // first greedy token.
    int prefill(std::span<const int> prompt);

    // One decode exchange: resolves the previous provisional batch on both
    // sides (empty keep with an outstanding tail = reject all), optionally
    // crops, then forwards the batch through prefix -> wire -> suffix and
    // returns logits for every batch row. The batch itself becomes the new
    // provisional tail everywhere.
    Logits decode_step(std::span<const int> tokens, std::span<const int> positions,
                       const AttentionMask& mask, std::span<const int> keep,
                       std::optional<int> crop_pos = std::nullopt);

    bool prefilled() const { return prefilled_; }
    bool dead() const { return dead_; }
    int prompt_len() const { return prompt_len_; }

    // Resolved context length (committed cache entries); equal across the
    // prefix bank, the suffix bank, and the server at every step boundary.
    int committed_len() const { return prefix_bank_.committed_len(); }

    const std::string& session_id() const { return session_id_; }
    const std::vector<StepTiming>& step_log() const { return step_log_; }
    std::vector<StepTiming>& step_log() { return step_log_; }
    double prefill_ms() const { return prefill_ms_; }

    // Logits row that selected the first token (single-row Logits).
    const Logits& prefill_logits() const { return prefill_logits_; }
    const wire::CodecStats& codec_stats() const { return codec_stats_; }
    const ModelConfig& model_config() const { return weights_.config; }
    const SplitConfig& split_config() const { return config_; }

private:
    wire::Frame make_request(wire::FrameKind kind, const HiddenStates& h,
                             const AttentionMask* mask, std::span<const int> keep, bool send_keep,
                             std::optional<int> crop_pos, double* serialization_ms);
    HiddenStates exchange_hidden(const wire::Frame& request, int expect_seq, StepTiming& timing);

    const Weights& weights_;
    SplitConfig config_;
    Channel& channel_;
    std::string session_id_;

    CacheBank prefix_bank_;
    CacheBank suffix_bank_;
    bool prefilled_ = false;
    bool dead_ = false;
    int prompt_len_ = 0;
    bool first_step_done_ = false;
    double prefill_ms_ = 0.0;
    Logits prefill_logits_;
    std::vector<StepTiming> step_log_;
    wire::CodecStats codec_stats_;
};

} // namespace splitf
