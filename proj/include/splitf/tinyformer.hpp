#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "splitf/error.hpp"

namespace splitf {

// Architecture hyperparameters of the desk-scale decoder-only transformer.
// Weights are derived entirely from (config, seed), so two processes given
// the same config reconstruct bitwise-identical parameters.
struct ModelConfig {
    int vocab_size = 256;
    int n_layers = 8;
    int hidden_dim = 64;
    int n_heads = 4;
    int n_kv_heads = 2;
    int head_dim = 16;
    int ffn_dim = 256;
    int max_seq_len = 256;
    float rope_base = 10000.0f;
    float rms_eps = 1e-5f;
    uint64_t seed = 1234;

    int q_dim() const { return n_heads * head_dim; }
    int kv_dim() const { return n_kv_heads * head_dim; }

    // Throws ErrorKind::config on dimension or divisibility violations.
    void validate() const;
};

struct LayerWeights {
    std::vector<float> attn_norm; // [hidden]
    std::vector<float> wq;        // [hidden x q_dim]
    std::vector<float> wk;        // [hidden x kv_dim]
    std::vector<float> wv;        // [hidden x kv_dim]
    std::vector<float> wo;        // [q_dim x hidden]
    std::vector<float> ffn_norm;  // [hidden]
    std::vector<float> w_gate;    // [hidden x ffn]
    std::vector<float> w_up;      // [hidden x ffn]
    std::vector<float> w_down;    // [ffn x hidden]
};

struct Weights {
    ModelConfig config;
    std::vector<float> embedding;  // [vocab x hidden]
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm; // [hidden]
    std::vector<float> lm_head;    // [hidden x vocab]
};

// Deterministic init: every parameter ~ U[-a, a] with a = 1/sqrt(hidden_dim),
// drawn from a single std::mt19937_64 stream seeded with config.seed, in
// declaration order (embedding, per-layer attn_norm..w_down, final_norm,
// lm_head). Uniform floats come from (rng() >> 11) * 2^-53 so the mapping is
// bit-stable across platforms.
Weights init_weights(const ModelConfig& config);

// Snapshot format: [u32 LE json length][ModelConfig JSON][all parameters in
// declaration order, 32-bit LE floats].
void save_weights(const Weights& weights, const std::string& path);
Weights load_weights(const std::string& path);

// A batch of hidden rows, one absolute position per row. Positions drive the
// rotary embedding and travel in the frame header across the wire.
struct HiddenStates {
    int seq = 0;
    int dim = 0;
    std::vector<float> data;    // [seq x dim]
    std::vector<int> positions; // length seq

    float* row(int i) { return data.data() + static_cast<size_t>(i) * dim; }
    const float* row(int i) const { return data.data() + static_cast<size_t>(i) * dim; }
};

// Dense additive attention mask, entries in {0, -inf}. Column j < kv_len
// addresses cache entry j; batch rows occupy the trailing q_len columns in
// append order.
struct AttentionMask {
    int q_len = 0;
    int kv_len = 0;
    std::vector<float> data; // [q_len x kv_len]

    float at(int q, int k) const { return data[static_cast<size_t>(q) * kv_len + k]; }
    float& at(int q, int k) { return data[static_cast<size_t>(q) * kv_len + k]; }
};

// Prefix-law mask for a k-row batch appended after committed_len cache
// entries: row i is zero on the first committed_len + i + 1 columns.
AttentionMask build_attention_mask(int k, int committed_len);

// Per-layer key/value store, preallocated to max_seq_len.
struct LayerKVCache {
    int n_kv_heads = 0;
    int head_dim = 0;
    int max_len = 0;
    int len = 0;
    std::vector<float> keys;   // [n_kv_heads x max_len x head_dim]
    std::vector<float> values;

    LayerKVCache() = default;
    LayerKVCache(int n_kv_heads, int head_dim, int max_len);

    float* key_at(int head, int pos);
    const float* key_at(int head, int pos) const;
    float* value_at(int head, int pos);
    const float* value_at(int head, int pos) const;
};

// KV caches for a half-open layer range plus the commit bookkeeping of the
// provisional-tail protocol. The server holds one bank for its hosted middle
// range; the client holds one for its prefix segment and one for its suffix
// segment, all three advancing in lockstep.
class CacheBank {
public:
    CacheBank() = default;
    CacheBank(const ModelConfig& config, int layer_begin, int layer_end);

    int layer_begin() const { return layer_begin_; }
    int layer_end() const { return layer_end_; }
    int size() const { return static_cast<int>(layers_.size()); }

    // Current cache length; identical across all layers in the range.
    int len() const;
    int committed_len() const { return committed_len_; }
    int provisional() const { return len() - committed_len_; }

    LayerKVCache& layer(int absolute_index);
    const LayerKVCache& layer(int absolute_index) const;

    // Compact the provisional tail: keep the listed batch-local entries (in
    // order) directly after the committed prefix, drop the rest, and commit
    // them. Indices must be strictly increasing and < provisional().
    void resolve(std::span<const int> keep_indices);

    // Truncate every layer to pos entries.
    void crop(int pos);

    // Called by forward_layers after appending a batch of the given size.
    void note_appended(int batch);

    void mark_committed(int committed) { committed_len_ = committed; }
    void reset();

private:
    int layer_begin_ = 0;
    int layer_end_ = 0;
    int committed_len_ = 0;
    std::vector<LayerKVCache> layers_;
};

// Logits for a batch, one row per input row.
struct Logits {
    int seq = 0;
    int vocab = 0;
    std::vector<float> data; // [seq x vocab]

    const float* row(int i) const { return data.data() + static_cast<size_t>(i) * vocab; }
};

// Argmax with lowest-index tie-break.
int argmax_row(const Logits& logits, int row);

HiddenStates embed(const Weights& weights, std::span<const int> token_ids, int start_pos);
HiddenStates embed_at(const Weights& weights, std::span<const int> token_ids,
                      std::span<const int> positions);

// Runs layers [layer_begin, layer_end) over the batch, extending the bank's
// caches by h.seq entries per layer. mask.kv_len must equal bank.len() + h.seq
// and mask.q_len must equal h.seq. An empty range is the identity.
HiddenStates forward_layers(const Weights& weights, int layer_begin, int layer_end,
                            const HiddenStates& h, CacheBank& bank,
                            const AttentionMask& mask);

// Final RMS norm + LM head.
Logits finalize(const Weights& weights, const HiddenStates& h);

std::vector<int> greedy_tokens(const Logits& logits);

// Greedy autoregressive generation through all layers with one cache; the
// reference path every split mode is checked against.
std::vector<int> generate_monolithic(const Weights& weights, std::span<const int> prompt,
                                     int max_new);

// Same loop, also returning the logits row used to pick each token (quality
// verification needs them).
struct MonolithicTrace {
    std::vector<int> tokens;
    Logits step_logits; // row i selected tokens[i]
};
MonolithicTrace generate_monolithic_traced(const Weights& weights, std::span<const int> prompt,
                                           int max_new);

} // namespace splitf
