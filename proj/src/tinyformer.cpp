#include "splitf/tinyformer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <random>

#include <nlohmann/json.hpp>

namespace splitf {

namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

// Bit-stable uniform in [0, 1): top 53 bits of the generator output.
double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

void fill_uniform(std::vector<float>& dst, size_t n, float amplitude, std::mt19937_64& rng) {
    dst.resize(n);
    for (size_t i = 0; i < n; ++i) {
        dst[i] = amplitude * static_cast<float>(2.0 * uniform01(rng) - 1.0);
    }
}

// y = x * rsqrt(mean(x^2) + eps) * gain
void rms_norm(const float* x, const float* gain, float eps, int dim, float* out) {
    float ss = 0.0f;
    for (int i = 0; i < dim; ++i) ss += x[i] * x[i];
    const float scale = 1.0f / std::sqrt(ss / dim + eps);
    for (int i = 0; i < dim; ++i) out[i] = x[i] * scale * gain[i];
}

// out[j] = sum_i x[i] * w[i*cols + j]
void matvec(const float* x, const float* w, int rows, int cols, float* out) {
    std::fill(out, out + cols, 0.0f);
    for (int i = 0; i < rows; ++i) {
        const float xi = x[i];
        if (xi == 0.0f) continue;
        const float* wrow = w + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) out[j] += xi * wrow[j];
    }
}

// Rotate pairs (2i, 2i+1) within one head by position-dependent angles.
void rope_rotate(float* head_vec, int head_dim, int pos, float base) {
    for (int i = 0; i < head_dim / 2; ++i) {
        const float freq = std::pow(base, -2.0f * i / head_dim);
        const float angle = static_cast<float>(pos) * freq;
        const float c = std::cos(angle);
        const float s = std::sin(angle);
        const float a = head_vec[2 * i];
        const float b = head_vec[2 * i + 1];
        head_vec[2 * i] = a * c - b * s;
        head_vec[2 * i + 1] = a * s + b * c;
    }
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

void write_u32_le(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw SplitError(ErrorKind::input, "truncated weight snapshot");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void for_each_param(Weights& w, const std::function<void(std::vector<float>&)>& fn) {
    fn(w.embedding);
    for (auto& layer : w.layers) {
        fn(layer.attn_norm);
        fn(layer.wq);
        fn(layer.wk);
        fn(layer.wv);
        fn(layer.wo);
        fn(layer.ffn_norm);
        fn(layer.w_gate);
        fn(layer.w_up);
        fn(layer.w_down);
    }
    fn(w.final_norm);
    fn(w.lm_head);
}

} // namespace

void ModelConfig::validate() const {
    if (vocab_size < 2) throw SplitError(ErrorKind::config, "vocab_size must be >= 2");
    if (n_layers < 4) throw SplitError(ErrorKind::config, "n_layers must be >= 4");
    if (hidden_dim <= 0 || n_heads <= 0 || n_kv_heads <= 0 || head_dim <= 0 || ffn_dim <= 0 ||
        max_seq_len <= 0) {
        throw SplitError(ErrorKind::config, "all dimensions must be positive");
    }
    if (n_heads * head_dim != hidden_dim) {
        throw SplitError(ErrorKind::config, "n_heads * head_dim must equal hidden_dim");
    }
    if (n_heads % n_kv_heads != 0) {
        throw SplitError(ErrorKind::config, "n_kv_heads must divide n_heads");
    }
    if (head_dim % 2 != 0) {
        throw SplitError(ErrorKind::config, "head_dim must be even for rotary pairs");
    }
    if (!(rope_base > 0.0f) || !(rms_eps > 0.0f)) {
        throw SplitError(ErrorKind::config, "rope_base and rms_eps must be positive");
    }
}

Weights init_weights(const ModelConfig& config) {
    config.validate();
    Weights w;
    w.config = config;
    w.layers.resize(config.n_layers);

    const float a = 1.0f / std::sqrt(static_cast<float>(config.hidden_dim));
    std::mt19937_64 rng(config.seed);

    const size_t hidden = config.hidden_dim;
    const size_t qd = config.q_dim();
    const size_t kvd = config.kv_dim();
    const size_t ffn = config.ffn_dim;

    fill_uniform(w.embedding, static_cast<size_t>(config.vocab_size) * hidden, a, rng);
    for (auto& layer : w.layers) {
        fill_uniform(layer.attn_norm, hidden, a, rng);
        fill_uniform(layer.wq, hidden * qd, a, rng);
        fill_uniform(layer.wk, hidden * kvd, a, rng);
        fill_uniform(layer.wv, hidden * kvd, a, rng);
        fill_uniform(layer.wo, qd * hidden, a, rng);
        fill_uniform(layer.ffn_norm, hidden, a, rng);
        fill_uniform(layer.w_gate, hidden * ffn, a, rng);
        fill_uniform(layer.w_up, hidden * ffn, a, rng);
        fill_uniform(layer.w_down, ffn * hidden, a, rng);
    }
    fill_uniform(w.final_norm, hidden, a, rng);
    fill_uniform(w.lm_head, hidden * config.vocab_size, a, rng);
    return w;
}

void save_weights(const Weights& weights, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw SplitError(ErrorKind::input, "cannot open weight file for write: " + path);

    nlohmann::json j{{"vocab_size", weights.config.vocab_size},
                     {"n_layers", weights.config.n_layers},
                     {"hidden_dim", weights.config.hidden_dim},
                     {"n_heads", weights.config.n_heads},
                     {"n_kv_heads", weights.config.n_kv_heads},
                     {"head_dim", weights.config.head_dim},
                     {"ffn_dim", weights.config.ffn_dim},
                     {"max_seq_len", weights.config.max_seq_len},
                     {"rope_base", weights.config.rope_base},
                     {"rms_eps", weights.config.rms_eps},
                     {"seed", weights.config.seed}};
    const std::string header = j.dump();
    write_u32_le(os, static_cast<uint32_t>(header.size()));
    os.write(header.data(), static_cast<std::streamsize>(header.size()));

    auto& mutable_w = const_cast<Weights&>(weights);
    for_each_param(mutable_w, [&](std::vector<float>& p) {
        static_assert(std::endian::native == std::endian::little,
                      "weight snapshot writer assumes little-endian host");
        os.write(reinterpret_cast<const char*>(p.data()),
                 static_cast<std::streamsize>(p.size() * sizeof(float)));
    });
    if (!os) throw SplitError(ErrorKind::input, "short write to weight file: " + path);
}

Weights load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw SplitError(ErrorKind::input, "cannot open weight file: " + path);

    const uint32_t hlen = read_u32_le(is);
    std::string header(hlen, '\0');
    is.read(header.data(), hlen);
    if (!is) throw SplitError(ErrorKind::input, "truncated weight snapshot header");

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw SplitError(ErrorKind::input, std::string("bad weight snapshot header: ") + e.what());
    }

    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.hidden_dim = j.at("hidden_dim").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.n_kv_heads = j.at("n_kv_heads").get<int>();
    cfg.head_dim = j.at("head_dim").get<int>();
    cfg.ffn_dim = j.at("ffn_dim").get<int>();
    cfg.max_seq_len = j.at("max_seq_len").get<int>();
    cfg.rope_base = j.at("rope_base").get<float>();
    cfg.rms_eps = j.at("rms_eps").get<float>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.validate();

    Weights w = init_weights(cfg); // allocates correct shapes
    for_each_param(w, [&](std::vector<float>& p) {
        is.read(reinterpret_cast<char*>(p.data()),
                static_cast<std::streamsize>(p.size() * sizeof(float)));
        if (!is) throw SplitError(ErrorKind::input, "truncated weight snapshot payload");
    });
    for_each_param(w, [&](std::vector<float>& p) {
        for (float v : p) {
            if (!std::isfinite(v)) {
                throw SplitError(ErrorKind::input, "non-finite parameter in weight snapshot");
            }
        }
    });
    return w;
}

AttentionMask build_attention_mask(int k, int committed_len) {
    if (k < 1) throw SplitError(ErrorKind::input, "mask batch size must be >= 1");
    if (committed_len < 0) throw SplitError(ErrorKind::input, "committed_len must be >= 0");
    AttentionMask mask;
    mask.q_len = k;
    mask.kv_len = committed_len + k;
    mask.data.assign(static_cast<size_t>(k) * mask.kv_len, kNegInf);
    for (int i = 0; i < k; ++i) {
        const int visible = committed_len + i + 1;
        for (int j = 0; j < visible; ++j) mask.at(i, j) = 0.0f;
    }
    return mask;
}

LayerKVCache::LayerKVCache(int n_kv_heads_, int head_dim_, int max_len_)
    : n_kv_heads(n_kv_heads_), head_dim(head_dim_), max_len(max_len_), len(0) {
    keys.assign(static_cast<size_t>(n_kv_heads) * max_len * head_dim, 0.0f);
    values.assign(static_cast<size_t>(n_kv_heads) * max_len * head_dim, 0.0f);
}

float* LayerKVCache::key_at(int head, int pos) {
    return keys.data() + (static_cast<size_t>(head) * max_len + pos) * head_dim;
}
const float* LayerKVCache::key_at(int head, int pos) const {
    return keys.data() + (static_cast<size_t>(head) * max_len + pos) * head_dim;
}
float* LayerKVCache::value_at(int head, int pos) {
    return values.data() + (static_cast<size_t>(head) * max_len + pos) * head_dim;
}
const float* LayerKVCache::value_at(int head, int pos) const {
    return values.data() + (static_cast<size_t>(head) * max_len + pos) * head_dim;
}

CacheBank::CacheBank(const ModelConfig& config, int layer_begin, int layer_end)
    : layer_begin_(layer_begin), layer_end_(layer_end) {
    if (layer_begin < 0 || layer_end > config.n_layers || layer_begin > layer_end) {
        throw SplitError(ErrorKind::config, "invalid layer range for cache bank");
    }
    layers_.reserve(static_cast<size_t>(layer_end - layer_begin));
    for (int i = layer_begin; i < layer_end; ++i) {
        layers_.emplace_back(config.n_kv_heads, config.head_dim, config.max_seq_len);
    }
}

int CacheBank::len() const { return layers_.empty() ? 0 : layers_.front().len; }

LayerKVCache& CacheBank::layer(int absolute_index) {
    return layers_[static_cast<size_t>(absolute_index - layer_begin_)];
}
const LayerKVCache& CacheBank::layer(int absolute_index) const {
    return layers_[static_cast<size_t>(absolute_index - layer_begin_)];
}

void CacheBank::resolve(std::span<const int> keep_indices) {
    const int tail = provisional();
    int prev = -1;
    for (int idx : keep_indices) {
        if (idx <= prev || idx >= tail) {
            throw SplitError(ErrorKind::protocol, "keep indices must be strictly increasing and within the provisional tail");
        }
        prev = idx;
    }
    for (auto& cache : layers_) {
        for (int head = 0; head < cache.n_kv_heads; ++head) {
            int out = committed_len_;
            for (int idx : keep_indices) {
                const int src = committed_len_ + idx;
                if (src != out) {
                    std::memcpy(cache.key_at(head, out), cache.key_at(head, src),
                                sizeof(float) * cache.head_dim);
                    std::memcpy(cache.value_at(head, out), cache.value_at(head, src),
                                sizeof(float) * cache.head_dim);
                }
                ++out;
            }
        }
        cache.len = committed_len_ + static_cast<int>(keep_indices.size());
    }
    committed_len_ += static_cast<int>(keep_indices.size());
}

void CacheBank::crop(int pos) {
    if (pos < 0 || pos > len()) {
        throw SplitError(ErrorKind::protocol, "crop position exceeds cache length");
    }
    for (auto& cache : layers_) cache.len = pos;
    committed_len_ = std::min(committed_len_, pos);
}

void CacheBank::note_appended(int batch) {
    // committed_len is unchanged: the appended batch is provisional until the
    // next resolve() call.
    (void)batch;
}

void CacheBank::reset() {
    for (auto& cache : layers_) cache.len = 0;
    committed_len_ = 0;
}

int argmax_row(const Logits& logits, int row) {
    const float* r = logits.row(row);
    int best = 0;
    float best_val = r[0];
    for (int i = 1; i < logits.vocab; ++i) {
        if (r[i] > best_val) {
            best_val = r[i];
            best = i;
        }
    }
    return best;
}

HiddenStates embed(const Weights& weights, std::span<const int> token_ids, int start_pos) {
    std::vector<int> positions(token_ids.size());
    for (size_t i = 0; i < token_ids.size(); ++i) positions[i] = start_pos + static_cast<int>(i);
    return embed_at(weights, token_ids, positions);
}

HiddenStates embed_at(const Weights& weights, std::span<const int> token_ids,
                      std::span<const int> positions) {
    const ModelConfig& cfg = weights.config;
    if (token_ids.size() != positions.size()) {
        throw SplitError(ErrorKind::input, "token/position count mismatch");
    }
    for (int pos : positions) {
        if (pos < 0 || pos >= cfg.max_seq_len) {
            throw SplitError(ErrorKind::capacity, "position exceeds max_seq_len");
        }
    }
    HiddenStates h;
    h.seq = static_cast<int>(token_ids.size());
    h.dim = cfg.hidden_dim;
    h.data.resize(static_cast<size_t>(h.seq) * h.dim);
    h.positions.assign(positions.begin(), positions.end());
    for (int i = 0; i < h.seq; ++i) {
        const int id = token_ids[i];
        if (id < 0 || id >= cfg.vocab_size) {
            throw SplitError(ErrorKind::input, "token id out of range");
        }
        std::memcpy(h.row(i), weights.embedding.data() + static_cast<size_t>(id) * cfg.hidden_dim,
                    sizeof(float) * cfg.hidden_dim);
    }
    return h;
}

HiddenStates forward_layers(const Weights& weights, int layer_begin, int layer_end,
                            const HiddenStates& h, CacheBank& bank, const AttentionMask& mask) {
    const ModelConfig& cfg = weights.config;
    if (layer_begin == layer_end) return h;
    if (layer_begin < bank.layer_begin() || layer_end > bank.layer_end()) {
        throw SplitError(ErrorKind::internal, "layer range outside cache bank");
    }
    if (h.seq == 0) return h;
    if (h.dim != cfg.hidden_dim) {
        throw SplitError(ErrorKind::input, "hidden dim mismatch");
    }
    const int prior_len = bank.len();
    if (mask.q_len != h.seq || mask.kv_len != prior_len + h.seq) {
        throw SplitError(ErrorKind::protocol, "mask shape does not match cache length plus batch");
    }
    if (prior_len + h.seq > cfg.max_seq_len) {
        throw SplitError(ErrorKind::capacity, "sequence exceeds max_seq_len");
    }
    for (float v : h.data) {
        if (!std::isfinite(v)) throw SplitError(ErrorKind::numeric, "non-finite hidden state");
    }

    const int seq = h.seq;
    const int hidden = cfg.hidden_dim;
    const int hd = cfg.head_dim;
    const int group = cfg.n_heads / cfg.n_kv_heads;
    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));

    HiddenStates cur = h;
    std::vector<float> normed(hidden);
    std::vector<float> q(static_cast<size_t>(cfg.q_dim()));
    std::vector<float> attn_out(static_cast<size_t>(cfg.q_dim()));
    std::vector<float> proj(hidden);
    std::vector<float> gate(static_cast<size_t>(cfg.ffn_dim));
    std::vector<float> up(static_cast<size_t>(cfg.ffn_dim));
    std::vector<float> scores;

    for (int layer = layer_begin; layer < layer_end; ++layer) {
        const LayerWeights& lw = weights.layers[static_cast<size_t>(layer)];
        LayerKVCache& cache = bank.layer(layer);

        // Project and append this batch's keys/values first; the mask decides
        // what each query row may see.
        for (int i = 0; i < seq; ++i) {
            rms_norm(cur.row(i), lw.attn_norm.data(), cfg.rms_eps, hidden, normed.data());
            const int pos = cur.positions[static_cast<size_t>(i)];
            for (int kvh = 0; kvh < cfg.n_kv_heads; ++kvh) {
                float* kdst = cache.key_at(kvh, prior_len + i);
                float* vdst = cache.value_at(kvh, prior_len + i);
                for (int d = 0; d < hd; ++d) {
                    float acc_k = 0.0f, acc_v = 0.0f;
                    const int col = kvh * hd + d;
                    for (int r = 0; r < hidden; ++r) {
                        const float x = normed[static_cast<size_t>(r)];
                        acc_k += x * lw.wk[static_cast<size_t>(r) * cfg.kv_dim() + col];
                        acc_v += x * lw.wv[static_cast<size_t>(r) * cfg.kv_dim() + col];
                    }
                    kdst[d] = acc_k;
                    vdst[d] = acc_v;
                }
                rope_rotate(kdst, hd, pos, cfg.rope_base);
            }
        }

        const int kv_len = prior_len + seq;
        scores.resize(static_cast<size_t>(kv_len));

        for (int i = 0; i < seq; ++i) {
            rms_norm(cur.row(i), lw.attn_norm.data(), cfg.rms_eps, hidden, normed.data());
            matvec(normed.data(), lw.wq.data(), hidden, cfg.q_dim(), q.data());
            const int pos = cur.positions[static_cast<size_t>(i)];
            for (int head = 0; head < cfg.n_heads; ++head) {
                rope_rotate(q.data() + static_cast<size_t>(head) * hd, hd, pos, cfg.rope_base);
            }

            for (int head = 0; head < cfg.n_heads; ++head) {
                const int kvh = head / group;
                const float* qh = q.data() + static_cast<size_t>(head) * hd;
                float max_score = kNegInf;
                for (int j = 0; j < kv_len; ++j) {
                    const float m = mask.at(i, j);
                    if (m == kNegInf) {
                        scores[static_cast<size_t>(j)] = kNegInf;
                        continue;
                    }
                    const float* kj = cache.key_at(kvh, j);
                    float dot = 0.0f;
                    for (int d = 0; d < hd; ++d) dot += qh[d] * kj[d];
                    const float s = dot * inv_sqrt_hd + m;
                    scores[static_cast<size_t>(j)] = s;
                    max_score = std::max(max_score, s);
                }
                if (max_score == kNegInf) {
                    throw SplitError(ErrorKind::protocol, "mask row admits no attendable position");
                }
                float denom = 0.0f;
                for (int j = 0; j < kv_len; ++j) {
                    float& s = scores[static_cast<size_t>(j)];
                    if (s == kNegInf) {
                        s = 0.0f;
                    } else {
                        s = std::exp(s - max_score);
                        denom += s;
                    }
                }
                float* oh = attn_out.data() + static_cast<size_t>(head) * hd;
                std::fill(oh, oh + hd, 0.0f);
                const float inv_denom = 1.0f / denom;
                for (int j = 0; j < kv_len; ++j) {
                    const float wgt = scores[static_cast<size_t>(j)] * inv_denom;
                    if (wgt == 0.0f) continue;
                    const float* vj = cache.value_at(kvh, j);
                    for (int d = 0; d < hd; ++d) oh[d] += wgt * vj[d];
                }
            }

            matvec(attn_out.data(), lw.wo.data(), cfg.q_dim(), hidden, proj.data());
            float* hr = cur.row(i);
            for (int d = 0; d < hidden; ++d) hr[d] += proj[d];

            rms_norm(hr, lw.ffn_norm.data(), cfg.rms_eps, hidden, normed.data());
            matvec(normed.data(), lw.w_gate.data(), hidden, cfg.ffn_dim, gate.data());
            matvec(normed.data(), lw.w_up.data(), hidden, cfg.ffn_dim, up.data());
            for (int d = 0; d < cfg.ffn_dim; ++d) gate[static_cast<size_t>(d)] = silu(gate[static_cast<size_t>(d)]) * up[static_cast<size_t>(d)];
            matvec(gate.data(), lw.w_down.data(), cfg.ffn_dim, hidden, proj.data());
            for (int d = 0; d < hidden; ++d) hr[d] += proj[d];
        }

        cache.len = kv_len;
    }

    bank.note_appended(seq);
    return cur;
}

Logits finalize(const Weights& weights, const HiddenStates& h) {
    const ModelConfig& cfg = weights.config;
    for (float v : h.data) {
        if (!std::isfinite(v)) throw SplitError(ErrorKind::numeric, "non-finite hidden state");
    }
    Logits logits;
    logits.seq = h.seq;
    logits.vocab = cfg.vocab_size;
    logits.data.resize(static_cast<size_t>(h.seq) * cfg.vocab_size);
    std::vector<float> normed(static_cast<size_t>(cfg.hidden_dim));
    for (int i = 0; i < h.seq; ++i) {
        rms_norm(h.row(i), weights.final_norm.data(), cfg.rms_eps, cfg.hidden_dim, normed.data());
        matvec(normed.data(), weights.lm_head.data(), cfg.hidden_dim, cfg.vocab_size,
               logits.data.data() + static_cast<size_t>(i) * cfg.vocab_size);
    }
    return logits;
}

std::vector<int> greedy_tokens(const Logits& logits) {
    std::vector<int> out(static_cast<size_t>(logits.seq));
    for (int i = 0; i < logits.seq; ++i) out[static_cast<size_t>(i)] = argmax_row(logits, i);
    return out;
}

MonolithicTrace generate_monolithic_traced(const Weights& weights, std::span<const int> prompt,
                                           int max_new) {
    const ModelConfig& cfg = weights.config;
    if (prompt.empty()) throw SplitError(ErrorKind::input, "prompt must be non-empty");
    if (static_cast<int>(prompt.size()) + max_new > cfg.max_seq_len) {
        throw SplitError(ErrorKind::capacity, "prompt + max_new exceeds max_seq_len");
    }

    MonolithicTrace trace;
    trace.step_logits.vocab = cfg.vocab_size;
    if (max_new == 0) return trace;

    CacheBank bank(cfg, 0, cfg.n_layers);
    HiddenStates h = embed(weights, prompt, 0);
    AttentionMask mask = build_attention_mask(h.seq, 0);
    h = forward_layers(weights, 0, cfg.n_layers, h, bank, mask);
    bank.mark_committed(bank.len());

    Logits logits = finalize(weights, h);
    const float* last = logits.row(logits.seq - 1);
    trace.step_logits.data.insert(trace.step_logits.data.end(), last, last + cfg.vocab_size);
    trace.step_logits.seq = 1;
    int token = argmax_row(logits, logits.seq - 1);
    trace.tokens.push_back(token);

    while (static_cast<int>(trace.tokens.size()) < max_new) {
        const int pos = static_cast<int>(prompt.size()) + static_cast<int>(trace.tokens.size()) - 1;
        HiddenStates step = embed(weights, std::span<const int>(&token, 1), pos);
        AttentionMask step_mask = build_attention_mask(1, bank.len());
        step = forward_layers(weights, 0, cfg.n_layers, step, bank, step_mask);
        bank.mark_committed(bank.len());
        Logits step_logits = finalize(weights, step);
        token = argmax_row(step_logits, 0);
        trace.step_logits.data.insert(trace.step_logits.data.end(), step_logits.data.begin(),
                                      step_logits.data.end());
        trace.step_logits.seq += 1;
        trace.tokens.push_back(token);
    }
    return trace;
}

std::vector<int> generate_monolithic(const Weights& weights, std::span<const int> prompt,
                                     int max_new) {
    return generate_monolithic_traced(weights, prompt, max_new).tokens;
}

} // namespace splitf
