#pragma once

#include <iosfwd>
#include <list>
#include <span>
#include <string>
#include <vector>

#include "splitf/client.hpp"
#include "splitf/tinyformer.hpp"

namespace splitf {

enum class DecodeMode { sequential, jacobi, lookahead };
const char* to_string(DecodeMode mode);
DecodeMode decode_mode_from_string(const std::string& s);

struct JacobiConfig {
    int block_k = 4;
    int max_iters_per_block = 0; // 0 = unbounded; progress guarantees termination
    enum class InitPolicy { repeat_last, pool_sample };
    InitPolicy init_policy = InitPolicy::repeat_last;
};

struct LookaheadConfig {
    int ngram_n = 3;
    int window_w = 8;
    int max_candidates_g = 2;
    size_t pool_capacity = 4096;
};

// Cache of observed continuations keyed by a single token: key + (ngram_n - 1)
// continuation tokens form one n-gram. Capacity-bounded, recency-ordered,
// deduplicated per (key, continuation).
class NGramPool {
public:
    NGramPool(int ngram_n, size_t capacity);

    // Harvests n-grams from two consecutive window trajectories of equal
    // length: key = previous[i], continuation = current[i+1 .. i+n-1] when the
    // continuation fits inside the window.
    void update(std::span<const int> previous, std::span<const int> current);

    // Most-recently-inserted continuations for the key, up to max_candidates.
    std::vector<std::vector<int>> lookup(int key, int max_candidates) const;

    size_t size() const { return entries_.size(); }
    int ngram_n() const { return ngram_n_; }

private:
    struct Entry {
        int key;
        std::vector<int> continuation;
    };
    void insert(int key, std::vector<int> continuation);

    int ngram_n_;
    size_t capacity_;
    std::list<Entry> entries_; // front = most recent
};

// Greedy verification: committed[0] is the anchor (the argmax right after the
// committed prefix); guess j survives only when it equals the previous
// committed token, in which case its logits row contributes the next one.
// At least one token is always committed.
struct VerifyResult {
    int accepted = 0;          // number of matching guesses
    std::vector<int> committed; // anchor plus one token per accepted guess
};
VerifyResult verify_greedy(const Logits& logits, int guess_row_begin, std::span<const int> guesses,
                           int anchor);

struct DecodeStats {
    int tokens_committed = 0; // by decode steps (prefill's first token excluded)
    int steps = 0;
    double acceptance_rate = 1.0; // tokens_committed / steps
    double match_rate = 0.0;      // steps with a non-empty pool lookup / steps
    double wall_seconds = 0.0;    // decode-step wall time only
    double prefill_ms = 0.0;
    std::vector<StepTiming> step_timings;
};

struct DecodeResult {
    std::vector<int> tokens; // all generated tokens, prefill's first included
    DecodeStats stats;
    Logits committed_logits; // row i selected tokens[i]
};

// Stats JSONL (one object per decode step) is written to *step_jsonl when
// non-null: {step, batch_len, accepted, pool_hit, wall_ms, payload_bytes_up,
// payload_bytes_down}.
DecodeResult decode_sequential(SplitClient& client, std::span<const int> prompt, int max_new,
                               std::ostream* step_jsonl = nullptr);
DecodeResult decode_jacobi(SplitClient& client, std::span<const int> prompt, int max_new,
                           const JacobiConfig& cfg, std::ostream* step_jsonl = nullptr);
DecodeResult decode_lookahead(SplitClient& client, std::span<const int> prompt, int max_new,
                              const LookaheadConfig& cfg, std::ostream* step_jsonl = nullptr);

// Same loop with a caller-owned pool, so harvested n-grams persist across
// prompts (and so tests can hand in an adversarial pool: speculation must
// never change the committed stream).
DecodeResult decode_lookahead_with_pool(SplitClient& client, std::span<const int> prompt,
                                        int max_new, const LookaheadConfig& cfg, NGramPool& pool,
                                        std::ostream* step_jsonl = nullptr);

DecodeResult run_decode(DecodeMode mode, SplitClient& client, std::span<const int> prompt,
                        int max_new, const JacobiConfig& jacobi, const LookaheadConfig& lookahead,
                        std::ostream* step_jsonl = nullptr);

} // namespace splitf
