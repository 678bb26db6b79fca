#include "splitf/decoding.hpp"

#include <algorithm>
#include <limits>
#include <ostream>

#include <nlohmann/json.hpp>

namespace splitf {

namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

void append_row(Logits& dst, const Logits& src, int row) {
    dst.vocab = src.vocab;
    dst.data.insert(dst.data.end(), src.row(row), src.row(row) + src.vocab);
    dst.seq += 1;
}

void log_step(std::ostream* jsonl, int step, const StepTiming& t) {
    if (!jsonl) return;
    nlohmann::json j{{"step", step},
                     {"batch_len", t.batch_len},
                     {"accepted", t.accepted},
                     {"pool_hit", t.pool_hit},
                     {"wall_ms", t.wall_ms},
                     {"payload_bytes_up", t.payload_bytes_up},
                     {"payload_bytes_down", t.payload_bytes_down}};
    (*jsonl) << j.dump() << '\n';
}

void finish_stats(DecodeStats& stats, SplitClient& client) {
    stats.prefill_ms = client.prefill_ms();
    stats.step_timings = client.step_log();
    stats.steps = static_cast<int>(stats.step_timings.size());
    stats.wall_seconds = 0.0;
    for (const auto& t : stats.step_timings) stats.wall_seconds += t.wall_ms / 1000.0;
    stats.acceptance_rate =
        stats.steps > 0 ? static_cast<double>(stats.tokens_committed) / stats.steps : 1.0;
}

} // namespace

const char* to_string(DecodeMode mode) {
    switch (mode) {
        case DecodeMode::sequential: return "sequential";
        case DecodeMode::jacobi: return "jacobi";
        case DecodeMode::lookahead: return "lookahead";
    }
    return "unknown";
}

DecodeMode decode_mode_from_string(const std::string& s) {
    if (s == "sequential") return DecodeMode::sequential;
    if (s == "jacobi") return DecodeMode::jacobi;
    if (s == "lookahead") return DecodeMode::lookahead;
    throw SplitError(ErrorKind::input, "unknown decode mode: " + s);
}

NGramPool::NGramPool(int ngram_n, size_t capacity) : ngram_n_(ngram_n), capacity_(capacity) {
    if (ngram_n < 2) throw SplitError(ErrorKind::config, "ngram_n must be >= 2");
    if (capacity < 1) throw SplitError(ErrorKind::config, "pool capacity must be >= 1");
}

void NGramPool::insert(int key, std::vector<int> continuation) {
    for (auto it = entries_.begin(); it != entries_.end(); ++it) {
        if (it->key == key && it->continuation == continuation) {
            entries_.splice(entries_.begin(), entries_, it); // refresh recency
            return;
        }
    }
    entries_.push_front(Entry{key, std::move(continuation)});
    if (entries_.size() > capacity_) entries_.pop_back();
}

void NGramPool::update(std::span<const int> previous, std::span<const int> current) {
    if (previous.size() != current.size()) {
        throw SplitError(ErrorKind::input, "window trajectories must have equal length");
    }
    const int w = static_cast<int>(previous.size());
    for (int i = 0; i < w; ++i) {
        if (i + ngram_n_ - 1 > w - 1) break; // continuation would run off the window
        std::vector<int> cont(current.begin() + i + 1, current.begin() + i + ngram_n_);
        insert(previous[static_cast<size_t>(i)], std::move(cont));
    }
}

std::vector<std::vector<int>> NGramPool::lookup(int key, int max_candidates) const {
    std::vector<std::vector<int>> out;
    for (const auto& e : entries_) {
        if (e.key != key) continue;
        out.push_back(e.continuation);
        if (static_cast<int>(out.size()) >= max_candidates) break;
    }
    return out;
}

VerifyResult verify_greedy(const Logits& logits, int guess_row_begin, std::span<const int> guesses,
                           int anchor) {
    VerifyResult vr;
    vr.committed.push_back(anchor);
    for (size_t j = 0; j < guesses.size(); ++j) {
        if (guesses[j] != vr.committed.back()) break;
        vr.accepted += 1;
        vr.committed.push_back(argmax_row(logits, guess_row_begin + static_cast<int>(j)));
    }
    return vr;
}

DecodeResult decode_sequential(SplitClient& client, std::span<const int> prompt, int max_new,
                               std::ostream* step_jsonl) {
    DecodeResult res;
    if (max_new == 0) return res;
    res.tokens.push_back(client.prefill(prompt));
    append_row(res.committed_logits, client.prefill_logits(), 0);

    int total = static_cast<int>(prompt.size()) + 1; // committed incl. prompt
    std::vector<int> keep;
    while (static_cast<int>(res.tokens.size()) < max_new) {
        const int ctx = total - 1;
        const int tok = res.tokens.back();
        const int pos = ctx;
        AttentionMask mask = build_attention_mask(1, ctx);
        Logits logits = client.decode_step(std::span<const int>(&tok, 1),
                                           std::span<const int>(&pos, 1), mask, keep);
        const int next = argmax_row(logits, 0);
        res.tokens.push_back(next);
        append_row(res.committed_logits, logits, 0);
        total += 1;
        keep = {0};
        client.step_log().back().accepted = 1;
        res.stats.tokens_committed += 1;
        log_step(step_jsonl, static_cast<int>(client.step_log().size()) - 1,
                 client.step_log().back());
    }
    finish_stats(res.stats, client);
    return res;
}

DecodeResult decode_jacobi(SplitClient& client, std::span<const int> prompt, int max_new,
                           const JacobiConfig& cfg, std::ostream* step_jsonl) {
    if (cfg.block_k < 1) throw SplitError(ErrorKind::config, "block_k must be >= 1");
    DecodeResult res;
    if (max_new == 0) return res;
    res.tokens.push_back(client.prefill(prompt));
    append_row(res.committed_logits, client.prefill_logits(), 0);

    const int max_seq = client.model_config().max_seq_len;
    int total = static_cast<int>(prompt.size()) + 1;
    // Block = anchor row + (k-1) guesses; init_policy pool_sample degrades to
    // repeat_last here (no pool exists in plain Jacobi).
    std::vector<int> guesses(static_cast<size_t>(cfg.block_k - 1), res.tokens.back());
    std::vector<int> keep;

    // Every iteration commits at least the anchor token, so the loop runs at
    // most max_new times regardless of max_iters_per_block.
    while (static_cast<int>(res.tokens.size()) < max_new) {
        const int ctx = total - 1;
        const int k = std::min(cfg.block_k, max_seq - ctx); // shrink at the context limit
        if (k < 1) throw SplitError(ErrorKind::capacity, "context reached max_seq_len");
        std::vector<int> batch;
        batch.reserve(static_cast<size_t>(k));
        batch.push_back(res.tokens.back());
        batch.insert(batch.end(), guesses.begin(), guesses.begin() + (k - 1));
        std::vector<int> positions(static_cast<size_t>(k));
        for (int i = 0; i < k; ++i) positions[static_cast<size_t>(i)] = ctx + i;
        AttentionMask mask = build_attention_mask(k, ctx);

        Logits logits = client.decode_step(batch, positions, mask, keep);
        std::vector<int> trajectory(static_cast<size_t>(k));
        for (int i = 0; i < k; ++i) trajectory[static_cast<size_t>(i)] = argmax_row(logits, i);

        std::span<const int> active_guesses(guesses.data(), static_cast<size_t>(k - 1));
        VerifyResult vr = verify_greedy(logits, 1, active_guesses, trajectory[0]);
        const int room = max_new - static_cast<int>(res.tokens.size());
        const int commit_n = std::min<int>(static_cast<int>(vr.committed.size()), room);
        for (int i = 0; i < commit_n; ++i) {
            res.tokens.push_back(vr.committed[static_cast<size_t>(i)]);
            append_row(res.committed_logits, logits, i); // row i selected committed[i]
        }
        total += commit_n;
        res.stats.tokens_committed += commit_n;

        keep.assign(static_cast<size_t>(vr.accepted) + 1, 0);
        for (int i = 0; i <= vr.accepted; ++i) keep[static_cast<size_t>(i)] = i;

        // Jacobi refresh: shift this iteration's argmax trajectory past the
        // committed run, repeating the tail prediction.
        const int advanced = static_cast<int>(vr.committed.size());
        for (int j = 0; j < cfg.block_k - 1; ++j) {
            guesses[static_cast<size_t>(j)] = trajectory[static_cast<size_t>(
                std::min(advanced + j, k - 1))];
        }
        client.step_log().back().accepted = commit_n;
        log_step(step_jsonl, static_cast<int>(client.step_log().size()) - 1,
                 client.step_log().back());
    }
    finish_stats(res.stats, client);
    return res;
}

DecodeResult decode_lookahead(SplitClient& client, std::span<const int> prompt, int max_new,
                              const LookaheadConfig& cfg, std::ostream* step_jsonl) {
    NGramPool pool(cfg.ngram_n, cfg.pool_capacity);
    return decode_lookahead_with_pool(client, prompt, max_new, cfg, pool, step_jsonl);
}

DecodeResult decode_lookahead_with_pool(SplitClient& client, std::span<const int> prompt,
                                        int max_new, const LookaheadConfig& cfg, NGramPool& pool,
                                        std::ostream* step_jsonl) {
    if (cfg.ngram_n < 2) throw SplitError(ErrorKind::config, "ngram_n must be >= 2");
    if (cfg.window_w < cfg.ngram_n) {
        throw SplitError(ErrorKind::config, "window_w must be >= ngram_n");
    }
    if (cfg.max_candidates_g < 0) {
        throw SplitError(ErrorKind::config, "max_candidates_g must be >= 0");
    }
    if (pool.ngram_n() != cfg.ngram_n) {
        throw SplitError(ErrorKind::config, "pool n-gram size does not match the config");
    }

    DecodeResult res;
    if (max_new == 0) return res;
    res.tokens.push_back(client.prefill(prompt));
    append_row(res.committed_logits, client.prefill_logits(), 0);

    const int w = cfg.window_w;
    const int max_seq = client.model_config().max_seq_len;
    int total = static_cast<int>(prompt.size()) + 1;
    std::vector<int> window(static_cast<size_t>(w), res.tokens.back());
    std::vector<int> keep;
    int pool_hits = 0;

    while (static_cast<int>(res.tokens.size()) < max_new) {
        const int ctx = total - 1;
        auto candidates = pool.lookup(res.tokens.back(), cfg.max_candidates_g);
        // Trim speculation near the context limit: candidates first, then the
        // window, keeping at least the anchor row.
        int active_w = w;
        auto batch_size = [&] {
            size_t b = 1 + static_cast<size_t>(active_w);
            for (const auto& c : candidates) b += c.size();
            return static_cast<int>(b);
        };
        while (!candidates.empty() && ctx + batch_size() > max_seq) candidates.pop_back();
        while (active_w > 1 && ctx + batch_size() > max_seq) --active_w;
        const bool hit = !candidates.empty();
        pool_hits += hit ? 1 : 0;

        const int B = batch_size();
        std::vector<int> batch;
        std::vector<int> positions;
        batch.reserve(static_cast<size_t>(B));
        positions.reserve(static_cast<size_t>(B));
        batch.push_back(res.tokens.back());
        positions.push_back(ctx);
        for (int i = 0; i < active_w; ++i) {
            batch.push_back(window[static_cast<size_t>(i)]);
            positions.push_back(total + i);
        }
        std::vector<int> cand_row_begin(candidates.size());
        {
            int row = 1 + active_w;
            for (size_t b = 0; b < candidates.size(); ++b) {
                cand_row_begin[b] = row;
                for (size_t j = 0; j < candidates[b].size(); ++j) {
                    batch.push_back(candidates[b][j]);
                    positions.push_back(total + static_cast<int>(j));
                }
                row += static_cast<int>(candidates[b].size());
            }
        }

        // Anchor and window rows follow the prefix law; each candidate row
        // sees the committed prefix, the anchor, and its own branch only.
        AttentionMask mask;
        mask.q_len = B;
        mask.kv_len = ctx + B;
        mask.data.assign(static_cast<size_t>(B) * mask.kv_len, kNegInf);
        for (int j = 0; j <= ctx; ++j) mask.at(0, j) = 0.0f;
        for (int i = 1; i <= active_w; ++i) {
            for (int j = 0; j <= ctx + i; ++j) mask.at(i, j) = 0.0f;
        }
        for (size_t b = 0; b < candidates.size(); ++b) {
            for (size_t j = 0; j < candidates[b].size(); ++j) {
                const int row = cand_row_begin[b] + static_cast<int>(j);
                for (int c = 0; c <= ctx; ++c) mask.at(row, c) = 0.0f;
                for (size_t p = 0; p <= j; ++p) {
                    mask.at(row, ctx + cand_row_begin[b] + static_cast<int>(p)) = 0.0f;
                }
            }
        }

        Logits logits = client.decode_step(batch, positions, mask, keep);
        const int anchor = argmax_row(logits, 0);

        std::span<const int> window_span(window.data(), static_cast<size_t>(active_w));
        VerifyResult best = verify_greedy(logits, 1, window_span, anchor);
        std::vector<int> best_rows;
        for (int i = 1; i <= best.accepted; ++i) best_rows.push_back(i);
        for (size_t b = 0; b < candidates.size(); ++b) {
            VerifyResult vr = verify_greedy(logits, cand_row_begin[b], candidates[b], anchor);
            if (vr.accepted > best.accepted) { // ties prefer the window, then recency
                best = vr;
                best_rows.clear();
                for (int j = 0; j < vr.accepted; ++j) best_rows.push_back(cand_row_begin[b] + j);
            }
        }

        const int room = max_new - static_cast<int>(res.tokens.size());
        const int commit_n = std::min<int>(static_cast<int>(best.committed.size()), room);
        for (int i = 0; i < commit_n; ++i) {
            res.tokens.push_back(best.committed[static_cast<size_t>(i)]);
        }
        append_row(res.committed_logits, logits, 0);
        for (int i = 1; i < commit_n; ++i) {
            append_row(res.committed_logits, logits, best_rows[static_cast<size_t>(i - 1)]);
        }
        total += commit_n;
        res.stats.tokens_committed += commit_n;

        keep.assign(1, 0);
        for (int i = 0; i < best.accepted; ++i) keep.push_back(best_rows[static_cast<size_t>(i)]);

        // Harvest n-grams from the consecutive window trajectories: tokens
        // sent vs. this step's predictions for the same positions.
        std::vector<int> current(static_cast<size_t>(active_w));
        current[0] = anchor;
        for (int i = 1; i < active_w; ++i) current[static_cast<size_t>(i)] = argmax_row(logits, i);
        pool.update(window_span, current);

        // Window refresh: predictions for positions total-commit_n .. shifted
        // past the committed run; repeat the last prediction at the edge.
        const int advanced = static_cast<int>(best.committed.size());
        std::vector<int> preds(static_cast<size_t>(active_w) + 1);
        preds[0] = anchor;
        for (int i = 0; i < active_w; ++i) {
            preds[static_cast<size_t>(i) + 1] = argmax_row(logits, 1 + i);
        }
        for (int i = 0; i < w; ++i) {
            window[static_cast<size_t>(i)] =
                preds[static_cast<size_t>(std::min(advanced + i, active_w))];
        }

        client.step_log().back().accepted = commit_n;
        client.step_log().back().pool_hit = hit;
        log_step(step_jsonl, static_cast<int>(client.step_log().size()) - 1,
                 client.step_log().back());
    }
    finish_stats(res.stats, client);
    res.stats.match_rate =
        res.stats.steps > 0 ? static_cast<double>(pool_hits) / res.stats.steps : 0.0;
    return res;
}

DecodeResult run_decode(DecodeMode mode, SplitClient& client, std::span<const int> prompt,
                        int max_new, const JacobiConfig& jacobi, const LookaheadConfig& lookahead,
                        std::ostream* step_jsonl) {
    switch (mode) {
        case DecodeMode::sequential: return decode_sequential(client, prompt, max_new, step_jsonl);
        case DecodeMode::jacobi: return decode_jacobi(client, prompt, max_new, jacobi, step_jsonl);
        case DecodeMode::lookahead:
            return decode_lookahead(client, prompt, max_new, lookahead, step_jsonl);
    }
    throw SplitError(ErrorKind::internal, "unhandled decode mode");
}

} // namespace splitf
