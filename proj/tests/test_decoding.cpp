#include <doctest.h>

#include <random>
#include <sstream>

#include "splitf/decoding.hpp"
#include "splitf/metrics.hpp"

using namespace splitf;

namespace {

Weights desk_weights(uint64_t seed = 1234) {
    ModelConfig cfg;
    cfg.seed = seed;
    return init_weights(cfg);
}

SimPipeline f32_pipeline(const Weights& w) {
    SplitConfig split;
    split.dtype = wire::WireDtype::f32;
    return make_sim_pipeline(w, split, LatencyProfile{}, wire::WireDtype::f32);
}

std::vector<int> random_prompt(const ModelConfig& cfg, int len, std::mt19937_64& rng) {
    std::vector<int> p(static_cast<size_t>(len));
    for (auto& t : p) t = static_cast<int>(rng() % static_cast<uint64_t>(cfg.vocab_size));
    return p;
}

} // namespace

TEST_CASE("verify_greedy semantics") {
    Logits logits;
    logits.seq = 3;
    logits.vocab = 4;
    logits.data = {
        0, 0, 9, 0, // row 0 -> argmax 2
        0, 0, 0, 9, // row 1 -> argmax 3
        9, 0, 0, 0, // row 2 -> argmax 0
    };

    SUBCASE("all guesses wrong commits just the anchor") {
        const std::vector<int> guesses{1, 1, 1};
        VerifyResult vr = verify_greedy(logits, 0, guesses, 5);
        CHECK(vr.accepted == 0);
        CHECK(vr.committed == std::vector<int>{5});
    }
    SUBCASE("all guesses match commits k+1 tokens") {
        const std::vector<int> guesses{5, 2, 3}; // anchor 5, then rows: 2, 3
        VerifyResult vr = verify_greedy(logits, 0, guesses, 5);
        CHECK(vr.accepted == 3);
        CHECK(vr.committed == std::vector<int>{5, 2, 3, 0});
    }
    SUBCASE("partial prefix") {
        const std::vector<int> guesses{5, 0, 0};
        VerifyResult vr = verify_greedy(logits, 0, guesses, 5);
        CHECK(vr.accepted == 1);
        CHECK(vr.committed == std::vector<int>{5, 2});
    }
}

TEST_CASE("ngram pool update, lookup, eviction") {
    NGramPool pool(3, 4);
    const std::vector<int> prev{10, 11, 12, 13};
    const std::vector<int> cur{20, 21, 22, 23};
    pool.update(prev, cur);
    // window edge: only positions 0 and 1 fit a 2-token continuation
    CHECK(pool.size() == 2);

    auto hits = pool.lookup(10, 2);
    REQUIRE(hits.size() == 1);
    CHECK(hits[0] == std::vector<int>{21, 22});
    CHECK(pool.lookup(99, 2).empty());

    // window of length 3 with n=3 inserts exactly one entry per update
    pool.update(std::vector<int>{10, 1, 2}, std::vector<int>{0, 30, 31});
    auto two = pool.lookup(10, 2);
    REQUIRE(two.size() == 2);
    CHECK(two[0] == std::vector<int>{30, 31}); // most recent first
    CHECK(two[1] == std::vector<int>{21, 22});
    CHECK(pool.lookup(10, 1).size() == 1);
    CHECK(pool.lookup(10, 1)[0] == std::vector<int>{30, 31});

    // capacity 4: two more singles evict the oldest entries
    pool.update(std::vector<int>{50, 1, 2}, std::vector<int>{0, 60, 61});
    CHECK(pool.size() == 4);
    pool.update(std::vector<int>{51, 1, 2}, std::vector<int>{0, 70, 71});
    CHECK(pool.size() == 4);
    CHECK(pool.lookup(10, 2).size() == 1); // the oldest 10-entry fell out
    CHECK(pool.lookup(10, 2)[0] == std::vector<int>{30, 31});

    // duplicate insert refreshes instead of duplicating
    pool.update(std::vector<int>{50, 1, 2}, std::vector<int>{0, 60, 61});
    CHECK(pool.size() == 4);
}

TEST_CASE("sequential split generation matches the monolithic oracle (f32)") {
    Weights w = desk_weights();
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 4; ++trial) {
        const auto prompt = random_prompt(w.config, 3 + static_cast<int>(rng() % 8), rng);
        const auto oracle = generate_monolithic(w, prompt, 32);

        SimPipeline pipe = f32_pipeline(w);
        DecodeResult res = decode_sequential(*pipe.client, prompt, 32);
        CHECK(res.tokens == oracle);
        CHECK(res.stats.acceptance_rate == 1.0);
        CHECK(res.stats.steps == 31); // prefill supplied the first token
    }
}

TEST_CASE("jacobi split generation matches the monolithic oracle (f32)") {
    Weights w = desk_weights();
    std::mt19937_64 rng(6);
    for (int block_k : {1, 2, 4, 6}) {
        const auto prompt = random_prompt(w.config, 5, rng);
        const auto oracle = generate_monolithic(w, prompt, 32);
        SimPipeline pipe = f32_pipeline(w);
        JacobiConfig cfg;
        cfg.block_k = block_k;
        DecodeResult res = decode_jacobi(*pipe.client, prompt, 32, cfg);
        CHECK(res.tokens == oracle);
        CHECK(res.stats.acceptance_rate >= 1.0);
        CHECK(res.stats.steps <= 31);
    }
}

TEST_CASE("lookahead split generation matches the monolithic oracle (f32)") {
    Weights w = desk_weights();
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 3; ++trial) {
        const auto prompt = random_prompt(w.config, 4 + static_cast<int>(rng() % 6), rng);
        const auto oracle = generate_monolithic(w, prompt, 48);
        SimPipeline pipe = f32_pipeline(w);
        LookaheadConfig cfg;
        DecodeResult res = decode_lookahead(*pipe.client, prompt, 48, cfg);
        CHECK(res.tokens == oracle);
        CHECK(res.stats.acceptance_rate >= 1.0);
    }
}

TEST_CASE("jacobi shrinks its block at the context limit and stays exact") {
    ModelConfig cfg;
    cfg.max_seq_len = 48;
    Weights w = init_weights(cfg);
    const std::vector<int> prompt{1, 2, 3, 4, 5, 6, 7, 8};
    const int max_new = 40; // fills the context exactly
    const auto oracle = generate_monolithic(w, prompt, max_new);

    SplitConfig split;
    split.dtype = wire::WireDtype::f32;
    SimPipeline pipe = make_sim_pipeline(w, split, LatencyProfile{}, wire::WireDtype::f32);
    JacobiConfig jc;
    jc.block_k = 6;
    DecodeResult res = decode_jacobi(*pipe.client, prompt, max_new, jc);
    CHECK(res.tokens == oracle);
}

TEST_CASE("lookahead batch sizes stay within the configured bounds") {
    Weights w = desk_weights();
    const auto prompt = std::vector<int>{1, 2, 1, 2, 1, 2};
    SimPipeline pipe = f32_pipeline(w);
    LookaheadConfig cfg; // w=8, n=3, g=2
    DecodeResult res = decode_lookahead(*pipe.client, prompt, 40, cfg);
    for (const auto& t : res.stats.step_timings) {
        CHECK(t.batch_len >= 1 + cfg.window_w);
        CHECK(t.batch_len <= 1 + cfg.window_w + cfg.max_candidates_g * (cfg.ngram_n - 1));
    }
}

TEST_CASE("an adversarial pool never changes the committed stream") {
    Weights w = desk_weights();
    std::mt19937_64 rng(8);
    const auto prompt = random_prompt(w.config, 6, rng);
    const auto oracle = generate_monolithic(w, prompt, 40);

    LookaheadConfig cfg;
    NGramPool junk(cfg.ngram_n, cfg.pool_capacity);
    for (int i = 0; i < 500; ++i) {
        std::vector<int> prev(static_cast<size_t>(cfg.window_w));
        std::vector<int> cur(static_cast<size_t>(cfg.window_w));
        for (auto& t : prev) t = static_cast<int>(rng() % 256);
        for (auto& t : cur) t = static_cast<int>(rng() % 256);
        junk.update(prev, cur);
    }
    SimPipeline pipe = f32_pipeline(w);
    DecodeResult res = decode_lookahead_with_pool(*pipe.client, prompt, 40, cfg, junk);
    CHECK(res.tokens == oracle);
}

TEST_CASE("acceptance accounting ties out") {
    Weights w = desk_weights();
    const std::vector<int> prompt{9, 9, 9, 9};
    SimPipeline pipe = f32_pipeline(w);
    DecodeResult res = decode_lookahead(*pipe.client, prompt, 40, LookaheadConfig{});
    int sum_accepted = 0;
    for (const auto& t : res.stats.step_timings) {
        CHECK(t.accepted >= 1);
        sum_accepted += t.accepted;
    }
    CHECK(sum_accepted == res.stats.tokens_committed);
    CHECK(res.stats.acceptance_rate ==
          doctest::Approx(static_cast<double>(res.stats.tokens_committed) / res.stats.steps)
              .epsilon(1e-12));
    CHECK(static_cast<int>(res.tokens.size()) == 40);
    CHECK(res.stats.steps <= 40);
}

TEST_CASE("random speculate-reject-continue schedules equal the oracle") {
    // Chaos protocol driver: interleave honest sequential steps, junk
    // speculative batches resolved by verification, and crop-based rollbacks.
    Weights w = desk_weights();
    std::mt19937_64 rng(11);

    for (int schedule = 0; schedule < 10; ++schedule) {
        const auto prompt = random_prompt(w.config, 4, rng);
        const int max_new = 24;
        const auto oracle = generate_monolithic(w, prompt, max_new);

        SimPipeline pipe = f32_pipeline(w);
        SplitClient& client = *pipe.client;
        std::vector<int> tokens{client.prefill(prompt)};
        int total = static_cast<int>(prompt.size()) + 1;
        std::vector<int> keep;
        bool keep_valid = false;

        while (static_cast<int>(tokens.size()) < max_new) {
            const int ctx = total - 1;
            const int action = static_cast<int>(rng() % 3);
            std::span<const int> keep_span =
                keep_valid ? std::span<const int>(keep) : std::span<const int>{};
            if (action == 0) {
                // honest single-token step
                const std::vector<int> batch{tokens.back()};
                const std::vector<int> pos{ctx};
                Logits l = client.decode_step(batch, pos, build_attention_mask(1, ctx), keep_span);
                tokens.push_back(argmax_row(l, 0));
                total += 1;
                keep = {0};
                keep_valid = true;
            } else if (action == 1) {
                // speculative batch of junk guesses, verified honestly
                const int k = 2 + static_cast<int>(rng() % 3);
                std::vector<int> batch{tokens.back()};
                std::vector<int> pos{ctx};
                std::vector<int> guesses;
                for (int i = 1; i < k; ++i) {
                    guesses.push_back(static_cast<int>(rng() % 256));
                    batch.push_back(guesses.back());
                    pos.push_back(ctx + i);
                }
                Logits l = client.decode_step(batch, pos, build_attention_mask(k, ctx), keep_span);
                VerifyResult vr = verify_greedy(l, 1, guesses, argmax_row(l, 0));
                const int room = max_new - static_cast<int>(tokens.size());
                const int commit = std::min<int>(static_cast<int>(vr.committed.size()), room);
                for (int i = 0; i < commit; ++i) tokens.push_back(vr.committed[i]);
                total += commit;
                keep.clear();
                for (int i = 0; i <= vr.accepted; ++i) keep.push_back(i);
                keep_valid = true;
            } else {
                // speculative batch, then reject everything via crop
                const int k = 2 + static_cast<int>(rng() % 2);
                std::vector<int> batch{tokens.back()};
                std::vector<int> pos{ctx};
                for (int i = 1; i < k; ++i) {
                    batch.push_back(static_cast<int>(rng() % 256));
                    pos.push_back(ctx + i);
                }
                client.decode_step(batch, pos, build_attention_mask(k, ctx), keep_span);
                // drop the whole tail, then re-step the anchor token
                const std::vector<int> again{tokens.back()};
                const std::vector<int> apos{ctx};
                Logits l = client.decode_step(again, apos, build_attention_mask(1, ctx),
                                              std::span<const int>{}, ctx);
                tokens.push_back(argmax_row(l, 0));
                total += 1;
                keep = {0};
                keep_valid = true;
            }
        }
        CHECK(tokens == oracle);
    }
}

TEST_CASE("empty prompt is rejected before any network traffic") {
    Weights w = desk_weights();
    int handler_calls = 0;
    auto counting = [&handler_calls](const wire::Frame&) -> wire::Frame {
        ++handler_calls;
        throw SplitError(ErrorKind::internal, "should not be reached");
    };
    auto channel = open_sim_channel(LatencyProfile{}, counting);
    SplitConfig split;
    SplitClient client(w, split, *channel);
    CHECK_THROWS_AS(client.prefill(std::vector<int>{}), SplitError);
    CHECK(handler_calls == 0);
}

TEST_CASE("match_rate equals the pool-hit fraction recomputed from the step log") {
    Weights w = desk_weights();
    SimPipeline pipe = f32_pipeline(w);
    const std::vector<int> prompt{2, 2, 2, 2, 2, 2};
    DecodeResult res = decode_lookahead(*pipe.client, prompt, 48, LookaheadConfig{});
    int hits = 0;
    for (const auto& t : res.stats.step_timings) hits += t.pool_hit ? 1 : 0;
    CHECK(res.stats.match_rate ==
          doctest::Approx(static_cast<double>(hits) / res.stats.steps).epsilon(1e-12));
}

TEST_CASE("stats JSONL has the declared schema") {
    Weights w = desk_weights();
    SimPipeline pipe = f32_pipeline(w);
    std::ostringstream jsonl;
    decode_sequential(*pipe.client, std::vector<int>{1, 2, 3}, 4, &jsonl);
    std::istringstream lines(jsonl.str());
    std::string line;
    int count = 0;
    while (std::getline(lines, line)) {
        CHECK(line.find("\"step\"") != std::string::npos);
        CHECK(line.find("\"batch_len\"") != std::string::npos);
        CHECK(line.find("\"accepted\"") != std::string::npos);
        CHECK(line.find("\"pool_hit\"") != std::string::npos);
        CHECK(line.find("\"wall_ms\"") != std::string::npos);
        CHECK(line.find("\"payload_bytes_up\"") != std::string::npos);
        CHECK(line.find("\"payload_bytes_down\"") != std::string::npos);
        ++count;
    }
    CHECK(count == 3);
}

TEST_CASE("f16 wire mode stays close to the oracle and reports clamps") {
    Weights w = desk_weights();
    SplitConfig split; // f16 default
    SimPipeline pipe = make_sim_pipeline(w, split, LatencyProfile{});
    const std::vector<int> prompt{3, 1, 4, 1, 5};
    DecodeResult res = decode_sequential(*pipe.client, prompt, 24);
    CHECK(res.tokens.size() == 24);
    // desk-scale activations are far from the f16 clamp range
    CHECK(pipe.client->codec_stats().clamped == 0);
}

TEST_CASE("transport failure aborts generation cleanly") {
    Weights w = desk_weights();
    auto engine = std::make_shared<ServerEngine>(w, ServerConfig{});
    int calls = 0;
    auto flaky = [&calls, engine](const wire::Frame& f) -> wire::Frame {
        calls += 1;
        if (calls > 3) throw SplitError(ErrorKind::transport, "link dropped");
        return engine->handle(f);
    };
    auto channel = open_sim_channel(LatencyProfile{}, flaky);
    SplitConfig split;
    split.dtype = wire::WireDtype::f32;
    SplitClient client(w, split, *channel);
    const std::vector<int> prompt{1, 2, 3};
    CHECK_THROWS_AS(decode_sequential(client, prompt, 16), SplitError);
    CHECK(client.dead());
    const std::vector<int> one{1};
    const std::vector<int> pos{3};
    CHECK_THROWS_AS(client.decode_step(one, pos, build_attention_mask(1, 3), {}), SplitError);
}
