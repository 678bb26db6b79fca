#include <doctest.h>

#include <string>

#include "splitf/client.hpp"
#include "splitf/metrics.hpp"
#include "splitf/server.hpp"

using namespace splitf;
using namespace splitf::wire;

namespace {

Weights desk_weights() {
    ModelConfig cfg;
    return init_weights(cfg);
}

// Hidden-state request; embeddings stand in for prefix output, which the
// engine's state machine does not care about.
Frame hidden_request(const Weights& w, FrameKind kind, const std::string& session,
                     const std::vector<int>& tokens, int start_pos, WireDtype dtype) {
    HiddenStates h = embed(w, tokens, start_pos);
    Frame f;
    f.header.kind = kind;
    f.header.session_id = session;
    f.header.tensor_shape = {h.seq, h.dim};
    f.header.dtype = dtype;
    f.header.positions.assign(h.positions.begin(), h.positions.end());
    f.tensor_bytes = encode_values(h.data, dtype, nullptr);
    return f;
}

} // namespace

TEST_CASE("server config validation") {
    Weights w = desk_weights();
    ServerConfig cfg;
    cfg.layer_begin = 0; // embedding boundary must stay local
    CHECK_THROWS_AS(ServerEngine(w, cfg), SplitError);
    cfg.layer_begin = 2;
    cfg.layer_end = w.config.n_layers; // suffix must stay local
    CHECK_THROWS_AS(ServerEngine(w, cfg), SplitError);
    cfg.layer_end = 5;
    CHECK_NOTHROW(ServerEngine(w, cfg));
}

TEST_CASE("prompt creates a session and returns every position") {
    Weights w = desk_weights();
    ServerEngine engine(w, ServerConfig{});

    Frame prompt = hidden_request(w, FrameKind::prompt, "sess-a", {1, 2, 3}, 0, WireDtype::f32);
    Frame resp = engine.handle(prompt);
    REQUIRE(resp.header.kind == FrameKind::response);
    CHECK(resp.header.tensor_shape == std::vector<int64_t>{3, w.config.hidden_dim});
    CHECK(resp.header.server_ms.has_value());

    auto view = engine.session_view("sess-a");
    REQUIRE(view.has_value());
    CHECK(view->cache_len == 3);
    CHECK(view->committed_len == 3);
    CHECK(view->provisional == 0);

    SUBCASE("a second prompt on the same session resets it") {
        Frame again =
            hidden_request(w, FrameKind::prompt, "sess-a", {9, 8, 7, 6, 5}, 0, WireDtype::f32);
        Frame r2 = engine.handle(again);
        CHECK(r2.header.kind == FrameKind::response);
        auto v2 = engine.session_view("sess-a");
        CHECK(v2->cache_len == 5);
        CHECK(v2->committed_len == 5);
    }
}

TEST_CASE("oversized prompt yields a capacity error frame") {
    Weights w = desk_weights();
    ServerEngine engine(w, ServerConfig{});
    // positions run past max_seq_len, so this cannot even embed client-side;
    // fabricate the frame directly.
    Frame f;
    f.header.kind = FrameKind::prompt;
    f.header.session_id = "big";
    const int n = w.config.max_seq_len + 1;
    f.header.tensor_shape = {n, w.config.hidden_dim};
    f.header.dtype = WireDtype::f16;
    for (int i = 0; i < n; ++i) f.header.positions.push_back(i);
    f.tensor_bytes.resize(static_cast<size_t>(n) * w.config.hidden_dim * 2);
    Frame resp = engine.handle(f);
    CHECK(resp.header.kind == FrameKind::error);
    CHECK(resp.header.error_msg->find("capacity") != std::string::npos);
}

TEST_CASE("step state machine: provisional tail, keep, crop") {
    Weights w = desk_weights();
    ServerEngine engine(w, ServerConfig{});
    engine.handle(hidden_request(w, FrameKind::prompt, "s", {1, 2, 3}, 0, WireDtype::f32));

    // 1-token step: provisional len 4
    Frame step = hidden_request(w, FrameKind::step, "s", {4}, 3, WireDtype::f32);
    Frame resp = engine.handle(step);
    REQUIRE(resp.header.kind == FrameKind::response);
    CHECK(resp.header.tensor_shape == std::vector<int64_t>{1, w.config.hidden_dim});
    auto view = engine.session_view("s");
    CHECK(view->cache_len == 4);
    CHECK(view->committed_len == 3);
    CHECK(view->provisional == 1);

    // accept it and speculate 2 more with an explicit mask
    Frame spec = hidden_request(w, FrameKind::accept_and_step, "s", {5, 6}, 4, WireDtype::f32);
    spec.header.keep_indices = std::vector<int64_t>{0};
    AttentionMask mask = build_attention_mask(2, 4);
    spec.header.mask_shape = std::vector<int64_t>{1, 1, 2, 6};
    spec.mask_bytes = encode_values(mask.data, WireDtype::f16, nullptr);
    Frame resp2 = engine.handle(spec);
    REQUIRE(resp2.header.kind == FrameKind::response);
    view = engine.session_view("s");
    CHECK(view->cache_len == 6);
    CHECK(view->committed_len == 4);
    CHECK(view->provisional == 2);

    SUBCASE("keep [0] relocates one entry and drops the rest") {
        Frame next = hidden_request(w, FrameKind::accept_and_step, "s", {7}, 5, WireDtype::f32);
        next.header.keep_indices = std::vector<int64_t>{0};
        engine.handle(next);
        view = engine.session_view("s");
        CHECK(view->cache_len == 6); // 5 committed + 1 provisional
        CHECK(view->committed_len == 5);
    }
    SUBCASE("empty keep rejects the whole tail") {
        Frame next = hidden_request(w, FrameKind::accept_and_step, "s", {9}, 4, WireDtype::f32);
        next.header.keep_indices = std::vector<int64_t>{};
        engine.handle(next);
        view = engine.session_view("s");
        CHECK(view->committed_len == 4);
        CHECK(view->cache_len == 5);
    }
    SUBCASE("crop before forward") {
        Frame next = hidden_request(w, FrameKind::accept_and_step, "s", {9}, 3, WireDtype::f32);
        next.header.keep_indices = std::vector<int64_t>{}; // drop tail
        next.header.crop_pos = 3;                          // then crop a committed entry
        engine.handle(next);
        view = engine.session_view("s");
        CHECK(view->committed_len == 3);
        CHECK(view->cache_len == 4);
    }
    SUBCASE("crop beyond length is a protocol error frame") {
        Frame next = hidden_request(w, FrameKind::accept_and_step, "s", {9}, 4, WireDtype::f32);
        next.header.keep_indices = std::vector<int64_t>{0, 1};
        next.header.crop_pos = 99;
        Frame err = engine.handle(next);
        CHECK(err.header.kind == FrameKind::error);
        CHECK(err.header.error_msg->find("protocol") != std::string::npos);
    }
    SUBCASE("bad keep index is a protocol error frame") {
        Frame next = hidden_request(w, FrameKind::accept_and_step, "s", {9}, 4, WireDtype::f32);
        next.header.keep_indices = std::vector<int64_t>{5};
        Frame err = engine.handle(next);
        CHECK(err.header.kind == FrameKind::error);
    }
}

TEST_CASE("unknown session and malformed frames become error frames") {
    Weights w = desk_weights();
    ServerEngine engine(w, ServerConfig{});

    Frame step = hidden_request(w, FrameKind::step, "ghost", {1}, 0, WireDtype::f16);
    Frame resp = engine.handle(step);
    CHECK(resp.header.kind == FrameKind::error);
    CHECK(resp.header.error_msg->find("session") != std::string::npos);
    CHECK(resp.header.session_id == "ghost");

    // mask shape mismatch
    engine.handle(hidden_request(w, FrameKind::prompt, "m", {1, 2}, 0, WireDtype::f32));
    Frame bad = hidden_request(w, FrameKind::step, "m", {3}, 2, WireDtype::f32);
    bad.header.mask_shape = std::vector<int64_t>{1, 1, 1, 99};
    bad.mask_bytes.resize(99 * 2);
    Frame err = engine.handle(bad);
    CHECK(err.header.kind == FrameKind::error);

    // responses are not requests
    Frame not_request;
    not_request.header.kind = FrameKind::response;
    not_request.header.tensor_shape = {0};
    CHECK(engine.handle(not_request).header.kind == FrameKind::error);
}

TEST_CASE("relocation preserves continuations exactly (recompute oracle)") {
    // Speculate two tokens, keep only the first, continue; a session that was
    // fed the same committed tokens sequentially must produce bitwise equal
    // responses afterwards (f32 link).
    Weights w = desk_weights();
    SplitConfig split;
    split.dtype = WireDtype::f32;

    auto run = [&](bool speculate) {
        SimPipeline pipe = make_sim_pipeline(w, split, LatencyProfile{}, WireDtype::f32);
        SplitClient& client = *pipe.client;
        const std::vector<int> prompt{3, 1, 4};
        client.prefill(prompt);
        std::vector<float> out;
        if (speculate) {
            // batch [t, g] with junk guess g, then keep only the anchor row
            const std::vector<int> batch{7, 250};
            const std::vector<int> pos{3, 4};
            client.decode_step(batch, pos, build_attention_mask(2, 3), {});
            const std::vector<int> next{9};
            const std::vector<int> npos{4};
            Logits l = client.decode_step(next, npos, build_attention_mask(1, 4),
                                          std::vector<int>{0});
            out.assign(l.row(0), l.row(0) + l.vocab);
        } else {
            const std::vector<int> t7{7};
            const std::vector<int> p3{3};
            client.decode_step(t7, p3, build_attention_mask(1, 3), {});
            const std::vector<int> t9{9};
            const std::vector<int> p4{4};
            Logits l = client.decode_step(t9, p4, build_attention_mask(1, 4),
                                          std::vector<int>{0});
            out.assign(l.row(0), l.row(0) + l.vocab);
        }
        return out;
    };

    CHECK(run(true) == run(false));
}

TEST_CASE("session expiry") {
    Weights w = desk_weights();
    ServerConfig cfg;
    cfg.session_expiry_s = 300.0;
    ServerEngine engine(w, cfg);

    double fake_now = 1000.0;
    engine.set_clock([&fake_now] { return fake_now; });

    engine.handle(hidden_request(w, FrameKind::prompt, "stale", {1, 2}, 0, WireDtype::f16));
    fake_now += 100.0;
    engine.handle(hidden_request(w, FrameKind::prompt, "fresh", {1, 2}, 0, WireDtype::f16));
    CHECK(engine.session_count() == 2);

    SUBCASE("sweep removes only sessions past the expiry") {
        fake_now += 201.0; // stale idle 301s, fresh idle 201s
        CHECK(engine.expire_sessions() == 1);
        CHECK(engine.session_count() == 1);
        CHECK(engine.session_view("fresh").has_value());
        CHECK_FALSE(engine.session_view("stale").has_value());
    }
    SUBCASE("active sessions are retained at the boundary") {
        fake_now += 299.0;
        CHECK(engine.expire_sessions() == 1); // stale at 399s, fresh at 299s
        CHECK(engine.session_view("fresh").has_value());
    }
    SUBCASE("lazy expiry on access") {
        fake_now += 400.0;
        Frame step = hidden_request(w, FrameKind::step, "stale", {3}, 2, WireDtype::f16);
        Frame resp = engine.handle(step);
        CHECK(resp.header.kind == FrameKind::error);
        CHECK(resp.header.error_msg->find("session") != std::string::npos);
    }
}

TEST_CASE("session table capacity") {
    Weights w = desk_weights();
    ServerConfig cfg;
    cfg.max_sessions = 2;
    ServerEngine engine(w, cfg);
    CHECK(engine.handle(hidden_request(w, FrameKind::prompt, "a", {1}, 0, WireDtype::f16))
              .header.kind == FrameKind::response);
    CHECK(engine.handle(hidden_request(w, FrameKind::prompt, "b", {1}, 0, WireDtype::f16))
              .header.kind == FrameKind::response);
    Frame overflow = engine.handle(hidden_request(w, FrameKind::prompt, "c", {1}, 0, WireDtype::f16));
    CHECK(overflow.header.kind == FrameKind::error);
    CHECK(overflow.header.error_msg->find("capacity") != std::string::npos);
}

TEST_CASE("response dtype mirrors the request unless pinned") {
    Weights w = desk_weights();
    SUBCASE("mirror") {
        ServerEngine engine(w, ServerConfig{});
        Frame f16 = engine.handle(hidden_request(w, FrameKind::prompt, "x", {1}, 0, WireDtype::f16));
        CHECK(f16.header.dtype == WireDtype::f16);
        Frame f32 = engine.handle(hidden_request(w, FrameKind::prompt, "x", {1}, 0, WireDtype::f32));
        CHECK(f32.header.dtype == WireDtype::f32);
    }
    SUBCASE("pinned") {
        ServerConfig cfg;
        cfg.response_dtype = WireDtype::f32;
        ServerEngine engine(w, cfg);
        Frame resp = engine.handle(hidden_request(w, FrameKind::prompt, "x", {1}, 0, WireDtype::f16));
        CHECK(resp.header.dtype == WireDtype::f32);
    }
}

TEST_CASE("ping responds with an empty tensor") {
    Weights w = desk_weights();
    ServerEngine engine(w, ServerConfig{});
    Frame ping;
    ping.header.kind = FrameKind::ping;
    ping.header.tensor_shape = {0};
    Frame pong = engine.handle(ping);
    CHECK(pong.header.kind == FrameKind::response);
    CHECK(pong.tensor_bytes.empty());
}
