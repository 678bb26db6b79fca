#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "splitf/wire.hpp"

namespace splitf {

// Deterministic latency injection for the in-process link. Jitter is uniform
// in [0, jitter_ms], drawn from a generator seeded with `seed`; a bandwidth
// adds size/bandwidth serialization delay per direction.
struct LatencyProfile {
    double one_way_delay_ms = 0.0;
    double jitter_ms = 0.0;
    std::optional<double> bytes_per_sec;
    uint64_t seed = 0;
};

// Endpoint descriptor: "tcp:HOST:PORT" or "sim:DELAY_MS[:JITTER_MS[:BYTES_PER_SEC]]".
struct Endpoint {
    enum class Kind { tcp, sim };
    Kind kind = Kind::sim;
    std::string host;
    int port = 0;
    LatencyProfile profile;

    static Endpoint parse(const std::string& descriptor);
    std::string to_string() const;
};

// Request/response channel in lockstep: one in-flight exchange at a time,
// responses 1:1 and in order.
class Channel {
public:
    virtual ~Channel() = default;
    virtual wire::Frame exchange(const wire::Frame& request) = 0;
    virtual void close() = 0;
};

using FrameHandler = std::function<wire::Frame(const wire::Frame&)>;

std::unique_ptr<Channel> open_tcp_channel(const std::string& host, int port,
                                          int timeout_ms = 30000);

// In-process channel: requests and responses pass through the byte codec and
// sleep one_way_delay (+jitter, +size/bandwidth) in each direction before the
// handler runs.
std::unique_ptr<Channel> open_sim_channel(const LatencyProfile& profile, FrameHandler handler);

// Dispatcher on the descriptor; sim endpoints need the in-process handler.
std::unique_ptr<Channel> open_channel(const Endpoint& endpoint, FrameHandler sim_handler = {},
                                      int timeout_ms = 30000);

// Median wall time of n ping/pong exchanges with minimal frames.
double measure_rtt(Channel& channel, int n_pings);

// Session transcripts: a flat file of direction-tagged raw frames, replayed
// by the protocol-dump subcommand. Record layout after the 4-byte magic
// "SFTR": [u8 direction (0 = to server, 1 = to client)][u32 LE length][bytes].
struct TranscriptRecord {
    uint8_t direction = 0;
    std::vector<std::byte> bytes;
};

class TranscriptWriter {
public:
    explicit TranscriptWriter(const std::string& path);
    ~TranscriptWriter();
    void append(uint8_t direction, std::span<const std::byte> bytes);
    void flush();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::vector<TranscriptRecord> read_transcript(const std::string& path);

// Channel decorator that records every exchanged frame to a transcript.
class RecordingChannel : public Channel {
public:
    RecordingChannel(std::unique_ptr<Channel> inner, std::shared_ptr<TranscriptWriter> writer);
    wire::Frame exchange(const wire::Frame& request) override;
    void close() override;

private:
    std::unique_ptr<Channel> inner_;
    std::shared_ptr<TranscriptWriter> writer_;
};

// Structural audit of a recorded session: every frame must decode and
// re-encode bit-exact, carry only the declared header fields, and ship
// hidden-state shaped tensors — nothing token- or logits-shaped.
struct TranscriptAudit {
    size_t frames = 0;
    size_t requests = 0;
    size_t responses = 0;
    bool roundtrip_exact = true;
    bool fields_clean = true;
    std::vector<std::string> violations;

    bool ok() const { return roundtrip_exact && fields_clean && violations.empty(); }
};

TranscriptAudit audit_transcript(const std::vector<TranscriptRecord>& records, int hidden_dim,
                                 int vocab_size);

// TCP accept loop feeding complete frames to a handler; one service thread
// per connection. Handler exceptions become error frames.
class FrameServer {
public:
    FrameServer(const std::string& host, int port, FrameHandler handler);
    ~FrameServer();

    void start();
    void stop();
    int port() const { return port_; } // resolved port when 0 was requested

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    int port_ = 0;
};

} // namespace splitf
