#include "splitf/transport.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstring>
#include <fstream>
#include <mutex>
#include <random>
#include <thread>
#include <vector>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

namespace splitf {

namespace {

using Clock = std::chrono::steady_clock;

double now_ms() {
    return std::chrono::duration<double, std::milli>(Clock::now().time_since_epoch()).count();
}

// sleep_for alone overshoots by a scheduler quantum, which would smear the
// injected latency by more than the desk model's whole compute time; spin the
// final stretch so exchanges land within microseconds of nominal.
void precise_sleep_ms(double ms) {
    if (ms <= 0.0) return;
    const double start = now_ms();
    const double coarse = ms - 2.0;
    if (coarse > 0.0) {
        std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(coarse));
    }
    while (now_ms() - start < ms) {
        // spin
    }
}

double parse_double_field(const std::string& s, const char* what) {
    try {
        size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw SplitError(ErrorKind::config, std::string("bad ") + what + " in endpoint: " + s);
    }
}

std::vector<std::string> split_fields(const std::string& s, char sep) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        const size_t pos = s.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(s.substr(start));
            break;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    Socket(Socket&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }
    Socket& operator=(Socket&& other) noexcept {
        if (this != &other) {
            reset();
            fd_ = other.fd_;
            other.fd_ = -1;
        }
        return *this;
    }
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;
    ~Socket() { reset(); }

    int fd() const { return fd_; }
    bool valid() const { return fd_ >= 0; }
    void reset() {
        if (fd_ >= 0) {
            ::shutdown(fd_, SHUT_RDWR);
            ::close(fd_);
            fd_ = -1;
        }
    }

private:
    int fd_ = -1;
};

void send_all(int fd, const std::byte* data, size_t len, int timeout_ms) {
    size_t sent = 0;
    while (sent < len) {
        pollfd pfd{fd, POLLOUT, 0};
        const int pr = ::poll(&pfd, 1, timeout_ms);
        if (pr == 0) throw SplitError(ErrorKind::transport, "send timeout");
        if (pr < 0) throw SplitError(ErrorKind::transport, std::string("poll: ") + strerror(errno));
        const ssize_t n = ::send(fd, data + sent, len - sent, MSG_NOSIGNAL);
        if (n <= 0) {
            throw SplitError(ErrorKind::transport, std::string("send: ") + strerror(errno));
        }
        sent += static_cast<size_t>(n);
    }
}

// Reads exactly len bytes; returns false on clean EOF at offset 0.
bool recv_exact(int fd, std::byte* data, size_t len, int timeout_ms) {
    size_t got = 0;
    while (got < len) {
        pollfd pfd{fd, POLLIN, 0};
        const int pr = ::poll(&pfd, 1, timeout_ms);
        if (pr == 0) throw SplitError(ErrorKind::transport, "receive timeout");
        if (pr < 0) throw SplitError(ErrorKind::transport, std::string("poll: ") + strerror(errno));
        const ssize_t n = ::recv(fd, data + got, len - got, 0);
        if (n == 0) {
            if (got == 0) return false;
            throw SplitError(ErrorKind::transport, "peer closed mid-frame");
        }
        if (n < 0) {
            throw SplitError(ErrorKind::transport, std::string("recv: ") + strerror(errno));
        }
        got += static_cast<size_t>(n);
    }
    return true;
}

// Reads one complete frame's raw bytes from the stream. Empty result on
// clean EOF before any byte of a frame.
std::vector<std::byte> read_frame_bytes(int fd, int timeout_ms) {
    std::vector<std::byte> buf(4);
    if (!recv_exact(fd, buf.data(), 4, timeout_ms)) return {};
    const uint32_t hlen = static_cast<uint32_t>(std::to_integer<uint8_t>(buf[0])) |
                          (static_cast<uint32_t>(std::to_integer<uint8_t>(buf[1])) << 8) |
                          (static_cast<uint32_t>(std::to_integer<uint8_t>(buf[2])) << 16) |
                          (static_cast<uint32_t>(std::to_integer<uint8_t>(buf[3])) << 24);
    constexpr uint32_t kMaxHeader = 16u << 20;
    if (hlen > kMaxHeader) throw SplitError(ErrorKind::protocol, "header length implausibly large");
    buf.resize(4 + hlen);
    if (!recv_exact(fd, buf.data() + 4, hlen, timeout_ms)) {
        throw SplitError(ErrorKind::transport, "peer closed mid-frame");
    }
    const wire::ParsedHeader parsed = wire::parse_header(buf);
    const size_t payload = parsed.tensor_bytes_len + parsed.mask_bytes_len;
    constexpr size_t kMaxPayload = 64u << 20; // refuse to allocate for absurd declarations
    if (payload > kMaxPayload) {
        throw SplitError(ErrorKind::protocol, "declared payload implausibly large");
    }
    buf.resize(4 + hlen + payload);
    if (payload > 0 && !recv_exact(fd, buf.data() + 4 + hlen, payload, timeout_ms)) {
        throw SplitError(ErrorKind::transport, "peer closed mid-frame");
    }
    return buf;
}

class TcpChannel final : public Channel {
public:
    TcpChannel(const std::string& host, int port, int timeout_ms) : timeout_ms_(timeout_ms) {
        addrinfo hints{};
        hints.ai_family = AF_UNSPEC;
        hints.ai_socktype = SOCK_STREAM;
        addrinfo* res = nullptr;
        const std::string port_str = std::to_string(port);
        const int rc = ::getaddrinfo(host.c_str(), port_str.c_str(), &hints, &res);
        if (rc != 0) {
            throw SplitError(ErrorKind::transport,
                             "resolve " + host + ": " + gai_strerror(rc));
        }
        int last_errno = 0;
        for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
            Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
            if (!s.valid()) {
                last_errno = errno;
                continue;
            }
            if (::connect(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0) {
                sock_ = std::move(s);
                break;
            }
            last_errno = errno;
        }
        ::freeaddrinfo(res);
        if (!sock_.valid()) {
            throw SplitError(ErrorKind::transport, "connect " + host + ":" + port_str + ": " +
                                                       strerror(last_errno));
        }
        const int one = 1;
        ::setsockopt(sock_.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    }

    wire::Frame exchange(const wire::Frame& request) override {
        if (!sock_.valid()) throw SplitError(ErrorKind::transport, "channel closed");
        const std::vector<std::byte> out = wire::encode_frame(request);
        send_all(sock_.fd(), out.data(), out.size(), timeout_ms_);
        std::vector<std::byte> in = read_frame_bytes(sock_.fd(), timeout_ms_);
        if (in.empty()) {
            sock_.reset();
            throw SplitError(ErrorKind::transport, "peer closed before responding");
        }
        return wire::decode_frame(in);
    }

    void close() override { sock_.reset(); }

private:
    Socket sock_;
    int timeout_ms_;
};

class SimChannel final : public Channel {
public:
    SimChannel(const LatencyProfile& profile, FrameHandler handler)
        : profile_(profile), handler_(std::move(handler)), rng_(profile.seed) {
        if (!handler_) {
            throw SplitError(ErrorKind::config, "simulated channel requires an in-process handler");
        }
        if (profile_.one_way_delay_ms < 0.0 || profile_.jitter_ms < 0.0) {
            throw SplitError(ErrorKind::config, "latency profile delays must be >= 0");
        }
    }

    wire::Frame exchange(const wire::Frame& request) override {
        if (closed_) throw SplitError(ErrorKind::transport, "channel closed");
        const std::vector<std::byte> out = wire::encode_frame(request);
        delay_for(out.size());
        wire::Frame response = handler_(wire::decode_frame(out));
        const std::vector<std::byte> back = wire::encode_frame(response);
        delay_for(back.size());
        return wire::decode_frame(back);
    }

    void close() override { closed_ = true; }

private:
    void delay_for(size_t bytes) {
        double ms = profile_.one_way_delay_ms;
        if (profile_.jitter_ms > 0.0) {
            ms += std::uniform_real_distribution<double>(0.0, profile_.jitter_ms)(rng_);
        }
        if (profile_.bytes_per_sec && *profile_.bytes_per_sec > 0.0) {
            ms += 1000.0 * static_cast<double>(bytes) / *profile_.bytes_per_sec;
        }
        precise_sleep_ms(ms);
    }

    LatencyProfile profile_;
    FrameHandler handler_;
    std::mt19937_64 rng_;
    bool closed_ = false;
};

} // namespace

Endpoint Endpoint::parse(const std::string& descriptor) {
    const auto fields = split_fields(descriptor, ':');
    if (fields.empty()) throw SplitError(ErrorKind::config, "empty endpoint descriptor");
    Endpoint ep;
    if (fields[0] == "tcp") {
        if (fields.size() != 3) {
            throw SplitError(ErrorKind::config, "tcp endpoint must be tcp:HOST:PORT");
        }
        ep.kind = Kind::tcp;
        ep.host = fields[1];
        const double port = parse_double_field(fields[2], "port");
        if (port < 0 || port > 65535 || port != static_cast<int>(port)) {
            throw SplitError(ErrorKind::config, "bad port: " + fields[2]);
        }
        ep.port = static_cast<int>(port);
        return ep;
    }
    if (fields[0] == "sim") {
        if (fields.size() < 2 || fields.size() > 4) {
            throw SplitError(ErrorKind::config,
                             "sim endpoint must be sim:DELAY_MS[:JITTER_MS[:BYTES_PER_SEC]]");
        }
        ep.kind = Kind::sim;
        ep.profile.one_way_delay_ms = parse_double_field(fields[1], "delay");
        if (fields.size() >= 3) ep.profile.jitter_ms = parse_double_field(fields[2], "jitter");
        if (fields.size() >= 4) ep.profile.bytes_per_sec = parse_double_field(fields[3], "bandwidth");
        if (ep.profile.one_way_delay_ms < 0 || ep.profile.jitter_ms < 0) {
            throw SplitError(ErrorKind::config, "delays must be >= 0");
        }
        return ep;
    }
    throw SplitError(ErrorKind::config, "unknown endpoint scheme: " + fields[0]);
}

std::string Endpoint::to_string() const {
    if (kind == Kind::tcp) return "tcp:" + host + ":" + std::to_string(port);
    std::string s = "sim:" + std::to_string(profile.one_way_delay_ms);
    if (profile.jitter_ms > 0 || profile.bytes_per_sec) {
        s += ":" + std::to_string(profile.jitter_ms);
    }
    if (profile.bytes_per_sec) s += ":" + std::to_string(*profile.bytes_per_sec);
    return s;
}

std::unique_ptr<Channel> open_tcp_channel(const std::string& host, int port, int timeout_ms) {
    return std::make_unique<TcpChannel>(host, port, timeout_ms);
}

std::unique_ptr<Channel> open_sim_channel(const LatencyProfile& profile, FrameHandler handler) {
    return std::make_unique<SimChannel>(profile, std::move(handler));
}

std::unique_ptr<Channel> open_channel(const Endpoint& endpoint, FrameHandler sim_handler,
                                      int timeout_ms) {
    if (endpoint.kind == Endpoint::Kind::tcp) {
        return open_tcp_channel(endpoint.host, endpoint.port, timeout_ms);
    }
    return open_sim_channel(endpoint.profile, std::move(sim_handler));
}

double measure_rtt(Channel& channel, int n_pings) {
    if (n_pings < 1) throw SplitError(ErrorKind::input, "n_pings must be >= 1");
    std::vector<double> samples;
    samples.reserve(static_cast<size_t>(n_pings));
    wire::Frame ping;
    ping.header.kind = wire::FrameKind::ping;
    ping.header.tensor_shape = {0};
    ping.header.dtype = wire::WireDtype::f16;
    for (int i = 0; i < n_pings; ++i) {
        const double t0 = now_ms();
        wire::Frame pong = channel.exchange(ping);
        if (pong.header.kind == wire::FrameKind::error) {
            throw SplitError(ErrorKind::transport,
                             "ping failed: " + pong.header.error_msg.value_or("unknown"));
        }
        samples.push_back(now_ms() - t0);
    }
    std::sort(samples.begin(), samples.end());
    const size_t n = samples.size();
    if (n % 2 == 1) return samples[n / 2];
    return 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
}

// ── Transcripts ──────────────────────────────────────────────────────────

namespace {
constexpr char kTranscriptMagic[4] = {'S', 'F', 'T', 'R'};
}

struct TranscriptWriter::Impl {
    std::ofstream os;
};

TranscriptWriter::TranscriptWriter(const std::string& path) : impl_(new Impl) {
    impl_->os.open(path, std::ios::binary | std::ios::trunc);
    if (!impl_->os) throw SplitError(ErrorKind::input, "cannot open transcript for write: " + path);
    impl_->os.write(kTranscriptMagic, 4);
}

TranscriptWriter::~TranscriptWriter() = default;

void TranscriptWriter::append(uint8_t direction, std::span<const std::byte> bytes) {
    auto& os = impl_->os;
    os.put(static_cast<char>(direction));
    const uint32_t len = static_cast<uint32_t>(bytes.size());
    const unsigned char b[4] = {static_cast<unsigned char>(len & 0xff),
                                static_cast<unsigned char>((len >> 8) & 0xff),
                                static_cast<unsigned char>((len >> 16) & 0xff),
                                static_cast<unsigned char>((len >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw SplitError(ErrorKind::input, "short write to transcript");
}

void TranscriptWriter::flush() { impl_->os.flush(); }

std::vector<TranscriptRecord> read_transcript(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw SplitError(ErrorKind::input, "cannot open transcript: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kTranscriptMagic, 4) != 0) {
        throw SplitError(ErrorKind::input, "not a transcript file: " + path);
    }
    std::vector<TranscriptRecord> records;
    while (true) {
        const int dir = is.get();
        if (dir == EOF) break;
        unsigned char b[4];
        is.read(reinterpret_cast<char*>(b), 4);
        if (!is) throw SplitError(ErrorKind::input, "truncated transcript record");
        const uint32_t len = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
                             (static_cast<uint32_t>(b[2]) << 16) |
                             (static_cast<uint32_t>(b[3]) << 24);
        TranscriptRecord rec;
        rec.direction = static_cast<uint8_t>(dir);
        rec.bytes.resize(len);
        is.read(reinterpret_cast<char*>(rec.bytes.data()), len);
        if (!is) throw SplitError(ErrorKind::input, "truncated transcript record");
        records.push_back(std::move(rec));
    }
    return records;
}

TranscriptAudit audit_transcript(const std::vector<TranscriptRecord>& records, int hidden_dim,
                                 int vocab_size) {
    TranscriptAudit audit;
    static const std::vector<std::string> kAllowedKeys = {
        "kind", "session_id", "shape", "dtype", "pos",
        "crop", "keep",       "mask_shape", "err", "srv_ms"};

    for (size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        audit.frames += 1;
        if (rec.direction == 0) {
            audit.requests += 1;
        } else {
            audit.responses += 1;
        }
        const std::string tag = "frame " + std::to_string(i);

        wire::Frame frame;
        try {
            frame = wire::decode_frame(rec.bytes);
        } catch (const SplitError& e) {
            audit.roundtrip_exact = false;
            audit.violations.push_back(tag + ": does not decode: " + e.what());
            continue;
        }
        if (wire::encode_frame(frame) != rec.bytes) {
            audit.roundtrip_exact = false;
            audit.violations.push_back(tag + ": re-encode differs from recorded bytes");
        }

        // Field allowlist: parse the raw JSON header independently so unknown
        // (possibly token-typed) fields cannot hide behind the lenient decoder.
        const uint32_t hlen = static_cast<uint32_t>(std::to_integer<uint8_t>(rec.bytes[0])) |
                              (static_cast<uint32_t>(std::to_integer<uint8_t>(rec.bytes[1])) << 8) |
                              (static_cast<uint32_t>(std::to_integer<uint8_t>(rec.bytes[2])) << 16) |
                              (static_cast<uint32_t>(std::to_integer<uint8_t>(rec.bytes[3])) << 24);
        const std::string header(reinterpret_cast<const char*>(rec.bytes.data()) + 4, hlen);
        const auto j = nlohmann::json::parse(header);
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (std::find(kAllowedKeys.begin(), kAllowedKeys.end(), it.key()) ==
                kAllowedKeys.end()) {
                audit.fields_clean = false;
                audit.violations.push_back(tag + ": undeclared header field '" + it.key() + "'");
            }
        }

        // Shape discipline: payloads are hidden-state rows [seq, hidden_dim]
        // or empty [0]; a vocab-wide tensor would be logits leaking out.
        const auto& shape = frame.header.tensor_shape;
        const bool empty_tensor = shape.size() == 1 && shape[0] == 0;
        const bool hidden_tensor = shape.size() == 2 && shape[1] == hidden_dim;
        if (!empty_tensor && !hidden_tensor) {
            audit.fields_clean = false;
            audit.violations.push_back(tag + ": tensor shape is not hidden-state shaped");
        }
        if (shape.size() == 2 && vocab_size != hidden_dim && shape[1] == vocab_size) {
            audit.fields_clean = false;
            audit.violations.push_back(tag + ": tensor width equals vocab size (logits?)");
        }
    }
    return audit;
}

RecordingChannel::RecordingChannel(std::unique_ptr<Channel> inner,
                                   std::shared_ptr<TranscriptWriter> writer)
    : inner_(std::move(inner)), writer_(std::move(writer)) {}

wire::Frame RecordingChannel::exchange(const wire::Frame& request) {
    writer_->append(0, wire::encode_frame(request));
    wire::Frame response = inner_->exchange(request);
    writer_->append(1, wire::encode_frame(response));
    return response;
}

void RecordingChannel::close() {
    writer_->flush();
    inner_->close();
}

// ── FrameServer ──────────────────────────────────────────────────────────

struct FrameServer::Impl {
    Socket listener;
    FrameHandler handler;
    std::atomic<bool> running{false};
    std::thread accept_thread;
    std::mutex conn_mutex;
    std::vector<std::thread> conn_threads;

    void serve_connection(Socket sock) {
        try {
            while (running.load()) {
                // Short idle poll so stop() is honored on quiet connections.
                pollfd pfd{sock.fd(), POLLIN, 0};
                const int pr = ::poll(&pfd, 1, 100);
                if (pr < 0) break;
                if (pr == 0) continue;
                std::vector<std::byte> raw = read_frame_bytes(sock.fd(), 30000);
                if (raw.empty()) break; // client done
                wire::Frame response;
                try {
                    response = handler(wire::decode_frame(raw));
                } catch (const SplitError& e) {
                    response.header.kind = wire::FrameKind::error;
                    response.header.tensor_shape = {0};
                    response.header.error_msg = e.what();
                } catch (const std::exception& e) {
                    response.header.kind = wire::FrameKind::error;
                    response.header.tensor_shape = {0};
                    response.header.error_msg = std::string("internal: ") + e.what();
                }
                const std::vector<std::byte> out = wire::encode_frame(response);
                send_all(sock.fd(), out.data(), out.size(), 30000);
            }
        } catch (const SplitError&) {
            // Drop the connection; the client sees a transport error.
        }
    }
};

FrameServer::FrameServer(const std::string& host, int port, FrameHandler handler)
    : impl_(new Impl) {
    impl_->handler = std::move(handler);

    Socket listener(::socket(AF_INET, SOCK_STREAM, 0));
    if (!listener.valid()) {
        throw SplitError(ErrorKind::transport, std::string("socket: ") + strerror(errno));
    }
    const int one = 1;
    ::setsockopt(listener.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<uint16_t>(port));
    if (host.empty() || host == "0.0.0.0") {
        addr.sin_addr.s_addr = INADDR_ANY;
    } else if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        throw SplitError(ErrorKind::config, "listen host must be an IPv4 address: " + host);
    }
    if (::bind(listener.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        throw SplitError(ErrorKind::transport, std::string("bind: ") + strerror(errno));
    }
    if (::listen(listener.fd(), 16) != 0) {
        throw SplitError(ErrorKind::transport, std::string("listen: ") + strerror(errno));
    }
    sockaddr_in bound{};
    socklen_t blen = sizeof(bound);
    ::getsockname(listener.fd(), reinterpret_cast<sockaddr*>(&bound), &blen);
    port_ = ntohs(bound.sin_port);
    impl_->listener = std::move(listener);
}

FrameServer::~FrameServer() { stop(); }

void FrameServer::start() {
    impl_->running.store(true);
    impl_->accept_thread = std::thread([impl = impl_.get()] {
        while (impl->running.load()) {
            pollfd pfd{impl->listener.fd(), POLLIN, 0};
            const int pr = ::poll(&pfd, 1, 100);
            if (pr <= 0) continue;
            const int fd = ::accept(impl->listener.fd(), nullptr, nullptr);
            if (fd < 0) continue;
            const int one = 1;
            ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
            std::lock_guard<std::mutex> lock(impl->conn_mutex);
            impl->conn_threads.emplace_back(
                [impl, fd] { impl->serve_connection(Socket(fd)); });
        }
    });
}

void FrameServer::stop() {
    if (!impl_) return;
    impl_->running.store(false);
    if (impl_->accept_thread.joinable()) impl_->accept_thread.join();
    impl_->listener.reset();
    std::lock_guard<std::mutex> lock(impl_->conn_mutex);
    for (auto& t : impl_->conn_threads) {
        if (t.joinable()) t.join();
    }
    impl_->conn_threads.clear();
}

} // namespace splitf
