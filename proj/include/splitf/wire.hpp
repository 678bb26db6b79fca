#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "splitf/error.hpp"

namespace splitf::wire {

// One wire message is [4 bytes: LE header length][JSON header][tensor bytes]
// [mask bytes when mask_shape is present]. PROTOCOL.md pins the byte layout
// and the JSON field names.

enum class FrameKind { prompt, step, accept_and_step, response, error, ping };

const char* to_string(FrameKind kind);
FrameKind frame_kind_from_string(const std::string& s);

enum class WireDtype { f16, f32 };

const char* to_string(WireDtype dtype);
WireDtype dtype_from_string(const std::string& s);
size_t dtype_width(WireDtype dtype);

struct FrameHeader {
    FrameKind kind = FrameKind::ping;
    std::string session_id;                            // "session_id"
    std::vector<int64_t> tensor_shape;                 // "shape"
    WireDtype dtype = WireDtype::f16;                  // "dtype"
    std::vector<int64_t> positions;                    // "pos" (request kinds)
    std::optional<int64_t> crop_pos;                   // "crop"
    std::optional<std::vector<int64_t>> keep_indices;  // "keep"
    std::optional<std::vector<int64_t>> mask_shape;    // "mask_shape"
    std::optional<std::string> error_msg;              // "err"
    std::optional<double> server_ms;                   // "srv_ms" (response)

    bool operator==(const FrameHeader&) const = default;
};

struct Frame {
    FrameHeader header;
    std::vector<std::byte> tensor_bytes;
    std::vector<std::byte> mask_bytes; // non-empty iff header.mask_shape

    bool operator==(const Frame&) const = default;
};

int64_t shape_elements(std::span<const int64_t> shape);

// Serializes the frame; throws ErrorKind::protocol when payload sizes do not
// match the declared shapes ("encode error").
std::vector<std::byte> encode_frame(const Frame& frame);

// Exact inverse of encode_frame over a complete buffer. Unknown header fields
// are ignored; every malformed input yields ErrorKind::protocol.
Frame decode_frame(std::span<const std::byte> bytes);

// Streaming helper: parses the length prefix + JSON header from the front of
// a buffer that holds at least the prefix and header. Returns the header and
// the byte offset where payload begins.
struct ParsedHeader {
    FrameHeader header;
    size_t payload_offset = 0;
    size_t tensor_bytes_len = 0;
    size_t mask_bytes_len = 0;
};
ParsedHeader parse_header(std::span<const std::byte> bytes);

// Counters for lossy events in the binary16 path.
struct CodecStats {
    uint64_t clamped = 0; // finite values beyond +-65504, clamped to max finite
};

// IEEE-754 binary16 conversion, round-to-nearest-even. +-inf passes through
// (mask payloads carry -inf); finite overflow clamps to +-65504 and counts.
uint16_t f32_to_f16_bits(float v, CodecStats* stats = nullptr);
float f16_bits_to_f32(uint16_t bits);

std::vector<std::byte> encode_values(std::span<const float> values, WireDtype dtype,
                                     CodecStats* stats = nullptr);
std::vector<float> decode_values(std::span<const std::byte> bytes, WireDtype dtype);

} // namespace splitf::wire
