#include "splitf/wire.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include <nlohmann/json.hpp>

namespace splitf::wire {

namespace {

using nlohmann::json;

constexpr uint16_t kF16PosInf = 0x7c00;
constexpr uint16_t kF16MaxFinite = 0x7bff; // 65504
constexpr float kF16MaxFiniteValue = 65504.0f;

[[noreturn]] void protocol_error(const std::string& msg) {
    throw SplitError(ErrorKind::protocol, msg);
}

std::vector<int64_t> get_i64_array(const json& j, const char* field) {
    const auto& v = j.at(field);
    if (!v.is_array()) protocol_error(std::string("header field '") + field + "' must be an array");
    std::vector<int64_t> out;
    out.reserve(v.size());
    for (const auto& e : v) {
        if (!e.is_number_integer()) {
            protocol_error(std::string("header field '") + field + "' must hold integers");
        }
        out.push_back(e.get<int64_t>());
    }
    return out;
}

} // namespace

const char* to_string(FrameKind kind) {
    switch (kind) {
        case FrameKind::prompt: return "prompt";
        case FrameKind::step: return "step";
        case FrameKind::accept_and_step: return "accept_and_step";
        case FrameKind::response: return "response";
        case FrameKind::error: return "error";
        case FrameKind::ping: return "ping";
    }
    return "unknown";
}

FrameKind frame_kind_from_string(const std::string& s) {
    if (s == "prompt") return FrameKind::prompt;
    if (s == "step") return FrameKind::step;
    if (s == "accept_and_step") return FrameKind::accept_and_step;
    if (s == "response") return FrameKind::response;
    if (s == "error") return FrameKind::error;
    if (s == "ping") return FrameKind::ping;
    protocol_error("unknown frame kind: " + s);
}

const char* to_string(WireDtype dtype) {
    return dtype == WireDtype::f16 ? "f16" : "f32";
}

WireDtype dtype_from_string(const std::string& s) {
    if (s == "f16") return WireDtype::f16;
    if (s == "f32") return WireDtype::f32;
    protocol_error("unknown dtype: " + s);
}

size_t dtype_width(WireDtype dtype) { return dtype == WireDtype::f16 ? 2 : 4; }

int64_t shape_elements(std::span<const int64_t> shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) protocol_error("negative dimension in shape");
        n *= d;
    }
    return n;
}

uint16_t f32_to_f16_bits(float v, CodecStats* stats) {
    const uint32_t bits = std::bit_cast<uint32_t>(v);
    const uint16_t sign = static_cast<uint16_t>((bits >> 16) & 0x8000u);
    const uint32_t abs_bits = bits & 0x7fffffffu;

    if (abs_bits > 0x7f800000u) { // NaN: keep quiet NaN with top mantissa bit
        return static_cast<uint16_t>(sign | 0x7e00u);
    }
    if (abs_bits == 0x7f800000u) { // infinity passes through
        return static_cast<uint16_t>(sign | kF16PosInf);
    }
    const float abs_v = std::bit_cast<float>(abs_bits);
    if (abs_v > kF16MaxFiniteValue) {
        if (stats) stats->clamped += 1;
        return static_cast<uint16_t>(sign | kF16MaxFinite);
    }

    // Round-to-nearest-even via the well-known exponent rebias + shift.
    const int32_t exp = static_cast<int32_t>((abs_bits >> 23) & 0xff) - 127;
    uint32_t mant = abs_bits & 0x7fffffu;
    if (exp < -25) { // underflows to zero even after rounding
        return sign;
    }
    if (exp == -25) { // halfway to the smallest subnormal: ties go to zero
        return mant == 0 ? sign : static_cast<uint16_t>(sign | 1u);
    }
    if (exp < -14) { // subnormal half
        mant |= 0x800000u; // implicit leading one
        const int shift = -exp - 14 + 13; // bits to discard from the 24-bit mantissa
        const uint32_t half_val = mant >> shift;
        const uint32_t rem = mant & ((1u << shift) - 1u);
        const uint32_t halfway = 1u << (shift - 1);
        uint32_t rounded = half_val;
        if (rem > halfway || (rem == halfway && (half_val & 1u))) rounded += 1;
        return static_cast<uint16_t>(sign | rounded);
    }
    // Normalized half.
    uint32_t half_exp = static_cast<uint32_t>(exp + 15);
    uint32_t half_mant = mant >> 13;
    const uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half_mant & 1u))) {
        half_mant += 1;
        if (half_mant == 0x400u) { // mantissa overflow bumps the exponent
            half_mant = 0;
            half_exp += 1;
        }
    }
    if (half_exp >= 31) { // rounding pushed past the largest finite half
        if (stats) stats->clamped += 1;
        return static_cast<uint16_t>(sign | kF16MaxFinite);
    }
    return static_cast<uint16_t>(sign | (half_exp << 10) | half_mant);
}

float f16_bits_to_f32(uint16_t bits) {
    const uint32_t sign = static_cast<uint32_t>(bits & 0x8000u) << 16;
    const uint32_t exp = (bits >> 10) & 0x1fu;
    const uint32_t mant = bits & 0x3ffu;
    uint32_t out;
    if (exp == 0) {
        if (mant == 0) {
            out = sign;
        } else { // subnormal: normalize
            int e = -1;
            uint32_t m = mant;
            do {
                ++e;
                m <<= 1;
            } while ((m & 0x400u) == 0);
            out = sign | (static_cast<uint32_t>(127 - 15 - e) << 23) | ((m & 0x3ffu) << 13);
        }
    } else if (exp == 31) {
        out = sign | 0x7f800000u | (mant << 13);
    } else {
        out = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(out);
}

std::vector<std::byte> encode_values(std::span<const float> values, WireDtype dtype,
                                     CodecStats* stats) {
    std::vector<std::byte> out(values.size() * dtype_width(dtype));
    static_assert(std::endian::native == std::endian::little,
                  "wire codec assumes a little-endian host");
    if (dtype == WireDtype::f32) {
        std::memcpy(out.data(), values.data(), out.size());
    } else {
        auto* dst = reinterpret_cast<uint16_t*>(out.data());
        for (size_t i = 0; i < values.size(); ++i) dst[i] = f32_to_f16_bits(values[i], stats);
    }
    return out;
}

std::vector<float> decode_values(std::span<const std::byte> bytes, WireDtype dtype) {
    const size_t width = dtype_width(dtype);
    if (bytes.size() % width != 0) protocol_error("payload size not a multiple of dtype width");
    std::vector<float> out(bytes.size() / width);
    if (dtype == WireDtype::f32) {
        std::memcpy(out.data(), bytes.data(), bytes.size());
    } else {
        const auto* src = reinterpret_cast<const uint16_t*>(bytes.data());
        for (size_t i = 0; i < out.size(); ++i) out[i] = f16_bits_to_f32(src[i]);
    }
    return out;
}

std::vector<std::byte> encode_frame(const Frame& frame) {
    const FrameHeader& h = frame.header;
    const size_t expect_tensor =
        static_cast<size_t>(shape_elements(h.tensor_shape)) * dtype_width(h.dtype);
    if (frame.tensor_bytes.size() != expect_tensor) {
        protocol_error("tensor payload does not match declared shape");
    }
    if (h.mask_shape.has_value()) {
        const size_t expect_mask =
            static_cast<size_t>(shape_elements(*h.mask_shape)) * dtype_width(WireDtype::f16);
        if (frame.mask_bytes.size() != expect_mask) {
            protocol_error("mask payload does not match declared mask_shape");
        }
    } else if (!frame.mask_bytes.empty()) {
        protocol_error("mask bytes present without mask_shape");
    }

    json j;
    j["kind"] = to_string(h.kind);
    j["session_id"] = h.session_id;
    j["shape"] = h.tensor_shape;
    j["dtype"] = to_string(h.dtype);
    if (!h.positions.empty()) j["pos"] = h.positions;
    if (h.crop_pos) j["crop"] = *h.crop_pos;
    if (h.keep_indices) j["keep"] = *h.keep_indices;
    if (h.mask_shape) j["mask_shape"] = *h.mask_shape;
    if (h.error_msg) j["err"] = *h.error_msg;
    if (h.server_ms) j["srv_ms"] = *h.server_ms;

    const std::string header = j.dump();
    const uint32_t hlen = static_cast<uint32_t>(header.size());
    std::vector<std::byte> out;
    out.reserve(4 + header.size() + frame.tensor_bytes.size() + frame.mask_bytes.size());
    out.push_back(static_cast<std::byte>(hlen & 0xff));
    out.push_back(static_cast<std::byte>((hlen >> 8) & 0xff));
    out.push_back(static_cast<std::byte>((hlen >> 16) & 0xff));
    out.push_back(static_cast<std::byte>((hlen >> 24) & 0xff));
    const auto* hp = reinterpret_cast<const std::byte*>(header.data());
    out.insert(out.end(), hp, hp + header.size());
    out.insert(out.end(), frame.tensor_bytes.begin(), frame.tensor_bytes.end());
    out.insert(out.end(), frame.mask_bytes.begin(), frame.mask_bytes.end());
    return out;
}

ParsedHeader parse_header(std::span<const std::byte> bytes) {
    if (bytes.size() < 4) protocol_error("frame shorter than length prefix");
    const uint32_t hlen = static_cast<uint32_t>(std::to_integer<uint8_t>(bytes[0])) |
                          (static_cast<uint32_t>(std::to_integer<uint8_t>(bytes[1])) << 8) |
                          (static_cast<uint32_t>(std::to_integer<uint8_t>(bytes[2])) << 16) |
                          (static_cast<uint32_t>(std::to_integer<uint8_t>(bytes[3])) << 24);
    if (hlen > bytes.size() - 4) protocol_error("header length prefix exceeds available bytes");

    json j;
    try {
        j = json::parse(reinterpret_cast<const char*>(bytes.data()) + 4,
                        reinterpret_cast<const char*>(bytes.data()) + 4 + hlen);
    } catch (const json::exception& e) {
        protocol_error(std::string("invalid JSON header: ") + e.what());
    }
    if (!j.is_object()) protocol_error("JSON header must be an object");

    ParsedHeader parsed;
    FrameHeader& h = parsed.header;
    try {
        h.kind = frame_kind_from_string(j.at("kind").get<std::string>());
        h.session_id = j.value("session_id", std::string{});
        h.tensor_shape = get_i64_array(j, "shape");
        h.dtype = dtype_from_string(j.at("dtype").get<std::string>());
        if (j.contains("pos")) h.positions = get_i64_array(j, "pos");
        if (j.contains("crop")) {
            if (!j["crop"].is_number_integer()) protocol_error("'crop' must be an integer");
            h.crop_pos = j["crop"].get<int64_t>();
        }
        if (j.contains("keep")) h.keep_indices = get_i64_array(j, "keep");
        if (j.contains("mask_shape")) h.mask_shape = get_i64_array(j, "mask_shape");
        if (j.contains("err")) {
            if (!j["err"].is_string()) protocol_error("'err' must be a string");
            h.error_msg = j["err"].get<std::string>();
        }
        if (j.contains("srv_ms")) {
            if (!j["srv_ms"].is_number()) protocol_error("'srv_ms' must be a number");
            h.server_ms = j["srv_ms"].get<double>();
        }
    } catch (const json::exception& e) {
        protocol_error(std::string("malformed header field: ") + e.what());
    }

    const int64_t tensor_elems = shape_elements(h.tensor_shape);
    constexpr int64_t kMaxElems = int64_t{1} << 30;
    if (tensor_elems > kMaxElems) protocol_error("declared tensor too large");
    parsed.tensor_bytes_len = static_cast<size_t>(tensor_elems) * dtype_width(h.dtype);
    if (h.mask_shape) {
        const int64_t mask_elems = shape_elements(*h.mask_shape);
        if (mask_elems > kMaxElems) protocol_error("declared mask too large");
        parsed.mask_bytes_len = static_cast<size_t>(mask_elems) * dtype_width(WireDtype::f16);
    }
    parsed.payload_offset = 4 + hlen;
    return parsed;
}

Frame decode_frame(std::span<const std::byte> bytes) {
    ParsedHeader parsed = parse_header(bytes);
    const size_t total = parsed.payload_offset + parsed.tensor_bytes_len + parsed.mask_bytes_len;
    if (bytes.size() < total) protocol_error("payload truncated");
    if (bytes.size() > total) protocol_error("trailing bytes after declared payload");

    Frame frame;
    frame.header = std::move(parsed.header);
    const std::byte* p = bytes.data() + parsed.payload_offset;
    frame.tensor_bytes.assign(p, p + parsed.tensor_bytes_len);
    frame.mask_bytes.assign(p + parsed.tensor_bytes_len,
                            p + parsed.tensor_bytes_len + parsed.mask_bytes_len);
    return frame;
}

} // namespace splitf::wire
