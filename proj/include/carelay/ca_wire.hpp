#pragma once

// Channel Access datagram codec, just enough for name resolution.
//
// Every CA message starts with a 16-byte big-endian header:
//
//   offset  size  field
//        0     2  command
//        2     2  payload_size   (multiple of 8)
//        4     2  data_type
//        6     2  data_count
//        8     4  param1
//       12     4  param2
//
// followed by payload_size bytes. A search datagram from a client is a
// version message (command 0) plus one search message (command 6) whose
// payload is the PV name, NUL-terminated and NUL-padded to 8 bytes:
//
//   search:   data_type = reply flag (5 = don't reply, 10 = do reply)
//             data_count = client minor version
//             param1 = param2 = search id
//   response: data_type = server TCP port, payload_size = 8
//             param1 = server IPv4 address, or 0xFFFFFFFF for "use the
//                      datagram's source address"
//             param2 = search id
//             payload = server minor version as u16 then 6 zero bytes
//
// A tcpdump capture on udp port 5064 can be fed to decode_datagram() byte for
// byte (strip the 28 bytes of IP/UDP header first).
//
// The value exchange used once a name is resolved is not CA: it is a small
// framed record that stands in for the TCP circuit.

#include <bit>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "carelay/address.hpp"
#include "carelay/bytes.hpp"

namespace carelay::ca {

inline constexpr std::size_t kHeaderSize = 16;
inline constexpr std::uint16_t kCmdVersion = 0;
inline constexpr std::uint16_t kCmdSearch = 6;
inline constexpr std::uint16_t kDefaultMinorVersion = 13;
inline constexpr std::size_t kMaxNameLength = 60;
inline constexpr std::uint32_t kUsePacketSource = 0xFFFFFFFFu;
inline constexpr std::uint16_t kSearchPort = 5064;

enum class ReplyFlag : std::uint16_t { DontReply = 5, DoReply = 10 };

enum class WireErrorKind { NameTooLong, InvalidName, InvalidField, Truncated, MisalignedPayload, UnknownKind };

inline const char* to_string(WireErrorKind k) {
    switch (k) {
        case WireErrorKind::NameTooLong: return "NameTooLong";
        case WireErrorKind::InvalidName: return "InvalidName";
        case WireErrorKind::InvalidField: return "InvalidField";
        case WireErrorKind::Truncated: return "Truncated";
        case WireErrorKind::MisalignedPayload: return "MisalignedPayload";
        case WireErrorKind::UnknownKind: return "UnknownKind";
    }
    return "?";
}

class WireError : public std::runtime_error {
public:
    WireError(WireErrorKind kind, const std::string& detail)
        : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}
    WireErrorKind kind() const { return kind_; }

private:
    WireErrorKind kind_;
};

struct CaHeader {
    std::uint16_t command = 0;
    std::uint16_t payload_size = 0;
    std::uint16_t data_type = 0;
    std::uint16_t data_count = 0;
    std::uint32_t param1 = 0;
    std::uint32_t param2 = 0;

    bool operator==(const CaHeader&) const = default;
};

struct VersionMessage {
    std::uint16_t priority = 0;
    std::uint16_t minor_version = kDefaultMinorVersion;

    bool operator==(const VersionMessage&) const = default;
};

struct SearchRequest {
    std::string pv_name;
    std::uint32_t search_id = 0;
    ReplyFlag reply_flag = ReplyFlag::DontReply;
    std::uint16_t minor_version = kDefaultMinorVersion;

    bool operator==(const SearchRequest&) const = default;
};

struct SearchResponse {
    std::uint16_t server_port = 0;
    std::uint32_t search_id = 0;
    std::uint16_t server_minor_version = kDefaultMinorVersion;
    /// nullopt means "connect to the datagram's source address".
    std::optional<Ipv4Address> server_address;

    bool operator==(const SearchResponse&) const = default;
};

/// Any message this codec does not interpret; kept intact.
struct UnknownMessage {
    CaHeader header;
    Bytes payload;

    bool operator==(const UnknownMessage&) const = default;
};

using CaMessage = std::variant<VersionMessage, SearchRequest, SearchResponse, UnknownMessage>;

inline std::size_t padded_size(std::size_t n) { return (n + 7) / 8 * 8; }

inline void put_header(Bytes& out, const CaHeader& h) {
    put_u16(out, h.command);
    put_u16(out, h.payload_size);
    put_u16(out, h.data_type);
    put_u16(out, h.data_count);
    put_u32(out, h.param1);
    put_u32(out, h.param2);
}

inline CaHeader get_header(ByteView b, std::size_t at) {
    return {get_u16(b, at),     get_u16(b, at + 2), get_u16(b, at + 4),
            get_u16(b, at + 6), get_u32(b, at + 8), get_u32(b, at + 12)};
}

inline void put_version(Bytes& out, std::uint16_t minor_version) {
    put_header(out, CaHeader{kCmdVersion, 0, 0, minor_version, 0, 0});
}

inline void validate_name(const std::string& name) {
    if (name.empty() || name.find('\0') != std::string::npos) {
        throw WireError(WireErrorKind::InvalidName, "PV name must be nonempty and contain no NUL");
    }
    if (name.size() > kMaxNameLength) {
        throw WireError(WireErrorKind::NameTooLong,
                        std::to_string(name.size()) + " characters, limit 60");
    }
}

inline Bytes encode_search_datagram(const SearchRequest& req) {
    validate_name(req.pv_name);
    const auto payload = padded_size(req.pv_name.size() + 1);
    Bytes out;
    out.reserve(2 * kHeaderSize + payload);
    put_version(out, req.minor_version);
    put_header(out, CaHeader{kCmdSearch, static_cast<std::uint16_t>(payload),
                             static_cast<std::uint16_t>(req.reply_flag), req.minor_version,
                             req.search_id, req.search_id});
    out.insert(out.end(), req.pv_name.begin(), req.pv_name.end());
    out.resize(2 * kHeaderSize + payload, 0);
    return out;
}

inline Bytes encode_search_response_datagram(const SearchResponse& resp) {
    if (resp.server_minor_version > 0xFF) {
        throw WireError(WireErrorKind::InvalidField, "server minor version above 255");
    }
    Bytes out;
    out.reserve(40);
    put_version(out, resp.server_minor_version);
    const std::uint32_t addr =
        resp.server_address ? resp.server_address->value() : kUsePacketSource;
    put_header(out, CaHeader{kCmdSearch, 8, resp.server_port, 0, addr, resp.search_id});
    put_u16(out, resp.server_minor_version);
    out.resize(40, 0);
    return out;
}

namespace detail {

inline CaMessage classify(const CaHeader& h, ByteView payload) {
    if (h.command == kCmdVersion && h.payload_size == 0) {
        return VersionMessage{h.data_type, h.data_count};
    }
    if (h.command == kCmdSearch && !payload.empty()) {
        if (payload[0] == 0) {
            if (payload.size() == 8) {
                SearchResponse r;
                r.server_port = h.data_type;
                r.search_id = h.param2;
                r.server_minor_version = get_u16(payload, 0);
                if (h.param1 != kUsePacketSource) r.server_address = Ipv4Address(h.param1);
                return r;
            }
        } else if (h.param1 == h.param2 &&
                   (h.data_type == static_cast<std::uint16_t>(ReplyFlag::DontReply) ||
                    h.data_type == static_cast<std::uint16_t>(ReplyFlag::DoReply))) {
            std::size_t len = 0;
            while (len < payload.size() && payload[len] != 0) ++len;
            if (len < payload.size() && len <= kMaxNameLength) {
                SearchRequest r;
                r.pv_name.assign(payload.begin(), payload.begin() + static_cast<std::ptrdiff_t>(len));
                r.search_id = h.param1;
                r.reply_flag = static_cast<ReplyFlag>(h.data_type);
                r.minor_version = h.data_count;
                return r;
            }
        }
    }
    return UnknownMessage{h, Bytes(payload.begin(), payload.end())};
}

}  // namespace detail

inline std::vector<CaMessage> decode_datagram(ByteView bytes) {
    std::vector<CaMessage> out;
    std::size_t at = 0;
    while (at < bytes.size()) {
        if (bytes.size() - at < kHeaderSize) {
            throw WireError(WireErrorKind::Truncated,
                            std::to_string(bytes.size() - at) + " trailing bytes at offset " +
                                std::to_string(at));
        }
        const CaHeader h = get_header(bytes, at);
        if (h.payload_size % 8 != 0) {
            throw WireError(WireErrorKind::MisalignedPayload,
                            "payload_size " + std::to_string(h.payload_size));
        }
        at += kHeaderSize;
        if (bytes.size() - at < h.payload_size) {
            throw WireError(WireErrorKind::Truncated,
                            "payload_size " + std::to_string(h.payload_size) + " but " +
                                std::to_string(bytes.size() - at) + " bytes remain");
        }
        out.push_back(detail::classify(h, bytes.subspan(at, h.payload_size)));
        at += h.payload_size;
    }
    return out;
}

/// First search request in a datagram, if any.
inline std::optional<SearchRequest> find_search_request(ByteView datagram) {
    for (auto& m : decode_datagram(datagram)) {
        if (auto* r = std::get_if<SearchRequest>(&m)) return *r;
    }
    return std::nullopt;
}

inline std::optional<SearchResponse> find_search_response(ByteView datagram) {
    for (auto& m : decode_datagram(datagram)) {
        if (auto* r = std::get_if<SearchResponse>(&m)) return *r;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Value exchange.
//
//   u16 frame_length (whole frame)  u8 kind  u8 has_value  u32 sequence
//   u16 name_length  name bytes  [8-byte IEEE-754 double, big-endian]

enum class ValueKind : std::uint8_t { ReadRequest = 1, ReadReply = 2, WriteRequest = 3, WriteAck = 4 };

struct ValueExchange {
    ValueKind kind = ValueKind::ReadRequest;
    std::string pv_name;
    std::optional<double> value;
    std::uint32_t sequence = 0;

    bool operator==(const ValueExchange&) const = default;
};

inline bool kind_carries_value(ValueKind k) {
    return k == ValueKind::ReadReply || k == ValueKind::WriteRequest;
}

inline Bytes encode_value_exchange(const ValueExchange& msg) {
    validate_name(msg.pv_name);
    const bool has_value = kind_carries_value(msg.kind);
    if (has_value != msg.value.has_value()) {
        throw WireError(WireErrorKind::InvalidField, has_value ? "value required" : "unexpected value");
    }
    Bytes out;
    put_u16(out, 0);
    out.push_back(static_cast<std::uint8_t>(msg.kind));
    out.push_back(has_value ? 1 : 0);
    put_u32(out, msg.sequence);
    put_u16(out, static_cast<std::uint16_t>(msg.pv_name.size()));
    out.insert(out.end(), msg.pv_name.begin(), msg.pv_name.end());
    if (has_value) {
        const auto bits = std::bit_cast<std::uint64_t>(*msg.value);
        put_u32(out, static_cast<std::uint32_t>(bits >> 32));
        put_u32(out, static_cast<std::uint32_t>(bits));
    }
    store_u16(out.data(), static_cast<std::uint16_t>(out.size()));
    return out;
}

inline ValueExchange decode_value_exchange(ByteView bytes) {
    constexpr std::size_t kFixed = 10;
    if (bytes.size() < kFixed) {
        throw WireError(WireErrorKind::Truncated, std::to_string(bytes.size()) + " bytes");
    }
    const std::size_t frame = get_u16(bytes, 0);
    if (frame < kFixed || frame > bytes.size()) {
        throw WireError(WireErrorKind::Truncated, "frame length " + std::to_string(frame));
    }
    const auto kind_byte = bytes[2];
    if (kind_byte < 1 || kind_byte > 4) {
        throw WireError(WireErrorKind::UnknownKind, "kind " + std::to_string(kind_byte));
    }
    ValueExchange msg;
    msg.kind = static_cast<ValueKind>(kind_byte);
    const bool has_value = bytes[3] != 0;
    msg.sequence = get_u32(bytes, 4);
    const std::size_t name_len = get_u16(bytes, 8);
    if (frame != kFixed + name_len + (has_value ? 8 : 0)) {
        throw WireError(WireErrorKind::Truncated, "frame length does not match contents");
    }
    msg.pv_name.assign(bytes.begin() + kFixed,
                       bytes.begin() + static_cast<std::ptrdiff_t>(kFixed + name_len));
    if (has_value) {
        const std::uint64_t bits =
            (std::uint64_t{get_u32(bytes, kFixed + name_len)} << 32) | get_u32(bytes, kFixed + name_len + 4);
        msg.value = std::bit_cast<double>(bits);
    }
    return msg;
}

}  // namespace carelay::ca
