#pragma once

// IPv4 + UDP datagram codec (RFC 791 / RFC 768 layout, network byte order).
//
// Packets are plain values. encode() fills in the length and checksum fields
// from the payload and addresses; everything else (identification, TTL,
// DSCP/ECN, flags) is serialized as given. PacketEncoder hands out fresh
// identification values for packets the relay builds itself.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "carelay/address.hpp"
#include "carelay/bytes.hpp"

namespace carelay {

inline constexpr std::size_t kIpv4HeaderSize = 20;
inline constexpr std::size_t kUdpHeaderSize = 8;
inline constexpr std::size_t kMaxUdpPayload = 65507;
inline constexpr std::uint8_t kProtocolUdp = 17;
inline constexpr std::uint8_t kDefaultTtl = 64;

/// Internet checksum: ones' complement of the ones'-complement sum of
/// big-endian 16-bit words. An odd trailing byte is padded with zero.
inline std::uint16_t checksum16(ByteView data) {
    std::uint32_t sum = 0;
    std::size_t i = 0;
    for (; i + 1 < data.size(); i += 2) {
        sum += static_cast<std::uint32_t>((data[i] << 8) | data[i + 1]);
    }
    if (i < data.size()) {
        sum += static_cast<std::uint32_t>(data[i] << 8);
    }
    while (sum >> 16) {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    return static_cast<std::uint16_t>(~sum);
}

enum class PacketErrorKind {
    PayloadTooLarge,
    Truncated,
    NotIpv4,
    NotUdp,
    BadIpChecksum,
    BadUdpChecksum,
    OptionsUnsupported,
    LengthMismatch,
};

inline const char* to_string(PacketErrorKind k) {
    switch (k) {
        case PacketErrorKind::PayloadTooLarge: return "PayloadTooLarge";
        case PacketErrorKind::Truncated: return "Truncated";
        case PacketErrorKind::NotIpv4: return "NotIpv4";
        case PacketErrorKind::NotUdp: return "NotUdp";
        case PacketErrorKind::BadIpChecksum: return "BadIpChecksum";
        case PacketErrorKind::BadUdpChecksum: return "BadUdpChecksum";
        case PacketErrorKind::OptionsUnsupported: return "OptionsUnsupported";
        case PacketErrorKind::LengthMismatch: return "LengthMismatch";
    }
    return "?";
}

class PacketError : public std::runtime_error {
public:
    PacketError(PacketErrorKind kind, const std::string& detail)
        : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}
    PacketErrorKind kind() const { return kind_; }

private:
    PacketErrorKind kind_;
};

struct Ipv4UdpPacket {
    std::uint8_t version = 4;
    std::uint8_t header_length_words = 5;
    std::uint8_t dscp_ecn = 0;
    std::uint16_t total_length = 0;
    std::uint16_t identification = 0;
    std::uint16_t flags_fragment = 0;
    std::uint8_t ttl = kDefaultTtl;
    std::uint8_t protocol = kProtocolUdp;
    std::uint16_t header_checksum = 0;
    Ipv4Address src_ip;
    Ipv4Address dst_ip;
    std::uint16_t src_port = 0;
    std::uint16_t dst_port = 0;
    std::uint16_t udp_length = 0;
    std::uint16_t udp_checksum = 0;
    Bytes payload;

    SocketAddress source() const { return {src_ip, src_port}; }
    SocketAddress destination() const { return {dst_ip, dst_port}; }

    bool operator==(const Ipv4UdpPacket&) const = default;
};

namespace detail {

inline void write_ip_header(std::uint8_t* h, const Ipv4UdpPacket& p) {
    h[0] = static_cast<std::uint8_t>((p.version << 4) | (p.header_length_words & 0x0F));
    h[1] = p.dscp_ecn;
    store_u16(h + 2, p.total_length);
    store_u16(h + 4, p.identification);
    store_u16(h + 6, p.flags_fragment);
    h[8] = p.ttl;
    h[9] = p.protocol;
    store_u16(h + 10, p.header_checksum);
    store_u16(h + 12, static_cast<std::uint16_t>(p.src_ip.value() >> 16));
    store_u16(h + 14, static_cast<std::uint16_t>(p.src_ip.value()));
    store_u16(h + 16, static_cast<std::uint16_t>(p.dst_ip.value() >> 16));
    store_u16(h + 18, static_cast<std::uint16_t>(p.dst_ip.value()));
}

// Ones'-complement checksum over pseudo-header + UDP header + payload, with
// the UDP checksum field taken as `stored`.
inline std::uint16_t udp_sum(Ipv4Address src, Ipv4Address dst, std::uint16_t src_port,
                             std::uint16_t dst_port, std::uint16_t udp_length,
                             std::uint16_t stored, ByteView payload) {
    Bytes buf;
    buf.reserve(12 + kUdpHeaderSize + payload.size());
    put_u32(buf, src.value());
    put_u32(buf, dst.value());
    buf.push_back(0);
    buf.push_back(kProtocolUdp);
    put_u16(buf, udp_length);
    put_u16(buf, src_port);
    put_u16(buf, dst_port);
    put_u16(buf, udp_length);
    put_u16(buf, stored);
    buf.insert(buf.end(), payload.begin(), payload.end());
    return checksum16(buf);
}

}  // namespace detail

/// Fills the length and checksum fields of `p` from its other fields.
inline void finalize(Ipv4UdpPacket& p) {
    if (p.payload.size() > kMaxUdpPayload) {
        throw PacketError(PacketErrorKind::PayloadTooLarge,
                          std::to_string(p.payload.size()) + " bytes");
    }
    p.version = 4;
    p.header_length_words = 5;
    p.protocol = kProtocolUdp;
    p.udp_length = static_cast<std::uint16_t>(kUdpHeaderSize + p.payload.size());
    p.total_length = static_cast<std::uint16_t>(kIpv4HeaderSize + p.udp_length);

    p.header_checksum = 0;
    std::uint8_t header[kIpv4HeaderSize];
    detail::write_ip_header(header, p);
    p.header_checksum = checksum16(header);

    auto sum = detail::udp_sum(p.src_ip, p.dst_ip, p.src_port, p.dst_port, p.udp_length, 0,
                               p.payload);
    p.udp_checksum = sum == 0 ? 0xFFFF : sum;
}

inline Ipv4UdpPacket finalized(Ipv4UdpPacket p) {
    finalize(p);
    return p;
}

inline Bytes encode(const Ipv4UdpPacket& packet) {
    Ipv4UdpPacket p = finalized(packet);
    Bytes out(kIpv4HeaderSize);
    detail::write_ip_header(out.data(), p);
    put_u16(out, p.src_port);
    put_u16(out, p.dst_port);
    put_u16(out, p.udp_length);
    put_u16(out, p.udp_checksum);
    out.insert(out.end(), p.payload.begin(), p.payload.end());
    return out;
}

/// Parses and validates one datagram. Bytes beyond total_length (link-layer
/// padding) are ignored. The header checksum is verified before any other
/// header field is trusted.
inline Ipv4UdpPacket decode(ByteView bytes) {
    if (bytes.size() < kIpv4HeaderSize + kUdpHeaderSize) {
        throw PacketError(PacketErrorKind::Truncated,
                          std::to_string(bytes.size()) + " bytes, need at least 28");
    }
    const std::size_t ihl = bytes[0] & 0x0F;
    const std::size_t header_len = std::max<std::size_t>(ihl, 5) * 4;
    if (bytes.size() < header_len) {
        throw PacketError(PacketErrorKind::Truncated, "header claims " +
                                                          std::to_string(header_len) + " bytes");
    }
    if (checksum16(bytes.first(header_len)) != 0) {
        throw PacketError(PacketErrorKind::BadIpChecksum, "header checksum mismatch");
    }

    Ipv4UdpPacket p;
    p.version = bytes[0] >> 4;
    p.header_length_words = static_cast<std::uint8_t>(ihl);
    if (p.version != 4 || ihl < 5) {
        throw PacketError(PacketErrorKind::NotIpv4, "version " + std::to_string(p.version) +
                                                        ", ihl " + std::to_string(ihl));
    }
    if (ihl > 5) {
        throw PacketError(PacketErrorKind::OptionsUnsupported,
                          "ihl " + std::to_string(ihl));
    }
    p.dscp_ecn = bytes[1];
    p.total_length = get_u16(bytes, 2);
    p.identification = get_u16(bytes, 4);
    p.flags_fragment = get_u16(bytes, 6);
    p.ttl = bytes[8];
    p.protocol = bytes[9];
    p.header_checksum = get_u16(bytes, 10);
    p.src_ip = Ipv4Address(get_u32(bytes, 12));
    p.dst_ip = Ipv4Address(get_u32(bytes, 16));

    if (p.protocol != kProtocolUdp) {
        throw PacketError(PacketErrorKind::NotUdp, "protocol " + std::to_string(p.protocol));
    }
    if (p.total_length > bytes.size()) {
        throw PacketError(PacketErrorKind::Truncated,
                          "total_length " + std::to_string(p.total_length) + " exceeds " +
                              std::to_string(bytes.size()) + " bytes");
    }
    if (p.total_length < kIpv4HeaderSize + kUdpHeaderSize) {
        throw PacketError(PacketErrorKind::LengthMismatch,
                          "total_length " + std::to_string(p.total_length));
    }

    auto udp = bytes.subspan(kIpv4HeaderSize, p.total_length - kIpv4HeaderSize);
    p.src_port = get_u16(udp, 0);
    p.dst_port = get_u16(udp, 2);
    p.udp_length = get_u16(udp, 4);
    p.udp_checksum = get_u16(udp, 6);
    if (p.udp_length != udp.size()) {
        throw PacketError(PacketErrorKind::LengthMismatch,
                          "udp_length " + std::to_string(p.udp_length) + " vs " +
                              std::to_string(udp.size()) + " bytes after IP header");
    }
    auto payload = udp.subspan(kUdpHeaderSize);
    if (p.udp_checksum != 0 &&
        detail::udp_sum(p.src_ip, p.dst_ip, p.src_port, p.dst_port, p.udp_length,
                        p.udp_checksum, payload) != 0) {
        throw PacketError(PacketErrorKind::BadUdpChecksum, "udp checksum mismatch");
    }
    p.payload.assign(payload.begin(), payload.end());
    return p;
}

/// Builds packets with conventional defaults (TTL 64, DF clear, DSCP 0) and an
/// identification counter starting at 1. Safe to share between threads.
class PacketEncoder {
public:
    Ipv4UdpPacket make(SocketAddress src, SocketAddress dst, Bytes payload) {
        Ipv4UdpPacket p;
        p.src_ip = src.ip;
        p.src_port = src.port;
        p.dst_ip = dst.ip;
        p.dst_port = dst.port;
        p.payload = std::move(payload);
        restamp(p);
        return p;
    }

    /// Fresh identification, default TTL/DSCP/flags, recomputed lengths and checksums.
    void restamp(Ipv4UdpPacket& p) {
        p.identification = next_identification();
        p.ttl = kDefaultTtl;
        p.dscp_ecn = 0;
        p.flags_fragment = 0;
        finalize(p);
    }

    std::uint16_t next_identification() {
        return static_cast<std::uint16_t>(next_id_.fetch_add(1, std::memory_order_relaxed));
    }

private:
    std::atomic<std::uint32_t> next_id_{1};
};

}  // namespace carelay
