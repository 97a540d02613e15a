#pragma once

#include <arpa/inet.h>

#include <compare>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace carelay {

class AddressError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// IPv4 address held in host byte order.
class Ipv4Address {
public:
    constexpr Ipv4Address() = default;
    constexpr explicit Ipv4Address(std::uint32_t host_order) : value_(host_order) {}
    constexpr Ipv4Address(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d)
        : value_((std::uint32_t{a} << 24) | (std::uint32_t{b} << 16) | (std::uint32_t{c} << 8) | d) {}

    static Ipv4Address parse(std::string_view text) {
        std::string s(text);
        in_addr addr{};
        if (inet_pton(AF_INET, s.c_str(), &addr) != 1) {
            throw AddressError("invalid IPv4 address: '" + s + "'");
        }
        return Ipv4Address(ntohl(addr.s_addr));
    }

    static constexpr Ipv4Address limited_broadcast() { return Ipv4Address(0xFFFFFFFFu); }
    static constexpr Ipv4Address any() { return Ipv4Address(0u); }

    constexpr std::uint32_t value() const { return value_; }
    constexpr bool is_limited_broadcast() const { return value_ == 0xFFFFFFFFu; }

    std::string to_string() const {
        return std::to_string(value_ >> 24) + "." + std::to_string((value_ >> 16) & 0xFF) + "." +
               std::to_string((value_ >> 8) & 0xFF) + "." + std::to_string(value_ & 0xFF);
    }

    constexpr auto operator<=>(const Ipv4Address&) const = default;

private:
    std::uint32_t value_ = 0;
};

/// IPv4 prefix. The host bits of the base address must be zero.
class Cidr {
public:
    constexpr Cidr() = default;

    Cidr(Ipv4Address base, int prefix_len) : base_(base), prefix_len_(prefix_len) {
        if (prefix_len < 0 || prefix_len > 32) {
            throw AddressError("prefix length out of range: " + std::to_string(prefix_len));
        }
        if ((base.value() & ~mask()) != 0) {
            throw AddressError("host bits set in prefix base " + base.to_string() + "/" +
                               std::to_string(prefix_len));
        }
    }

    /// Prefix covering `ip` with its host bits cleared, e.g. the subnet of an interface address.
    static Cidr of(Ipv4Address ip, int prefix_len) {
        if (prefix_len < 0 || prefix_len > 32) {
            throw AddressError("prefix length out of range: " + std::to_string(prefix_len));
        }
        return Cidr(Ipv4Address(ip.value() & mask_for(prefix_len)), prefix_len);
    }

    static Cidr parse(std::string_view text) {
        auto slash = text.find('/');
        if (slash == std::string_view::npos) {
            throw AddressError("missing '/' in prefix: '" + std::string(text) + "'");
        }
        auto len_text = text.substr(slash + 1);
        if (len_text.empty() || len_text.size() > 2 ||
            len_text.find_first_not_of("0123456789") != std::string_view::npos) {
            throw AddressError("invalid prefix length in '" + std::string(text) + "'");
        }
        return Cidr(Ipv4Address::parse(text.substr(0, slash)), std::stoi(std::string(len_text)));
    }

    constexpr Ipv4Address base() const { return base_; }
    constexpr int prefix_len() const { return prefix_len_; }
    constexpr std::uint32_t mask() const { return mask_for(prefix_len_); }

    constexpr bool contains(Ipv4Address ip) const { return (ip.value() & mask()) == base_.value(); }

    /// Directed broadcast address, e.g. 10.2.1.255 for 10.2.1.0/24.
    constexpr Ipv4Address broadcast() const { return Ipv4Address(base_.value() | ~mask()); }

    std::string to_string() const { return base_.to_string() + "/" + std::to_string(prefix_len_); }

    constexpr auto operator<=>(const Cidr&) const = default;

private:
    static constexpr std::uint32_t mask_for(int len) {
        return len == 0 ? 0u : (0xFFFFFFFFu << (32 - len));
    }

    Ipv4Address base_{};
    int prefix_len_ = 0;
};

inline bool cidr_contains(const Cidr& net, Ipv4Address ip) { return net.contains(ip); }

/// UDP/TCP transport address.
struct SocketAddress {
    Ipv4Address ip;
    std::uint16_t port = 0;

    static SocketAddress parse(std::string_view text) {
        auto colon = text.rfind(':');
        if (colon == std::string_view::npos) {
            throw AddressError("expected IP:PORT, got '" + std::string(text) + "'");
        }
        auto port_text = std::string(text.substr(colon + 1));
        if (port_text.empty() || port_text.size() > 5 ||
            port_text.find_first_not_of("0123456789") != std::string::npos) {
            throw AddressError("invalid port in '" + std::string(text) + "'");
        }
        auto port = std::stoul(port_text);
        if (port == 0 || port > 65535) {
            throw AddressError("port out of range in '" + std::string(text) + "'");
        }
        return {Ipv4Address::parse(text.substr(0, colon)), static_cast<std::uint16_t>(port)};
    }

    std::string to_string() const { return ip.to_string() + ":" + std::to_string(port); }

    auto operator<=>(const SocketAddress&) const = default;
};

}  // namespace carelay

template <>
struct std::hash<carelay::Ipv4Address> {
    std::size_t operator()(carelay::Ipv4Address a) const noexcept {
        return std::hash<std::uint32_t>{}(a.value());
    }
};

template <>
struct std::hash<carelay::SocketAddress> {
    std::size_t operator()(const carelay::SocketAddress& a) const noexcept {
        return std::hash<std::uint64_t>{}((std::uint64_t{a.ip.value()} << 16) | a.port);
    }
};
