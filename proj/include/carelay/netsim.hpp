#pragma once

// Deterministic in-process IPv4 network.
//
// Hosts sit in broadcast domains (one per subnet). A switch joins the domains:
// it routes unicast between them, keeps broadcasts inside the sender's domain
// and, where a helper rule is configured, turns a broadcast on a given UDP
// port into unicast copies toward fixed servers.
//
// Delivery rules, applied when a packet is injected:
//   1. Broadcast (directed for the sender's subnet, or 255.255.255.255):
//      every host in the domain, every socket bound to the port, including
//      the sender's own sockets (loopback, no hop).
//   2. Matching helper rules add unicast copies whose destination address is
//      rewritten; source and payload are untouched.
//   3. A unicast arriving from another host passes the host's prerouting
//      rules (first match wins). A rewrite to 255.255.255.255 hands the
//      packet to every local socket on the new port but never puts it back on
//      the wire. Without a rewrite only the most recently bound socket on the
//      port receives it.
//   4. Each hop between distinct hosts costs hop_delay plus uniform jitter in
//      [0, jitter] drawn from a seeded generator; loopback is free.
//
// Everything runs on one virtual clock. Events due at the same instant fire in
// the order they were scheduled.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <optional>
#include <queue>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "carelay/address.hpp"
#include "carelay/packet.hpp"

namespace carelay::sim {

using Micros = std::chrono::microseconds;
using HostId = std::size_t;
using DomainId = std::size_t;
using EndpointId = std::uint32_t;

inline constexpr std::uint8_t kStreamProtocol = 6;
inline constexpr int kMaxForwardingHops = 16;

enum class NetErrorKind { UnknownHost, NoRoute, InvalidTopology, PortInUse, InvalidTime };

inline const char* to_string(NetErrorKind k) {
    switch (k) {
        case NetErrorKind::UnknownHost: return "UnknownHost";
        case NetErrorKind::NoRoute: return "NoRoute";
        case NetErrorKind::InvalidTopology: return "InvalidTopology";
        case NetErrorKind::PortInUse: return "PortInUse";
        case NetErrorKind::InvalidTime: return "InvalidTime";
    }
    return "?";
}

class NetError : public std::runtime_error {
public:
    NetError(NetErrorKind kind, const std::string& detail)
        : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}
    NetErrorKind kind() const { return kind_; }

private:
    NetErrorKind kind_;
};

struct Interface {
    Ipv4Address ip;
    Cidr subnet;
};

struct PreroutingRule {
    std::uint16_t match_dst_port = 0;
    /// Rule applies only to sources outside this prefix.
    std::optional<Cidr> negate_src;
    /// 255.255.255.255 means deliver to all local sockets on new_dst_port.
    Ipv4Address new_dst_ip;
    std::uint16_t new_dst_port = 0;

    bool rewrites_to_broadcast() const { return new_dst_ip.is_limited_broadcast(); }

    bool matches(const Ipv4UdpPacket& p) const {
        if (p.dst_port != match_dst_port) return false;
        return !negate_src || !negate_src->contains(p.src_ip);
    }
};

struct HelperRule {
    DomainId domain = 0;
    std::uint16_t udp_port = 0;
    std::vector<Ipv4Address> destinations;
};

struct SocketBinding {
    HostId host = 0;
    std::uint16_t port = 0;
    EndpointId owner = 0;
    std::uint64_t bind_sequence = 0;

    bool operator==(const SocketBinding&) const = default;
};

struct LinkModel {
    Micros hop_delay{200};
    Micros jitter{0};
    std::uint64_t seed = 1;
};

enum class DeliveryKind { Datagram, Stream };

struct Delivery {
    Micros time{0};
    DeliveryKind kind = DeliveryKind::Datagram;
    HostId host = 0;
    EndpointId owner = 0;
    std::uint64_t bind_sequence = 0;
    /// Identifies one packet arriving at one host; shared by all sockets that
    /// received a copy of that arrival.
    std::uint64_t arrival = 0;
    /// Destination as seen on the wire, before any prerouting rewrite.
    SocketAddress wire_destination;
    /// Packet as handed to the socket (destination possibly rewritten).
    Ipv4UdpPacket packet;
    int hops = 0;
};

struct Injection {
    Micros time{0};
    std::optional<HostId> from;
    Ipv4UdpPacket packet;
};

class Network {
public:
    using Handler = std::function<void(const Delivery&)>;

    explicit Network(LinkModel link = {}) : link_(link), rng_(link.seed) {}

    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;

    // -- topology ---------------------------------------------------------

    DomainId add_domain(Cidr subnet) {
        for (auto& d : domains_) {
            if (d == subnet) {
                throw NetError(NetErrorKind::InvalidTopology, "duplicate domain " + subnet.to_string());
            }
        }
        domains_.push_back(subnet);
        return domains_.size() - 1;
    }

    HostId add_host(std::string name, std::vector<Interface> interfaces) {
        if (interfaces.empty()) {
            throw NetError(NetErrorKind::InvalidTopology, "host " + name + " has no interface");
        }
        std::vector<DomainId> seen;
        for (auto& itf : interfaces) {
            if (!itf.subnet.contains(itf.ip)) {
                throw NetError(NetErrorKind::InvalidTopology,
                               itf.ip.to_string() + " outside " + itf.subnet.to_string());
            }
            if (host_by_ip_.count(itf.ip)) {
                throw NetError(NetErrorKind::InvalidTopology,
                               "duplicate interface address " + itf.ip.to_string());
            }
            auto d = domain_of_subnet(itf.subnet);
            if (!d) {
                throw NetError(NetErrorKind::InvalidTopology,
                               "no domain for subnet " + itf.subnet.to_string());
            }
            if (std::find(seen.begin(), seen.end(), *d) != seen.end()) {
                throw NetError(NetErrorKind::InvalidTopology,
                               "host " + name + " has two interfaces in " + itf.subnet.to_string());
            }
            seen.push_back(*d);
        }
        const HostId id = hosts_.size();
        for (auto& itf : interfaces) host_by_ip_[itf.ip] = id;
        hosts_.push_back(Host{std::move(name), std::move(interfaces), {}, {}, {}, 0});
        return id;
    }

    void add_prerouting_rule(HostId host, PreroutingRule rule) {
        host_ref(host).prerouting.push_back(rule);
    }

    void add_helper_rule(HelperRule rule) {
        if (rule.domain >= domains_.size()) {
            throw NetError(NetErrorKind::InvalidTopology, "helper rule for unknown domain");
        }
        if (rule.destinations.empty()) {
            throw NetError(NetErrorKind::InvalidTopology, "helper rule without destinations");
        }
        helpers_.push_back(std::move(rule));
    }

    std::optional<DomainId> domain_of_subnet(const Cidr& subnet) const {
        for (DomainId d = 0; d < domains_.size(); ++d) {
            if (domains_[d] == subnet) return d;
        }
        return std::nullopt;
    }

    std::optional<HostId> find_host(std::string_view name) const {
        for (HostId h = 0; h < hosts_.size(); ++h) {
            if (hosts_[h].name == name) return h;
        }
        return std::nullopt;
    }

    std::optional<HostId> host_with_ip(Ipv4Address ip) const {
        auto it = host_by_ip_.find(ip);
        if (it == host_by_ip_.end()) return std::nullopt;
        return it->second;
    }

    const std::string& host_name(HostId h) const { return host_ref(h).name; }
    Ipv4Address primary_ip(HostId h) const { return host_ref(h).interfaces.front().ip; }
    const std::vector<Interface>& interfaces(HostId h) const { return host_ref(h).interfaces; }
    std::size_t host_count() const { return hosts_.size(); }
    const std::vector<Cidr>& domains() const { return domains_; }
    const LinkModel& link() const { return link_; }

    // -- sockets ----------------------------------------------------------

    EndpointId new_endpoint(Handler handler = {}) {
        const EndpointId id = static_cast<EndpointId>(handlers_.size() + 1);
        handlers_.push_back(std::move(handler));
        return id;
    }

    void set_handler(EndpointId owner, Handler handler) { handlers_.at(owner - 1) = std::move(handler); }

    /// Several sockets may share a port; bind order is remembered per host.
    SocketBinding bind(HostId host, std::uint16_t port, EndpointId owner) {
        if (host >= hosts_.size()) {
            throw NetError(NetErrorKind::UnknownHost, "host id " + std::to_string(host));
        }
        auto& h = hosts_[host];
        SocketBinding b{host, port, owner, ++h.bind_counter};
        h.bindings.push_back(b);
        return b;
    }

    SocketBinding bind(std::string_view host_name, std::uint16_t port, EndpointId owner) {
        auto h = find_host(host_name);
        if (!h) throw NetError(NetErrorKind::UnknownHost, std::string(host_name));
        return bind(*h, port, owner);
    }

    void unbind(HostId host, std::uint16_t port, EndpointId owner) {
        auto& b = host_ref(host).bindings;
        std::erase_if(b, [&](const SocketBinding& s) { return s.port == port && s.owner == owner; });
    }

    std::vector<SocketBinding> bindings(HostId host, std::uint16_t port) const {
        std::vector<SocketBinding> out;
        for (auto& b : host_ref(host).bindings) {
            if (b.port == port) out.push_back(b);
        }
        return out;
    }

    bool port_bound(HostId host, std::uint16_t port) const {
        for (auto& b : host_ref(host).bindings) {
            if (b.port == port) return true;
        }
        for (auto& [p, _] : host_ref(host).stream_listeners) {
            if (p == port) return true;
        }
        return false;
    }

    /// Endpoint of the reliable in-order channel that stands in for TCP.
    void listen_stream(HostId host, std::uint16_t port, EndpointId owner) {
        auto& h = host_ref(host);
        if (h.stream_listeners.count(port)) {
            throw NetError(NetErrorKind::PortInUse,
                           h.name + " stream port " + std::to_string(port));
        }
        h.stream_listeners[port] = owner;
    }

    void close_stream(HostId host, std::uint16_t port) { host_ref(host).stream_listeners.erase(port); }

    // -- traffic ----------------------------------------------------------

    Micros now() const { return now_; }

    /// Sends a datagram from `from`. Returns the deliveries it scheduled.
    std::vector<Delivery> inject(HostId from, Ipv4UdpPacket packet, Micros at) {
        host_ref(from);
        return route(std::optional<HostId>{from}, std::move(packet), at);
    }

    /// Sends a datagram from outside any simulated host; the broadcast domain
    /// is the one containing the source address.
    std::vector<Delivery> inject_external(Ipv4UdpPacket packet, Micros at) {
        return route(std::nullopt, std::move(packet), at);
    }

    std::vector<Delivery> inject(HostId from, Ipv4UdpPacket packet) {
        return inject(from, std::move(packet), now_);
    }

    /// Reliable message from `src` (on host `from`) to the stream listener at
    /// `dst`. Returns nullopt when nothing listens there.
    std::optional<Delivery> send_stream(HostId from, SocketAddress src, SocketAddress dst,
                                        Bytes payload, Micros at) {
        check_time(at);
        host_ref(from);
        auto target = host_with_ip(dst.ip);
        if (!target) {
            if (!domain_containing(dst.ip)) throw NetError(NetErrorKind::NoRoute, dst.to_string());
            return std::nullopt;
        }
        auto& h = hosts_[*target];
        auto it = h.stream_listeners.find(dst.port);
        if (it == h.stream_listeners.end()) return std::nullopt;

        Delivery d;
        d.kind = DeliveryKind::Stream;
        d.host = *target;
        d.owner = it->second;
        d.arrival = ++arrival_counter_;
        d.hops = *target == from ? 0 : 1;
        d.time = at + hop_cost(d.hops);
        d.wire_destination = dst;
        d.packet.protocol = kStreamProtocol;
        d.packet.src_ip = src.ip;
        d.packet.src_port = src.port;
        d.packet.dst_ip = dst.ip;
        d.packet.dst_port = dst.port;
        d.packet.payload = std::move(payload);
        schedule_delivery(d);
        return d;
    }

    void schedule(Micros at, std::function<void()> fn) {
        check_time(at);
        push(Event{at, ++event_seq_, std::move(fn)});
    }

    /// Advances the clock by `duration`, firing everything due in the window.
    std::vector<Delivery> advance_clock(Micros duration) {
        const Micros target = now_ + duration;
        std::vector<Delivery> fired;
        while (!queue_.empty() && queue_.top().time <= target) {
            if (auto d = step()) fired.push_back(std::move(*d));
        }
        now_ = target;
        return fired;
    }

    /// Processes events until `done()` holds, the queue drains, or the next
    /// event lies beyond `deadline`. Returns done().
    bool run_until(const std::function<bool()>& done, Micros deadline) {
        while (!done() && !queue_.empty() && queue_.top().time <= deadline) {
            step();
        }
        return done();
    }

    bool idle() const { return queue_.empty(); }
    std::size_t pending() const { return queue_.size(); }

    const std::vector<Delivery>& delivery_log() const { return log_; }
    const std::vector<Injection>& injection_log() const { return injections_; }

    /// tcpdump-like trace: one line per packet arriving at a host.
    std::string trace() const {
        std::ostringstream out;
        std::uint64_t last_arrival = 0;
        for (auto& d : log_) {
            if (d.arrival == last_arrival) continue;
            last_arrival = d.arrival;
            out << format_trace_line(d) << '\n';
        }
        return out.str();
    }

    static std::string format_trace_line(const Delivery& d) {
        std::ostringstream out;
        const auto us = d.time.count();
        out << us / 1000000 << '.' << std::setw(6) << std::setfill('0') << us % 1000000 << " IP "
            << d.packet.src_ip.to_string() << '.' << d.packet.src_port << " > "
            << d.wire_destination.ip.to_string() << '.' << d.wire_destination.port << ": "
            << (d.kind == DeliveryKind::Stream ? "STREAM" : "UDP") << ", length "
            << d.packet.payload.size();
        return out.str();
    }

private:
    struct Host {
        std::string name;
        std::vector<Interface> interfaces;
        std::vector<PreroutingRule> prerouting;
        std::vector<SocketBinding> bindings;
        std::unordered_map<std::uint16_t, EndpointId> stream_listeners;
        std::uint64_t bind_counter = 0;
    };

    struct Event {
        Micros time;
        std::uint64_t seq;
        std::variant<Delivery, std::function<void()>> action;
    };

    struct Later {
        bool operator()(const Event& a, const Event& b) const {
            return a.time != b.time ? a.time > b.time : a.seq > b.seq;
        }
    };

    Host& host_ref(HostId h) {
        if (h >= hosts_.size()) throw NetError(NetErrorKind::UnknownHost, "host id " + std::to_string(h));
        return hosts_[h];
    }
    const Host& host_ref(HostId h) const {
        if (h >= hosts_.size()) throw NetError(NetErrorKind::UnknownHost, "host id " + std::to_string(h));
        return hosts_[h];
    }

    void check_time(Micros at) const {
        if (at < now_) {
            throw NetError(NetErrorKind::InvalidTime, "event scheduled in the past");
        }
    }

    std::optional<DomainId> domain_containing(Ipv4Address ip) const {
        for (DomainId d = 0; d < domains_.size(); ++d) {
            if (domains_[d].contains(ip)) return d;
        }
        return std::nullopt;
    }

    std::optional<DomainId> broadcast_domain(Ipv4Address dst) const {
        for (DomainId d = 0; d < domains_.size(); ++d) {
            if (domains_[d].prefix_len() < 31 && domains_[d].broadcast() == dst) return d;
        }
        return std::nullopt;
    }

    // Domain a broadcast from `from` lands in, or nullopt when it goes nowhere.
    std::optional<DomainId> sender_domain(const std::optional<HostId>& from,
                                          const Ipv4UdpPacket& p) const {
        if (!p.dst_ip.is_limited_broadcast()) {
            auto d = broadcast_domain(p.dst_ip);
            if (!from) return d;
            for (auto& itf : hosts_[*from].interfaces) {
                if (itf.subnet == domains_[*d]) return d;
            }
            return std::nullopt;  // directed broadcast for a foreign subnet is not forwarded
        }
        if (!from) return domain_containing(p.src_ip);
        const auto& itfs = hosts_[*from].interfaces;
        for (auto& itf : itfs) {
            if (itf.subnet.contains(p.src_ip)) return domain_of_subnet(itf.subnet);
        }
        return domain_of_subnet(itfs.front().subnet);
    }

    bool in_domain(HostId h, DomainId d) const {
        for (auto& itf : hosts_[h].interfaces) {
            if (itf.subnet == domains_[d]) return true;
        }
        return false;
    }

    Micros hop_cost(int hops) {
        Micros total{0};
        for (int i = 0; i < hops; ++i) {
            total += link_.hop_delay;
            if (link_.jitter.count() > 0) {
                std::uniform_int_distribution<std::int64_t> dist(0, link_.jitter.count());
                total += Micros{dist(rng_)};
            }
        }
        return total;
    }

    std::vector<Delivery> route(std::optional<HostId> from, Ipv4UdpPacket packet, Micros at) {
        check_time(at);
        injections_.push_back(Injection{at, from, packet});
        std::vector<Delivery> out;
        const bool is_broadcast =
            packet.dst_ip.is_limited_broadcast() || broadcast_domain(packet.dst_ip).has_value();

        if (is_broadcast) {
            auto domain = sender_domain(from, packet);
            if (!domain) return out;
            for (HostId h = 0; h < hosts_.size(); ++h) {
                if (!in_domain(h, *domain)) continue;
                const int hops = (from && *from == h) ? 0 : 1;
                deliver_all(h, packet, packet.dst_port, packet.destination(), at + hop_cost(hops),
                            hops, out);
            }
            for (auto& rule : helpers_) {
                if (rule.domain != *domain || rule.udp_port != packet.dst_port) continue;
                for (auto dest : rule.destinations) {
                    Ipv4UdpPacket copy = packet;
                    copy.dst_ip = dest;
                    finalize(copy);
                    route_unicast(std::nullopt, std::move(copy), at, 0, out);
                }
            }
            return out;
        }
        route_unicast(from, std::move(packet), at, 0, out);
        return out;
    }

    void route_unicast(std::optional<HostId> from, Ipv4UdpPacket packet, Micros at, int hops_so_far,
                       std::vector<Delivery>& out) {
        if (hops_so_far >= kMaxForwardingHops) return;
        auto target = host_with_ip(packet.dst_ip);
        if (!target) {
            if (!domain_containing(packet.dst_ip)) {
                throw NetError(NetErrorKind::NoRoute, packet.dst_ip.to_string());
            }
            return;
        }
        const bool local = from && *from == *target;
        const int hops = hops_so_far + (local ? 0 : 1);
        const Micros arrive = at + hop_cost(local ? 0 : 1);
        const SocketAddress wire = packet.destination();

        if (!local) {
            for (auto& rule : hosts_[*target].prerouting) {
                if (!rule.matches(packet)) continue;
                packet.dst_port = rule.new_dst_port;
                if (rule.rewrites_to_broadcast()) {
                    packet.dst_ip = rule.new_dst_ip;
                    finalize(packet);
                    deliver_all(*target, packet, packet.dst_port, wire, arrive, hops, out);
                    return;
                }
                packet.dst_ip = rule.new_dst_ip;
                finalize(packet);
                if (host_with_ip(packet.dst_ip) != target) {
                    // DNAT to another machine: forwarded on, evaluated there.
                    route_unicast(target, std::move(packet), arrive, hops, out);
                    return;
                }
                break;
            }
        }
        deliver_last_binder(*target, packet, wire, arrive, hops, out);
    }

    void deliver_all(HostId h, const Ipv4UdpPacket& packet, std::uint16_t port, SocketAddress wire,
                     Micros when, int hops, std::vector<Delivery>& out) {
        const auto arrival = ++arrival_counter_;
        for (auto& b : hosts_[h].bindings) {
            if (b.port != port) continue;
            Delivery d{when, DeliveryKind::Datagram, h, b.owner, b.bind_sequence, arrival, wire, packet, hops};
            schedule_delivery(d);
            out.push_back(std::move(d));
        }
    }

    void deliver_last_binder(HostId h, const Ipv4UdpPacket& packet, SocketAddress wire, Micros when,
                             int hops, std::vector<Delivery>& out) {
        const SocketBinding* last = nullptr;
        for (auto& b : hosts_[h].bindings) {
            if (b.port == packet.dst_port && (!last || b.bind_sequence > last->bind_sequence)) last = &b;
        }
        if (!last) return;
        Delivery d{when, DeliveryKind::Datagram, h, last->owner, last->bind_sequence,
                   ++arrival_counter_, wire, packet, hops};
        schedule_delivery(d);
        out.push_back(std::move(d));
    }

    void schedule_delivery(const Delivery& d) { push(Event{d.time, ++event_seq_, d}); }

    void push(Event e) { queue_.push(std::move(e)); }

    std::optional<Delivery> step() {
        Event e = queue_.top();
        queue_.pop();
        now_ = std::max(now_, e.time);
        if (auto* fn = std::get_if<std::function<void()>>(&e.action)) {
            (*fn)();
            return std::nullopt;
        }
        Delivery d = std::get<Delivery>(std::move(e.action));
        if (!still_listening(d)) return std::nullopt;
        log_.push_back(d);
        if (d.owner >= 1 && d.owner <= handlers_.size()) {
            // Copy: the handler may rebind itself or register new endpoints.
            if (auto handler = handlers_[d.owner - 1]) handler(d);
        }
        return d;
    }

    bool still_listening(const Delivery& d) const {
        const auto& h = hosts_[d.host];
        if (d.kind == DeliveryKind::Stream) {
            auto it = h.stream_listeners.find(d.packet.dst_port);
            return it != h.stream_listeners.end() && it->second == d.owner;
        }
        for (auto& b : h.bindings) {
            if (b.owner == d.owner && b.bind_sequence == d.bind_sequence) return true;
        }
        return false;
    }

    LinkModel link_;
    std::mt19937_64 rng_;
    std::vector<Cidr> domains_;
    std::vector<Host> hosts_;
    std::unordered_map<Ipv4Address, HostId> host_by_ip_;
    std::vector<HelperRule> helpers_;
    std::vector<Handler> handlers_;
    std::priority_queue<Event, std::vector<Event>, Later> queue_;
    std::vector<Delivery> log_;
    std::vector<Injection> injections_;
    Micros now_{0};
    std::uint64_t event_seq_ = 0;
    std::uint64_t arrival_counter_ = 0;
};

}  // namespace carelay::sim
