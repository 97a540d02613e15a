#pragma once

// Broadcast relay for name-resolution datagrams.
//
// The relay listens on its own port (6064 by default); a prerouting rule on
// the relay host steers foreign unicast searches on 5064 there. Each accepted
// datagram is sent again as a broadcast on the target port:
//
//   SPOOF       rebuilt IPv4 packet keeping the client's source ip:port, so
//               servers answer the client directly (needs raw sockets on a
//               real host).
//   PROXY       payload sent from a per-client flow socket with the relay's
//               own address; replies on the flow socket go back to the client.
//   FORK_MODEL  PROXY plus a fixed per-packet delay standing in for the cost
//               of spawning a process per request.
//
// RelayEngine holds the decision logic, counters and flow table and returns
// the I/O it wants performed. SimRelay drives it on the virtual network; the
// POSIX transport lives in posix_transport.hpp.

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "carelay/address.hpp"
#include "carelay/netsim.hpp"
#include "carelay/packet.hpp"

namespace carelay::relay {

using Micros = std::chrono::microseconds;
using namespace std::chrono_literals;

enum class Mode { Spoof, Proxy, ForkModel };

inline const char* to_string(Mode m) {
    switch (m) {
        case Mode::Spoof: return "spoof";
        case Mode::Proxy: return "proxy";
        case Mode::ForkModel: return "fork";
    }
    return "?";
}

inline std::optional<Mode> parse_mode(std::string_view s) {
    if (s == "spoof") return Mode::Spoof;
    if (s == "proxy") return Mode::Proxy;
    if (s == "fork" || s == "fork_model") return Mode::ForkModel;
    return std::nullopt;
}

class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string key, const std::string& detail)
        : std::invalid_argument(key + ": " + detail), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

struct RelayConfig {
    std::uint16_t listen_port = 6064;
    std::optional<Ipv4Address> target_broadcast;
    std::uint16_t target_port = 5064;
    /// Empty means every source not excluded by local_subnet.
    std::vector<Cidr> allow_sources;
    std::optional<Cidr> local_subnet;
    Mode mode = Mode::Spoof;
    Micros flow_idle_timeout = 30s;
    Micros fork_cost = 5ms;
    /// 0 disables rate limiting.
    std::uint32_t max_packets_per_second = 0;
    std::uint16_t flow_port_base = 50000;
    std::uint16_t flow_port_count = 10000;

    SocketAddress target() const { return {target_broadcast.value_or(Ipv4Address{}), target_port}; }

    void validate() const {
        if (listen_port == 0) throw ConfigError("listen_port", "must be 1-65535");
        if (target_port == 0) throw ConfigError("target_port", "must be 1-65535");
        if (!target_broadcast) throw ConfigError("target_broadcast", "required");
        if (flow_idle_timeout <= Micros{0}) throw ConfigError("flow_idle_timeout", "must be positive");
        if (fork_cost < Micros{0}) throw ConfigError("fork_cost", "must not be negative");
        if (flow_port_count == 0 || flow_port_base == 0 ||
            std::uint32_t{flow_port_base} + flow_port_count > 65536u) {
            throw ConfigError("flow_port_base", "flow port range outside 1-65535");
        }
    }
};

enum class Verdict { Accept, DropLocalSource, DropNotAllowed, DropPortMismatch };

inline const char* to_string(Verdict v) {
    switch (v) {
        case Verdict::Accept: return "ACCEPT";
        case Verdict::DropLocalSource: return "DROP_LOCAL_SOURCE";
        case Verdict::DropNotAllowed: return "DROP_NOT_ALLOWED";
        case Verdict::DropPortMismatch: return "DROP_PORT_MISMATCH";
    }
    return "?";
}

struct RelayDecision {
    Verdict verdict = Verdict::Accept;
    std::string reason;
};

/// Port, then local source (loop guard), then allowlist.
inline RelayDecision classify(const Ipv4UdpPacket& packet, const RelayConfig& config) {
    if (packet.dst_port != config.listen_port) {
        return {Verdict::DropPortMismatch, "destination port " + std::to_string(packet.dst_port) +
                                               " is not " + std::to_string(config.listen_port)};
    }
    if (config.local_subnet && config.local_subnet->contains(packet.src_ip)) {
        return {Verdict::DropLocalSource,
                packet.src_ip.to_string() + " is inside " + config.local_subnet->to_string()};
    }
    if (!config.allow_sources.empty()) {
        bool allowed = false;
        for (auto& net : config.allow_sources) allowed = allowed || net.contains(packet.src_ip);
        if (!allowed) return {Verdict::DropNotAllowed, packet.src_ip.to_string() + " not in allowlist"};
    }
    return {Verdict::Accept, "accepted"};
}

/// Re-addresses an accepted datagram to the target broadcast while keeping
/// the original source and payload.
inline Ipv4UdpPacket rewrite_spoof(const Ipv4UdpPacket& packet, const RelayConfig& config,
                                   PacketEncoder& encoder) {
    Ipv4UdpPacket out = packet;
    out.dst_ip = config.target().ip;
    out.dst_port = config.target_port;
    encoder.restamp(out);
    return out;
}

inline Ipv4UdpPacket rewrite_spoof(const Ipv4UdpPacket& packet, const RelayConfig& config) {
    static PacketEncoder encoder;
    return rewrite_spoof(packet, config, encoder);
}

struct FlowEntry {
    SocketAddress client;
    std::uint16_t relay_local_port = 0;
    Micros last_activity{0};

    bool operator==(const FlowEntry&) const = default;
};

struct RelayCounters {
    std::uint64_t received = 0;
    std::uint64_t relayed = 0;
    std::uint64_t dropped_local = 0;
    std::uint64_t dropped_not_allowed = 0;
    std::uint64_t dropped_port = 0;
    std::uint64_t dropped_rate_limited = 0;
    std::uint64_t replies_forwarded = 0;

    std::uint64_t dropped() const {
        return dropped_local + dropped_not_allowed + dropped_port + dropped_rate_limited;
    }
    bool conserved() const { return received == relayed + dropped(); }

    bool operator==(const RelayCounters&) const = default;
};

// I/O requested by the engine.

/// Raw packet to put on the wire after `delay` (SPOOF).
struct EmitPacket {
    Ipv4UdpPacket packet;
    Micros delay{0};
};

/// Datagram sent from a flow socket (PROXY / FORK_MODEL).
struct SendFromFlow {
    std::uint16_t local_port = 0;
    SocketAddress to;
    Bytes payload;
    Micros delay{0};
};

/// Reply relayed to a client from the listening socket.
struct SendToClient {
    SocketAddress client;
    Bytes payload;
};

struct OpenFlow {
    std::uint16_t local_port = 0;
};

struct CloseFlow {
    std::uint16_t local_port = 0;
};

using Action = std::variant<EmitPacket, SendFromFlow, SendToClient, OpenFlow, CloseFlow>;

class RelayEngine {
public:
    explicit RelayEngine(RelayConfig config) : config_(std::move(config)) { config_.validate(); }

    const RelayConfig& config() const { return config_; }
    const RelayCounters& counters() const { return counters_; }

    std::vector<FlowEntry> flows() const {
        std::vector<FlowEntry> out;
        for (auto& [port, client] : by_port_) out.push_back(by_client_.at(client));
        return out;
    }
    std::size_t flow_count() const { return by_client_.size(); }

    /// A datagram arrived on the listening socket.
    std::vector<Action> on_listen_datagram(const Ipv4UdpPacket& packet, Micros now) {
        std::vector<Action> actions;
        ++counters_.received;
        const auto decision = classify(packet, config_);
        switch (decision.verdict) {
            case Verdict::DropPortMismatch: ++counters_.dropped_port; return actions;
            case Verdict::DropLocalSource: ++counters_.dropped_local; return actions;
            case Verdict::DropNotAllowed: ++counters_.dropped_not_allowed; return actions;
            case Verdict::Accept: break;
        }
        if (rate_limited(now)) {
            ++counters_.dropped_rate_limited;
            return actions;
        }
        ++counters_.relayed;
        if (config_.mode == Mode::Spoof) {
            actions.push_back(EmitPacket{rewrite_spoof(packet, config_, encoder_), Micros{0}});
            return actions;
        }
        const auto port = flow_for(packet.source(), now, actions);
        const Micros delay = config_.mode == Mode::ForkModel ? config_.fork_cost : Micros{0};
        actions.push_back(SendFromFlow{port, config_.target(), packet.payload, delay});
        return actions;
    }

    /// A datagram arrived on a flow socket; forward it to that flow's client.
    std::vector<Action> on_flow_datagram(std::uint16_t local_port, ByteView payload, Micros now) {
        std::vector<Action> actions;
        auto it = by_port_.find(local_port);
        if (it == by_port_.end()) return actions;
        auto& flow = by_client_.at(it->second);
        flow.last_activity = now;
        ++counters_.replies_forwarded;
        actions.push_back(SendToClient{flow.client, Bytes(payload.begin(), payload.end())});
        return actions;
    }

    /// Drops flows idle for at least flow_idle_timeout.
    std::size_t expire_flows(Micros now, std::vector<Action>* closed = nullptr) {
        std::size_t removed = 0;
        for (auto it = by_port_.begin(); it != by_port_.end();) {
            auto entry = by_client_.find(it->second);
            if (now - entry->second.last_activity >= config_.flow_idle_timeout) {
                if (closed) closed->push_back(CloseFlow{it->first});
                by_client_.erase(entry);
                it = by_port_.erase(it);
                ++removed;
            } else {
                ++it;
            }
        }
        return removed;
    }

    std::optional<Micros> next_expiry() const {
        std::optional<Micros> soonest;
        for (auto& [_, flow] : by_client_) {
            auto t = flow.last_activity + config_.flow_idle_timeout;
            if (!soonest || t < *soonest) soonest = t;
        }
        return soonest;
    }

private:
    std::uint16_t flow_for(SocketAddress client, Micros now, std::vector<Action>& actions) {
        if (auto it = by_client_.find(client); it != by_client_.end()) {
            it->second.last_activity = now;
            return it->second.relay_local_port;
        }
        std::optional<std::uint16_t> port;
        for (std::uint32_t i = 0; i < config_.flow_port_count; ++i) {
            auto candidate = static_cast<std::uint16_t>(config_.flow_port_base + i);
            if (!by_port_.count(candidate)) {
                port = candidate;
                break;
            }
        }
        if (!port) {
            // Table full: recycle the least recently used flow.
            auto victim = by_port_.begin();
            for (auto it = by_port_.begin(); it != by_port_.end(); ++it) {
                if (by_client_.at(it->second).last_activity < by_client_.at(victim->second).last_activity) {
                    victim = it;
                }
            }
            port = victim->first;
            actions.push_back(CloseFlow{*port});
            by_client_.erase(victim->second);
            by_port_.erase(victim);
        }
        by_client_[client] = FlowEntry{client, *port, now};
        by_port_[*port] = client;
        actions.push_back(OpenFlow{*port});
        return *port;
    }

    bool rate_limited(Micros now) {
        if (config_.max_packets_per_second == 0) return false;
        const auto window = now.count() / 1'000'000;
        if (window != rate_window_) {
            rate_window_ = window;
            rate_count_ = 0;
        }
        return ++rate_count_ > config_.max_packets_per_second;
    }

    RelayConfig config_;
    RelayCounters counters_;
    PacketEncoder encoder_;
    std::unordered_map<SocketAddress, FlowEntry> by_client_;
    std::map<std::uint16_t, SocketAddress> by_port_;
    std::int64_t rate_window_ = -1;
    std::uint32_t rate_count_ = 0;
};

/// Runs a RelayEngine on a host of the virtual network.
class SimRelay {
public:
    SimRelay(sim::Network& net, sim::HostId host, RelayConfig config)
        : net_(net), host_(host), engine_(std::move(config)) {
        const auto& cfg = engine_.config();
        if (cfg.listen_port == cfg.target_port) {
            throw ConfigError("target_port", "must differ from listen_port on the relay host");
        }
        listen_id_ = net_.new_endpoint([this](const sim::Delivery& d) { on_listen(d); });
        flow_id_ = net_.new_endpoint([this](const sim::Delivery& d) { on_flow(d); });
        net_.bind(host_, cfg.listen_port, listen_id_);
    }

    SimRelay(const SimRelay&) = delete;
    SimRelay& operator=(const SimRelay&) = delete;

    /// The rule that steers foreign searches on `search_port` to the relay.
    static sim::PreroutingRule steering_rule(Ipv4Address relay_ip, const RelayConfig& cfg,
                                             std::uint16_t search_port = 5064) {
        return sim::PreroutingRule{search_port, cfg.local_subnet, relay_ip, cfg.listen_port};
    }

    void install_steering_rule(std::uint16_t search_port = 5064) {
        net_.add_prerouting_rule(host_, steering_rule(own_ip(), engine_.config(), search_port));
    }

    const RelayEngine& engine() const { return engine_; }
    const RelayCounters& counters() const { return engine_.counters(); }
    std::size_t flow_count() const { return engine_.flow_count(); }
    sim::HostId host() const { return host_; }
    std::uint64_t emitted() const { return emitted_; }

    /// Address used as source for PROXY traffic: the interface facing the target.
    Ipv4Address own_ip() const {
        const auto target = engine_.config().target().ip;
        for (auto& itf : net_.interfaces(host_)) {
            if (itf.subnet.broadcast() == target || itf.subnet.contains(target)) return itf.ip;
        }
        return net_.primary_ip(host_);
    }

private:
    void on_listen(const sim::Delivery& d) {
        if (d.kind != sim::DeliveryKind::Datagram) return;
        perform(engine_.on_listen_datagram(d.packet, net_.now()));
    }

    void on_flow(const sim::Delivery& d) {
        if (d.kind != sim::DeliveryKind::Datagram) return;
        perform(engine_.on_flow_datagram(d.packet.dst_port, d.packet.payload, net_.now()));
    }

    void perform(std::vector<Action> actions) {
        for (auto& action : actions) {
            std::visit([this](auto& a) { apply(a); }, action);
        }
    }

    void emit_later(Micros delay, Ipv4UdpPacket packet) {
        ++emitted_;
        if (delay == Micros{0}) {
            net_.inject(host_, std::move(packet), net_.now());
            return;
        }
        net_.schedule(net_.now() + delay, [this, p = std::move(packet)]() mutable {
            net_.inject(host_, std::move(p), net_.now());
        });
    }

    void apply(EmitPacket& a) { emit_later(a.delay, std::move(a.packet)); }

    void apply(SendFromFlow& a) {
        emit_later(a.delay, encoder_.make({own_ip(), a.local_port}, a.to, std::move(a.payload)));
        arm_expiry();
    }

    void apply(SendToClient& a) {
        net_.inject(host_, encoder_.make({own_ip(), engine_.config().listen_port}, a.client,
                                         std::move(a.payload)),
                    net_.now());
        arm_expiry();
    }

    void apply(OpenFlow& a) { net_.bind(host_, a.local_port, flow_id_); }
    void apply(CloseFlow& a) { net_.unbind(host_, a.local_port, flow_id_); }

    void arm_expiry() {
        auto when = engine_.next_expiry();
        if (!when || (armed_at_ && *armed_at_ <= *when && *armed_at_ >= net_.now())) return;
        armed_at_ = *when;
        net_.schedule(std::max(*when, net_.now()), [this] { sweep(); });
    }

    void sweep() {
        armed_at_.reset();
        std::vector<Action> closed;
        engine_.expire_flows(net_.now(), &closed);
        perform(std::move(closed));
        arm_expiry();
    }

    sim::Network& net_;
    sim::HostId host_;
    RelayEngine engine_;
    PacketEncoder encoder_;
    sim::EndpointId listen_id_ = 0;
    sim::EndpointId flow_id_ = 0;
    std::uint64_t emitted_ = 0;
    std::optional<Micros> armed_at_;
};

}  // namespace carelay::relay
