#pragma once

// YAML configuration shared by the relay, the simulator and the benchmark.
//
// Top-level sections (all optional):
//
//   scenario: C              # name used in reports
//   arm: SPOOF               # label used in reports
//   repetitions: 1
//   seed: 1
//   network:  {hop_delay: 200us, jitter: 0us}
//   topology:
//     domains: [10.2.1.0/24, ...]
//     hosts:
//       - name: IMX1-HOST1
//         interfaces: [10.2.1.31/24]
//         prerouting:
//           - {match_dst_port: 5064, negate_src: 10.2.1.0/24, to: 255.255.255.255:5064}
//     helpers:
//       - {domain: 10.2.105.0/24, port: 5064, destinations: [10.2.1.31]}
//     iocs:                  # bound in this order
//       - {host: IMX1-HOST1, name: galil, server_port: 5064,
//          advertise_address: false, pvs: [{name: "IMX:DMC4:m1", value: -2.06e-05}]}
//   relay:
//     host: IMX1-HOST1       # simulator only
//     listen_port: 6064
//     target_broadcast: 255.255.255.255
//     target_port: 5064
//     allow: [10.2.105.0/24]
//     deny_local: 10.2.1.0/24
//     mode: spoof | proxy | fork
//     flow_idle_timeout: 30s
//     fork_cost: 5ms
//     max_packets_per_second: 0
//     install_prerouting: true
//     interface: br0         # real SPOOF transport only
//   client:
//     host: TesteRHEpics     # simulator only
//     initial_retry: 30ms
//     backoff_factor: 2
//     max_tries: 5
//     total_timeout: 5s
//     search_destination: 10.2.105.255:5064
//   queries:
//     - {pv: "IMX:DMC4:m1", expect: -2.06e-05}
//     - {pv: NOPE, expect: timeout}
//     - {pv: "IMX:DMC4:m2", put: 1.5}
//   bench:
//     arms: [direct, persistent, fork]
//     repetitions: 100
//     seed: 1
//     fork_cost: 5ms
//     queries: ["IMX:DMC4:m1", IMX1-HOST1, "IMX:DMC4:m3"]
//
// Durations take a unit suffix: us, ms or s. Unknown keys are rejected.

#include <yaml-cpp/yaml.h>

#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "carelay/bench.hpp"

namespace carelay::config {

using Micros = std::chrono::microseconds;

enum class ConfigErrorKind { ParseError, ValidationError };

class ConfigFileError : public std::runtime_error {
public:
    ConfigFileError(ConfigErrorKind kind, std::string key, int line, const std::string& detail)
        : std::runtime_error(format(kind, key, line, detail)), kind_(kind), key_(std::move(key)), line_(line) {}

    ConfigErrorKind kind() const { return kind_; }
    /// Offending key (empty for syntax errors).
    const std::string& key() const { return key_; }
    /// 1-based line, 0 when unknown.
    int line() const { return line_; }

private:
    static std::string format(ConfigErrorKind kind, const std::string& key, int line, const std::string& detail) {
        std::string out = kind == ConfigErrorKind::ParseError ? "ParseError" : "ValidationError";
        if (!key.empty()) out += "(" + key + ")";
        if (line > 0) out += " at line " + std::to_string(line);
        return out + ": " + detail;
    }

    ConfigErrorKind kind_;
    std::string key_;
    int line_;
};

struct RelaySection {
    std::optional<std::string> host;
    relay::RelayConfig config;
    bool install_prerouting = true;
    std::optional<std::string> interface;
};

struct ClientSection {
    std::optional<std::string> host;
    endpoints::ClientQueryConfig query;
    std::optional<SocketAddress> search_destination;
};

struct ConfigFile {
    std::optional<std::string> scenario_name;
    std::optional<std::string> arm;
    std::optional<int> repetitions;
    std::optional<std::uint64_t> seed;
    std::optional<sim::LinkModel> network;
    std::optional<bench::TopologySpec> topology;
    std::vector<bench::IocSpec> iocs;
    std::optional<RelaySection> relay;
    std::optional<ClientSection> client;
    std::vector<bench::QuerySpec> queries;
    std::optional<bench::BenchmarkParams> bench;
};

inline Micros parse_duration(std::string_view text) {
    std::size_t digits = 0;
    while (digits < text.size() && (std::isdigit(static_cast<unsigned char>(text[digits])) || text[digits] == '.')) {
        ++digits;
    }
    if (digits == 0) throw std::invalid_argument("duration needs a number: '" + std::string(text) + "'");
    double amount = 0;
    auto res = std::from_chars(text.data(), text.data() + digits, amount);
    if (res.ec != std::errc{} || res.ptr != text.data() + digits) {
        throw std::invalid_argument("bad duration '" + std::string(text) + "'");
    }
    auto unit = text.substr(digits);
    double scale = 0;
    if (unit == "us") scale = 1;
    else if (unit == "ms") scale = 1e3;
    else if (unit == "s") scale = 1e6;
    else throw std::invalid_argument("duration unit must be us, ms or s: '" + std::string(text) + "'");
    return Micros{static_cast<std::int64_t>(std::llround(amount * scale))};
}

namespace detail {

inline int line_of(const YAML::Node& n) {
    auto m = n.Mark();
    return m.line >= 0 ? m.line + 1 : 0;
}

[[noreturn]] inline void invalid(const std::string& key, const YAML::Node& at, const std::string& why) {
    throw ConfigFileError(ConfigErrorKind::ValidationError, key, line_of(at), why);
}

inline void require_map(const YAML::Node& n, const std::string& key) {
    if (!n.IsMap()) invalid(key, n, "expected a mapping");
}

inline void require_seq(const YAML::Node& n, const std::string& key) {
    if (!n.IsSequence()) invalid(key, n, "expected a list");
}

inline void only_keys(const YAML::Node& map, const std::string& section,
                      std::initializer_list<std::string_view> allowed) {
    require_map(map, section);
    for (auto it = map.begin(); it != map.end(); ++it) {
        const auto key = it->first.as<std::string>();
        bool ok = false;
        for (auto a : allowed) ok = ok || a == key;
        if (!ok) {
            invalid(section.empty() ? key : section + "." + key, it->first, "unknown key");
        }
    }
}

template <typename T>
T scalar(const YAML::Node& n, const std::string& key) {
    if (!n.IsScalar()) invalid(key, n, "expected a scalar");
    try {
        return n.as<T>();
    } catch (const YAML::Exception&) {
        invalid(key, n, "cannot read '" + n.Scalar() + "'");
    }
}

inline std::string text(const YAML::Node& n, const std::string& key) { return scalar<std::string>(n, key); }

inline std::uint16_t port(const YAML::Node& n, const std::string& key) {
    const auto v = scalar<long long>(n, key);
    if (v < 1 || v > 65535) invalid(key, n, "port must be 1-65535, got " + std::to_string(v));
    return static_cast<std::uint16_t>(v);
}

inline Ipv4Address ip(const YAML::Node& n, const std::string& key) {
    try {
        return Ipv4Address::parse(text(n, key));
    } catch (const AddressError& e) {
        invalid(key, n, e.what());
    }
}

inline Cidr cidr(const YAML::Node& n, const std::string& key) {
    try {
        return Cidr::parse(text(n, key));
    } catch (const AddressError& e) {
        invalid(key, n, e.what());
    }
}

inline SocketAddress endpoint(const YAML::Node& n, const std::string& key) {
    try {
        return SocketAddress::parse(text(n, key));
    } catch (const AddressError& e) {
        invalid(key, n, e.what());
    }
}

inline Micros duration(const YAML::Node& n, const std::string& key) {
    try {
        return parse_duration(text(n, key));
    } catch (const std::invalid_argument& e) {
        invalid(key, n, e.what());
    }
}

/// Interface as "ip/len": address plus the subnet it sits in.
inline sim::Interface interface(const YAML::Node& n, const std::string& key) {
    auto s = text(n, key);
    auto slash = s.find('/');
    if (slash == std::string::npos) invalid(key, n, "interface must be IP/PREFIX");
    try {
        auto addr = Ipv4Address::parse(s.substr(0, slash));
        auto len = Cidr::parse("0.0.0.0/" + s.substr(slash + 1)).prefix_len();
        return {addr, Cidr::of(addr, len)};
    } catch (const AddressError& e) {
        invalid(key, n, e.what());
    }
}

inline sim::LinkModel parse_network(const YAML::Node& n) {
    only_keys(n, "network", {"hop_delay", "jitter"});
    sim::LinkModel link;
    if (n["hop_delay"]) link.hop_delay = duration(n["hop_delay"], "network.hop_delay");
    if (n["jitter"]) link.jitter = duration(n["jitter"], "network.jitter");
    if (link.hop_delay < Micros{0}) invalid("network.hop_delay", n["hop_delay"], "must not be negative");
    if (link.jitter < Micros{0}) invalid("network.jitter", n["jitter"], "must not be negative");
    return link;
}

inline sim::PreroutingRule parse_prerouting(const YAML::Node& n, const std::string& key) {
    only_keys(n, key, {"match_dst_port", "negate_src", "to"});
    if (!n["match_dst_port"]) invalid(key + ".match_dst_port", n, "required");
    if (!n["to"]) invalid(key + ".to", n, "required");
    sim::PreroutingRule r;
    r.match_dst_port = port(n["match_dst_port"], key + ".match_dst_port");
    if (n["negate_src"]) r.negate_src = cidr(n["negate_src"], key + ".negate_src");
    auto to = endpoint(n["to"], key + ".to");
    r.new_dst_ip = to.ip;
    r.new_dst_port = to.port;
    return r;
}

inline void parse_topology(const YAML::Node& n, ConfigFile& cfg) {
    only_keys(n, "topology", {"domains", "hosts", "helpers", "iocs"});
    bench::TopologySpec t;
    if (n["domains"]) {
        require_seq(n["domains"], "topology.domains");
        for (auto d : n["domains"]) t.domains.push_back(cidr(d, "topology.domains"));
    }
    if (n["hosts"]) {
        require_seq(n["hosts"], "topology.hosts");
        for (auto h : n["hosts"]) {
            only_keys(h, "topology.hosts", {"name", "interfaces", "prerouting"});
            if (!h["name"]) invalid("topology.hosts.name", h, "required");
            if (!h["interfaces"]) invalid("topology.hosts.interfaces", h, "required");
            bench::HostSpec host;
            host.name = text(h["name"], "topology.hosts.name");
            require_seq(h["interfaces"], "topology.hosts.interfaces");
            for (auto i : h["interfaces"]) host.interfaces.push_back(interface(i, "topology.hosts.interfaces"));
            if (host.interfaces.empty()) invalid("topology.hosts.interfaces", h["interfaces"], "empty");
            if (h["prerouting"]) {
                require_seq(h["prerouting"], "topology.hosts.prerouting");
                for (auto r : h["prerouting"]) host.prerouting.push_back(parse_prerouting(r, "topology.hosts.prerouting"));
            }
            t.hosts.push_back(std::move(host));
        }
    }
    if (n["helpers"]) {
        require_seq(n["helpers"], "topology.helpers");
        for (auto h : n["helpers"]) {
            only_keys(h, "topology.helpers", {"domain", "port", "destinations"});
            if (!h["domain"]) invalid("topology.helpers.domain", h, "required");
            if (!h["destinations"]) invalid("topology.helpers.destinations", h, "required");
            bench::HelperSpec helper;
            helper.domain = cidr(h["domain"], "topology.helpers.domain");
            if (h["port"]) helper.udp_port = port(h["port"], "topology.helpers.port");
            require_seq(h["destinations"], "topology.helpers.destinations");
            for (auto d : h["destinations"]) helper.destinations.push_back(ip(d, "topology.helpers.destinations"));
            if (helper.destinations.empty()) invalid("topology.helpers.destinations", h["destinations"], "empty");
            t.helpers.push_back(std::move(helper));
        }
    }
    if (n["iocs"]) {
        require_seq(n["iocs"], "topology.iocs");
        for (auto i : n["iocs"]) {
            only_keys(i, "topology.iocs", {"host", "name", "server_port", "advertise_address", "pvs"});
            if (!i["host"]) invalid("topology.iocs.host", i, "required");
            if (!i["pvs"]) invalid("topology.iocs.pvs", i, "required");
            bench::IocSpec ioc;
            ioc.host = text(i["host"], "topology.iocs.host");
            ioc.options.name = i["name"] ? text(i["name"], "topology.iocs.name") : ioc.host;
            if (i["server_port"]) ioc.options.server_port = port(i["server_port"], "topology.iocs.server_port");
            if (i["advertise_address"]) {
                ioc.options.advertise_address = scalar<bool>(i["advertise_address"], "topology.iocs.advertise_address");
            }
            require_seq(i["pvs"], "topology.iocs.pvs");
            for (auto pv : i["pvs"]) {
                only_keys(pv, "topology.iocs.pvs", {"name", "value"});
                if (!pv["name"]) invalid("topology.iocs.pvs.name", pv, "required");
                endpoints::PvRecord rec;
                rec.name = text(pv["name"], "topology.iocs.pvs.name");
                if (pv["value"]) rec.value = scalar<double>(pv["value"], "topology.iocs.pvs.value");
                try {
                    ca::validate_name(rec.name);
                } catch (const ca::WireError& e) {
                    invalid("topology.iocs.pvs.name", pv["name"], e.what());
                }
                for (auto& other : ioc.options.pvs) {
                    if (other.name == rec.name) invalid("topology.iocs.pvs.name", pv["name"], "duplicate PV " + rec.name);
                }
                ioc.options.pvs.push_back(std::move(rec));
            }
            cfg.iocs.push_back(std::move(ioc));
        }
    }
    cfg.topology = std::move(t);
}

inline RelaySection parse_relay(const YAML::Node& n) {
    only_keys(n, "relay", {"host", "listen_port", "target_broadcast", "target_port", "allow", "deny_local",
                           "mode", "flow_idle_timeout", "fork_cost", "max_packets_per_second",
                           "install_prerouting", "interface"});
    RelaySection r;
    auto& c = r.config;
    if (n["host"]) r.host = text(n["host"], "relay.host");
    if (n["listen_port"]) c.listen_port = port(n["listen_port"], "relay.listen_port");
    if (n["target_broadcast"]) c.target_broadcast = ip(n["target_broadcast"], "relay.target_broadcast");
    if (n["target_port"]) c.target_port = port(n["target_port"], "relay.target_port");
    if (n["allow"]) {
        require_seq(n["allow"], "relay.allow");
        for (auto a : n["allow"]) c.allow_sources.push_back(cidr(a, "relay.allow"));
    }
    if (n["deny_local"]) c.local_subnet = cidr(n["deny_local"], "relay.deny_local");
    if (n["mode"]) {
        auto m = relay::parse_mode(text(n["mode"], "relay.mode"));
        if (!m) invalid("relay.mode", n["mode"], "expected spoof, proxy or fork");
        c.mode = *m;
    }
    if (n["flow_idle_timeout"]) c.flow_idle_timeout = duration(n["flow_idle_timeout"], "relay.flow_idle_timeout");
    if (n["fork_cost"]) c.fork_cost = duration(n["fork_cost"], "relay.fork_cost");
    if (n["max_packets_per_second"]) {
        auto v = scalar<long long>(n["max_packets_per_second"], "relay.max_packets_per_second");
        if (v < 0) invalid("relay.max_packets_per_second", n["max_packets_per_second"], "must not be negative");
        c.max_packets_per_second = static_cast<std::uint32_t>(v);
    }
    if (n["install_prerouting"]) r.install_prerouting = scalar<bool>(n["install_prerouting"], "relay.install_prerouting");
    if (n["interface"]) r.interface = text(n["interface"], "relay.interface");
    return r;
}

inline ClientSection parse_client(const YAML::Node& n) {
    only_keys(n, "client", {"host", "initial_retry", "backoff_factor", "max_tries", "total_timeout",
                            "search_destination"});
    ClientSection c;
    if (n["host"]) c.host = text(n["host"], "client.host");
    if (n["initial_retry"]) c.query.initial_retry = duration(n["initial_retry"], "client.initial_retry");
    if (n["backoff_factor"]) c.query.backoff_factor = scalar<double>(n["backoff_factor"], "client.backoff_factor");
    if (n["max_tries"]) c.query.max_tries = scalar<int>(n["max_tries"], "client.max_tries");
    if (n["total_timeout"]) c.query.total_timeout = duration(n["total_timeout"], "client.total_timeout");
    if (n["search_destination"]) c.search_destination = endpoint(n["search_destination"], "client.search_destination");
    try {
        c.query.validate();
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        std::string key = msg.substr(0, msg.find(' '));
        invalid("client." + key, n[key] ? n[key] : n, msg);
    }
    return c;
}

inline std::vector<bench::QuerySpec> parse_queries(const YAML::Node& n) {
    require_seq(n, "queries");
    std::vector<bench::QuerySpec> out;
    for (auto q : n) {
        only_keys(q, "queries", {"pv", "expect", "put"});
        if (!q["pv"]) invalid("queries.pv", q, "required");
        bench::QuerySpec spec;
        spec.pv = text(q["pv"], "queries.pv");
        if (q["put"]) spec.put_value = scalar<double>(q["put"], "queries.put");
        if (q["expect"]) {
            auto e = q["expect"];
            if (e.IsScalar() && e.Scalar() == "timeout") spec.expect = bench::Expectation::timed_out();
            else spec.expect = bench::Expectation::of(scalar<double>(e, "queries.expect"));
        }
        out.push_back(std::move(spec));
    }
    return out;
}

inline bench::BenchmarkParams parse_bench(const YAML::Node& n) {
    only_keys(n, "bench", {"arms", "repetitions", "seed", "fork_cost", "queries"});
    bench::BenchmarkParams p;
    if (n["arms"]) {
        require_seq(n["arms"], "bench.arms");
        p.arms.clear();
        for (auto a : n["arms"]) {
            auto arm = bench::parse_arm(text(a, "bench.arms"));
            if (!arm) invalid("bench.arms", a, "expected direct, persistent or fork");
            p.arms.push_back(*arm);
        }
    }
    if (n["repetitions"]) {
        p.repetitions = scalar<int>(n["repetitions"], "bench.repetitions");
        if (p.repetitions < 30) invalid("bench.repetitions", n["repetitions"], "must be at least 30");
    }
    if (n["seed"]) p.seed = scalar<std::uint64_t>(n["seed"], "bench.seed");
    if (n["fork_cost"]) p.fork_cost = duration(n["fork_cost"], "bench.fork_cost");
    if (n["queries"]) {
        require_seq(n["queries"], "bench.queries");
        p.queries.clear();
        for (auto q : n["queries"]) p.queries.push_back(text(q, "bench.queries"));
    }
    return p;
}

}  // namespace detail

/// Parses and validates a configuration document.
inline ConfigFile parse_config(const std::string& document) {
    YAML::Node root;
    try {
        root = YAML::Load(document);
    } catch (const YAML::ParserException& e) {
        throw ConfigFileError(ConfigErrorKind::ParseError, "", e.mark.line + 1, e.msg);
    }
    ConfigFile cfg;
    if (root.IsNull()) return cfg;
    using namespace detail;
    only_keys(root, "", {"scenario", "arm", "repetitions", "seed", "network", "topology", "relay", "client",
                         "queries", "bench"});
    if (root["scenario"]) cfg.scenario_name = text(root["scenario"], "scenario");
    if (root["arm"]) cfg.arm = text(root["arm"], "arm");
    if (root["repetitions"]) {
        cfg.repetitions = scalar<int>(root["repetitions"], "repetitions");
        if (*cfg.repetitions < 1) invalid("repetitions", root["repetitions"], "must be at least 1");
    }
    if (root["seed"]) cfg.seed = scalar<std::uint64_t>(root["seed"], "seed");
    if (root["network"]) cfg.network = parse_network(root["network"]);
    if (root["topology"]) parse_topology(root["topology"], cfg);
    if (root["relay"]) {
        cfg.relay = parse_relay(root["relay"]);
        try {
            cfg.relay->config.validate();
        } catch (const relay::ConfigError& e) {
            auto node = root["relay"][e.key()];
            invalid("relay." + e.key(), node ? node : root["relay"], e.what());
        }
    }
    if (root["client"]) cfg.client = parse_client(root["client"]);
    if (root["queries"]) cfg.queries = parse_queries(root["queries"]);
    if (root["bench"]) cfg.bench = parse_bench(root["bench"]);
    return cfg;
}

inline ConfigFile load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigFileError(ConfigErrorKind::ParseError, "", 0, "cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

/// Scenario for the simulator; needs topology and client sections.
inline bench::Scenario to_scenario(const ConfigFile& cfg) {
    auto missing = [](const std::string& key) {
        return ConfigFileError(ConfigErrorKind::ValidationError, key, 0, "required for simulation");
    };
    if (!cfg.topology) throw missing("topology");
    if (!cfg.client) throw missing("client");
    if (!cfg.client->host) throw missing("client.host");
    bench::Scenario s;
    s.name = cfg.scenario_name.value_or("custom");
    s.topology = *cfg.topology;
    if (cfg.network) s.topology.link = *cfg.network;
    s.iocs = cfg.iocs;
    if (cfg.relay) {
        if (!cfg.relay->host) throw missing("relay.host");
        s.relay = bench::RelaySpec{*cfg.relay->host, cfg.relay->config, cfg.relay->install_prerouting};
        switch (cfg.relay->config.mode) {
            case relay::Mode::Spoof: s.arm = "SPOOF"; break;
            case relay::Mode::Proxy: s.arm = "PROXY"; break;
            case relay::Mode::ForkModel: s.arm = "FORK_MODEL"; break;
        }
    }
    if (cfg.arm) s.arm = *cfg.arm;
    s.client.host = *cfg.client->host;
    s.client.options.query = cfg.client->query;
    s.client.options.search_destination = cfg.client->search_destination;
    s.queries = cfg.queries;
    s.repetitions = cfg.repetitions.value_or(1);
    s.seed = cfg.seed.value_or(1);
    return s;
}

}  // namespace carelay::config
