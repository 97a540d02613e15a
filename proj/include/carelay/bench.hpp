#pragma once

// Scenario runner and latency benchmark.
//
// A Scenario is plain data: topology, IOCs, an optional relay, one client and
// a list of queries with their expected outcome. run_scenario() builds a fresh
// virtual network from it and runs every query `repetitions` times back to
// back on the virtual clock. Latency is measured from the first search send to
// the value (or ack) arriving at the client.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "carelay/endpoints.hpp"
#include "carelay/netsim.hpp"
#include "carelay/relay.hpp"

namespace carelay::bench {

using Micros = std::chrono::microseconds;
using endpoints::Outcome;

class BenchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct HostSpec {
    std::string name;
    std::vector<sim::Interface> interfaces;
    std::vector<sim::PreroutingRule> prerouting;
};

struct HelperSpec {
    Cidr domain;
    std::uint16_t udp_port = ca::kSearchPort;
    std::vector<Ipv4Address> destinations;
};

struct TopologySpec {
    std::vector<Cidr> domains;
    std::vector<HostSpec> hosts;
    std::vector<HelperSpec> helpers;
    sim::LinkModel link;
};

struct IocSpec {
    std::string host;
    endpoints::IocSim::Options options;
};

struct RelaySpec {
    std::string host;
    relay::RelayConfig config;
    /// Add the prerouting rule steering foreign searches to the relay.
    bool install_steering_rule = false;
};

struct ClientSpec {
    std::string host;
    endpoints::ClientSim::Options options;
};

struct Expectation {
    bool timeout = false;
    double value = 0.0;

    static Expectation of(double v) { return {false, v}; }
    static Expectation timed_out() { return {true, 0.0}; }
};

struct QuerySpec {
    std::string pv;
    std::optional<Expectation> expect;
    /// When set, a caput of this value instead of a caget.
    std::optional<double> put_value;
};

struct Scenario {
    std::string name;
    std::string arm = "default";
    TopologySpec topology;
    std::vector<IocSpec> iocs;
    std::optional<RelaySpec> relay;
    ClientSpec client;
    std::vector<QuerySpec> queries;
    int repetitions = 1;
    std::uint64_t seed = 1;
};

/// A built scenario, ready to run queries.
struct World {
    std::unique_ptr<sim::Network> net;
    std::vector<std::unique_ptr<endpoints::IocSim>> iocs;
    std::unique_ptr<relay::SimRelay> relay;
    std::unique_ptr<endpoints::ClientSim> client;
};

inline World build_world(const Scenario& s) {
    World w;
    try {
        auto link = s.topology.link;
        link.seed = s.seed;
        w.net = std::make_unique<sim::Network>(link);
        auto& net = *w.net;
        for (auto& d : s.topology.domains) net.add_domain(d);
        for (auto& h : s.topology.hosts) {
            auto id = net.add_host(h.name, h.interfaces);
            for (auto& r : h.prerouting) net.add_prerouting_rule(id, r);
        }
        for (auto& helper : s.topology.helpers) {
            auto d = net.domain_of_subnet(helper.domain);
            if (!d) throw BenchError("ConfigInvalid: helper rule for unknown domain " + helper.domain.to_string());
            net.add_helper_rule(sim::HelperRule{*d, helper.udp_port, helper.destinations});
        }
        auto host = [&](const std::string& name) {
            auto h = net.find_host(name);
            if (!h) throw BenchError("ConfigInvalid: unknown host '" + name + "'");
            return *h;
        };
        if (s.relay) {
            w.relay = std::make_unique<relay::SimRelay>(net, host(s.relay->host), s.relay->config);
            if (s.relay->install_steering_rule) w.relay->install_steering_rule();
        }
        for (auto& ioc : s.iocs) {
            w.iocs.push_back(std::make_unique<endpoints::IocSim>(net, host(ioc.host), ioc.options));
        }
        w.client = std::make_unique<endpoints::ClientSim>(net, host(s.client.host), s.client.options);
    } catch (const BenchError&) {
        throw;
    } catch (const std::exception& e) {
        throw BenchError(std::string("ConfigInvalid: ") + e.what());
    }
    return w;
}

struct Sample {
    std::string scenario;
    std::string arm;
    std::string query;
    Outcome outcome = Outcome::Timeout;
    std::optional<double> value;
    std::int64_t latency_us = 0;

    bool operator==(const Sample&) const = default;
};

struct ArmSummary {
    std::string scenario;
    std::string arm;
    std::size_t samples = 0;
    std::size_t successes = 0;
    double median_ms = 0;
    double mean_ms = 0;
    double p95_ms = 0;
    double max_ms = 0;
};

struct ScenarioReport {
    std::vector<Sample> samples;
    /// Queries whose outcome differed from the expectation, one line each.
    std::vector<std::string> mismatches;
    /// Relay counters per arm, in run order.
    std::vector<std::pair<std::string, relay::RelayCounters>> counters;
    /// Set by run_benchmark: medians ordered DIRECT <= PERSISTENT <= FORK_MODEL.
    std::optional<bool> ordering_holds;

    bool all_expected() const { return mismatches.empty(); }
};

namespace detail {

inline bool matches(const Expectation& e, const endpoints::QueryResult& r) {
    if (e.timeout) return r.outcome == Outcome::Timeout;
    return r.outcome == Outcome::Value && r.value && *r.value == e.value;
}

inline std::string describe(const endpoints::QueryResult& r) {
    if (r.outcome == Outcome::Timeout) return "TIMEOUT";
    if (r.outcome == Outcome::Ack) return "ACK";
    std::ostringstream o;
    o << "VALUE(" << *r.value << ")";
    return o.str();
}

}  // namespace detail

inline double median_of(std::vector<double> xs) {
    if (xs.empty()) return 0.0;
    std::sort(xs.begin(), xs.end());
    const auto n = xs.size();
    return n % 2 ? xs[n / 2] : (xs[n / 2 - 1] + xs[n / 2]) / 2.0;
}

/// Nearest-rank percentile.
inline double percentile_of(std::vector<double> xs, double pct) {
    if (xs.empty()) return 0.0;
    std::sort(xs.begin(), xs.end());
    auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(xs.size())));
    return xs[std::clamp<std::size_t>(rank, 1, xs.size()) - 1];
}

/// Per-(scenario, arm) statistics over successful samples, in first-seen order.
inline std::vector<ArmSummary> summarize(const std::vector<Sample>& samples) {
    std::vector<ArmSummary> out;
    std::vector<std::vector<double>> latencies;
    for (auto& s : samples) {
        auto it = std::find_if(out.begin(), out.end(), [&](const ArmSummary& a) {
            return a.scenario == s.scenario && a.arm == s.arm;
        });
        if (it == out.end()) {
            out.push_back(ArmSummary{s.scenario, s.arm, 0, 0, 0, 0, 0, 0});
            latencies.emplace_back();
            it = out.end() - 1;
        }
        ++it->samples;
        if (s.outcome != Outcome::Timeout) {
            ++it->successes;
            latencies[static_cast<std::size_t>(it - out.begin())].push_back(
                static_cast<double>(s.latency_us) / 1000.0);
        }
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        auto& xs = latencies[i];
        if (xs.empty()) continue;
        out[i].median_ms = median_of(xs);
        out[i].p95_ms = percentile_of(xs, 95);
        out[i].max_ms = *std::max_element(xs.begin(), xs.end());
        double sum = 0;
        for (double x : xs) sum += x;
        out[i].mean_ms = sum / static_cast<double>(xs.size());
    }
    return out;
}

inline std::optional<ArmSummary> find_arm(const std::vector<ArmSummary>& summaries, const std::string& arm) {
    for (auto& a : summaries) {
        if (a.arm == arm) return a;
    }
    return std::nullopt;
}

/// `inspect` sees the world after the last query.
inline void run_into(const Scenario& s, ScenarioReport& report,
                     const std::function<void(const World&)>& inspect = {}) {
    if (s.repetitions < 1) throw BenchError("ConfigInvalid: repetitions must be at least 1");
    if (s.queries.empty()) throw BenchError("ConfigInvalid: scenario has no queries");
    World w = build_world(s);
    for (int rep = 0; rep < s.repetitions; ++rep) {
        for (auto& q : s.queries) {
            auto r = q.put_value ? w.client->put(q.pv, *q.put_value) : w.client->get(q.pv);
            report.samples.push_back(
                Sample{s.name, s.arm, q.pv, r.outcome, r.value, r.latency().count()});
            if (q.expect && !detail::matches(*q.expect, r)) {
                std::ostringstream o;
                o << s.name << '/' << s.arm << " rep " << rep << ": " << q.pv << " expected "
                  << (q.expect->timeout ? std::string("TIMEOUT") : "VALUE(" + std::to_string(q.expect->value) + ")")
                  << ", got " << detail::describe(r);
                report.mismatches.push_back(o.str());
            }
        }
    }
    if (w.relay) report.counters.emplace_back(s.arm, w.relay->counters());
    if (inspect) inspect(w);
}

inline ScenarioReport run_scenario(const Scenario& s, const std::function<void(const World&)>& inspect = {}) {
    ScenarioReport report;
    run_into(s, report, inspect);
    return report;
}

// ---------------------------------------------------------------------------
// Reference topology: beamline servers in 10.2.1.0/24, the operator's console in
// 10.2.105.0/24 behind a switch doing UDP-helper on 5064 toward 10.2.1.31.

inline const Cidr kBeamlineNet = Cidr::parse("10.2.1.0/24");
inline const Cidr kConsoleNet = Cidr::parse("10.2.105.0/24");
inline const Ipv4Address kServer1 = Ipv4Address::parse("10.2.1.31");
inline const Ipv4Address kServer2 = Ipv4Address::parse("10.2.1.32");
inline const Ipv4Address kConsole = Ipv4Address::parse("10.2.105.171");
inline const Ipv4Address kLocalConsole = Ipv4Address::parse("10.2.1.50");

inline constexpr const char* kServer1Name = "IMX1-HOST1";
inline constexpr const char* kServer2Name = "IMX1-HOST2";
inline constexpr const char* kConsoleName = "TesteRHEpics";
inline constexpr const char* kLocalConsoleName = "IMX-CONSOLE";

/// The seven IOCs of IMX1-HOST1 in bind order (first bound first) followed by
/// the single IOC of IMX1-HOST2. Only the last-bound IOC of host 1 answers
/// helper-converted unicast searches.
inline std::vector<IocSpec> reference_iocs(double uptime_value, bool advertise_address = false) {
    auto ioc = [&](std::string host, std::string name, std::string pv, double v, std::uint16_t port) {
        endpoints::IocSim::Options o;
        o.name = std::move(name);
        o.pvs = {{std::move(pv), v}};
        o.server_port = port;
        o.advertise_address = advertise_address;
        return IocSpec{std::move(host), std::move(o)};
    };
    return {
        ioc(kServer1Name, "galilTest-2803", "IMX:DMC4:m1", -2.06e-05, 5064),
        ioc(kServer1Name, "galilTest-2804", "IMX:DMC4:m2", -1.47e-05, 40001),
        ioc(kServer1Name, "galilTest-2808", "IMX:DMC5:m1", 0.0125, 40002),
        ioc(kServer1Name, "galilTest-22962", "IMX:DMC6:m1", 3.5, 40003),
        ioc(kServer1Name, "digital-2799", "IMX:DIO:bi0", 1.0, 40004),
        ioc(kServer1Name, "PFCU-2810", "IMX:PFCU:filter", 2.0, 40005),
        ioc(kServer1Name, "HostUptime-2798", "IMX1-HOST1", uptime_value, 40006),
        ioc(kServer2Name, "galilTest", "IMX:DMC4:m3", 0.002496, 5064),
    };
}

inline TopologySpec reference_topology() {
    TopologySpec t;
    t.domains = {kBeamlineNet, kConsoleNet};
    t.hosts = {
        {kServer1Name, {{kServer1, kBeamlineNet}}, {}},
        {kServer2Name, {{kServer2, kBeamlineNet}}, {}},
        {kConsoleName, {{kConsole, kConsoleNet}}, {}},
    };
    t.helpers = {{kConsoleNet, ca::kSearchPort, {kServer1}}};
    return t;
}

inline ClientSpec reference_client(const char* host = kConsoleName) {
    return ClientSpec{host, {}};
}

inline std::vector<QuerySpec> expect_only(const std::vector<IocSpec>& iocs, const std::string& host_name) {
    std::vector<QuerySpec> out;
    for (auto& ioc : iocs) {
        for (auto& pv : ioc.options.pvs) {
            out.push_back({pv.name,
                           ioc.host == host_name ? Expectation::of(pv.value) : Expectation::timed_out(),
                           std::nullopt});
        }
    }
    return out;
}

/// A: helper unicast only. Only the last-bound IOC on host 1 answers.
inline Scenario scenario_a() {
    Scenario s;
    s.name = "A";
    s.arm = "HELPER_ONLY";
    s.topology = reference_topology();
    s.iocs = reference_iocs(0.0191667);
    s.client = reference_client();
    for (auto& ioc : s.iocs) {
        bool answers = ioc.host == kServer1Name && ioc.options.name == "HostUptime-2798";
        for (auto& pv : ioc.options.pvs) {
            s.queries.push_back(
                {pv.name, answers ? Expectation::of(pv.value) : Expectation::timed_out(), std::nullopt});
        }
    }
    return s;
}

/// B: host 1 rewrites foreign searches to 255.255.255.255:5064 locally.
inline Scenario scenario_b() {
    Scenario s;
    s.name = "B";
    s.arm = "PREROUTING";
    s.topology = reference_topology();
    s.topology.hosts[0].prerouting.push_back(
        {ca::kSearchPort, kBeamlineNet, Ipv4Address::limited_broadcast(), ca::kSearchPort});
    s.iocs = reference_iocs(0.122222);
    s.client = reference_client();
    s.queries = expect_only(s.iocs, kServer1Name);
    return s;
}

inline relay::RelayConfig reference_relay_config(relay::Mode mode = relay::Mode::Spoof) {
    relay::RelayConfig c;
    c.listen_port = 6064;
    c.target_broadcast = Ipv4Address::limited_broadcast();
    c.target_port = ca::kSearchPort;
    c.allow_sources = {kConsoleNet};
    c.local_subnet = kBeamlineNet;
    c.mode = mode;
    return c;
}

/// C: relay on host 1 fed by a prerouting rule; every PV on both hosts resolves.
/// In non-spoofing modes the IOCs advertise their own address.
inline Scenario scenario_c(relay::Mode mode = relay::Mode::Spoof) {
    Scenario s;
    s.name = "C";
    s.arm = mode == relay::Mode::Spoof ? "SPOOF" : mode == relay::Mode::Proxy ? "PROXY" : "FORK_MODEL";
    s.topology = reference_topology();
    s.iocs = reference_iocs(155.836, mode != relay::Mode::Spoof);
    s.relay = RelaySpec{kServer1Name, reference_relay_config(mode), true};
    s.client = reference_client();
    for (auto& ioc : s.iocs) {
        for (auto& pv : ioc.options.pvs) s.queries.push_back({pv.name, Expectation::of(pv.value), std::nullopt});
    }
    return s;
}

// ---------------------------------------------------------------------------

enum class Arm { Direct, Persistent, ForkModel };

inline const char* to_string(Arm a) {
    switch (a) {
        case Arm::Direct: return "DIRECT";
        case Arm::Persistent: return "PERSISTENT";
        case Arm::ForkModel: return "FORK_MODEL";
    }
    return "?";
}

inline std::optional<Arm> parse_arm(std::string_view s) {
    if (s == "DIRECT" || s == "direct") return Arm::Direct;
    if (s == "PERSISTENT" || s == "persistent") return Arm::Persistent;
    if (s == "FORK_MODEL" || s == "fork_model" || s == "fork") return Arm::ForkModel;
    return std::nullopt;
}

struct BenchmarkParams {
    std::vector<Arm> arms{Arm::Direct, Arm::Persistent, Arm::ForkModel};
    int repetitions = 100;
    std::uint64_t seed = 1;
    Micros hop_delay{200};
    Micros jitter{0};
    Micros fork_cost{5000};
    std::vector<std::string> queries{"IMX:DMC4:m1", "IMX1-HOST1", "IMX:DMC4:m3"};
};

inline Scenario benchmark_arm(Arm arm, const BenchmarkParams& p) {
    Scenario s;
    switch (arm) {
        case Arm::Direct: {
            s = scenario_c();
            s.relay.reset();
            s.topology.hosts.push_back({kLocalConsoleName, {{kLocalConsole, kBeamlineNet}}, {}});
            s.client = reference_client(kLocalConsoleName);
            break;
        }
        case Arm::Persistent: s = scenario_c(relay::Mode::Spoof); break;
        case Arm::ForkModel:
            s = scenario_c(relay::Mode::ForkModel);
            s.relay->config.fork_cost = p.fork_cost;
            break;
    }
    s.name = "BENCH";
    s.arm = to_string(arm);
    s.topology.link.hop_delay = p.hop_delay;
    s.topology.link.jitter = p.jitter;
    s.repetitions = p.repetitions;
    s.seed = p.seed;
    std::vector<QuerySpec> picked;
    for (auto& name : p.queries) {
        auto it = std::find_if(s.queries.begin(), s.queries.end(),
                               [&](const QuerySpec& q) { return q.pv == name; });
        if (it == s.queries.end()) throw BenchError("ConfigInvalid: unknown benchmark PV " + name);
        picked.push_back(*it);
    }
    s.queries = std::move(picked);
    return s;
}

/// Runs the requested arms, always in the order DIRECT, PERSISTENT, FORK_MODEL.
inline ScenarioReport run_benchmark(const BenchmarkParams& p,
                                    const std::function<void(const World&)>& inspect = {}) {
    if (p.repetitions < 30) throw BenchError("ConfigInvalid: benchmark needs at least 30 repetitions");
    ScenarioReport report;
    for (Arm arm : {Arm::Direct, Arm::Persistent, Arm::ForkModel}) {
        if (std::find(p.arms.begin(), p.arms.end(), arm) == p.arms.end()) continue;
        run_into(benchmark_arm(arm, p), report, inspect);
    }
    auto summaries = summarize(report.samples);
    auto direct = find_arm(summaries, "DIRECT");
    auto persistent = find_arm(summaries, "PERSISTENT");
    auto fork = find_arm(summaries, "FORK_MODEL");
    if (direct && persistent && fork) {
        report.ordering_holds = direct->median_ms <= persistent->median_ms &&
                                persistent->median_ms <= fork->median_ms;
    }
    return report;
}

// ---------------------------------------------------------------------------
// Report rendering.

enum class ReportFormat { Text, Records };

inline std::optional<ReportFormat> parse_format(std::string_view s) {
    if (s == "text") return ReportFormat::Text;
    if (s == "records") return ReportFormat::Records;
    return std::nullopt;
}

inline const char* kRecordHeader = "scenario\tarm\tquery\toutcome\tvalue\tlatency_us";

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::string emit_records(const ScenarioReport& report) {
    std::ostringstream out;
    out << kRecordHeader << '\n';
    for (auto& s : report.samples) {
        out << s.scenario << '\t' << s.arm << '\t' << s.query << '\t' << endpoints::to_string(s.outcome)
            << '\t' << (s.value ? format_double(*s.value) : "-") << '\t' << s.latency_us << '\n';
    }
    return out.str();
}

inline std::string emit_text(const ScenarioReport& report) {
    std::ostringstream out;
    char line[256];
    std::snprintf(line, sizeof line, "%-10s %-12s %8s %8s %11s %11s %11s %11s\n", "scenario", "arm",
                  "samples", "ok", "median_ms", "mean_ms", "p95_ms", "max_ms");
    out << line;
    for (auto& a : summarize(report.samples)) {
        std::snprintf(line, sizeof line, "%-10s %-12s %8zu %8zu %11.3f %11.3f %11.3f %11.3f\n",
                      a.scenario.c_str(), a.arm.c_str(), a.samples, a.successes, a.median_ms,
                      a.mean_ms, a.p95_ms, a.max_ms);
        out << line;
    }
    if (report.ordering_holds) {
        out << "ordering DIRECT <= PERSISTENT <= FORK_MODEL: " << (*report.ordering_holds ? "yes" : "NO")
            << '\n';
    }
    for (auto& [arm, c] : report.counters) {
        out << "relay " << arm << ": received=" << c.received << " relayed=" << c.relayed
            << " dropped_local=" << c.dropped_local << " dropped_not_allowed=" << c.dropped_not_allowed
            << " dropped_port=" << c.dropped_port << " dropped_rate_limited=" << c.dropped_rate_limited
            << " replies_forwarded=" << c.replies_forwarded << '\n';
    }
    for (auto& m : report.mismatches) out << "MISMATCH " << m << '\n';
    return out.str();
}

inline std::string emit_report(const ScenarioReport& report, ReportFormat format) {
    return format == ReportFormat::Text ? emit_text(report) : emit_records(report);
}

inline std::string emit_report(const ScenarioReport& report, std::string_view format) {
    auto f = parse_format(format);
    if (!f) throw BenchError("UnknownFormat: '" + std::string(format) + "'");
    return emit_report(report, *f);
}

/// Inverse of emit_records (samples only).
inline std::vector<Sample> parse_records(std::string_view text) {
    std::vector<Sample> out;
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || line != kRecordHeader) {
        throw BenchError("records: missing header line");
    }
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (;;) {
            auto tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() != 6) throw BenchError("records line " + std::to_string(line_no) + ": expected 6 fields");
        Sample s{fields[0], fields[1], fields[2], Outcome::Timeout, std::nullopt, 0};
        if (fields[3] == "VALUE") s.outcome = Outcome::Value;
        else if (fields[3] == "ACK") s.outcome = Outcome::Ack;
        else if (fields[3] == "TIMEOUT") s.outcome = Outcome::Timeout;
        else throw BenchError("records line " + std::to_string(line_no) + ": bad outcome");
        if (fields[4] != "-") {
            double v = 0;
            auto res = std::from_chars(fields[4].data(), fields[4].data() + fields[4].size(), v);
            if (res.ec != std::errc{}) throw BenchError("records line " + std::to_string(line_no) + ": bad value");
            s.value = v;
        }
        auto res = std::from_chars(fields[5].data(), fields[5].data() + fields[5].size(), s.latency_us);
        if (res.ec != std::errc{}) throw BenchError("records line " + std::to_string(line_no) + ": bad latency");
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace carelay::bench
