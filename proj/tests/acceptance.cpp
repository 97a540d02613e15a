// Prints one PASS/FAIL line per acceptance criterion; exits nonzero on any FAIL.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "carelay/carelay.hpp"
#include "oracles.hpp"

using namespace carelay;
using namespace std::chrono_literals;

namespace {

/// Collects failed checks for one criterion.
struct Check {
    std::vector<std::string> failures;

    void expect(bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    }
};

using Clock = std::chrono::steady_clock;
using Micros = std::chrono::microseconds;

bool report(int n, const char* title, const std::function<void(Check&)>& body, bool timed = false) {
    Check c;
    const auto start = Clock::now();
    try {
        body(c);
    } catch (const std::exception& e) {
        c.failures.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(Clock::now() - start).count();
    if (timed) c.expect(secs < 1.0, "wall clock " + std::to_string(secs) + " s");
    std::printf("%s criterion %d: %s (%.3f s)\n", c.failures.empty() ? "PASS" : "FAIL", n, title, secs);
    for (auto& f : c.failures) std::printf("    %s\n", f.c_str());
    return c.failures.empty();
}

void helper_only(Check& c) {
    auto w = bench::build_world(bench::scenario_a());
    auto ok = w.client->get("IMX1-HOST1");
    c.expect(ok.outcome == endpoints::Outcome::Value && ok.value == 0.0191667, "last binder value");
    for (const char* pv : {"IMX:DMC4:m1", "IMX:DMC4:m2", "IMX:DMC5:m1", "IMX:DMC6:m1", "IMX:DIO:bi0",
                           "IMX:PFCU:filter"}) {
        auto r = w.client->get(pv);
        c.expect(r.outcome == endpoints::Outcome::Timeout, std::string(pv) + " resolved");
        c.expect(r.error_message() == "Channel connect timed out: '" + std::string(pv) + "' not found.",
                 "message for " + std::string(pv));
        c.expect(r.send_times.size() == 5, std::string(pv) + " send count");
        const Micros gaps[] = {30ms, 60ms, 120ms, 240ms};
        for (std::size_t k = 0; k + 1 < r.send_times.size() && k < 4; ++k) {
            c.expect(r.send_times[k + 1] - r.send_times[k] == gaps[k], std::string(pv) + " gap " + std::to_string(k));
        }
    }
    const auto trace = w.net->trace();
    c.expect(trace.find("10.2.1.31.5064 > 10.2.105.171.") != std::string::npos &&
                 trace.find("UDP, length 40") != std::string::npos,
             "trace shows the unicast response");
}

void prerouting(Check& c) {
    auto w = bench::build_world(bench::scenario_b());
    for (auto& ioc : bench::reference_iocs(0.122222)) {
        for (auto& pv : ioc.options.pvs) {
            auto r = w.client->get(pv.name);
            if (ioc.host == bench::kServer1Name) {
                c.expect(r.outcome == endpoints::Outcome::Value && r.value == pv.value, pv.name + " not resolved");
            } else {
                c.expect(r.outcome == endpoints::Outcome::Timeout, pv.name + " on host 2 resolved");
            }
        }
    }
}

void spoof_relay(Check& c) {
    auto s = bench::scenario_c();
    const auto& cfg = s.relay->config;
    c.expect(cfg.listen_port == 6064 && cfg.target().to_string() == "255.255.255.255:5064" &&
                 cfg.local_subnet == bench::kBeamlineNet && cfg.allow_sources == std::vector{bench::kConsoleNet},
             "relay configuration");
    auto w = bench::build_world(s);
    std::vector<SocketAddress> sources;
    const std::pair<const char*, double> expected[] = {
        {"IMX:DMC4:m1", -2.06e-05}, {"IMX1-HOST1", 155.836}, {"IMX:DMC4:m3", 0.002496}};
    for (auto& [pv, v] : expected) {
        auto r = w.client->get(pv);
        c.expect(r.outcome == endpoints::Outcome::Value && r.value == v, std::string(pv) + " value");
        sources.push_back(r.search_source);
    }
    std::size_t responses = 0;
    for (auto& d : w.net->delivery_log()) {
        if (d.kind != sim::DeliveryKind::Datagram || d.packet.payload.size() != 40) continue;
        ++responses;
        c.expect(std::find(sources.begin(), sources.end(), d.packet.destination()) != sources.end(),
                 "response to " + d.packet.destination().to_string() + " not addressed to the client");
    }
    c.expect(responses == 3, "expected 3 search responses, saw " + std::to_string(responses));
    c.expect(w.relay->counters().replies_forwarded == 0, "relay forwarded replies");
}

void loop_safety(Check& c) {
    auto w = bench::build_world(bench::scenario_c());
    auto& net = *w.net;
    const auto client = *net.find_host(bench::kConsoleName);
    c.expect(w.relay->host() == *net.find_host(bench::kServer1Name), "relay on host 1");
    PacketEncoder enc;
    for (int i = 0; i < 1000; ++i) {
        net.inject(client,
                   enc.make({bench::kConsole, static_cast<std::uint16_t>(30000 + i)}, {bench::kServer1, 5064},
                            ca::encode_search_datagram({"NOPE", static_cast<std::uint32_t>(i)})),
                   net.now() + Micros{i});
    }
    net.advance_clock(10s);
    const auto& k = w.relay->counters();
    c.expect(k.received == 1000, "received " + std::to_string(k.received));
    c.expect(k.relayed == 1000, "relayed " + std::to_string(k.relayed));
    c.expect(w.relay->emitted() == 1000, "emitted " + std::to_string(w.relay->emitted()));
    c.expect(k.conserved(), "counters do not conserve");
}

void codec(Check& c) {
    for (auto& ioc : bench::reference_iocs(0)) {
        for (auto& pv : ioc.options.pvs) {
            auto size = ca::encode_search_datagram({pv.name, 1}).size();
            c.expect(size == 48, pv.name + " search is " + std::to_string(size) + " bytes");
        }
    }
    c.expect(ca::encode_search_response_datagram(ca::SearchResponse{}).size() == 40, "search response size");

    std::mt19937_64 rng(2024);
    PacketEncoder enc;
    int bad_packets = 0, bad_searches = 0, bad_checksums = 0;
    for (int i = 0; i < 10000; ++i) {
        Bytes payload(rng() % 600);
        for (auto& b : payload) b = static_cast<std::uint8_t>(rng());
        auto p = enc.make({Ipv4Address(static_cast<std::uint32_t>(rng())), static_cast<std::uint16_t>(rng())},
                          {Ipv4Address(static_cast<std::uint32_t>(rng())), static_cast<std::uint16_t>(rng())},
                          std::move(payload));
        bad_packets += !(decode(encode(p)) == p);

        std::string name(1 + rng() % ca::kMaxNameLength, 'x');
        for (auto& ch : name) ch = static_cast<char>('!' + rng() % 94);
        ca::SearchRequest req{name, static_cast<std::uint32_t>(rng()), ca::ReplyFlag::DontReply,
                              static_cast<std::uint16_t>(rng() % 256)};
        auto back = ca::find_search_request(ca::encode_search_datagram(req));
        bad_searches += !(back && *back == req);
    }
    for (int i = 0; i < 1000; ++i) {
        std::vector<std::uint8_t> buf(rng() % 1500);
        for (auto& b : buf) b = static_cast<std::uint8_t>(rng());
        bad_checksums += checksum16(buf) != oracle::word_sum_checksum(buf);
    }
    c.expect(bad_packets == 0, std::to_string(bad_packets) + " packet roundtrips differ");
    c.expect(bad_searches == 0, std::to_string(bad_searches) + " search roundtrips differ");
    c.expect(bad_checksums == 0, std::to_string(bad_checksums) + " checksums disagree with the oracle");
}

void latency_ordering(Check& c) {
    bench::BenchmarkParams p;
    p.repetitions = 100;
    auto sums = bench::summarize(bench::run_benchmark(p).samples);
    auto d = bench::find_arm(sums, "DIRECT");
    auto ps = bench::find_arm(sums, "PERSISTENT");
    auto f = bench::find_arm(sums, "FORK_MODEL");
    if (!d || !ps || !f) {
        c.expect(false, "missing arm");
        return;
    }
    const double fork_ms = static_cast<double>(p.fork_cost.count()) / 1000.0;
    c.expect(d->median_ms <= ps->median_ms, "DIRECT > PERSISTENT");
    c.expect(ps->median_ms <= f->median_ms, "PERSISTENT > FORK_MODEL");
    c.expect(d->median_ms < 75.0, "DIRECT median not below 75 ms");
    c.expect(f->median_ms - ps->median_ms >= fork_ms, "fork gap below fork_cost");
    std::printf("    medians ms: DIRECT %.3f PERSISTENT %.3f FORK_MODEL %.3f\n", d->median_ms, ps->median_ms,
                f->median_ms);
}

void determinism(Check& c) {
    for (auto s : {bench::scenario_a(), bench::scenario_b(), bench::scenario_c(),
                   bench::scenario_c(relay::Mode::Proxy), bench::scenario_c(relay::Mode::ForkModel)}) {
        s.repetitions = 3;
        s.seed = 42;
        s.topology.link.jitter = 150us;
        auto a = bench::emit_records(bench::run_scenario(s));
        auto b = bench::emit_records(bench::run_scenario(s));
        c.expect(a == b, "scenario " + s.name + " " + s.arm + " differs between runs");
    }
    bench::BenchmarkParams p;
    p.repetitions = 30;
    p.jitter = 100us;
    c.expect(bench::emit_records(bench::run_benchmark(p)) == bench::emit_records(bench::run_benchmark(p)),
             "benchmark differs between runs");
}

void proxy_mode(Check& c) {
    auto s = bench::scenario_c(relay::Mode::Proxy);
    auto w = bench::build_world(s);
    for (auto& q : s.queries) {
        auto r = w.client->get(q.pv);
        c.expect(r.outcome == endpoints::Outcome::Value && r.value == q.expect->value, q.pv + " failed");
    }
    c.expect(w.relay->counters().replies_forwarded == s.queries.size(), "replies not forwarded through flows");
    c.expect(w.relay->flow_count() > 0, "no flow opened");
    w.net->advance_clock(30s);
    c.expect(w.relay->flow_count() == 0, "flow table not empty after 30 s idle");
}

}  // namespace

int main() {
    bool ok = true;
    ok &= report(1, "helper-only reaches the last-bound IOC only", helper_only, true);
    ok &= report(2, "prerouting rewrite fixes one host only", prerouting, true);
    ok &= report(3, "SPOOF relay resolves across hosts with source preservation", spoof_relay, true);
    ok &= report(4, "no amplification inside the target domain", loop_safety);
    ok &= report(5, "codec sizes, roundtrips and checksum oracle", codec);
    ok &= report(6, "latency ordering DIRECT <= PERSISTENT <= FORK_MODEL", latency_ordering);
    ok &= report(7, "same seed gives byte-identical records", determinism);
    ok &= report(8, "PROXY mode forwards replies and drains idle flows", proxy_mode);
    return ok ? 0 : 1;
}
