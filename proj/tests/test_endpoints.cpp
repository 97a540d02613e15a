#include <gtest/gtest.h>

#include <random>

#include "carelay/bench.hpp"
#include "carelay/endpoints.hpp"

using namespace carelay;
using namespace carelay::endpoints;
using namespace std::chrono_literals;

namespace {

const Ipv4Address kConsole = Ipv4Address::parse("10.2.105.171");

/// One subnet, a client host and two server hosts.
struct Lan {
    sim::Network net;
    sim::HostId s1, s2, c;
    Lan() {
        auto subnet = Cidr::parse("10.0.0.0/24");
        net.add_domain(subnet);
        s1 = net.add_host("s1", {{Ipv4Address::parse("10.0.0.1"), subnet}});
        s2 = net.add_host("s2", {{Ipv4Address::parse("10.0.0.2"), subnet}});
        c = net.add_host("c", {{Ipv4Address::parse("10.0.0.9"), subnet}});
    }
};

IocSim::Options ioc(std::string name, std::vector<PvRecord> pvs, std::uint16_t port = 5064) {
    IocSim::Options o;
    o.name = std::move(name);
    o.pvs = std::move(pvs);
    o.server_port = port;
    return o;
}

std::size_t count_value_kind(const sim::Network& net, ca::ValueKind kind) {
    std::size_t n = 0;
    for (auto& d : net.delivery_log()) {
        if (d.kind != sim::DeliveryKind::Stream) continue;
        if (ca::decode_value_exchange(d.packet.payload).kind == kind) ++n;
    }
    return n;
}

}  // namespace

TEST(QueryConfig, GapsDoubleFromThirtyMs) {
    ClientQueryConfig q;
    EXPECT_EQ(q.gap(0), 30ms);
    EXPECT_EQ(q.gap(1), 60ms);
    EXPECT_EQ(q.gap(2), 120ms);
    EXPECT_EQ(q.gap(3), 240ms);
    EXPECT_EQ(q.scheduled_waits(), 450ms);
    EXPECT_NO_THROW(q.validate());
}

TEST(QueryConfig, GapFormulaProperty) {
    std::mt19937_64 rng(4);
    for (int i = 0; i < 200; ++i) {
        ClientQueryConfig q;
        q.initial_retry = Micros{static_cast<std::int64_t>(1 + rng() % 100000)};
        q.backoff_factor = 1.0 + static_cast<double>(1 + rng() % 300) / 100.0;
        q.max_tries = static_cast<int>(1 + rng() % 6);
        q.total_timeout = q.scheduled_waits() + 1ms;
        for (int k = 0; k + 1 < q.max_tries; ++k) {
            const double want = static_cast<double>(q.initial_retry.count()) * std::pow(q.backoff_factor, k);
            ASSERT_EQ(q.gap(k).count(), std::llround(want));
        }
    }
}

TEST(QueryConfig, InvalidSchedules) {
    ClientQueryConfig q;
    q.backoff_factor = 1.0;
    EXPECT_THROW(q.validate(), std::invalid_argument);
    q = {};
    q.max_tries = 0;
    EXPECT_THROW(q.validate(), std::invalid_argument);
    q = {};
    q.total_timeout = 100ms;
    EXPECT_THROW(q.validate(), std::invalid_argument);
}

TEST(Ioc, AnswersOwnedNameWithFortyBytes) {
    Lan lan;
    IocSim uptime(lan.net, lan.s1, ioc("HostUptime", {{"IMX1-HOST1", 155.836}}, 40006));
    auto out = uptime.on_search(ca::encode_search_datagram({"IMX1-HOST1", 9}), {kConsole, 35687});
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].to, (SocketAddress{kConsole, 35687}));
    EXPECT_EQ(out[0].datagram.size(), 40u);
    auto resp = ca::find_search_response(out[0].datagram);
    EXPECT_EQ(resp->search_id, 9u);
    EXPECT_EQ(resp->server_port, 40006);
    EXPECT_FALSE(resp->server_address);
}

TEST(Ioc, SilentOnOtherNames) {
    Lan lan;
    IocSim uptime(lan.net, lan.s1, ioc("HostUptime", {{"IMX1-HOST1", 1.0}}));
    EXPECT_TRUE(uptime.on_search(ca::encode_search_datagram({"IMX:DMC4:m1", 1}), {kConsole, 1}).empty());
    EXPECT_TRUE(uptime.on_search(ca::encode_search_datagram({"imx1-host1", 1}), {kConsole, 1}).empty());
    EXPECT_TRUE(uptime.on_search(Bytes(7, 1), {kConsole, 1}).empty());
}

TEST(Ioc, EchoesEachSearchId) {
    Lan lan;
    IocSim uptime(lan.net, lan.s1, ioc("HostUptime", {{"IMX1-HOST1", 1.0}}));
    for (std::uint32_t id : {5u, 6u}) {
        auto out = uptime.on_search(ca::encode_search_datagram({"IMX1-HOST1", id}), {kConsole, 1});
        EXPECT_EQ(ca::find_search_response(out.at(0).datagram)->search_id, id);
    }
}

TEST(Ioc, NeverAnswersForeignNamesFuzz) {
    Lan lan;
    IocSim galil(lan.net, lan.s1, ioc("galil", {{"IMX:DMC4:m1", 1.0}, {"IMX:DMC4:m2", 2.0}}));
    std::mt19937_64 rng(77);
    const std::string alphabet = "IMX:DC4m12-_abc";
    for (int i = 0; i < 5000; ++i) {
        std::string name;
        const auto len = 1 + rng() % 14;
        for (std::size_t k = 0; k < len; ++k) name.push_back(alphabet[rng() % alphabet.size()]);
        const bool owned = name == "IMX:DMC4:m1" || name == "IMX:DMC4:m2";
        auto out = galil.on_search(ca::encode_search_datagram({name, 1}), {kConsole, 1});
        ASSERT_EQ(out.size(), owned ? 1u : 0u) << name;
    }
}

TEST(Ioc, DuplicatePvRejected) {
    Lan lan;
    EXPECT_THROW(IocSim(lan.net, lan.s1, ioc("dup", {{"A", 1.0}, {"A", 2.0}})), std::invalid_argument);
}

TEST(Client, GetAndPutOnOneSubnet) {
    Lan lan;
    IocSim galil(lan.net, lan.s1, ioc("galil", {{"IMX:DMC4:m1", -2.06e-05}}));
    ClientSim client(lan.net, lan.c, {});
    EXPECT_DOUBLE_EQ(client.caget("IMX:DMC4:m1"), -2.06e-05);
    client.caput("IMX:DMC4:m1", 4.25);
    EXPECT_EQ(galil.value("IMX:DMC4:m1"), 4.25);
    EXPECT_DOUBLE_EQ(client.caget("IMX:DMC4:m1"), 4.25);
    EXPECT_EQ(client.active_queries(), 0u);
}

TEST(Client, UnknownPvTimesOut) {
    Lan lan;
    IocSim galil(lan.net, lan.s1, ioc("galil", {{"IMX:DMC4:m1", 1.0}}));
    ClientSim client(lan.net, lan.c, {});
    try {
        client.caput("NOPE", 1.0);
        FAIL();
    } catch (const TimeoutError& e) {
        EXPECT_STREQ(e.what(), "Channel connect timed out: 'NOPE' not found.");
    }
    auto r = client.get("NOPE");
    EXPECT_EQ(r.outcome, Outcome::Timeout);
    EXPECT_EQ(r.latency(), 5s);
    EXPECT_EQ(r.send_times.size(), 5u);
}

TEST(Client, FirstResponseWins) {
    Lan lan;
    IocSim a(lan.net, lan.s1, ioc("a", {{"SHARED", 1.0}}));
    IocSim b(lan.net, lan.s2, ioc("b", {{"SHARED", 2.0}}));
    ClientSim client(lan.net, lan.c, {});
    auto r = client.get("SHARED");
    lan.net.advance_clock(1s);
    EXPECT_EQ(r.outcome, Outcome::Value);
    EXPECT_EQ(r.responses_seen, 2u);
    EXPECT_EQ(count_value_kind(lan.net, ca::ValueKind::ReadRequest), 1u);
    EXPECT_EQ(count_value_kind(lan.net, ca::ValueKind::ReadReply), 1u);
    EXPECT_EQ(a.searches_answered() + b.searches_answered(), 2u);
}

TEST(Client, ConcurrentQueriesUseDistinctPorts) {
    Lan lan;
    IocSim a(lan.net, lan.s1, ioc("a", {{"X", 1.0}, {"Y", 2.0}}));
    ClientSim client(lan.net, lan.c, {});
    std::vector<QueryResult> results;
    client.start_get("X", [&](const QueryResult& r) { results.push_back(r); });
    client.start_get("Y", [&](const QueryResult& r) { results.push_back(r); });
    EXPECT_EQ(client.active_queries(), 2u);
    lan.net.advance_clock(1s);
    ASSERT_EQ(results.size(), 2u);
    EXPECT_NE(results[0].search_source.port, results[1].search_source.port);
    for (auto& r : results) EXPECT_EQ(r.outcome, Outcome::Value);
}

TEST(Client, ScenarioAFailureScheduleIsExact) {
    auto world = bench::build_world(bench::scenario_a());
    auto r = world.client->get("IMX:DMC4:m1");
    ASSERT_EQ(r.outcome, Outcome::Timeout);
    ASSERT_EQ(r.send_times.size(), 5u);
    const Micros expected[] = {30ms, 60ms, 120ms, 240ms};
    for (int k = 0; k < 4; ++k) EXPECT_EQ(r.send_times[k + 1] - r.send_times[k], expected[k]);
    EXPECT_EQ(r.error_message(), "Channel connect timed out: 'IMX:DMC4:m1' not found.");
    EXPECT_THROW(world.client->caget("IMX:DMC4:m1"), TimeoutError);
}

TEST(Client, CaputThroughSpoofRelay) {
    auto world = bench::build_world(bench::scenario_c());
    world.client->caput("IMX:DMC4:m3", 0.5);
    EXPECT_DOUBLE_EQ(world.client->caget("IMX:DMC4:m3"), 0.5);
}

TEST(Client, SpoofResponsesGoStraightToClient) {
    auto world = bench::build_world(bench::scenario_c());
    std::vector<SocketAddress> sources;
    for (const char* pv : {"IMX:DMC4:m1", "IMX1-HOST1", "IMX:DMC4:m3"}) {
        auto r = world.client->get(pv);
        ASSERT_EQ(r.outcome, Outcome::Value);
        sources.push_back(r.search_source);
    }
    std::size_t responses = 0;
    for (auto& d : world.net->delivery_log()) {
        if (d.kind != sim::DeliveryKind::Datagram || d.packet.payload.size() != 40) continue;
        ++responses;
        EXPECT_EQ(d.packet.src_port, 5064);
        EXPECT_EQ(d.packet.dst_ip, kConsole);
        EXPECT_NE(std::find(sources.begin(), sources.end(), d.packet.destination()), sources.end());
    }
    EXPECT_EQ(responses, 3u);
    EXPECT_EQ(world.relay->counters().replies_forwarded, 0u);
}
