#include <gtest/gtest.h>

#include <random>

#include "carelay/netsim.hpp"

using namespace carelay;
using namespace carelay::sim;
using namespace std::chrono_literals;

namespace {

const Cidr kBeam = Cidr::parse("10.2.1.0/24");
const Cidr kConsoleNet = Cidr::parse("10.2.105.0/24");
const Ipv4Address kHost1 = Ipv4Address::parse("10.2.1.31");
const Ipv4Address kHost2 = Ipv4Address::parse("10.2.1.32");
const Ipv4Address kConsole = Ipv4Address::parse("10.2.105.171");

struct Fixture {
    Network net;
    DomainId beam, console;
    HostId h1, h2, client;
    std::vector<EndpointId> iocs;
    std::vector<Delivery> received;

    explicit Fixture(LinkModel link = {}) : net(link) {
        beam = net.add_domain(kBeam);
        console = net.add_domain(kConsoleNet);
        h1 = net.add_host("IMX1-HOST1", {{kHost1, kBeam}});
        h2 = net.add_host("IMX1-HOST2", {{kHost2, kBeam}});
        client = net.add_host("TesteRHEpics", {{kConsole, kConsoleNet}});
        for (int i = 0; i < 7; ++i) {
            auto id = net.new_endpoint([this](const Delivery& d) { received.push_back(d); });
            net.bind(h1, 5064, id);
            iocs.push_back(id);
        }
    }

    Ipv4UdpPacket packet(SocketAddress src, SocketAddress dst, Bytes payload = Bytes(48, 0x42)) {
        return encoder.make(src, dst, std::move(payload));
    }

    PacketEncoder encoder;
};

}  // namespace

TEST(Bind, SevenBindingsInOrder) {
    Fixture f;
    auto b = f.net.bindings(f.h1, 5064);
    ASSERT_EQ(b.size(), 7u);
    for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(b[i].bind_sequence, i + 1);
}

TEST(Bind, SequencesIndependentPerHost) {
    Fixture f;
    auto e = f.net.new_endpoint();
    EXPECT_EQ(f.net.bind(f.h2, 5064, e).bind_sequence, 1u);
    EXPECT_EQ(f.net.bind(f.h2, 5065, e).bind_sequence, 2u);
}

TEST(Bind, UnknownHost) {
    Fixture f;
    auto e = f.net.new_endpoint();
    try {
        f.net.bind(HostId{99}, 5064, e);
        FAIL();
    } catch (const NetError& err) {
        EXPECT_EQ(err.kind(), NetErrorKind::UnknownHost);
    }
    EXPECT_THROW(f.net.bind("nowhere", 5064, e), NetError);
}

TEST(Topology, Validation) {
    Network net;
    net.add_domain(kBeam);
    EXPECT_THROW(net.add_host("x", {{Ipv4Address::parse("10.9.9.9"), Cidr::parse("10.9.9.0/24")}}), NetError);
    net.add_host("a", {{kHost1, kBeam}});
    EXPECT_THROW(net.add_host("b", {{kHost1, kBeam}}), NetError);
    EXPECT_THROW(net.add_domain(kBeam), NetError);
}

TEST(Inject, BroadcastReachesAllBindings) {
    Fixture f;
    auto ds = f.net.inject(f.h2, f.packet({kHost2, 40000}, {kBeam.broadcast(), 5064}), 0us);
    EXPECT_EQ(ds.size(), 7u);
    f.net.advance_clock(1s);
    ASSERT_EQ(f.received.size(), 7u);
    for (auto& d : f.received) EXPECT_EQ(d.host, f.h1);
    for (std::size_t i = 1; i < f.received.size(); ++i) EXPECT_EQ(f.received[i].arrival, f.received[0].arrival);
}

TEST(Inject, UnicastGoesToLastBinder) {
    Fixture f;
    auto ds = f.net.inject(f.client, f.packet({kConsole, 35687}, {kHost1, 5064}), 0us);
    ASSERT_EQ(ds.size(), 1u);
    EXPECT_EQ(ds[0].bind_sequence, 7u);
    EXPECT_EQ(ds[0].owner, f.iocs.back());
}

TEST(Inject, PreroutingBroadcastRewriteReachesAll) {
    Fixture f;
    f.net.add_prerouting_rule(f.h1, {5064, kBeam, Ipv4Address::limited_broadcast(), 5064});
    auto ds = f.net.inject(f.client, f.packet({kConsole, 35687}, {kHost1, 5064}), 0us);
    EXPECT_EQ(ds.size(), 7u);
    for (auto& d : ds) {
        EXPECT_EQ(d.wire_destination, (SocketAddress{kHost1, 5064}));
        EXPECT_EQ(d.packet.src_ip, kConsole);
    }
}

TEST(Inject, PreroutingRewriteIsNotReemitted) {
    Fixture f;
    auto other = f.net.new_endpoint();
    f.net.bind(f.h2, 5064, other);
    f.net.add_prerouting_rule(f.h1, {5064, kBeam, Ipv4Address::limited_broadcast(), 5064});
    f.net.inject(f.client, f.packet({kConsole, 35687}, {kHost1, 5064}), 0us);
    f.net.advance_clock(1s);
    for (auto& d : f.net.delivery_log()) EXPECT_NE(d.host, f.h2);
}

TEST(Inject, NegatedSourceSkipsLocalSenders) {
    Fixture f;
    f.net.add_prerouting_rule(f.h1, {5064, kBeam, Ipv4Address::limited_broadcast(), 5064});
    auto ds = f.net.inject(f.h2, f.packet({kHost2, 40000}, {kHost1, 5064}), 0us);
    EXPECT_EQ(ds.size(), 1u);
}

TEST(Inject, PreroutingUnicastRewriteChangesPort) {
    Fixture f;
    auto relay = f.net.new_endpoint();
    f.net.bind(f.h1, 6064, relay);
    f.net.add_prerouting_rule(f.h1, {5064, kBeam, kHost1, 6064});
    auto ds = f.net.inject(f.client, f.packet({kConsole, 35687}, {kHost1, 5064}), 0us);
    ASSERT_EQ(ds.size(), 1u);
    EXPECT_EQ(ds[0].owner, relay);
    EXPECT_EQ(ds[0].packet.dst_port, 6064);
}

TEST(Inject, HelperCopiesPreserveSourceAndPayload) {
    Fixture f;
    f.net.add_helper_rule({f.console, 5064, {kHost1}});
    Bytes payload(48);
    for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<std::uint8_t>(i * 7);
    auto original = f.packet({kConsole, 35687}, {kConsoleNet.broadcast(), 5064}, payload);
    auto ds = f.net.inject(f.client, original, 0us);
    ASSERT_EQ(ds.size(), 1u);
    const auto& p = ds[0].packet;
    EXPECT_EQ(p.source(), original.source());
    EXPECT_EQ(p.dst_ip, kHost1);
    EXPECT_EQ(p.dst_port, 5064);
    EXPECT_EQ(p.payload, payload);
    EXPECT_EQ(p, finalized(p));
    EXPECT_EQ(ds[0].bind_sequence, 7u);
}

TEST(Inject, BroadcastStaysInDomain) {
    Fixture f;
    auto ds = f.net.inject(f.client, f.packet({kConsole, 35687}, {Ipv4Address::limited_broadcast(), 5064}), 0us);
    EXPECT_TRUE(ds.empty());
}

TEST(Inject, NoRouteForUnknownUnicast) {
    Fixture f;
    try {
        f.net.inject(f.client, f.packet({kConsole, 1}, {Ipv4Address::parse("192.168.1.1"), 5064}), 0us);
        FAIL();
    } catch (const NetError& e) {
        EXPECT_EQ(e.kind(), NetErrorKind::NoRoute);
    }
}

TEST(Inject, UnicastToUnboundPortIsDropped) {
    Fixture f;
    EXPECT_TRUE(f.net.inject(f.client, f.packet({kConsole, 1}, {kHost2, 5064}), 0us).empty());
}

TEST(Inject, BroadcastLoopsBackToSender) {
    Fixture f;
    auto ds = f.net.inject(f.h1, f.packet({kHost1, 50000}, {Ipv4Address::limited_broadcast(), 5064}), 0us);
    EXPECT_EQ(ds.size(), 7u);
    for (auto& d : ds) EXPECT_EQ(d.hops, 0);
}

TEST(Clock, EmptyAdvance) {
    Network net;
    EXPECT_TRUE(net.advance_clock(1s).empty());
    EXPECT_EQ(net.now(), 1s);
}

TEST(Clock, AdvancePartialWindow) {
    Fixture f(LinkModel{10us, 0us, 1});
    f.net.inject(f.client, f.packet({kConsole, 1}, {kHost1, 5064}), 0us);
    f.net.inject(f.client, f.packet({kConsole, 2}, {kHost1, 5064}), 10us);
    auto first = f.net.advance_clock(15us);
    ASSERT_EQ(first.size(), 1u);
    EXPECT_EQ(first[0].time, 10us);
    EXPECT_EQ(first[0].packet.src_port, 1);
    auto second = f.net.advance_clock(15us);
    ASSERT_EQ(second.size(), 1u);
    EXPECT_EQ(second[0].time, 20us);
}

TEST(Clock, TiesKeepInjectionOrder) {
    Fixture f;
    for (std::uint16_t port = 1; port <= 20; ++port) {
        f.net.inject(f.client, f.packet({kConsole, port}, {kHost1, 5064}), 0us);
    }
    auto fired = f.net.advance_clock(1s);
    ASSERT_EQ(fired.size(), 20u);
    for (std::uint16_t i = 0; i < 20; ++i) EXPECT_EQ(fired[i].packet.src_port, i + 1);
}

TEST(Clock, PastInjectionRejected) {
    Fixture f;
    f.net.advance_clock(1ms);
    try {
        f.net.inject(f.client, f.packet({kConsole, 1}, {kHost1, 5064}), 0us);
        FAIL();
    } catch (const NetError& e) {
        EXPECT_EQ(e.kind(), NetErrorKind::InvalidTime);
    }
}

TEST(Clock, HopDelay) {
    Fixture f;
    auto remote = f.net.inject(f.client, f.packet({kConsole, 1}, {kHost1, 5064}), 0us);
    EXPECT_EQ(remote.at(0).time, 200us);
    auto local = f.net.inject(f.h1, f.packet({kHost1, 1}, {kHost1, 5064}), 0us);
    EXPECT_EQ(local.at(0).time, 0us);
}

TEST(Determinism, SameSeedSameLog) {
    auto run = [](std::uint64_t seed) {
        Fixture f(LinkModel{200us, 150us, seed});
        f.net.add_helper_rule({f.console, 5064, {kHost1}});
        std::mt19937_64 rng(1);
        for (int i = 0; i < 200; ++i) {
            auto dst = rng() % 2 ? SocketAddress{kHost1, 5064} : SocketAddress{kConsoleNet.broadcast(), 5064};
            f.net.inject(f.client, f.packet({kConsole, static_cast<std::uint16_t>(1000 + i)}, dst),
                         std::chrono::microseconds(static_cast<std::int64_t>(rng() % 5000)) + f.net.now());
        }
        f.net.advance_clock(1s);
        return f.net.trace();
    };
    EXPECT_EQ(run(7), run(7));
    EXPECT_NE(run(7), run(8));
}

TEST(Stream, ReliableChannel) {
    Fixture f;
    std::vector<Delivery> got;
    auto server = f.net.new_endpoint([&](const Delivery& d) { got.push_back(d); });
    f.net.listen_stream(f.h2, 40001, server);
    auto d = f.net.send_stream(f.client, {kConsole, 35688}, {kHost2, 40001}, Bytes{1, 2, 3}, 0us);
    ASSERT_TRUE(d);
    EXPECT_EQ(d->kind, DeliveryKind::Stream);
    EXPECT_FALSE(f.net.send_stream(f.client, {kConsole, 35688}, {kHost2, 40002}, Bytes{1}, 0us));
    f.net.advance_clock(1ms);
    ASSERT_EQ(got.size(), 1u);
    EXPECT_EQ(got[0].packet.payload, (Bytes{1, 2, 3}));
}

TEST(Trace, TcpdumpStyleLines) {
    Fixture f;
    f.net.inject(f.client, f.packet({kConsole, 35687}, {kHost1, 5064}), 0us);
    f.net.advance_clock(1ms);
    EXPECT_EQ(f.net.trace(), "0.000200 IP 10.2.105.171.35687 > 10.2.1.31.5064: UDP, length 48\n");
}

TEST(Timers, ScheduledCallbacksFire) {
    Network net;
    std::vector<int> order;
    net.schedule(20us, [&] { order.push_back(2); });
    net.schedule(10us, [&] { order.push_back(1); });
    net.schedule(20us, [&] { order.push_back(3); });
    net.advance_clock(1ms);
    EXPECT_EQ(order, (std::vector<int>{1, 2, 3}));
}
