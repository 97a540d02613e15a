#include <gtest/gtest.h>

#include <thread>

#include "carelay/posix_transport.hpp"

using namespace carelay;
using namespace carelay::posix;
using namespace std::chrono_literals;

namespace {

const Ipv4Address kLoopback = Ipv4Address::parse("127.0.0.1");

endpoints::ClientQueryConfig quick_schedule() {
    endpoints::ClientQueryConfig q;
    q.initial_retry = 20ms;
    q.max_tries = 3;
    q.total_timeout = 300ms;
    return q;
}

/// Answers every search for `pv` on 127.0.0.1:`port` until told to stop.
class FakeIoc {
public:
    FakeIoc(std::uint16_t port, std::string pv, std::uint16_t server_port)
        : fd_(udp_socket({kLoopback, port})), pv_(std::move(pv)), server_port_(server_port) {
        thread_ = std::thread([this] { serve(); });
    }
    ~FakeIoc() {
        done_ = true;
        thread_.join();
    }
    int answered() const { return answered_; }

private:
    void serve() {
        while (!done_) {
            pollfd p{fd_.get(), POLLIN, 0};
            ::poll(&p, 1, 20);
            while (auto r = receive(fd_.get())) {
                auto req = ca::find_search_request(r->payload);
                if (!req || req->pv_name != pv_) continue;
                ca::SearchResponse resp;
                resp.server_port = server_port_;
                resp.search_id = req->search_id;
                resp.server_address = kLoopback;
                send_to(fd_.get(), r->from, ca::encode_search_response_datagram(resp));
                ++answered_;
            }
        }
    }

    Fd fd_;
    std::string pv_;
    std::uint16_t server_port_;
    std::atomic<bool> done_{false};
    std::atomic<int> answered_{0};
    std::thread thread_;
};

}  // namespace

TEST(Posix, ResolveTimesOutOnSilence) {
    Fd silent = udp_socket({kLoopback, 0});
    sockaddr_in sa{};
    socklen_t len = sizeof sa;
    ASSERT_EQ(::getsockname(silent.get(), reinterpret_cast<sockaddr*>(&sa), &len), 0);
    const auto start = std::chrono::steady_clock::now();
    auto r = resolve("NOPE", {kLoopback, ntohs(sa.sin_port)}, quick_schedule());
    EXPECT_FALSE(r);
    EXPECT_GE(std::chrono::steady_clock::now() - start, 300ms);
    int searches = 0;
    while (receive(silent.get())) ++searches;
    EXPECT_EQ(searches, 3);
}

TEST(Posix, ResolveDirect) {
    FakeIoc ioc(45901, "IMX1-HOST1", 40006);
    auto r = resolve("IMX1-HOST1", {kLoopback, 45901}, quick_schedule());
    ASSERT_TRUE(r);
    EXPECT_EQ(r->server, (SocketAddress{kLoopback, 40006}));
    EXPECT_EQ(r->responder, (SocketAddress{kLoopback, 45901}));
}

TEST(Posix, ProxyRelayOnLoopback) {
    FakeIoc ioc(45902, "IMX:DMC4:m3", 5064);
    relay::RelayConfig cfg;
    cfg.mode = relay::Mode::Proxy;
    cfg.listen_port = 45903;
    cfg.target_broadcast = kLoopback;
    cfg.target_port = 45902;
    cfg.flow_port_base = 45910;
    cfg.flow_port_count = 10;
    std::vector<std::string> log;
    PosixRelay relay({cfg, std::nullopt, [&](const std::string& line) { log.push_back(line); }});
    stop_requested = 0;
    std::thread t([&] { relay.run(); });
    auto r = resolve("IMX:DMC4:m3", {kLoopback, 45903}, quick_schedule());
    stop_requested = 1;
    t.join();
    stop_requested = 0;
    ASSERT_TRUE(r);
    EXPECT_EQ(r->server, (SocketAddress{kLoopback, 5064}));
    EXPECT_EQ(r->responder, (SocketAddress{kLoopback, 45903}));
    EXPECT_EQ(ioc.answered(), 1);
    EXPECT_EQ(relay.counters().relayed, 1u);
    EXPECT_EQ(relay.counters().replies_forwarded, 1u);
    ASSERT_EQ(log.size(), 1u);
    EXPECT_NE(log[0].find("> 127.0.0.1.45903: UDP, length 48"), std::string::npos) << log[0];
}
