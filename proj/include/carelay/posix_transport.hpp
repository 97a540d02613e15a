#pragma once

// Real-socket transport for the relay engine (Linux).
//
// SPOOF writes complete IPv4/UDP datagrams to a raw socket, so the original
// client address survives. That requires CAP_NET_RAW. PROXY and FORK_MODEL
// use one ordinary UDP socket per client flow.

#include <arpa/inet.h>
#include <fcntl.h>
#include <net/if.h>
#include <netinet/in.h>
#include <netinet/ip.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "carelay/ca_wire.hpp"
#include "carelay/endpoints.hpp"
#include "carelay/packet.hpp"
#include "carelay/relay.hpp"

namespace carelay::posix {

using Micros = std::chrono::microseconds;

class PrivilegeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::system_error sys_error(const std::string& what) {
    return std::system_error(errno, std::generic_category(), what);
}

/// Owns a file descriptor.
class Fd {
public:
    Fd() = default;
    explicit Fd(int fd) : fd_(fd) {}
    Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Fd& operator=(Fd&& o) noexcept {
        if (this != &o) {
            reset();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    Fd(const Fd&) = delete;
    Fd& operator=(const Fd&) = delete;
    ~Fd() { reset(); }

    int get() const { return fd_; }
    explicit operator bool() const { return fd_ >= 0; }
    void reset() {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }

private:
    int fd_ = -1;
};

inline sockaddr_in to_sockaddr(SocketAddress a) {
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(a.port);
    sa.sin_addr.s_addr = htonl(a.ip.value());
    return sa;
}

inline SocketAddress from_sockaddr(const sockaddr_in& sa) {
    return {Ipv4Address(ntohl(sa.sin_addr.s_addr)), ntohs(sa.sin_port)};
}

inline void set_option(int fd, int level, int name, int value, const char* what) {
    if (::setsockopt(fd, level, name, &value, sizeof value) < 0) throw sys_error(what);
}

/// Non-blocking UDP socket bound to `local`, broadcast-capable.
inline Fd udp_socket(SocketAddress local) {
    Fd fd(::socket(AF_INET, SOCK_DGRAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0));
    if (!fd) throw sys_error("socket");
    set_option(fd.get(), SOL_SOCKET, SO_REUSEADDR, 1, "SO_REUSEADDR");
    set_option(fd.get(), SOL_SOCKET, SO_BROADCAST, 1, "SO_BROADCAST");
    auto sa = to_sockaddr(local);
    if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) < 0) {
        throw sys_error("bind " + local.to_string());
    }
    return fd;
}

/// Raw socket for hand-built IPv4 headers.
inline Fd raw_socket(const std::optional<std::string>& interface) {
    Fd fd(::socket(AF_INET, SOCK_RAW | SOCK_CLOEXEC, IPPROTO_RAW));
    if (!fd) {
        if (errno == EPERM || errno == EACCES) {
            throw PrivilegeError(
                "SPOOF mode needs a raw socket (CAP_NET_RAW). Run as root, grant the capability with "
                "`setcap cap_net_raw+ep <binary>`, or use --mode proxy.");
        }
        throw sys_error("raw socket");
    }
    set_option(fd.get(), IPPROTO_IP, IP_HDRINCL, 1, "IP_HDRINCL");
    set_option(fd.get(), SOL_SOCKET, SO_BROADCAST, 1, "SO_BROADCAST");
    if (interface) {
        if (::setsockopt(fd.get(), SOL_SOCKET, SO_BINDTODEVICE, interface->c_str(),
                         static_cast<socklen_t>(interface->size())) < 0) {
            if (errno == EPERM) throw PrivilegeError("binding to interface " + *interface + " needs CAP_NET_RAW");
            throw sys_error("SO_BINDTODEVICE " + *interface);
        }
    }
    return fd;
}

/// Set by SIGINT/SIGTERM.
inline volatile std::sig_atomic_t stop_requested = 0;

inline void install_stop_handler() {
    struct sigaction sa{};
    sa.sa_handler = [](int) { stop_requested = 1; };
    sigemptyset(&sa.sa_mask);
    sa.sa_flags = 0;
    ::sigaction(SIGINT, &sa, nullptr);
    ::sigaction(SIGTERM, &sa, nullptr);
}

struct Received {
    SocketAddress from;
    Ipv4Address local_ip;
    Bytes payload;
};

/// One datagram, or nullopt if none is waiting.
inline std::optional<Received> receive(int fd) {
    Bytes buf(65536);
    sockaddr_in from{};
    iovec iov{buf.data(), buf.size()};
    alignas(cmsghdr) char control[CMSG_SPACE(sizeof(in_pktinfo))];
    msghdr msg{};
    msg.msg_name = &from;
    msg.msg_namelen = sizeof from;
    msg.msg_iov = &iov;
    msg.msg_iovlen = 1;
    msg.msg_control = control;
    msg.msg_controllen = sizeof control;
    const auto n = ::recvmsg(fd, &msg, 0);
    if (n < 0) {
        if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) return std::nullopt;
        throw sys_error("recvmsg");
    }
    buf.resize(static_cast<std::size_t>(n));
    Received r{from_sockaddr(from), Ipv4Address{}, std::move(buf)};
    for (auto* c = CMSG_FIRSTHDR(&msg); c; c = CMSG_NXTHDR(&msg, c)) {
        if (c->cmsg_level == IPPROTO_IP && c->cmsg_type == IP_PKTINFO) {
            in_pktinfo info;
            std::memcpy(&info, CMSG_DATA(c), sizeof info);
            r.local_ip = Ipv4Address(ntohl(info.ipi_addr.s_addr));
        }
    }
    return r;
}

inline void send_to(int fd, SocketAddress to, ByteView payload) {
    auto sa = to_sockaddr(to);
    if (::sendto(fd, payload.data(), payload.size(), 0, reinterpret_cast<sockaddr*>(&sa), sizeof sa) < 0) {
        throw sys_error("sendto " + to.to_string());
    }
}

/// Relay engine on real sockets.
class PosixRelay {
public:
    struct Options {
        relay::RelayConfig config;
        std::optional<std::string> interface;
        /// Called for every datagram that reaches the listening socket.
        std::function<void(const std::string&)> log;
    };

    explicit PosixRelay(Options options)
        : options_(std::move(options)), engine_(options_.config), start_(Clock::now()) {
        const auto& cfg = engine_.config();
        if (cfg.mode == relay::Mode::Spoof) raw_ = raw_socket(options_.interface);
        listen_ = udp_socket({Ipv4Address{}, cfg.listen_port});
        set_option(listen_.get(), IPPROTO_IP, IP_PKTINFO, 1, "IP_PKTINFO");
    }

    const relay::RelayCounters& counters() const { return engine_.counters(); }

    /// Serves until stop_requested, then sends anything still delayed.
    void run() {
        while (!stop_requested) {
            std::vector<pollfd> fds{{listen_.get(), POLLIN, 0}};
            std::vector<std::uint16_t> ports{0};
            for (auto& [port, fd] : flows_) {
                fds.push_back({fd.get(), POLLIN, 0});
                ports.push_back(port);
            }
            const int rc = ::poll(fds.data(), fds.size(), poll_timeout_ms());
            if (rc < 0 && errno != EINTR) throw sys_error("poll");
            if (rc > 0) {
                for (std::size_t i = 0; i < fds.size(); ++i) {
                    if (!(fds[i].revents & POLLIN)) continue;
                    if (i == 0) drain_listen();
                    else drain_flow(ports[i], fds[i].fd);
                }
            }
            run_due(now());
            std::vector<relay::Action> closed;
            engine_.expire_flows(now(), &closed);
            perform(std::move(closed));
        }
        while (!pending_.empty()) {
            auto action = pending_.top().action;
            pending_.pop();
            apply_now(action);
        }
    }

private:
    using Clock = std::chrono::steady_clock;

    struct Delayed {
        Micros due;
        std::uint64_t seq;
        relay::Action action;
        bool operator>(const Delayed& o) const { return due != o.due ? due > o.due : seq > o.seq; }
    };

    Micros now() const { return std::chrono::duration_cast<Micros>(Clock::now() - start_); }

    int poll_timeout_ms() const {
        std::optional<Micros> next = engine_.next_expiry();
        if (!pending_.empty() && (!next || pending_.top().due < *next)) next = pending_.top().due;
        if (!next) return 500;
        auto wait = *next - now();
        if (wait <= Micros{0}) return 0;
        return static_cast<int>(std::min<std::int64_t>(500, (wait.count() + 999) / 1000));
    }

    void drain_listen() {
        const auto port = engine_.config().listen_port;
        while (auto r = receive(listen_.get())) {
            Ipv4UdpPacket p;
            p.src_ip = r->from.ip;
            p.src_port = r->from.port;
            p.dst_ip = r->local_ip;
            p.dst_port = port;
            p.payload = std::move(r->payload);
            finalize(p);
            if (options_.log) {
                options_.log(r->from.to_string() + " > " + p.dst_ip.to_string() + "." + std::to_string(port) +
                             ": UDP, length " + std::to_string(p.payload.size()));
            }
            perform(engine_.on_listen_datagram(p, now()));
        }
    }

    void drain_flow(std::uint16_t port, int fd) {
        while (auto r = receive(fd)) perform(engine_.on_flow_datagram(port, r->payload, now()));
    }

    void perform(std::vector<relay::Action> actions) {
        for (auto& a : actions) {
            Micros delay{0};
            if (auto* e = std::get_if<relay::EmitPacket>(&a)) delay = e->delay;
            if (auto* s = std::get_if<relay::SendFromFlow>(&a)) delay = s->delay;
            if (delay > Micros{0}) {
                pending_.push({now() + delay, seq_++, std::move(a)});
            } else {
                apply_now(a);
            }
        }
    }

    void run_due(Micros t) {
        while (!pending_.empty() && pending_.top().due <= t) {
            auto action = pending_.top().action;
            pending_.pop();
            apply_now(action);
        }
    }

    void apply_now(const relay::Action& action) {
        std::visit([this](const auto& a) { apply(a); }, action);
    }

    void apply(const relay::EmitPacket& a) {
        const auto wire = encode(a.packet);
        auto sa = to_sockaddr(a.packet.destination());
        if (::sendto(raw_.get(), wire.data(), wire.size(), 0, reinterpret_cast<sockaddr*>(&sa), sizeof sa) < 0) {
            throw sys_error("raw sendto " + a.packet.destination().to_string());
        }
    }

    void apply(const relay::SendFromFlow& a) {
        auto it = flows_.find(a.local_port);
        if (it == flows_.end()) return;
        send_to(it->second.get(), a.to, a.payload);
    }

    void apply(const relay::SendToClient& a) { send_to(listen_.get(), a.client, a.payload); }

    void apply(const relay::OpenFlow& a) { flows_[a.local_port] = udp_socket({Ipv4Address{}, a.local_port}); }

    void apply(const relay::CloseFlow& a) { flows_.erase(a.local_port); }

    Options options_;
    relay::RelayEngine engine_;
    Clock::time_point start_;
    Fd listen_;
    Fd raw_;
    std::map<std::uint16_t, Fd> flows_;
    std::priority_queue<Delayed, std::vector<Delayed>, std::greater<>> pending_;
    std::uint64_t seq_ = 0;
};

struct Resolution {
    /// Address the server asked the client to connect to.
    SocketAddress server;
    /// Sender of the search response.
    SocketAddress responder;
};

/// Name resolution against real servers with the client retry schedule.
inline std::optional<Resolution> resolve(const std::string& pv, SocketAddress destination,
                                         const endpoints::ClientQueryConfig& schedule) {
    ca::validate_name(pv);
    schedule.validate();
    Fd fd = udp_socket({Ipv4Address{}, 0});
    const auto start = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration_cast<Micros>(std::chrono::steady_clock::now() - start);
    };
    const std::uint32_t search_id = static_cast<std::uint32_t>(::getpid()) & 0xFFFFu;
    const auto datagram = ca::encode_search_datagram({pv, search_id, ca::ReplyFlag::DontReply});
    Micros next_send{0};
    int sent = 0;
    while (elapsed() < schedule.total_timeout) {
        if (sent < schedule.max_tries && elapsed() >= next_send) {
            send_to(fd.get(), destination, datagram);
            next_send += schedule.gap(sent);
            ++sent;
        }
        auto deadline = sent < schedule.max_tries ? std::min(next_send, schedule.total_timeout)
                                                  : schedule.total_timeout;
        auto wait = deadline - elapsed();
        pollfd p{fd.get(), POLLIN, 0};
        int ms = static_cast<int>(std::max<std::int64_t>(0, (wait.count() + 999) / 1000));
        if (::poll(&p, 1, ms) < 0 && errno != EINTR) throw sys_error("poll");
        while (auto r = receive(fd.get())) {
            std::optional<ca::SearchResponse> resp;
            try {
                resp = ca::find_search_response(r->payload);
            } catch (const ca::WireError&) {
                continue;
            }
            if (!resp || resp->search_id != search_id) continue;
            return Resolution{{resp->server_address.value_or(r->from.ip), resp->server_port}, r->from};
        }
    }
    return std::nullopt;
}

}  // namespace carelay::posix
