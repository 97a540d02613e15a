#pragma once

// Simulated IOCs and a caget/caput client running on the virtual network.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "carelay/ca_wire.hpp"
#include "carelay/netsim.hpp"
#include "carelay/packet.hpp"

namespace carelay::endpoints {

using Micros = std::chrono::microseconds;
using namespace std::chrono_literals;

struct PvRecord {
    std::string name;
    double value = 0.0;
};

/// Message printed by caget/caput when no server answers.
inline std::string timeout_message(const std::string& pv_name) {
    return "Channel connect timed out: '" + pv_name + "' not found.";
}

class TimeoutError : public std::runtime_error {
public:
    explicit TimeoutError(const std::string& pv_name)
        : std::runtime_error(timeout_message(pv_name)), pv_name_(pv_name) {}
    const std::string& pv_name() const { return pv_name_; }

private:
    std::string pv_name_;
};

struct OutgoingDatagram {
    SocketAddress to;
    Bytes datagram;
};

class IocSim {
public:
    struct Options {
        std::string name;
        std::vector<PvRecord> pvs;
        std::uint16_t server_port = 5064;
        std::uint16_t search_port = ca::kSearchPort;
        /// Put the host address in search responses instead of the
        /// "use packet source" marker.
        bool advertise_address = false;
    };

    IocSim(sim::Network& net, sim::HostId host, Options options)
        : net_(net), host_(host), options_(std::move(options)) {
        for (std::size_t i = 0; i < options_.pvs.size(); ++i) {
            for (std::size_t j = 0; j < i; ++j) {
                if (options_.pvs[i].name == options_.pvs[j].name) {
                    throw std::invalid_argument("duplicate PV " + options_.pvs[i].name + " in IOC " +
                                                options_.name);
                }
            }
        }
        id_ = net_.new_endpoint([this](const sim::Delivery& d) { on_delivery(d); });
        binding_ = net_.bind(host_, options_.search_port, id_);
        net_.listen_stream(host_, options_.server_port, id_);
    }

    IocSim(const IocSim&) = delete;
    IocSim& operator=(const IocSim&) = delete;

    const std::string& name() const { return options_.name; }
    const sim::SocketBinding& binding() const { return binding_; }
    sim::HostId host() const { return host_; }
    std::uint16_t server_port() const { return options_.server_port; }
    std::uint64_t searches_answered() const { return answered_; }

    std::optional<double> value(const std::string& pv) const {
        if (auto* r = find(pv)) return r->value;
        return std::nullopt;
    }

    /// Responses for every search in `datagram` naming a PV this IOC owns.
    /// Names are matched exactly; non-matching searches get no reply.
    std::vector<OutgoingDatagram> on_search(ByteView datagram, SocketAddress source) const {
        std::vector<OutgoingDatagram> out;
        std::vector<ca::CaMessage> messages;
        try {
            messages = ca::decode_datagram(datagram);
        } catch (const ca::WireError&) {
            return out;
        }
        for (auto& m : messages) {
            auto* req = std::get_if<ca::SearchRequest>(&m);
            if (!req || !find(req->pv_name)) continue;
            ca::SearchResponse resp;
            resp.server_port = options_.server_port;
            resp.search_id = req->search_id;
            if (options_.advertise_address) resp.server_address = net_.primary_ip(host_);
            out.push_back({source, ca::encode_search_response_datagram(resp)});
        }
        return out;
    }

private:
    const PvRecord* find(const std::string& pv) const {
        for (auto& r : options_.pvs) {
            if (r.name == pv) return &r;
        }
        return nullptr;
    }
    PvRecord* find(const std::string& pv) {
        return const_cast<PvRecord*>(std::as_const(*this).find(pv));
    }

    void on_delivery(const sim::Delivery& d) {
        if (d.kind == sim::DeliveryKind::Datagram) {
            const SocketAddress own{net_.primary_ip(host_), options_.search_port};
            for (auto& r : on_search(d.packet.payload, d.packet.source())) {
                ++answered_;
                net_.inject(host_, encoder_.make(own, r.to, std::move(r.datagram)), net_.now());
            }
            return;
        }
        ca::ValueExchange msg;
        try {
            msg = ca::decode_value_exchange(d.packet.payload);
        } catch (const ca::WireError&) {
            return;
        }
        auto* pv = find(msg.pv_name);
        if (!pv) return;
        ca::ValueExchange reply{ca::ValueKind::ReadReply, msg.pv_name, pv->value, msg.sequence};
        if (msg.kind == ca::ValueKind::WriteRequest) {
            pv->value = *msg.value;
            reply = {ca::ValueKind::WriteAck, msg.pv_name, std::nullopt, msg.sequence};
        } else if (msg.kind != ca::ValueKind::ReadRequest) {
            return;
        }
        net_.send_stream(host_, {d.packet.dst_ip, options_.server_port}, d.packet.source(),
                         ca::encode_value_exchange(reply), net_.now());
    }

    sim::Network& net_;
    sim::HostId host_;
    Options options_;
    sim::EndpointId id_ = 0;
    sim::SocketBinding binding_;
    PacketEncoder encoder_;
    std::uint64_t answered_ = 0;
};

struct ClientQueryConfig {
    Micros initial_retry = 30ms;
    double backoff_factor = 2.0;
    int max_tries = 5;
    Micros total_timeout = 5s;

    /// Wait after send k (0-based) before send k+1.
    Micros gap(int k) const {
        return Micros{static_cast<std::int64_t>(
            std::llround(static_cast<double>(initial_retry.count()) * std::pow(backoff_factor, k)))};
    }

    Micros scheduled_waits() const {
        Micros total{0};
        for (int k = 0; k + 1 < max_tries; ++k) total += gap(k);
        return total;
    }

    void validate() const {
        if (initial_retry <= Micros{0}) throw std::invalid_argument("initial_retry must be positive");
        if (!(backoff_factor > 1.0)) throw std::invalid_argument("backoff_factor must exceed 1");
        if (max_tries < 1) throw std::invalid_argument("max_tries must be at least 1");
        if (total_timeout < scheduled_waits()) {
            throw std::invalid_argument("total_timeout shorter than the retry schedule");
        }
    }
};

enum class Outcome { Value, Ack, Timeout };

inline const char* to_string(Outcome o) {
    switch (o) {
        case Outcome::Value: return "VALUE";
        case Outcome::Ack: return "ACK";
        case Outcome::Timeout: return "TIMEOUT";
    }
    return "?";
}

struct QueryResult {
    std::string pv_name;
    Outcome outcome = Outcome::Timeout;
    std::optional<double> value;
    Micros started{0};
    Micros finished{0};
    std::vector<Micros> send_times;
    SocketAddress search_source;
    std::optional<SocketAddress> server;
    std::uint64_t responses_seen = 0;

    Micros latency() const { return finished - started; }
    std::string error_message() const { return timeout_message(pv_name); }
};

/// caget/caput client living on one simulated host.
class ClientSim {
public:
    struct Options {
        ClientQueryConfig query;
        /// Where searches go; defaults to the directed broadcast of the
        /// host's first interface on port 5064.
        std::optional<SocketAddress> search_destination;
        std::uint16_t first_ephemeral_port = 35687;
    };

    ClientSim(sim::Network& net, sim::HostId host, Options options)
        : net_(net), host_(host), options_(std::move(options)) {
        options_.query.validate();
        if (!options_.search_destination) {
            options_.search_destination =
                SocketAddress{net_.interfaces(host_).front().subnet.broadcast(), ca::kSearchPort};
        }
        next_port_ = options_.first_ephemeral_port;
    }

    ClientSim(const ClientSim&) = delete;
    ClientSim& operator=(const ClientSim&) = delete;

    using Callback = std::function<void(const QueryResult&)>;

    void start_get(const std::string& pv, Callback done) { start(pv, std::nullopt, std::move(done)); }

    void start_put(const std::string& pv, double value, Callback done) {
        start(pv, value, std::move(done));
    }

    /// Runs a read to completion on the network's clock.
    QueryResult get(const std::string& pv) { return run(pv, std::nullopt); }
    QueryResult put(const std::string& pv, double value) { return run(pv, value); }

    /// Value or TimeoutError.
    double caget(const std::string& pv) {
        auto r = get(pv);
        if (r.outcome != Outcome::Value) throw TimeoutError(pv);
        return *r.value;
    }

    void caput(const std::string& pv, double value) {
        auto r = put(pv, value);
        if (r.outcome != Outcome::Ack) throw TimeoutError(pv);
    }

    sim::HostId host() const { return host_; }
    const ClientQueryConfig& query_config() const { return options_.query; }
    std::size_t active_queries() const { return active_; }

private:
    struct Query {
        QueryResult result;
        std::optional<double> put_value;
        Callback done;
        std::uint32_t search_id = 0;
        std::uint16_t udp_port = 0;
        std::uint16_t stream_port = 0;
        sim::EndpointId endpoint = 0;
        bool resolved = false;
        bool finished = false;
    };

    QueryResult run(const std::string& pv, std::optional<double> put_value) {
        QueryResult out;
        bool done = false;
        start(pv, put_value, [&](const QueryResult& r) {
            out = r;
            done = true;
        });
        net_.run_until([&] { return done; }, Micros::max());
        if (!done) throw std::logic_error("query never completed");
        return out;
    }

    std::uint16_t allocate_port() {
        for (;;) {
            const auto port = next_port_++;
            if (next_port_ < 1024) next_port_ = 1024;
            if (!net_.port_bound(host_, port)) return port;
        }
    }

    void start(const std::string& pv, std::optional<double> put_value, Callback done) {
        ca::validate_name(pv);
        auto q = std::make_shared<Query>();
        q->result.pv_name = pv;
        q->put_value = put_value;
        q->done = std::move(done);
        q->search_id = ++search_counter_;
        q->udp_port = allocate_port();
        q->endpoint = net_.new_endpoint([this, q](const sim::Delivery& d) { on_delivery(q, d); });
        net_.bind(host_, q->udp_port, q->endpoint);
        ++active_;

        const Micros t0 = net_.now();
        q->result.started = t0;
        q->result.search_source = {net_.primary_ip(host_), q->udp_port};
        Micros offset{0};
        for (int k = 0; k < options_.query.max_tries; ++k) {
            net_.schedule(t0 + offset, [this, q] { send_search(q); });
            offset += options_.query.gap(k);
        }
        net_.schedule(t0 + options_.query.total_timeout, [this, q] {
            if (!q->finished) finish(q, Outcome::Timeout);
        });
    }

    void send_search(const std::shared_ptr<Query>& q) {
        if (q->resolved || q->finished) return;
        ca::SearchRequest req{q->result.pv_name, q->search_id, ca::ReplyFlag::DontReply,
                              ca::kDefaultMinorVersion};
        q->result.send_times.push_back(net_.now());
        net_.inject(host_, encoder_.make(q->result.search_source, *options_.search_destination,
                                         ca::encode_search_datagram(req)),
                    net_.now());
    }

    void on_delivery(const std::shared_ptr<Query>& q, const sim::Delivery& d) {
        if (q->finished) return;
        if (d.kind == sim::DeliveryKind::Datagram) {
            std::optional<ca::SearchResponse> resp;
            try {
                resp = ca::find_search_response(d.packet.payload);
            } catch (const ca::WireError&) {
                return;
            }
            if (!resp || resp->search_id != q->search_id) return;
            ++q->result.responses_seen;
            if (q->resolved) return;  // first response wins
            q->resolved = true;
            const SocketAddress server{resp->server_address.value_or(d.packet.src_ip), resp->server_port};
            q->result.server = server;
            q->stream_port = allocate_port();
            net_.listen_stream(host_, q->stream_port, q->endpoint);
            ca::ValueExchange msg{ca::ValueKind::ReadRequest, q->result.pv_name, std::nullopt,
                                  q->search_id};
            if (q->put_value) msg = {ca::ValueKind::WriteRequest, q->result.pv_name, q->put_value, q->search_id};
            net_.send_stream(host_, {net_.primary_ip(host_), q->stream_port}, server,
                             ca::encode_value_exchange(msg), net_.now());
            return;
        }
        ca::ValueExchange reply;
        try {
            reply = ca::decode_value_exchange(d.packet.payload);
        } catch (const ca::WireError&) {
            return;
        }
        if (reply.sequence != q->search_id) return;
        if (reply.kind == ca::ValueKind::ReadReply && !q->put_value) {
            q->result.value = reply.value;
            finish(q, Outcome::Value);
        } else if (reply.kind == ca::ValueKind::WriteAck && q->put_value) {
            finish(q, Outcome::Ack);
        }
    }

    void finish(const std::shared_ptr<Query>& q, Outcome outcome) {
        q->finished = true;
        q->result.outcome = outcome;
        q->result.finished = net_.now();
        net_.unbind(host_, q->udp_port, q->endpoint);
        if (q->stream_port) net_.close_stream(host_, q->stream_port);
        net_.set_handler(q->endpoint, {});
        --active_;
        auto done = std::move(q->done);
        if (done) done(q->result);
    }

    sim::Network& net_;
    sim::HostId host_;
    Options options_;
    PacketEncoder encoder_;
    std::uint16_t next_port_ = 0;
    std::uint32_t search_counter_ = 0;
    std::size_t active_ = 0;
};

}  // namespace carelay::endpoints
