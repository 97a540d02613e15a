#pragma once

// Command-line driver: relay, sim, bench, caget, caput.
//
// Exit codes: 0 success, 1 query timeout or other runtime failure,
// 2 configuration error, 3 missing privilege.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "carelay/bench.hpp"
#include "carelay/config.hpp"
#include "carelay/posix_transport.hpp"

namespace carelay::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitTimeout = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitPrivilege = 3;

enum class LogLevel { Quiet, Normal, Trace };

/// `<name>` padded to 26 columns, a space, then the value as %g.
inline std::string format_value_line(const std::string& name, double value) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-26s %g\n", name.c_str(), value);
    return buf;
}

inline std::string format_text_line(const std::string& name, const std::string& text) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-26s %s\n", name.c_str(), text.c_str());
    return buf;
}

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Flags {
    std::string config_path;
    int listen_port = 0;
    std::string target;
    std::vector<std::string> allow;
    std::string local_subnet;
    std::string mode;
    std::string transport;
    std::uint64_t seed = 1;
    int reps = 1;
    std::string format = "text";
    std::string log = "normal";
    std::string scenario = "C";
    std::string interface;
    std::vector<std::string> pvs;
    std::string put_pv;
    double put_value = 0;

    const CLI::Option* listen_port_opt = nullptr;
    const CLI::Option* target_opt = nullptr;
    const CLI::Option* allow_opt = nullptr;
    const CLI::Option* local_subnet_opt = nullptr;
    const CLI::Option* mode_opt = nullptr;
    const CLI::Option* seed_opt = nullptr;
    const CLI::Option* reps_opt = nullptr;
    const CLI::Option* interface_opt = nullptr;

    bool given(const CLI::Option* o) const { return o && o->count() > 0; }
};

namespace detail {

inline void add_common(CLI::App* app, Flags& f) {
    app->add_option("--config", f.config_path, "YAML configuration file");
    app->add_option("--listen-port", f.listen_port, "Relay listening port");
    app->add_option("--target", f.target, "Relay target broadcast IP:PORT");
    app->add_option("--allow", f.allow, "Allowed source prefix (repeatable)")
        ->expected(1)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    app->add_option("--local-subnet", f.local_subnet, "Local prefix whose sources are dropped");
    app->add_option("--mode", f.mode, "Relay mode")->check(CLI::IsMember({"spoof", "proxy", "fork"}));
    app->add_option("--transport", f.transport, "sim or real")->check(CLI::IsMember({"sim", "real"}));
    app->add_option("--seed", f.seed, "Simulation seed");
    app->add_option("--reps", f.reps, "Repetitions");
    app->add_option("--format", f.format, "Report format")->check(CLI::IsMember({"text", "records"}));
    app->add_option("--log", f.log, "Logging level")->check(CLI::IsMember({"quiet", "normal", "trace"}));
    app->add_option("--scenario", f.scenario, "Built-in scenario when no topology is configured")
        ->check(CLI::IsMember({"A", "B", "C", "a", "b", "c"}));
}

/// Points the presence checks at the options of the subcommand that ran.
inline void bind_presence(const CLI::App* app, Flags& f) {
    f.listen_port_opt = app->get_option_no_throw("--listen-port");
    f.target_opt = app->get_option_no_throw("--target");
    f.allow_opt = app->get_option_no_throw("--allow");
    f.local_subnet_opt = app->get_option_no_throw("--local-subnet");
    f.mode_opt = app->get_option_no_throw("--mode");
    f.seed_opt = app->get_option_no_throw("--seed");
    f.reps_opt = app->get_option_no_throw("--reps");
    f.interface_opt = app->get_option_no_throw("--interface");
}

inline LogLevel log_level(const Flags& f) {
    if (f.log == "quiet") return LogLevel::Quiet;
    if (f.log == "trace") return LogLevel::Trace;
    return LogLevel::Normal;
}

/// Applies command-line overrides and validates.
inline relay::RelayConfig apply_relay_flags(relay::RelayConfig c, const Flags& f) {
    if (f.given(f.listen_port_opt)) {
        if (f.listen_port < 0 || f.listen_port > 65535) {
            throw relay::ConfigError("listen_port", "must be 1-65535");
        }
        c.listen_port = static_cast<std::uint16_t>(f.listen_port);
    }
    if (f.given(f.target_opt)) {
        auto t = SocketAddress::parse(f.target);
        c.target_broadcast = t.ip;
        c.target_port = t.port;
    }
    if (f.given(f.allow_opt)) {
        c.allow_sources.clear();
        for (auto& a : f.allow) c.allow_sources.push_back(Cidr::parse(a));
    }
    if (f.given(f.local_subnet_opt)) c.local_subnet = Cidr::parse(f.local_subnet);
    if (f.given(f.mode_opt)) c.mode = *relay::parse_mode(f.mode);
    c.validate();
    return c;
}

inline bool relay_flags_given(const Flags& f) {
    return f.given(f.listen_port_opt) || f.given(f.target_opt) || f.given(f.allow_opt) ||
           f.given(f.local_subnet_opt) || f.given(f.mode_opt);
}

inline std::optional<config::ConfigFile> load(const Flags& f) {
    if (f.config_path.empty()) return std::nullopt;
    return config::load_config(f.config_path);
}

inline const char* arm_label(relay::Mode m) {
    switch (m) {
        case relay::Mode::Spoof: return "SPOOF";
        case relay::Mode::Proxy: return "PROXY";
        case relay::Mode::ForkModel: return "FORK_MODEL";
    }
    return "?";
}

inline bench::Scenario builtin(const Flags& f) {
    const char s = static_cast<char>(std::toupper(static_cast<unsigned char>(f.scenario.at(0))));
    if (s == 'A') return bench::scenario_a();
    if (s == 'B') return bench::scenario_b();
    return bench::scenario_c(f.given(f.mode_opt) ? *relay::parse_mode(f.mode) : relay::Mode::Spoof);
}

inline bench::Scenario scenario(const std::optional<config::ConfigFile>& file, const Flags& f) {
    bench::Scenario s = file && file->topology ? config::to_scenario(*file) : builtin(f);
    if (relay_flags_given(f)) {
        if (!s.relay) throw relay::ConfigError("mode", "scenario " + s.name + " has no relay");
        const auto before = s.relay->config.mode;
        s.relay->config = apply_relay_flags(s.relay->config, f);
        if (s.relay->config.mode != before) {
            s.arm = arm_label(s.relay->config.mode);
            if (s.relay->config.mode != relay::Mode::Spoof) {
                for (auto& ioc : s.iocs) ioc.options.advertise_address = true;
            }
        }
    }
    if (f.given(f.seed_opt)) s.seed = f.seed;
    if (f.given(f.reps_opt)) {
        if (f.reps < 1) throw relay::ConfigError("reps", "must be at least 1");
        s.repetitions = f.reps;
    }
    return s;
}

inline void print_trace(const bench::World& w, std::ostream& err) { err << w.net->trace(); }

inline int cmd_sim(const Flags& f, std::ostream& out, std::ostream& err) {
    auto s = scenario(load(f), f);
    const auto level = log_level(f);
    auto report = bench::run_scenario(s, [&](const bench::World& w) {
        if (level == LogLevel::Trace) print_trace(w, err);
    });
    out << bench::emit_report(report, f.format);
    return report.mismatches.empty() ? kExitOk : kExitTimeout;
}

inline int cmd_bench(const Flags& f, std::ostream& out, std::ostream& err) {
    if (f.transport == "real") throw UsageError("bench runs on the simulated transport only");
    auto file = load(f);
    bench::BenchmarkParams p = file && file->bench ? *file->bench : bench::BenchmarkParams{};
    if (file && file->network) {
        p.hop_delay = file->network->hop_delay;
        p.jitter = file->network->jitter;
    }
    if (f.given(f.seed_opt)) p.seed = f.seed;
    if (f.given(f.reps_opt)) p.repetitions = f.reps;
    const auto level = log_level(f);
    auto report = bench::run_benchmark(p, [&](const bench::World& w) {
        if (level == LogLevel::Trace) print_trace(w, err);
    });
    out << bench::emit_report(report, f.format);
    return kExitOk;
}

inline int relay_real(const Flags& f, std::ostream& err) {
    auto file = load(f);
    relay::RelayConfig base;
    std::optional<std::string> interface;
    if (file && file->relay) {
        base = file->relay->config;
        interface = file->relay->interface;
    }
    if (f.given(f.interface_opt)) interface = f.interface;
    auto cfg = apply_relay_flags(base, f);
    const auto level = log_level(f);
    posix::PosixRelay::Options options{cfg, interface, {}};
    if (level == LogLevel::Trace) options.log = [&err](const std::string& line) { err << line << std::endl; };
    posix::PosixRelay r(std::move(options));
    posix::install_stop_handler();
    if (level != LogLevel::Quiet) {
        err << "relay " << relay::to_string(cfg.mode) << " listening on port " << cfg.listen_port << ", target "
            << cfg.target().to_string() << std::endl;
    }
    r.run();
    if (level != LogLevel::Quiet) {
        const auto& c = r.counters();
        err << "received=" << c.received << " relayed=" << c.relayed << " dropped=" << c.dropped()
            << " replies_forwarded=" << c.replies_forwarded << std::endl;
    }
    return kExitOk;
}

inline int cmd_relay(const Flags& f, std::ostream& out, std::ostream& err) {
    if (f.transport == "sim") return cmd_sim(f, out, err);
    return relay_real(f, err);
}

inline int cmd_caget_sim(const Flags& f, std::ostream& out, std::ostream& err) {
    auto s = scenario(load(f), f);
    auto w = bench::build_world(s);
    int rc = kExitOk;
    for (auto& pv : f.pvs) {
        ca::validate_name(pv);
        auto r = w.client->get(pv);
        if (r.outcome == endpoints::Outcome::Value) {
            out << format_value_line(pv, *r.value);
        } else {
            err << endpoints::timeout_message(pv) << '\n';
            rc = kExitTimeout;
        }
    }
    if (log_level(f) == LogLevel::Trace) print_trace(w, err);
    return rc;
}

inline SocketAddress real_destination(const std::optional<config::ConfigFile>& file, const Flags& f) {
    if (f.given(f.target_opt)) return SocketAddress::parse(f.target);
    if (file && file->client && file->client->search_destination) return *file->client->search_destination;
    return {Ipv4Address::limited_broadcast(), ca::kSearchPort};
}

inline int cmd_caget_real(const Flags& f, std::ostream& out, std::ostream& err) {
    auto file = load(f);
    endpoints::ClientQueryConfig schedule = file && file->client ? file->client->query : endpoints::ClientQueryConfig{};
    const auto dest = real_destination(file, f);
    int rc = kExitOk;
    for (auto& pv : f.pvs) {
        auto r = posix::resolve(pv, dest, schedule);
        if (r) {
            out << format_text_line(pv, r->server.to_string());
            if (log_level(f) == LogLevel::Trace) err << "response from " << r->responder.to_string() << '\n';
        } else {
            err << endpoints::timeout_message(pv) << '\n';
            rc = kExitTimeout;
        }
    }
    return rc;
}

inline int cmd_caput(const Flags& f, std::ostream& out, std::ostream& err) {
    if (f.transport == "real") {
        throw UsageError("caput needs the data circuit, which only the simulated transport provides");
    }
    auto s = scenario(load(f), f);
    auto w = bench::build_world(s);
    const auto& pv = f.put_pv;
    ca::validate_name(pv);
    auto r = w.client->put(pv, f.put_value);
    if (log_level(f) == LogLevel::Trace) print_trace(w, err);
    if (r.outcome != endpoints::Outcome::Ack) {
        err << endpoints::timeout_message(pv) << '\n';
        return kExitTimeout;
    }
    out << format_value_line(pv, f.put_value);
    return kExitOk;
}

}  // namespace detail

/// Runs one invocation; all diagnostics go to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Channel Access search relay and network simulator", "carelay"};
    app.require_subcommand(1);
    Flags f;

    auto* relay_cmd = app.add_subcommand("relay", "Run the relay (real sockets by default)");
    detail::add_common(relay_cmd, f);
    relay_cmd->add_option("--interface", f.interface, "Output interface for SPOOF mode");

    auto* sim_cmd = app.add_subcommand("sim", "Run a scenario on the simulated network");
    detail::add_common(sim_cmd, f);

    auto* bench_cmd = app.add_subcommand("bench", "Run the latency benchmark");
    detail::add_common(bench_cmd, f);

    auto* caget_cmd = app.add_subcommand("caget", "Read PVs");
    detail::add_common(caget_cmd, f);
    caget_cmd->add_option("pv", f.pvs, "PV names")->required();

    auto* caput_cmd = app.add_subcommand("caput", "Write a PV");
    detail::add_common(caput_cmd, f);
    caput_cmd->add_option("pv", f.put_pv, "PV name")->required();
    caput_cmd->add_option("value", f.put_value, "New value")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitConfig;
    }

    for (auto* sub : app.get_subcommands()) detail::bind_presence(sub, f);

    try {
        if (*relay_cmd) return detail::cmd_relay(f, out, err);
        if (*sim_cmd) return detail::cmd_sim(f, out, err);
        if (*bench_cmd) return detail::cmd_bench(f, out, err);
        if (*caget_cmd) {
            return f.transport == "real" ? detail::cmd_caget_real(f, out, err) : detail::cmd_caget_sim(f, out, err);
        }
        if (*caput_cmd) return detail::cmd_caput(f, out, err);
    } catch (const config::ConfigFileError& e) {
        err << e.what() << '\n';
        return kExitConfig;
    } catch (const relay::ConfigError& e) {
        err << "ValidationError: " << e.what() << '\n';
        return kExitConfig;
    } catch (const posix::PrivilegeError& e) {
        err << e.what() << '\n';
        return kExitPrivilege;
    } catch (const bench::BenchError& e) {
        err << e.what() << '\n';
        return kExitConfig;
    } catch (const AddressError& e) {
        err << "ValidationError: " << e.what() << '\n';
        return kExitConfig;
    } catch (const ca::WireError& e) {
        err << e.what() << '\n';
        return kExitConfig;
    } catch (const UsageError& e) {
        err << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitTimeout;
    }
    return kExitConfig;
}

}  // namespace carelay::cli
