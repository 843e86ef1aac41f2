#include "polscope/sim/simulator.hpp"

#include <arpa/inet.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <tuple>

namespace polscope::sim {

using capture::PacketRecord;
using capture::ScopeId;
using capture::ScopeKind;

std::string_view dns_mode_name(DnsMode mode) {
    switch (mode) {
        case DnsMode::PoDNS: return "podns";
        case DnsMode::DoT: return "dot";
        case DnsMode::DoH: return "doh";
    }
    return "podns";
}

DnsMode parse_dns_mode(std::string_view text) {
    std::string key(text);
    std::ranges::transform(key, key.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (key == "podns" || key == "dns") return DnsMode::PoDNS;
    if (key == "dot") return DnsMode::DoT;
    if (key == "doh") return DnsMode::DoH;
    throw std::invalid_argument("unknown DNS mode: " + std::string(text));
}

std::string PptConfig::label() const {
    std::string out(dns_mode_name(dns_mode));
    if (vpn) out += "+vpn";
    if (ecs_leak) out += "+ecs";
    return out;
}

namespace {

bool valid_ipv4(const std::string& ip) {
    unsigned char buf[4];
    return ::inet_pton(AF_INET, ip.c_str(), buf) == 1;
}

}  // namespace

void Topology::validate() const {
    if (isp_count < 1) throw ConfigError("topology needs at least one ISP");
    if (!(dns_ttl > 0.0)) throw ConfigError("dns_ttl must be > 0");
    if (!(hop_delay_min >= 0.0) || hop_delay_max < hop_delay_min) throw ConfigError("bad hop delay range");
    if (!(dot_idle_timeout > 0.0) || !(doh_idle_timeout > 0.0)) throw ConfigError("idle timeouts must be > 0");
    for (const auto* ip : {&resolver_ip, &root_ip, &tld_ip, &sld_ip, &service_ip, &vpn_entry_ip, &vpn_egress_ip}) {
        if (!valid_ipv4(*ip)) throw ConfigError("topology address is not IPv4: " + *ip);
    }
    if (service_domain.find('.') == std::string::npos) throw ConfigError("service domain needs a TLD");
    if (decoy_count == 0 || decoy_count > 200) throw ConfigError("decoy_count must be in [1, 200]");
}

std::string Topology::decoy_domain(std::size_t i) const { return "site" + std::to_string(i) + ".example.net"; }
std::string Topology::decoy_ip(std::size_t i) const { return "203.0.114." + std::to_string(10 + i); }

nlohmann::json GroundTruth::to_json() const {
    nlohmann::json personas = nlohmann::json::object();
    for (const auto& [user, ip] : persona_to_ip) personas[user] = {{"ip", ip}, {"isp", persona_isp.at(user)}};
    return {{"personas", std::move(personas)},
            {"manifest", manifest},
            {"ppt", {{"dns_mode", dns_mode_name(ppt.dns_mode)}, {"vpn", ppt.vpn}, {"ecs_leak", ppt.ecs_leak}}},
            {"seed", seed}};
}

GroundTruth GroundTruth::from_json(const nlohmann::json& obj) {
    GroundTruth gt;
    for (const auto& [user, v] : obj.at("personas").items()) {
        if (v.is_string()) {
            gt.persona_to_ip[user] = v.get<std::string>();
            gt.persona_isp[user] = 0;
        } else {
            gt.persona_to_ip[user] = v.at("ip").get<std::string>();
            gt.persona_isp[user] = v.value("isp", 0);
        }
    }
    if (auto it = obj.find("manifest"); it != obj.end()) gt.manifest = it->get<std::map<std::string, std::size_t>>();
    if (auto it = obj.find("ppt"); it != obj.end()) {
        gt.ppt.dns_mode = parse_dns_mode(it->value("dns_mode", "podns"));
        gt.ppt.vpn = it->value("vpn", false);
        gt.ppt.ecs_leak = it->value("ecs_leak", false);
    }
    gt.seed = obj.value("seed", std::uint64_t{0});
    return gt;
}

std::vector<ClientProfile> make_profiles(const std::vector<ThreadSchedule>& groups, const PptConfig& ppt,
                                         const Topology& topology, std::mt19937_64& rng) {
    topology.validate();
    std::vector<const PersonaThread*> personas;
    for (const auto& g : groups) {
        for (const auto& p : g.personas) personas.push_back(&p);
    }
    // Balanced assignment: ISP counts differ by at most one, order shuffled.
    std::vector<int> isps(personas.size());
    for (std::size_t i = 0; i < isps.size(); ++i) isps[i] = static_cast<int>(i % topology.isp_count) + 1;
    std::ranges::shuffle(isps, rng);

    std::map<int, int> next_host;
    std::vector<ClientProfile> out;
    for (std::size_t i = 0; i < personas.size(); ++i) {
        ClientProfile cp;
        cp.isp_index = isps[i];
        const int host = 10 + next_host[cp.isp_index]++;
        cp.client_ip = "10." + std::to_string(cp.isp_index) + "." + std::to_string(host / 250) + "." +
                       std::to_string(host % 250 + 1);
        cp.ppt = ppt;
        cp.persona = personas[i]->user;
        cp.posts = personas[i]->posts;
        out.push_back(std::move(cp));
    }
    return out;
}

namespace {

struct Leg {
    std::string src;
    std::string dst;
    std::vector<ScopeId> scopes;
    bool tunnel = false;  // carries encapsulated packets client <-> VPN entry
};

struct Route {
    std::vector<Leg> legs;
};

/// A packet as produced by an endpoint, before per-leg rewriting.
struct Segment {
    bool upstream = true;
    int proto = capture::kProtoTcp;
    std::uint32_t payload = 0;
    bool syn = false;
    bool ack = true;
    std::optional<std::string> qname;
    std::optional<std::string> ecs;
};

struct Connection {
    Route route;
    std::uint16_t client_port = 0;
    std::uint16_t server_port = 0;
};

struct EncryptedDnsSession {
    bool open = false;
    double last = 0.0;
    Connection conn;
};

constexpr std::uint32_t kTunnelOverhead = 60;  // outer IPv4 + UDP + WireGuard framing

std::uint32_t dns_payload(const std::string& name, bool with_ecs, bool response) {
    std::uint32_t size = 12 + static_cast<std::uint32_t>(name.size()) + 2 + 4;
    if (with_ecs) size += 23;
    if (response) size += 16;
    return size;
}

std::string ecs_prefix(const std::string& ip) {
    const auto last_dot = ip.rfind('.');
    return ip.substr(0, last_dot) + ".0/24";
}

class Engine {
public:
    Engine(const Topology& topo, std::uint64_t seed) : topo_(topo), rng_(seed) {}

    void run_client(const ClientProfile& cp, double horizon) {
        client_ = &cp;
        resolver_cache_.clear();
        client_cache_.clear();
        dns_session_ = EncryptedDnsSession{};

        struct Activity {
            double t;
            bool post;
            std::size_t index;
        };
        std::vector<Activity> acts;
        for (std::size_t i = 0; i < cp.posts.size(); ++i) acts.push_back({cp.posts[i].t, true, i});
        std::uniform_real_distribution<double> period(cp.background_min, cp.background_max);
        for (double t = uniform(0.0, cp.background_max); t < horizon; t += period(rng_)) {
            acts.push_back({t, false, decoy_pick()});
        }
        std::ranges::stable_sort(acts, {}, &Activity::t);

        for (const auto& a : acts) {
            if (a.post) {
                const auto& post = cp.posts[a.index];
                const double t = resolve(topo_.service_domain, post.t);
                https_exchange(service_route(), topo_.service_ip, t, 420 + static_cast<std::uint32_t>(post.text_len),
                               {900});
            } else {
                const double t = resolve(topo_.decoy_domain(a.index), a.t);
                const std::uint32_t tail = static_cast<std::uint32_t>(uniform(200.0, 1448.0));
                https_exchange(decoy_route(a.index), topo_.decoy_ip(a.index), t, 380, {1448, 1448, tail});
            }
        }
        close_dns_session_if_idle(horizon);
    }

    std::map<ScopeId, std::vector<PacketRecord>> take_traces() { return std::move(traces_); }

private:
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
    double hop() { return uniform(topo_.hop_delay_min, topo_.hop_delay_max); }
    std::size_t decoy_pick() {
        return std::uniform_int_distribution<std::size_t>(0, topo_.decoy_count - 1)(rng_);
    }
    std::uint16_t ephemeral() { return static_cast<std::uint16_t>(std::uniform_int_distribution<int>(49152, 65535)(rng_)); }

    ScopeId access() const { return ScopeId::access(client_->isp_index); }

    // Routes from the client towards a server. Under VPN the first leg is the
    // tunnel to the provider and the server sees the egress address.
    Route client_route(const std::string& server, std::vector<ScopeId> direct_path, std::vector<ScopeId> vpn_path) {
        Route r;
        if (client_->ppt.vpn) {
            r.legs.push_back({client_->client_ip, topo_.vpn_entry_ip,
                              {access(), ScopeId{ScopeKind::AccessToVPN}, ScopeId{ScopeKind::VPNProvider}}, true});
            r.legs.push_back({topo_.vpn_egress_ip, server, std::move(vpn_path), false});
        } else {
            r.legs.push_back({client_->client_ip, server, std::move(direct_path), false});
        }
        return r;
    }

    Route resolver_route() {
        return client_route(topo_.resolver_ip,
                            {access(), ScopeId{ScopeKind::AccessToResolver}, ScopeId{ScopeKind::Resolver}},
                            {ScopeId{ScopeKind::VPNProvider}, ScopeId{ScopeKind::VPNToResolver},
                             ScopeId{ScopeKind::Resolver}});
    }
    Route service_route() {
        return client_route(topo_.service_ip,
                            {access(), ScopeId{ScopeKind::AccessToService}, ScopeId{ScopeKind::Service}},
                            {ScopeId{ScopeKind::VPNProvider}, ScopeId{ScopeKind::VPNToService},
                             ScopeId{ScopeKind::Service}});
    }
    Route decoy_route(std::size_t i) {
        return client_route(topo_.decoy_ip(i), {access()}, {ScopeId{ScopeKind::VPNProvider}});
    }
    Route auth_route(ScopeKind zone, const std::string& server) {
        Route r;
        r.legs.push_back({topo_.resolver_ip, server, {ScopeId{ScopeKind::ResolverToAuthZones}, ScopeId{zone}}, false});
        return r;
    }

    std::string resolver_facing_ip() const { return client_->ppt.vpn ? topo_.vpn_egress_ip : client_->client_ip; }

    void emit(ScopeId scope, PacketRecord rec, double t) {
        rec.timestamp = std::round((topo_.epoch + t) * 1e6) / 1e6;
        rec.scope = scope;
        traces_[scope].push_back(std::move(rec));
    }

    // Sends one segment across every leg of the route; returns arrival time.
    double send(const Connection& c, const Segment& seg, double t) {
        std::vector<const Leg*> legs;
        for (const auto& leg : c.route.legs) legs.push_back(&leg);
        if (!seg.upstream) std::ranges::reverse(legs);

        PacketRecord inner;
        inner.proto = seg.proto;
        if (seg.proto == capture::kProtoTcp) {
            inner.ip_len = 40 + seg.payload;
            inner.tcp_len = seg.payload;
            inner.payload_len = seg.payload;
            inner.tcp_srcport = seg.upstream ? c.client_port : c.server_port;
            inner.tcp_dstport = seg.upstream ? c.server_port : c.client_port;
            inner.tcp_syn = seg.syn;
            inner.tcp_ack = seg.ack;
        } else {
            inner.ip_len = 28 + seg.payload;
            inner.payload_len = seg.payload;
            inner.dns_qry_name = seg.qname;
            inner.edns_client_subnet = seg.ecs;
        }

        for (const Leg* leg : legs) {
            PacketRecord rec;
            if (leg->tunnel) {
                rec.proto = capture::kProtoUdp;
                rec.ip_len = inner.ip_len + kTunnelOverhead;
                rec.payload_len = rec.ip_len - 28;
            } else {
                rec = inner;
            }
            rec.src_ip = seg.upstream ? leg->src : leg->dst;
            rec.dst_ip = seg.upstream ? leg->dst : leg->src;
            std::vector<ScopeId> scopes = leg->scopes;
            if (!seg.upstream) std::ranges::reverse(scopes);
            for (const auto& scope : scopes) {
                t += hop();
                emit(scope, rec, t);
            }
        }
        return t + hop();
    }

    // Plays a scripted exchange; consecutive segments in one direction leave
    // back to back, a direction change waits for the previous arrival.
    double play(const Connection& c, const std::vector<Segment>& script, double t) {
        double depart = t;
        double arrival = t;
        bool have_prev = false;
        bool prev_up = true;
        for (const auto& seg : script) {
            if (have_prev) depart = (seg.upstream == prev_up) ? depart + 0.0005 : arrival + 0.001;
            const double a = send(c, seg, depart);
            arrival = have_prev && seg.upstream == prev_up ? std::max(arrival, a) : a;
            prev_up = seg.upstream;
            have_prev = true;
        }
        return arrival;
    }

    static std::vector<Segment> tcp_open() {
        return {{true, capture::kProtoTcp, 0, true, false}, {false, capture::kProtoTcp, 0, true, true},
                {true, capture::kProtoTcp, 0, false, true}};
    }
    static std::vector<Segment> tls_handshake() {
        return {{true, capture::kProtoTcp, 517}, {false, capture::kProtoTcp, 1448}, {false, capture::kProtoTcp, 1210},
                {true, capture::kProtoTcp, 80}, {false, capture::kProtoTcp, 0}};
    }
    static std::vector<Segment> tcp_close() {
        return {{true, capture::kProtoTcp, 31}, {true, capture::kProtoTcp, 0}, {false, capture::kProtoTcp, 0},
                {true, capture::kProtoTcp, 0}};
    }

    double https_exchange(Route route, const std::string& server, double t, std::uint32_t request,
                          std::vector<std::uint32_t> response) {
        (void)server;
        Connection c{std::move(route), ephemeral(), 443};
        std::vector<Segment> script = tcp_open();
        for (const auto& s : tls_handshake()) script.push_back(s);
        script.push_back({true, capture::kProtoTcp, request});
        for (auto r : response) script.push_back({false, capture::kProtoTcp, r});
        script.push_back({true, capture::kProtoTcp, 0});
        for (const auto& s : tcp_close()) script.push_back(s);
        return play(c, script, t);
    }

    // Resolver-side recursion on a cache miss; returns the completion time.
    double recurse(const std::string& name, double t) {
        const bool ecs = client_->ppt.ecs_leak;
        std::optional<std::string> subnet;
        if (ecs) subnet = ecs_prefix(resolver_facing_ip());
        const std::tuple<ScopeKind, const std::string*> zones[] = {
            {ScopeKind::Root, &topo_.root_ip}, {ScopeKind::TLD, &topo_.tld_ip}, {ScopeKind::SLD, &topo_.sld_ip}};
        for (const auto& [zone, ip] : zones) {
            Connection c{auth_route(zone, *ip), 0, 53};
            std::vector<Segment> script{
                {true, capture::kProtoUdp, dns_payload(name, ecs, false), false, false, name, subnet},
                {false, capture::kProtoUdp, dns_payload(name, ecs, true), false, false, name, subnet}};
            t = play(c, script, t) + 0.0005;
        }
        return t;
    }

    void close_dns_session_if_idle(double now) {
        if (!dns_session_.open) return;
        const double idle = client_->ppt.dns_mode == DnsMode::DoT ? topo_.dot_idle_timeout : topo_.doh_idle_timeout;
        const double close_at = dns_session_.last + idle;
        if (close_at <= now) {
            play(dns_session_.conn, tcp_close(), close_at);
            dns_session_.open = false;
        }
    }

    // Returns the time at which the client holds an answer for `name`.
    double resolve(const std::string& name, double t) {
        if (topo_.client_dns_cache) {
            auto it = client_cache_.find(name);
            if (it != client_cache_.end() && t < it->second) return t;
        }

        const DnsMode mode = client_->ppt.dns_mode;
        Route route = resolver_route();
        double done = t;
        auto resolver_turnaround = [&](double arrival) {
            auto it = resolver_cache_.find(name);
            double ready = arrival + 0.001;
            if (it == resolver_cache_.end() || arrival >= it->second) {
                ready = recurse(name, ready);
                resolver_cache_[name] = ready + topo_.dns_ttl;
            }
            return ready;
        };

        if (mode == DnsMode::PoDNS) {
            Connection c{std::move(route), ephemeral(), 53};
            const Segment query{true, capture::kProtoUdp, dns_payload(name, false, false), false, false, name, {}};
            const Segment answer{false, capture::kProtoUdp, dns_payload(name, false, true), false, false, name, {}};
            const double arrival = send(c, query, t);
            done = send(c, answer, resolver_turnaround(arrival));
        } else {
            close_dns_session_if_idle(t);
            double cursor = t;
            if (!dns_session_.open) {
                dns_session_.conn = Connection{std::move(route), ephemeral(),
                                               static_cast<std::uint16_t>(mode == DnsMode::DoT ? 853 : 443)};
                std::vector<Segment> script = tcp_open();
                for (const auto& s : tls_handshake()) script.push_back(s);
                cursor = play(dns_session_.conn, script, cursor) + 0.001;
                dns_session_.open = true;
            }
            // Padded queries/answers: 128/468-byte blocks plus TLS framing.
            const std::uint32_t q = mode == DnsMode::DoT ? 159 : 236;
            const std::uint32_t a = mode == DnsMode::DoT ? 499 : 552;
            const double arrival = send(dns_session_.conn, {true, capture::kProtoTcp, q}, cursor);
            const double answered = send(dns_session_.conn, {false, capture::kProtoTcp, a}, resolver_turnaround(arrival));
            send(dns_session_.conn, {true, capture::kProtoTcp, 0}, answered + 0.0005);
            done = answered;
            dns_session_.last = std::max(dns_session_.last, answered);
        }
        if (topo_.client_dns_cache) client_cache_[name] = done + topo_.dns_ttl;
        return done + 0.001;
    }

    const Topology& topo_;
    std::mt19937_64 rng_;
    const ClientProfile* client_ = nullptr;
    std::map<std::string, double> resolver_cache_;
    std::map<std::string, double> client_cache_;
    EncryptedDnsSession dns_session_;
    std::map<ScopeId, std::vector<PacketRecord>> traces_;
};

// Fills tcp.time_relative / tcp.time_delta per bidirectional TCP stream as a
// capture at that scope would see them.
void annotate_tcp_timing(std::vector<PacketRecord>& recs) {
    using Key = std::tuple<std::string, std::uint16_t, std::string, std::uint16_t>;
    std::map<Key, std::pair<double, double>> clocks;
    for (auto& r : recs) {
        if (r.proto != capture::kProtoTcp || !r.tcp_srcport || !r.tcp_dstport) continue;
        Key k{r.src_ip, *r.tcp_srcport, r.dst_ip, *r.tcp_dstport};
        if (std::tie(r.dst_ip, *r.tcp_dstport) < std::tie(r.src_ip, *r.tcp_srcport)) {
            k = Key{r.dst_ip, *r.tcp_dstport, r.src_ip, *r.tcp_srcport};
        }
        auto [it, fresh] = clocks.try_emplace(k, r.timestamp, r.timestamp);
        r.tcp_time_relative = r.timestamp - it->second.first;
        r.tcp_time_delta = r.timestamp - it->second.second;
        it->second.second = r.timestamp;
    }
}

}  // namespace

SimulationOutput simulate(const std::vector<ClientProfile>& profiles, const Topology& topology, std::uint64_t seed) {
    topology.validate();
    std::set<std::string> ips;
    for (const auto& cp : profiles) {
        if (cp.isp_index < 1 || cp.isp_index > topology.isp_count) {
            throw ConfigError("client " + cp.client_ip + " references ISP " + std::to_string(cp.isp_index));
        }
        if (!valid_ipv4(cp.client_ip)) throw ConfigError("client address is not IPv4: " + cp.client_ip);
        if (!ips.insert(cp.client_ip).second) throw ConfigError("duplicate client address " + cp.client_ip);
        if (cp.background_min <= 0.0 || cp.background_max < cp.background_min) {
            throw ConfigError("bad background interval for " + cp.client_ip);
        }
    }

    double horizon = 0.0;
    for (const auto& cp : profiles) {
        for (const auto& p : cp.posts) horizon = std::max(horizon, p.t);
    }
    horizon += 120.0;

    SimulationOutput out;
    Engine engine(topology, seed);
    for (const auto& cp : profiles) {
        engine.run_client(cp, horizon);
        out.truth.persona_to_ip[cp.persona] = cp.client_ip;
        out.truth.persona_isp[cp.persona] = cp.isp_index;
        for (const auto& p : cp.posts) {
            const double ts = std::round((topology.epoch + p.t) * 1e6) / 1e6;
            out.board_log.push_back({cp.persona, ts, p.text_len});
        }
    }
    out.traces = engine.take_traces();
    for (auto& [scope, recs] : out.traces) {
        std::ranges::stable_sort(recs, {}, &PacketRecord::timestamp);
        annotate_tcp_timing(recs);
        out.truth.manifest[scope.name()] = recs.size();
    }
    std::ranges::stable_sort(out.board_log, {}, &linkage::MessageRecord::timestamp);
    if (!profiles.empty()) out.truth.ppt = profiles.front().ppt;
    out.truth.seed = seed;
    return out;
}

void write_bundle(const SimulationOutput& out, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& [scope, recs] : out.traces) {
        std::ofstream f(dir / (scope.name() + ".jsonl"), std::ios::binary);
        capture::write_jsonl(f, recs);
        if (!f) throw std::runtime_error("failed writing trace for " + scope.name());
    }
    {
        std::ofstream f(dir / "board_log.jsonl", std::ios::binary);
        for (const auto& m : out.board_log) {
            f << nlohmann::json{{"user", m.user}, {"t", m.timestamp}, {"text_len", m.text_len}}.dump() << '\n';
        }
    }
    std::ofstream f(dir / "ground_truth.json", std::ios::binary);
    f << out.truth.to_json().dump(2) << '\n';
}

std::vector<linkage::MessageRecord> parse_board_log(std::string_view text) {
    std::vector<linkage::MessageRecord> out;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        const auto obj = nlohmann::json::parse(line);
        out.push_back({obj.at("user").get<std::string>(), obj.at("t").get<double>(),
                       obj.value("text_len", std::size_t{0})});
    }
    return out;
}

std::vector<linkage::MessageRecord> read_board_log(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open board log: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_board_log(ss.str());
}

capture::PcapWriteResult emit_pcap(const std::filesystem::path& jsonl, const std::filesystem::path& pcap) {
    const auto parsed = capture::parse_capture(jsonl, ScopeId{});
    std::ofstream out(pcap, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write pcap: " + pcap.string());
    return capture::write_pcap(out, parsed.records);
}

}  // namespace polscope::sim
