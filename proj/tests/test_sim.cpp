#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "polscope/capture/trace_io.hpp"
#include "polscope/sim/corpus.hpp"
#include "polscope/sim/simulator.hpp"

using namespace polscope;
using capture::ScopeId;
using capture::ScopeKind;

namespace {

sim::SimulationOutput run(std::size_t groups, sim::PptConfig ppt, std::uint64_t seed) {
    sim::Topology topo;
    std::mt19937_64 rng(seed);
    auto schedule = sim::sample_groups(nullptr, groups, {}, rng);
    auto profiles = sim::make_profiles(schedule, ppt, topo, rng);
    return sim::simulate(profiles, topo, seed);
}

sim::ClientProfile single_client(std::vector<double> times, sim::PptConfig ppt = {}) {
    sim::ClientProfile cp;
    cp.client_ip = "10.1.0.11";
    cp.isp_index = 1;
    cp.ppt = ppt;
    cp.persona = "solo";
    for (double t : times) cp.posts.push_back({t, 50});
    return cp;
}

std::size_t queries_for(const sim::SimulationOutput& out, ScopeKind zone, const std::string& name) {
    auto it = out.traces.find(ScopeId{zone});
    if (it == out.traces.end()) return 0;
    const sim::Topology topo;
    std::size_t n = 0;
    for (const auto& r : it->second) {
        if (r.src_ip == topo.resolver_ip && r.dns_qry_name == std::optional<std::string>(name)) ++n;
    }
    return n;
}

std::string jsonl(const std::vector<capture::PacketRecord>& recs) {
    std::ostringstream os;
    capture::write_jsonl(os, recs);
    return os.str();
}

}  // namespace

TEST_CASE("group sampling") {
    std::mt19937_64 rng(1);
    CHECK(sim::sample_groups(nullptr, 0, {}, rng).empty());
    auto one = sim::sample_groups(nullptr, 1, {}, rng);
    REQUIRE(one.size() == 1);
    REQUIRE(one[0].personas.size() == 5);
    for (const auto& p : one[0].personas) {
        CHECK(p.posts.size() >= 6);
        for (std::size_t i = 1; i < p.posts.size(); ++i) CHECK(p.posts[i].t > p.posts[i - 1].t);
    }
    auto twenty = sim::sample_groups(nullptr, 20, {}, rng);
    std::set<std::string> names;
    for (const auto& g : twenty)
        for (const auto& p : g.personas) names.insert(p.user);
    CHECK(names.size() == 100);
}

TEST_CASE("profiles are a bijection over balanced ISPs") {
    sim::Topology topo;
    std::mt19937_64 rng(5);
    auto schedule = sim::sample_groups(nullptr, 4, {}, rng);
    auto profiles = sim::make_profiles(schedule, {}, topo, rng);
    std::set<std::string> ips, personas;
    std::map<int, int> per_isp;
    for (const auto& cp : profiles) {
        ips.insert(cp.client_ip);
        personas.insert(cp.persona);
        ++per_isp[cp.isp_index];
    }
    CHECK(ips.size() == 20);
    CHECK(personas.size() == 20);
    int lo = 100, hi = 0;
    for (const auto& [isp, n] : per_isp) {
        lo = std::min(lo, n);
        hi = std::max(hi, n);
    }
    CHECK(hi - lo <= 1);
}

TEST_CASE("same seed, same output") {
    for (auto ppt : {sim::PptConfig{}, sim::PptConfig{sim::DnsMode::DoT, true, false}}) {
        auto a = run(2, ppt, 42);
        auto b = run(2, ppt, 42);
        CHECK(a.truth.to_json() == b.truth.to_json());
        REQUIRE(a.traces.size() == b.traces.size());
        for (const auto& [scope, recs] : a.traces) CHECK(jsonl(recs) == jsonl(b.traces.at(scope)));
        auto c = run(2, ppt, 43);
        CHECK(c.truth.to_json() != a.truth.to_json());
    }
}

TEST_CASE("cold cache then cache hit") {
    sim::Topology topo;
    auto out = sim::simulate({single_client({10.0})}, topo, 1);
    CHECK(out.traces.at(ScopeId{ScopeKind::Service}).size() >= 1);
    for (auto zone : {ScopeKind::Root, ScopeKind::TLD, ScopeKind::SLD})
        CHECK(queries_for(out, zone, topo.service_domain) == 1);

    auto two = sim::simulate({single_client({10.0, 60.0})}, topo, 1);
    for (auto zone : {ScopeKind::Root, ScopeKind::TLD, ScopeKind::SLD})
        CHECK(queries_for(two, zone, topo.service_domain) == 1);
    auto late = sim::simulate({single_client({10.0, 10.0 + topo.dns_ttl + 30.0})}, topo, 1);
    CHECK(queries_for(late, ScopeKind::Root, topo.service_domain) == 2);
}

TEST_CASE("root lookups respect the ttl") {
    sim::Topology topo;
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> times;
        double t = 5.0;
        for (int i = 0; i < 30; ++i) {
            t += std::uniform_real_distribution<double>(1.0, 200.0)(rng);
            times.push_back(t);
        }
        auto out = sim::simulate({single_client(times)}, topo, trial);
        const double span = times.back() - times.front();
        const auto bound = static_cast<std::size_t>(std::ceil(span / topo.dns_ttl)) + 1;
        CHECK(queries_for(out, ScopeKind::Root, topo.service_domain) <= bound);
    }
}

TEST_CASE("service traffic follows its post") {
    sim::Topology topo;
    std::vector<double> times{20, 400, 800, 1200};
    for (auto mode : {sim::DnsMode::PoDNS, sim::DnsMode::DoH, sim::DnsMode::DoT}) {
        auto out = sim::simulate({single_client(times, {mode, false, false})}, topo, 9);
        for (const auto& r : out.traces.at(ScopeId{ScopeKind::Service})) {
            const double rel = r.timestamp - topo.epoch;
            bool near = false;
            for (double t : times) near = near || (rel >= t && rel <= t + 5.0);
            CHECK(near);
        }
    }
}

TEST_CASE("vpn hides the client beyond the provider") {
    for (auto mode : {sim::DnsMode::PoDNS, sim::DnsMode::DoT}) {
        auto out = run(1, {mode, true, true}, 17);
        std::set<std::string> clients;
        for (const auto& [p, ip] : out.truth.persona_to_ip) clients.insert(ip);
        for (auto kind : {ScopeKind::Resolver, ScopeKind::Root, ScopeKind::TLD, ScopeKind::SLD,
                          ScopeKind::AccessToService, ScopeKind::Service}) {
            auto it = out.traces.find(ScopeId{kind});
            if (it == out.traces.end()) continue;
            for (const auto& r : it->second) {
                CHECK_FALSE(clients.contains(r.src_ip));
                CHECK_FALSE(clients.contains(r.dst_ip));
                if (r.edns_client_subnet) CHECK(r.edns_client_subnet->rfind("10.", 0) != 0);
            }
        }
        std::set<std::string> seen;
        for (const auto& r : out.traces.at(ScopeId{ScopeKind::AccessToVPN})) seen.insert(r.src_ip);
        for (const auto& ip : clients) CHECK(seen.contains(ip));
    }
}

TEST_CASE("encrypted DNS hides the query name") {
    auto out = run(1, {sim::DnsMode::DoH, false, false}, 4);
    for (const auto& r : out.traces.at(ScopeId{ScopeKind::Resolver})) CHECK_FALSE(r.dns_qry_name.has_value());
    const auto& path = out.traces.at(ScopeId{ScopeKind::AccessToResolver});
    bool port443 = false;
    for (const auto& r : path) port443 = port443 || r.tcp_dstport == std::optional<std::uint16_t>(443);
    CHECK(port443);
}

TEST_CASE("emit_pcap round-trips a bundle trace") {
    auto out = run(1, {}, 2);
    auto dir = std::filesystem::temp_directory_path() / "polscope_sim_test";
    std::filesystem::remove_all(dir);
    sim::write_bundle(out, dir);
    const ScopeId scope{ScopeKind::Resolver};
    auto res = sim::emit_pcap(dir / "resolver.jsonl", dir / "resolver.pcap");
    CHECK(res.skipped == 0);
    auto back = capture::parse_capture(dir / "resolver.pcap", scope);
    const auto& orig = out.traces.at(scope);
    REQUIRE(back.records.size() == orig.size());
    for (std::size_t i = 0; i < orig.size(); ++i) {
        CHECK(back.records[i].timestamp == doctest::Approx(orig[i].timestamp).epsilon(1e-12));
        CHECK(back.records[i].src_ip == orig[i].src_ip);
        CHECK(back.records[i].ip_len == orig[i].ip_len);
        CHECK(back.records[i].dns_qry_name == orig[i].dns_qry_name);
    }
    auto log = sim::read_board_log(dir / "board_log.jsonl");
    CHECK(log.size() == out.board_log.size());
    std::ifstream gt(dir / "ground_truth.json");
    auto truth = sim::GroundTruth::from_json(nlohmann::json::parse(gt));
    CHECK(truth.persona_to_ip == out.truth.persona_to_ip);
    std::filesystem::remove_all(dir);
}

TEST_CASE("invalid topology is rejected before emission") {
    sim::Topology topo;
    topo.isp_count = 0;
    CHECK_THROWS_AS(topo.validate(), sim::ConfigError);
    sim::Topology ok;
    auto cp = single_client({1.0});
    cp.isp_index = 99;
    CHECK_THROWS_AS(sim::simulate({cp}, ok, 1), sim::ConfigError);
}
