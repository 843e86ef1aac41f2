#include <doctest.h>

#include <random>
#include <sstream>

#include "oracles.hpp"
#include "polscope/capture/ingest.hpp"
#include "polscope/capture/trace_io.hpp"

using namespace polscope::capture;

namespace {

PacketRecord rec(double t, std::string src, std::string dst, std::uint32_t len = 60) {
    PacketRecord r;
    r.timestamp = t;
    r.src_ip = std::move(src);
    r.dst_ip = std::move(dst);
    r.ip_len = len;
    r.proto = kProtoUdp;
    r.scope = ScopeId{ScopeKind::Resolver, 0};
    return r;
}

std::vector<PacketRecord> random_trace(std::mt19937_64& rng, std::size_t n, int ips, double span) {
    std::uniform_real_distribution<double> t(0.0, span);
    std::uniform_int_distribution<int> ip(0, ips - 1);
    std::vector<PacketRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        // Coarse timestamps so ties occur.
        const double ts = std::round(t(rng) * 4.0) / 4.0;
        int a = ip(rng), b = ip(rng);
        if (a == b) b = (b + 1) % ips;
        out.push_back(rec(ts, "10.0.0." + std::to_string(a), "10.0.0." + std::to_string(b),
                          static_cast<std::uint32_t>(40 + i)));
    }
    return out;
}

std::map<std::string, std::vector<PacketRecord>> flatten(const ActivityMap& m) {
    std::map<std::string, std::vector<PacketRecord>> out;
    for (const auto& [ip, set] : m) out[ip] = set.records;
    return out;
}

}  // namespace

TEST_CASE("jsonl passthrough and empty input") {
    CHECK(parse_capture_bytes("", ScopeId{ScopeKind::Service, 0}).records.empty());
    auto res = parse_jsonl(R"({"t":1.0,"src":"10.0.0.1","dst":"10.0.0.2","len":60})", ScopeId{ScopeKind::Service, 0});
    REQUIRE(res.records.size() == 1);
    CHECK(res.records[0].timestamp == 1.0);
    CHECK(res.records[0].src_ip == "10.0.0.1");
    CHECK(res.records[0].ip_len == 60);
    CHECK(res.records[0].scope.kind == ScopeKind::Service);
}

TEST_CASE("scope names round-trip") {
    for (auto k : all_scope_kinds()) {
        ScopeId id{k, k == ScopeKind::Access ? 3 : 0};
        CHECK(ScopeId::parse(id.name()) == id);
    }
    CHECK(ScopeId::parse("access-isp3").isp == 3);
    CHECK_THROWS(ScopeId::parse("nowhere"));
}

TEST_CASE("pcap round-trip through the emitter") {
    std::vector<PacketRecord> in;
    auto a = rec(10.25, "10.1.0.1", "192.0.2.53", 80);
    a.dns_qry_name = "board.example.org";
    in.push_back(a);
    auto b = rec(10.5, "10.1.0.1", "203.0.113.10", 140);
    b.proto = kProtoTcp;
    b.tcp_dstport = 443;
    b.tcp_syn = false;
    b.tcp_ack = true;
    in.push_back(b);
    auto c = rec(11.75, "2001:db8::1", "2001:db8::2", 100);
    in.push_back(c);
    std::ostringstream os;
    auto w = write_pcap(os, in);
    CHECK(w.written == 3);
    auto out = parse_capture_bytes(os.str(), ScopeId{ScopeKind::Resolver, 0});
    REQUIRE(out.records.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(out.records[i].timestamp == doctest::Approx(in[i].timestamp).epsilon(1e-9));
        CHECK(out.records[i].src_ip == in[i].src_ip);
        CHECK(out.records[i].dst_ip == in[i].dst_ip);
        CHECK(out.records[i].ip_len == in[i].ip_len);
        CHECK(out.records[i].proto == in[i].proto);
    }
    CHECK(out.records[0].dns_qry_name == std::optional<std::string>("board.example.org"));
    CHECK(out.records[1].tcp_dstport == std::optional<std::uint16_t>(443));
    CHECK(out.records[1].tcp_ack == std::optional<bool>(true));
    CHECK(out.records[1].tcp_len == std::optional<std::uint32_t>(100));
}

TEST_CASE("empty pcap is valid") {
    std::ostringstream os;
    write_pcap(os, {});
    CHECK(parse_pcap(os.str(), ScopeId{}).records.empty());
}

TEST_CASE("cache-window attribution examples") {
    IngestConfig cfg;
    cfg.ttl_window = 1.0;
    std::vector<PacketRecord> near{rec(0, "A", "B"), rec(0.5, "C", "D")};
    auto m = group_by_ip(near, cfg);
    CHECK(m.at("A").records.size() == 2);
    CHECK(m.at("C").records.size() == 1);  // earlier records are not cache hits for C

    std::vector<PacketRecord> far{rec(0, "A", "B"), rec(10, "C", "D")};
    CHECK(group_by_ip(far, cfg).at("A").records.size() == 1);
    CHECK(group_by_ip({}, cfg).empty());
}

TEST_CASE("cache hits do not chain") {
    IngestConfig cfg;
    cfg.ttl_window = 1.0;
    // E->F at 0.8 is a cache hit for A; G->H at 1.5 is outside A's direct window.
    std::vector<PacketRecord> r{rec(0, "A", "B"), rec(0.8, "E", "F"), rec(1.5, "G", "H")};
    auto m = group_by_ip(r, cfg);
    CHECK(m.at("A").records.size() == 2);
}

TEST_CASE("attribution matches the quadratic oracle") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng() % 200;
        auto trace = random_trace(rng, n, 2 + static_cast<int>(rng() % 12), 60.0);
        IngestConfig cfg;
        cfg.ttl_window = 0.25 + static_cast<double>(rng() % 12) * 0.5;
        CHECK(flatten(group_by_ip(trace, cfg)) == oracle::group_by_ip(trace, cfg.ttl_window));
    }
}

TEST_CASE("attribution properties") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 30; ++trial) {
        auto trace = random_trace(rng, 120, 8, 40.0);
        IngestConfig small, big;
        small.ttl_window = 0.5;
        big.ttl_window = 3.0;
        auto a = group_by_ip(trace, small);
        auto b = group_by_ip(trace, big);
        std::size_t total = 0;
        for (const auto& [ip, set] : a) {
            CHECK(set.records.size() <= b.at(ip).records.size());
            total += set.records.size();
        }
        CHECK(total >= trace.size());
        // Unsorted input gives the same sets.
        auto shuffled = trace;
        std::stable_sort(shuffled.begin(), shuffled.end(),
                         [](const auto& x, const auto& y) { return x.timestamp < y.timestamp; });
        CHECK(flatten(group_by_ip(shuffled, small)) == flatten(a));
    }
}

TEST_CASE("feature selection") {
    IngestConfig cfg;
    std::vector<PacketRecord> r{rec(0, "A", "B", 60), rec(1, "A", "B", 90)};
    auto sel = select_features(group_by_ip(r, cfg), all_features());
    auto kept = [&](Feature f) { return std::ranges::find(sel.kept, f) != sel.kept.end(); };
    CHECK(kept(Feature::IpLen));
    CHECK_FALSE(kept(Feature::IpProto));       // constant
    CHECK(kept(Feature::PacketCount));
    CHECK_FALSE(kept(Feature::DnsQryName));    // absent everywhere
    CHECK_FALSE(kept(Feature::TcpDstPort));

    r[0].dns_qry_name = "x.example";
    sel = select_features(group_by_ip(r, cfg), all_features());
    CHECK(kept(Feature::DnsQryName));

    std::vector<Feature> only{Feature::IpProto};
    sel = select_features(group_by_ip(r, cfg), only);
    CHECK(sel.kept.empty());
}

TEST_CASE("focus domain filters DNS records only") {
    IngestConfig cfg;
    cfg.focus_domain = "example.org";
    auto a = rec(0, "A", "B");
    a.dns_qry_name = "board.example.org.";
    auto b = rec(1, "A", "B");
    b.dns_qry_name = "other.test";
    auto c = rec(2, "A", "B");
    std::vector<PacketRecord> r{a, b, c};
    auto out = apply_focus(r, cfg);
    REQUIRE(out.size() == 2);
    CHECK(out[0].timestamp == 0);
    CHECK(out[1].timestamp == 2);
}

TEST_CASE("initiators are the openers of each conversation") {
    std::vector<PacketRecord> r{rec(1, "C", "S"), rec(1.1, "S", "C"), rec(0.5, "R", "S"), rec(2, "S", "R")};
    auto init = initiators(r);
    CHECK(init == std::set<std::string>{"C", "R"});
}
