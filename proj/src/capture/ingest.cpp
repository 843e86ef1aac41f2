#include "polscope/capture/ingest.hpp"

#include <algorithm>
#include <array>
#include <set>
#include <stdexcept>
#include <utility>

namespace polscope::capture {

namespace {

constexpr std::array<std::pair<Feature, std::string_view>, 13> kFeatureNames{{
    {Feature::PacketCount, "packet.count"},
    {Feature::IpLen, "ip.len"},
    {Feature::IpProto, "ip.proto"},
    {Feature::TcpDstPort, "tcp.dstport"},
    {Feature::TcpSyn, "tcp.connection.syn"},
    {Feature::TcpAck, "tcp.ack"},
    {Feature::TcpLen, "tcp.len"},
    {Feature::TcpReassembledLen, "tcp.reassembled.length"},
    {Feature::TcpTimeRelative, "tcp.time_relative"},
    {Feature::TcpTimeDelta, "tcp.time_delta"},
    {Feature::TcpPayload, "tcp.payload"},
    {Feature::DnsQryName, "dns.qry.name"},
    {Feature::EdnsClientSubnet, "dns.opt.client.addr"},
}};

template <typename T>
std::optional<double> as_double(const std::optional<T>& v) {
    if (!v) return std::nullopt;
    return static_cast<double>(*v);
}

bool domain_matches(std::string_view name, std::string_view domain) {
    auto strip = [](std::string_view s) {
        while (!s.empty() && s.back() == '.') s.remove_suffix(1);
        return s;
    };
    name = strip(name);
    domain = strip(domain);
    if (name == domain) return true;
    return name.size() > domain.size() && name.ends_with(domain) && name[name.size() - domain.size() - 1] == '.';
}

}  // namespace

std::string_view feature_name(Feature f) {
    for (const auto& [feat, name] : kFeatureNames) {
        if (feat == f) return name;
    }
    return "unknown";
}

Feature parse_feature(std::string_view name) {
    for (const auto& [feat, fname] : kFeatureNames) {
        if (fname == name) return feat;
    }
    // Table aliases for the EDNS client-subnet variants.
    if (name == "dns.opt.client.addr4" || name == "dns.opt.client.addr6") return Feature::EdnsClientSubnet;
    throw std::invalid_argument("unknown feature: " + std::string(name));
}

const std::vector<Feature>& all_features() {
    static const std::vector<Feature> kAll = [] {
        std::vector<Feature> v;
        for (const auto& [feat, name] : kFeatureNames) v.push_back(feat);
        return v;
    }();
    return kAll;
}

bool is_count_feature(Feature f) {
    return f == Feature::PacketCount || f == Feature::DnsQryName || f == Feature::EdnsClientSubnet;
}

std::optional<double> feature_value(const PacketRecord& rec, Feature f) {
    switch (f) {
        case Feature::PacketCount: return 1.0;
        case Feature::IpLen: return static_cast<double>(rec.ip_len);
        case Feature::IpProto: return static_cast<double>(rec.proto);
        case Feature::TcpDstPort: return as_double(rec.tcp_dstport);
        case Feature::TcpSyn: return as_double(rec.tcp_syn);
        case Feature::TcpAck: return as_double(rec.tcp_ack);
        case Feature::TcpLen: return as_double(rec.tcp_len);
        case Feature::TcpReassembledLen: return as_double(rec.tcp_reassembled_len);
        case Feature::TcpTimeRelative: return rec.tcp_time_relative;
        case Feature::TcpTimeDelta: return rec.tcp_time_delta;
        case Feature::TcpPayload: return as_double(rec.payload_len);
        case Feature::DnsQryName: return rec.dns_qry_name ? std::optional<double>(1.0) : std::nullopt;
        case Feature::EdnsClientSubnet: return rec.edns_client_subnet ? std::optional<double>(1.0) : std::nullopt;
    }
    return std::nullopt;
}

void IngestConfig::validate() const {
    if (!(ttl_window > 0.0)) throw std::invalid_argument("ttl_window must be > 0");
}

std::vector<PacketRecord> apply_focus(std::span<const PacketRecord> records, const IngestConfig& cfg) {
    std::vector<PacketRecord> out;
    out.reserve(records.size());
    for (const auto& rec : records) {
        if (cfg.focus_domain && rec.dns_qry_name && !domain_matches(*rec.dns_qry_name, *cfg.focus_domain)) continue;
        out.push_back(rec);
    }
    return out;
}

ActivityMap group_by_ip(std::span<const PacketRecord> records, const IngestConfig& cfg) {
    cfg.validate();
    ActivityMap out;
    if (records.empty()) return out;

    std::vector<std::size_t> order(records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::ranges::stable_sort(order, {}, [&](std::size_t i) { return records[i].timestamp; });

    // Most recent direct-hit time per address, plus the same pairs ordered by
    // time so the addresses still inside the window can be enumerated.
    std::map<std::string, double> last_hit;
    std::set<std::pair<double, std::string>> by_time;
    const double window = cfg.ttl_window;

    auto set_for = [&](const std::string& ip, const PacketRecord& rec) -> IpActivitySet& {
        auto [it, fresh] = out.try_emplace(ip);
        if (fresh) {
            it->second.ip = ip;
            it->second.scope = rec.scope;
        }
        return it->second;
    };

    for (std::size_t idx : order) {
        const PacketRecord& rec = records[idx];
        set_for(rec.src_ip, rec).records.push_back(rec);
        if (rec.dst_ip != rec.src_ip) set_for(rec.dst_ip, rec).records.push_back(rec);

        for (auto it = by_time.rbegin(); it != by_time.rend(); ++it) {
            const auto& [hit, ip] = *it;
            if (!(rec.timestamp - hit < window)) break;
            if (ip == rec.src_ip || ip == rec.dst_ip) continue;
            out.at(ip).records.push_back(rec);
        }

        for (const std::string* ip : {&rec.src_ip, &rec.dst_ip}) {
            auto [it, fresh] = last_hit.try_emplace(*ip, rec.timestamp);
            if (!fresh) {
                by_time.erase({it->second, *ip});
                it->second = rec.timestamp;
            }
            by_time.emplace(rec.timestamp, *ip);
        }
    }
    return out;
}

FeatureSelection select_features(const ActivityMap& sets, std::span<const Feature> allowlist) {
    FeatureSelection sel;
    for (Feature f : allowlist) {
        if (std::ranges::find(sel.kept, f) != sel.kept.end() || std::ranges::find(sel.dropped, f) != sel.dropped.end()) {
            continue;
        }
        bool any = false;
        bool varies = false;
        double first = 0.0;
        for (const auto& [ip, set] : sets) {
            for (const auto& rec : set.records) {
                auto v = feature_value(rec, f);
                if (!v) continue;
                if (!any) {
                    any = true;
                    first = *v;
                } else if (*v != first) {
                    varies = true;
                    break;
                }
            }
            if (varies) break;
        }
        const bool keep = is_count_feature(f) ? any : varies;
        (keep ? sel.kept : sel.dropped).push_back(f);
    }
    return sel;
}

std::set<std::string> initiators(std::span<const PacketRecord> records) {
    std::map<std::pair<std::string, std::string>, std::pair<double, const std::string*>> first;
    for (const auto& r : records) {
        auto key = std::minmax(r.src_ip, r.dst_ip);
        auto [it, fresh] = first.try_emplace({key.first, key.second}, r.timestamp, &r.src_ip);
        if (!fresh && r.timestamp < it->second.first) it->second = {r.timestamp, &r.src_ip};
    }
    std::set<std::string> out;
    for (const auto& [pair, v] : first) out.insert(*v.second);
    return out;
}

}  // namespace polscope::capture
