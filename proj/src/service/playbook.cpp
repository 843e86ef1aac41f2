#include "polscope/service/playbook.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <stdexcept>

namespace polscope::service {

PptHypothesis PptHypothesis::parse(std::string_view text) {
    std::string s(text);
    std::ranges::transform(s, s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    PptHypothesis h;
    if (s.empty() || s == "none" || s == "podns") return h;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto end = std::min(s.find('+', start), s.size());
        const std::string part = s.substr(start, end - start);
        if (part == "vpn") {
            h.vpn = true;
        } else if (part == "dot" || part == "doh") {
            h.dns_ppt = true;
            h.dns_mode = part;
        } else if (part == "dns" || part == "dns-ppt") {
            h.dns_ppt = true;
        } else if (part != "podns" && part != "none") {
            throw std::invalid_argument("unknown PPT hypothesis: " + std::string(text));
        }
        start = end + 1;
    }
    return h;
}

std::string PptHypothesis::label() const {
    std::string dns = dns_ppt ? dns_mode.value_or("dns-ppt") : "none";
    if (!vpn) return dns;
    return dns == "none" ? "vpn" : dns + "+vpn";
}

nlohmann::json Playbook::to_json() const {
    nlohmann::json scopes_json = nlohmann::json::array();
    for (const auto& a : scopes) {
        nlohmann::json row{{"scope_set", a.scope_set}, {"tier", a.tier}, {"rationale", a.rationale}};
        row["accuracy"] = a.accuracy ? nlohmann::json(*a.accuracy) : nlohmann::json(nullptr);
        scopes_json.push_back(std::move(row));
    }
    return {{"hypothesis", hypothesis}, {"steps", steps}, {"recommended_scopes", scopes_json}, {"unusable_scopes", unusable}};
}

Playbook playbook_for(const PptHypothesis& h, const std::vector<linkage::EvaluationReport>& reports) {
    Playbook pb;
    pb.hypothesis = h.label();
    pb.steps = {
        "Scrape the message board for the persona: every post across all threads, with the finest timestamp available.",
        "Start with a broad vantage point (resolver or access-to-service) and check whether any address matches the "
        "persona's posting pattern.",
    };
    if (!h.vpn) {
        pb.steps.emplace_back(
            "Without a VPN the origin address reaches the service and the resolver, so any scope that carries the "
            "HTTPS exchange or the full DNS lookup works equally well.");
        if (h.dns_ppt) {
            pb.steps.emplace_back(
                "Encrypted DNS hides query names but not timing; expect only a small loss against plain DNS.");
        }
        pb.steps.emplace_back(
            "Root, TLD and SLD servers see only cache misses and never the origin address; do not rely on them.");
        pb.scopes = {
            {"service", 1, "Carries every post as an HTTPS exchange from the origin address.", {}},
            {"access-to-service", 1, "Same traffic as the service, seen one hop earlier.", {}},
            {"resolver", 1, "Sees every lookup from the origin address (no client-side cache assumed).", {}},
            {"access", 1, "The origin ISP sees everything, but only if the right ISP is tapped.", {}},
            {"global", 2, "Every scope at once; useful when no single tap is available.", {}},
        };
        pb.unusable = {"root", "tld", "sld"};
    } else {
        pb.steps.emplace_back(
            "A VPN hides the origin beyond the provider: the resolver, root, TLD, SLD, access-to-service and service "
            "only see the VPN egress address.");
        pb.steps.emplace_back("Move monitoring to a pre-VPN scope or to the VPN provider itself.");
        pb.steps.emplace_back(
            "Leaked EDNS client-subnet data at the authoritative servers can point to the ISP or VPN worth tapping.");
        if (h.dns_mode && *h.dns_mode == "dot") {
            pb.steps.emplace_back("DoT behind a VPN is the hardest case; expect noticeably lower accuracy.");
        }
        pb.scopes = {
            {"access-to-vpn", 1, "Origin address to VPN entry, before the tunnel hides it.", {}},
            {"vpn-provider", 1, "The provider sees both the origin and the tunnelled traffic.", {}},
            {"access", 1, "The origin ISP sees the tunnel traffic, if the right ISP is tapped.", {}},
            {"global", 2, "Every scope at once.", {}},
        };
        pb.unusable = {"resolver", "root", "tld", "sld", "access-to-service", "service"};
    }
    if (!reports.empty()) {
        std::map<std::string, double> acc;
        for (const auto& r : reports) acc[r.scope_set] = r.no_prediction ? 0.0 : r.accuracy;
        for (auto& a : pb.scopes) {
            if (auto it = acc.find(a.scope_set); it != acc.end()) a.accuracy = it->second;
        }
        std::ranges::stable_sort(pb.scopes, [](const ScopeAdvice& a, const ScopeAdvice& b) {
            if (a.tier != b.tier) return a.tier < b.tier;
            return a.accuracy.value_or(-1.0) > b.accuracy.value_or(-1.0);
        });
    }
    return pb;
}

}  // namespace polscope::service
