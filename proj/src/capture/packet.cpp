#include "polscope/capture/packet.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>

namespace polscope::capture {

namespace {

struct KindName {
    ScopeKind kind;
    std::string_view name;
};

constexpr std::array<KindName, 13> kKindNames{{
    {ScopeKind::Access, "access"},
    {ScopeKind::AccessToResolver, "access-to-resolver"},
    {ScopeKind::Resolver, "resolver"},
    {ScopeKind::ResolverToAuthZones, "resolver-to-auth"},
    {ScopeKind::Root, "root"},
    {ScopeKind::TLD, "tld"},
    {ScopeKind::SLD, "sld"},
    {ScopeKind::AccessToService, "access-to-service"},
    {ScopeKind::Service, "service"},
    {ScopeKind::AccessToVPN, "access-to-vpn"},
    {ScopeKind::VPNProvider, "vpn-provider"},
    {ScopeKind::VPNToResolver, "vpn-to-resolver"},
    {ScopeKind::VPNToService, "vpn-to-service"},
}};

std::string lowered(std::string_view text) {
    std::string out(text);
    std::ranges::transform(out, out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::ranges::replace(out, '_', '-');
    return out;
}

}  // namespace

ScopeClass ScopeId::classification() const noexcept {
    switch (kind) {
        case ScopeKind::Access:
        case ScopeKind::Resolver:
        case ScopeKind::Root:
        case ScopeKind::TLD:
        case ScopeKind::SLD:
        case ScopeKind::VPNProvider:
        case ScopeKind::Service:
            return ScopeClass::LowOrder;
        default:
            return ScopeClass::Amalgamation;
    }
}

std::string_view kind_name(ScopeKind kind) {
    for (const auto& kn : kKindNames) {
        if (kn.kind == kind) return kn.name;
    }
    return "unknown";
}

std::vector<ScopeKind> all_scope_kinds() {
    std::vector<ScopeKind> out;
    for (const auto& kn : kKindNames) out.push_back(kn.kind);
    return out;
}

std::string ScopeId::name() const {
    if (kind == ScopeKind::Access) {
        return isp > 0 ? "access-isp" + std::to_string(isp) : std::string("access");
    }
    return std::string(kind_name(kind));
}

ScopeId ScopeId::parse(std::string_view text) {
    const std::string key = lowered(text);
    constexpr std::string_view kIspPrefix = "access-isp";
    if (key.starts_with(kIspPrefix)) {
        int idx = 0;
        const char* first = key.data() + kIspPrefix.size();
        const char* last = key.data() + key.size();
        auto [ptr, ec] = std::from_chars(first, last, idx);
        if (ec != std::errc{} || ptr != last || first == last || idx < 1) {
            throw std::invalid_argument("bad ISP index in scope name: " + std::string(text));
        }
        return ScopeId::access(idx);
    }
    for (const auto& kn : kKindNames) {
        if (kn.name == key) return ScopeId{kn.kind, 0};
    }
    throw std::invalid_argument("unknown scope name: " + std::string(text));
}

}  // namespace polscope::capture
