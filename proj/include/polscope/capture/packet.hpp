#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace polscope::capture {

/// Monitoring vantage regions along the DNS / HTTPS / VPN control path.
enum class ScopeKind : std::uint8_t {
    Access,
    AccessToResolver,
    Resolver,
    ResolverToAuthZones,
    Root,
    TLD,
    SLD,
    AccessToService,
    Service,
    AccessToVPN,
    VPNProvider,
    VPNToResolver,
    VPNToService,
};

enum class ScopeClass : std::uint8_t { LowOrder, Amalgamation };

/// A scope label. Access scopes carry the ISP index (1-based); every other
/// kind has isp == 0.
struct ScopeId {
    ScopeKind kind = ScopeKind::Service;
    int isp = 0;

    static ScopeId access(int isp_index) { return {ScopeKind::Access, isp_index}; }

    [[nodiscard]] ScopeClass classification() const noexcept;
    [[nodiscard]] bool is_low_order() const noexcept { return classification() == ScopeClass::LowOrder; }

    /// Canonical kebab-case name, e.g. "access-isp3", "resolver-to-auth".
    [[nodiscard]] std::string name() const;

    /// Inverse of name(). Throws std::invalid_argument for unknown names.
    static ScopeId parse(std::string_view text);

    auto operator<=>(const ScopeId&) const = default;
};

/// Every scope kind, in declaration order.
std::vector<ScopeKind> all_scope_kinds();
std::string_view kind_name(ScopeKind kind);

class IngestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// One observed packet, reduced to the extracted header fields.
/// Optional fields are absent when the protocol layer did not carry them;
/// zero is a legitimate observed value and never stands for "missing".
struct PacketRecord {
    double timestamp = 0.0;
    std::string src_ip;
    std::string dst_ip;
    int proto = 0;
    std::uint32_t ip_len = 0;

    std::optional<std::uint16_t> tcp_srcport;
    std::optional<std::uint16_t> tcp_dstport;
    std::optional<bool> tcp_syn;
    std::optional<bool> tcp_ack;
    std::optional<std::uint32_t> tcp_len;
    std::optional<std::uint32_t> tcp_reassembled_len;
    std::optional<double> tcp_time_relative;
    std::optional<double> tcp_time_delta;
    std::optional<std::uint32_t> payload_len;
    std::optional<std::string> dns_qry_name;
    std::optional<std::string> edns_client_subnet;

    ScopeId scope;

    bool operator==(const PacketRecord&) const = default;
};

inline constexpr int kProtoTcp = 6;
inline constexpr int kProtoUdp = 17;

}  // namespace polscope::capture
