#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "polscope/capture/packet.hpp"

namespace polscope::capture {

/// Numeric features derived from a PacketRecord. Names follow the Wireshark
/// field names of the extracted header fields.
enum class Feature {
    PacketCount,
    IpLen,
    IpProto,
    TcpDstPort,
    TcpSyn,
    TcpAck,
    TcpLen,
    TcpReassembledLen,
    TcpTimeRelative,
    TcpTimeDelta,
    TcpPayload,
    DnsQryName,
    EdnsClientSubnet,
};

std::string_view feature_name(Feature f);
/// Throws std::invalid_argument for unknown names.
Feature parse_feature(std::string_view name);
const std::vector<Feature>& all_features();

/// Count-style features contribute an indicator of 1 per record that carries
/// them, so they are never constant-valued in a meaningful sense.
bool is_count_feature(Feature f);

/// Value of `f` for one record, or nullopt when the field is absent.
std::optional<double> feature_value(const PacketRecord& rec, Feature f);

struct IngestConfig {
    /// Cache-hit attribution window in seconds. Must be > 0.
    double ttl_window = 1.0;
    std::vector<Feature> feature_allowlist = all_features();
    /// Epoch offset that fixes the one-second bin boundaries of every series.
    double time_origin = 0.0;
    /// When set, DNS records whose visible query name is neither this domain
    /// nor a subdomain of it are discarded before attribution.
    std::optional<std::string> focus_domain;

    void validate() const;
};

/// Records attributed to one address within one scope.
struct IpActivitySet {
    std::string ip;
    ScopeId scope;
    std::vector<PacketRecord> records;
};

using ActivityMap = std::map<std::string, IpActivitySet>;

/// Drops records made irrelevant by cfg.focus_domain (no-op when unset).
std::vector<PacketRecord> apply_focus(std::span<const PacketRecord> records, const IngestConfig& cfg);

/// Builds the per-address packet sets: every record is attributed to its
/// source and destination, and additionally to every other address whose most
/// recent prior direct hit lies strictly within ttl_window before it.
/// Attribution is measured against direct hits only; cache hits never extend
/// the window. Records of mixed scopes are grouped per scope of the first
/// record; callers pass one scope at a time.
ActivityMap group_by_ip(std::span<const PacketRecord> records, const IngestConfig& cfg);

/// Addresses that opened at least one conversation: for every unordered
/// address pair, the source of the earliest record between them.
std::set<std::string> initiators(std::span<const PacketRecord> records);

struct FeatureSelection {
    std::vector<Feature> kept;
    std::vector<Feature> dropped;

    [[nodiscard]] bool usable() const { return !kept.empty(); }
};

/// Keeps allowlisted features that carry information in this scope. Numeric
/// features are dropped when every present value is identical (zero
/// variance); count-style features are dropped when no record carries them.
FeatureSelection select_features(const ActivityMap& sets, std::span<const Feature> allowlist);

}  // namespace polscope::capture
