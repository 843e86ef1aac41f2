#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "polscope/capture/packet.hpp"
#include "polscope/capture/trace_io.hpp"
#include "polscope/linkage/linkage.hpp"
#include "polscope/sim/corpus.hpp"

namespace polscope::sim {

enum class DnsMode { PoDNS, DoT, DoH };

std::string_view dns_mode_name(DnsMode mode);
/// Accepts "podns", "dot", "doh" (case-insensitive).
DnsMode parse_dns_mode(std::string_view text);

struct PptConfig {
    DnsMode dns_mode = DnsMode::PoDNS;
    bool vpn = false;
    /// Resolver forwards an EDNS client-subnet /24 toward authoritative servers.
    bool ecs_leak = false;

    /// "podns", "dot+vpn", ...
    [[nodiscard]] std::string label() const;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Topology {
    int isp_count = 10;
    double dns_ttl = 300.0;
    double hop_delay_min = 0.005;
    double hop_delay_max = 0.050;
    /// Stub-side DNS cache on the client; off models a browser that always asks.
    bool client_dns_cache = false;
    /// Idle time after which an encrypted DNS session is torn down.
    double dot_idle_timeout = 10.0;
    double doh_idle_timeout = 30.0;

    std::string resolver_ip = "192.0.2.53";
    std::string root_ip = "198.41.0.4";
    std::string tld_ip = "192.5.6.30";
    std::string sld_ip = "203.0.113.53";
    std::string service_ip = "203.0.113.10";
    std::string service_domain = "board.example.org";
    std::string vpn_entry_ip = "198.51.100.1";
    std::string vpn_egress_ip = "198.51.100.2";
    std::size_t decoy_count = 40;

    /// Start of the simulated clock, in epoch seconds.
    double epoch = 1'700'000'000.0;

    /// Throws ConfigError when the scope paths cannot be built.
    void validate() const;
    [[nodiscard]] std::string decoy_domain(std::size_t i) const;
    [[nodiscard]] std::string decoy_ip(std::size_t i) const;
};

struct ClientProfile {
    std::string client_ip;
    int isp_index = 1;
    PptConfig ppt;
    std::string persona;
    std::vector<Post> posts;
    double background_min = 15.0;
    double background_max = 30.0;
};

struct GroundTruth {
    std::map<std::string, std::string> persona_to_ip;
    std::map<std::string, int> persona_isp;
    /// Scope name -> number of emitted records.
    std::map<std::string, std::size_t> manifest;
    PptConfig ppt;
    std::uint64_t seed = 0;

    [[nodiscard]] nlohmann::json to_json() const;
    static GroundTruth from_json(const nlohmann::json& obj);
};

struct SimulationOutput {
    std::map<capture::ScopeId, std::vector<capture::PacketRecord>> traces;
    std::vector<linkage::MessageRecord> board_log;
    GroundTruth truth;
};

/// One client per persona, assigned to ISPs uniformly (balanced shuffle).
std::vector<ClientProfile> make_profiles(const std::vector<ThreadSchedule>& groups, const PptConfig& ppt,
                                         const Topology& topology, std::mt19937_64& rng);

/// Replays every post as DNS resolution + HTTPS exchange, adds background
/// browsing, and records each packet at every scope it traverses.
SimulationOutput simulate(const std::vector<ClientProfile>& profiles, const Topology& topology, std::uint64_t seed);

/// Writes <scope>.jsonl per scope, board_log.jsonl and ground_truth.json.
void write_bundle(const SimulationOutput& out, const std::filesystem::path& dir);

/// Reads a board log written by write_bundle.
std::vector<linkage::MessageRecord> read_board_log(const std::filesystem::path& path);
std::vector<linkage::MessageRecord> parse_board_log(std::string_view text);

/// Converts a JSONL trace into a pcap file.
capture::PcapWriteResult emit_pcap(const std::filesystem::path& jsonl, const std::filesystem::path& pcap);

}  // namespace polscope::sim
