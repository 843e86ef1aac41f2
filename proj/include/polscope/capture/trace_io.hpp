#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "polscope/capture/packet.hpp"

namespace polscope::capture {

struct ParseResult {
    std::vector<PacketRecord> records;
    /// Packets without an extractable IP layer (or malformed JSONL lines).
    std::size_t skipped = 0;
};

/// Reads a pcap (micro- or nanosecond variant, either byte order) or a JSONL
/// trace. The format is sniffed from the leading magic number. Every record
/// is labelled with `scope`, regardless of any scope stored in the file.
/// Throws IngestError when the file cannot be read or the pcap header is bad.
ParseResult parse_capture(const std::filesystem::path& path, ScopeId scope);
ParseResult parse_capture_bytes(std::string_view bytes, ScopeId scope);

ParseResult parse_pcap(std::string_view bytes, ScopeId scope);
ParseResult parse_jsonl(std::string_view text, ScopeId scope);

// JSONL trace interchange: one object per line.
//   {"t":..., "src":..., "dst":..., "proto":..., "len":...,
//    "tcp":{sport,dport,syn,ack,len,reassembled_len,time_relative,time_delta},
//    "payload_len":..., "dns_qname":..., "ecs":..., "scope":...}
nlohmann::json record_to_json(const PacketRecord& record);
PacketRecord record_from_json(const nlohmann::json& obj, ScopeId scope);
void write_jsonl(std::ostream& out, std::span<const PacketRecord> records);

struct PcapWriteResult {
    std::size_t written = 0;
    std::size_t skipped = 0;
    std::vector<std::string> warnings;
};

/// Serializes records as minimal raw-IP packets (LINKTYPE_RAW, microsecond
/// timestamps). Header fields are reconstructed so that parse_pcap recovers
/// the extracted fields; records that cannot be represented are skipped.
PcapWriteResult write_pcap(std::ostream& out, std::span<const PacketRecord> records);

}  // namespace polscope::capture
