#include "polscope/capture/trace_io.hpp"

#include <arpa/inet.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <tuple>

namespace polscope::capture {

namespace {

using json = nlohmann::json;

constexpr std::uint32_t kMagicMicro = 0xa1b2c3d4;
constexpr std::uint32_t kMagicNano = 0xa1b23c4d;
constexpr std::uint32_t kLinkEthernet = 1;
constexpr std::uint32_t kLinkNull = 0;
constexpr std::uint32_t kLinkRaw = 101;
constexpr std::uint32_t kLinkSll = 113;
constexpr std::uint32_t kLinkIpv4 = 228;
constexpr std::uint32_t kLinkIpv6 = 229;

class ByteReader {
public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] bool has(std::size_t off, std::size_t n) const { return off + n <= data_.size() && off + n >= off; }

    std::uint8_t u8(std::size_t off) const { return static_cast<std::uint8_t>(data_[off]); }
    std::uint16_t be16(std::size_t off) const { return static_cast<std::uint16_t>((u8(off) << 8) | u8(off + 1)); }
    std::uint32_t be32(std::size_t off) const {
        return (std::uint32_t{u8(off)} << 24) | (std::uint32_t{u8(off + 1)} << 16) | (std::uint32_t{u8(off + 2)} << 8) |
               std::uint32_t{u8(off + 3)};
    }
    std::uint32_t le32(std::size_t off) const {
        return (std::uint32_t{u8(off + 3)} << 24) | (std::uint32_t{u8(off + 2)} << 16) |
               (std::uint32_t{u8(off + 1)} << 8) | std::uint32_t{u8(off)};
    }
    std::string_view slice(std::size_t off, std::size_t n) const { return data_.substr(off, n); }

private:
    std::string_view data_;
};

std::string format_ipv4(const unsigned char* bytes) {
    char buf[INET_ADDRSTRLEN];
    ::inet_ntop(AF_INET, bytes, buf, sizeof buf);
    return buf;
}

std::string format_ipv6(const unsigned char* bytes) {
    char buf[INET6_ADDRSTRLEN];
    ::inet_ntop(AF_INET6, bytes, buf, sizeof buf);
    return buf;
}

struct DnsFields {
    std::optional<std::string> qname;
    std::optional<std::string> ecs;
};

// Reads a possibly-compressed DNS name starting at `off`; advances `off` past
// the in-place encoding. Returns nullopt on malformed input.
std::optional<std::string> read_dns_name(const ByteReader& msg, std::size_t& off) {
    std::string name;
    std::size_t cursor = off;
    bool jumped = false;
    int hops = 0;
    while (true) {
        if (!msg.has(cursor, 1)) return std::nullopt;
        const std::uint8_t len = msg.u8(cursor);
        if (len == 0) {
            if (!jumped) off = cursor + 1;
            break;
        }
        if ((len & 0xC0) == 0xC0) {
            if (!msg.has(cursor, 2) || ++hops > 16) return std::nullopt;
            const std::size_t target = msg.be16(cursor) & 0x3FFF;
            if (!jumped) off = cursor + 2;
            jumped = true;
            cursor = target;
            continue;
        }
        if (!msg.has(cursor + 1, len)) return std::nullopt;
        if (!name.empty()) name.push_back('.');
        name.append(msg.slice(cursor + 1, len));
        cursor += 1 + len;
    }
    return name;
}

std::optional<std::string> decode_ecs(const ByteReader& opt, std::size_t off, std::size_t len) {
    if (len < 4) return std::nullopt;
    const std::uint16_t family = opt.be16(off);
    const std::uint8_t source_prefix = opt.u8(off + 2);
    const std::size_t addr_bytes = len - 4;
    if (family == 1) {
        std::array<unsigned char, 4> addr{};
        for (std::size_t i = 0; i < std::min<std::size_t>(addr_bytes, 4); ++i) addr[i] = opt.u8(off + 4 + i);
        return format_ipv4(addr.data()) + "/" + std::to_string(source_prefix);
    }
    if (family == 2) {
        std::array<unsigned char, 16> addr{};
        for (std::size_t i = 0; i < std::min<std::size_t>(addr_bytes, 16); ++i) addr[i] = opt.u8(off + 4 + i);
        return format_ipv6(addr.data()) + "/" + std::to_string(source_prefix);
    }
    return std::nullopt;
}

DnsFields parse_dns(std::string_view payload) {
    DnsFields out;
    ByteReader msg(payload);
    if (!msg.has(0, 12)) return out;
    const std::uint16_t qd = msg.be16(4);
    const std::uint16_t an = msg.be16(6);
    const std::uint16_t ns = msg.be16(8);
    const std::uint16_t ar = msg.be16(10);
    std::size_t off = 12;
    for (std::uint16_t i = 0; i < qd; ++i) {
        auto name = read_dns_name(msg, off);
        if (!name || !msg.has(off, 4)) return out;
        off += 4;
        if (i == 0 && !name->empty()) out.qname = std::move(*name);
    }
    const std::uint32_t rr_total = std::uint32_t{an} + ns + ar;
    for (std::uint32_t i = 0; i < rr_total; ++i) {
        auto name = read_dns_name(msg, off);
        if (!name || !msg.has(off, 10)) return out;
        const std::uint16_t type = msg.be16(off);
        const std::uint16_t rdlen = msg.be16(off + 8);
        off += 10;
        if (!msg.has(off, rdlen)) return out;
        if (type == 41) {
            std::size_t opt = off;
            while (opt + 4 <= off + rdlen) {
                const std::uint16_t code = msg.be16(opt);
                const std::uint16_t olen = msg.be16(opt + 2);
                if (opt + 4 + olen > off + rdlen) break;
                if (code == 8) out.ecs = decode_ecs(msg, opt + 4, olen);
                opt += 4 + olen;
            }
        }
        off += rdlen;
    }
    return out;
}

using FlowKey = std::tuple<std::string, std::uint16_t, std::string, std::uint16_t>;

struct FlowClock {
    double first = 0.0;
    double last = 0.0;
};

FlowKey flow_key(const std::string& a, std::uint16_t pa, const std::string& b, std::uint16_t pb) {
    if (std::tie(a, pa) <= std::tie(b, pb)) return {a, pa, b, pb};
    return {b, pb, a, pa};
}

class PcapDecoder {
public:
    PcapDecoder(ScopeId scope) : scope_(scope) {}

    // Returns false when the frame has no usable IP layer.
    bool decode(std::uint32_t linktype, std::string_view frame, double ts, PacketRecord& out) {
        ByteReader r(frame);
        std::size_t off = 0;
        int version_hint = 0;
        switch (linktype) {
            case kLinkEthernet: {
                if (!r.has(0, 14)) return false;
                std::uint16_t ethertype = r.be16(12);
                off = 14;
                while ((ethertype == 0x8100 || ethertype == 0x88A8) && r.has(off, 4)) {
                    ethertype = r.be16(off + 2);
                    off += 4;
                }
                if (ethertype == 0x0800) version_hint = 4;
                else if (ethertype == 0x86DD) version_hint = 6;
                else return false;
                break;
            }
            case kLinkSll: {
                if (!r.has(0, 16)) return false;
                const std::uint16_t proto = r.be16(14);
                off = 16;
                if (proto == 0x0800) version_hint = 4;
                else if (proto == 0x86DD) version_hint = 6;
                else return false;
                break;
            }
            case kLinkNull: {
                if (!r.has(0, 4)) return false;
                off = 4;
                break;
            }
            case kLinkRaw:
            case kLinkIpv4:
            case kLinkIpv6:
                break;
            default:
                return false;
        }
        return decode_ip(frame.substr(std::min(off, frame.size())), version_hint, ts, out);
    }

private:
    bool decode_ip(std::string_view pkt, int version_hint, double ts, PacketRecord& out) {
        ByteReader r(pkt);
        if (!r.has(0, 1)) return false;
        const int version = r.u8(0) >> 4;
        if (version_hint != 0 && version != version_hint) return false;

        std::size_t header_len = 0;
        std::uint32_t total_len = 0;
        int proto = 0;
        out = PacketRecord{};
        out.timestamp = ts;
        out.scope = scope_;
        if (version == 4) {
            if (!r.has(0, 20)) return false;
            header_len = static_cast<std::size_t>(r.u8(0) & 0x0F) * 4;
            if (header_len < 20 || !r.has(0, header_len)) return false;
            total_len = r.be16(2);
            proto = r.u8(9);
            std::array<unsigned char, 4> a{}, b{};
            std::memcpy(a.data(), pkt.data() + 12, 4);
            std::memcpy(b.data(), pkt.data() + 16, 4);
            out.src_ip = format_ipv4(a.data());
            out.dst_ip = format_ipv4(b.data());
        } else if (version == 6) {
            if (!r.has(0, 40)) return false;
            total_len = 40u + r.be16(4);
            proto = r.u8(6);
            header_len = 40;
            std::array<unsigned char, 16> a{}, b{};
            std::memcpy(a.data(), pkt.data() + 8, 16);
            std::memcpy(b.data(), pkt.data() + 24, 16);
            out.src_ip = format_ipv6(a.data());
            out.dst_ip = format_ipv6(b.data());
            // Walk the common extension headers.
            while ((proto == 0 || proto == 43 || proto == 60) && r.has(header_len, 2)) {
                proto = r.u8(header_len);
                header_len += (static_cast<std::size_t>(r.u8(header_len + 1)) + 1) * 8;
            }
        } else {
            return false;
        }
        out.proto = proto;
        out.ip_len = total_len;

        const std::size_t l4_avail = std::min<std::size_t>(pkt.size(), std::max<std::size_t>(total_len, header_len));
        if (header_len > l4_avail) return true;
        const std::string_view l4 = pkt.substr(header_len, l4_avail - header_len);
        const std::uint32_t l4_len = total_len > header_len ? static_cast<std::uint32_t>(total_len - header_len) : 0;
        ByteReader t(l4);

        if (proto == kProtoTcp && t.has(0, 20)) {
            const std::uint16_t sport = t.be16(0);
            const std::uint16_t dport = t.be16(2);
            const std::size_t data_off = static_cast<std::size_t>(t.u8(12) >> 4) * 4;
            const std::uint8_t flags = t.u8(13);
            out.tcp_srcport = sport;
            out.tcp_dstport = dport;
            out.tcp_syn = (flags & 0x02) != 0;
            out.tcp_ack = (flags & 0x10) != 0;
            const std::uint32_t seg = l4_len >= data_off ? static_cast<std::uint32_t>(l4_len - data_off) : 0;
            out.tcp_len = seg;
            out.payload_len = seg;

            auto [it, fresh] = flows_.try_emplace(flow_key(out.src_ip, sport, out.dst_ip, dport), FlowClock{ts, ts});
            FlowClock& clock = it->second;
            out.tcp_time_relative = ts - clock.first;
            out.tcp_time_delta = ts - clock.last;
            clock.last = ts;

            if ((sport == 53 || dport == 53) && t.has(data_off, 2)) {
                auto dns = parse_dns(l4.substr(data_off + 2));
                out.dns_qry_name = std::move(dns.qname);
                out.edns_client_subnet = std::move(dns.ecs);
            }
        } else if (proto == kProtoUdp && t.has(0, 8)) {
            const std::uint16_t sport = t.be16(0);
            const std::uint16_t dport = t.be16(2);
            out.payload_len = l4_len >= 8 ? l4_len - 8 : 0;
            if (sport == 53 || dport == 53) {
                auto dns = parse_dns(l4.substr(8));
                out.dns_qry_name = std::move(dns.qname);
                out.edns_client_subnet = std::move(dns.ecs);
            }
        }
        return true;
    }

    ScopeId scope_;
    std::map<FlowKey, FlowClock> flows_;
};

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open capture file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IngestError("error reading capture file: " + path.string());
    return std::move(ss).str();
}

template <typename T>
void put_opt(json& obj, const char* key, const std::optional<T>& value) {
    if (value) obj[key] = *value;
}

template <typename T>
std::optional<T> get_opt(const json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return std::nullopt;
    return it->get<T>();
}

}  // namespace

ParseResult parse_pcap(std::string_view bytes, ScopeId scope) {
    ByteReader r(bytes);
    if (!r.has(0, 24)) throw IngestError("truncated pcap global header");
    const std::uint32_t magic_le = r.le32(0);
    bool swapped = false;
    bool nanos = false;
    if (magic_le == kMagicMicro) {
    } else if (magic_le == kMagicNano) {
        nanos = true;
    } else if (__builtin_bswap32(magic_le) == kMagicMicro) {
        swapped = true;
    } else if (__builtin_bswap32(magic_le) == kMagicNano) {
        swapped = true;
        nanos = true;
    } else {
        throw IngestError("not a pcap file (bad magic)");
    }
    auto u32 = [&](std::size_t off) { return swapped ? r.be32(off) : r.le32(off); };
    const std::uint32_t linktype = u32(20) & 0x0FFFFFFF;

    ParseResult result;
    PcapDecoder decoder(scope);
    std::size_t off = 24;
    while (r.has(off, 16)) {
        const std::uint32_t sec = u32(off);
        const std::uint32_t frac = u32(off + 4);
        const std::uint32_t incl = u32(off + 8);
        off += 16;
        if (!r.has(off, incl)) {
            ++result.skipped;  // truncated trailing record
            break;
        }
        const double ts = static_cast<double>(sec) + static_cast<double>(frac) * (nanos ? 1e-9 : 1e-6);
        PacketRecord rec;
        if (decoder.decode(linktype, bytes.substr(off, incl), ts, rec)) {
            result.records.push_back(std::move(rec));
        } else {
            ++result.skipped;
        }
        off += incl;
    }
    return result;
}

ParseResult parse_jsonl(std::string_view text, ScopeId scope) {
    ParseResult result;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.remove_suffix(1);
        if (line.empty()) continue;
        try {
            result.records.push_back(record_from_json(json::parse(line), scope));
        } catch (const std::exception&) {
            ++result.skipped;
        }
    }
    return result;
}

ParseResult parse_capture_bytes(std::string_view bytes, ScopeId scope) {
    if (bytes.size() >= 4) {
        ByteReader r(bytes);
        const std::uint32_t m = r.le32(0);
        if (m == kMagicMicro || m == kMagicNano || __builtin_bswap32(m) == kMagicMicro || __builtin_bswap32(m) == kMagicNano) {
            return parse_pcap(bytes, scope);
        }
    }
    return parse_jsonl(bytes, scope);
}

ParseResult parse_capture(const std::filesystem::path& path, ScopeId scope) {
    return parse_capture_bytes(read_file(path), scope);
}

json record_to_json(const PacketRecord& rec) {
    json obj;
    obj["t"] = rec.timestamp;
    obj["src"] = rec.src_ip;
    obj["dst"] = rec.dst_ip;
    obj["proto"] = rec.proto;
    obj["len"] = rec.ip_len;
    json tcp = json::object();
    put_opt(tcp, "sport", rec.tcp_srcport);
    put_opt(tcp, "dport", rec.tcp_dstport);
    put_opt(tcp, "syn", rec.tcp_syn);
    put_opt(tcp, "ack", rec.tcp_ack);
    put_opt(tcp, "len", rec.tcp_len);
    put_opt(tcp, "reassembled_len", rec.tcp_reassembled_len);
    put_opt(tcp, "time_relative", rec.tcp_time_relative);
    put_opt(tcp, "time_delta", rec.tcp_time_delta);
    if (!tcp.empty()) obj["tcp"] = std::move(tcp);
    put_opt(obj, "payload_len", rec.payload_len);
    put_opt(obj, "dns_qname", rec.dns_qry_name);
    put_opt(obj, "ecs", rec.edns_client_subnet);
    obj["scope"] = rec.scope.name();
    return obj;
}

PacketRecord record_from_json(const json& obj, ScopeId scope) {
    PacketRecord rec;
    rec.timestamp = obj.at("t").get<double>();
    rec.src_ip = obj.at("src").get<std::string>();
    rec.dst_ip = obj.at("dst").get<std::string>();
    rec.proto = obj.value("proto", 0);
    rec.ip_len = obj.at("len").get<std::uint32_t>();
    if (!(rec.timestamp >= 0.0) || rec.src_ip.empty() || rec.dst_ip.empty()) {
        throw IngestError("record violates timestamp/address invariants");
    }
    if (auto it = obj.find("tcp"); it != obj.end() && it->is_object()) {
        const json& tcp = *it;
        rec.tcp_srcport = get_opt<std::uint16_t>(tcp, "sport");
        rec.tcp_dstport = get_opt<std::uint16_t>(tcp, "dport");
        rec.tcp_syn = get_opt<bool>(tcp, "syn");
        rec.tcp_ack = get_opt<bool>(tcp, "ack");
        rec.tcp_len = get_opt<std::uint32_t>(tcp, "len");
        rec.tcp_reassembled_len = get_opt<std::uint32_t>(tcp, "reassembled_len");
        rec.tcp_time_relative = get_opt<double>(tcp, "time_relative");
        rec.tcp_time_delta = get_opt<double>(tcp, "time_delta");
    }
    rec.payload_len = get_opt<std::uint32_t>(obj, "payload_len");
    rec.dns_qry_name = get_opt<std::string>(obj, "dns_qname");
    rec.edns_client_subnet = get_opt<std::string>(obj, "ecs");
    rec.scope = scope;
    return rec;
}

void write_jsonl(std::ostream& out, std::span<const PacketRecord> records) {
    for (const auto& rec : records) out << record_to_json(rec).dump() << '\n';
}

// ---------------------------------------------------------------------------
// pcap emission

namespace {

void put_be16(std::string& buf, std::size_t off, std::uint16_t v) {
    buf[off] = static_cast<char>(v >> 8);
    buf[off + 1] = static_cast<char>(v & 0xFF);
}

void put_le32(std::ostream& out, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                                static_cast<char>(v >> 24)};
    out.write(b.data(), 4);
}

void append_be16(std::string& buf, std::uint16_t v) {
    buf.push_back(static_cast<char>(v >> 8));
    buf.push_back(static_cast<char>(v & 0xFF));
}

std::string encode_dns_name(const std::string& name) {
    std::string out;
    std::size_t start = 0;
    while (start < name.size()) {
        std::size_t dot = name.find('.', start);
        if (dot == std::string::npos) dot = name.size();
        const std::size_t len = dot - start;
        if (len == 0 || len > 63) return {};
        out.push_back(static_cast<char>(len));
        out.append(name, start, len);
        start = dot + 1;
    }
    out.push_back('\0');
    return out;
}

// Builds the EDNS client-subnet option body from "addr/prefix".
std::optional<std::string> encode_ecs(const std::string& text) {
    const auto slash = text.find('/');
    if (slash == std::string::npos) return std::nullopt;
    const std::string addr = text.substr(0, slash);
    int prefix = 0;
    try {
        prefix = std::stoi(text.substr(slash + 1));
    } catch (const std::exception&) {
        return std::nullopt;
    }
    std::string body;
    std::array<unsigned char, 16> raw{};
    if (::inet_pton(AF_INET, addr.c_str(), raw.data()) == 1) {
        if (prefix < 0 || prefix > 32) return std::nullopt;
        append_be16(body, 1);
        body.push_back(static_cast<char>(prefix));
        body.push_back('\0');
        body.append(reinterpret_cast<const char*>(raw.data()), 4);
    } else if (::inet_pton(AF_INET6, addr.c_str(), raw.data()) == 1) {
        if (prefix < 0 || prefix > 128) return std::nullopt;
        append_be16(body, 2);
        body.push_back(static_cast<char>(prefix));
        body.push_back('\0');
        body.append(reinterpret_cast<const char*>(raw.data()), 16);
    } else {
        return std::nullopt;
    }
    return body;
}

std::optional<std::string> build_dns_message(const PacketRecord& rec) {
    std::string msg(12, '\0');
    put_be16(msg, 2, 0x0100);  // standard query, recursion desired
    put_be16(msg, 4, 1);
    std::string qname = rec.dns_qry_name ? encode_dns_name(*rec.dns_qry_name) : std::string(1, '\0');
    if (qname.empty()) return std::nullopt;
    msg += qname;
    append_be16(msg, 1);  // QTYPE A
    append_be16(msg, 1);  // QCLASS IN
    if (rec.edns_client_subnet) {
        auto body = encode_ecs(*rec.edns_client_subnet);
        if (!body) return std::nullopt;
        put_be16(msg, 10, 1);
        msg.push_back('\0');    // root owner
        append_be16(msg, 41);   // OPT
        append_be16(msg, 1232); // UDP payload size
        msg.append(4, '\0');    // ext rcode / flags
        append_be16(msg, static_cast<std::uint16_t>(4 + body->size()));
        append_be16(msg, 8);
        append_be16(msg, static_cast<std::uint16_t>(body->size()));
        msg += *body;
    }
    return msg;
}

std::uint16_t ephemeral_port(const PacketRecord& rec) {
    std::uint32_t h = 2166136261u;
    for (char c : rec.src_ip + "|" + rec.dst_ip) h = (h ^ static_cast<unsigned char>(c)) * 16777619u;
    return static_cast<std::uint16_t>(49152 + h % 16384);
}

std::uint16_t ipv4_checksum(const std::string& hdr) {
    std::uint32_t sum = 0;
    for (std::size_t i = 0; i + 1 < hdr.size(); i += 2) {
        sum += (static_cast<std::uint8_t>(hdr[i]) << 8) | static_cast<std::uint8_t>(hdr[i + 1]);
    }
    while (sum >> 16) sum = (sum & 0xFFFF) + (sum >> 16);
    return static_cast<std::uint16_t>(~sum);
}

std::optional<std::string> build_packet(const PacketRecord& rec, std::string& why) {
    std::array<unsigned char, 16> src{}, dst{};
    int family = 0;
    if (::inet_pton(AF_INET, rec.src_ip.c_str(), src.data()) == 1 &&
        ::inet_pton(AF_INET, rec.dst_ip.c_str(), dst.data()) == 1) {
        family = 4;
    } else if (::inet_pton(AF_INET6, rec.src_ip.c_str(), src.data()) == 1 &&
               ::inet_pton(AF_INET6, rec.dst_ip.c_str(), dst.data()) == 1) {
        family = 6;
    } else {
        why = "unparseable address pair " + rec.src_ip + " -> " + rec.dst_ip;
        return std::nullopt;
    }
    const std::size_t ip_hdr = family == 4 ? 20 : 40;

    std::string l4;
    const bool dns = rec.dns_qry_name.has_value() || rec.edns_client_subnet.has_value();
    if (rec.proto == kProtoTcp) {
        const std::size_t hdr_len = 20;
        if (rec.ip_len < ip_hdr + hdr_len) {
            why = "ip.len too small for a TCP header";
            return std::nullopt;
        }
        const std::uint32_t seg = rec.ip_len - static_cast<std::uint32_t>(ip_hdr + hdr_len);
        if (rec.tcp_len && *rec.tcp_len != seg) {
            why = "tcp.len inconsistent with ip.len";
            return std::nullopt;
        }
        if (dns) {
            why = "DNS fields over TCP are not emitted";
            return std::nullopt;
        }
        l4.assign(hdr_len, '\0');
        put_be16(l4, 0, rec.tcp_srcport.value_or(ephemeral_port(rec)));
        put_be16(l4, 2, rec.tcp_dstport.value_or(443));
        l4[12] = static_cast<char>((hdr_len / 4) << 4);
        std::uint8_t flags = 0;
        if (rec.tcp_syn.value_or(false)) flags |= 0x02;
        if (rec.tcp_ack.value_or(false)) flags |= 0x10;
        if (seg > 0) flags |= 0x08;
        l4[13] = static_cast<char>(flags);
        put_be16(l4, 14, 65535);
        l4.append(seg, '\0');
    } else if (rec.proto == kProtoUdp) {
        if (rec.ip_len < ip_hdr + 8) {
            why = "ip.len too small for a UDP header";
            return std::nullopt;
        }
        const std::size_t body_len = rec.ip_len - ip_hdr - 8;
        std::string body;
        std::uint16_t sport = ephemeral_port(rec);
        std::uint16_t dport = 1194;
        if (dns) {
            auto msg = build_dns_message(rec);
            if (!msg) {
                why = "DNS fields not encodable";
                return std::nullopt;
            }
            body = std::move(*msg);
            dport = 53;
        }
        if (body.size() > body_len) {
            why = "ip.len too small for the DNS message";
            return std::nullopt;
        }
        body.resize(body_len, '\0');
        l4.assign(8, '\0');
        put_be16(l4, 0, sport);
        put_be16(l4, 2, dport);
        put_be16(l4, 4, static_cast<std::uint16_t>(8 + body_len));
        l4 += body;
    } else {
        if (dns) {
            why = "DNS fields on a non-UDP transport";
            return std::nullopt;
        }
        if (rec.ip_len < ip_hdr) {
            why = "ip.len smaller than the IP header";
            return std::nullopt;
        }
        l4.assign(rec.ip_len - ip_hdr, '\0');
    }
    if (rec.ip_len > 65535) {
        why = "ip.len exceeds 65535";
        return std::nullopt;
    }

    std::string ip(ip_hdr, '\0');
    if (family == 4) {
        ip[0] = 0x45;
        put_be16(ip, 2, static_cast<std::uint16_t>(rec.ip_len));
        ip[8] = 64;
        ip[9] = static_cast<char>(rec.proto);
        std::memcpy(ip.data() + 12, src.data(), 4);
        std::memcpy(ip.data() + 16, dst.data(), 4);
        put_be16(ip, 10, ipv4_checksum(ip));
    } else {
        ip[0] = 0x60;
        put_be16(ip, 4, static_cast<std::uint16_t>(rec.ip_len - 40));
        ip[6] = static_cast<char>(rec.proto);
        ip[7] = 64;
        std::memcpy(ip.data() + 8, src.data(), 16);
        std::memcpy(ip.data() + 24, dst.data(), 16);
    }
    return ip + l4;
}

}  // namespace

PcapWriteResult write_pcap(std::ostream& out, std::span<const PacketRecord> records) {
    PcapWriteResult result;
    put_le32(out, kMagicMicro);
    const std::array<char, 4> version{2, 0, 4, 0};
    out.write(version.data(), 4);
    put_le32(out, 0);       // thiszone
    put_le32(out, 0);       // sigfigs
    put_le32(out, 65535);   // snaplen
    put_le32(out, kLinkRaw);
    for (const auto& rec : records) {
        std::string why;
        auto pkt = build_packet(rec, why);
        if (!pkt || rec.timestamp < 0.0) {
            ++result.skipped;
            result.warnings.push_back(why.empty() ? "negative timestamp" : why);
            continue;
        }
        auto micros = static_cast<std::int64_t>(std::llround(rec.timestamp * 1e6));
        put_le32(out, static_cast<std::uint32_t>(micros / 1'000'000));
        put_le32(out, static_cast<std::uint32_t>(micros % 1'000'000));
        put_le32(out, static_cast<std::uint32_t>(pkt->size()));
        put_le32(out, static_cast<std::uint32_t>(pkt->size()));
        out.write(pkt->data(), static_cast<std::streamsize>(pkt->size()));
        ++result.written;
    }
    return result;
}

}  // namespace polscope::capture
