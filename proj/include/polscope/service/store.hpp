#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

struct sqlite3;

namespace polscope::service {

enum class JobStatus { Queued, Running, Done, Failed };

std::string_view status_name(JobStatus s);
JobStatus parse_status(std::string_view text);

struct CaptureInfo {
    std::string id;
    std::string scope;
    std::string sha256;
    std::string format;  // "pcap" or "jsonl"
    std::size_t records = 0;
    std::size_t skipped = 0;
};

struct LogInfo {
    std::string id;
    std::string sha256;
    std::size_t posts = 0;
    std::size_t personas = 0;
};

struct JobRecord {
    std::string id;
    JobStatus status = JobStatus::Queued;
    double progress = 0.0;
    std::string error;
    nlohmann::json request;
    std::string config_digest;
    /// Set once the job is done; never rewritten afterwards.
    std::optional<nlohmann::json> result;
    std::int64_t sequence = 0;
};

struct PersonaHit {
    std::string user;
    std::string job_id;
    std::string scope_set;
    std::string best_ip;
    double score = 0.0;
    std::string config_digest;
};

/// Single-file SQLite catalogue plus a content-addressed blob directory.
/// All methods are thread-safe.
class Store {
public:
    explicit Store(const std::filesystem::path& data_dir);
    ~Store();
    Store(const Store&) = delete;
    Store& operator=(const Store&) = delete;

    /// Writes the blob (if new) and returns its SHA-256 hex digest.
    std::string put_blob(std::string_view bytes);
    [[nodiscard]] std::string read_blob(const std::string& sha256) const;

    void add_capture(const CaptureInfo& info);
    [[nodiscard]] std::optional<CaptureInfo> capture(const std::string& id) const;
    void add_log(const LogInfo& info);
    [[nodiscard]] std::optional<LogInfo> log(const std::string& id) const;

    /// Inserts a queued job and returns it with id and sequence filled in.
    JobRecord create_job(const nlohmann::json& request, const std::string& config_digest);
    [[nodiscard]] std::optional<JobRecord> job(const std::string& id) const;
    /// Jobs in a given state, in submission order.
    [[nodiscard]] std::vector<JobRecord> jobs_with_status(JobStatus status) const;

    /// Forward-only transitions; returns false when the move is not allowed.
    bool mark_running(const std::string& id);
    void set_progress(const std::string& id, double progress);
    bool finish_job(const std::string& id, const nlohmann::json& result, const std::vector<PersonaHit>& hits);
    bool fail_job(const std::string& id, const std::string& error);

    /// Persona names starting with `prefix` (case-insensitive), best score first.
    [[nodiscard]] std::vector<PersonaHit> search_personas(const std::string& prefix) const;

private:
    void exec(const std::string& sql) const;

    std::filesystem::path dir_;
    sqlite3* db_ = nullptr;
    mutable std::mutex mu_;
};

}  // namespace polscope::service
