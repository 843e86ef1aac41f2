#include "polscope/service/store.hpp"

#include <sqlite3.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "polscope/util/digest.hpp"

namespace polscope::service {

namespace {

constexpr const char* kSchema = R"sql(
CREATE TABLE IF NOT EXISTS captures (
    id TEXT PRIMARY KEY,
    scope TEXT NOT NULL,
    sha256 TEXT NOT NULL,
    format TEXT NOT NULL,
    records INTEGER NOT NULL,
    skipped INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS logs (
    id TEXT PRIMARY KEY,
    sha256 TEXT NOT NULL,
    posts INTEGER NOT NULL,
    personas INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS jobs (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    id TEXT UNIQUE NOT NULL,
    status TEXT NOT NULL,
    progress REAL NOT NULL DEFAULT 0,
    error TEXT NOT NULL DEFAULT '',
    request TEXT NOT NULL,
    config_digest TEXT NOT NULL,
    result TEXT
);
CREATE TABLE IF NOT EXISTS persona_hits (
    job_id TEXT NOT NULL,
    user TEXT NOT NULL,
    user_lc TEXT NOT NULL,
    scope_set TEXT NOT NULL,
    best_ip TEXT NOT NULL,
    score REAL NOT NULL,
    config_digest TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS persona_hits_user ON persona_hits(user_lc);
)sql";

// Owns one prepared statement.
class Stmt {
public:
    Stmt(sqlite3* db, const char* sql) {
        if (sqlite3_prepare_v2(db, sql, -1, &st_, nullptr) != SQLITE_OK) {
            throw std::runtime_error(std::string("sqlite prepare: ") + sqlite3_errmsg(db));
        }
    }
    ~Stmt() { sqlite3_finalize(st_); }
    Stmt(const Stmt&) = delete;
    Stmt& operator=(const Stmt&) = delete;

    Stmt& bind(int i, const std::string& v) {
        sqlite3_bind_text(st_, i, v.c_str(), static_cast<int>(v.size()), SQLITE_TRANSIENT);
        return *this;
    }
    Stmt& bind(int i, std::int64_t v) {
        sqlite3_bind_int64(st_, i, v);
        return *this;
    }
    Stmt& bind(int i, double v) {
        sqlite3_bind_double(st_, i, v);
        return *this;
    }
    Stmt& bind_null(int i) {
        sqlite3_bind_null(st_, i);
        return *this;
    }
    void reset() {
        sqlite3_reset(st_);
        sqlite3_clear_bindings(st_);
    }
    bool step() {
        const int rc = sqlite3_step(st_);
        if (rc == SQLITE_ROW) return true;
        if (rc == SQLITE_DONE) return false;
        throw std::runtime_error(std::string("sqlite step: ") + sqlite3_errmsg(sqlite3_db_handle(st_)));
    }
    [[nodiscard]] std::string text(int col) const {
        const auto* p = sqlite3_column_text(st_, col);
        return p ? std::string(reinterpret_cast<const char*>(p)) : std::string();
    }
    [[nodiscard]] bool is_null(int col) const { return sqlite3_column_type(st_, col) == SQLITE_NULL; }
    [[nodiscard]] std::int64_t integer(int col) const { return sqlite3_column_int64(st_, col); }
    [[nodiscard]] double real(int col) const { return sqlite3_column_double(st_, col); }

private:
    sqlite3_stmt* st_ = nullptr;
};

std::string lower(std::string s) {
    std::ranges::transform(s, s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

constexpr const char* kJobColumns = "id, status, progress, error, request, config_digest, result, seq";

JobRecord read_job(const Stmt& st) {
    JobRecord j;
    j.id = st.text(0);
    j.status = parse_status(st.text(1));
    j.progress = st.real(2);
    j.error = st.text(3);
    j.request = nlohmann::json::parse(st.text(4));
    j.config_digest = st.text(5);
    if (!st.is_null(6)) j.result = nlohmann::json::parse(st.text(6));
    j.sequence = st.integer(7);
    return j;
}

}  // namespace

std::string_view status_name(JobStatus s) {
    switch (s) {
        case JobStatus::Queued: return "queued";
        case JobStatus::Running: return "running";
        case JobStatus::Done: return "done";
        case JobStatus::Failed: return "failed";
    }
    return "queued";
}

JobStatus parse_status(std::string_view text) {
    if (text == "queued") return JobStatus::Queued;
    if (text == "running") return JobStatus::Running;
    if (text == "done") return JobStatus::Done;
    if (text == "failed") return JobStatus::Failed;
    throw std::invalid_argument("unknown job status: " + std::string(text));
}

Store::Store(const std::filesystem::path& data_dir) : dir_(data_dir) {
    std::filesystem::create_directories(dir_ / "blobs");
    const auto db_path = (dir_ / "polscope.db").string();
    if (sqlite3_open(db_path.c_str(), &db_) != SQLITE_OK) {
        const std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
        sqlite3_close(db_);
        throw std::runtime_error("cannot open " + db_path + ": " + msg);
    }
    sqlite3_busy_timeout(db_, 5000);
    exec("PRAGMA journal_mode=WAL;");
    exec(kSchema);
}

Store::~Store() { sqlite3_close(db_); }

void Store::exec(const std::string& sql) const {
    char* err = nullptr;
    if (sqlite3_exec(db_, sql.c_str(), nullptr, nullptr, &err) != SQLITE_OK) {
        std::string msg = err ? err : "unknown error";
        sqlite3_free(err);
        throw std::runtime_error("sqlite: " + msg);
    }
}

std::string Store::put_blob(std::string_view bytes) {
    const std::string digest = util::sha256_hex(bytes);
    const auto path = dir_ / "blobs" / digest;
    std::lock_guard lock(mu_);
    if (!std::filesystem::exists(path)) {
        const auto tmp = path.string() + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary);
            out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
            if (!out) throw std::runtime_error("cannot write blob " + tmp);
        }
        std::filesystem::rename(tmp, path);
    }
    return digest;
}

std::string Store::read_blob(const std::string& sha256) const {
    std::ifstream in(dir_ / "blobs" / sha256, std::ios::binary);
    if (!in) throw std::runtime_error("missing blob " + sha256);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void Store::add_capture(const CaptureInfo& info) {
    std::lock_guard lock(mu_);
    Stmt st(db_, "INSERT OR REPLACE INTO captures VALUES (?, ?, ?, ?, ?, ?)");
    st.bind(1, info.id).bind(2, info.scope).bind(3, info.sha256).bind(4, info.format);
    st.bind(5, static_cast<std::int64_t>(info.records)).bind(6, static_cast<std::int64_t>(info.skipped));
    st.step();
}

std::optional<CaptureInfo> Store::capture(const std::string& id) const {
    std::lock_guard lock(mu_);
    Stmt st(db_, "SELECT id, scope, sha256, format, records, skipped FROM captures WHERE id = ?");
    st.bind(1, id);
    if (!st.step()) return std::nullopt;
    return CaptureInfo{st.text(0), st.text(1), st.text(2), st.text(3), static_cast<std::size_t>(st.integer(4)),
                       static_cast<std::size_t>(st.integer(5))};
}

void Store::add_log(const LogInfo& info) {
    std::lock_guard lock(mu_);
    Stmt st(db_, "INSERT OR REPLACE INTO logs VALUES (?, ?, ?, ?)");
    st.bind(1, info.id).bind(2, info.sha256);
    st.bind(3, static_cast<std::int64_t>(info.posts)).bind(4, static_cast<std::int64_t>(info.personas));
    st.step();
}

std::optional<LogInfo> Store::log(const std::string& id) const {
    std::lock_guard lock(mu_);
    Stmt st(db_, "SELECT id, sha256, posts, personas FROM logs WHERE id = ?");
    st.bind(1, id);
    if (!st.step()) return std::nullopt;
    return LogInfo{st.text(0), st.text(1), static_cast<std::size_t>(st.integer(2)),
                   static_cast<std::size_t>(st.integer(3))};
}

JobRecord Store::create_job(const nlohmann::json& request, const std::string& config_digest) {
    std::lock_guard lock(mu_);
    exec("BEGIN IMMEDIATE");
    try {
        std::int64_t next = 1;
        {
            Stmt q(db_, "SELECT COALESCE(MAX(seq), 0) + 1 FROM jobs");
            q.step();
            next = q.integer(0);
        }
        char id[32];
        std::snprintf(id, sizeof id, "job-%06lld", static_cast<long long>(next));
        Stmt st(db_, "INSERT INTO jobs (seq, id, status, request, config_digest) VALUES (?, ?, 'queued', ?, ?)");
        st.bind(1, next).bind(2, std::string(id)).bind(3, request.dump()).bind(4, config_digest);
        st.step();
        exec("COMMIT");
        JobRecord j;
        j.id = id;
        j.request = request;
        j.config_digest = config_digest;
        j.sequence = next;
        return j;
    } catch (...) {
        exec("ROLLBACK");
        throw;
    }
}

std::optional<JobRecord> Store::job(const std::string& id) const {
    std::lock_guard lock(mu_);
    Stmt st(db_, (std::string("SELECT ") + kJobColumns + " FROM jobs WHERE id = ?").c_str());
    st.bind(1, id);
    if (!st.step()) return std::nullopt;
    return read_job(st);
}

std::vector<JobRecord> Store::jobs_with_status(JobStatus status) const {
    std::lock_guard lock(mu_);
    Stmt st(db_, (std::string("SELECT ") + kJobColumns + " FROM jobs WHERE status = ? ORDER BY seq").c_str());
    st.bind(1, std::string(status_name(status)));
    std::vector<JobRecord> out;
    while (st.step()) out.push_back(read_job(st));
    return out;
}

bool Store::mark_running(const std::string& id) {
    std::lock_guard lock(mu_);
    Stmt st(db_, "UPDATE jobs SET status = 'running' WHERE id = ? AND status = 'queued'");
    st.bind(1, id);
    st.step();
    return sqlite3_changes(db_) == 1;
}

void Store::set_progress(const std::string& id, double progress) {
    std::lock_guard lock(mu_);
    Stmt st(db_, "UPDATE jobs SET progress = ? WHERE id = ? AND status = 'running'");
    st.bind(1, progress).bind(2, id);
    st.step();
}

bool Store::finish_job(const std::string& id, const nlohmann::json& result, const std::vector<PersonaHit>& hits) {
    std::lock_guard lock(mu_);
    exec("BEGIN IMMEDIATE");
    try {
        Stmt st(db_, "UPDATE jobs SET status = 'done', progress = 100, result = ? WHERE id = ? AND status = 'running'");
        st.bind(1, result.dump()).bind(2, id);
        st.step();
        if (sqlite3_changes(db_) != 1) {
            exec("ROLLBACK");
            return false;
        }
        Stmt row(db_, "INSERT INTO persona_hits VALUES (?, ?, ?, ?, ?, ?, ?)");
        for (const auto& h : hits) {
            row.reset();
            row.bind(1, h.job_id).bind(2, h.user).bind(3, lower(h.user)).bind(4, h.scope_set).bind(5, h.best_ip);
            row.bind(6, h.score).bind(7, h.config_digest);
            row.step();
        }
        exec("COMMIT");
        return true;
    } catch (...) {
        exec("ROLLBACK");
        throw;
    }
}

bool Store::fail_job(const std::string& id, const std::string& error) {
    std::lock_guard lock(mu_);
    Stmt st(db_, "UPDATE jobs SET status = 'failed', error = ? WHERE id = ? AND status IN ('queued', 'running')");
    st.bind(1, error).bind(2, id);
    st.step();
    return sqlite3_changes(db_) == 1;
}

std::vector<PersonaHit> Store::search_personas(const std::string& prefix) const {
    std::vector<PersonaHit> out;
    if (prefix.empty()) return out;
    std::string pattern;
    for (char c : lower(prefix)) {
        if (c == '%' || c == '_' || c == '\\') pattern.push_back('\\');
        pattern.push_back(c);
    }
    pattern.push_back('%');
    std::lock_guard lock(mu_);
    Stmt st(db_,
            "SELECT user, job_id, scope_set, best_ip, score, config_digest FROM persona_hits "
            "WHERE user_lc LIKE ? ESCAPE '\\' ORDER BY score DESC, user, job_id, scope_set");
    st.bind(1, pattern);
    while (st.step()) {
        out.push_back({st.text(0), st.text(1), st.text(2), st.text(3), st.real(4), st.text(5)});
    }
    return out;
}

}  // namespace polscope::service
