#include "polscope/service/server.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <set>

#include "polscope/capture/trace_io.hpp"
#include "polscope/pipeline/pipeline.hpp"
#include "polscope/service/playbook.hpp"
#include "polscope/sim/simulator.hpp"
#include "polscope/util/digest.hpp"

namespace polscope::service {

using json = nlohmann::json;

void ServiceConfig::apply_environment() {
    if (const char* env = std::getenv("POLSCOPE_DATA"); env != nullptr && *env != '\0') data_dir = env;
}

namespace {

std::string short_id(std::string_view prefix, std::string_view bytes) {
    return std::string(prefix) + util::sha256_hex(bytes).substr(0, 16);
}

bool is_pcap(std::string_view bytes) {
    if (bytes.size() < 4) return false;
    std::uint32_t m = 0;
    std::memcpy(&m, bytes.data(), 4);
    for (std::uint32_t magic : {0xa1b2c3d4u, 0xa1b23c4du}) {
        if (m == magic || __builtin_bswap32(m) == magic) return true;
    }
    return false;
}

std::map<std::string, std::string> parse_truth(const json& obj) {
    if (!obj.is_object()) throw ApiError(400, "ground_truth must be an object");
    if (obj.contains("personas")) return sim::GroundTruth::from_json(obj).persona_to_ip;
    std::map<std::string, std::string> out;
    for (const auto& [user, ip] : obj.items()) {
        if (!ip.is_string()) throw ApiError(400, "ground_truth values must be IP strings");
        out[user] = ip.get<std::string>();
    }
    return out;
}

}  // namespace

Service::Service(ServiceConfig cfg) : cfg_(std::move(cfg)), store_(cfg_.data_dir) {
    if (cfg_.workers == 0) throw std::invalid_argument("workers must be >= 1");
    // Work interrupted by a previous shutdown cannot resume mid-pipeline.
    for (const auto& j : store_.jobs_with_status(JobStatus::Running)) {
        store_.fail_job(j.id, "interrupted by service restart");
    }
    for (const auto& j : store_.jobs_with_status(JobStatus::Queued)) queue_.push_back(j.id);
    for (std::size_t i = 0; i < cfg_.workers; ++i) workers_.emplace_back([this] { worker_loop(); });
    http_ = std::make_unique<httplib::Server>();
    install_routes();
}

Service::~Service() {
    stop();
    {
        std::lock_guard lock(queue_mu_);
        stopping_ = true;
    }
    queue_cv_.notify_all();
    for (auto& t : workers_) t.join();
}

json Service::upload_capture(const std::string& scope_name, std::string_view bytes) {
    capture::ScopeId scope;
    try {
        scope = capture::ScopeId::parse(scope_name);
    } catch (const std::invalid_argument& e) {
        throw ApiError(400, e.what());
    }
    capture::ParseResult parsed;
    try {
        parsed = capture::parse_capture_bytes(bytes, scope);
    } catch (const std::exception& e) {
        throw ApiError(400, std::string("capture rejected: ") + e.what());
    }
    if (parsed.records.empty() && !bytes.empty()) {
        throw ApiError(400, "capture rejected: no parseable records");
    }
    CaptureInfo info;
    info.scope = scope.name();
    info.id = short_id("cap-", info.scope + "\n" + std::string(bytes));
    info.sha256 = store_.put_blob(bytes);
    info.format = is_pcap(bytes) ? "pcap" : "jsonl";
    info.records = parsed.records.size();
    info.skipped = parsed.skipped;
    store_.add_capture(info);
    return {{"id", info.id},           {"scope", info.scope},     {"format", info.format},
            {"records", info.records}, {"skipped", info.skipped}, {"sha256", info.sha256}};
}

json Service::upload_log(std::string_view bytes) {
    std::vector<linkage::MessageRecord> posts;
    try {
        posts = sim::parse_board_log(bytes);
    } catch (const std::exception& e) {
        throw ApiError(400, std::string("board log rejected: ") + e.what());
    }
    if (posts.empty()) throw ApiError(400, "board log rejected: no posts");
    std::set<std::string> users;
    for (const auto& p : posts) users.insert(p.user);
    LogInfo info{short_id("log-", bytes), store_.put_blob(bytes), posts.size(), users.size()};
    store_.add_log(info);
    return {{"id", info.id}, {"posts", info.posts}, {"personas", info.personas}, {"sha256", info.sha256}};
}

json Service::submit_job(const json& request) {
    if (!request.is_object()) throw ApiError(400, "job request must be a JSON object");
    json normalized = json::object();

    json captures = request.value("captures", json::array());
    if (!captures.is_array()) throw ApiError(400, "captures must be an array of capture ids");
    for (const auto& c : captures) {
        if (!c.is_string()) throw ApiError(400, "capture ids must be strings");
        if (!store_.capture(c.get<std::string>())) throw ApiError(404, "unknown capture " + c.get<std::string>());
    }
    normalized["captures"] = captures;

    if (!request.contains("log") || !request["log"].is_string()) throw ApiError(400, "log id is required");
    const auto log_id = request["log"].get<std::string>();
    if (!store_.log(log_id)) throw ApiError(404, "unknown log " + log_id);
    normalized["log"] = log_id;

    pipeline::AnalysisConfig cfg;
    try {
        cfg = pipeline::AnalysisConfig::from_json(request.value("config", json::object()));
        cfg.validate();
    } catch (const std::exception& e) {
        throw ApiError(400, std::string("invalid config: ") + e.what());
    }
    normalized["config"] = cfg.to_json();

    if (auto it = request.find("scope_sets"); it != request.end()) {
        if (!it->is_array()) throw ApiError(400, "scope_sets must be an array");
        for (const auto& s : *it) {
            try {
                pipeline::ScopeSet::parse(s.get<std::string>());
            } catch (const std::exception& e) {
                throw ApiError(400, std::string("invalid scope set: ") + e.what());
            }
        }
        normalized["scope_sets"] = *it;
    }
    if (auto it = request.find("ground_truth"); it != request.end() && !it->is_null()) {
        normalized["ground_truth"] = parse_truth(*it);
    }

    const auto job = store_.create_job(normalized, cfg.digest());
    {
        std::lock_guard lock(queue_mu_);
        queue_.push_back(job.id);
    }
    queue_cv_.notify_one();
    return {{"id", job.id}, {"status", "queued"}, {"config_digest", job.config_digest}};
}

json Service::job_status(const std::string& id) const {
    const auto job = store_.job(id);
    if (!job) throw ApiError(404, "unknown job " + id);
    json out{{"id", job->id},
             {"status", status_name(job->status)},
             {"progress", job->progress},
             {"config_digest", job->config_digest},
             {"request", job->request}};
    if (!job->error.empty()) out["error"] = job->error;
    if (job->result) {
        json summary = json::array();
        for (const auto& r : job->result->at("results")) {
            summary.push_back({{"scope_set", r.at("scope_set")},
                               {"candidates", r.at("candidates")},
                               {"no_usable_features", r.at("no_usable_features")}});
        }
        out["scope_sets"] = summary;
        out["has_ground_truth"] = job->result->value("has_ground_truth", false);
    }
    return out;
}

JobRecord Service::finished_job(const std::string& id) const {
    auto job = store_.job(id);
    if (!job) throw ApiError(404, "unknown job " + id);
    if (job->status == JobStatus::Failed) throw ApiError(409, "job failed: " + job->error);
    if (job->status != JobStatus::Done) throw ApiError(409, "job not finished");
    return *job;
}

json Service::attributions(const std::string& id, const std::optional<std::string>& scope_set) const {
    const auto job = finished_job(id);
    json out = json::array();
    for (const auto& r : job.result->at("results")) {
        if (scope_set && r.at("scope_set").get<std::string>() != *scope_set) continue;
        for (const auto& a : r.at("attributions")) out.push_back(a);
    }
    if (scope_set && out.empty()) {
        bool known = false;
        for (const auto& r : job.result->at("results")) known = known || r.at("scope_set") == *scope_set;
        if (!known) throw ApiError(404, "scope set not analysed: " + *scope_set);
    }
    return out;
}

json Service::scope_metrics(const std::string& id) const {
    const auto job = finished_job(id);
    if (!job.result->value("has_ground_truth", false)) throw ApiError(409, "metrics unavailable");
    json reports = json::array();
    for (const auto& r : job.result->at("results")) {
        if (r.contains("report")) reports.push_back(r.at("report"));
    }
    return {{"job", id}, {"config_digest", job.config_digest}, {"reports", reports}};
}

json Service::search_personas(const std::string& query) const {
    json out = json::array();
    for (const auto& h : store_.search_personas(query)) {
        out.push_back({{"user", h.user},
                       {"job", h.job_id},
                       {"scope_set", h.scope_set},
                       {"best_ip", h.best_ip},
                       {"score", h.score},
                       {"config_digest", h.config_digest}});
    }
    return out;
}

json Service::playbook(const std::string& ppt, const std::optional<std::string>& job_id) const {
    PptHypothesis h;
    try {
        h = PptHypothesis::parse(ppt);
    } catch (const std::invalid_argument& e) {
        throw ApiError(400, e.what());
    }
    std::vector<linkage::EvaluationReport> reports;
    if (job_id) {
        const json metrics = scope_metrics(*job_id);
        for (const auto& r : metrics.at("reports")) reports.push_back(linkage::EvaluationReport::from_json(r));
    }
    return playbook_for(h, reports).to_json();
}

void Service::worker_loop() {
    for (;;) {
        std::string id;
        {
            std::unique_lock lock(queue_mu_);
            queue_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
            if (stopping_) return;
            id = queue_.front();
            queue_.pop_front();
            ++active_;
        }
        run_job(id);
        {
            std::lock_guard lock(queue_mu_);
            --active_;
        }
        idle_cv_.notify_all();
    }
}

void Service::run_job(const std::string& id) {
    if (!store_.mark_running(id)) return;
    try {
        const auto job = *store_.job(id);
        const auto& req = job.request;
        const auto cfg = pipeline::AnalysisConfig::from_json(req.at("config"));

        pipeline::Workspace ws;
        for (const auto& cid : req.at("captures")) {
            const auto info = store_.capture(cid.get<std::string>());
            if (!info) throw std::runtime_error("capture vanished: " + cid.get<std::string>());
            const auto scope = capture::ScopeId::parse(info->scope);
            ws.add_scope(scope, capture::parse_capture_bytes(store_.read_blob(info->sha256), scope).records);
        }
        const auto log = store_.log(req.at("log").get<std::string>());
        if (!log) throw std::runtime_error("board log vanished");
        ws.set_board_log(sim::parse_board_log(store_.read_blob(log->sha256)));
        const bool has_truth = req.contains("ground_truth");
        if (has_truth) ws.set_ground_truth(req.at("ground_truth").get<std::map<std::string, std::string>>());

        ws.ingest(cfg.ingest);
        std::vector<pipeline::ScopeSet> sets;
        if (req.contains("scope_sets")) {
            for (const auto& s : req.at("scope_sets")) sets.push_back(pipeline::ScopeSet::parse(s.get<std::string>()));
        } else {
            sets = pipeline::default_scope_sets(ws);
        }
        if (sets.empty()) throw std::runtime_error("no candidates: the capture set is empty");

        json results = json::array();
        std::vector<PersonaHit> hits;
        std::size_t total_candidates = 0;
        for (std::size_t i = 0; i < sets.size(); ++i) {
            const auto res = ws.analyze(sets[i], cfg);
            total_candidates += res.candidates;
            results.push_back(res.to_json());
            for (const auto& [user, ra] : res.attributions) {
                if (ra.ranking.empty()) continue;
                hits.push_back({user, id, sets[i].label, ra.ranking.front().ip, ra.ranking.front().score, job.config_digest});
            }
            store_.set_progress(id, 100.0 * static_cast<double>(i + 1) / static_cast<double>(sets.size()));
        }
        if (total_candidates == 0) throw std::runtime_error("no candidates in any scope set");
        store_.finish_job(id, {{"results", results}, {"has_ground_truth", has_truth}}, hits);
        spdlog::info("job {} done ({} scope sets)", id, sets.size());
    } catch (const std::exception& e) {
        store_.fail_job(id, e.what());
        spdlog::warn("job {} failed: {}", id, e.what());
    }
}

void Service::wait_idle() {
    std::unique_lock lock(queue_mu_);
    idle_cv_.wait(lock, [&] { return queue_.empty() && active_ == 0; });
}

void Service::install_routes() {
    auto& srv = *http_;

    srv.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
        if (!cfg_.api_token || req.path == "/health") return httplib::Server::HandlerResponse::Unhandled;
        std::string presented = req.get_header_value("X-API-Token");
        const auto auth = req.get_header_value("Authorization");
        if (auth.rfind("Bearer ", 0) == 0) presented = auth.substr(7);
        if (presented == *cfg_.api_token) return httplib::Server::HandlerResponse::Unhandled;
        res.status = 401;
        res.set_content(json{{"error", "missing or invalid API token"}}.dump(), "application/json");
        return httplib::Server::HandlerResponse::Handled;
    });

    srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        try {
            std::rethrow_exception(ep);
        } catch (const ApiError& e) {
            res.status = e.status();
            res.set_content(json{{"error", e.what()}}.dump(), "application/json");
        } catch (const json::exception& e) {
            res.status = 400;
            res.set_content(json{{"error", std::string("malformed JSON: ") + e.what()}}.dump(), "application/json");
        } catch (const std::exception& e) {
            res.status = 500;
            res.set_content(json{{"error", e.what()}}.dump(), "application/json");
        }
    });

    auto reply = [](httplib::Response& res, const json& body, int status = 200) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    };
    // Multipart uploads use the "file" field; anything else is the raw body.
    auto body_of = [](const httplib::Request& req) -> std::string {
        if (req.is_multipart_form_data()) {
            if (!req.has_file("file")) throw ApiError(400, "multipart upload needs a 'file' field");
            return req.get_file_value("file").content;
        }
        return req.body;
    };

    srv.Get("/health", [reply](const httplib::Request&, httplib::Response& res) { reply(res, {{"status", "ok"}}); });

    srv.Post("/captures", [this, reply, body_of](const httplib::Request& req, httplib::Response& res) {
        std::string scope = req.get_param_value("scope");
        if (scope.empty() && req.is_multipart_form_data() && req.has_file("scope")) scope = req.get_file_value("scope").content;
        if (scope.empty()) throw ApiError(400, "scope parameter is required");
        reply(res, upload_capture(scope, body_of(req)), 201);
    });

    srv.Post("/logs", [this, reply, body_of](const httplib::Request& req, httplib::Response& res) {
        reply(res, upload_log(body_of(req)), 201);
    });

    srv.Post("/jobs", [this, reply](const httplib::Request& req, httplib::Response& res) {
        reply(res, submit_job(json::parse(req.body)), 202);
    });

    srv.Get(R"(/jobs/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
        reply(res, job_status(req.matches[1]));
    });

    srv.Get(R"(/jobs/([^/]+)/attributions)", [this, reply](const httplib::Request& req, httplib::Response& res) {
        std::optional<std::string> set;
        if (req.has_param("scope_set")) set = req.get_param_value("scope_set");
        reply(res, attributions(req.matches[1], set));
    });

    srv.Get(R"(/jobs/([^/]+)/scope-metrics)", [this, reply](const httplib::Request& req, httplib::Response& res) {
        reply(res, scope_metrics(req.matches[1]));
    });

    srv.Get("/personas", [this, reply](const httplib::Request& req, httplib::Response& res) {
        reply(res, search_personas(req.get_param_value("q")));
    });

    srv.Get("/playbook", [this, reply](const httplib::Request& req, httplib::Response& res) {
        // A literal '+' in the query string arrives as a space.
        std::string ppt = req.get_param_value("ppt");
        std::ranges::replace(ppt, ' ', '+');
        std::optional<std::string> job;
        if (req.has_param("job")) job = req.get_param_value("job");
        reply(res, playbook(ppt, job));
    });
}

bool Service::listen(const std::string& host, int port) {
    spdlog::info("polscope service on {}:{} (data {})", host, port, cfg_.data_dir.string());
    return http_->listen(host, port);
}

int Service::start_background(const std::string& host) {
    const int port = http_->bind_to_any_port(host);
    if (port < 0) throw std::runtime_error("cannot bind " + host);
    http_thread_ = std::thread([this] { http_->listen_after_bind(); });
    http_->wait_until_ready();
    return port;
}

void Service::stop() {
    if (http_) http_->stop();
    if (http_thread_.joinable()) http_thread_.join();
}

}  // namespace polscope::service
