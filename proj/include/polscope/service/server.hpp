#pragma once

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "polscope/service/store.hpp"

namespace httplib {
class Server;
}

namespace polscope::service {

struct ServiceConfig {
    std::filesystem::path data_dir = "polscope-data";
    std::size_t workers = 1;
    /// When set, every request except GET /health must carry it as
    /// "Authorization: Bearer <token>" or "X-API-Token: <token>".
    std::optional<std::string> api_token;

    /// Fills data_dir from POLSCOPE_DATA when that variable is set.
    void apply_environment();
};

/// Thrown by request validation; carries the HTTP status to answer with.
class ApiError : public std::runtime_error {
public:
    ApiError(int status, const std::string& message) : std::runtime_error(message), status_(status) {}
    [[nodiscard]] int status() const { return status_; }

private:
    int status_;
};

/// Job store, FIFO worker pool and HTTP routes. Handlers are also callable
/// directly, which the tests use to skip the socket layer where convenient.
class Service {
public:
    explicit Service(ServiceConfig cfg);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    nlohmann::json upload_capture(const std::string& scope_name, std::string_view bytes);
    nlohmann::json upload_log(std::string_view bytes);
    nlohmann::json submit_job(const nlohmann::json& request);
    nlohmann::json job_status(const std::string& id) const;
    nlohmann::json attributions(const std::string& id, const std::optional<std::string>& scope_set) const;
    nlohmann::json scope_metrics(const std::string& id) const;
    nlohmann::json search_personas(const std::string& query) const;
    nlohmann::json playbook(const std::string& ppt, const std::optional<std::string>& job_id) const;

    /// Blocks until no job is queued or running.
    void wait_idle();

    /// Binds and serves until stop(); returns false when the bind fails.
    bool listen(const std::string& host, int port);
    /// Binds to an ephemeral port and serves on a background thread.
    int start_background(const std::string& host = "127.0.0.1");
    void stop();

    [[nodiscard]] Store& store() { return store_; }

private:
    void install_routes();
    void worker_loop();
    void run_job(const std::string& id);
    [[nodiscard]] JobRecord finished_job(const std::string& id) const;

    ServiceConfig cfg_;
    Store store_;
    std::unique_ptr<httplib::Server> http_;
    std::thread http_thread_;

    std::mutex queue_mu_;
    std::condition_variable queue_cv_;
    std::condition_variable idle_cv_;
    std::deque<std::string> queue_;
    std::size_t active_ = 0;
    bool stopping_ = false;
    std::vector<std::thread> workers_;
};

}  // namespace polscope::service
