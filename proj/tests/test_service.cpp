#include <doctest.h>

#include <filesystem>
#include <sstream>

#include <httplib.h>

#include "polscope/capture/trace_io.hpp"
#include "polscope/service/playbook.hpp"
#include "polscope/service/server.hpp"
#include "polscope/sim/simulator.hpp"

using namespace polscope;
using nlohmann::json;

namespace {

struct Bundle {
    sim::SimulationOutput out;
    std::map<std::string, std::string> files;  // scope -> jsonl
    std::string log;
};

const Bundle& bundle(bool vpn) {
    static std::map<bool, Bundle> cache;
    auto it = cache.find(vpn);
    if (it != cache.end()) return it->second;
    sim::Topology topo;
    std::mt19937_64 rng(3);
    auto schedule = sim::sample_groups(nullptr, 1, {}, rng);
    Bundle b;
    b.out = sim::simulate(sim::make_profiles(schedule, {sim::DnsMode::PoDNS, vpn, false}, topo, rng), topo, 3);
    for (const auto& [scope, recs] : b.out.traces) {
        std::ostringstream os;
        capture::write_jsonl(os, recs);
        b.files[scope.name()] = os.str();
    }
    for (const auto& m : b.out.board_log) b.log += json{{"user", m.user}, {"t", m.timestamp}, {"text_len", m.text_len}}.dump() + "\n";
    return cache.emplace(vpn, std::move(b)).first->second;
}

std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    return dir;
}

json body(const httplib::Result& r) { return json::parse(r->body); }

json wait_done(httplib::Client& cli, const std::string& id) {
    for (int i = 0; i < 600; ++i) {
        auto r = cli.Get("/jobs/" + id);
        auto j = body(r);
        if (j["status"] == "done" || j["status"] == "failed") return j;
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    return {};
}

// Uploads every scope of the bundle plus the log and submits a job.
std::string submit(httplib::Client& cli, const Bundle& b, const std::vector<std::string>& scopes, bool truth) {
    json ids = json::array();
    for (const auto& s : scopes) {
        auto r = cli.Post("/captures?scope=" + s, b.files.at(s), "application/x-ndjson");
        REQUIRE(r->status == 201);
        ids.push_back(body(r)["id"]);
    }
    auto lr = cli.Post("/logs", b.log, "application/x-ndjson");
    REQUIRE(lr->status == 201);
    json req{{"captures", ids}, {"log", body(lr)["id"]}};
    if (truth) req["ground_truth"] = b.out.truth.to_json();
    auto jr = cli.Post("/jobs", req.dump(), "application/json");
    REQUIRE(jr->status == 202);
    return body(jr)["id"];
}

}  // namespace

TEST_CASE("http contract") {
    auto dir = fresh_dir("polscope_service_http");
    service::Service svc({dir, 1, std::nullopt});
    const int port = svc.start_background();
    httplib::Client cli("127.0.0.1", port);
    const auto& b = bundle(false);

    CHECK(cli.Get("/health")->status == 200);

    SUBCASE("uploads") {
        auto ok = cli.Post("/captures?scope=service", b.files.at("service"), "application/x-ndjson");
        CHECK(ok->status == 201);
        CHECK(body(ok)["records"] == b.out.traces.at(capture::ScopeId{capture::ScopeKind::Service}).size());
        CHECK(cli.Post("/captures?scope=nowhere", "{}", "application/x-ndjson")->status == 400);

        std::ostringstream pcap;
        capture::write_pcap(pcap, b.out.traces.at(capture::ScopeId{capture::ScopeKind::Resolver}));
        httplib::MultipartFormDataItems items{{"file", pcap.str(), "resolver.pcap", "application/vnd.tcpdump.pcap"}};
        auto pr = cli.Post("/captures?scope=resolver", items);
        CHECK(pr->status == 201);
        CHECK(body(pr)["format"] == "pcap");
        CHECK(body(pr)["records"] == b.out.traces.at(capture::ScopeId{capture::ScopeKind::Resolver}).size());
    }

    SUBCASE("jobs, attributions, metrics, search") {
        const auto id = submit(cli, b, {"service", "resolver"}, true);
        auto st = wait_done(cli, id);
        CHECK(st["status"] == "done");
        auto att = cli.Get("/jobs/" + id + "/attributions?scope_set=service");
        REQUIRE(att->status == 200);
        CHECK(body(att).size() == 5);
        auto met = cli.Get("/jobs/" + id + "/scope-metrics");
        REQUIRE(met->status == 200);
        bool service_seen = false;
        const json metrics = body(met);
        for (const auto& r : metrics["reports"]) {
            if (r["scope_set"] == "service") {
                service_seen = true;
                CHECK(r["accuracy"].get<double>() >= 0.8);
            }
        }
        CHECK(service_seen);

        const std::string user = b.out.truth.persona_to_ip.begin()->first;
        auto hits = body(cli.Get("/personas?q=" + user));
        REQUIRE(hits.size() >= 1);
        CHECK(hits[0]["user"] == user);
        CHECK(body(cli.Get("/personas?q=zz-nobody")).empty());

        // Two personas share a prefix when their names have a common stem.
        std::string a = b.out.truth.persona_to_ip.begin()->first;
        std::string c = std::next(b.out.truth.persona_to_ip.begin())->first;
        std::size_t common = 0;
        while (common < a.size() && common < c.size() && a[common] == c[common]) ++common;
        if (common > 0) {
            auto both = body(cli.Get("/personas?q=" + a.substr(0, common)));
            std::set<std::string> users;
            double prev = 2.0;
            for (const auto& h : both) {
                users.insert(h["user"]);
                CHECK(h["score"].get<double>() <= prev);
                prev = h["score"].get<double>();
            }
            CHECK(users.contains(a));
            CHECK(users.contains(c));
        }

        const auto id2 = submit(cli, b, {"service"}, false);
        CHECK(id2 != id);
        wait_done(cli, id2);
        CHECK(cli.Get("/jobs/" + id2 + "/scope-metrics")->status == 409);
        CHECK(cli.Get("/jobs/job-999999/scope-metrics")->status == 404);
        CHECK(cli.Get("/jobs/job-999999")->status == 404);
    }

    SUBCASE("bad requests") {
        auto lr = cli.Post("/logs", b.log, "application/x-ndjson");
        const auto log_id = body(lr)["id"];
        CHECK(cli.Post("/jobs", json{{"captures", {"cap-0000"}}, {"log", log_id}}.dump(), "application/json")->status == 404);
        CHECK(cli.Post("/jobs", json{{"captures", json::array()}, {"log", "log-nope"}}.dump(), "application/json")->status ==
              404);
        CHECK(cli.Post("/jobs", json{{"captures", json::array()}, {"log", log_id}, {"config", {{"ingest", {{"ttl_window", -1}}}}}}
                                    .dump(),
                       "application/json")
                  ->status == 400);
        CHECK(cli.Post("/jobs", "{not json", "application/json")->status == 400);
        auto empty = cli.Post("/jobs", json{{"captures", json::array()}, {"log", log_id}}.dump(), "application/json");
        REQUIRE(empty->status == 202);
        auto st = wait_done(cli, body(empty)["id"]);
        CHECK(st["status"] == "failed");
        CHECK(st["error"].get<std::string>().find("no candidates") != std::string::npos);
    }

    SUBCASE("playbook") {
        auto plain = body(cli.Get("/playbook?ppt=none"));
        auto vpn = body(cli.Get("/playbook?ppt=vpn"));
        auto doh = body(cli.Get("/playbook?ppt=doh"));
        auto labels = [](const json& pb) {
            std::vector<std::string> out;
            for (const auto& s : pb["recommended_scopes"]) out.push_back(s["scope_set"]);
            return out;
        };
        CHECK(labels(plain) != labels(vpn));
        CHECK(labels(plain) == labels(doh));
        for (const auto& s : labels(vpn)) CHECK((s == "access-to-vpn" || s == "vpn-provider" || s == "access" || s == "global"));
        CHECK(cli.Get("/playbook?ppt=carrier-pigeon")->status == 400);
    }
    svc.stop();
}

TEST_CASE("vpn run reports zero at the service") {
    auto dir = fresh_dir("polscope_service_vpn");
    service::Service svc({dir, 1, std::nullopt});
    const int port = svc.start_background();
    httplib::Client cli("127.0.0.1", port);
    const auto id = submit(cli, bundle(true), {"service", "access-to-vpn"}, true);
    CHECK(wait_done(cli, id)["status"] == "done");
    const json metrics = body(cli.Get("/jobs/" + id + "/scope-metrics"));
    bool seen = false;
    for (const auto& r : metrics["reports"]) {
        if (r["scope_set"] == "service") {
            seen = true;
            CHECK(r["accuracy"] == 0.0);
            for (const auto& [k, v] : r["recall_at"].items()) CHECK(v == 0.0);
        }
    }
    CHECK(seen);
    auto pb = body(cli.Get("/playbook?ppt=vpn&job=" + id));
    bool measured = false;
    for (const auto& s : pb["recommended_scopes"]) measured = measured || !s["accuracy"].is_null();
    CHECK(measured);
    CHECK(pb["recommended_scopes"].size() >= 1);
    svc.stop();
}

TEST_CASE("token and restart durability") {
    auto dir = fresh_dir("polscope_service_restart");
    std::string id;
    {
        service::Service svc({dir, 1, std::string("s3cret")});
        const int port = svc.start_background();
        httplib::Client anon("127.0.0.1", port);
        CHECK(anon.Get("/health")->status == 200);
        CHECK(anon.Get("/personas?q=a")->status == 401);
        httplib::Client cli("127.0.0.1", port);
        cli.set_bearer_token_auth("s3cret");
        id = submit(cli, bundle(false), {"service"}, true);
        CHECK(wait_done(cli, id)["status"] == "done");
        svc.stop();
    }
    service::Service again({dir, 1, std::nullopt});
    auto status = again.job_status(id);
    CHECK(status["status"] == "done");
    CHECK(again.attributions(id, std::string("service")).size() == 5);
    CHECK(again.search_personas(bundle(false).out.truth.persona_to_ip.begin()->first).size() >= 1);
}

TEST_CASE("store transitions only move forward") {
    auto dir = fresh_dir("polscope_store");
    service::Store store(dir);
    auto job = store.create_job(json{{"x", 1}}, "digest");
    CHECK(job.status == service::JobStatus::Queued);
    CHECK_FALSE(store.finish_job(job.id, json::object(), {}));
    CHECK(store.mark_running(job.id));
    CHECK_FALSE(store.mark_running(job.id));
    CHECK(store.finish_job(job.id, json{{"results", json::array()}}, {}));
    CHECK_FALSE(store.fail_job(job.id, "late"));
    CHECK(store.job(job.id)->status == service::JobStatus::Done);
}

TEST_CASE("playbook tiers") {
    auto none = service::playbook_for(service::PptHypothesis::parse("none"));
    std::set<std::string> tier1;
    for (const auto& s : none.scopes)
        if (s.tier == 1) tier1.insert(s.scope_set);
    CHECK(tier1 == std::set<std::string>{"service", "access-to-service", "resolver", "access"});
    auto vpn = service::playbook_for(service::PptHypothesis::parse("dot+vpn"));
    CHECK(std::ranges::find(vpn.unusable, std::string("service")) != vpn.unusable.end());
    CHECK(vpn.hypothesis.find("vpn") != std::string::npos);
}
