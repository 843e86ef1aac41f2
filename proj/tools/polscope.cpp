#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>

#include <CLI11.hpp>
#include <json.hpp>

#include "polscope/capture/ingest.hpp"
#include "polscope/linkage/linkage.hpp"
#include "polscope/pipeline/pipeline.hpp"
#include "polscope/service/server.hpp"
#include "polscope/sim/corpus.hpp"
#include "polscope/sim/simulator.hpp"

namespace ps = polscope;

namespace {

int run_simulate(std::size_t groups, const std::string& ppt_name, bool vpn, bool ecs, std::uint64_t seed,
                 const std::string& out, const std::string& corpus_path, bool pcap) {
    ps::sim::PptConfig ppt{ps::sim::parse_dns_mode(ppt_name), vpn, ecs};
    ps::sim::Topology topo;
    topo.validate();
    std::mt19937_64 rng(seed);
    std::optional<ps::sim::ThreadCorpus> corpus;
    if (!corpus_path.empty()) corpus = ps::sim::ThreadCorpus::load_jsonl(corpus_path);
    const auto schedule = ps::sim::sample_groups(corpus ? &*corpus : nullptr, groups, {}, rng);
    const auto profiles = ps::sim::make_profiles(schedule, ppt, topo, rng);
    const auto result = ps::sim::simulate(profiles, topo, seed);
    ps::sim::write_bundle(result, out);
    if (pcap) {
        for (const auto& [scope, recs] : result.traces) {
            const auto base = std::filesystem::path(out) / scope.name();
            const auto res = ps::sim::emit_pcap(base.string() + ".jsonl", base.string() + ".pcap");
            if (res.skipped > 0) std::cerr << scope.name() << ": " << res.skipped << " records not representable in pcap\n";
        }
    }
    std::cout << "wrote " << result.traces.size() << " scopes, " << result.board_log.size() << " posts, "
              << result.truth.persona_to_ip.size() << " personas to " << out << "\n";
    return 0;
}

int run_analyze(const std::string& bundle, const std::vector<std::string>& scope_names, const std::string& config_path,
                std::optional<double> ttl, std::optional<int> max_lag, bool all_lags, bool multivariate,
                const std::vector<std::string>& features, const std::string& json_out, bool csv,
                const ps::tda::TdaConfig* tda_override) {
    ps::pipeline::AnalysisConfig cfg;
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        cfg = ps::pipeline::AnalysisConfig::from_json(nlohmann::json::parse(in));
    }
    if (ttl) cfg.ingest.ttl_window = *ttl;
    if (max_lag) cfg.linkage.max_lag = *max_lag;
    if (all_lags) cfg.linkage.max_lag.reset();
    if (multivariate) cfg.linkage.multivariate = true;
    if (tda_override) cfg.linkage.tda = *tda_override;
    if (!features.empty()) {
        cfg.features.clear();
        for (const auto& f : features) cfg.features.push_back(ps::capture::parse_feature(f));
    } else if (cfg.linkage.multivariate) {
        cfg.features = ps::capture::all_features();
    }
    cfg.validate();

    const auto start = std::chrono::steady_clock::now();
    auto ws = ps::pipeline::Workspace::load_bundle(bundle);
    ws.ingest(cfg.ingest);
    std::vector<ps::pipeline::ScopeSet> sets;
    if (scope_names.empty()) sets = ps::pipeline::default_scope_sets(ws);
    for (const auto& s : scope_names) sets.push_back(ps::pipeline::ScopeSet::parse(s));

    nlohmann::json all = nlohmann::json::array();
    std::vector<ps::linkage::EvaluationReport> reports;
    for (const auto& set : sets) {
        const auto res = ws.analyze(set, cfg);
        all.push_back(res.to_json());
        if (res.report) {
            reports.push_back(*res.report);
        } else if (!csv) {
            std::cout << set.label << ": " << res.attributions.size() << " personas ranked over " << res.candidates
                      << " candidates\n";
        }
    }
    if (csv) {
        std::cout << ps::linkage::reports_to_csv(reports);
    } else {
        for (const auto& r : reports) {
            std::cout << r.scope_set << ": accuracy " << r.accuracy << " recall@5 " << r.recall_at.at(5) << " mean rank "
                      << r.mean_rank << (r.no_prediction ? " (no prediction)" : "") << "\n";
        }
        const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start;
        std::cout << "elapsed " << dt.count() << " s\n";
    }
    if (!json_out.empty()) std::ofstream(json_out) << all.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"polscope: pattern-of-life linkage across network scopes"};
    app.require_subcommand(1);

    auto* sim = app.add_subcommand("simulate", "Generate a labelled multi-scope trace bundle");
    std::size_t groups = 4;
    std::string ppt = "podns";
    bool vpn = false, ecs = false, pcap = false;
    std::uint64_t seed = 1;
    std::string out, corpus;
    sim->add_option("--groups", groups, "Conversation groups of five personas")->default_val(4);
    sim->add_option("--ppt", ppt, "DNS mode")->check(CLI::IsMember({"podns", "dot", "doh"}, CLI::ignore_case));
    sim->add_flag("--vpn", vpn, "Route clients through a VPN");
    sim->add_flag("--ecs-leak", ecs, "Resolver forwards EDNS client subnet");
    sim->add_option("--seed", seed, "RNG seed");
    sim->add_option("--out", out, "Output directory")->required();
    sim->add_option("--corpus", corpus, "Thread corpus JSONL (synthetic threads otherwise)");
    sim->add_flag("--pcap", pcap, "Also write a pcap next to every JSONL trace");

    auto* ana = app.add_subcommand("analyze", "Run the linkage pipeline over a bundle directory");
    std::string bundle, config_path, json_out;
    std::vector<std::string> scopes, features;
    std::optional<double> ttl;
    std::optional<int> max_lag;
    bool all_lags = false, multivariate = false, csv = false;
    ana->add_option("bundle", bundle, "Bundle directory")->required();
    ana->add_option("--scopes", scopes, "Scope sets, e.g. service access resolver+access global");
    ana->add_option("--config", config_path, "AnalysisConfig JSON");
    ana->add_option("--ttl-window", ttl, "Cache attribution window in seconds");
    ana->add_option("--max-lag", max_lag, "NCC lag radius in bins");
    ana->add_flag("--all-lags", all_lags, "Search every lag");
    ana->add_flag("--multivariate", multivariate, "TDA-PL over all kept features");
    ana->add_option("--feature", features, "Feature name(s) to use");
    ana->add_option("--json", json_out, "Write full results as JSON");
    ana->add_flag("--csv", csv, "Print the evaluation table as CSV");
    ps::tda::TdaConfig tda;
    ana->add_option("--window", tda.window_size, "TDA window size in bins");
    ana->add_option("--skip", tda.window_skip, "TDA window skip in bins");
    ana->add_option("--max-dim", tda.max_dim, "Highest homology dimension");
    ana->add_option("--landscapes", tda.num_landscapes, "Landscapes kept");
    ana->add_option("--max-filtration", tda.max_filtration, "Rips distance cap (auto when unset)");
    ana->add_flag("--normalize", tda.normalize_features, "Scale each feature column to unit deviation");

    auto* grid = app.add_subcommand("grid-search", "Sweep TDA-PL hyperparameters and print accuracy as CSV");
    std::string grid_bundle;
    std::vector<std::string> grid_scopes;
    double grid_ttl = ps::capture::IngestConfig{}.ttl_window;
    ps::pipeline::TdaGrid tgrid;
    std::vector<int> grid_norm;
    grid->add_option("bundle", grid_bundle, "Bundle directory with ground truth")->required();
    grid->add_option("--scopes", grid_scopes, "Scope sets (default: every observed scope and global)");
    grid->add_option("--ttl-window", grid_ttl, "Cache attribution window in seconds");
    grid->add_option("--windows", tgrid.window_sizes, "Window sizes");
    grid->add_option("--skips", tgrid.window_skips, "Window skips");
    grid->add_option("--dims", tgrid.max_dims, "Homology dimensions");
    grid->add_option("--landscapes", tgrid.num_landscapes, "Landscape counts");
    grid->add_option("--normalize", grid_norm, "Normalization settings (0/1)");

    auto* serve = app.add_subcommand("serve", "Run the analyst HTTP service");
    int port = 8080;
    std::string host = "127.0.0.1";
    ps::service::ServiceConfig svc;
    std::string data_dir;
    std::string token;
    serve->add_option("--port", port, "TCP port");
    serve->add_option("--host", host, "Bind address");
    serve->add_option("--data", data_dir, "Data directory (POLSCOPE_DATA overrides)");
    serve->add_option("--workers", svc.workers, "Concurrent analysis jobs")->check(CLI::PositiveNumber);
    serve->add_option("--token", token, "Static API token (also read from POLSCOPE_TOKEN)");

    auto* pcap_cmd = app.add_subcommand("emit-pcap", "Convert a JSONL trace into a pcap file");
    std::string pcap_in, pcap_out;
    pcap_cmd->add_option("input", pcap_in, "JSONL trace")->required();
    pcap_cmd->add_option("output", pcap_out, "pcap path")->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (*grid) {
            if (!grid_norm.empty()) tgrid.normalize.assign(grid_norm.begin(), grid_norm.end());
            ps::pipeline::AnalysisConfig base;
            base.ingest.ttl_window = grid_ttl;
            base.features = ps::capture::all_features();
            auto ws = ps::pipeline::Workspace::load_bundle(grid_bundle);
            ws.ingest(base.ingest);
            std::vector<ps::pipeline::ScopeSet> sets;
            if (grid_scopes.empty()) sets = ps::pipeline::default_scope_sets(ws);
            for (const auto& s : grid_scopes) sets.push_back(ps::pipeline::ScopeSet::parse(s));
            std::cout << ps::pipeline::grid_to_csv(ps::pipeline::grid_search(ws, sets, base, tgrid));
            return 0;
        }
        if (*serve) {
            if (!data_dir.empty()) svc.data_dir = data_dir;
            svc.apply_environment();
            if (token.empty()) {
                if (const char* env = std::getenv("POLSCOPE_TOKEN")) token = env;
            }
            if (!token.empty()) svc.api_token = token;
            ps::service::Service service(svc);
            if (!service.listen(host, port)) {
                std::cerr << "error: cannot listen on " << host << ":" << port << "\n";
                return 1;
            }
            return 0;
        }
        if (*pcap_cmd) {
            const auto res = ps::sim::emit_pcap(pcap_in, pcap_out);
            std::cout << "wrote " << res.written << " packets, skipped " << res.skipped << "\n";
            for (const auto& w : res.warnings) std::cerr << w << "\n";
            return 0;
        }
        if (*sim) return run_simulate(groups, ppt, vpn, ecs, seed, out, corpus, pcap);
        if (*ana) {
            return run_analyze(bundle, scopes, config_path, ttl, max_lag, all_lags, multivariate, features, json_out, csv,
                               ana->count("--window") + ana->count("--skip") + ana->count("--max-dim") +
                                           ana->count("--landscapes") + ana->count("--max-filtration") +
                                           ana->count("--normalize") > 0
                                   ? &tda
                                   : nullptr);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
