#include "polscope/pipeline/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <atomic>
#include <future>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "polscope/capture/trace_io.hpp"
#include "polscope/sim/simulator.hpp"
#include "polscope/tda/tda.hpp"
#include "polscope/util/digest.hpp"

namespace polscope::pipeline {

using capture::Feature;
using capture::ScopeId;
using capture::ScopeKind;
using json = nlohmann::json;

ScopeSet ScopeSet::parse(const std::string& text) {
    ScopeSet set;
    set.label = text;
    if (text == "global" || text == "all") {
        set.label = "global";
        set.kinds = capture::all_scope_kinds();
        return set;
    }
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, '+')) {
        const ScopeKind kind = ScopeId::parse(part).kind;
        if (std::ranges::find(set.kinds, kind) == set.kinds.end()) set.kinds.push_back(kind);
    }
    if (set.kinds.empty()) throw std::invalid_argument("empty scope set");
    return set;
}

bool ScopeSet::contains(const ScopeId& scope) const { return std::ranges::find(kinds, scope.kind) != kinds.end(); }

void AnalysisConfig::validate() const {
    ingest.validate();
    linkage.tda.validate();
    if (features.empty()) throw std::invalid_argument("at least one feature is required");
    if (!linkage.multivariate && features.size() != 1) {
        throw std::invalid_argument("univariate analysis takes exactly one feature");
    }
    if (linkage.clip_buffer < 0.0) throw std::invalid_argument("clip_buffer must be >= 0");
    if (linkage.max_lag && *linkage.max_lag < 0) throw std::invalid_argument("max_lag must be >= 0");
}

json AnalysisConfig::to_json() const {
    json allow = json::array();
    for (Feature f : ingest.feature_allowlist) allow.push_back(capture::feature_name(f));
    json feats = json::array();
    for (Feature f : features) feats.push_back(capture::feature_name(f));
    json tda{{"window_size", linkage.tda.window_size},
             {"window_skip", linkage.tda.window_skip},
             {"max_dim", linkage.tda.max_dim},
             {"num_landscapes", linkage.tda.num_landscapes},
             {"normalize_features", linkage.tda.normalize_features}};
    tda["max_filtration"] = linkage.tda.max_filtration ? json(*linkage.tda.max_filtration) : json(nullptr);
    json ingest_json{{"ttl_window", ingest.ttl_window}, {"feature_allowlist", allow}, {"time_origin", ingest.time_origin}};
    ingest_json["focus_domain"] = ingest.focus_domain ? json(*ingest.focus_domain) : json(nullptr);
    json link{{"clip_buffer", linkage.clip_buffer}, {"multivariate", linkage.multivariate}, {"tda", tda}};
    link["max_lag"] = linkage.max_lag ? json(*linkage.max_lag) : json(nullptr);
    return {{"ingest", ingest_json},
            {"linkage", link},
            {"features", feats},
            {"candidates", candidates == CandidatePolicy::All ? "all" : "initiators"}};
}

AnalysisConfig AnalysisConfig::from_json(const json& obj) {
    AnalysisConfig cfg;
    if (auto it = obj.find("ingest"); it != obj.end()) {
        cfg.ingest.ttl_window = it->value("ttl_window", cfg.ingest.ttl_window);
        cfg.ingest.time_origin = it->value("time_origin", cfg.ingest.time_origin);
        if (auto a = it->find("feature_allowlist"); a != it->end() && a->is_array()) {
            cfg.ingest.feature_allowlist.clear();
            for (const auto& f : *a) cfg.ingest.feature_allowlist.push_back(capture::parse_feature(f.get<std::string>()));
        }
        if (auto fd = it->find("focus_domain"); fd != it->end() && fd->is_string()) {
            cfg.ingest.focus_domain = fd->get<std::string>();
        }
    }
    if (auto it = obj.find("linkage"); it != obj.end()) {
        cfg.linkage.clip_buffer = it->value("clip_buffer", cfg.linkage.clip_buffer);
        cfg.linkage.multivariate = it->value("multivariate", cfg.linkage.multivariate);
        if (auto ml = it->find("max_lag"); ml != it->end()) {
            if (ml->is_null()) cfg.linkage.max_lag.reset();
            else cfg.linkage.max_lag = ml->get<int>();
        }
        if (auto t = it->find("tda"); t != it->end()) {
            auto& tda = cfg.linkage.tda;
            tda.window_size = t->value("window_size", tda.window_size);
            tda.window_skip = t->value("window_skip", tda.window_skip);
            tda.max_dim = t->value("max_dim", tda.max_dim);
            tda.num_landscapes = t->value("num_landscapes", tda.num_landscapes);
            tda.normalize_features = t->value("normalize_features", tda.normalize_features);
            if (auto m = t->find("max_filtration"); m != t->end() && m->is_number()) tda.max_filtration = m->get<double>();
        }
    }
    if (auto it = obj.find("features"); it != obj.end() && it->is_array()) {
        cfg.features.clear();
        for (const auto& f : *it) cfg.features.push_back(capture::parse_feature(f.get<std::string>()));
    }
    if (auto it = obj.find("candidates"); it != obj.end()) {
        const auto v = it->get<std::string>();
        if (v == "all") cfg.candidates = CandidatePolicy::All;
        else if (v == "initiators") cfg.candidates = CandidatePolicy::Initiators;
        else throw std::invalid_argument("unknown candidate policy: " + v);
    }
    cfg.linkage.time_origin = cfg.ingest.time_origin;
    return cfg;
}

std::string AnalysisConfig::digest() const { return util::sha256_hex(to_json().dump()); }

json AnalysisResult::attributions_json() const {
    json arr = json::array();
    for (const auto& [user, ra] : attributions) {
        json obj = linkage::to_json(ra);
        obj["scope_set"] = scope_set.label;
        obj["config_digest"] = config_digest;
        arr.push_back(std::move(obj));
    }
    return arr;
}

json AnalysisResult::to_json() const {
    json obj{{"scope_set", scope_set.label},
             {"features", features},
             {"multivariate", multivariate},
             {"config_digest", config_digest},
             {"candidates", candidates},
             {"no_usable_features", no_usable_features},
             {"feature_availability", feature_availability},
             {"attributions", attributions_json()}};
    if (report) obj["report"] = report->to_json();
    return obj;
}

void Workspace::add_scope(const ScopeId& scope, std::vector<capture::PacketRecord> records) {
    auto& dst = raw_[scope];
    for (auto& r : records) {
        r.scope = scope;
        dst.push_back(std::move(r));
    }
    ingested_with_.reset();
}

void Workspace::ingest(const capture::IngestConfig& cfg) {
    cfg.validate();
    observations_.clear();
    std::vector<std::pair<ScopeId, std::future<ScopeObservation>>> jobs;
    for (const auto& [scope, recs] : raw_) {
        jobs.emplace_back(scope, std::async(std::launch::async, [&cfg, scope = scope, &recs = recs] {
            ScopeObservation obs;
            obs.scope = scope;
            const auto focused = capture::apply_focus(recs, cfg);
            obs.records = focused.size();
            obs.sets = capture::group_by_ip(focused, cfg);
            obs.selection = capture::select_features(obs.sets, cfg.feature_allowlist);
            obs.initiators = capture::initiators(focused);
            return obs;
        }));
    }
    for (auto& [scope, fut] : jobs) observations_.emplace(scope, fut.get());
    ingested_with_ = cfg;
}

namespace {

// Places per-scope columns of one address on a shared grid.
series::MultivariateSeries align(const std::string& owner, const std::vector<std::string>& names,
                                 const std::vector<std::optional<series::Series>>& cols) {
    double t0 = INFINITY;
    double t_end = -INFINITY;
    for (const auto& c : cols) {
        if (!c) continue;
        t0 = std::min(t0, c->t0);
        t_end = std::max(t_end, c->last_start());
    }
    series::MultivariateSeries out;
    out.owner = owner;
    out.features = names;
    out.t0 = t0;
    const auto n = static_cast<std::size_t>(std::llround(t_end - t0)) + 1;
    out.columns.assign(cols.size(), std::vector<double>(n, 0.0));
    for (std::size_t c = 0; c < cols.size(); ++c) {
        if (!cols[c]) continue;
        const auto off = static_cast<std::size_t>(std::llround(cols[c]->t0 - t0));
        std::ranges::copy(cols[c]->values, out.columns[c].begin() + static_cast<std::ptrdiff_t>(off));
    }
    return out;
}

template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(n, std::thread::hardware_concurrency()));
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace

std::map<std::string, series::Series> Workspace::ip_series(const ScopeSet& set, const AnalysisConfig& cfg,
                                                           std::vector<std::string>* used_features) const {
    if (!ingested_with_) throw std::logic_error("Workspace::ingest must run before analysis");
    const double origin = cfg.ingest.time_origin;

    // Column layout: one column per (scope, feature) kept in that scope.
    struct Column {
        const ScopeObservation* obs;
        Feature feature;
    };
    std::vector<Column> columns;
    for (const auto& [scope, obs] : observations_) {
        if (!set.contains(scope)) continue;
        for (Feature f : cfg.features) {
            if (std::ranges::find(obs.selection.kept, f) != obs.selection.kept.end()) columns.push_back({&obs, f});
        }
    }
    if (used_features) {
        used_features->clear();
        for (const auto& c : columns) {
            used_features->push_back(c.obs->scope.name() + ":" + std::string(capture::feature_name(c.feature)));
        }
    }
    std::map<std::string, series::Series> out;
    if (columns.empty()) return out;

    std::vector<std::string> ips;
    for (const auto& c : columns) {
        for (const auto& [ip, s] : c.obs->sets) {
            if (cfg.candidates == CandidatePolicy::All || c.obs->initiators.contains(ip)) ips.push_back(ip);
        }
    }
    std::ranges::sort(ips);
    ips.erase(std::unique(ips.begin(), ips.end()), ips.end());

    std::vector<series::Series> results(ips.size());
    parallel_for(ips.size(), [&](std::size_t i) {
        const std::string& ip = ips[i];
        std::vector<std::optional<series::Series>> cols;
        std::vector<std::string> names;
        for (const auto& c : columns) {
            names.push_back(c.obs->scope.name() + ":" + std::string(capture::feature_name(c.feature)));
            auto it = c.obs->sets.find(ip);
            if (it == c.obs->sets.end() || it->second.records.empty()) {
                cols.emplace_back();
                continue;
            }
            const auto& recs = it->second.records;
            const double t0 = series::aligned_start(recs.front().timestamp, origin);
            const Feature f = c.feature;
            auto ms = series::rolling_sum<capture::PacketRecord>(
                ip, recs, {std::string(capture::feature_name(f))},
                [f](const capture::PacketRecord& r, std::size_t) { return capture::feature_value(r, f); }, t0);
            if (ms) cols.emplace_back(ms->column(0));
            else cols.emplace_back();
        }
        auto grid = align(ip, names, cols);
        if (cfg.linkage.multivariate) {
            results[i] = tda::tda_pl_series(grid, cfg.linkage.tda);
        } else {
            series::Series sum{grid.t0, grid.step, std::vector<double>(grid.length(), 0.0)};
            for (const auto& col : grid.columns) {
                for (std::size_t k = 0; k < col.size(); ++k) sum.values[k] += col[k];
            }
            results[i] = std::move(sum);
        }
    });
    for (std::size_t i = 0; i < ips.size(); ++i) {
        if (!results[i].empty()) out.emplace(ips[i], std::move(results[i]));
    }
    return out;
}

AnalysisResult Workspace::analyze(const ScopeSet& set, const AnalysisConfig& cfg_in) const {
    AnalysisConfig cfg = cfg_in;
    cfg.linkage.time_origin = cfg.ingest.time_origin;
    cfg.validate();
    if (!ingested_with_) throw std::logic_error("Workspace::ingest must run before analysis");
    if (board_log_.empty()) throw std::invalid_argument("no board log loaded");

    AnalysisResult result;
    result.scope_set = set;
    result.multivariate = cfg.linkage.multivariate;
    result.config_digest = cfg.digest();
    for (const auto& [scope, obs] : observations_) {
        std::vector<std::string> kept;
        for (Feature f : obs.selection.kept) kept.emplace_back(capture::feature_name(f));
        result.feature_availability[scope.name()] = std::move(kept);
    }

    const auto candidates = ip_series(set, cfg, &result.features);
    result.candidates = candidates.size();
    result.no_usable_features = result.features.empty();

    const auto personas = linkage::prepare_personas(board_log_, cfg.linkage);
    std::map<std::string, series::Series> pols;
    for (const auto& [user, ps] : personas) pols.emplace(user, ps.pol);
    result.attributions = linkage::deobfuscate(pols, candidates, cfg.linkage);

    if (truth_) {
        result.report = linkage::evaluate(result.attributions, *truth_);
        result.report->scope_set = set.label;
        result.report->no_prediction = result.report->no_prediction || candidates.empty();
    }
    return result;
}

Workspace Workspace::load_bundle(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw capture::IngestError("bundle directory not found: " + dir.string());
    Workspace ws;
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) files.push_back(entry.path());
    std::ranges::sort(files);
    for (const auto& path : files) {
        const auto name = path.filename().string();
        if (name == "board_log.jsonl") {
            ws.set_board_log(sim::read_board_log(path));
            continue;
        }
        if (name == "ground_truth.json") {
            std::ifstream in(path);
            const auto gt = sim::GroundTruth::from_json(json::parse(in));
            ws.set_ground_truth(gt.persona_to_ip);
            continue;
        }
        const auto ext = path.extension().string();
        if (ext != ".jsonl" && ext != ".pcap") continue;
        ScopeId scope;
        try {
            scope = ScopeId::parse(path.stem().string());
        } catch (const std::invalid_argument&) {
            continue;
        }
        ws.add_scope(scope, capture::parse_capture(path, scope).records);
    }
    return ws;
}

std::vector<ScopeSet> default_scope_sets(const Workspace& ws) {
    std::vector<ScopeKind> kinds;
    for (const auto& [scope, obs] : ws.observations()) {
        if (std::ranges::find(kinds, scope.kind) == kinds.end()) kinds.push_back(scope.kind);
    }
    std::ranges::sort(kinds);
    std::vector<ScopeSet> out;
    for (ScopeKind k : kinds) out.push_back({std::string(capture::kind_name(k)), {k}});
    if (kinds.size() > 1) out.push_back(ScopeSet::parse("global"));
    return out;
}

std::vector<tda::TdaConfig> TdaGrid::expand() const {
    std::vector<tda::TdaConfig> out;
    for (auto w : window_sizes) {
        for (auto skip : window_skips) {
            for (int d : max_dims) {
                for (auto l : num_landscapes) {
                    for (bool norm : normalize) {
                        tda::TdaConfig c;
                        c.window_size = w;
                        c.window_skip = skip;
                        c.max_dim = d;
                        c.num_landscapes = l;
                        c.normalize_features = norm;
                        c.validate();
                        out.push_back(c);
                    }
                }
            }
        }
    }
    return out;
}

std::vector<GridRow> grid_search(const Workspace& ws, const std::vector<ScopeSet>& sets, const AnalysisConfig& base,
                                 const TdaGrid& grid) {
    if (!ws.ground_truth()) throw std::invalid_argument("grid search needs ground truth");
    std::vector<GridRow> rows;
    for (const auto& tda_cfg : grid.expand()) {
        AnalysisConfig cfg = base;
        cfg.linkage.multivariate = true;
        cfg.linkage.tda = tda_cfg;
        for (const auto& set : sets) rows.push_back({tda_cfg, *ws.analyze(set, cfg).report});
    }
    return rows;
}

std::string grid_to_csv(const std::vector<GridRow>& rows) {
    std::ostringstream out;
    out << "window_size,window_skip,max_dim,num_landscapes,normalize,scope_set,accuracy";
    for (std::size_t k : linkage::kDefaultRecallKs) out << ",recall@" << k;
    out << ",mean_rank\n";
    for (const auto& r : rows) {
        out << r.tda.window_size << ',' << r.tda.window_skip << ',' << r.tda.max_dim << ',' << r.tda.num_landscapes << ','
            << (r.tda.normalize_features ? 1 : 0) << ',' << r.report.scope_set << ',' << r.report.accuracy;
        for (std::size_t k : linkage::kDefaultRecallKs) {
            auto it = r.report.recall_at.find(k);
            out << ',' << (it == r.report.recall_at.end() ? 0.0 : it->second);
        }
        out << ',' << r.report.mean_rank << '\n';
    }
    return out.str();
}

}  // namespace polscope::pipeline
