#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "polscope/capture/ingest.hpp"
#include "polscope/capture/packet.hpp"
#include "polscope/linkage/linkage.hpp"
#include "polscope/tda/tda.hpp"
#include "polscope/timeseries/series.hpp"

namespace polscope::pipeline {

/// A named group of scopes whose observations are analysed together.
/// The label "access" stands for every per-ISP access scope at once.
struct ScopeSet {
    std::string label;
    std::vector<capture::ScopeKind> kinds;

    /// Parses "service", "access", "access+access-to-vpn", "global".
    static ScopeSet parse(const std::string& text);
    [[nodiscard]] bool contains(const capture::ScopeId& scope) const;
};

/// Which addresses of a scope set are ranked for each persona.
enum class CandidatePolicy {
    /// Addresses that opened a conversation in some scope of the set; servers
    /// that only answer are excluded.
    Initiators,
    All,
};

struct AnalysisConfig {
    capture::IngestConfig ingest;
    linkage::LinkageConfig linkage;
    /// Univariate mode uses exactly one feature; multivariate mode turns every
    /// (scope, feature) column into one TDA-PL series.
    std::vector<capture::Feature> features{capture::Feature::PacketCount};
    CandidatePolicy candidates = CandidatePolicy::Initiators;

    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static AnalysisConfig from_json(const nlohmann::json& obj);
    /// SHA-256 over the canonical JSON form.
    [[nodiscard]] std::string digest() const;
};

struct ScopeObservation {
    capture::ScopeId scope;
    capture::ActivityMap sets;
    capture::FeatureSelection selection;
    std::set<std::string> initiators;
    std::size_t records = 0;
};

struct AnalysisResult {
    ScopeSet scope_set;
    std::vector<std::string> features;
    bool multivariate = false;
    std::string config_digest;
    linkage::AttributionMap attributions;
    std::optional<linkage::EvaluationReport> report;
    /// Scope name -> features kept there.
    std::map<std::string, std::vector<std::string>> feature_availability;
    std::size_t candidates = 0;
    bool no_usable_features = false;

    [[nodiscard]] nlohmann::json attributions_json() const;
    [[nodiscard]] nlohmann::json to_json() const;
};

/// Holds ingested scopes and personas; scope sets are analysed on demand.
class Workspace {
public:
    Workspace() = default;

    /// Attributes records to addresses for one scope (records of the same
    /// scope added twice are merged before grouping).
    void add_scope(const capture::ScopeId& scope, std::vector<capture::PacketRecord> records);
    void set_board_log(std::vector<linkage::MessageRecord> log) { board_log_ = std::move(log); }
    void set_ground_truth(std::map<std::string, std::string> truth) { truth_ = std::move(truth); }

    /// Re-groups every scope under `cfg`; must run before analyze().
    void ingest(const capture::IngestConfig& cfg);

    [[nodiscard]] const std::map<capture::ScopeId, ScopeObservation>& observations() const { return observations_; }
    [[nodiscard]] const std::vector<linkage::MessageRecord>& board_log() const { return board_log_; }
    [[nodiscard]] const std::optional<std::map<std::string, std::string>>& ground_truth() const { return truth_; }

    /// Per-address series for one scope set (the candidate universe).
    [[nodiscard]] std::map<std::string, series::Series> ip_series(const ScopeSet& set, const AnalysisConfig& cfg,
                                                                  std::vector<std::string>* used_features = nullptr) const;

    /// Full linkage for one scope set; evaluates when ground truth is present.
    [[nodiscard]] AnalysisResult analyze(const ScopeSet& set, const AnalysisConfig& cfg) const;

    /// Loads <scope>.jsonl / <scope>.pcap files, board_log.jsonl and an
    /// optional ground_truth.json from a simulator bundle directory.
    static Workspace load_bundle(const std::filesystem::path& dir);

private:
    std::map<capture::ScopeId, std::vector<capture::PacketRecord>> raw_;
    std::map<capture::ScopeId, ScopeObservation> observations_;
    std::vector<linkage::MessageRecord> board_log_;
    std::optional<std::map<std::string, std::string>> truth_;
    std::optional<capture::IngestConfig> ingested_with_;
};

/// Hyperparameter grid for multivariate analyses.
struct TdaGrid {
    std::vector<std::size_t> window_sizes{3, 5, 10};
    std::vector<std::size_t> window_skips{1};
    std::vector<int> max_dims{0, 1};
    std::vector<std::size_t> num_landscapes{1, 3};
    std::vector<bool> normalize{false, true};

    [[nodiscard]] std::vector<tda::TdaConfig> expand() const;
};

struct GridRow {
    tda::TdaConfig tda;
    linkage::EvaluationReport report;
};

/// Runs every grid point on every scope set; needs ground truth.
std::vector<GridRow> grid_search(const Workspace& ws, const std::vector<ScopeSet>& sets, const AnalysisConfig& base,
                                 const TdaGrid& grid);
/// Header: window_size,window_skip,max_dim,num_landscapes,normalize,scope_set,accuracy,recall@k...,mean_rank
std::string grid_to_csv(const std::vector<GridRow>& rows);

/// Scope sets that make sense for a bundle: each observed scope kind, plus "global".
std::vector<ScopeSet> default_scope_sets(const Workspace& ws);

}  // namespace polscope::pipeline
