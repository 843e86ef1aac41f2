#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "polscope/tda/tda.hpp"
#include "polscope/timeseries/series.hpp"

namespace polscope::linkage {

/// A message-board post; only the author, time and text length are kept.
struct MessageRecord {
    std::string user;
    double timestamp = 0.0;
    std::size_t text_len = 0;
};

struct LinkageConfig {
    /// Seconds of slack added on both sides of a persona's span when clipping.
    double clip_buffer = 5.0;
    /// Lag search radius in bins around the time-aligned offset; unset
    /// searches every lag with at least two overlapping bins.
    std::optional<int> max_lag = 2;
    /// Persona and IP series go through TDA-PL before comparison.
    bool multivariate = false;
    tda::TdaConfig tda;
    double time_origin = 0.0;
};

struct PersonaSeries {
    std::string user;
    /// Columns: message count, text length.
    series::MultivariateSeries raw;
    /// What gets correlated: the count column, or its TDA-PL summary in
    /// multivariate mode.
    series::Series pol;
};

/// Groups posts by author and bins them on the shared grid. Each persona's
/// span runs from its first to its last post.
std::map<std::string, PersonaSeries> prepare_personas(std::span<const MessageRecord> logs, const LinkageConfig& cfg);

struct NccResult {
    double score = 0.0;
    /// Lag (in bins of the inputs) at which the maximum was reached.
    int lag = 0;
    /// No lag had non-constant data on both sides.
    bool degenerate = false;
};

struct LagWindow {
    int min_lag;
    int max_lag;
};

/// Maximum over lags of the normalized cross-correlation
///   r(tau) = E[(x_t - mu_x)(y_{t+tau} - mu_y)] / (sigma_x sigma_y)
/// with means and deviations taken over the overlap of x_t and y_{t+tau}.
/// Lags with fewer than two overlapping bins or a constant side are skipped.
/// Peaks equal within 1e-12 resolve to the lag nearest `origin`.
NccResult ncc(std::span<const double> x, std::span<const double> y, std::optional<LagWindow> lags = std::nullopt,
              int origin = 0);

/// NCC of two binned series with lags measured from their time alignment
/// (lag 0 pairs bins that start at the same instant).
NccResult ncc_aligned(const series::Series& x, const series::Series& y, std::optional<int> max_lag);

struct Similarity {
    NccResult ncc;
    bool empty_overlap = false;
};

/// Clips the IP series to the persona span widened by `buffer`, then
/// correlates. No overlap scores 0.
Similarity similarity(const series::Series& ip_series, const series::Series& persona_series, double buffer,
                      std::optional<int> max_lag);

struct Candidate {
    std::string ip;
    double score = 0.0;
    int lag = 0;
    bool degenerate = false;
};

struct RankedAttribution {
    std::string user;
    std::vector<Candidate> ranking;
    bool no_candidates = false;

    [[nodiscard]] std::optional<std::string> best_ip() const {
        if (ranking.empty()) return std::nullopt;
        return ranking.front().ip;
    }
    /// 1-based rank of `ip`, or nullopt when not ranked.
    [[nodiscard]] std::optional<std::size_t> rank_of(const std::string& ip) const;
};

using AttributionMap = std::map<std::string, RankedAttribution>;

/// Scores every candidate for every persona and sorts descending by score,
/// ties by ascending IP string. The candidates are exactly the given map.
AttributionMap deobfuscate(const std::map<std::string, series::Series>& personas,
                           const std::map<std::string, series::Series>& candidates, const LinkageConfig& cfg);

struct EvaluationReport {
    std::string scope_set;
    std::size_t personas = 0;
    double accuracy = 0.0;
    std::map<std::size_t, double> recall_at;
    double mean_rank = 0.0;
    bool no_prediction = false;

    [[nodiscard]] nlohmann::json to_json() const;
    static EvaluationReport from_json(const nlohmann::json& obj);
};

inline const std::vector<std::size_t> kDefaultRecallKs{1, 3, 5, 10};

/// Throws std::invalid_argument when a persona has no ground-truth entry.
EvaluationReport evaluate(const AttributionMap& attributions, const std::map<std::string, std::string>& ground_truth,
                          std::span<const std::size_t> ks = kDefaultRecallKs);

/// CSV with one row per report: scope_set,personas,accuracy,recall@k...,mean_rank
std::string reports_to_csv(std::span<const EvaluationReport> reports, std::span<const std::size_t> ks = kDefaultRecallKs);

nlohmann::json to_json(const RankedAttribution& attribution);
RankedAttribution attribution_from_json(const nlohmann::json& obj);

}  // namespace polscope::linkage
