#pragma once

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include <json.hpp>

#include "polscope/timeseries/series.hpp"

namespace polscope::tda {

struct TdaConfig {
    std::size_t window_size = 10;
    std::size_t window_skip = 1;
    /// Highest homology dimension reported; the complex is built up to
    /// dimension max_dim + 1 so that max_dim classes can die.
    int max_dim = 1;
    /// Rips scale cap. Unset means "1.5 x median positive pairwise distance of
    /// the first window that has any spread" (see resolve_max_filtration).
    std::optional<double> max_filtration;
    std::size_t num_landscapes = 3;
    /// Scale each feature column to unit standard deviation before windowing.
    bool normalize_features = false;

    void validate() const;
};

using Point = std::vector<double>;

struct PointCloud {
    std::vector<Point> points;
};

struct PersistencePair {
    int dim = 0;
    double birth = 0.0;
    double death = 0.0;

    [[nodiscard]] double lifetime() const { return death - birth; }
    bool operator==(const PersistencePair&) const = default;
};

struct PersistenceDiagram {
    std::vector<PersistencePair> pairs;
    double max_filtration = 0.0;

    /// Pairs of one dimension sorted by (birth, death).
    [[nodiscard]] std::vector<std::pair<double, double>> of_dim(int dim) const;
};

/// Piecewise-linear landscape functions. levels[k] holds the breakpoints of
/// lambda_{k+1} as (t, value), sorted by t; the function is zero outside.
struct PersistenceLandscape {
    std::vector<std::vector<std::pair<double, double>>> levels;

    /// Evaluates lambda_{k+1}(t) (k is 0-based) by linear interpolation.
    [[nodiscard]] double value(std::size_t k, double t) const;
};

/// Splits a series into point clouds: window i starts at bin i*skip and holds
/// window_size consecutive samples. If the full windows leave trailing bins
/// uncovered, one final truncated window is added when it has >= 2 points.
std::vector<PointCloud> sliding_windows(const series::MultivariateSeries& series, const TdaConfig& cfg);

/// Persistent homology (Z/2 coefficients) of the Vietoris-Rips filtration
/// with Euclidean distances, truncated at `max_filtration`. Classes alive at
/// the cap are closed at the cap; zero-length pairs are omitted.
PersistenceDiagram vietoris_rips(const PointCloud& cloud, int max_dim, double max_filtration);

/// k-max landscape of the tents (b,0) -> ((b+d)/2, (d-b)/2) -> (d,0).
PersistenceLandscape persistence_landscape(const PersistenceDiagram& diagram, std::size_t num_landscapes);

/// sqrt(sum_k integral lambda_k(t)^2 dt), integrated exactly per linear piece.
double landscape_l2(const PersistenceLandscape& landscape);

/// Resolves the Rips cap for a series under `cfg`.
double resolve_max_filtration(const std::vector<PointCloud>& windows, const TdaConfig& cfg);

/// Univariate summary: one L2 landscape norm per sliding window. The output
/// bin i corresponds to window i (t0 unchanged, step = skip * input step).
series::Series tda_pl_series(const series::MultivariateSeries& series, const TdaConfig& cfg);

nlohmann::json to_json(const PersistenceDiagram& diagram);
nlohmann::json to_json(const PersistenceLandscape& landscape);

}  // namespace polscope::tda
