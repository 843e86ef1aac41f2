#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace polscope::series {

/// A regularly binned univariate series. Bin i covers
/// [t0 + i*step, t0 + (i+1)*step).
struct Series {
    double t0 = 0.0;
    double step = 1.0;
    std::vector<double> values;

    [[nodiscard]] std::size_t size() const { return values.size(); }
    [[nodiscard]] bool empty() const { return values.empty(); }
    /// Start time of the last bin.
    [[nodiscard]] double last_start() const { return t0 + step * static_cast<double>(values.size() - 1); }

    bool operator==(const Series&) const = default;
};

struct FeatureSeries {
    std::string owner;
    std::string feature;
    Series data;
};

/// Column-aligned multivariate series; every column shares t0, step and length.
struct MultivariateSeries {
    std::string owner;
    std::vector<std::string> features;
    double t0 = 0.0;
    double step = 1.0;
    std::vector<std::vector<double>> columns;

    [[nodiscard]] std::size_t length() const { return columns.empty() ? 0 : columns.front().size(); }
    [[nodiscard]] std::size_t width() const { return columns.size(); }
    [[nodiscard]] Series column(std::size_t i) const { return Series{t0, step, columns.at(i)}; }
    [[nodiscard]] FeatureSeries feature_series(std::size_t i) const { return {owner, features.at(i), column(i)}; }
};

/// First bin boundary at or before `first_timestamp` on the grid anchored at `origin`.
inline double aligned_start(double first_timestamp, double origin, double step = 1.0) {
    return origin + std::floor((first_timestamp - origin) / step) * step;
}

/// Tumbling-window sum: one-second window advanced by one second.
/// `value(rec, column)` returns the contribution of a record to a column or
/// nullopt when absent. Records before t0 are ignored; the series runs from
/// t0 through the bin of the last record with explicit zero bins in between.
/// Returns nullopt when no record falls at or after t0.
template <typename Record, typename ValueFn>
std::optional<MultivariateSeries> rolling_sum(std::string owner, std::span<const Record> records,
                                              std::vector<std::string> feature_names, ValueFn&& value, double t0,
                                              double step = 1.0) {
    double last = -INFINITY;
    bool any = false;
    for (const auto& rec : records) {
        if (rec.timestamp < t0) continue;
        any = true;
        last = std::max(last, rec.timestamp);
    }
    if (!any) return std::nullopt;
    const auto n = static_cast<std::size_t>(std::floor((last - t0) / step)) + 1;

    MultivariateSeries out;
    out.owner = std::move(owner);
    out.t0 = t0;
    out.step = step;
    out.columns.assign(feature_names.size(), std::vector<double>(n, 0.0));
    for (const auto& rec : records) {
        if (rec.timestamp < t0) continue;
        const auto bin = std::min(static_cast<std::size_t>(std::floor((rec.timestamp - t0) / step)), n - 1);
        for (std::size_t c = 0; c < feature_names.size(); ++c) {
            if (auto v = value(rec, c)) out.columns[c][bin] += *v;
        }
    }
    out.features = std::move(feature_names);
    return out;
}

/// Restricts `b` to the span of `reference` widened by `buffer` seconds on
/// each side. Returns nullopt when nothing of `b` remains.
std::optional<Series> clip_range(const Series& b, const Series& reference, double buffer);

nlohmann::json to_json(const FeatureSeries& fs);
FeatureSeries feature_series_from_json(const nlohmann::json& obj);

}  // namespace polscope::series
