#include "polscope/timeseries/series.hpp"

#include <algorithm>

namespace polscope::series {

std::optional<Series> clip_range(const Series& b, const Series& reference, double buffer) {
    if (b.empty() || reference.empty()) return std::nullopt;
    const double lo = reference.t0 - buffer;
    const double hi = reference.last_start() + buffer;
    // Tolerate representation error on grid-aligned values.
    constexpr double kEps = 1e-9;
    const double first_idx = std::ceil((lo - b.t0) / b.step - kEps);
    const double last_idx = std::floor((hi - b.t0) / b.step + kEps);
    const double begin = std::max(first_idx, 0.0);
    const double end = std::min(last_idx, static_cast<double>(b.size()) - 1.0);
    if (end < begin) return std::nullopt;
    const auto i0 = static_cast<std::size_t>(begin);
    const auto i1 = static_cast<std::size_t>(end);
    Series out;
    out.step = b.step;
    out.t0 = b.t0 + b.step * static_cast<double>(i0);
    out.values.assign(b.values.begin() + static_cast<std::ptrdiff_t>(i0),
                      b.values.begin() + static_cast<std::ptrdiff_t>(i1) + 1);
    return out;
}

nlohmann::json to_json(const FeatureSeries& fs) {
    return {{"owner", fs.owner}, {"feature", fs.feature}, {"t0", fs.data.t0}, {"step", fs.data.step},
            {"values", fs.data.values}};
}

FeatureSeries feature_series_from_json(const nlohmann::json& obj) {
    FeatureSeries fs;
    fs.owner = obj.at("owner").get<std::string>();
    fs.feature = obj.at("feature").get<std::string>();
    fs.data.t0 = obj.at("t0").get<double>();
    fs.data.step = obj.value("step", 1.0);
    fs.data.values = obj.at("values").get<std::vector<double>>();
    return fs;
}

}  // namespace polscope::series
