#include "polscope/tda/tda.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

namespace polscope::tda {

void TdaConfig::validate() const {
    if (window_size < 1) throw std::invalid_argument("window_size must be >= 1");
    if (window_skip < 1) throw std::invalid_argument("window_skip must be >= 1");
    if (max_dim < 0) throw std::invalid_argument("max_dim must be >= 0");
    if (max_filtration && !(*max_filtration > 0.0)) throw std::invalid_argument("max_filtration must be > 0");
    if (num_landscapes < 1) throw std::invalid_argument("num_landscapes must be >= 1");
}

std::vector<std::pair<double, double>> PersistenceDiagram::of_dim(int dim) const {
    std::vector<std::pair<double, double>> out;
    for (const auto& p : pairs) {
        if (p.dim == dim) out.emplace_back(p.birth, p.death);
    }
    std::ranges::sort(out);
    return out;
}

double PersistenceLandscape::value(std::size_t k, double t) const {
    if (k >= levels.size()) return 0.0;
    const auto& pts = levels[k];
    if (pts.empty() || t < pts.front().first || t > pts.back().first) return 0.0;
    auto hi = std::ranges::lower_bound(pts, t, {}, &std::pair<double, double>::first);
    if (hi == pts.end()) return pts.back().second;
    if (hi->first == t || hi == pts.begin()) return hi->second;
    auto lo = std::prev(hi);
    const double frac = (t - lo->first) / (hi->first - lo->first);
    return lo->second + frac * (hi->second - lo->second);
}

std::vector<PointCloud> sliding_windows(const series::MultivariateSeries& s, const TdaConfig& cfg) {
    cfg.validate();
    const std::size_t len = s.length();
    const std::size_t w = cfg.window_size;
    const std::size_t skip = cfg.window_skip;
    std::vector<PointCloud> out;
    auto make = [&](std::size_t start, std::size_t count) {
        PointCloud pc;
        pc.points.reserve(count);
        for (std::size_t i = start; i < start + count; ++i) {
            Point p(s.width());
            for (std::size_t c = 0; c < s.width(); ++c) p[c] = s.columns[c][i];
            pc.points.push_back(std::move(p));
        }
        out.push_back(std::move(pc));
    };
    std::size_t start = 0;
    for (; start + w <= len; start += skip) make(start, w);
    const std::size_t covered = out.empty() ? 0 : (start - skip) + w;
    if (covered < len) {
        // `start` is the first start whose window would overrun the end.
        const std::size_t remaining = len - start;
        if (start < len && remaining >= 2) make(start, remaining);
    }
    return out;
}

namespace {

struct Simplex {
    std::vector<int> vertices;
    double value = 0.0;
    [[nodiscard]] int dim() const { return static_cast<int>(vertices.size()) - 1; }
};

double euclid(const Point& a, const Point& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

// Adds every clique of up to `max_vertices` vertices extending `current`.
void expand_cliques(const std::vector<std::vector<double>>& dist, double cap, std::size_t max_vertices,
                    std::vector<int>& current, double value, std::vector<Simplex>& out) {
    if (current.size() >= max_vertices) return;
    const int n = static_cast<int>(dist.size());
    for (int v = current.back() + 1; v < n; ++v) {
        double next_value = value;
        bool ok = true;
        for (int u : current) {
            const double d = dist[u][v];
            if (d > cap) {
                ok = false;
                break;
            }
            next_value = std::max(next_value, d);
        }
        if (!ok) continue;
        current.push_back(v);
        out.push_back({current, next_value});
        expand_cliques(dist, cap, max_vertices, current, next_value, out);
        current.pop_back();
    }
}

struct VectorHash {
    std::size_t operator()(const std::vector<int>& v) const noexcept {
        std::size_t h = 1469598103934665603ull;
        for (int x : v) h = (h ^ static_cast<std::size_t>(x + 1)) * 1099511628211ull;
        return h;
    }
};

// Symmetric difference of two sorted index lists (Z/2 column addition).
void add_column(std::vector<int>& target, const std::vector<int>& source, std::vector<int>& scratch) {
    scratch.clear();
    std::ranges::set_symmetric_difference(target, source, std::back_inserter(scratch));
    target.swap(scratch);
}

}  // namespace

PersistenceDiagram vietoris_rips(const PointCloud& cloud, int max_dim, double max_filtration) {
    if (max_dim < 0) throw std::invalid_argument("max_dim must be >= 0");
    if (!(max_filtration > 0.0)) throw std::invalid_argument("max_filtration must be > 0");
    PersistenceDiagram diagram;
    diagram.max_filtration = max_filtration;
    const int n = static_cast<int>(cloud.points.size());
    if (n == 0) return diagram;

    std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) dist[i][j] = dist[j][i] = euclid(cloud.points[i], cloud.points[j]);
    }

    std::vector<Simplex> simplices;
    const auto max_vertices = static_cast<std::size_t>(max_dim) + 2;
    for (int v = 0; v < n; ++v) {
        std::vector<int> current{v};
        simplices.push_back({current, 0.0});
        expand_cliques(dist, max_filtration, max_vertices, current, 0.0, simplices);
    }
    std::ranges::sort(simplices, [](const Simplex& a, const Simplex& b) {
        if (a.value != b.value) return a.value < b.value;
        if (a.vertices.size() != b.vertices.size()) return a.vertices.size() < b.vertices.size();
        return a.vertices < b.vertices;
    });

    std::unordered_map<std::vector<int>, int, VectorHash> index;
    index.reserve(simplices.size() * 2);
    for (int i = 0; i < static_cast<int>(simplices.size()); ++i) index.emplace(simplices[i].vertices, i);

    // Standard column reduction of the boundary matrix.
    std::vector<std::vector<int>> columns(simplices.size());
    std::unordered_map<int, int> pivot_of_low;
    std::vector<bool> paired(simplices.size(), false);
    std::vector<int> scratch;
    for (int j = 0; j < static_cast<int>(simplices.size()); ++j) {
        const auto& verts = simplices[j].vertices;
        auto& col = columns[j];
        if (verts.size() > 1) {
            std::vector<int> face;
            face.reserve(verts.size() - 1);
            for (std::size_t drop = 0; drop < verts.size(); ++drop) {
                face.clear();
                for (std::size_t k = 0; k < verts.size(); ++k) {
                    if (k != drop) face.push_back(verts[k]);
                }
                col.push_back(index.at(face));
            }
            std::ranges::sort(col);
        }
        while (!col.empty()) {
            auto it = pivot_of_low.find(col.back());
            if (it == pivot_of_low.end()) break;
            add_column(col, columns[it->second], scratch);
        }
        if (!col.empty()) {
            const int low = col.back();
            pivot_of_low.emplace(low, j);
            paired[low] = true;
            paired[j] = true;
            const Simplex& born = simplices[low];
            if (born.dim() <= max_dim && simplices[j].value > born.value) {
                diagram.pairs.push_back({born.dim(), born.value, simplices[j].value});
            }
        }
    }
    for (int i = 0; i < static_cast<int>(simplices.size()); ++i) {
        const Simplex& s = simplices[i];
        if (!paired[i] && s.dim() <= max_dim && max_filtration > s.value) {
            diagram.pairs.push_back({s.dim(), s.value, max_filtration});
        }
    }
    std::ranges::sort(diagram.pairs, [](const PersistencePair& a, const PersistencePair& b) {
        return std::tie(a.dim, a.birth, a.death) < std::tie(b.dim, b.birth, b.death);
    });
    return diagram;
}

PersistenceLandscape persistence_landscape(const PersistenceDiagram& diagram, std::size_t num_landscapes) {
    PersistenceLandscape pl;
    pl.levels.resize(num_landscapes);
    std::vector<std::pair<double, double>> tents;
    for (const auto& p : diagram.pairs) {
        if (p.death > p.birth) tents.emplace_back(p.birth, p.death);
    }
    if (tents.empty()) return pl;

    // Every kink or crossing of two tents sits at (b_i + d_j) / 2, including
    // the peaks (i == j); supports end at b_i and d_i.
    std::vector<double> grid;
    grid.reserve(tents.size() * tents.size() + 2 * tents.size());
    double lo = tents.front().first;
    double hi = tents.front().second;
    for (const auto& [b, d] : tents) {
        lo = std::min(lo, b);
        hi = std::max(hi, d);
        grid.push_back(b);
        grid.push_back(d);
    }
    for (const auto& [bi, di] : tents) {
        for (const auto& [bj, dj] : tents) grid.push_back(0.5 * (bi + dj));
    }
    std::ranges::sort(grid);
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    std::erase_if(grid, [&](double t) { return t < lo || t > hi; });

    const std::size_t levels = std::min(num_landscapes, tents.size());
    for (std::size_t k = 0; k < levels; ++k) pl.levels[k].reserve(grid.size());
    std::vector<double> vals(tents.size());
    for (double t : grid) {
        for (std::size_t i = 0; i < tents.size(); ++i) {
            const auto& [b, d] = tents[i];
            vals[i] = std::max(0.0, std::min(t - b, d - t));
        }
        std::ranges::partial_sort(vals, vals.begin() + static_cast<std::ptrdiff_t>(levels), std::greater<>{});
        for (std::size_t k = 0; k < levels; ++k) pl.levels[k].emplace_back(t, vals[k]);
    }
    return pl;
}

double landscape_l2(const PersistenceLandscape& landscape) {
    double total = 0.0;
    for (const auto& level : landscape.levels) {
        for (std::size_t i = 1; i < level.size(); ++i) {
            const auto& [t0, y0] = level[i - 1];
            const auto& [t1, y1] = level[i];
            total += (t1 - t0) * (y0 * y0 + y0 * y1 + y1 * y1) / 3.0;
        }
    }
    return std::sqrt(total);
}

double resolve_max_filtration(const std::vector<PointCloud>& windows, const TdaConfig& cfg) {
    if (cfg.max_filtration) return *cfg.max_filtration;
    for (const auto& w : windows) {
        std::vector<double> d;
        for (std::size_t i = 0; i < w.points.size(); ++i) {
            for (std::size_t j = i + 1; j < w.points.size(); ++j) {
                const double v = euclid(w.points[i], w.points[j]);
                if (v > 0.0) d.push_back(v);
            }
        }
        if (d.empty()) continue;
        const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
        std::ranges::nth_element(d, mid);
        double median = *mid;
        if (d.size() % 2 == 0) {
            median = 0.5 * (median + *std::max_element(d.begin(), mid));
        }
        return 1.5 * median;
    }
    return 1.0;
}

series::Series tda_pl_series(const series::MultivariateSeries& input, const TdaConfig& cfg) {
    cfg.validate();
    series::MultivariateSeries s = input;
    if (cfg.normalize_features) {
        for (auto& col : s.columns) {
            const double n = static_cast<double>(col.size());
            const double mean = std::accumulate(col.begin(), col.end(), 0.0) / n;
            double var = 0.0;
            for (double v : col) var += (v - mean) * (v - mean);
            const double sd = std::sqrt(var / n);
            if (sd > 0.0) {
                for (double& v : col) v /= sd;
            }
        }
    }
    const auto windows = sliding_windows(s, cfg);
    const double cap = resolve_max_filtration(windows, cfg);
    series::Series out;
    out.t0 = s.t0;
    out.step = s.step * static_cast<double>(cfg.window_skip);
    out.values.reserve(windows.size());
    // Repeated points only add zero-length pairs, so each window is reduced
    // to its distinct points; sparse traffic then repeats the same few clouds.
    std::map<std::vector<Point>, double> memo;
    for (const auto& w : windows) {
        PointCloud distinct{w.points};
        std::ranges::sort(distinct.points);
        distinct.points.erase(std::unique(distinct.points.begin(), distinct.points.end()), distinct.points.end());
        auto [it, fresh] = memo.try_emplace(distinct.points, 0.0);
        if (fresh) {
            it->second =
                landscape_l2(persistence_landscape(vietoris_rips(distinct, cfg.max_dim, cap), cfg.num_landscapes));
        }
        out.values.push_back(it->second);
    }
    return out;
}

nlohmann::json to_json(const PersistenceDiagram& diagram) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& p : diagram.pairs) pairs.push_back({{"dim", p.dim}, {"birth", p.birth}, {"death", p.death}});
    return {{"max_filtration", diagram.max_filtration}, {"pairs", std::move(pairs)}};
}

nlohmann::json to_json(const PersistenceLandscape& landscape) {
    nlohmann::json levels = nlohmann::json::array();
    for (const auto& level : landscape.levels) {
        nlohmann::json pts = nlohmann::json::array();
        for (const auto& [t, v] : level) pts.push_back({t, v});
        levels.push_back(std::move(pts));
    }
    return {{"levels", std::move(levels)}};
}

}  // namespace polscope::tda
