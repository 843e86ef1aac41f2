#include "polscope/linkage/linkage.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace polscope::linkage {

std::map<std::string, PersonaSeries> prepare_personas(std::span<const MessageRecord> logs, const LinkageConfig& cfg) {
    std::map<std::string, std::vector<MessageRecord>> by_user;
    for (const auto& msg : logs) {
        if (!(msg.timestamp >= 0.0)) throw std::invalid_argument("message timestamp must be >= 0");
        by_user[msg.user].push_back(msg);
    }
    std::map<std::string, PersonaSeries> out;
    for (auto& [user, msgs] : by_user) {
        std::ranges::stable_sort(msgs, {}, &MessageRecord::timestamp);
        const double t0 = series::aligned_start(msgs.front().timestamp, cfg.time_origin);
        auto raw = series::rolling_sum<MessageRecord>(
            user, msgs, {"message.count", "message.text_len"},
            [](const MessageRecord& m, std::size_t col) -> std::optional<double> {
                return col == 0 ? 1.0 : static_cast<double>(m.text_len);
            },
            t0);
        PersonaSeries ps;
        ps.user = user;
        ps.raw = std::move(*raw);
        ps.pol = cfg.multivariate ? tda::tda_pl_series(ps.raw, cfg.tda) : ps.raw.column(0);
        out.emplace(user, std::move(ps));
    }
    return out;
}

NccResult ncc(std::span<const double> x, std::span<const double> y, std::optional<LagWindow> lags, int origin) {
    const auto nx = static_cast<long>(x.size());
    const auto ny = static_cast<long>(y.size());
    // Lags with at least two overlapping bins.
    long lo = -(nx - 2);
    long hi = ny - 2;
    if (lags) {
        lo = std::max<long>(lo, lags->min_lag);
        hi = std::min<long>(hi, lags->max_lag);
    }
    NccResult best;
    best.degenerate = true;
    double best_score = -std::numeric_limits<double>::infinity();
    for (long tau = lo; tau <= hi; ++tau) {
        const long t_begin = std::max<long>(0, -tau);
        const long t_end = std::min<long>(nx, ny - tau);
        const long count = t_end - t_begin;
        if (count < 2) continue;
        double sx = 0.0, sy = 0.0;
        double xmin = x[t_begin], xmax = x[t_begin], ymin = y[t_begin + tau], ymax = y[t_begin + tau];
        for (long t = t_begin; t < t_end; ++t) {
            const double a = x[t];
            const double b = y[t + tau];
            sx += a;
            sy += b;
            xmin = std::min(xmin, a);
            xmax = std::max(xmax, a);
            ymin = std::min(ymin, b);
            ymax = std::max(ymax, b);
        }
        if (xmin == xmax || ymin == ymax) continue;
        const double mx = sx / static_cast<double>(count);
        const double my = sy / static_cast<double>(count);
        double cov = 0.0, vx = 0.0, vy = 0.0;
        for (long t = t_begin; t < t_end; ++t) {
            const double a = x[t] - mx;
            const double b = y[t + tau] - my;
            cov += a * b;
            vx += a * a;
            vy += b * b;
        }
        if (vx <= 0.0 || vy <= 0.0) continue;
        const double r = std::clamp(cov / std::sqrt(vx * vy), -1.0, 1.0);
        // Equal peaks (short overlaps correlate perfectly by accident) go to
        // the lag nearest the origin.
        constexpr double kTie = 1e-12;
        const bool closer = std::abs(tau - origin) < std::abs(static_cast<long>(best.lag) - origin);
        if (r > best_score + kTie || (r >= best_score - kTie && closer)) {
            best_score = r;
            best.score = r;
            best.lag = static_cast<int>(tau);
            best.degenerate = false;
        }
    }
    if (best.degenerate) best.score = 0.0;
    return best;
}

NccResult ncc_aligned(const series::Series& x, const series::Series& y, std::optional<int> max_lag) {
    if (std::abs(x.step - y.step) > 1e-12) throw std::invalid_argument("ncc_aligned: series steps differ");
    const auto center = static_cast<int>(std::lround((x.t0 - y.t0) / x.step));
    std::optional<LagWindow> window;
    if (max_lag) window = LagWindow{center - *max_lag, center + *max_lag};
    NccResult r = ncc(x.values, y.values, window, center);
    r.lag -= center;
    return r;
}

Similarity similarity(const series::Series& ip_series, const series::Series& persona_series, double buffer,
                      std::optional<int> max_lag) {
    Similarity out;
    auto clipped = series::clip_range(ip_series, persona_series, buffer);
    if (!clipped) {
        out.empty_overlap = true;
        out.ncc.degenerate = true;
        return out;
    }
    out.ncc = ncc_aligned(persona_series, *clipped, max_lag);
    return out;
}

std::optional<std::size_t> RankedAttribution::rank_of(const std::string& ip) const {
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        if (ranking[i].ip == ip) return i + 1;
    }
    return std::nullopt;
}

AttributionMap deobfuscate(const std::map<std::string, series::Series>& personas,
                           const std::map<std::string, series::Series>& candidates, const LinkageConfig& cfg) {
    AttributionMap out;
    for (const auto& [user, pol] : personas) {
        RankedAttribution ra;
        ra.user = user;
        ra.no_candidates = candidates.empty();
        ra.ranking.reserve(candidates.size());
        for (const auto& [ip, ip_series] : candidates) {
            const Similarity s = similarity(ip_series, pol, cfg.clip_buffer, cfg.max_lag);
            ra.ranking.push_back({ip, s.ncc.score, s.ncc.lag, s.ncc.degenerate || s.empty_overlap});
        }
        std::ranges::stable_sort(ra.ranking, [](const Candidate& a, const Candidate& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.ip < b.ip;
        });
        out.emplace(user, std::move(ra));
    }
    return out;
}

EvaluationReport evaluate(const AttributionMap& attributions, const std::map<std::string, std::string>& ground_truth,
                          std::span<const std::size_t> ks) {
    EvaluationReport rep;
    rep.personas = attributions.size();
    std::size_t widest = 0;
    bool any_ranking = false;
    for (const auto& [user, ra] : attributions) {
        widest = std::max(widest, ra.ranking.size());
        any_ranking = any_ranking || !ra.ranking.empty();
    }
    rep.no_prediction = !any_ranking;
    for (std::size_t k : ks) rep.recall_at[k] = 0.0;
    if (attributions.empty()) return rep;

    double correct = 0.0;
    double rank_sum = 0.0;
    for (const auto& [user, ra] : attributions) {
        auto truth = ground_truth.find(user);
        if (truth == ground_truth.end()) throw std::invalid_argument("no ground truth for persona " + user);
        const auto rank = ra.rank_of(truth->second);
        const std::size_t missing_rank = (ra.ranking.empty() ? widest : ra.ranking.size()) + 1;
        const std::size_t r = rank.value_or(missing_rank);
        rank_sum += static_cast<double>(r);
        if (rank && *rank == 1) correct += 1.0;
        for (std::size_t k : ks) {
            if (rank && *rank <= k) rep.recall_at[k] += 1.0;
        }
    }
    const double n = static_cast<double>(attributions.size());
    rep.accuracy = correct / n;
    for (auto& [k, v] : rep.recall_at) v /= n;
    rep.mean_rank = rank_sum / n;
    return rep;
}

nlohmann::json EvaluationReport::to_json() const {
    nlohmann::json recall = nlohmann::json::object();
    for (const auto& [k, v] : recall_at) recall[std::to_string(k)] = v;
    return {{"scope_set", scope_set}, {"personas", personas},     {"accuracy", accuracy},
            {"recall_at", recall},    {"mean_rank", mean_rank},   {"no_prediction", no_prediction}};
}

EvaluationReport EvaluationReport::from_json(const nlohmann::json& obj) {
    EvaluationReport rep;
    rep.scope_set = obj.value("scope_set", "");
    rep.personas = obj.value("personas", std::size_t{0});
    rep.accuracy = obj.value("accuracy", 0.0);
    rep.mean_rank = obj.value("mean_rank", 0.0);
    rep.no_prediction = obj.value("no_prediction", false);
    if (auto it = obj.find("recall_at"); it != obj.end()) {
        for (const auto& [k, v] : it->items()) rep.recall_at[std::stoul(k)] = v.get<double>();
    }
    return rep;
}

std::string reports_to_csv(std::span<const EvaluationReport> reports, std::span<const std::size_t> ks) {
    std::ostringstream out;
    out << "scope_set,personas,accuracy";
    for (std::size_t k : ks) out << ",recall@" << k;
    out << ",mean_rank\n";
    for (const auto& r : reports) {
        out << r.scope_set << ',' << r.personas << ',' << r.accuracy;
        for (std::size_t k : ks) {
            auto it = r.recall_at.find(k);
            out << ',' << (it == r.recall_at.end() ? 0.0 : it->second);
        }
        out << ',' << r.mean_rank << '\n';
    }
    return out.str();
}

nlohmann::json to_json(const RankedAttribution& ra) {
    nlohmann::json ranking = nlohmann::json::array();
    for (const auto& c : ra.ranking) {
        ranking.push_back({{"ip", c.ip}, {"score", c.score}, {"lag", c.lag}, {"degenerate", c.degenerate}});
    }
    nlohmann::json obj{{"user", ra.user}, {"ranking", std::move(ranking)}, {"no_candidates", ra.no_candidates}};
    if (auto best = ra.best_ip()) obj["best_ip"] = *best;
    return obj;
}

RankedAttribution attribution_from_json(const nlohmann::json& obj) {
    RankedAttribution ra;
    ra.user = obj.at("user").get<std::string>();
    ra.no_candidates = obj.value("no_candidates", false);
    for (const auto& c : obj.at("ranking")) {
        ra.ranking.push_back({c.at("ip").get<std::string>(), c.at("score").get<double>(), c.value("lag", 0),
                              c.value("degenerate", false)});
    }
    return ra;
}

}  // namespace polscope::linkage
