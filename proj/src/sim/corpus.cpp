#include "polscope/sim/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace polscope::sim {

ThreadCorpus ThreadCorpus::load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus: " + path.string());
    ThreadCorpus corpus;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto obj = nlohmann::json::parse(line);
        corpus.messages.push_back({obj.at("thread").get<std::string>(), obj.at("user").get<std::string>(),
                                   obj.at("t").get<double>(), obj.value("text_len", std::size_t{0})});
    }
    return corpus;
}

namespace {

std::vector<ThreadSchedule> engaging_threads(const ThreadCorpus& corpus) {
    std::map<std::string, std::map<std::string, std::vector<Post>>> threads;
    for (const auto& m : corpus.messages) threads[m.thread][m.user].push_back({m.t, m.text_len});

    std::vector<ThreadSchedule> out;
    for (auto& [id, users] : threads) {
        std::vector<std::pair<std::string, std::vector<Post>>> talkative;
        for (auto& [user, posts] : users) {
            if (posts.size() >= kMinPostsPerPersona) talkative.emplace_back(user, std::move(posts));
        }
        if (talkative.size() < kGroupSize) continue;
        std::ranges::stable_sort(talkative, [](const auto& a, const auto& b) { return a.second.size() > b.second.size(); });
        talkative.resize(kGroupSize);
        ThreadSchedule ts;
        ts.thread_id = id;
        for (auto& [user, posts] : talkative) {
            std::ranges::sort(posts, {}, &Post::t);
            ts.personas.push_back({user, std::move(posts)});
        }
        out.push_back(std::move(ts));
    }
    return out;
}

// Makes every timestamp in the thread distinct and increasing in merge order.
void enforce_strict_order(ThreadSchedule& ts) {
    std::vector<Post*> all;
    for (auto& p : ts.personas) {
        for (auto& post : p.posts) all.push_back(&post);
    }
    std::ranges::stable_sort(all, {}, [](const Post* p) { return p->t; });
    for (std::size_t i = 1; i < all.size(); ++i) {
        if (all[i]->t <= all[i - 1]->t) all[i]->t = all[i - 1]->t + 1e-3;
    }
}

ThreadSchedule synthetic_thread(std::size_t index, const CorpusConfig& cfg, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> start(0.0, cfg.start_spread);
    std::lognormal_distribution<double> gap(std::log(cfg.gap_median), cfg.gap_sigma);
    std::lognormal_distribution<double> text(std::log(cfg.text_len_median), cfg.text_len_sigma);
    std::geometric_distribution<int> extra(cfg.extra_posts_p);
    std::exponential_distribution<double> first_reply(1.0 / 30.0);

    ThreadSchedule ts;
    ts.thread_id = "synthetic-" + std::to_string(index);
    const double t_start = start(rng);
    for (std::size_t p = 0; p < kGroupSize; ++p) {
        PersonaThread persona;
        persona.user = "persona" + std::to_string(index * kGroupSize + p);
        const std::size_t n_posts = kMinPostsPerPersona + static_cast<std::size_t>(extra(rng));
        double t = t_start + first_reply(rng);
        for (std::size_t i = 0; i < n_posts; ++i) {
            persona.posts.push_back({t, std::max<std::size_t>(1, static_cast<std::size_t>(text(rng)))});
            t += gap(rng);
        }
        ts.personas.push_back(std::move(persona));
    }
    return ts;
}

}  // namespace

std::vector<ThreadSchedule> sample_groups(const ThreadCorpus* corpus, std::size_t n_groups, const CorpusConfig& cfg,
                                          std::mt19937_64& rng) {
    std::vector<ThreadSchedule> out;
    if (n_groups == 0) return out;

    std::set<std::string> used_names;
    if (corpus != nullptr) {
        auto pool = engaging_threads(*corpus);
        std::ranges::shuffle(pool, rng);
        std::uniform_real_distribution<double> start(0.0, cfg.start_spread);
        for (auto& ts : pool) {
            if (out.size() == n_groups) break;
            bool clash = false;
            for (const auto& p : ts.personas) clash = clash || used_names.contains(p.user);
            if (clash) continue;
            double first = INFINITY;
            for (const auto& p : ts.personas) first = std::min(first, p.posts.front().t);
            const double shift = start(rng) - first;
            for (auto& p : ts.personas) {
                used_names.insert(p.user);
                for (auto& post : p.posts) post.t += shift;
            }
            out.push_back(std::move(ts));
        }
    }
    std::size_t synthetic_index = 0;
    while (out.size() < n_groups) {
        auto ts = synthetic_thread(synthetic_index++, cfg, rng);
        bool clash = false;
        for (const auto& p : ts.personas) clash = clash || used_names.contains(p.user);
        if (clash) continue;
        for (const auto& p : ts.personas) used_names.insert(p.user);
        out.push_back(std::move(ts));
    }
    for (auto& ts : out) enforce_strict_order(ts);
    return out;
}

}  // namespace polscope::sim
