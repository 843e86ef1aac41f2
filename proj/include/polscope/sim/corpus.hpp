#pragma once

#include <cstddef>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace polscope::sim {

struct Post {
    double t = 0.0;  // seconds from the start of the run
    std::size_t text_len = 0;
};

struct PersonaThread {
    std::string user;
    std::vector<Post> posts;  // strictly increasing t
};

/// One replayed conversation: the five most talkative participants.
struct ThreadSchedule {
    std::string thread_id;
    std::vector<PersonaThread> personas;
};

inline constexpr std::size_t kGroupSize = 5;
inline constexpr std::size_t kMinPostsPerPersona = 6;  // "more than five" posts

/// A message-board dump: (thread, user, time, text length) rows.
struct ThreadCorpus {
    struct Message {
        std::string thread;
        std::string user;
        double t = 0.0;
        std::size_t text_len = 0;
    };
    std::vector<Message> messages;

    /// JSONL rows {"thread":..., "user":..., "t":..., "text_len":...}.
    static ThreadCorpus load_jsonl(const std::filesystem::path& path);
};

struct CorpusConfig {
    /// Threads start uniformly within [0, start_spread) seconds.
    double start_spread = 300.0;
    /// Log-normal inter-post gap (seconds) per persona.
    double gap_median = 75.0;
    double gap_sigma = 0.6;
    /// Extra posts beyond the minimum ~ Geometric(p).
    double extra_posts_p = 0.12;
    double text_len_median = 120.0;
    double text_len_sigma = 0.7;
};

/// Draws `n_groups` engaging conversations. Corpus threads qualify when at
/// least five users posted more than five times; the five most talkative
/// users are kept and the thread is re-based to a random start. When the
/// corpus runs short (or is null) synthetic Poisson-burst conversations fill
/// the remainder. Persona names are unique across groups.
std::vector<ThreadSchedule> sample_groups(const ThreadCorpus* corpus, std::size_t n_groups, const CorpusConfig& cfg,
                                          std::mt19937_64& rng);

}  // namespace polscope::sim
