#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "polscope/linkage/linkage.hpp"

namespace polscope::service {

/// What the analyst suspects about the persona's privacy tooling.
struct PptHypothesis {
    bool dns_ppt = false;  // DoT or DoH
    bool vpn = false;
    /// "dot" or "doh" when known.
    std::optional<std::string> dns_mode;

    /// Parses "none", "podns", "dot", "doh", "vpn", "dot+vpn", "doh+vpn".
    static PptHypothesis parse(std::string_view text);
    [[nodiscard]] std::string label() const;
};

struct ScopeAdvice {
    std::string scope_set;
    /// 1 is the best tier; scopes within a tier are interchangeable.
    int tier = 1;
    std::string rationale;
    /// Measured accuracy from an analysis, when one was supplied.
    std::optional<double> accuracy;
};

struct Playbook {
    std::string hypothesis;
    std::vector<std::string> steps;
    std::vector<ScopeAdvice> scopes;
    std::vector<std::string> unusable;

    [[nodiscard]] nlohmann::json to_json() const;
};

/// Static guidance for one hypothesis. When reports are given, scopes in
/// the same tier are ordered by their measured accuracy.
Playbook playbook_for(const PptHypothesis& h, const std::vector<linkage::EvaluationReport>& reports = {});

}  // namespace polscope::service
