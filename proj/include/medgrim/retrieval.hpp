#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "medgrim/embedding.hpp"
#include "medgrim/graph.hpp"

namespace medgrim {

struct RetrievalConfig {
    double lambda = 0.4;
    // Nodes scoring at least relative_threshold * max are direct matches.
    double relative_threshold = 0.95;
    // Applied after neighbor expansion; unset keeps everything.
    std::optional<std::size_t> max_candidates;

    void validate() const {
        check_lambda(lambda);
        if (!(relative_threshold > 0.0 && relative_threshold <= 1.0)) {
            throw Error(ErrorCode::InvalidArgument, "relative_threshold must lie in (0, 1]");
        }
        if (max_candidates && *max_candidates == 0) {
            throw Error(ErrorCode::InvalidArgument, "max_candidates must be positive");
        }
    }
};

enum class Via { DirectMatch, NeighborExpansion };

constexpr std::string_view to_string(Via v) {
    return v == Via::DirectMatch ? "direct" : "neighbor";
}

struct ScoredCondition {
    std::string condition_id;
    double score = 0.0;
    Via via = Via::DirectMatch;

    friend bool operator==(const ScoredCondition&, const ScoredCondition&) = default;
};

// Ordered by (score desc, direct before neighbor, id asc). Ids are unique.
struct CandidateSet {
    std::vector<ScoredCondition> entries;

    bool empty() const noexcept { return entries.empty(); }
    std::size_t size() const noexcept { return entries.size(); }

    const ScoredCondition* find(std::string_view id) const {
        for (const auto& e : entries) {
            if (e.condition_id == id) return &e;
        }
        return nullptr;
    }

    friend bool operator==(const CandidateSet&, const CandidateSet&) = default;
};

inline double hybrid_score(const HybridEncoding& query, const ConditionNode& node, double lambda) {
    return hybrid_score(query, node.text_embedding, node.mm_embedding, lambda);
}

inline void check_query_dimension(const ConditionGraph& graph, const HybridEncoding& query) {
    const bool text_ok = query.text_vec.dimension() == graph.dimension();
    const bool mm_ok = !query.mm_vec || query.mm_vec->dimension() == graph.dimension();
    if (!text_ok || !mm_ok) {
        throw Error(ErrorCode::DimensionMismatch, "query encoding does not match the " +
                                                      std::to_string(graph.dimension()) + "-d graph");
    }
}

/// Hybrid score of every condition, keyed by id.
inline std::map<std::string, double> score_all(const ConditionGraph& graph, const HybridEncoding& query,
                                               const RetrievalConfig& config) {
    if (graph.empty()) throw Error(ErrorCode::EmptyGraph, "graph has no conditions");
    config.validate();
    check_query_dimension(graph, query);
    std::map<std::string, double> scores;
    for (const auto& [id, node] : graph.nodes()) scores.emplace(id, hybrid_score(query, node, config.lambda));
    return scores;
}

/// Stage-1 filter. Conditions within relative_threshold of the best score are
/// direct matches; every neighbor of a direct match joins the set carrying its
/// own score. When the best score is not positive the relative rule is
/// meaningless and only the top-scoring conditions count as direct matches.
inline CandidateSet stage1_filter(const ConditionGraph& graph, const HybridEncoding& query,
                                  const RetrievalConfig& config) {
    const auto scores = score_all(graph, query, config);
    double best = scores.begin()->second;
    for (const auto& [id, s] : scores) best = std::max(best, s);

    std::map<std::string, ScoredCondition> picked;
    for (const auto& [id, s] : scores) {
        const bool direct = best > 0.0 ? s >= config.relative_threshold * best : s == best;
        if (direct) picked.insert_or_assign(id, ScoredCondition{id, s, Via::DirectMatch});
    }
    std::vector<std::string> direct_ids;
    for (const auto& [id, sc] : picked) direct_ids.push_back(id);
    for (const auto& id : direct_ids) {
        for (const auto& nb : graph.neighbors(id)) {
            if (!picked.count(nb)) picked.emplace(nb, ScoredCondition{nb, scores.at(nb), Via::NeighborExpansion});
        }
    }

    CandidateSet out;
    for (auto& [id, sc] : picked) out.entries.push_back(std::move(sc));
    std::sort(out.entries.begin(), out.entries.end(), [](const ScoredCondition& x, const ScoredCondition& y) {
        if (x.score != y.score) return x.score > y.score;
        if (x.via != y.via) return x.via == Via::DirectMatch;
        return x.condition_id < y.condition_id;
    });
    if (config.max_candidates && out.entries.size() > *config.max_candidates) {
        out.entries.resize(*config.max_candidates);
    }
    return out;
}

}  // namespace medgrim
