#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medgrim/graph.hpp"
#include "medgrim/lm_client.hpp"
#include "medgrim/prompt.hpp"
#include "medgrim/retrieval.hpp"

namespace medgrim {

struct ClarifyingQuestion {
    std::string id;
    std::string text;
    // Candidates the question was written to discriminate.
    std::vector<std::string> origin_ids;

    friend bool operator==(const ClarifyingQuestion&, const ClarifyingQuestion&) = default;
};

struct UserResponse {
    std::string question_id;
    // Unset when skipped.
    std::optional<std::string> answer;
    std::int64_t timestamp_ms = 0;

    friend bool operator==(const UserResponse&, const UserResponse&) = default;
};

struct LikelihoodVerdict {
    std::string condition_id;
    double likelihood = 0.0;
    std::string rationale;
    bool kept = false;

    friend bool operator==(const LikelihoodVerdict&, const LikelihoodVerdict&) = default;
};

/// LM access that reports every exchange to an observer (the session
/// transcript).
class LmChannel {
public:
    using Observer = std::function<void(const LmRequest&, const LmResponse&)>;

    LmChannel(const LmClient& client, DecodeParams params = {}, Observer observer = {})
        : client_(client), params_(params), observer_(std::move(observer)) {}

    LmResponse ask(AgentRole role, const std::string& prompt) const {
        LmResponse res = client_.complete(role, prompt, params_);
        if (observer_) {
            DecodeParams p = params_;
            if (role == AgentRole::ReasoningAgent) p.temperature = 0.0;
            observer_(LmRequest{role, prompt, p}, res);
        }
        return res;
    }

private:
    const LmClient& client_;
    DecodeParams params_;
    Observer observer_;
};

namespace detail {

inline std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

// Accepts ["q", ...] or [{"question": "q", "conditions": ["name or id", ...]}, ...].
inline std::optional<std::vector<ClarifyingQuestion>> parse_questions(const std::string& raw,
                                                                      const ConditionGraph& graph,
                                                                      const CandidateSet& candidates,
                                                                      int max_count) {
    std::vector<std::string> all_ids;
    for (const auto& e : candidates.entries) all_ids.push_back(e.condition_id);
    for (auto span : json_object_spans(raw, '[', ']')) {
        const auto doc = nlohmann::json::parse(span, nullptr, false);
        if (doc.is_discarded() || !doc.is_array()) continue;
        std::vector<ClarifyingQuestion> out;
        for (const auto& item : doc) {
            std::string text;
            std::vector<std::string> origins;
            if (item.is_string()) {
                text = item.get<std::string>();
            } else if (item.is_object() && item.contains("question") && item.at("question").is_string()) {
                text = item.at("question").get<std::string>();
                if (item.contains("conditions") && item.at("conditions").is_array()) {
                    for (const auto& c : item.at("conditions")) {
                        if (!c.is_string()) continue;
                        const std::string key = lower(c.get<std::string>());
                        for (const auto& id : all_ids) {
                            if (key == id || key == lower(graph.node(id).name)) origins.push_back(id);
                        }
                    }
                }
            } else {
                continue;
            }
            text = trim(text);
            if (text.empty()) continue;
            if (origins.empty()) origins = all_ids;
            std::sort(origins.begin(), origins.end());
            origins.erase(std::unique(origins.begin(), origins.end()), origins.end());
            out.push_back({"q" + std::to_string(out.size() + 1), std::move(text), std::move(origins)});
            if (static_cast<int>(out.size()) == max_count) break;
        }
        if (!out.empty()) return out;
    }
    return std::nullopt;
}

}  // namespace detail

/// Asks the question agent for discriminative questions about the candidates.
/// One corrective re-ask on an unreadable reply, then UnparseableQuestions.
inline std::vector<ClarifyingQuestion> generate_questions(const CandidateSet& candidates, const ConditionGraph& graph,
                                                          const RetrievedContext& context, const LmChannel& lm,
                                                          const TemplateRegistry& templates, int question_count = 3) {
    if (candidates.empty()) throw Error(ErrorCode::EmptyCandidates, "no candidates to ask about");
    if (question_count < 1 || question_count > 8) {
        throw Error(ErrorCode::InvalidArgument, "question count must lie in [1, 8]");
    }
    const std::string prompt =
        build_question_prompt(templates, make_bundles(graph, candidates.entries), context, question_count);
    auto reply = lm.ask(AgentRole::QuestionAgent, prompt);
    if (auto qs = detail::parse_questions(reply.text, graph, candidates, question_count)) return *qs;
    reply = lm.ask(AgentRole::QuestionAgent, templates.render("question_reask", {{"original_prompt", prompt}}));
    if (auto qs = detail::parse_questions(reply.text, graph, candidates, question_count)) return *qs;
    throw Error(ErrorCode::UnparseableQuestions, "question agent reply is not a JSON array of questions");
}

/// Pairs questions with their responses in question order. Every question
/// needs exactly one response (an answer or an explicit skip).
inline std::vector<QaPair> match_responses(const std::vector<ClarifyingQuestion>& questions,
                                           const std::vector<UserResponse>& responses) {
    std::map<std::string, const UserResponse*> by_id;
    for (const auto& r : responses) {
        const bool known = std::any_of(questions.begin(), questions.end(),
                                       [&](const ClarifyingQuestion& q) { return q.id == r.question_id; });
        if (!known) throw Error(ErrorCode::IncompleteAnswers, "response to unknown question '" + r.question_id + "'");
        if (!by_id.emplace(r.question_id, &r).second) {
            throw Error(ErrorCode::IncompleteAnswers, "question '" + r.question_id + "' answered twice");
        }
    }
    std::vector<QaPair> qa;
    for (const auto& q : questions) {
        auto it = by_id.find(q.id);
        if (it == by_id.end()) throw Error(ErrorCode::IncompleteAnswers, "question '" + q.id + "' has no response");
        qa.push_back({q.text, it->second->answer});
    }
    return qa;
}

struct Stage2Result {
    // Likelihood > threshold, ordered by likelihood desc, score desc, id asc.
    std::vector<ScoredCondition> filtered;
    // Every candidate, same ordering.
    std::vector<LikelihoodVerdict> verdicts;
};

inline LikelihoodReply ask_likelihood(const LmChannel& lm, const TemplateRegistry& templates,
                                      const std::string& prompt) {
    const auto reply = lm.ask(AgentRole::ReasoningAgent, prompt);
    try {
        return parse_likelihood_reply(reply.text);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::UnparseableLikelihood) throw;
    }
    const auto again = lm.ask(AgentRole::ReasoningAgent, templates.render("likelihood_reask", {{"original_prompt", prompt}}));
    return parse_likelihood_reply(again.text);
}

/// Stage-2 filter: one likelihood estimate per candidate given the Q&A
/// transcript, keeping candidates strictly above `threshold`.
inline Stage2Result stage2_filter(const CandidateSet& candidates, const ConditionGraph& graph,
                                  const RetrievedContext& context, const LmChannel& lm,
                                  const TemplateRegistry& templates, double threshold = 0.5) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw Error(ErrorCode::InvalidArgument, "threshold must lie in [0, 1]");
    struct Scored {
        ScoredCondition candidate;
        LikelihoodVerdict verdict;
    };
    std::vector<Scored> all;
    for (const auto& c : candidates.entries) {
        const auto bundle = make_bundle(graph, c);
        const auto reply = ask_likelihood(lm, templates, build_likelihood_prompt(templates, bundle, context, c.score));
        all.push_back({c, {c.condition_id, reply.likelihood, reply.rationale, reply.likelihood > threshold}});
    }
    std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) {
        if (a.verdict.likelihood != b.verdict.likelihood) return a.verdict.likelihood > b.verdict.likelihood;
        if (a.candidate.score != b.candidate.score) return a.candidate.score > b.candidate.score;
        return a.candidate.condition_id < b.candidate.condition_id;
    });
    Stage2Result out;
    for (auto& s : all) {
        if (s.verdict.kept) out.filtered.push_back(s.candidate);
        out.verdicts.push_back(std::move(s.verdict));
    }
    return out;
}

inline Stage2Result stage2_filter(const CandidateSet& candidates, const ConditionGraph& graph,
                                  const std::string& user_description,
                                  const std::vector<ClarifyingQuestion>& questions,
                                  const std::vector<UserResponse>& responses, const LmChannel& lm,
                                  const TemplateRegistry& templates, double threshold = 0.5) {
    const RetrievedContext context{user_description, match_responses(questions, responses)};
    return stage2_filter(candidates, graph, context, lm, templates, threshold);
}

}  // namespace medgrim
