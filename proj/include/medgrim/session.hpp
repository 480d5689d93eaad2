#pragma once

#include <atomic>
#include <chrono>
#include <memory>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "medgrim/dialogue.hpp"
#include "medgrim/encoder.hpp"
#include "medgrim/graph.hpp"
#include "medgrim/lm_client.hpp"
#include "medgrim/prompt.hpp"
#include "medgrim/retrieval.hpp"

namespace medgrim {

enum class SessionState { AwaitingInput, Stage1Complete, AwaitingAnswers, Stage2Complete, Answered, Closed };

inline constexpr std::string_view to_string(SessionState s) {
    switch (s) {
        case SessionState::AwaitingInput: return "awaiting_input";
        case SessionState::Stage1Complete: return "stage1_complete";
        case SessionState::AwaitingAnswers: return "awaiting_answers";
        case SessionState::Stage2Complete: return "stage2_complete";
        case SessionState::Answered: return "answered";
        case SessionState::Closed: return "closed";
    }
    return "unknown";
}

inline SessionState session_state_from_string(std::string_view s) {
    for (auto st : {SessionState::AwaitingInput, SessionState::Stage1Complete, SessionState::AwaitingAnswers,
                    SessionState::Stage2Complete, SessionState::Answered, SessionState::Closed}) {
        if (to_string(st) == s) return st;
    }
    throw Error(ErrorCode::MalformedInput, "unknown session state '" + std::string(s) + "'");
}

inline bool is_legal_transition(SessionState from, SessionState to) {
    using S = SessionState;
    switch (from) {
        case S::AwaitingInput: return to == S::Stage1Complete;
        case S::Stage1Complete: return to == S::AwaitingAnswers || to == S::Stage2Complete;
        case S::AwaitingAnswers: return to == S::Stage2Complete;
        case S::Stage2Complete: return to == S::Answered;
        case S::Answered: return to == S::Answered || to == S::Closed;
        case S::Closed: return false;
    }
    return false;
}

struct QueryInput {
    std::string text;
    std::optional<ImageRef> image;
};

struct SessionConfig {
    RetrievalConfig retrieval{};
    double likelihood_threshold = 0.5;
    int question_count = 3;
    bool prompt_engineering = true;
    // A lone Stage-1 candidate at or above this score skips the question round.
    double shortcut_min_score = 0.999;
    DecodeParams decode{};

    void validate() const {
        retrieval.validate();
        if (!(likelihood_threshold >= 0.0 && likelihood_threshold <= 1.0)) {
            throw Error(ErrorCode::InvalidArgument, "likelihood threshold must lie in [0, 1]");
        }
        if (question_count < 1 || question_count > 8) {
            throw Error(ErrorCode::InvalidArgument, "question count must lie in [1, 8]");
        }
    }
};

using Clock = std::function<std::int64_t()>;

inline Clock system_clock_ms() {
    return [] {
        return std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::system_clock::now().time_since_epoch())
            .count();
    };
}

// Counts 1, 2, 3, ... so transcripts are reproducible byte for byte.
inline Clock logical_clock() {
    auto counter = std::make_shared<std::atomic<std::int64_t>>(0);
    return [counter] { return ++*counter; };
}

/// Everything a session reads but does not own.
struct SessionContext {
    const ConditionGraph& graph;
    const EncoderClient& encoder;
    const LmClient& lm;
    const TemplateRegistry& templates;
    SessionConfig config{};
    Clock clock = system_clock_ms();
};

struct TranscriptEvent {
    std::uint64_t seq = 0;
    std::int64_t at_ms = 0;
    std::string kind;
    nlohmann::json data;

    friend bool operator==(const TranscriptEvent&, const TranscriptEvent&) = default;
};

inline constexpr int kSessionLogVersion = 1;

inline constexpr std::string_view kLowConfidenceNotice =
    "Low confidence: none of the candidate conditions was confirmed by your answers. "
    "The closest match from the first search is described below.\n\n";

// ---------------------------------------------------------------------------
// JSON forms

inline nlohmann::json candidate_json(const ScoredCondition& c, const ConditionGraph* graph = nullptr) {
    nlohmann::json j{{"id", c.condition_id}, {"score", c.score}, {"via", to_string(c.via)}};
    if (graph) j["name"] = graph->node(c.condition_id).name;
    return j;
}

inline ScoredCondition candidate_from_json(const nlohmann::json& j) {
    return {j.at("id").get<std::string>(), j.at("score").get<double>(),
            j.at("via").get<std::string>() == "direct" ? Via::DirectMatch : Via::NeighborExpansion};
}

inline nlohmann::json question_json(const ClarifyingQuestion& q) {
    return {{"id", q.id}, {"text", q.text}, {"conditions", q.origin_ids}};
}

inline ClarifyingQuestion question_from_json(const nlohmann::json& j) {
    return {j.at("id").get<std::string>(), j.at("text").get<std::string>(),
            j.at("conditions").get<std::vector<std::string>>()};
}

inline nlohmann::json response_json(const UserResponse& r) {
    nlohmann::json j{{"question_id", r.question_id}, {"timestamp_ms", r.timestamp_ms}};
    j["answer"] = r.answer ? nlohmann::json(*r.answer) : nlohmann::json(nullptr);
    return j;
}

inline UserResponse response_from_json(const nlohmann::json& j) {
    UserResponse r{j.at("question_id").get<std::string>(), std::nullopt, j.at("timestamp_ms").get<std::int64_t>()};
    if (!j.at("answer").is_null()) r.answer = j.at("answer").get<std::string>();
    return r;
}

inline nlohmann::json verdict_json(const LikelihoodVerdict& v) {
    return {{"condition", v.condition_id}, {"likelihood", v.likelihood}, {"rationale", v.rationale}, {"kept", v.kept}};
}

inline LikelihoodVerdict verdict_from_json(const nlohmann::json& j) {
    return {j.at("condition").get<std::string>(), j.at("likelihood").get<double>(),
            j.at("rationale").get<std::string>(), j.at("kept").get<bool>()};
}

template <class T, class F>
nlohmann::json json_list(const std::vector<T>& items, F&& f) {
    auto arr = nlohmann::json::array();
    for (const auto& item : items) arr.push_back(f(item));
    return arr;
}

/// One user's pass through the pipeline: query, Stage-1, clarifying questions,
/// Stage-2, answer, follow-ups. Every user message and every LM exchange is
/// appended to an ordered event log.
///
/// Operations are transactional: on failure the session keeps its previous
/// state, but the events produced so far and an "error" event are still
/// logged. Not thread-safe; callers serialize access per session.
class Session {
public:
    static Session start(std::string id, QueryInput query, const SessionContext& ctx) {
        if (trim(query.text).empty()) throw Error(ErrorCode::InvalidQuery, "query text must be non-empty");
        ctx.config.validate();
        Session s(std::move(id));
        s.query_text_ = query.text;
        s.has_image_ = query.image.has_value();
        s.log(ctx, "user_query", {{"text", query.text}, {"has_image", s.has_image_}});

        const HybridEncoding encoding = ctx.encoder.encode_query(query.text, query.image);
        s.candidates_ = stage1_filter(ctx.graph, encoding, ctx.config.retrieval);
        s.log(ctx, "candidates", json_list(s.candidates_.entries, [&](const ScoredCondition& c) {
                  return candidate_json(c, &ctx.graph);
              }));
        s.transition(ctx, SessionState::Stage1Complete);

        const auto& entries = s.candidates_.entries;
        if (entries.size() == 1 && entries.front().score >= ctx.config.shortcut_min_score) {
            s.filtered_ = entries;
            s.transition(ctx, SessionState::Stage2Complete);
            return s;
        }
        const RetrievedContext context{s.query_text_, {}};
        s.questions_ = generate_questions(s.candidates_, ctx.graph, context, s.channel(ctx), ctx.templates,
                                          ctx.config.question_count);
        s.log(ctx, "questions", json_list(s.questions_, question_json));
        s.transition(ctx, SessionState::AwaitingAnswers);
        return s;
    }

    /// Stage-2 filtering on the answers, then the final answer. In the
    /// single-candidate shortcut (state Stage2Complete) `responses` is empty.
    void submit_answers(std::vector<UserResponse> responses, const SessionContext& ctx) {
        transact(ctx, [&](Session& s) {
            if (s.state_ != SessionState::AwaitingAnswers && s.state_ != SessionState::Stage2Complete) {
                throw Error(ErrorCode::WrongState, "answers are not expected in state " + std::string(to_string(s.state_)));
            }
            // One clock read whether or not stamps are needed, so a replay
            // consumes the clock exactly like the original run.
            const std::int64_t now = ctx.clock();
            for (auto& r : responses) {
                if (r.timestamp_ms == 0) r.timestamp_ms = now;
            }
            s.log(ctx, "user_answers", json_list(responses, response_json));
            if (s.state_ == SessionState::AwaitingAnswers) {
                const RetrievedContext context{s.query_text_, match_responses(s.questions_, responses)};
                auto result = stage2_filter(s.candidates_, ctx.graph, context, s.channel(ctx), ctx.templates,
                                            ctx.config.likelihood_threshold);
                s.responses_ = std::move(responses);
                s.verdicts_ = std::move(result.verdicts);
                s.filtered_ = std::move(result.filtered);
                s.log(ctx, "verdicts", json_list(s.verdicts_, verdict_json));
                s.transition(ctx, SessionState::Stage2Complete);
            } else {
                match_responses(s.questions_, responses);
            }
            s.generate_answer(ctx);
        });
    }

    /// Answers a follow-up message from the filtered conditions' graph text and
    /// the conversation so far. No re-retrieval happens.
    std::string follow_up(const std::string& message, const SessionContext& ctx) {
        std::string reply;
        transact(ctx, [&](Session& s) {
            if (s.state_ != SessionState::Answered) {
                throw Error(ErrorCode::WrongState, "follow-up needs an answered session, state is " +
                                                       std::string(to_string(s.state_)));
            }
            if (trim(message).empty()) throw Error(ErrorCode::InvalidQuery, "message must be non-empty");
            s.log(ctx, "user_message", {{"text", message}});
            const std::string prompt = build_follow_up_prompt(ctx.templates, make_bundles(ctx.graph, s.answer_conditions()),
                                                              s.conversation(), message);
            reply = s.channel(ctx).ask(AgentRole::InteractionAgent, prompt).text;
            s.follow_ups_.emplace_back(message, reply);
            s.log(ctx, "reply", {{"text", reply}});
        });
        return reply;
    }

    void close(const SessionContext& ctx) {
        transact(ctx, [&](Session& s) {
            if (s.state_ != SessionState::Answered) {
                throw Error(ErrorCode::WrongState, "only answered sessions can be closed");
            }
            s.transition(ctx, SessionState::Closed);
        });
    }

    const std::string& id() const noexcept { return id_; }
    SessionState state() const noexcept { return state_; }
    const std::string& query_text() const noexcept { return query_text_; }
    bool has_image() const noexcept { return has_image_; }
    const CandidateSet& candidates() const noexcept { return candidates_; }
    const std::vector<ClarifyingQuestion>& questions() const noexcept { return questions_; }
    const std::vector<UserResponse>& responses() const noexcept { return responses_; }
    const std::vector<LikelihoodVerdict>& verdicts() const noexcept { return verdicts_; }
    const std::vector<ScoredCondition>& filtered() const noexcept { return filtered_; }
    const std::string& answer_text() const noexcept { return answer_text_; }
    bool low_confidence() const noexcept { return low_confidence_; }
    const std::vector<std::pair<std::string, std::string>>& follow_ups() const noexcept { return follow_ups_; }
    const std::vector<TranscriptEvent>& events() const noexcept { return events_; }

    // Conditions the answer and follow-ups draw on.
    std::vector<ScoredCondition> answer_conditions() const {
        if (low_confidence_ && filtered_.empty() && !candidates_.empty()) return {candidates_.entries.front()};
        return filtered_;
    }

    /// Versioned snapshot plus the full event log. Image bytes are never stored.
    nlohmann::json to_json() const {
        nlohmann::json j;
        j["version"] = kSessionLogVersion;
        j["session_id"] = id_;
        j["state"] = to_string(state_);
        j["query"] = {{"text", query_text_}, {"has_image", has_image_}};
        j["candidates"] = json_list(candidates_.entries, [](const ScoredCondition& c) { return candidate_json(c); });
        j["questions"] = json_list(questions_, question_json);
        j["responses"] = json_list(responses_, response_json);
        j["verdicts"] = json_list(verdicts_, verdict_json);
        j["filtered"] = json_list(filtered_, [](const ScoredCondition& c) { return candidate_json(c); });
        j["answer_text"] = answer_text_;
        j["low_confidence"] = low_confidence_;
        j["follow_ups"] = json_list(follow_ups_, [](const auto& p) {
            return nlohmann::json{{"message", p.first}, {"reply", p.second}};
        });
        j["events"] = json_list(events_, [](const TranscriptEvent& e) {
            return nlohmann::json{{"seq", e.seq}, {"at_ms", e.at_ms}, {"kind", e.kind}, {"data", e.data}};
        });
        return j;
    }

    static Session from_json(const nlohmann::json& j) {
        try {
            const int version = j.at("version").get<int>();
            if (version != kSessionLogVersion) {
                throw Error(ErrorCode::SchemaVersionMismatch, "session log version " + std::to_string(version));
            }
            Session s(j.at("session_id").get<std::string>());
            s.state_ = session_state_from_string(j.at("state").get<std::string>());
            s.query_text_ = j.at("query").at("text").get<std::string>();
            s.has_image_ = j.at("query").at("has_image").get<bool>();
            for (const auto& c : j.at("candidates")) s.candidates_.entries.push_back(candidate_from_json(c));
            for (const auto& q : j.at("questions")) s.questions_.push_back(question_from_json(q));
            for (const auto& r : j.at("responses")) s.responses_.push_back(response_from_json(r));
            for (const auto& v : j.at("verdicts")) s.verdicts_.push_back(verdict_from_json(v));
            for (const auto& c : j.at("filtered")) s.filtered_.push_back(candidate_from_json(c));
            s.answer_text_ = j.at("answer_text").get<std::string>();
            s.low_confidence_ = j.at("low_confidence").get<bool>();
            for (const auto& f : j.at("follow_ups")) {
                s.follow_ups_.emplace_back(f.at("message").get<std::string>(), f.at("reply").get<std::string>());
            }
            for (const auto& e : j.at("events")) {
                s.events_.push_back({e.at("seq").get<std::uint64_t>(), e.at("at_ms").get<std::int64_t>(),
                                     e.at("kind").get<std::string>(), e.at("data")});
            }
            return s;
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::MalformedInput, std::string("session log: ") + e.what());
        }
    }

    /// Re-drives the user inputs recorded in `log` through the pipeline. With
    /// deterministic backends and the same clock the result equals the
    /// original session. Image bytes are not logged, so a session that had an
    /// image needs it passed back in.
    static Session replay(const nlohmann::json& log, const SessionContext& ctx, std::optional<ImageRef> image = {}) {
        std::optional<Session> s;
        const std::string id = log.at("session_id").get<std::string>();
        for (const auto& e : log.at("events")) {
            const std::string kind = e.at("kind").get<std::string>();
            const auto& data = e.at("data");
            if (kind == "user_query") {
                if (data.at("has_image").get<bool>() && !image) {
                    throw Error(ErrorCode::InvalidArgument, "session had an image; replay needs it supplied");
                }
                s = start(id, {data.at("text").get<std::string>(), image}, ctx);
            } else if (!s) {
                continue;
            } else if (kind == "user_answers") {
                std::vector<UserResponse> responses;
                for (const auto& r : data) responses.push_back(response_from_json(r));
                try {
                    s->submit_answers(std::move(responses), ctx);
                } catch (const Error&) {
                }
            } else if (kind == "user_message") {
                try {
                    s->follow_up(data.at("text").get<std::string>(), ctx);
                } catch (const Error&) {
                }
            } else if (kind == "state" && data.at("to").get<std::string>() == to_string(SessionState::Closed)) {
                s->close(ctx);
            }
        }
        if (!s) throw Error(ErrorCode::MalformedInput, "session log has no user_query event");
        return std::move(*s);
    }

private:
    explicit Session(std::string id) : id_(std::move(id)) {}

    LmChannel channel(const SessionContext& ctx) {
        return LmChannel(ctx.lm, ctx.config.decode, [this, &ctx](const LmRequest& req, const LmResponse& res) {
            log(ctx, "lm_request", {{"role", to_string(req.role)},
                                    {"prompt", req.prompt},
                                    {"max_tokens", req.params.max_tokens},
                                    {"temperature", req.params.temperature}});
            log(ctx, "lm_response", {{"role", to_string(req.role)}, {"backend", res.backend_id}, {"text", res.text}});
        });
    }

    void log(const SessionContext& ctx, std::string kind, nlohmann::json data) {
        events_.push_back({events_.size() + 1, ctx.clock(), std::move(kind), std::move(data)});
    }

    void transition(const SessionContext& ctx, SessionState to) {
        if (!is_legal_transition(state_, to)) {
            throw Error(ErrorCode::WrongState, "illegal transition " + std::string(to_string(state_)) + " -> " +
                                                   std::string(to_string(to)));
        }
        log(ctx, "state", {{"from", to_string(state_)}, {"to", to_string(to)}});
        state_ = to;
    }

    template <class F>
    void transact(const SessionContext& ctx, F&& body) {
        Session next = *this;
        try {
            body(next);
        } catch (const Error& e) {
            // A request refused for the session's state leaves no trace.
            if (e.code() == ErrorCode::WrongState && next.events_.size() == events_.size()) throw;
            for (std::size_t i = events_.size(); i < next.events_.size(); ++i) events_.push_back(next.events_[i]);
            log(ctx, "error", {{"code", to_string(e.code())}, {"message", e.what()}});
            throw;
        }
        *this = std::move(next);
    }

    void generate_answer(const SessionContext& ctx) {
        low_confidence_ = filtered_.empty() && !candidates_.empty();
        const RetrievedContext context{query_text_, match_responses(questions_, responses_)};
        const std::string prompt =
            build_answer_prompt(ctx.templates, make_bundles(ctx.graph, answer_conditions()), context,
                                low_confidence_ ? AnswerMode::LowConfidence : AnswerMode::Confirmed,
                                ctx.config.prompt_engineering);
        const std::string reply = channel(ctx).ask(AgentRole::InteractionAgent, prompt).text;
        answer_text_ = low_confidence_ ? std::string(kLowConfidenceNotice) + reply : reply;
        log(ctx, "answer", {{"text", answer_text_}, {"low_confidence", low_confidence_}});
        transition(ctx, SessionState::Answered);
    }

    // User-visible conversation, used as follow-up context.
    std::string conversation() const {
        std::string out = "Patient: " + query_text_;
        const auto qa = match_responses(questions_, responses_);
        for (const auto& p : qa) {
            out += "\nAssistant: " + p.question + "\nPatient: " + (p.answer ? *p.answer : "(no answer given)");
        }
        out += "\nAssistant: " + answer_text_;
        for (const auto& [message, reply] : follow_ups_) out += "\nPatient: " + message + "\nAssistant: " + reply;
        return out;
    }

    std::string id_;
    SessionState state_ = SessionState::AwaitingInput;
    std::string query_text_;
    bool has_image_ = false;
    CandidateSet candidates_;
    std::vector<ClarifyingQuestion> questions_;
    std::vector<UserResponse> responses_;
    std::vector<LikelihoodVerdict> verdicts_;
    std::vector<ScoredCondition> filtered_;
    std::string answer_text_;
    bool low_confidence_ = false;
    std::vector<std::pair<std::string, std::string>> follow_ups_;
    std::vector<TranscriptEvent> events_;
};

}  // namespace medgrim
