#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "medgrim/error.hpp"
#include "medgrim/http_transport.hpp"

namespace medgrim {

enum class AgentRole { QuestionAgent, ReasoningAgent, InteractionAgent };

inline constexpr std::string_view to_string(AgentRole role) {
    switch (role) {
        case AgentRole::QuestionAgent: return "question";
        case AgentRole::ReasoningAgent: return "reasoning";
        case AgentRole::InteractionAgent: return "interaction";
    }
    return "unknown";
}

inline AgentRole agent_role_from_string(std::string_view s) {
    for (auto r : {AgentRole::QuestionAgent, AgentRole::ReasoningAgent, AgentRole::InteractionAgent}) {
        if (to_string(r) == s) return r;
    }
    throw Error(ErrorCode::MalformedInput, "unknown agent role '" + std::string(s) + "'");
}

struct DecodeParams {
    int max_tokens = 512;
    double temperature = 0.2;
};

struct LmRequest {
    AgentRole role = AgentRole::InteractionAgent;
    std::string prompt;
    DecodeParams params{};
};

struct LmResponse {
    std::string text;
    std::chrono::milliseconds latency{0};
    std::string backend_id;
};

class LmBackend {
public:
    virtual ~LmBackend() = default;
    virtual LmResponse complete(const LmRequest& request) = 0;
    virtual std::string id() const = 0;
    virtual std::size_t context_limit_chars() const { return 64 * 1024; }
    virtual bool healthy() const { return true; }
};

/// Test double: the first rule whose role and substrings all match answers.
/// Requests matching no rule fail with ScriptExhausted instead of improvising.
class ScriptedBackend final : public LmBackend {
public:
    struct Rule {
        std::optional<AgentRole> role;
        std::vector<std::string> contains;
        std::string response;
        // Unset means unlimited.
        std::optional<int> max_uses;
    };

    ScriptedBackend() = default;
    explicit ScriptedBackend(std::vector<Rule> rules) : rules_(std::move(rules)), uses_(rules_.size(), 0) {}

    /// [{"role": "reasoning"?, "contains": "text" | ["a", "b"]?, "response": "...", "max_uses": n?}, ...]
    static std::shared_ptr<ScriptedBackend> from_json(const nlohmann::json& doc) {
        std::vector<Rule> rules;
        try {
            for (const auto& r : doc) {
                Rule rule;
                if (r.contains("role")) rule.role = agent_role_from_string(r.at("role").get<std::string>());
                if (r.contains("contains")) {
                    const auto& c = r.at("contains");
                    if (c.is_string()) {
                        rule.contains.push_back(c.get<std::string>());
                    } else {
                        rule.contains = c.get<std::vector<std::string>>();
                    }
                }
                rule.response = r.at("response").get<std::string>();
                if (r.contains("max_uses")) rule.max_uses = r.at("max_uses").get<int>();
                rules.push_back(std::move(rule));
            }
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::MalformedInput, std::string("scripted backend file: ") + e.what());
        }
        return std::make_shared<ScriptedBackend>(std::move(rules));
    }

    static std::shared_ptr<ScriptedBackend> from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw Error(ErrorCode::MalformedInput, "cannot open scripted backend file " + path);
        nlohmann::json doc;
        try {
            in >> doc;
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::MalformedInput, "scripted backend file " + path + ": " + e.what());
        }
        return from_json(doc);
    }

    LmResponse complete(const LmRequest& request) override {
        std::lock_guard lock(mutex_);
        log_.push_back(request);
        for (std::size_t i = 0; i < rules_.size(); ++i) {
            const Rule& rule = rules_[i];
            if (rule.role && *rule.role != request.role) continue;
            if (rule.max_uses && uses_[i] >= *rule.max_uses) continue;
            bool all = true;
            for (const auto& needle : rule.contains) {
                if (request.prompt.find(needle) == std::string::npos) {
                    all = false;
                    break;
                }
            }
            if (!all) continue;
            ++uses_[i];
            return {rule.response, std::chrono::milliseconds(0), id()};
        }
        throw Error(ErrorCode::ScriptExhausted,
                    "no scripted response for " + std::string(to_string(request.role)) + " prompt beginning \"" +
                        request.prompt.substr(0, 80) + "\"");
    }

    std::string id() const override { return "scripted"; }

    std::vector<LmRequest> requests() const {
        std::lock_guard lock(mutex_);
        return log_;
    }

private:
    std::vector<Rule> rules_;
    std::vector<int> uses_;
    std::vector<LmRequest> log_;
    mutable std::mutex mutex_;
};

/// OpenAI-style chat completion endpoint:
///   POST {base_url}/chat/completions  ->  choices[0].message.content
/// base_url normally ends in /v1.
class HttpChatBackend final : public LmBackend {
public:
    struct Options {
        std::string base_url;
        std::string model;
        // Name of the environment variable holding the API key, if any.
        std::string api_key_env;
        std::chrono::milliseconds timeout{120000};
        std::size_t context_limit_chars = 64 * 1024;
        RetryPolicy retry{};
    };

    explicit HttpChatBackend(Options options) : options_(std::move(options)) { split_base_url(options_.base_url); }

    LmResponse complete(const LmRequest& request) override {
        nlohmann::json body{{"model", options_.model},
                            {"messages", nlohmann::json::array({{{"role", "user"}, {"content", request.prompt}}})},
                            {"max_tokens", request.params.max_tokens},
                            {"temperature", request.params.temperature},
                            {"stream", false}};
        httplib::Headers headers;
        if (!options_.api_key_env.empty()) {
            if (const char* key = std::getenv(options_.api_key_env.c_str()); key && *key) {
                headers.emplace("Authorization", std::string("Bearer ") + key);
            }
        }
        const auto start = std::chrono::steady_clock::now();
        const HttpResult res =
            post_json(options_.base_url, "/chat/completions", body.dump(), headers, options_.timeout, options_.retry);
        const auto latency =
            std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
        if (!res.ok()) {
            throw Error(ErrorCode::BackendUnavailable, id() + " (" + std::string(to_string(request.role)) +
                                                           ") failed after " + std::to_string(res.attempts) +
                                                           " attempt(s): " + res.describe());
        }
        try {
            const auto doc = nlohmann::json::parse(res.body);
            return {doc.at("choices").at(0).at("message").at("content").get<std::string>(), latency, id()};
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::BackendUnavailable, id() + " returned a malformed completion: " + e.what());
        }
    }

    std::string id() const override { return options_.model + "@" + options_.base_url; }
    std::size_t context_limit_chars() const override { return options_.context_limit_chars; }
    bool healthy() const override { return get_ok(options_.base_url, "/models", std::chrono::milliseconds(2000)); }

private:
    Options options_;
};

/// Binds each agent role to one backend.
class LmClient {
public:
    LmClient() = default;

    // Same backend for every role.
    explicit LmClient(std::shared_ptr<LmBackend> all) {
        for (auto r : {AgentRole::QuestionAgent, AgentRole::ReasoningAgent, AgentRole::InteractionAgent}) bind(r, all);
    }

    LmClient& bind(AgentRole role, std::shared_ptr<LmBackend> backend) {
        backends_.insert_or_assign(role, std::move(backend));
        return *this;
    }

    LmBackend& backend(AgentRole role) const {
        auto it = backends_.find(role);
        if (it == backends_.end() || !it->second) {
            throw Error(ErrorCode::BackendUnavailable, "no backend bound for " + std::string(to_string(role)) + " agent");
        }
        return *it->second;
    }

    /// Returns backend text verbatim. Reasoning requests always decode at
    /// temperature 0 because their output is parsed.
    LmResponse complete(AgentRole role, std::string prompt, DecodeParams params = {}) const {
        if (prompt.empty()) throw Error(ErrorCode::InvalidArgument, "empty prompt");
        LmBackend& b = backend(role);
        if (prompt.size() > b.context_limit_chars()) {
            throw Error(ErrorCode::ContextOverflow, "prompt of " + std::to_string(prompt.size()) +
                                                        " chars exceeds " + b.id() + " limit of " +
                                                        std::to_string(b.context_limit_chars()));
        }
        if (role == AgentRole::ReasoningAgent) params.temperature = 0.0;
        return b.complete(LmRequest{role, std::move(prompt), params});
    }

    bool healthy() const {
        for (const auto& [role, b] : backends_) {
            if (!b || !b->healthy()) return false;
        }
        return backends_.size() == 3;
    }

private:
    std::map<AgentRole, std::shared_ptr<LmBackend>> backends_;
};

// ---------------------------------------------------------------------------
// Structured output parsing

/// Every balanced {...} span in `text`, outermost first, string-literal aware.
inline std::vector<std::string_view> json_object_spans(std::string_view text, char open = '{', char close = '}') {
    std::vector<std::string_view> spans;
    std::size_t i = 0;
    while ((i = text.find(open, i)) != std::string_view::npos) {
        int depth = 0;
        bool in_string = false;
        std::size_t j = i;
        for (; j < text.size(); ++j) {
            const char c = text[j];
            if (in_string) {
                if (c == '\\') {
                    ++j;
                } else if (c == '"') {
                    in_string = false;
                }
            } else if (c == '"') {
                in_string = true;
            } else if (c == open) {
                ++depth;
            } else if (c == close && --depth == 0) {
                break;
            }
        }
        if (j >= text.size()) break;
        spans.push_back(text.substr(i, j - i + 1));
        i = j + 1;
    }
    return spans;
}

struct LikelihoodReply {
    double likelihood = 0.0;
    std::string rationale;
};

/// Reads {"likelihood": x, "rationale": "..."?} from a reasoning reply. An
/// integer x is a percentage in [0, 100], as the prompt asks; a fractional x is
/// a probability in [0, 1] or a percentage in (1, 100]. Surrounding prose is
/// tolerated; anything else is rejected.
inline LikelihoodReply parse_likelihood_reply(std::string_view raw) {
    for (auto span : json_object_spans(raw)) {
        const auto doc = nlohmann::json::parse(span, nullptr, false);
        if (doc.is_discarded() || !doc.is_object() || !doc.contains("likelihood")) continue;
        const auto& value = doc.at("likelihood");
        if (!value.is_number()) break;
        double x = value.get<double>();
        if (!std::isfinite(x) || x < 0.0 || x > 100.0) {
            throw Error(ErrorCode::UnparseableLikelihood, "likelihood out of range: " + value.dump());
        }
        if (value.is_number_integer() || x > 1.0) x /= 100.0;
        LikelihoodReply reply{x, {}};
        if (doc.contains("rationale") && doc.at("rationale").is_string()) {
            reply.rationale = doc.at("rationale").get<std::string>();
        }
        return reply;
    }
    throw Error(ErrorCode::UnparseableLikelihood,
                "no {\"likelihood\": <number>} object in reply \"" + std::string(raw.substr(0, 120)) + "\"");
}

inline double parse_likelihood(std::string_view raw) { return parse_likelihood_reply(raw).likelihood; }

}  // namespace medgrim
