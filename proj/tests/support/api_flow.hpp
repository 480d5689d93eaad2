#pragma once

#include <algorithm>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "medgrim/service.hpp"
#include "session_flow.hpp"

namespace medgrim::testing {

inline std::shared_ptr<const ConditionGraph> shared_derm12() {
    return {&derm12(), [](const ConditionGraph*) {}};
}

inline std::shared_ptr<const EncoderClient> shared_encoder() {
    return {&fixture_encoder(), [](const EncoderClient*) {}};
}

/// A service over derm12 with sequential ids and a logical clock.
struct ApiHarness {
    std::shared_ptr<ScriptedBackend> script = ScriptedBackend::from_file(fixture_path("derm12_lm.json").string());
    std::unique_ptr<SessionService> service;

    explicit ApiHarness(SessionService::Options opts = {},
                        std::shared_ptr<const EncoderClient> encoder = shared_encoder(),
                        std::shared_ptr<const LmClient> lm = nullptr) {
        if (!lm) lm = std::make_shared<LmClient>(script);
        service = std::make_unique<SessionService>(shared_derm12(), std::move(encoder), std::move(lm),
                                                   TemplateRegistry::defaults(), std::move(opts), logical_clock(),
                                                   sequential_session_ids("s"));
    }

    ApiResponse get(const std::string& path) { return service->handle("GET", path, ""); }
    ApiResponse post(const std::string& path, const nlohmann::json& body) {
        return service->handle("POST", path, body.dump());
    }

    std::size_t reasoning_calls() const {
        const auto reqs = script->requests();
        return static_cast<std::size_t>(std::count_if(reqs.begin(), reqs.end(), [](const LmRequest& r) {
            return r.role == AgentRole::ReasoningAgent;
        }));
    }
};

inline nlohmann::json answers_body(const nlohmann::json& questions) {
    auto list = nlohmann::json::array();
    for (std::size_t i = 0; i < questions.size(); ++i) {
        const auto& t = kGoldenAnswers[i % kGoldenAnswers.size()];
        nlohmann::json a{{"question_id", questions[i].at("id")}};
        if (t) {
            a["text"] = *t;
        } else {
            a["skip"] = true;
        }
        list.push_back(a);
    }
    return {{"answers", list}};
}

// Runs the documented flow and records every exchange.
inline nlohmann::json api_flow(ApiHarness& h) {
    auto log = nlohmann::json::array();
    const auto record = [&](const std::string& method, const std::string& path, const nlohmann::json& request,
                            const ApiResponse& r) {
        nlohmann::json entry{{"method", method}, {"path", path}, {"status", r.status}, {"response", r.body}};
        if (!request.is_null()) entry["request"] = request;
        log.push_back(entry);
        return r;
    };
    record("GET", "/v1/health", nullptr, h.get("/v1/health"));
    record("GET", "/v1/graph/conditions", nullptr, h.get("/v1/graph/conditions"));
    const nlohmann::json create{{"text", kGoldenQuery}, {"image_base64", base64_encode("synthetic photo bytes")}};
    const auto created = record("POST", "/v1/sessions", create, h.post("/v1/sessions", create));
    const std::string id = created.body.at("session_id");
    const auto answers = answers_body(created.body.at("questions"));
    record("POST", "/v1/sessions/" + id + "/answers", answers, h.post("/v1/sessions/" + id + "/answers", answers));
    const nlohmann::json message{{"text", kGoldenFollowUp}};
    record("POST", "/v1/sessions/" + id + "/message", message, h.post("/v1/sessions/" + id + "/message", message));
    record("GET", "/v1/sessions/" + id, nullptr, h.get("/v1/sessions/" + id));
    record("POST", "/v1/sessions/" + id + "/answers", answers, h.post("/v1/sessions/" + id + "/answers", answers));
    return log;
}

inline std::string golden_api_json() {
    ApiHarness h;
    return api_flow(h).dump(2) + "\n";
}

}  // namespace medgrim::testing
