#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "medgrim/factory.hpp"
#include "medgrim/http_encoder.hpp"
#include "medgrim/persist.hpp"
#include "medgrim/session.hpp"

namespace medgrim {

/// Service configuration. Every field can be set from a MEDGRIM_* environment
/// variable, see from_env().
struct ApiConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string graph_path;
    std::string template_dir;
    // Encoder spec (see make_encoder); empty uses the encoder recorded in the graph.
    std::string encoder;
    std::map<AgentRole, LmEndpoint> lm;
    std::optional<std::string> scripted_path;
    SessionConfig session{};
    std::vector<std::string> cors_allowlist;
    std::string session_dir;
    bool debug = false;

    static ApiConfig from_env() {
        ApiConfig c;
        const auto env = [](const char* name) -> std::optional<std::string> {
            const char* v = std::getenv(name);
            if (!v || !*v) return std::nullopt;
            return std::string(v);
        };
        const auto number = [](const std::string& name, const std::string& v) {
            try {
                std::size_t used = 0;
                const double d = std::stod(v, &used);
                if (used != v.size()) throw std::invalid_argument(name);
                return d;
            } catch (const std::logic_error&) {
                throw Error(ErrorCode::InvalidArgument, name + " is not a number: '" + v + "'");
            }
        };
        if (auto v = env("MEDGRIM_HOST")) c.host = *v;
        if (auto v = env("MEDGRIM_PORT")) c.port = static_cast<int>(number("MEDGRIM_PORT", *v));
        if (auto v = env("MEDGRIM_GRAPH")) c.graph_path = *v;
        if (auto v = env("MEDGRIM_TEMPLATES")) c.template_dir = *v;
        if (auto v = env("MEDGRIM_ENCODER")) c.encoder = *v;
        if (auto v = env("MEDGRIM_ENCODER_URL")) c.encoder = *v;
        if (auto v = env("MEDGRIM_SCRIPTED")) c.scripted_path = *v;
        for (auto role : {AgentRole::QuestionAgent, AgentRole::ReasoningAgent, AgentRole::InteractionAgent}) {
            std::string prefix = "MEDGRIM_" + std::string(to_string(role)) + "_";
            for (auto& ch : prefix) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
            LmEndpoint ep;
            if (auto v = env((prefix + "URL").c_str())) ep.url = *v;
            if (auto v = env((prefix + "MODEL").c_str())) ep.model = *v;
            if (auto v = env((prefix + "API_KEY_ENV").c_str())) ep.api_key_env = *v;
            if (!ep.url.empty()) c.lm[role] = ep;
        }
        if (auto v = env("MEDGRIM_LAMBDA")) c.session.retrieval.lambda = number("MEDGRIM_LAMBDA", *v);
        if (auto v = env("MEDGRIM_RELATIVE_THRESHOLD")) {
            c.session.retrieval.relative_threshold = number("MEDGRIM_RELATIVE_THRESHOLD", *v);
        }
        if (auto v = env("MEDGRIM_LIKELIHOOD_THRESHOLD")) {
            c.session.likelihood_threshold = number("MEDGRIM_LIKELIHOOD_THRESHOLD", *v);
        }
        if (auto v = env("MEDGRIM_QUESTION_COUNT")) {
            c.session.question_count = static_cast<int>(number("MEDGRIM_QUESTION_COUNT", *v));
        }
        if (auto v = env("MEDGRIM_CORS")) {
            std::stringstream ss(*v);
            std::string item;
            while (std::getline(ss, item, ',')) {
                if (!trim(item).empty()) c.cors_allowlist.push_back(trim(item));
            }
        }
        if (auto v = env("MEDGRIM_SESSION_DIR")) c.session_dir = *v;
        if (auto v = env("MEDGRIM_DEBUG")) c.debug = (*v == "1" || *v == "true");
        return c;
    }

    void validate() const {
        session.validate();
        if (port < 0 || port > 65535) throw Error(ErrorCode::InvalidArgument, "port out of range");
        if (graph_path.empty() || !std::filesystem::exists(graph_path)) {
            throw Error(ErrorCode::InvalidArgument, "graph file '" + graph_path + "' does not exist");
        }
        if (!template_dir.empty() && !std::filesystem::is_directory(template_dir)) {
            throw Error(ErrorCode::InvalidArgument, "template directory '" + template_dir + "' does not exist");
        }
        if (scripted_path && !std::filesystem::exists(*scripted_path)) {
            throw Error(ErrorCode::InvalidArgument, "scripted backend file '" + *scripted_path + "' does not exist");
        }
        if (!session_dir.empty() && !std::filesystem::is_directory(session_dir)) {
            throw Error(ErrorCode::InvalidArgument, "session directory '" + session_dir + "' does not exist");
        }
    }
};

struct ApiResponse {
    int status = 200;
    nlohmann::json body;
};

inline int http_status(ErrorCode code) {
    switch (code) {
        case ErrorCode::UnknownSession: return 404;
        case ErrorCode::WrongState: return 409;
        case ErrorCode::EncoderUnavailable:
        case ErrorCode::BackendUnavailable:
        case ErrorCode::ScriptExhausted:
        case ErrorCode::UnparseableLikelihood:
        case ErrorCode::UnparseableQuestions:
        case ErrorCode::ContextOverflow:
        case ErrorCode::DimensionMismatch: return 502;
        case ErrorCode::InvalidArgument:
        case ErrorCode::InvalidQuery:
        case ErrorCode::InvalidLambda:
        case ErrorCode::MalformedInput:
        case ErrorCode::IncompleteAnswers: return 400;
        default: return 500;
    }
}

inline std::string failing_backend(ErrorCode code) {
    switch (code) {
        case ErrorCode::EncoderUnavailable:
        case ErrorCode::DimensionMismatch: return "encoder";
        case ErrorCode::BackendUnavailable:
        case ErrorCode::ScriptExhausted:
        case ErrorCode::UnparseableLikelihood:
        case ErrorCode::UnparseableQuestions:
        case ErrorCode::ContextOverflow: return "language_model";
        default: return "";
    }
}

inline ApiResponse error_response(int status, std::string_view code, const std::string& message,
                                  const std::string& backend = "") {
    nlohmann::json err{{"code", code}, {"message", message}};
    if (!backend.empty()) err["backend"] = backend;
    return {status, {{"error", err}}};
}

inline std::function<std::string()> random_session_ids() {
    return [] {
        static thread_local std::mt19937_64 rng{std::random_device{}()};
        std::ostringstream os;
        os << std::hex << rng() << rng();
        return os.str();
    };
}

inline std::function<std::string()> sequential_session_ids(std::string prefix = "s") {
    auto n = std::make_shared<std::atomic<int>>(0);
    return [n, prefix] {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%06d", ++*n);
        return prefix + "-" + buf;
    };
}

/// JSON-over-HTTP front end for sessions. handle() is the whole API and is
/// usable without a socket; bind() mounts it on an httplib server.
///
/// Requests for different sessions run concurrently; requests for one session
/// are serialized by a per-session mutex.
class SessionService {
public:
    struct Options {
        SessionConfig session{};
        bool debug = false;
        std::string session_dir;
        std::vector<std::string> cors_allowlist;
    };

    SessionService(std::shared_ptr<const ConditionGraph> graph, std::shared_ptr<const EncoderClient> encoder,
                   std::shared_ptr<const LmClient> lm, TemplateRegistry templates, Options options,
                   Clock clock = system_clock_ms(), std::function<std::string()> ids = random_session_ids())
        : graph_(std::move(graph)),
          encoder_(std::move(encoder)),
          lm_(std::move(lm)),
          templates_(std::move(templates)),
          options_(std::move(options)),
          clock_(std::move(clock)),
          ids_(std::move(ids)) {
        options_.session.validate();
    }

    ApiResponse handle(const std::string& method, const std::string& path, const std::string& body) {
        try {
            const auto parts = split_path(path);
            if (parts.size() < 2 || parts[0] != "v1") return not_found(path);
            if (parts.size() == 2 && parts[1] == "health") return method_guard(method, "GET", [&] { return health(); });
            if (parts.size() == 3 && parts[1] == "graph" && parts[2] == "conditions") {
                return method_guard(method, "GET", [&] { return conditions(); });
            }
            if (parts[1] != "sessions") return not_found(path);
            if (parts.size() == 2) return method_guard(method, "POST", [&] { return create_session(parse_body(body)); });
            if (!valid_session_id(parts[2])) return error_response(404, "UnknownSession", "no session '" + parts[2] + "'");
            if (parts.size() == 3) return method_guard(method, "GET", [&] { return get_session(parts[2]); });
            if (parts.size() == 4 && parts[3] == "answers") {
                return method_guard(method, "POST", [&] { return submit_answers(parts[2], parse_body(body)); });
            }
            if (parts.size() == 4 && parts[3] == "message") {
                return method_guard(method, "POST", [&] { return post_message(parts[2], parse_body(body)); });
            }
            return not_found(path);
        } catch (const Error& e) {
            return error_response(http_status(e.code()), to_string(e.code()), e.what(), failing_backend(e.code()));
        } catch (const nlohmann::json::exception& e) {
            return error_response(400, "InvalidArgument", std::string("bad request body: ") + e.what());
        } catch (const std::exception& e) {
            return error_response(500, "Internal", e.what());
        }
    }

    void bind(httplib::Server& server) {
        const auto dispatch = [this](const httplib::Request& req, httplib::Response& res) {
            const ApiResponse r = handle(req.method, req.path, req.body);
            res.status = r.status;
            res.set_content(r.body.dump(), "application/json");
        };
        server.Get(R"(/v1/.*)", dispatch);
        server.Post(R"(/v1/.*)", dispatch);
        server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
        server.set_post_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
            const auto origin = req.get_header_value("Origin");
            if (origin.empty()) return;
            for (const auto& allowed : options_.cors_allowlist) {
                if (allowed == "*" || allowed == origin) {
                    res.set_header("Access-Control-Allow-Origin", allowed == "*" ? "*" : origin);
                    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
                    res.set_header("Access-Control-Allow-Headers", "Content-Type, Authorization");
                    res.set_header("Vary", "Origin");
                    return;
                }
            }
        });
    }

    std::size_t session_count() const {
        std::shared_lock lock(sessions_mutex_);
        return sessions_.size();
    }

private:
    struct Slot {
        explicit Slot(Session s) : session(std::move(s)) {}
        std::mutex mutex;
        Session session;
    };

    SessionContext context() const { return {*graph_, *encoder_, *lm_, templates_, options_.session, clock_}; }

    static std::vector<std::string> split_path(const std::string& path) {
        std::vector<std::string> parts;
        std::stringstream ss(path.substr(0, path.find('?')));
        std::string item;
        while (std::getline(ss, item, '/')) {
            if (!item.empty()) parts.push_back(item);
        }
        return parts;
    }

    static bool valid_session_id(const std::string& id) {
        if (id.empty() || id.size() > 128) return false;
        return std::all_of(id.begin(), id.end(), [](unsigned char c) { return std::isalnum(c) || c == '-' || c == '_'; });
    }

    static nlohmann::json parse_body(const std::string& body) {
        auto j = nlohmann::json::parse(body.empty() ? "{}" : body);
        if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, "request body must be a JSON object");
        return j;
    }

    template <class F>
    static ApiResponse method_guard(const std::string& method, const char* allowed, F&& f) {
        if (method != allowed) return error_response(405, "MethodNotAllowed", "use " + std::string(allowed));
        return f();
    }

    static ApiResponse not_found(const std::string& path) {
        return error_response(404, "NotFound", "no route for " + path);
    }

    ApiResponse health() const {
        const bool encoder_ok = encoder_->healthy();
        const bool lm_ok = lm_->healthy();
        return {200,
                {{"status", encoder_ok && lm_ok ? "ok" : "degraded"},
                 {"graph_nodes", graph_->size()},
                 {"encoder_ok", encoder_ok},
                 {"lm_ok", lm_ok}}};
    }

    ApiResponse conditions() const {
        auto list = nlohmann::json::array();
        for (const auto& [id, node] : graph_->nodes()) {
            list.push_back({{"id", id},
                            {"name", node.name},
                            {"definition", node.definition},
                            {"neighbors", graph_->neighbors(id)}});
        }
        return {200, {{"conditions", list}}};
    }

    ApiResponse create_session(const nlohmann::json& body) {
        if (!body.contains("text") || !body.at("text").is_string()) {
            throw Error(ErrorCode::InvalidQuery, "field 'text' (string) is required");
        }
        QueryInput query{body.at("text").get<std::string>(), std::nullopt};
        if (body.contains("image_base64") && !body.at("image_base64").is_null()) {
            query.image = ImageRef::inline_bytes(base64_decode(body.at("image_base64").get<std::string>()));
        }
        const SessionContext ctx = context();
        std::string id = ids_();
        Session session = Session::start(id, std::move(query), ctx);
        nlohmann::json out{{"session_id", id},
                           {"state", to_string(session.state())},
                           {"candidates", candidates_json(session.candidates().entries)},
                           {"questions", json_list(session.questions(), question_json)}};
        persist(session);
        {
            std::unique_lock lock(sessions_mutex_);
            sessions_.emplace(id, std::make_shared<Slot>(std::move(session)));
        }
        return {201, out};
    }

    ApiResponse submit_answers(const std::string& id, const nlohmann::json& body) {
        if (!body.contains("answers") || !body.at("answers").is_array()) {
            throw Error(ErrorCode::InvalidArgument, "field 'answers' (array) is required");
        }
        std::vector<UserResponse> responses;
        for (const auto& a : body.at("answers")) {
            if (!a.is_object() || !a.contains("question_id") || !a.at("question_id").is_string()) {
                throw Error(ErrorCode::InvalidArgument, "every answer needs a string 'question_id'");
            }
            UserResponse r{a.at("question_id").get<std::string>(), std::nullopt, 0};
            const bool skip = a.contains("skip") && a.at("skip").is_boolean() && a.at("skip").get<bool>();
            if (!skip) {
                if (!a.contains("text") || !a.at("text").is_string()) {
                    throw Error(ErrorCode::InvalidArgument, "answer to '" + r.question_id + "' needs 'text' or 'skip': true");
                }
                r.answer = a.at("text").get<std::string>();
            }
            responses.push_back(std::move(r));
        }
        auto slot = find(id);
        std::lock_guard lock(slot->mutex);
        try {
            slot->session.submit_answers(std::move(responses), context());
        } catch (...) {
            persist(slot->session);
            throw;
        }
        persist(slot->session);
        const Session& s = slot->session;
        auto verdicts = nlohmann::json::array();
        for (const auto& v : s.verdicts()) {
            auto j = verdict_json(v);
            j["name"] = graph_->node(v.condition_id).name;
            verdicts.push_back(std::move(j));
        }
        return {200,
                {{"state", to_string(s.state())},
                 {"verdicts", verdicts},
                 {"filtered", candidates_json(s.filtered())},
                 {"answer_text", s.answer_text()},
                 {"low_confidence", s.low_confidence()}}};
    }

    ApiResponse post_message(const std::string& id, const nlohmann::json& body) {
        if (!body.contains("text") || !body.at("text").is_string()) {
            throw Error(ErrorCode::InvalidQuery, "field 'text' (string) is required");
        }
        auto slot = find(id);
        std::lock_guard lock(slot->mutex);
        std::string reply;
        try {
            reply = slot->session.follow_up(body.at("text").get<std::string>(), context());
        } catch (...) {
            persist(slot->session);
            throw;
        }
        persist(slot->session);
        return {200, {{"reply_text", reply}}};
    }

    ApiResponse get_session(const std::string& id) {
        auto slot = find(id);
        std::lock_guard lock(slot->mutex);
        nlohmann::json j = slot->session.to_json();
        for (auto& c : j["candidates"]) c["name"] = graph_->node(c.at("id").get<std::string>()).name;
        for (auto& c : j["filtered"]) c["name"] = graph_->node(c.at("id").get<std::string>()).name;
        if (!options_.debug) {
            for (auto& e : j["events"]) {
                if (e.at("kind") == "lm_request") e["data"].erase("prompt");
            }
        }
        return {200, j};
    }

    nlohmann::json candidates_json(const std::vector<ScoredCondition>& entries) const {
        return json_list(entries, [this](const ScoredCondition& c) { return candidate_json(c, graph_.get()); });
    }

    std::shared_ptr<Slot> find(const std::string& id) {
        {
            std::shared_lock lock(sessions_mutex_);
            auto it = sessions_.find(id);
            if (it != sessions_.end()) return it->second;
        }
        if (!options_.session_dir.empty()) {
            const auto path = std::filesystem::path(options_.session_dir) / (id + ".json");
            if (std::filesystem::exists(path)) {
                std::ifstream in(path);
                auto slot = std::make_shared<Slot>(Session::from_json(nlohmann::json::parse(in)));
                std::unique_lock lock(sessions_mutex_);
                return sessions_.emplace(id, std::move(slot)).first->second;
            }
        }
        throw Error(ErrorCode::UnknownSession, "no session '" + id + "'");
    }

    void persist(const Session& s) const {
        if (options_.session_dir.empty()) return;
        const auto dir = std::filesystem::path(options_.session_dir);
        const auto tmp = dir / (s.id() + ".json.tmp");
        {
            std::ofstream out(tmp, std::ios::trunc);
            out << s.to_json().dump(2) << '\n';
        }
        std::filesystem::rename(tmp, dir / (s.id() + ".json"));
    }

    std::shared_ptr<const ConditionGraph> graph_;
    std::shared_ptr<const EncoderClient> encoder_;
    std::shared_ptr<const LmClient> lm_;
    TemplateRegistry templates_;
    Options options_;
    Clock clock_;
    std::function<std::string()> ids_;

    mutable std::shared_mutex sessions_mutex_;
    std::map<std::string, std::shared_ptr<Slot>> sessions_;
};

/// Loads everything ApiConfig points at and assembles a service.
inline std::unique_ptr<SessionService> make_service(const ApiConfig& config) {
    config.validate();
    auto graph = std::make_shared<const ConditionGraph>(load_file(config.graph_path));
    std::string encoder_spec = config.encoder;
    if (encoder_spec.empty()) {
        auto it = graph->metadata().find("encoder");
        if (it == graph->metadata().end()) throw Error(ErrorCode::InvalidArgument, "no encoder configured");
        encoder_spec = it->second;
    }
    auto encoder = make_encoder(encoder_spec, graph->dimension());
    auto lm = std::make_shared<const LmClient>(make_lm_client(config.scripted_path, config.lm));
    auto templates = config.template_dir.empty() ? TemplateRegistry::defaults() : TemplateRegistry::load(config.template_dir);
    SessionService::Options opts{config.session, config.debug, config.session_dir, config.cors_allowlist};
    return std::make_unique<SessionService>(std::move(graph), std::move(encoder), std::move(lm), std::move(templates),
                                            std::move(opts));
}

}  // namespace medgrim
