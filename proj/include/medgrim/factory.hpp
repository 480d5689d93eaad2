#pragma once

#include <cstdlib>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "medgrim/encoder.hpp"
#include "medgrim/http_encoder.hpp"
#include "medgrim/lm_client.hpp"

namespace medgrim {

inline constexpr std::size_t kDefaultTestDimension = 32;

/// Encoder from a spec string:
///   test:SEED[:DIM]   deterministic hashing encoder
///   table:PATH        precomputed embedding table
///   http(s)://...     remote encoder service
inline std::shared_ptr<EncoderClient> make_encoder(const std::string& spec,
                                                   std::size_t default_dimension = kDefaultTestDimension) {
    if (spec.starts_with("test:")) {
        const std::string rest = spec.substr(5);
        const auto colon = rest.find(':');
        try {
            std::size_t used = 0;
            const std::uint64_t seed = std::stoull(rest.substr(0, colon), &used);
            if (used != rest.substr(0, colon).size()) throw std::invalid_argument("seed");
            std::size_t dim = default_dimension;
            if (colon != std::string::npos) {
                dim = std::stoul(rest.substr(colon + 1), &used);
                if (used != rest.size() - colon - 1) throw std::invalid_argument("dimension");
            }
            return std::make_shared<TestEncoder>(seed, dim);
        } catch (const std::logic_error&) {
            throw Error(ErrorCode::InvalidArgument, "bad test encoder spec '" + spec + "', expected test:SEED[:DIM]");
        }
    }
    if (spec.starts_with("table:")) return std::make_shared<TableEncoder>(TableEncoder::from_file(spec.substr(6)));
    if (spec.starts_with("http://") || spec.starts_with("https://")) {
        HttpEncoderClient::Options opts;
        opts.base_url = spec;
        opts.dimension = 0;
        return std::make_shared<HttpEncoderClient>(std::move(opts));
    }
    throw Error(ErrorCode::InvalidArgument, "unknown encoder spec '" + spec + "'");
}

struct LmEndpoint {
    std::string url;
    std::string model;
    std::string api_key_env;
};

/// A scripted file binds every role to one scripted backend; otherwise each
/// role gets an HTTP chat backend from `endpoints`.
inline LmClient make_lm_client(const std::optional<std::string>& scripted_path,
                               const std::map<AgentRole, LmEndpoint>& endpoints) {
    if (scripted_path) return LmClient(ScriptedBackend::from_file(*scripted_path));
    LmClient client;
    for (auto role : {AgentRole::QuestionAgent, AgentRole::ReasoningAgent, AgentRole::InteractionAgent}) {
        auto it = endpoints.find(role);
        if (it == endpoints.end() || it->second.url.empty()) {
            throw Error(ErrorCode::InvalidArgument,
                        "no language model endpoint configured for the " + std::string(to_string(role)) + " agent");
        }
        HttpChatBackend::Options opts;
        opts.base_url = it->second.url;
        opts.model = it->second.model;
        opts.api_key_env = it->second.api_key_env;
        client.bind(role, std::make_shared<HttpChatBackend>(std::move(opts)));
    }
    return client;
}

}  // namespace medgrim
