#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include <boost/beast/core/detail/base64.hpp>
#include <nlohmann/json.hpp>

#include "medgrim/encoder.hpp"
#include "medgrim/http_transport.hpp"

namespace medgrim {

inline std::string base64_encode(std::string_view bytes) {
    namespace b64 = boost::beast::detail::base64;
    std::string out(b64::encoded_size(bytes.size()), '\0');
    out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
    return out;
}

inline std::string base64_decode(std::string_view text) {
    namespace b64 = boost::beast::detail::base64;
    std::string out(b64::decoded_size(text.size()), '\0');
    const auto [written, read] = b64::decode(out.data(), text.data(), text.size());
    // decode() stops at padding, so a valid payload is consumed up to its '='s.
    std::size_t end = text.size();
    while (end > 0 && text.size() - end < 2 && text[end - 1] == '=') --end;
    if (read != end || (text.size() - end) != (4 - end % 4) % 4) throw Error(ErrorCode::InvalidArgument, "invalid base64 payload");
    out.resize(written);
    return out;
}

/// Client for a remote encoder service.
///   POST {base}/encode  {"text": "...", "image_base64": "..."?}  ->  {"vector": [...]}
/// Vectors are validated and normalized on arrival. A dimension of 0 adopts
/// whatever the first response carries.
class HttpEncoderClient final : public EncoderClient {
public:
    struct Options {
        std::string base_url;
        std::size_t dimension = 0;
        std::chrono::milliseconds timeout{30000};
        RetryPolicy retry{};
    };

    explicit HttpEncoderClient(Options options) : options_(std::move(options)), dimension_(options_.dimension) {
        split_base_url(options_.base_url);
    }

    EmbeddingVector encode_text(std::string_view text) const override {
        return request(nlohmann::json{{"text", std::string(text)}});
    }

    EmbeddingVector encode_multimodal(std::string_view text, const ImageRef& image) const override {
        std::string bytes;
        if (image.kind == ImageRef::Kind::Path) {
            std::ifstream in(image.resolved_path(), std::ios::binary);
            if (!in) throw Error(ErrorCode::EncoderUnavailable, "cannot read image " + image.resolved_path());
            bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
        } else {
            bytes = image.data;
        }
        return request(nlohmann::json{{"text", std::string(text)}, {"image_base64", base64_encode(bytes)}});
    }

    std::size_t dimension() const override { return dimension_.load(); }

    bool healthy() const override { return get_ok(options_.base_url, "/health", std::chrono::milliseconds(2000)); }

private:
    EmbeddingVector request(const nlohmann::json& payload) const {
        const HttpResult res =
            post_json(options_.base_url, "/encode", payload.dump(), {}, options_.timeout, options_.retry);
        if (!res.ok()) {
            throw Error(ErrorCode::EncoderUnavailable,
                        "encoder at " + options_.base_url + " failed after " + std::to_string(res.attempts) +
                            " attempt(s): " + res.describe());
        }
        std::vector<double> values;
        try {
            values = nlohmann::json::parse(res.body).at("vector").get<std::vector<double>>();
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::EncoderUnavailable, std::string("malformed encoder response: ") + e.what());
        }
        EmbeddingVector v(std::move(values));
        std::size_t expected = 0;
        if (!dimension_.compare_exchange_strong(expected, v.dimension()) && expected != v.dimension()) {
            throw Error(ErrorCode::DimensionMismatch, "encoder returned " + std::to_string(v.dimension()) +
                                                          "-d vector, expected " + std::to_string(expected));
        }
        // Already-unit vectors pass through untouched so results match a local encoder.
        if (std::abs(v.norm() - 1.0) <= 1e-15) return v;
        return v.normalized();
    }

    Options options_;
    mutable std::atomic<std::size_t> dimension_;
};

}  // namespace medgrim
