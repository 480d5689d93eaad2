#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "medgrim/embedding.hpp"
#include "medgrim/error.hpp"

namespace medgrim {

// Seam for the multimodal encoder. Implementations must be deterministic for
// identical inputs, return unit-norm vectors, and be safe to share between
// threads.
class EncoderClient {
public:
    virtual ~EncoderClient() = default;

    virtual EmbeddingVector encode_text(std::string_view text) const = 0;
    virtual EmbeddingVector encode_multimodal(std::string_view text, const ImageRef& image) const = 0;
    virtual std::size_t dimension() const = 0;
    virtual bool healthy() const { return true; }

    HybridEncoding encode_query(std::string_view text, const std::optional<ImageRef>& image) const {
        HybridEncoding enc{encode_text(text), std::nullopt};
        if (image) enc.mm_vec = encode_multimodal(text, *image);
        return enc;
    }
};

namespace detail {

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL) {
    std::uint64_t h = basis;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Lower-cased ASCII alphanumeric runs; bytes >= 0x80 are kept inside tokens.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (unsigned char c : text) {
        if (std::isalnum(c) || c >= 0x80) {
            current.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

}  // namespace detail

/// Offline deterministic encoder: every token hashes to a pseudo-random dense
/// direction, a text is the normalized sum of its token directions. Texts that
/// share words therefore land close together, which is all the pipeline needs
/// from an encoder in tests and demos.
class TestEncoder final : public EncoderClient {
public:
    TestEncoder(std::uint64_t seed, std::size_t dimension) : seed_(seed), dimension_(dimension) {
        if (dimension < 2) throw Error(ErrorCode::InvalidArgument, "test encoder dimension must be >= 2");
    }

    EmbeddingVector encode_text(std::string_view text) const override {
        return bag_of_tokens("t:", detail::tokenize(text), text);
    }

    EmbeddingVector encode_multimodal(std::string_view text, const ImageRef& image) const override {
        const EmbeddingVector text_part = encode_text(text);
        const EmbeddingVector image_part =
            image.kind == ImageRef::Kind::Path
                ? bag_of_tokens("i:", detail::tokenize(image.data), image.data)
                : bag_of_tokens("b:", {std::to_string(detail::fnv1a(image.data))}, image.data);
        std::vector<double> sum(dimension_);
        for (std::size_t i = 0; i < dimension_; ++i) sum[i] = text_part[i] + image_part[i];
        EmbeddingVector joint(std::move(sum));
        if (joint.norm() < 1e-12) return image_part;
        return joint.normalized();
    }

    std::size_t dimension() const override { return dimension_; }
    std::uint64_t seed() const noexcept { return seed_; }

private:
    void accumulate(std::vector<double>& sum, std::string_view key) const {
        std::uint64_t state = detail::fnv1a(key, detail::fnv1a(std::to_string(seed_)));
        for (double& s : sum) {
            const double unit = static_cast<double>(detail::splitmix64(state) >> 11) * 0x1.0p-53;
            s += 2.0 * unit - 1.0;
        }
    }

    EmbeddingVector bag_of_tokens(std::string_view prefix, const std::vector<std::string>& tokens,
                                  std::string_view raw) const {
        std::vector<double> sum(dimension_, 0.0);
        if (tokens.empty()) {
            accumulate(sum, std::string(prefix) + "raw:" + std::string(raw));
        } else {
            for (const auto& t : tokens) accumulate(sum, std::string(prefix) + t);
        }
        EmbeddingVector v(std::move(sum));
        if (v.norm() < 1e-12) {
            std::vector<double> fallback(dimension_, 0.0);
            accumulate(fallback, std::string(prefix) + "raw:" + std::string(raw));
            return EmbeddingVector(std::move(fallback)).normalized();
        }
        return v.normalized();
    }

    std::uint64_t seed_;
    std::size_t dimension_;
};

/// Lookup table of precomputed embeddings, e.g. exported once from the real
/// encoder service. File format:
///   {"dimension": d, "entries": [{"text": "...", "image": "path"?, "vector": [...]}]}
/// Inline images are keyed by their raw bytes. Unknown inputs raise
/// EncoderUnavailable rather than inventing a vector.
class TableEncoder final : public EncoderClient {
public:
    explicit TableEncoder(const nlohmann::json& doc) {
        try {
            dimension_ = doc.at("dimension").get<std::size_t>();
            for (const auto& entry : doc.at("entries")) {
                EmbeddingVector v(entry.at("vector").get<std::vector<double>>());
                if (v.dimension() != dimension_) {
                    throw Error(ErrorCode::DimensionMismatch, "table entry dimension differs from header");
                }
                std::string key = entry.at("text").get<std::string>();
                if (entry.contains("image")) key += '\x1f' + entry.at("image").get<std::string>();
                table_.insert_or_assign(std::move(key), v.normalized());
            }
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::MalformedInput, std::string("embedding table: ") + e.what());
        }
        if (dimension_ < 1) throw Error(ErrorCode::MalformedInput, "embedding table dimension must be positive");
    }

    static TableEncoder from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw Error(ErrorCode::EncoderUnavailable, "cannot open embedding table " + path);
        nlohmann::json doc;
        try {
            in >> doc;
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::MalformedInput, "embedding table " + path + ": " + e.what());
        }
        return TableEncoder(doc);
    }

    EmbeddingVector encode_text(std::string_view text) const override { return lookup(std::string(text)); }

    EmbeddingVector encode_multimodal(std::string_view text, const ImageRef& image) const override {
        return lookup(std::string(text) + '\x1f' + image.data);
    }

    std::size_t dimension() const override { return dimension_; }

private:
    EmbeddingVector lookup(const std::string& key) const {
        auto it = table_.find(key);
        if (it == table_.end()) {
            std::string shown = key;
            std::replace(shown.begin(), shown.end(), '\x1f', '|');
            throw Error(ErrorCode::EncoderUnavailable, "no precomputed embedding for \"" + shown + "\"");
        }
        return it->second;
    }

    std::size_t dimension_ = 0;
    std::map<std::string, EmbeddingVector> table_;
};

}  // namespace medgrim
