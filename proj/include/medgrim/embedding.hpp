#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "medgrim/error.hpp"

namespace medgrim {

// Fixed-length real vector. Entries are always finite; unit norm is only
// guaranteed for vectors produced by normalized() or by an EncoderClient.
class EmbeddingVector {
public:
    EmbeddingVector() = default;

    explicit EmbeddingVector(std::vector<double> values) : values_(std::move(values)) {
        if (values_.empty()) {
            throw Error(ErrorCode::DimensionMismatch, "embedding must have positive dimension");
        }
        for (double v : values_) {
            if (!std::isfinite(v)) {
                throw Error(ErrorCode::InvalidArgument, "embedding entries must be finite");
            }
        }
    }

    std::size_t dimension() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }
    std::span<const double> values() const noexcept { return values_; }
    double operator[](std::size_t i) const { return values_[i]; }

    double norm() const noexcept {
        double sum = 0.0;
        for (double v : values_) sum += v * v;
        return std::sqrt(sum);
    }

    EmbeddingVector normalized() const {
        const double n = norm();
        if (!(n > 0.0)) throw Error(ErrorCode::ZeroVector, "cannot normalize a zero vector");
        std::vector<double> out(values_.size());
        std::transform(values_.begin(), values_.end(), out.begin(), [n](double v) { return v / n; });
        return EmbeddingVector(std::move(out));
    }

    friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;

private:
    std::vector<double> values_;
};

/// Cosine similarity with explicit norms, clamped to [-1, 1].
inline double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.dimension() != b.dimension()) {
        throw Error(ErrorCode::DimensionMismatch,
                    "cosine of " + std::to_string(a.dimension()) + "-d and " +
                        std::to_string(b.dimension()) + "-d vectors");
    }
    double dot = 0.0;
    double aa = 0.0;
    double bb = 0.0;
    for (std::size_t i = 0; i < a.dimension(); ++i) {
        dot += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (!(aa > 0.0) || !(bb > 0.0)) throw Error(ErrorCode::ZeroVector, "cosine with a zero vector");
    const double c = dot / (std::sqrt(aa) * std::sqrt(bb));
    return std::clamp(c, -1.0, 1.0);
}

/// Mean of the inputs, re-normalized to unit length.
inline EmbeddingVector mean_pool(std::span<const EmbeddingVector> vectors) {
    if (vectors.empty()) throw Error(ErrorCode::EmptySequence, "mean_pool of no vectors");
    const std::size_t dim = vectors.front().dimension();
    std::vector<double> sum(dim, 0.0);
    for (const auto& v : vectors) {
        if (v.dimension() != dim) throw Error(ErrorCode::DimensionMismatch, "mean_pool inputs differ in dimension");
        for (std::size_t i = 0; i < dim; ++i) sum[i] += v[i];
    }
    const double count = static_cast<double>(vectors.size());
    for (double& s : sum) s /= count;
    EmbeddingVector mean(std::move(sum));
    if (mean.norm() < 1e-9) throw Error(ErrorCode::DegenerateMean, "mean of inputs is (near) zero");
    return mean.normalized();
}

inline void check_lambda(double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw Error(ErrorCode::InvalidLambda, "lambda must lie in [0, 1], got " + std::to_string(lambda));
    }
}

namespace detail {
// 160 significand bits hold 1 - lambda and every product of two doubles
// exactly; the final conversion to double is the only rounding that matters.
using WideFloat = boost::multiprecision::number<
    boost::multiprecision::cpp_bin_float<160, boost::multiprecision::digit_base_2>,
    boost::multiprecision::et_off>;
}  // namespace detail

/// lambda * s_text + (1 - lambda) * s_mm evaluated wide and rounded once, so the
/// result equals lambda * (s_text - s_mm) + s_mm evaluated the same way, and is
/// exactly s_text at lambda = 1 and s_mm at lambda = 0.
inline double blend_scores(double s_text, double s_mm, double lambda) {
    check_lambda(lambda);
    const detail::WideFloat l(lambda);
    const detail::WideFloat wide = l * detail::WideFloat(s_text) + (detail::WideFloat(1) - l) * detail::WideFloat(s_mm);
    return static_cast<double>(wide);
}

/// Opaque image handle: a filesystem path (ingestion) or inline bytes (queries).
/// base_dir only tells file-reading encoders where a relative path lives; it is
/// not part of the image's identity.
struct ImageRef {
    enum class Kind { Path, Inline };

    Kind kind = Kind::Path;
    std::string data;
    std::string base_dir;

    static ImageRef path(std::string p, std::string base = {}) { return {Kind::Path, std::move(p), std::move(base)}; }
    static ImageRef inline_bytes(std::string bytes) { return {Kind::Inline, std::move(bytes), {}}; }

    std::string resolved_path() const {
        if (base_dir.empty() || data.empty() || data.front() == '/') return data;
        return base_dir + "/" + data;
    }

    friend bool operator==(const ImageRef&, const ImageRef&) = default;
};

// Query encodings. mm_vec is absent for text-only queries.
struct HybridEncoding {
    EmbeddingVector text_vec;
    std::optional<EmbeddingVector> mm_vec;
};

/// Hybrid similarity between a query encoding and a node's two embeddings.
/// A text-only query falls back to the text cosine alone.
inline double hybrid_score(const HybridEncoding& query, const EmbeddingVector& node_text,
                           const EmbeddingVector& node_mm, double lambda) {
    check_lambda(lambda);
    const double s_text = cosine(query.text_vec, node_text);
    if (!query.mm_vec) return s_text;
    const double s_mm = cosine(*query.mm_vec, node_mm);
    return blend_scores(s_text, s_mm, lambda);
}

}  // namespace medgrim
