#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "medgrim/csv.hpp"
#include "medgrim/embedding.hpp"
#include "medgrim/encoder.hpp"
#include "medgrim/error.hpp"

namespace medgrim {

enum class InfoCategory { Symptoms = 0, Treatments = 1, Prevention = 2 };

inline constexpr std::array<InfoCategory, 3> kInfoCategories = {InfoCategory::Symptoms, InfoCategory::Treatments,
                                                                 InfoCategory::Prevention};

constexpr std::string_view to_string(InfoCategory c) {
    switch (c) {
        case InfoCategory::Symptoms: return "symptoms";
        case InfoCategory::Treatments: return "treatments";
        case InfoCategory::Prevention: return "prevention";
    }
    return "unknown";
}

inline InfoCategory info_category_from_string(std::string_view s) {
    for (auto c : kInfoCategories) {
        if (to_string(c) == s) return c;
    }
    throw Error(ErrorCode::MalformedInput, "unknown info category '" + std::string(s) + "'");
}

struct InfoNode {
    std::string id;
    InfoCategory category = InfoCategory::Symptoms;
    std::string body;
    std::string parent_id;

    friend bool operator==(const InfoNode&, const InfoNode&) = default;
};

struct ConditionNode {
    std::string id;
    std::string name;
    std::string definition;
    EmbeddingVector text_embedding;
    EmbeddingVector mm_embedding;
    // Indexed by InfoCategory.
    std::array<std::string, 3> info_children;

    const std::string& info_id(InfoCategory c) const { return info_children[static_cast<std::size_t>(c)]; }

    friend bool operator==(const ConditionNode&, const ConditionNode&) = default;
};

// Undirected; stored with a < b.
struct SimilarityEdge {
    std::string a;
    std::string b;
    double weight = 0.0;

    friend bool operator==(const SimilarityEdge&, const SimilarityEdge&) = default;
};

inline std::string info_node_id(std::string_view condition_id, InfoCategory c) {
    return std::string(condition_id) + "/" + std::string(to_string(c));
}

/// Immutable condition graph. Once built it is only read, so one instance can
/// serve any number of concurrent sessions.
class ConditionGraph {
public:
    class Builder;

    ConditionGraph() = default;

    std::size_t dimension() const noexcept { return dimension_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    bool empty() const noexcept { return nodes_.empty(); }

    // Ordered by id.
    const std::map<std::string, ConditionNode>& nodes() const noexcept { return nodes_; }
    const std::map<std::string, InfoNode>& info_nodes() const noexcept { return info_; }
    const std::vector<SimilarityEdge>& edges() const noexcept { return edges_; }
    const std::map<std::string, std::set<std::string>>& adjacency() const noexcept { return adjacency_; }

    // Free-form provenance, e.g. which encoder produced the embeddings.
    const std::map<std::string, std::string>& metadata() const noexcept { return metadata_; }

    bool contains(std::string_view id) const { return nodes_.find(std::string(id)) != nodes_.end(); }

    const ConditionNode& node(std::string_view id) const {
        auto it = nodes_.find(std::string(id));
        if (it == nodes_.end()) throw Error(ErrorCode::UnknownConditionId, "no condition '" + std::string(id) + "'");
        return it->second;
    }

    const InfoNode& info(const ConditionNode& node, InfoCategory c) const { return info_.at(node.info_id(c)); }
    const std::string& info_text(std::string_view id, InfoCategory c) const { return info(node(id), c).body; }

    const std::set<std::string>& neighbors(std::string_view id) const {
        auto it = adjacency_.find(std::string(id));
        if (it == adjacency_.end()) throw Error(ErrorCode::UnknownConditionId, "no condition '" + std::string(id) + "'");
        return it->second;
    }

    friend bool operator==(const ConditionGraph& x, const ConditionGraph& y) {
        return x.dimension_ == y.dimension_ && x.nodes_ == y.nodes_ && x.info_ == y.info_ && x.edges_ == y.edges_ &&
               x.adjacency_ == y.adjacency_ && x.metadata_ == y.metadata_;
    }

private:
    std::size_t dimension_ = 0;
    std::map<std::string, ConditionNode> nodes_;
    std::map<std::string, InfoNode> info_;
    std::vector<SimilarityEdge> edges_;
    std::map<std::string, std::set<std::string>> adjacency_;
    std::map<std::string, std::string> metadata_;
};

/// Adjacent condition ids of `id`, never including `id` itself.
inline const std::set<std::string>& neighbors(const ConditionGraph& graph, std::string_view id) {
    return graph.neighbors(id);
}

/// Assembles and validates a ConditionGraph. build() checks every structural
/// invariant, so a graph that exists is a valid graph.
class ConditionGraph::Builder {
public:
    explicit Builder(std::size_t dimension) { graph_.dimension_ = dimension; }

    Builder& add_condition(std::string id, std::string name, std::string definition, EmbeddingVector text_embedding,
                           EmbeddingVector mm_embedding, std::string symptoms, std::string treatments,
                           std::string prevention) {
        if (id.empty()) throw Error(ErrorCode::MalformedInput, "condition id must be non-empty");
        if (graph_.nodes_.count(id)) throw Error(ErrorCode::DuplicateConditionName, "duplicate condition id '" + id + "'");
        ConditionNode node{id, std::move(name), std::move(definition), std::move(text_embedding),
                           std::move(mm_embedding), {}};
        std::array<std::string, 3> bodies{std::move(symptoms), std::move(treatments), std::move(prevention)};
        for (auto c : kInfoCategories) {
            const auto idx = static_cast<std::size_t>(c);
            node.info_children[idx] = info_node_id(id, c);
            graph_.info_.emplace(node.info_children[idx], InfoNode{node.info_children[idx], c, std::move(bodies[idx]), id});
        }
        graph_.nodes_.emplace(id, std::move(node));
        return *this;
    }

    // Inserts a raw node, used by the persistence layer.
    Builder& add_node(ConditionNode node, std::vector<InfoNode> infos) {
        if (graph_.nodes_.count(node.id)) {
            throw Error(ErrorCode::DuplicateConditionName, "duplicate condition id '" + node.id + "'");
        }
        for (auto& info : infos) {
            std::string id = info.id;
            if (!graph_.info_.emplace(id, std::move(info)).second) {
                throw Error(ErrorCode::MalformedInput, "duplicate info node '" + id + "'");
            }
        }
        std::string id = node.id;
        graph_.nodes_.emplace(std::move(id), std::move(node));
        return *this;
    }

    /// Weight defaults to the cosine between the two text embeddings.
    Builder& add_edge(const std::string& a, const std::string& b, std::optional<double> weight = std::nullopt) {
        pending_edges_.push_back({a, b, weight});
        return *this;
    }

    Builder& set_metadata(std::string key, std::string value) {
        graph_.metadata_.insert_or_assign(std::move(key), std::move(value));
        return *this;
    }

    ConditionGraph build() && {
        if (graph_.dimension_ == 0 && !graph_.nodes_.empty()) {
            throw Error(ErrorCode::DimensionMismatch, "graph dimension must be positive");
        }
        for (auto& [id, node] : graph_.nodes_) {
            for (const EmbeddingVector* e : {&node.text_embedding, &node.mm_embedding}) {
                if (e->dimension() != graph_.dimension_) {
                    throw Error(ErrorCode::DimensionMismatch, "condition '" + id + "' has a " +
                                                                  std::to_string(e->dimension()) +
                                                                  "-d embedding in a " +
                                                                  std::to_string(graph_.dimension_) + "-d graph");
                }
                if (std::abs(e->norm() - 1.0) > 1e-6) {
                    throw Error(ErrorCode::InvalidArgument, "condition '" + id + "' has a non-normalized embedding");
                }
            }
            for (auto c : kInfoCategories) {
                auto it = graph_.info_.find(node.info_id(c));
                if (it == graph_.info_.end() || it->second.category != c || it->second.parent_id != id) {
                    throw Error(ErrorCode::MalformedInput, "condition '" + id + "' lacks a " +
                                                               std::string(to_string(c)) + " info node");
                }
                if (it->second.body.empty()) {
                    throw Error(ErrorCode::MalformedInput, "info node '" + it->first + "' has an empty body");
                }
            }
            graph_.adjacency_[id];
        }
        if (graph_.info_.size() != 3 * graph_.nodes_.size()) {
            throw Error(ErrorCode::MalformedInput, "orphan info nodes present");
        }

        std::map<std::pair<std::string, std::string>, double> unique;
        for (auto& pe : pending_edges_) {
            if (pe.a == pe.b) throw Error(ErrorCode::MalformedInput, "self-edge on '" + pe.a + "'");
            const auto& na = graph_.node(pe.a);
            const auto& nb = graph_.node(pe.b);
            const double w = pe.weight ? *pe.weight : cosine(na.text_embedding, nb.text_embedding);
            if (!(w >= -1.0 && w <= 1.0)) throw Error(ErrorCode::MalformedInput, "edge weight outside [-1, 1]");
            auto key = pe.a < pe.b ? std::make_pair(pe.a, pe.b) : std::make_pair(pe.b, pe.a);
            unique.insert_or_assign(std::move(key), w);
        }
        graph_.edges_.clear();
        for (auto& [key, w] : unique) {
            graph_.edges_.push_back({key.first, key.second, w});
            graph_.adjacency_[key.first].insert(key.second);
            graph_.adjacency_[key.second].insert(key.first);
        }
        return std::move(graph_);
    }

private:
    struct PendingEdge {
        std::string a;
        std::string b;
        std::optional<double> weight;
    };

    ConditionGraph graph_;
    std::vector<PendingEdge> pending_edges_;
};

// ---------------------------------------------------------------------------
// Ingestion

struct ConditionRecord {
    std::string name;
    std::string definition;
    std::string symptoms;
    std::string clinical_treatment;
    std::string home_treatment;
    std::string prevention;
    std::vector<std::string> image_paths;
};

// Similarity edges link conditions whose text embeddings have cosine >= threshold.
// With top_k set, each condition instead links to its k most similar peers and
// the threshold is ignored.
struct EdgePolicy {
    double threshold = 0.80;
    std::optional<std::size_t> top_k;
};

struct IngestOptions {
    EdgePolicy edge_policy{};
    // Directory relative image paths are resolved against by file-reading encoders.
    std::string image_base_dir;
    std::map<std::string, std::string> metadata;
};

inline constexpr std::string_view kNotRecorded = "No information recorded.";

/// "Atopic Eczema (adult)" -> "atopic-eczema-adult"
inline std::string slugify(std::string_view name) {
    std::string out;
    bool dash = false;
    for (unsigned char c : name) {
        if (std::isalnum(c) || c >= 0x80) {
            if (dash && !out.empty()) out.push_back('-');
            dash = false;
            out.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
        } else {
            dash = true;
        }
    }
    return out;
}

inline std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

// Text the condition's text embedding is computed from.
inline std::string condition_description(const ConditionRecord& r) {
    std::string text = r.name + "\n" + r.definition;
    if (!r.symptoms.empty()) text += "\n" + r.symptoms;
    return text;
}

inline std::string treatments_body(const ConditionRecord& r) {
    const auto or_default = [](const std::string& s) { return s.empty() ? std::string(kNotRecorded) : s; };
    return "Clinical treatment:\n" + or_default(r.clinical_treatment) + "\n\nHome treatment:\n" +
           or_default(r.home_treatment);
}

struct EdgeCandidate {
    std::string id;
    const EmbeddingVector* text_embedding;
};

// Candidates must be ordered by id; the result is ordered by (a, b).
inline std::vector<SimilarityEdge> select_edges(const std::vector<EdgeCandidate>& nodes, const EdgePolicy& policy) {
    const std::size_t n = nodes.size();
    std::vector<std::vector<double>> sim(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            sim[i][j] = sim[j][i] = cosine(*nodes[i].text_embedding, *nodes[j].text_embedding);
        }
    }
    std::set<std::pair<std::size_t, std::size_t>> chosen;
    if (policy.top_k) {
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<std::size_t> others;
            for (std::size_t j = 0; j < n; ++j) {
                if (j != i) others.push_back(j);
            }
            std::stable_sort(others.begin(), others.end(),
                             [&](std::size_t x, std::size_t y) { return sim[i][x] > sim[i][y]; });
            for (std::size_t r = 0; r < std::min(*policy.top_k, others.size()); ++r) {
                chosen.insert(std::minmax(i, others[r]));
            }
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                if (sim[i][j] >= policy.threshold) chosen.insert({i, j});
            }
        }
    }
    std::vector<SimilarityEdge> out;
    for (auto [i, j] : chosen) out.push_back({nodes[i].id, nodes[j].id, sim[i][j]});
    return out;
}

/// Builds a graph from condition records: one condition node and three info
/// nodes per record, multimodal embedding = normalized mean of the per-image
/// encodings (the text embedding when a record has no images), then edges per
/// `options.edge_policy`.
inline ConditionGraph ingest(const std::vector<ConditionRecord>& records, const EncoderClient& encoder,
                             const IngestOptions& options = {}) {
    if (records.empty()) throw Error(ErrorCode::EmptyRecordSet, "no condition records to ingest");
    if (!(options.edge_policy.threshold >= -1.0 && options.edge_policy.threshold <= 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "edge threshold must lie in [-1, 1]");
    }
    if (options.edge_policy.top_k && *options.edge_policy.top_k == 0) {
        throw Error(ErrorCode::InvalidArgument, "top_k must be positive");
    }
    struct Encoded {
        const ConditionRecord* record;
        EmbeddingVector text;
        EmbeddingVector mm;
    };
    std::map<std::string, Encoded> encoded;
    for (std::size_t row = 0; row < records.size(); ++row) {
        const auto& r = records[row];
        if (trim(r.name).empty() || trim(r.definition).empty()) {
            throw Error(ErrorCode::MalformedInput, "record " + std::to_string(row + 1) + " lacks a name or definition");
        }
        std::string id = slugify(r.name);
        if (id.empty()) throw Error(ErrorCode::MalformedInput, "record name '" + r.name + "' has no usable characters");
        if (encoded.count(id)) throw Error(ErrorCode::DuplicateConditionName, "duplicate condition '" + r.name + "'");

        EmbeddingVector text = encoder.encode_text(condition_description(r));
        EmbeddingVector mm = text;
        if (!r.image_paths.empty()) {
            std::vector<EmbeddingVector> per_image;
            per_image.reserve(r.image_paths.size());
            for (const auto& p : r.image_paths) {
                per_image.push_back(encoder.encode_multimodal(r.name, ImageRef::path(p, options.image_base_dir)));
            }
            mm = mean_pool(per_image);
        }
        encoded.emplace(std::move(id), Encoded{&r, std::move(text), std::move(mm)});
    }

    std::vector<EdgeCandidate> candidates;
    for (const auto& [id, e] : encoded) candidates.push_back({id, &e.text});
    const auto edges = select_edges(candidates, options.edge_policy);

    const auto or_default = [](const std::string& s) { return s.empty() ? std::string(kNotRecorded) : s; };
    ConditionGraph::Builder builder(encoder.dimension());
    for (auto& [id, e] : encoded) {
        const auto& r = *e.record;
        builder.add_condition(id, r.name, r.definition, e.text, e.mm, or_default(r.symptoms), treatments_body(r),
                              or_default(r.prevention));
    }
    for (const auto& edge : edges) builder.add_edge(edge.a, edge.b, edge.weight);
    for (const auto& [k, v] : options.metadata) builder.set_metadata(k, v);
    return std::move(builder).build();
}

inline constexpr std::array<std::string_view, 7> kCsvColumns = {
    "name", "definition", "symptoms", "clinical_treatment", "home_treatment", "prevention", "image_paths"};

/// Parses the condition CSV. Every column in kCsvColumns must be present in the
/// header (any order); image_paths is ';'-separated.
inline std::vector<ConditionRecord> parse_condition_csv(std::istream& in) {
    const auto rows = read_csv(in);
    if (rows.empty()) throw Error(ErrorCode::EmptyRecordSet, "CSV has no header");
    std::unordered_map<std::string, std::size_t> column;
    for (std::size_t i = 0; i < rows[0].size(); ++i) column.emplace(trim(rows[0][i]), i);
    std::array<std::size_t, kCsvColumns.size()> index{};
    for (std::size_t k = 0; k < kCsvColumns.size(); ++k) {
        auto it = column.find(std::string(kCsvColumns[k]));
        if (it == column.end()) throw Error(ErrorCode::MalformedInput, "CSV header lacks column '" + std::string(kCsvColumns[k]) + "'");
        index[k] = it->second;
    }
    std::vector<ConditionRecord> records;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.size() != rows[0].size()) {
            throw Error(ErrorCode::MalformedInput, "CSV row " + std::to_string(r + 1) + " has " +
                                                       std::to_string(row.size()) + " fields, header has " +
                                                       std::to_string(rows[0].size()));
        }
        auto field = [&](std::size_t k) { return trim(row[index[k]]); };
        ConditionRecord rec{field(0), field(1), field(2), field(3), field(4), field(5), {}};
        const std::string images = field(6);
        std::size_t start = 0;
        while (start <= images.size()) {
            const auto end = std::min(images.find(';', start), images.size());
            std::string p = trim(std::string_view(images).substr(start, end - start));
            if (!p.empty()) rec.image_paths.push_back(std::move(p));
            start = end + 1;
        }
        records.push_back(std::move(rec));
    }
    if (records.empty()) throw Error(ErrorCode::EmptyRecordSet, "CSV has a header but no records");
    return records;
}

inline std::vector<ConditionRecord> load_condition_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::MalformedInput, "cannot open " + path);
    return parse_condition_csv(in);
}

}  // namespace medgrim
