#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include <boost/crc.hpp>
#include <nlohmann/json.hpp>

#include "medgrim/graph.hpp"

// Graph file layout (all integers little-endian):
//
//   magic        8 bytes  "MGRGRAPH"
//   header_len   u32
//   header       header_len bytes of UTF-8 JSON
//                {"schema_version", "dimension", "nodes": [...], "edges": [...], "metadata": {...}}
//   block        float64 values: for each node in header order its text then
//                multimodal embedding, then one weight per edge in header order
//   crc32        u32 over every preceding byte
//
// Header nodes and edges are written in id order, so identical graphs always
// serialize to identical bytes.

namespace medgrim {

inline constexpr int kGraphSchemaVersion = 1;
inline constexpr std::string_view kGraphMagic = "MGRGRAPH";

inline std::uint32_t crc32(std::string_view bytes) {
    boost::crc_32_type crc;
    crc.process_bytes(bytes.data(), bytes.size());
    return crc.checksum();
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(std::string_view in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

inline void put_f64(std::string& out, double d) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline double get_f64(std::string_view in, std::size_t at) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace detail

inline std::string save(const ConditionGraph& graph) {
    nlohmann::json header;
    header["schema_version"] = kGraphSchemaVersion;
    header["dimension"] = graph.dimension();
    header["metadata"] = graph.metadata();
    auto& nodes = header["nodes"] = nlohmann::json::array();
    std::string block;
    for (const auto& [id, node] : graph.nodes()) {
        nlohmann::json info;
        for (auto c : kInfoCategories) info[std::string(to_string(c))] = graph.info(node, c).body;
        nodes.push_back({{"id", id}, {"name", node.name}, {"definition", node.definition}, {"info", info}});
        for (double v : node.text_embedding.values()) detail::put_f64(block, v);
        for (double v : node.mm_embedding.values()) detail::put_f64(block, v);
    }
    auto& edges = header["edges"] = nlohmann::json::array();
    for (const auto& e : graph.edges()) {
        edges.push_back({{"a", e.a}, {"b", e.b}});
        detail::put_f64(block, e.weight);
    }
    const std::string header_text = header.dump();

    std::string out(kGraphMagic);
    detail::put_u32(out, static_cast<std::uint32_t>(header_text.size()));
    out += header_text;
    out += block;
    detail::put_u32(out, crc32(out));
    return out;
}

inline ConditionGraph load(std::string_view bytes) {
    const std::size_t fixed = kGraphMagic.size() + 4 + 4;
    if (bytes.size() < fixed || bytes.substr(0, kGraphMagic.size()) != kGraphMagic) {
        throw Error(ErrorCode::CorruptPayload, "not a graph file");
    }
    const std::string_view body = bytes.substr(0, bytes.size() - 4);
    if (crc32(body) != detail::get_u32(bytes, bytes.size() - 4)) {
        throw Error(ErrorCode::CorruptPayload, "checksum mismatch");
    }
    const std::uint32_t header_len = detail::get_u32(bytes, kGraphMagic.size());
    const std::size_t block_start = kGraphMagic.size() + 4 + static_cast<std::size_t>(header_len);
    if (block_start > body.size()) throw Error(ErrorCode::CorruptPayload, "header length exceeds payload");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(body.substr(kGraphMagic.size() + 4, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::CorruptPayload, std::string("unreadable header: ") + e.what());
    }
    try {
        const int version = header.at("schema_version").get<int>();
        if (version != kGraphSchemaVersion) {
            throw Error(ErrorCode::SchemaVersionMismatch, "graph schema version " + std::to_string(version) +
                                                              ", this build reads " +
                                                              std::to_string(kGraphSchemaVersion));
        }
        const auto dim = header.at("dimension").get<std::size_t>();
        const auto& nodes = header.at("nodes");
        const auto& edges = header.at("edges");
        const std::size_t expected = (nodes.size() * 2 * dim + edges.size()) * 8;
        if (body.size() - block_start != expected) throw Error(ErrorCode::CorruptPayload, "embedding block size mismatch");

        std::size_t at = block_start;
        auto read_vector = [&] {
            std::vector<double> v(dim);
            for (auto& x : v) {
                x = detail::get_f64(bytes, at);
                at += 8;
            }
            return EmbeddingVector(std::move(v));
        };
        ConditionGraph::Builder builder(dim);
        for (const auto& n : nodes) {
            ConditionNode node;
            node.id = n.at("id").get<std::string>();
            node.name = n.at("name").get<std::string>();
            node.definition = n.at("definition").get<std::string>();
            node.text_embedding = read_vector();
            node.mm_embedding = read_vector();
            std::vector<InfoNode> infos;
            for (auto c : kInfoCategories) {
                const auto idx = static_cast<std::size_t>(c);
                node.info_children[idx] = info_node_id(node.id, c);
                infos.push_back({node.info_children[idx], c, n.at("info").at(std::string(to_string(c))).get<std::string>(), node.id});
            }
            builder.add_node(std::move(node), std::move(infos));
        }
        for (const auto& e : edges) {
            builder.add_edge(e.at("a").get<std::string>(), e.at("b").get<std::string>(), detail::get_f64(bytes, at));
            at += 8;
        }
        for (const auto& [k, v] : header.at("metadata").items()) builder.set_metadata(k, v.get<std::string>());
        return std::move(builder).build();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::CorruptPayload, std::string("malformed header: ") + e.what());
    }
}

inline void save_file(const ConditionGraph& graph, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::InvalidArgument, "cannot write " + path);
    const std::string bytes = save(graph);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::InvalidArgument, "failed writing " + path);
}

inline ConditionGraph load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::InvalidArgument, "cannot open " + path);
    const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return load(bytes);
}

}  // namespace medgrim
