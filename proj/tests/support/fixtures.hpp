#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include "medgrim/encoder.hpp"
#include "medgrim/graph.hpp"
#include "medgrim/lm_client.hpp"

namespace medgrim::testing {

inline std::filesystem::path fixture_path(const std::string& rel) { return std::filesystem::path(MEDGRIM_FIXTURE_DIR) / rel; }
inline std::filesystem::path golden_path(const std::string& name) { return std::filesystem::path(MEDGRIM_GOLDEN_DIR) / name; }

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << content;
}

// Seed and dimension of the test encoder used for the derm fixtures.
inline constexpr std::uint64_t kFixtureSeed = 7;
inline constexpr std::size_t kFixtureDim = 32;

inline const TestEncoder& fixture_encoder() {
    static const TestEncoder enc(kFixtureSeed, kFixtureDim);
    return enc;
}

inline ConditionGraph ingest_fixture(const std::string& csv, const EncoderClient& encoder, const std::string& spec,
                                     double threshold = 0.8) {
    IngestOptions opts;
    opts.edge_policy.threshold = threshold;
    opts.image_base_dir = fixture_path(csv).parent_path().string();
    opts.metadata["encoder"] = spec;
    return ingest(load_condition_csv(fixture_path(csv).string()), encoder, opts);
}

inline const ConditionGraph& derm12() {
    static const ConditionGraph g = ingest_fixture("derm12.csv", fixture_encoder(), "test:7");
    return g;
}

inline const ConditionGraph& derm50() {
    static const ConditionGraph g = ingest_fixture("derm50.csv", fixture_encoder(), "test:7");
    return g;
}

inline const TableEncoder& lambda_encoder() {
    static const TableEncoder enc = TableEncoder::from_file(fixture_path("lambda/encoder.json").string());
    return enc;
}

inline const ConditionGraph& lambda_graph() {
    static const ConditionGraph g = ingest_fixture("lambda/conditions.csv", lambda_encoder(), "table:encoder.json");
    return g;
}

inline LmClient scripted(const std::string& rel) { return LmClient(ScriptedBackend::from_file(fixture_path(rel).string())); }

struct GoldenResult {
    bool ok = false;
    std::string message;
};

/// Byte comparison against tests/golden/<name>. With MEDGRIM_UPDATE_GOLDEN set
/// the file is rewritten instead.
inline GoldenResult check_golden(const std::string& name, const std::string& actual) {
    const auto path = golden_path(name);
    if (std::getenv("MEDGRIM_UPDATE_GOLDEN")) {
        write_file(path, actual);
        return {true, "updated " + path.string()};
    }
    if (!std::filesystem::exists(path)) return {false, "missing golden file " + path.string()};
    const std::string expected = read_file(path);
    if (expected == actual) return {true, {}};
    std::size_t i = 0;
    while (i < expected.size() && i < actual.size() && expected[i] == actual[i]) ++i;
    return {false, name + " differs at byte " + std::to_string(i) + ": expected \"" + expected.substr(i, 60) +
                       "\" got \"" + actual.substr(i, 60) + "\""};
}

}  // namespace medgrim::testing
