#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "medgrim/persist.hpp"
#include "medgrim/retrieval.hpp"
#include "oracles.hpp"
#include "fixtures.hpp"

using namespace medgrim;
namespace fx = medgrim::testing;

namespace {

EmbeddingVector ev(std::vector<double> v) { return EmbeddingVector(std::move(v)); }

EmbeddingVector basis(std::size_t dim, std::size_t i) {
    std::vector<double> v(dim, 0.0);
    v[i] = 1.0;
    return ev(v);
}

// Unit vector with cosine c against e_main, remainder on e_other.
EmbeddingVector at_cosine(std::size_t dim, std::size_t main, std::size_t other, double c) {
    std::vector<double> v(dim, 0.0);
    v[main] = c;
    v[other] = std::sqrt(1.0 - c * c);
    return ev(v);
}

std::vector<double> random_vec(std::mt19937_64& rng, std::size_t dim) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(dim);
    for (auto& x : v) x = n(rng);
    return v;
}

template <class F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an Error";
    return ErrorCode::InvalidArgument;
}

bool bit_equal(const EmbeddingVector& a, const EmbeddingVector& b) {
    return a.dimension() == b.dimension() &&
           std::memcmp(a.values().data(), b.values().data(), a.dimension() * sizeof(double)) == 0;
}

}  // namespace

// ---------------------------------------------------------------- embedding

TEST(Embedding, RejectsEmptyAndNonFinite) {
    EXPECT_EQ(code_of([] { ev({}); }), ErrorCode::DimensionMismatch);
    EXPECT_EQ(code_of([] { ev({1.0, NAN}); }), ErrorCode::InvalidArgument);
    EXPECT_EQ(code_of([] { ev({INFINITY, 0.0}); }), ErrorCode::InvalidArgument);
}

TEST(Embedding, NormalizeGivesUnitNorm) {
    EXPECT_NEAR(ev({3, 4}).normalized().norm(), 1.0, 1e-12);
    EXPECT_EQ(code_of([] { ev({0, 0}).normalized(); }), ErrorCode::ZeroVector);
}

TEST(Cosine, SelfAndOrthogonal) {
    const auto a = ev({0.3, -0.2, 0.9});
    EXPECT_NEAR(cosine(a, a), 1.0, 1e-6);
    EXPECT_EQ(cosine(basis(4, 0), basis(4, 1)), 0.0);
}

TEST(Cosine, Errors) {
    EXPECT_EQ(code_of([] { cosine(ev({1, 0}), ev({1, 0, 0})); }), ErrorCode::DimensionMismatch);
    EXPECT_EQ(code_of([] { cosine(ev({0, 0}), ev({1, 0})); }), ErrorCode::ZeroVector);
}

TEST(Cosine, MatchesExtendedPrecisionOracle) {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 5000; ++i) {
        const auto a = random_vec(rng, 8), b = random_vec(rng, 8);
        const double c = cosine(ev(a), ev(b));
        EXPECT_NEAR(c, static_cast<double>(oracle::cosine(a, b)), 1e-9);
        EXPECT_EQ(c, cosine(ev(b), ev(a)));
        EXPECT_GE(c, -1.0);
        EXPECT_LE(c, 1.0);
    }
}

TEST(Cosine, ClampedForParallelVectors) {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 200; ++i) {
        auto a = random_vec(rng, 16);
        std::vector<double> b = a, c = a;
        for (auto& x : b) x *= 1e3;
        for (auto& x : c) x *= -7.0;
        EXPECT_LE(cosine(ev(a), ev(b)), 1.0);
        EXPECT_GE(cosine(ev(a), ev(c)), -1.0);
    }
}

TEST(MeanPool, Examples) {
    const auto v = ev({0.6, 0.8});
    const std::vector<EmbeddingVector> one{v}, three{v, v, v};
    EXPECT_TRUE(mean_pool(one) == v);
    EXPECT_NEAR(mean_pool(three)[0], 0.6, 1e-15);
    EXPECT_NEAR(mean_pool(three)[1], 0.8, 1e-15);
    const std::vector<EmbeddingVector> e12{basis(3, 0), basis(3, 1)};
    const auto m = mean_pool(e12);
    EXPECT_NEAR(m[0], 1 / std::sqrt(2.0), 1e-15);
    EXPECT_NEAR(m[1], 1 / std::sqrt(2.0), 1e-15);
    EXPECT_EQ(m[2], 0.0);
}

TEST(MeanPool, Errors) {
    EXPECT_EQ(code_of([] { mean_pool(std::vector<EmbeddingVector>{}); }), ErrorCode::EmptySequence);
    EXPECT_EQ(code_of([] { mean_pool(std::vector<EmbeddingVector>{ev({1, 0}), ev({-1, 0})}); }), ErrorCode::DegenerateMean);
    EXPECT_EQ(code_of([] { mean_pool(std::vector<EmbeddingVector>{ev({1, 0}), ev({1, 0, 0})}); }),
              ErrorCode::DimensionMismatch);
}

TEST(MeanPool, AlwaysUnitNormAndMatchesOracle) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> count(1, 15);
    for (int t = 0; t < 500; ++t) {
        std::vector<EmbeddingVector> vs;
        std::vector<std::vector<double>> raw;
        const int n = count(rng);
        for (int i = 0; i < n; ++i) {
            raw.push_back(random_vec(rng, 8));
            vs.push_back(ev(raw.back()).normalized());
            raw.back() = std::vector<double>(vs.back().values().begin(), vs.back().values().end());
        }
        const auto m = mean_pool(vs);
        EXPECT_NEAR(m.norm(), 1.0, 1e-12);
        const auto o = oracle::mean_normalized(raw);
        for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(m[i], o[i], 1e-12);
    }
}

TEST(HybridScore, Examples) {
    // S_text = 0.5, S_mm = 1.0 at the default weight.
    const HybridEncoding q{basis(3, 0), basis(3, 1)};
    const auto node_text = at_cosine(3, 0, 2, 0.5);
    const auto node_mm = basis(3, 1);
    EXPECT_NEAR(hybrid_score(q, node_text, node_mm, 0.4), 0.80, 1e-15);
    EXPECT_EQ(hybrid_score(q, node_text, node_mm, 1.0), cosine(q.text_vec, node_text));
    EXPECT_EQ(hybrid_score(q, node_text, node_mm, 0.0), cosine(*q.mm_vec, node_mm));
}

TEST(HybridScore, UnimodalFallbackIsTextCosine) {
    std::mt19937_64 rng(8);
    for (int i = 0; i < 100; ++i) {
        const auto t = ev(random_vec(rng, 8)).normalized(), n = ev(random_vec(rng, 8)).normalized();
        const HybridEncoding q{t, std::nullopt};
        for (double l : {0.0, 0.4, 1.0}) EXPECT_EQ(hybrid_score(q, n, ev(random_vec(rng, 8)), l), cosine(t, n));
    }
}

TEST(HybridScore, AffineInLambdaExactly) {
    std::mt19937_64 rng(9);
    for (int i = 0; i < 2000; ++i) {
        const HybridEncoding q{ev(random_vec(rng, 8)).normalized(), ev(random_vec(rng, 8)).normalized()};
        const auto nt = ev(random_vec(rng, 8)).normalized(), nm = ev(random_vec(rng, 8)).normalized();
        const double st = cosine(q.text_vec, nt), sm = cosine(*q.mm_vec, nm);
        for (double l : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            EXPECT_TRUE(oracle::is_nearest_double(hybrid_score(q, nt, nm, l), oracle::affine_exact(l, st, sm)))
                << "lambda " << l;
        }
    }
}

TEST(HybridScore, Errors) {
    const HybridEncoding q{basis(3, 0), basis(3, 1)};
    EXPECT_EQ(code_of([&] { hybrid_score(q, basis(3, 0), basis(3, 1), 1.5); }), ErrorCode::InvalidLambda);
    EXPECT_EQ(code_of([&] { hybrid_score(q, basis(3, 0), basis(3, 1), -0.1); }), ErrorCode::InvalidLambda);
    EXPECT_EQ(code_of([&] { hybrid_score(q, basis(3, 0), basis(3, 1), NAN); }), ErrorCode::InvalidLambda);
    EXPECT_EQ(code_of([&] { hybrid_score(q, basis(4, 0), basis(3, 1), 0.4); }), ErrorCode::DimensionMismatch);
}

TEST(TestEncoder, DeterministicNormalizedDistinct) {
    const TestEncoder enc(1, 16);
    EXPECT_EQ(enc.dimension(), 16u);
    EXPECT_TRUE(enc.encode_text("eczema") == enc.encode_text("eczema"));
    EXPECT_LT(cosine(enc.encode_text("eczema"), enc.encode_text("psoriasis")), 1.0);
    EXPECT_NEAR(enc.encode_text("red itchy rash").norm(), 1.0, 1e-12);
    const auto mm = enc.encode_multimodal("eczema", ImageRef::path("a/b.jpg"));
    EXPECT_NEAR(mm.norm(), 1.0, 1e-12);
    EXPECT_TRUE(mm == enc.encode_multimodal("eczema", ImageRef::path("a/b.jpg")));
    EXPECT_FALSE(mm == enc.encode_multimodal("eczema", ImageRef::path("a/c.jpg")));
    EXPECT_FALSE(enc.encode_text("eczema") == TestEncoder(2, 16).encode_text("eczema"));
    EXPECT_TRUE(enc.encode_text("Eczema!") == enc.encode_text("eczema"));
    EXPECT_NEAR(enc.encode_text("").norm(), 1.0, 1e-12);
    EXPECT_THROW(TestEncoder(1, 1), Error);
}

TEST(TestEncoder, ScaleInvarianceOfArgmax) {
    // Positive rescaling of raw vectors before normalization leaves every cosine unchanged.
    std::mt19937_64 rng(12);
    for (int t = 0; t < 200; ++t) {
        const auto q = random_vec(rng, 8);
        std::vector<std::vector<double>> nodes;
        for (int i = 0; i < 10; ++i) nodes.push_back(random_vec(rng, 8));
        std::size_t best = 0, best_scaled = 0;
        double bs = -2, bss = -2;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            auto scaled = nodes[i];
            for (auto& x : scaled) x *= 0.001 + 37.0 * static_cast<double>(i);
            const double s = cosine(ev(q).normalized(), ev(nodes[i]).normalized());
            const double ss = cosine(ev(q).normalized(), ev(scaled).normalized());
            if (s > bs) bs = s, best = i;
            if (ss > bss) bss = ss, best_scaled = i;
        }
        EXPECT_EQ(best, best_scaled);
    }
}

// ---------------------------------------------------------------- csv

TEST(Csv, QuotesNewlinesCrlfBom) {
    std::istringstream in("\xEF\xBB\xBF" "a,b\r\n\"x, y\",\"he said \"\"hi\"\"\"\r\n\r\n\"multi\nline\",z\n");
    const auto rows = read_csv(in);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0], (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(rows[1], (std::vector<std::string>{"x, y", "he said \"hi\""}));
    EXPECT_EQ(rows[2], (std::vector<std::string>{"multi\nline", "z"}));
}

TEST(Csv, Malformed) {
    std::istringstream unterminated("a,\"b\n");
    EXPECT_EQ(code_of([&] { read_csv(unterminated); }), ErrorCode::MalformedInput);
    std::istringstream stray("a,b\"c\n");
    EXPECT_EQ(code_of([&] { read_csv(stray); }), ErrorCode::MalformedInput);
}

TEST(ConditionCsv, ParsesColumnsInAnyOrder) {
    std::istringstream in(
        "prevention,name,image_paths,definition,symptoms,clinical_treatment,home_treatment\n"
        "avoid sun,Sunburn,a.jpg; b.jpg ;,Red skin after sun,red hot skin,aloe,cool bath\n");
    const auto recs = parse_condition_csv(in);
    ASSERT_EQ(recs.size(), 1u);
    EXPECT_EQ(recs[0].name, "Sunburn");
    EXPECT_EQ(recs[0].prevention, "avoid sun");
    EXPECT_EQ(recs[0].image_paths, (std::vector<std::string>{"a.jpg", "b.jpg"}));
}

TEST(ConditionCsv, EmptyAndMissingColumns) {
    std::istringstream empty("");
    EXPECT_EQ(code_of([&] { parse_condition_csv(empty); }), ErrorCode::EmptyRecordSet);
    std::istringstream header_only("name,definition,symptoms,clinical_treatment,home_treatment,prevention,image_paths\n");
    EXPECT_EQ(code_of([&] { parse_condition_csv(header_only); }), ErrorCode::EmptyRecordSet);
    std::istringstream missing("name,definition\nA,B\n");
    EXPECT_EQ(code_of([&] { parse_condition_csv(missing); }), ErrorCode::MalformedInput);
}

// ---------------------------------------------------------------- graph

namespace {

ConditionRecord record(std::string name, std::string definition = "a definition") {
    ConditionRecord r;
    r.name = std::move(name);
    r.definition = std::move(definition);
    r.symptoms = "some symptoms";
    return r;
}

// Encoder that returns the same text vector for everything.
class ConstantEncoder final : public EncoderClient {
public:
    EmbeddingVector encode_text(std::string_view) const override { return ev({1, 0, 0}); }
    EmbeddingVector encode_multimodal(std::string_view, const ImageRef&) const override { return ev({0, 1, 0}); }
    std::size_t dimension() const override { return 3; }
};

class BrokenEncoder final : public EncoderClient {
public:
    EmbeddingVector encode_text(std::string_view) const override {
        throw Error(ErrorCode::EncoderUnavailable, "down");
    }
    EmbeddingVector encode_multimodal(std::string_view, const ImageRef&) const override {
        throw Error(ErrorCode::EncoderUnavailable, "down");
    }
    std::size_t dimension() const override { return 3; }
};

}  // namespace

TEST(Ingest, TwoIdenticalRecordsGiveOneUnitEdge) {
    IngestOptions opts;
    opts.edge_policy.threshold = 0.0;
    const auto g = ingest({record("Alpha"), record("Beta")}, ConstantEncoder{}, opts);
    EXPECT_EQ(g.size(), 2u);
    EXPECT_EQ(g.info_nodes().size(), 6u);
    ASSERT_EQ(g.edges().size(), 1u);
    EXPECT_EQ(g.edges()[0].weight, 1.0);
}

TEST(Ingest, SingleRecordHasNoEdges) {
    IngestOptions opts;
    opts.edge_policy.threshold = -1.0;
    const auto g = ingest({record("Alpha")}, ConstantEncoder{}, opts);
    EXPECT_EQ(g.size(), 1u);
    EXPECT_TRUE(g.edges().empty());
    EXPECT_TRUE(neighbors(g, "alpha").empty());
}

TEST(Ingest, Errors) {
    EXPECT_EQ(code_of([] { ingest({}, ConstantEncoder{}); }), ErrorCode::EmptyRecordSet);
    EXPECT_EQ(code_of([] { ingest({record("Acne"), record("acne")}, ConstantEncoder{}); }),
              ErrorCode::DuplicateConditionName);
    EXPECT_EQ(code_of([] { ingest({record("")}, ConstantEncoder{}); }), ErrorCode::MalformedInput);
    EXPECT_EQ(code_of([] { ingest({record("A", " ")}, ConstantEncoder{}); }), ErrorCode::MalformedInput);
    EXPECT_EQ(code_of([] { ingest({record("A")}, BrokenEncoder{}); }), ErrorCode::EncoderUnavailable);
    for (double t : {1.5, -2.0, std::nan("")}) {
        IngestOptions opts;
        opts.edge_policy.threshold = t;
        EXPECT_EQ(code_of([&] { ingest({record("A")}, BrokenEncoder{}, opts); }), ErrorCode::InvalidArgument) << t;
    }
}

TEST(Ingest, InfoNodesAndTreatmentSubsections) {
    auto r = record("Hives");
    r.clinical_treatment = "antihistamines";
    r.home_treatment = "cool compress";
    const auto g = ingest({r, record("Other")}, fx::fixture_encoder());
    const auto& n = g.node("hives");
    for (auto c : kInfoCategories) {
        const auto& info = g.info(n, c);
        EXPECT_EQ(info.category, c);
        EXPECT_EQ(info.parent_id, "hives");
        EXPECT_FALSE(info.body.empty());
    }
    const auto& t = g.info_text("hives", InfoCategory::Treatments);
    EXPECT_NE(t.find("Clinical treatment:\nantihistamines"), std::string::npos);
    EXPECT_NE(t.find("Home treatment:\ncool compress"), std::string::npos);
    EXPECT_EQ(g.info_text("hives", InfoCategory::Prevention), kNotRecorded);
    // Without images the multimodal embedding is the text embedding.
    EXPECT_TRUE(n.mm_embedding == n.text_embedding);
}

TEST(Ingest, Derm50Structure) {
    const auto& g = fx::derm50();
    EXPECT_EQ(g.size(), 50u);
    EXPECT_EQ(g.info_nodes().size(), 150u);
    const auto recs = load_condition_csv(fx::fixture_path("derm50.csv").string());
    for (const auto& r : recs) {
        ASSERT_GE(r.image_paths.size(), 10u);
        ASSERT_LE(r.image_paths.size(), 15u);
        std::vector<std::vector<double>> imgs;
        for (const auto& p : r.image_paths) {
            const auto v = fx::fixture_encoder().encode_multimodal(r.name, ImageRef::path(p));
            imgs.emplace_back(v.values().begin(), v.values().end());
        }
        const auto expected = oracle::mean_normalized(imgs);
        const auto& mm = g.node(slugify(r.name)).mm_embedding;
        for (std::size_t i = 0; i < mm.dimension(); ++i) EXPECT_NEAR(mm[i], expected[i], 1e-9);
    }
}

TEST(Ingest, Deterministic) {
    EXPECT_EQ(save(fx::derm12()), save(fx::ingest_fixture("derm12.csv", fx::fixture_encoder(), "test:7")));
}

TEST(Ingest, EdgesFollowThreshold) {
    const auto& g = fx::derm12();
    EXPECT_EQ(g.edges().size(), 3u);
    for (const auto& [ia, a] : g.nodes()) {
        for (const auto& [ib, b] : g.nodes()) {
            if (ia >= ib) continue;
            const bool want = cosine(a.text_embedding, b.text_embedding) >= 0.8;
            EXPECT_EQ(g.neighbors(ia).count(ib) == 1, want) << ia << " " << ib;
        }
    }
}

TEST(SelectEdges, TopK) {
    const std::vector<EmbeddingVector> vs{ev({1, 0, 0}), at_cosine(3, 0, 1, 0.9), at_cosine(3, 0, 2, 0.5),
                                          at_cosine(3, 1, 2, 0.3)};
    std::vector<EdgeCandidate> cands;
    for (std::size_t i = 0; i < vs.size(); ++i) cands.push_back({"n" + std::to_string(i), &vs[i]});
    EdgePolicy p;
    p.top_k = 1;
    const auto edges = select_edges(cands, p);
    std::set<std::pair<std::string, std::string>> got;
    for (const auto& e : edges) got.insert({e.a, e.b});
    // Each node links to its single best partner; the union is symmetric.
    EXPECT_TRUE(got.count({"n0", "n1"}));
    for (const auto& e : edges) EXPECT_LT(e.a, e.b);
}

TEST(Graph, BuilderValidation) {
    const auto unit = ev({1, 0});
    EXPECT_EQ(code_of([&] {
                  ConditionGraph::Builder b(2);
                  b.add_condition("a", "A", "d", unit, ev({2, 0}), "s", "t", "p");
                  std::move(b).build();
              }),
              ErrorCode::InvalidArgument);
    EXPECT_EQ(code_of([&] {
                  ConditionGraph::Builder b(3);
                  b.add_condition("a", "A", "d", unit, unit, "s", "t", "p");
                  std::move(b).build();
              }),
              ErrorCode::DimensionMismatch);
    EXPECT_EQ(code_of([&] {
                  ConditionGraph::Builder b(2);
                  b.add_condition("a", "A", "d", unit, unit, "s", "t", "p");
                  b.add_edge("a", "a");
                  std::move(b).build();
              }),
              ErrorCode::MalformedInput);
    EXPECT_EQ(code_of([&] {
                  ConditionGraph::Builder b(2);
                  b.add_condition("a", "A", "d", unit, unit, "s", "t", "p");
                  b.add_edge("a", "zzz");
                  std::move(b).build();
              }),
              ErrorCode::UnknownConditionId);
    EXPECT_EQ(code_of([&] {
                  ConditionGraph::Builder b(2);
                  b.add_condition("a", "A", "d", unit, unit, "", "t", "p");
                  std::move(b).build();
              }),
              ErrorCode::MalformedInput);
    EXPECT_EQ(code_of([&] {
                  ConditionGraph::Builder b(2);
                  b.add_condition("a", "A", "d", unit, unit, "s", "t", "p");
                  b.add_condition("a", "A", "d", unit, unit, "s", "t", "p");
              }),
              ErrorCode::DuplicateConditionName);
}

TEST(Graph, NeighborsBasics) {
    const auto u = ev({1, 0});
    ConditionGraph::Builder b(2);
    for (std::string id : {"a", "b", "c", "iso"}) b.add_condition(id, id, "d", u, u, "s", "t", "p");
    b.add_edge("a", "b").add_edge("b", "c").add_edge("c", "a").add_edge("b", "a");
    const auto g = std::move(b).build();
    EXPECT_EQ(g.edges().size(), 3u);
    EXPECT_TRUE(neighbors(g, "iso").empty());
    EXPECT_EQ(neighbors(g, "a"), (std::set<std::string>{"b", "c"}));
    EXPECT_EQ(code_of([&] { neighbors(g, "nope"); }), ErrorCode::UnknownConditionId);
    EXPECT_EQ(code_of([&] { g.node("nope"); }), ErrorCode::UnknownConditionId);
}

TEST(Graph, NeighborsMatchEdgeScan) {
    std::mt19937_64 rng(21);
    const TestEncoder enc(3, 8);
    for (int t = 0; t < 30; ++t) {
        const auto g = oracle::random_graph(rng, enc, {20, 8, 0.2});
        const auto raw = oracle::raw(g);
        for (const auto& [id, n] : g.nodes()) {
            EXPECT_EQ(neighbors(g, id), oracle::neighbors(raw, id));
            EXPECT_FALSE(neighbors(g, id).count(id));
            for (const auto& nb : neighbors(g, id)) EXPECT_TRUE(neighbors(g, nb).count(id));
        }
        for (const auto& e : g.edges()) {
            EXPECT_NE(e.a, e.b);
            EXPECT_GE(e.weight, -1.0);
            EXPECT_LE(e.weight, 1.0);
        }
    }
}

// ---------------------------------------------------------------- persistence

TEST(Persist, Crc32TestVector) {
    EXPECT_EQ(crc32("123456789"), 0xCBF43926u);
    EXPECT_EQ(oracle::crc32("123456789"), 0xCBF43926u);
    EXPECT_EQ(crc32(""), 0u);
    std::mt19937_64 rng(4);
    for (int i = 0; i < 100; ++i) {
        std::string s(static_cast<std::size_t>(rng() % 300), '\0');
        for (auto& c : s) c = static_cast<char>(rng());
        EXPECT_EQ(crc32(s), oracle::crc32(s));
    }
}

void expect_bit_identical(const ConditionGraph& a, const ConditionGraph& b) {
    EXPECT_TRUE(a == b);
    ASSERT_EQ(a.size(), b.size());
    for (const auto& [id, n] : a.nodes()) {
        const auto& m = b.node(id);
        EXPECT_TRUE(bit_equal(n.text_embedding, m.text_embedding));
        EXPECT_TRUE(bit_equal(n.mm_embedding, m.mm_embedding));
    }
    EXPECT_EQ(a.metadata(), b.metadata());
    EXPECT_EQ(a.adjacency(), b.adjacency());
}

TEST(Persist, RoundTripFixtures) {
    for (const ConditionGraph* g : {&fx::derm12(), &fx::derm50(), &fx::lambda_graph()}) {
        const auto bytes = save(*g);
        const auto back = load(bytes);
        expect_bit_identical(*g, back);
        EXPECT_EQ(save(back), bytes);
    }
}

TEST(Persist, EmptyGraphRoundTrips) {
    const auto g = ConditionGraph::Builder(0).build();
    const auto back = load(save(g));
    EXPECT_TRUE(back.empty());
    EXPECT_TRUE(g == back);
}

TEST(Persist, RandomGraphsRoundTrip) {
    std::mt19937_64 rng(31);
    const TestEncoder enc(5, 8);
    for (int t = 0; t < 20; ++t) {
        const auto g = oracle::random_graph(rng, enc, {40, 8, 0.1});
        expect_bit_identical(g, load(save(g)));
    }
}

TEST(Persist, EverySingleByteFlipDetected) {
    const auto bytes = save(fx::derm12());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        for (unsigned char mask : {0x01, 0x80, 0xFF}) {
            std::string bad = bytes;
            bad[i] = static_cast<char>(bad[i] ^ mask);
            ErrorCode code{};
            try {
                load(bad);
                ADD_FAILURE() << "flip at " << i << " not detected";
            } catch (const Error& e) {
                code = e.code();
            }
            EXPECT_EQ(code, ErrorCode::CorruptPayload) << "byte " << i;
        }
    }
}

TEST(Persist, TruncationAndVersion) {
    const auto bytes = save(fx::derm12());
    EXPECT_EQ(code_of([&] { load(bytes.substr(0, bytes.size() - 1)); }), ErrorCode::CorruptPayload);
    EXPECT_EQ(code_of([&] { load(""); }), ErrorCode::CorruptPayload);
    // Rewrite the header with another schema version and a valid checksum.
    std::string s = bytes.substr(0, bytes.size() - 4);
    const auto pos = s.find("\"schema_version\":1");
    ASSERT_NE(pos, std::string::npos);
    s[pos + 17] = '9';
    const auto crc = crc32(s);
    for (int k = 0; k < 4; ++k) s.push_back(static_cast<char>((crc >> (8 * k)) & 0xFF));
    EXPECT_EQ(code_of([&] { load(s); }), ErrorCode::SchemaVersionMismatch);
}

// ---------------------------------------------------------------- retrieval

namespace {

// Isolated nodes whose text cosine against e0 is exactly the given score.
ConditionGraph scored_graph(const std::vector<double>& scores) {
    const std::size_t dim = scores.size() + 1;
    ConditionGraph::Builder b(dim);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const auto v = at_cosine(dim, 0, i + 1, scores[i]);
        b.add_condition("n" + std::to_string(i), "N" + std::to_string(i), "d", v, v, "s", "t", "p");
    }
    return std::move(b).build();
}

std::set<std::string> ids(const CandidateSet& c) {
    std::set<std::string> out;
    for (const auto& e : c.entries) out.insert(e.condition_id);
    return out;
}

}  // namespace

TEST(Stage1, ThresholdIsRelativeNotTop1) {
    const auto g = scored_graph({0.90, 0.88, 0.50});
    const HybridEncoding q{basis(4, 0), std::nullopt};
    const auto c = stage1_filter(g, q, {});
    EXPECT_EQ(ids(c), (std::set<std::string>{"n0", "n1"}));
    ASSERT_EQ(c.entries.size(), 2u);
    EXPECT_EQ(c.entries[0].condition_id, "n0");
    EXPECT_NEAR(c.entries[0].score, 0.90, 1e-12);
    EXPECT_EQ(c.entries[1].via, Via::DirectMatch);
}

TEST(Stage1, SingleNode) {
    const auto g = scored_graph({0.3});
    const auto c = stage1_filter(g, {basis(2, 0), std::nullopt}, {});
    ASSERT_EQ(c.entries.size(), 1u);
    EXPECT_EQ(c.entries[0].via, Via::DirectMatch);
    EXPECT_NEAR(c.entries[0].score, 0.3, 1e-12);
}

TEST(Stage1, NonPositiveMaxKeepsArgmaxTies) {
    const auto g = scored_graph({-0.2, -0.2, -0.5});
    const auto c = stage1_filter(g, {basis(4, 0), std::nullopt}, {});
    EXPECT_EQ(ids(c), (std::set<std::string>{"n0", "n1"}));
}

TEST(Stage1, NeighborsAddedWithOwnScoreDirectWins) {
    const std::size_t dim = 5;
    ConditionGraph::Builder b(dim);
    const std::vector<double> s{0.9, 0.1, 0.89, 0.2};
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto v = at_cosine(dim, 0, i + 1, s[i]);
        b.add_condition("n" + std::to_string(i), "N", "d", v, v, "s", "t", "p");
    }
    b.add_edge("n0", "n1").add_edge("n0", "n2");
    const auto g = std::move(b).build();
    const auto c = stage1_filter(g, {basis(dim, 0), std::nullopt}, {});
    ASSERT_EQ(c.entries.size(), 3u);
    EXPECT_EQ(c.find("n2")->via, Via::DirectMatch);
    EXPECT_EQ(c.find("n1")->via, Via::NeighborExpansion);
    EXPECT_NEAR(c.find("n1")->score, 0.1, 1e-12);
    EXPECT_EQ(c.entries.back().condition_id, "n1");
}

TEST(Stage1, MaxCandidatesAfterUnion) {
    const auto g = scored_graph({0.9, 0.89, 0.88, 0.87});
    RetrievalConfig cfg;
    cfg.max_candidates = 2;
    const auto c = stage1_filter(g, {basis(5, 0), std::nullopt}, cfg);
    EXPECT_EQ(ids(c), (std::set<std::string>{"n0", "n1"}));
}

TEST(Stage1, Errors) {
    const auto empty = ConditionGraph::Builder(2).build();
    EXPECT_EQ(code_of([&] { stage1_filter(empty, {basis(2, 0), std::nullopt}, {}); }), ErrorCode::EmptyGraph);
    const auto g = scored_graph({0.5});
    EXPECT_EQ(code_of([&] { stage1_filter(g, {basis(3, 0), std::nullopt}, {}); }), ErrorCode::DimensionMismatch);
    RetrievalConfig bad;
    bad.relative_threshold = 0.0;
    EXPECT_EQ(code_of([&] { stage1_filter(g, {basis(2, 0), std::nullopt}, bad); }), ErrorCode::InvalidArgument);
    bad = {};
    bad.lambda = 2;
    EXPECT_EQ(code_of([&] { stage1_filter(g, {basis(2, 0), std::nullopt}, bad); }), ErrorCode::InvalidLambda);
}

TEST(ScoreAll, Examples) {
    const auto& g = fx::derm12();
    const auto& target = g.node("psoriasis");
    RetrievalConfig cfg;
    cfg.lambda = 1.0;
    const HybridEncoding q{target.text_embedding, fx::fixture_encoder().encode_text("x")};
    EXPECT_NEAR(score_all(g, q, cfg).at("psoriasis"), 1.0, 1e-12);
    cfg.lambda = 0.4;
    const auto scores = score_all(g, q, cfg);
    for (const auto& [id, s] : scores) EXPECT_EQ(s, hybrid_score(q, g.node(id), 0.4));

    ConditionGraph::Builder b(2);
    for (std::string id : {"a", "b", "c"}) b.add_condition(id, id, "d", ev({0.6, 0.8}), ev({0.6, 0.8}), "s", "t", "p");
    const auto same = std::move(b).build();
    const auto eq = score_all(same, {ev({1, 0}), ev({0, 1})}, {});
    EXPECT_EQ(eq.at("a"), eq.at("b"));
    EXPECT_EQ(eq.at("b"), eq.at("c"));
}

TEST(Stage1, Properties) {
    std::mt19937_64 rng(77);
    const TestEncoder enc(9, 8);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int t = 0; t < 60; ++t) {
        const auto g = oracle::random_graph(rng, enc, {30, 8, 0.08});
        const auto q = enc.encode_query(oracle::random_bag(rng), ImageRef::path(oracle::random_bag(rng, 1, 2)));
        RetrievalConfig cfg;
        cfg.lambda = unit(rng);
        const auto c = stage1_filter(g, q, cfg);
        const auto scores = score_all(g, q, cfg);
        const auto argmax = std::max_element(scores.begin(), scores.end(),
                                             [](auto& a, auto& b) { return a.second < b.second; });
        ASSERT_NE(c.find(argmax->first), nullptr);
        EXPECT_EQ(c.find(argmax->first)->via, Via::DirectMatch);
        std::set<std::string> seen;
        for (const auto& e : c.entries) {
            EXPECT_TRUE(seen.insert(e.condition_id).second);
            EXPECT_EQ(e.score, scores.at(e.condition_id));
            if (e.via == Via::NeighborExpansion) {
                bool has_direct = false;
                for (const auto& nb : g.neighbors(e.condition_id)) {
                    const auto* d = c.find(nb);
                    has_direct |= d && d->via == Via::DirectMatch;
                }
                EXPECT_TRUE(has_direct);
            }
        }
        for (std::size_t i = 1; i < c.entries.size(); ++i) {
            const auto& a = c.entries[i - 1];
            const auto& b = c.entries[i];
            EXPECT_TRUE(a.score > b.score || (a.score == b.score && (a.via == Via::DirectMatch || b.via != Via::DirectMatch)));
        }
        // Raising the relative threshold never adds direct matches.
        std::size_t prev = SIZE_MAX;
        for (double r : {0.5, 0.8, 0.9, 0.95, 0.99, 1.0}) {
            cfg.relative_threshold = r;
            std::size_t direct = 0;
            for (const auto& e : stage1_filter(g, q, cfg).entries) direct += e.via == Via::DirectMatch;
            EXPECT_LE(direct, prev);
            prev = direct;
        }
    }
}

TEST(Stage1, MatchesBruteForceOracle) {
    std::mt19937_64 rng(2024);
    const TestEncoder enc(13, 8);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::bernoulli_distribution with_image(0.7);
    for (int t = 0; t < 200; ++t) {
        const auto g = oracle::random_graph(rng, enc, {30, 8, 0.05});
        std::optional<ImageRef> image;
        if (with_image(rng)) image = ImageRef::path(oracle::random_bag(rng, 1, 2));
        const auto q = enc.encode_query(oracle::random_bag(rng), image);
        const double lambda = unit(rng);
        RetrievalConfig cfg;
        cfg.lambda = lambda;
        std::optional<oracle::Vec> qm;
        if (q.mm_vec) qm = oracle::Vec(q.mm_vec->values().begin(), q.mm_vec->values().end());
        const auto expected = oracle::stage1(oracle::raw(g), oracle::Vec(q.text_vec.values().begin(), q.text_vec.values().end()),
                                             qm, lambda);
        std::map<std::string, std::string> got;
        for (const auto& e : stage1_filter(g, q, cfg).entries) got[e.condition_id] = std::string(to_string(e.via));
        EXPECT_EQ(got, expected) << "trial " << t;
    }
}

TEST(Stage1, LambdaCrossover) {
    // Node T wins on text (S_text 0.9, S_mm 0.3), node I on the image (0.4, 0.8).
    // Scores are equal where 0.3 + 0.6 l = 0.8 - 0.4 l, i.e. l* = 0.5.
    const std::size_t dim = 4;
    ConditionGraph::Builder b(dim);
    b.add_condition("t", "T", "d", at_cosine(dim, 0, 2, 0.9), at_cosine(dim, 1, 2, 0.3), "s", "t", "p");
    b.add_condition("i", "I", "d", at_cosine(dim, 0, 3, 0.4), at_cosine(dim, 1, 3, 0.8), "s", "t", "p");
    const auto g = std::move(b).build();
    const HybridEncoding q{basis(dim, 0), basis(dim, 1)};
    const double l_star = (0.8 - 0.3) / ((0.9 - 0.3) - (0.4 - 0.8));
    EXPECT_NEAR(l_star, 0.5, 1e-15);
    RetrievalConfig cfg;
    cfg.lambda = l_star - 0.01;
    EXPECT_EQ(stage1_filter(g, q, cfg).entries.front().condition_id, "i");
    cfg.lambda = l_star + 0.01;
    EXPECT_EQ(stage1_filter(g, q, cfg).entries.front().condition_id, "t");
}
