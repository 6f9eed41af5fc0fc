#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fedgfm/ancdai.hpp"

#include <cstring>
#include <filesystem>

using namespace fedgfm;
using namespace fedgfm::anchor;
using model::GfmParams;
using model::ModelConfig;

namespace {

ModelConfig cfg4(Eigen::Index d = 4, int heads = 2, int tokens = 4) {
    ModelConfig cfg;
    cfg.d = d;
    cfg.heads = heads;
    cfg.tokens_per_head = tokens;
    return cfg;
}

// Identity encoder: embeddings equal raw features, so prototypes are feature means.
GfmParams identity_encoder(Eigen::Index d) {
    ModelConfig cfg = cfg4(d);
    cfg.act = model::Nonlinearity::identity;
    GfmParams p = GfmParams::init(cfg, 1);
    for (auto& layer : p.encoder.layers) {
        layer.w_self = Matrix::Identity(d, d);
        layer.w_nbr.setZero();
        layer.w_edge.setZero();
        layer.bias.setZero();
    }
    return p;
}

graph::TextAttributedGraph feature_graph(const Matrix& x) {
    graph::TextAttributedGraph g;
    g.node_count = x.rows();
    g.node_features = x;
    g.label_level = graph::LabelLevel::node;
    g.class_count = 1;
    g.labels_int = IntVector::Zero(x.rows());
    return g;
}

std::vector<graph::SyntheticDomainSpec> disjoint_domains(Eigen::Index d, int count) {
    std::vector<graph::SyntheticDomainSpec> specs;
    Eigen::Index width = d / count;
    for (int k = 0; k < count; ++k) {
        graph::SyntheticDomainSpec s;
        s.name = "domain" + std::to_string(k);
        s.node_count = 40;
        s.block_sizes = {20, 20};
        s.intra_p = k == 0 ? 0.0 : (k == 1 ? 0.9 : 0.3);  // contrasting topologies
        s.inter_p = k == 0 ? 0.0 : 0.1;
        s.class_count = 2;
        s.feature_dim = d;
        s.support_offset = width * k;
        s.support_width = width;
        s.mean_scale = 2.0;
        s.cov_scale = 0.2;
        s.seed = 1000 + static_cast<std::uint64_t>(k);
        specs.push_back(std::move(s));
    }
    return specs;
}

// Concentrated one-blob domains: nodes cluster around a single direction per
// domain, which is the regime the codebook-separability claim speaks to.
std::vector<graph::SyntheticDomainSpec> blob_domains(Eigen::Index d, int count) {
    std::vector<graph::SyntheticDomainSpec> specs;
    Eigen::Index width = d / count;
    for (int k = 0; k < count; ++k) {
        graph::SyntheticDomainSpec s;
        s.name = "blob" + std::to_string(k);
        s.node_count = 40;
        s.block_sizes = {40};
        s.intra_p = 0.1 + 0.3 * k;
        s.inter_p = 0.0;
        s.class_count = 1;
        s.feature_dim = d;
        s.support_offset = width * k;
        s.support_width = width;
        s.mean_scale = 2.0;
        s.cov_scale = 0.2;
        s.seed = 2000 + static_cast<std::uint64_t>(k);
        specs.push_back(std::move(s));
    }
    return specs;
}

}  // namespace

TEST_CASE("extract_prototype: means of controlled embeddings") {
    GfmParams enc = identity_encoder(2);

    Matrix same = Matrix::Ones(5, 2) * 0.3;
    DomainPrototype p1 = extract_prototype(enc, feature_graph(same), 0);
    CHECK(p1.p.isApprox(Matrix(Matrix::Ones(1, 2) * 0.3), 1e-14));

    Matrix single(1, 2);
    single << -0.7, 0.4;
    DomainPrototype p2 = extract_prototype(enc, feature_graph(single), 1);
    CHECK(p2.p.isApprox(single, 1e-14));

    Matrix two(2, 2);
    two << 1.0, 0.0, 0.0, 1.0;
    DomainPrototype p3 = extract_prototype(enc, feature_graph(two), 2);
    Matrix expected(1, 2);
    expected << 0.5, 0.5;
    CHECK(p3.p.isApprox(expected, 1e-14));
}

TEST_CASE("extract_prototype: empty graph rejected, repeat calls bitwise equal") {
    GfmParams enc = identity_encoder(2);
    graph::TextAttributedGraph empty;
    empty.node_count = 0;
    empty.node_features = Matrix::Zero(0, 2);
    empty.labels_int = IntVector::Zero(0);
    empty.class_count = 1;
    CHECK_THROWS_AS((void)extract_prototype(enc, empty, 0), ContractViolation);

    Rng rng(2);
    graph::TextAttributedGraph g = feature_graph(rng.uniform_matrix(7, 2, -1.0, 1.0));
    DomainPrototype a = extract_prototype(enc, g, 0);
    DomainPrototype b = extract_prototype(enc, g, 0);
    CHECK(std::memcmp(a.p.data(), b.p.data(), sizeof(double) * 2) == 0);
    CHECK(a.source_digest == b.source_digest);
}

TEST_CASE("extract_prototype: collection averages across all graphs' nodes") {
    GfmParams enc = identity_encoder(2);
    graph::GraphCollection c;
    Matrix x1 = Matrix::Ones(2, 2);          // 2 nodes at (1,1)
    Matrix x2 = Matrix::Ones(6, 2) * -0.5;   // 6 nodes at (-0.5,-0.5)
    c.graphs = {feature_graph(x1), feature_graph(x2)};
    DomainPrototype p = extract_prototype(enc, c, 3);
    double expected = (2 * 1.0 + 6 * -0.5) / 8.0;
    CHECK(p.p(0, 0) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("synthesize_anchors: sigma=0 copies, H=0 empty, large-H mean concentrates") {
    DomainPrototype p;
    p.client_id = 0;
    Rng rng(5);
    p.p = rng.uniform_matrix(1, 6, -1.0, 1.0);

    AnchorSet zero = synthesize_anchors(p, 5, 0.0, 11);
    zero.validate(p);  // throws unless anchors equal the prototype bitwise

    AnchorSet none = synthesize_anchors(p, 0, 0.3, 12);
    CHECK(none.anchors.rows() == 0);

    AnchorSet big = synthesize_anchors(p, 10000, 0.1, 13);
    Matrix mean = big.anchors.colwise().mean();
    for (Eigen::Index j = 0; j < 6; ++j) CHECK(std::abs(mean(0, j) - p.p(0, j)) < 0.01);

    CHECK_THROWS_AS((void)synthesize_anchors(p, 3, -0.1, 1), ContractViolation);
}

TEST_CASE("init_codebook: allocation arithmetic and zero-noise layout") {
    std::vector<DomainPrototype> protos(2);
    protos[0].client_id = 0;
    protos[0].p = Matrix::Ones(1, 4);
    protos[1].client_id = 1;
    protos[1].p = Matrix::Ones(1, 4) * -1.0;

    model::Codebook cb = init_codebook(protos, cfg4(4, 2, 4), 0.0, 7);
    for (const Matrix& tokens : cb.head_tokens) {
        CHECK(tokens.row(0) == protos[0].p.row(0));
        CHECK(tokens.row(1) == protos[0].p.row(0));
        CHECK(tokens.row(2) == protos[1].p.row(0));
        CHECK(tokens.row(3) == protos[1].p.row(0));
    }

    // T=5 leaves one leftover token drawn at the default scale
    model::Codebook cb5 = init_codebook(protos, cfg4(4, 2, 5), 0.0, 7);
    CHECK(cb5.head_tokens[0].rows() == 5);
    CHECK(cb5.head_tokens[0].row(4) != protos[0].p.row(0));
    CHECK(cb5.head_tokens[0].row(4) != protos[1].p.row(0));

    // projection averages the heads
    Matrix concat(1, 8);
    concat << 1, 2, 3, 4, 5, 6, 7, 8;
    Matrix projected = concat * cb.projection;
    Matrix expected(1, 4);
    expected << 3, 4, 5, 6;
    CHECK(projected.isApprox(expected, 1e-14));
}

TEST_CASE("init_codebook: per-head noise is fresh, seeds reproduce, T<K rejected") {
    std::vector<DomainPrototype> protos(2);
    protos[0].client_id = 0;
    protos[0].p = Matrix::Ones(1, 4);
    protos[1].client_id = 1;
    protos[1].p = Matrix::Ones(1, 4) * 2.0;

    model::Codebook a = init_codebook(protos, cfg4(4, 2, 4), 0.1, 21);
    model::Codebook b = init_codebook(protos, cfg4(4, 2, 4), 0.1, 21);
    CHECK(a.head_tokens[0] == b.head_tokens[0]);
    CHECK(a.head_tokens[1] == b.head_tokens[1]);
    CHECK(a.head_tokens[0] != a.head_tokens[1]);  // heads decorrelate

    try {
        (void)init_codebook(protos, cfg4(4, 2, 1), 0.1, 21);
        FAIL("expected ContractViolation");
    } catch (const ContractViolation& e) {
        CHECK(std::string(e.what()).find("raise the codebook size") != std::string::npos);
    }
}

TEST_CASE("prototype serialization round trip") {
    namespace fs = std::filesystem;
    std::vector<DomainPrototype> protos(3);
    Rng rng(31);
    for (int k = 0; k < 3; ++k) {
        protos[static_cast<std::size_t>(k)].client_id = k;
        protos[static_cast<std::size_t>(k)].p = rng.uniform_matrix(1, 5, -1.0, 1.0);
        protos[static_cast<std::size_t>(k)].source_digest = 77 + static_cast<std::uint64_t>(k);
    }
    fs::path file = fs::temp_directory_path() / "fedgfm_protos.bin";
    save_prototypes(protos, file);
    std::vector<DomainPrototype> loaded = load_prototypes(file);
    REQUIRE(loaded.size() == 3);
    for (int k = 0; k < 3; ++k) {
        CHECK(loaded[static_cast<std::size_t>(k)].client_id == k);
        CHECK(loaded[static_cast<std::size_t>(k)].source_digest == 77 + static_cast<std::uint64_t>(k));
        CHECK(std::memcmp(loaded[static_cast<std::size_t>(k)].p.data(), protos[static_cast<std::size_t>(k)].p.data(),
                          sizeof(double) * 5) == 0);
    }
    fs::remove(file);
}

TEST_CASE("theorem 1: identical domains give zero distance and zero gap") {
    graph::SyntheticDomainSpec s;
    s.name = "same";
    s.node_count = 20;
    s.block_sizes = {10, 10};
    s.class_count = 2;
    s.feature_dim = 6;
    s.seed = 5;
    SeparabilityReport r = check_theorem1({s, s}, 20, cfg4(6, 2, 4), 9);
    CHECK(r.mean_sq_distance(0, 1) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.feature_gap(0, 1) == 0.0);
    CHECK(r.adjacency_gap(0, 1) == 0.0);
}

TEST_CASE("theorem 1: disjoint supports and contrasting topology give positive alpha in every trial") {
    auto specs = disjoint_domains(8, 2);
    SeparabilityReport r = check_theorem1(specs, 20, cfg4(8, 2, 4), 13);
    CHECK(r.min_trial_ratio > 0.0);
    CHECK(r.alpha > 0.0);
    CHECK(r.feature_gap(0, 1) > 0.0);
    CHECK(r.adjacency_gap(0, 1) > 0.0);
}

TEST_CASE("theorem 1: doubling one domain's features raises the gap, distance stays above the old bound") {
    auto specs = disjoint_domains(8, 2);
    for (auto& s : specs) s.cov_scale = 0.0;  // scaling the mean now scales features exactly
    SeparabilityReport base = check_theorem1(specs, 20, cfg4(8, 2, 4), 17);

    auto scaled = specs;
    scaled[0].mean_scale *= 2.0;
    SeparabilityReport after = check_theorem1(scaled, 20, cfg4(8, 2, 4), 17);

    double gap_base = base.feature_gap(0, 1) + base.adjacency_gap(0, 1);
    double gap_after = after.feature_gap(0, 1) + after.adjacency_gap(0, 1);
    CHECK(gap_after > gap_base);
    CHECK(after.mean_sq_distance(0, 1) >= base.alpha * gap_base);
}

TEST_CASE("theorem 2: well-separated domains favor the anchor-seeded codebook") {
    auto specs = blob_domains(12, 3);
    SeparabilityReport r = check_theorem2(specs, -1.0, 0.05, 20, cfg4(12, 2, 6), 23);
    CHECK(r.win_rate >= 0.8);
    CHECK(r.mean_difference > 0.0);
    CHECK(r.ancdai_separation_rate >= 0.0);
    CHECK(r.ancdai_separation_rate <= 1.0);
    CHECK(r.random_separation_rate >= 0.0);
    CHECK(r.random_separation_rate <= 1.0);
    // with real domain signal the anchor codebook's domain-specific excess is
    // decisively positive
    CHECK(r.ancdai_excess > 2.0 * r.ancdai_excess_stderr);
}

TEST_CASE("theorem 2: identical domains leave no domain signal to exploit") {
    // all clients share one domain identity; each codebook's cross-domain
    // separation then matches its own within-domain separation (the anchor
    // codebook still splits nodes more finely overall, so the raw rates are
    // not comparable - the domain-specific excess is)
    std::vector<graph::SyntheticDomainSpec> specs;
    for (int k = 0; k < 3; ++k) {
        graph::SyntheticDomainSpec s;
        s.name = "same";
        s.node_count = 60;
        s.block_sizes = {60};
        s.intra_p = 0.2;
        s.inter_p = 0.0;
        s.class_count = 1;
        s.feature_dim = 24;
        s.mean_scale = 2.0;
        s.cov_scale = 0.2;
        s.seed = 4040;
        specs.push_back(std::move(s));
    }
    model::ModelConfig cfg = cfg4(24, 2, 6);
    SeparabilityReport r = check_theorem2(specs, -1.0, 0.05, 30, cfg, 23);
    CHECK(std::abs(r.ancdai_excess) <= 2.0 * r.ancdai_excess_stderr + 1e-9);
    CHECK(std::abs(r.random_excess) <= 2.0 * r.random_excess_stderr + 1e-9);
    // the inequality itself still holds in the degenerate case
    CHECK(r.ancdai_separation_rate >= r.random_separation_rate);
}

TEST_CASE("theorem 2: T below the client count propagates the codebook contract") {
    auto specs = blob_domains(12, 3);
    CHECK_THROWS_AS((void)check_theorem2(specs, -1.0, 0.05, 20, cfg4(12, 2, 2), 29), ContractViolation);
}

TEST_CASE("theorem 2: separation rates are symmetric in domain order") {
    auto specs = blob_domains(8, 2);
    SeparabilityReport ab = check_theorem2(specs, -1.0, 0.05, 20, cfg4(8, 2, 4), 31);
    std::swap(specs[0], specs[1]);
    SeparabilityReport ba = check_theorem2(specs, -1.0, 0.05, 20, cfg4(8, 2, 4), 31);
    CHECK(ab.ancdai_separation_rate == ba.ancdai_separation_rate);
    CHECK(ab.random_separation_rate == ba.random_separation_rate);
    CHECK(ab.win_rate == ba.win_rate);
}
