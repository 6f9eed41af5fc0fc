#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fedgfm/gvqvae.hpp"

#include <cstring>
#include <filesystem>

using namespace fedgfm;
using namespace fedgfm::model;
using ad::Handle;
using ad::Tape;

namespace {

ModelConfig small_config(Eigen::Index d = 4, int heads = 2, int tokens = 3) {
    ModelConfig cfg;
    cfg.d = d;
    cfg.heads = heads;
    cfg.tokens_per_head = tokens;
    return cfg;
}

graph::TextAttributedGraph star_graph(Eigen::Index d) {
    graph::TextAttributedGraph g;
    g.node_count = 4;  // center 0 with 3 leaves
    g.edges = {{0, 1}, {0, 2}, {0, 3}};
    Rng rng(20);
    g.node_features = rng.uniform_matrix(4, d, -1.0, 1.0);
    g.label_level = graph::LabelLevel::node;
    g.class_count = 2;
    g.labels_int = IntVector::Zero(4);
    return g;
}

graph::TextAttributedGraph random_graph(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
    graph::SyntheticDomainSpec spec;
    spec.node_count = n;
    spec.block_sizes = {n / 2, n - n / 2};
    spec.intra_p = 0.5;
    spec.inter_p = 0.2;
    spec.class_count = 2;
    spec.feature_dim = d;
    spec.mean_scale = 1.0;
    spec.cov_scale = 0.4;
    spec.seed = seed;
    return graph::synth_domain(spec);
}

// zeroing all tensors leaves zero-norm tokens, which cosine retrieval forbids
void zero_params(GfmParams& p) {
    for (Matrix* t : p.tensors()) t->setZero();
    p.config.metric = Metric::l2;
    p.codebook.metric = Metric::l2;
}

}  // namespace

TEST_CASE("flatten/unflatten round-trips bitwise") {
    GfmParams p = GfmParams::init(small_config(), 1);
    Eigen::VectorXd flat = p.flatten();
    GfmParams q = GfmParams::init(small_config(), 2);
    CHECK(q.digest() != p.digest());
    q.unflatten(flat);
    CHECK(q.digest() == p.digest());
    CHECK(std::memcmp(q.flatten().data(), flat.data(), sizeof(double) * static_cast<std::size_t>(flat.size())) == 0);
}

TEST_CASE("checkpoint round-trips bitwise and rejects schema drift") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "fedgfm_params_test";
    fs::remove_all(dir);
    GfmParams p = GfmParams::init(small_config(6, 3, 5), 7);
    save_params(p, dir);
    GfmParams q = load_params(dir);
    CHECK(q.digest() == p.digest());
    CHECK(q.config.heads == 3);

    // corrupt the schema version
    std::ifstream in(dir / "params.json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    text.replace(text.find("\"schema\": 1"), 11, "\"schema\": 9");
    std::ofstream out(dir / "params.json", std::ios::trunc);
    out << text;
    out.close();
    CHECK_THROWS_AS((void)load_params(dir), DataError);
    fs::remove_all(dir);
}

TEST_CASE("encode: all-zero weights give all-zero embeddings") {
    GfmParams p = GfmParams::init(small_config(), 3);
    zero_params(p);
    graph::TextAttributedGraph g = star_graph(4);
    Tape t;
    GfmHandles h = register_params(t, p);
    Handle z = encode(t, h, p, g);
    CHECK(t.value(z).isZero(0.0));
}

TEST_CASE("encode: single isolated node with identity self-weight is x + bias") {
    ModelConfig cfg = small_config();
    cfg.act = Nonlinearity::identity;
    GfmParams p = GfmParams::init(cfg, 4);
    zero_params(p);
    for (auto& layer : p.encoder.layers) {
        layer.w_self = Matrix::Identity(cfg.d, cfg.d);
        layer.bias = Matrix::Ones(1, cfg.d) * 0.5;
    }

    graph::TextAttributedGraph g;
    g.node_count = 1;
    Rng rng(9);
    g.node_features = rng.uniform_matrix(1, cfg.d, -1.0, 1.0);
    g.label_level = graph::LabelLevel::node;
    g.class_count = 1;
    g.labels_int = IntVector::Zero(1);

    Tape t;
    GfmHandles h = register_params(t, p);
    Handle z = encode(t, h, p, g);
    Matrix expected = g.node_features;  // two layers, each adds 0.5
    expected.array() += 1.0;
    CHECK(t.value(z).isApprox(expected, 1e-12));
}

TEST_CASE("encode: one identity layer on a star averages the leaves into the center") {
    ModelConfig cfg = small_config();
    cfg.act = Nonlinearity::identity;
    GfmParams p = GfmParams::init(cfg, 5);
    zero_params(p);
    p.encoder.layers[0].w_self = Matrix::Identity(cfg.d, cfg.d);
    p.encoder.layers[0].w_nbr = Matrix::Identity(cfg.d, cfg.d);
    p.encoder.layers[1].w_self = Matrix::Identity(cfg.d, cfg.d);  // second layer passes through

    graph::TextAttributedGraph g = star_graph(cfg.d);
    Tape t;
    GfmHandles h = register_params(t, p);
    Handle z = encode(t, h, p, g);
    Matrix leaves_mean = (g.node_features.row(1) + g.node_features.row(2) + g.node_features.row(3)) / 3.0;
    Matrix expected_center = g.node_features.row(0) + leaves_mean;
    CHECK(t.value(z).row(0).isApprox(expected_center, 1e-12));
}

TEST_CASE("quantize: hand-checked retrieval and tie rule") {
    ModelConfig cfg = small_config(2, 1, 2);
    GfmParams p = GfmParams::init(cfg, 6);
    p.codebook.head_tokens[0] << 1.0, 0.0, 0.0, 1.0;
    p.codebook.projection = Matrix::Identity(2, 2);

    auto index_of = [&](double a, double b, Metric metric) {
        GfmParams q = p;
        q.config.metric = metric;
        q.codebook.metric = metric;
        Tape t;
        GfmHandles h = register_params(t, q);
        Matrix z(1, 2);
        z << a, b;
        QuantizeResult r = quantize(t, h, q, t.constant(z));
        return r.indices(0, 0);
    };

    CHECK(index_of(0.9, 0.1, Metric::cosine) == 0);
    CHECK(index_of(0.5, 0.5, Metric::cosine) == 0);  // tie -> lowest index
    CHECK(index_of(0.1, 0.9, Metric::cosine) == 1);

    // l2: z=(3,1) is closer to (1,0) (sqrt5) than to (0,1) (3)
    CHECK(index_of(3.0, 1.0, Metric::l2) == 0);
}

TEST_CASE("quantize: zero-norm rows fall back to l2 and are counted") {
    ModelConfig cfg = small_config(2, 1, 2);
    GfmParams p = GfmParams::init(cfg, 6);
    p.codebook.head_tokens[0] << 0.1, 0.1, 5.0, 5.0;
    p.codebook.projection = Matrix::Identity(2, 2);
    Tape t;
    GfmHandles h = register_params(t, p);
    Matrix z = Matrix::Zero(1, 2);
    QuantizeResult r = quantize(t, h, p, t.constant(z));
    CHECK(r.cosine_fallbacks == 1);
    CHECK(r.indices(0, 0) == 0);  // nearest by l2
}

TEST_CASE("quantize idempotence: tokens map to themselves under identity projection") {
    ModelConfig cfg = small_config(3, 1, 4);
    GfmParams p = GfmParams::init(cfg, 8);
    p.codebook.projection = Matrix::Identity(3, 3);
    Tape t;
    GfmHandles h = register_params(t, p);
    Handle z = t.constant(p.codebook.head_tokens[0]);
    QuantizeResult r = quantize(t, h, p, z);
    for (Eigen::Index i = 0; i < 4; ++i) CHECK(r.indices(i, 0) == static_cast<std::int32_t>(i));
    CHECK(t.value(r.z_q).isApprox(p.codebook.head_tokens[0], 1e-12));
}

TEST_CASE("decode_features: zero weights, identity construction, gradient check") {
    ModelConfig cfg = small_config();
    cfg.act = Nonlinearity::identity;
    GfmParams p = GfmParams::init(cfg, 9);

    {
        GfmParams zp = p;
        zero_params(zp);
        Tape t;
        GfmHandles h = register_params(t, zp);
        Rng rng(1);
        Handle zq = t.constant(rng.uniform_matrix(5, cfg.d, -1.0, 1.0));
        CHECK(t.value(decode_features(t, h, zp, zq)).isZero(0.0));
    }
    {
        GfmParams ip = p;
        zero_params(ip);
        ip.decoder.w1 = Matrix::Identity(cfg.d, cfg.d);
        ip.decoder.w2 = Matrix::Identity(cfg.d, cfg.d);
        Tape t;
        GfmHandles h = register_params(t, ip);
        Rng rng(2);
        Matrix zqv = rng.uniform_matrix(5, cfg.d, -1.0, 1.0);
        Handle zq = t.constant(zqv);
        CHECK(t.value(decode_features(t, h, ip, zq)).isApprox(zqv, 1e-14));
    }
    {
        Rng rng(3);
        Matrix zqv = rng.uniform_matrix(5, cfg.d, -1.0, 1.0);
        Matrix x = rng.uniform_matrix(5, cfg.d, -1.0, 1.0);
        auto build = [&](Tape& t, const std::vector<Handle>& params) {
            Handle hidden = ad::add_rowvec(t, ad::matmul(t, t.constant(zqv), params[0]), params[1]);
            Handle xhat = ad::add_rowvec(t, ad::matmul(t, hidden, params[2]), params[3]);
            Handle d = ad::sub(t, t.constant(x), xhat);
            return ad::mean_all(t, ad::hadamard(t, d, d));
        };
        GfmParams rp = GfmParams::init(cfg, 10);
        ad::FdResult r = ad::finite_difference_check(
            build, {rp.decoder.w1, rp.decoder.b1, rp.decoder.w2, rp.decoder.b2}, 1e-5);
        CHECK(r.max_rel_error < 1e-4);
    }
}

TEST_CASE("loss_feat: hand values") {
    auto eval = [](const Matrix& x, const Matrix& xhat, double gamma) {
        Tape t;
        return t.value(loss_feat(t, t.constant(x), t.constant(xhat), gamma))(0, 0);
    };
    Rng rng(4);
    Matrix x = rng.uniform_matrix(3, 4, 0.1, 1.0);
    CHECK(eval(x, x, 2.0) == doctest::Approx(0.0).epsilon(1e-12));

    Matrix a(1, 2), b(1, 2);
    a << 1.0, 0.0;
    b << 0.0, 1.0;
    CHECK(eval(a, b, 1.0) == doctest::Approx(1.0));

    Matrix c(1, 2);
    c << 1.0, 1.0;
    double expected = std::pow(1.0 - 1.0 / std::sqrt(2.0), 2.0);
    CHECK(eval(a, c, 2.0) == doctest::Approx(expected).epsilon(1e-9));
    CHECK(expected == doctest::Approx(0.085786).epsilon(1e-4));
}

TEST_CASE("loss_topo: identity adjacency with zero reconstruction gives 1.0") {
    graph::TextAttributedGraph g;
    g.node_count = 2;
    g.edges = {{0, 0}, {1, 1}};  // adjacency = I2
    g.node_features = Matrix::Zero(2, 3);
    g.label_level = graph::LabelLevel::node;
    g.class_count = 1;
    g.labels_int = IntVector::Zero(2);

    Tape t;
    Rng rng(5);
    Handle xhat = t.constant(Matrix::Zero(2, 3));
    Handle loss = loss_topo(t, g, xhat, 2000, rng);
    CHECK(t.value(loss)(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("loss_topo: saturated scores reproduce the adjacency exactly") {
    // self dots of +/-1600 saturate sigmoid to exactly 1, the cross dot of
    // -800 underflows to exactly 0, so sigma(Xhat Xhat^T) == A == I2
    graph::TextAttributedGraph g;
    g.node_count = 2;
    g.edges = {{0, 0}, {1, 1}};
    g.node_features = Matrix::Zero(2, 2);
    g.label_level = graph::LabelLevel::node;
    g.class_count = 1;
    g.labels_int = IntVector::Zero(2);

    Tape t;
    Rng rng(6);
    Matrix xv(2, 2);
    xv << 40.0, 0.0, -20.0, 40.0;
    Handle loss = loss_topo(t, g, t.constant(xv), 2000, rng);
    CHECK(t.value(loss)(0, 0) == 0.0);
}

TEST_CASE("loss_topo: sampled estimator tracks the dense value") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        graph::TextAttributedGraph g = random_graph(50, 4, seed + 100);
        Rng r1(seed), r2(seed);
        Tape t;
        Rng fr(31 + seed);
        Matrix xv = fr.uniform_matrix(50, 4, -1.0, 1.0);
        Handle dense = loss_topo(t, g, t.constant(xv), 2000, r1);
        Handle sampled = loss_topo(t, g, t.constant(xv), 10, r2);
        double dv = t.value(dense)(0, 0), sv = t.value(sampled)(0, 0);
        CHECK(relative_error(dv, sv) < 0.15);
    }
}

TEST_CASE("loss_pretrain: breakdown additivity and beta=0 independence") {
    graph::TextAttributedGraph g = random_graph(8, 4, 17);
    GfmParams p = GfmParams::init(small_config(4, 2, 3), 21);
    {
        Tape t;
        Rng rng(1);
        GfmHandles h = register_params(t, p);
        PretrainLoss l = loss_pretrain(t, h, p, g, rng);
        l.breakdown.check_additivity();  // throws on failure
        CHECK(l.breakdown.total > 0.0);
        CHECK(l.token_utilization > 0.0);
    }
    {
        GfmParams pz = p;
        pz.config.beta = 0.0;
        Tape t;
        Rng rng(1);
        GfmHandles h = register_params(t, pz);
        PretrainLoss l = loss_pretrain(t, h, pz, g, rng);
        CHECK(l.breakdown.total ==
              doctest::Approx(l.breakdown.feat + l.breakdown.topo + l.breakdown.codebook_term).epsilon(1e-12));
    }
}

TEST_CASE("routing: straight-through consistency on reconstruction terms") {
    // gradients of the reconstruction losses w.r.t. the encoder output equal
    // the gradients w.r.t. the quantized output, bitwise
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        graph::TextAttributedGraph g = random_graph(6, 4, 200 + seed);
        GfmParams p = GfmParams::init(small_config(4, 2, 3), 300 + seed);
        Tape t;
        Rng rng(seed);
        GfmHandles h = register_params(t, p);
        Handle z = encode(t, h, p, g);
        QuantizeResult q = quantize(t, h, p, z);
        Handle xhat = decode_features(t, h, p, q.st);
        Handle recon = ad::add(t, loss_feat(t, t.constant(g.node_features), xhat, p.config.gamma),
                               loss_topo(t, g, xhat, p.config.dense_threshold, rng));
        ad::GradientMap gm = t.backward(recon, {z, q.st});
        const Matrix& gz = gm.at(z);
        const Matrix& gst = gm.at(q.st);
        CHECK(std::memcmp(gz.data(), gst.data(), sizeof(double) * static_cast<std::size_t>(gz.size())) == 0);
    }
}

TEST_CASE("routing: codebook term never reaches the encoder") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        graph::TextAttributedGraph g = random_graph(6, 4, 400 + seed);
        GfmParams p = GfmParams::init(small_config(4, 2, 3), 500 + seed);
        auto encoder_grad = [&](const GfmParams& params) {
            Tape t;
            Rng rng(seed);
            GfmHandles h = register_params(t, params);
            Handle z = encode(t, h, p, g);
            QuantizeResult q = quantize(t, h, params, z);
            Handle diff = ad::sub(t, ad::stop_gradient(t, z), q.z_q);
            Handle cb = ad::mean_all(t, ad::hadamard(t, diff, diff));
            ad::GradientMap gm = t.backward(cb);
            Matrix flat(1, 0);
            for (const auto& lh : h.encoder_layers)
                for (Handle wh : lh) {
                    const Matrix& gw = gm.at(wh);
                    Matrix next(1, flat.cols() + gw.size());
                    next << flat, Eigen::Map<const Matrix>(gw.data(), 1, gw.size());
                    flat = next;
                }
            return flat;
        };
        Matrix base = encoder_grad(p);
        CHECK(base.isZero(0.0));
        GfmParams perturbed = p;
        perturbed.codebook.head_tokens[0].array() += 0.05;
        Matrix after = encoder_grad(perturbed);
        CHECK(std::memcmp(base.data(), after.data(), sizeof(double) * static_cast<std::size_t>(base.size())) == 0);
    }
}

TEST_CASE("routing: commitment term never reaches the codebook tokens") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        graph::TextAttributedGraph g = random_graph(6, 4, 600 + seed);
        GfmParams p = GfmParams::init(small_config(4, 2, 3), 700 + seed);
        auto token_grad = [&](const GfmParams& params) {
            Tape t;
            Rng rng(seed);
            GfmHandles h = register_params(t, params);
            Handle z = encode(t, h, params, g);
            QuantizeResult q = quantize(t, h, params, z);
            Handle diff = ad::sub(t, z, ad::stop_gradient(t, q.z_q));
            Handle cm = ad::mean_all(t, ad::hadamard(t, diff, diff));
            ad::GradientMap gm = t.backward(cm);
            Matrix out = gm.at(h.head_tokens[0]);
            for (std::size_t m = 1; m < h.head_tokens.size(); ++m) {
                const Matrix& gw = gm.at(h.head_tokens[m]);
                Matrix next(out.rows() + gw.rows(), out.cols());
                next << out, gw;
                out = next;
            }
            return out;
        };
        Matrix base = token_grad(p);
        CHECK(base.isZero(0.0));
        GfmParams perturbed = p;
        perturbed.encoder.layers[0].w_self.array() += 0.05;
        Matrix after = token_grad(perturbed);
        CHECK(std::memcmp(base.data(), after.data(), sizeof(double) * static_cast<std::size_t>(base.size())) == 0);
    }
}

TEST_CASE("full pretraining gradient matches finite differences with frozen indices") {
    graph::TextAttributedGraph g = random_graph(6, 8, 900);
    ModelConfig cfg = small_config(8, 2, 4);
    GfmParams p = GfmParams::init(cfg, 901);

    // capture the base-point retrieval so every evaluation shares it
    Eigen::MatrixX<std::int32_t> frozen;
    {
        Tape t;
        Rng rng(0);
        GfmHandles h = register_params(t, p);
        PretrainLoss l = loss_pretrain(t, h, p, g, rng);
        frozen = l.quant.indices;
    }

    std::vector<Matrix> params;
    for (const Matrix* m : p.tensors()) params.push_back(*m);
    auto build = [&](Tape& t, const std::vector<Handle>& hs) {
        GfmParams local = p;
        auto ts = local.tensors();
        GfmHandles h;
        std::size_t at = 0;
        for (auto& l : local.encoder.layers) {
            (void)l;
            h.encoder_layers.push_back({hs[at], hs[at + 1], hs[at + 2], hs[at + 3]});
            at += 4;
        }
        for (std::int32_t m = 0; m < local.config.heads; ++m) h.head_tokens.push_back(hs[at++]);
        h.projection = hs[at++];
        h.dec_w1 = hs[at++];
        h.dec_b1 = hs[at++];
        h.dec_w2 = hs[at++];
        h.dec_b2 = hs[at++];
        (void)ts;
        Rng rng(0);
        PretrainLoss l = loss_pretrain(t, h, local, g, rng, -1, &frozen);
        return l.total;
    };
    ad::FdResult r = ad::finite_difference_check(build, params, 1e-5);
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("local_pretrain_step: zero lr freezes params, epochs counted, loss decreases") {
    graph::TextAttributedGraph g = random_graph(10, 4, 950);
    GfmParams p = GfmParams::init(small_config(4, 2, 4), 951);

    GfmParams frozen = p;
    Optimizer opt;
    Rng rng(1);
    LocalTrainResult r0 = local_pretrain_step(frozen, g, 0.0, 1, opt, rng);
    CHECK(frozen.digest() == p.digest());
    CHECK_FALSE(r0.diverged);

    GfmParams two = p;
    Optimizer opt2;
    LocalTrainResult r2 = local_pretrain_step(two, g, 1e-3, 2, opt2, rng);
    CHECK(r2.history.size() == 2);

    GfmParams fifty = p;
    Optimizer opt3;
    LocalTrainResult r50 = local_pretrain_step(fifty, g, 5e-3, 50, opt3, rng);
    REQUIRE(r50.history.size() == 50);
    CHECK(r50.history.back().total < r50.history.front().total);
}

TEST_CASE("adam optimizer also reduces the loss") {
    graph::TextAttributedGraph g = random_graph(10, 4, 960);
    GfmParams p = GfmParams::init(small_config(4, 2, 4), 961);
    Optimizer opt;
    opt.kind = OptimizerKind::adam;
    Rng rng(1);
    LocalTrainResult r = local_pretrain_step(p, g, 1e-3, 30, opt, rng);
    REQUIRE(r.history.size() == 30);
    CHECK(r.history.back().total < r.history.front().total);
}
