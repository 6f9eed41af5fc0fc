#include "fedgfm/gvqvae.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <unordered_set>

namespace fedgfm::model {

namespace fs = std::filesystem;
using nlohmann::json;
using ad::Handle;
using ad::Tape;

std::string to_string(Metric m) { return m == Metric::cosine ? "cosine" : "l2"; }

Metric metric_from_string(const std::string& s) {
    if (s == "cosine") return Metric::cosine;
    if (s == "l2") return Metric::l2;
    throw ConfigError("unknown metric '" + s + "'");
}

std::string to_string(Nonlinearity a) {
    switch (a) {
        case Nonlinearity::relu: return "relu";
        case Nonlinearity::sigmoid: return "sigmoid";
        case Nonlinearity::identity: return "identity";
    }
    throw ContractViolation("unknown nonlinearity");
}

Nonlinearity nonlinearity_from_string(const std::string& s) {
    if (s == "relu") return Nonlinearity::relu;
    if (s == "sigmoid") return Nonlinearity::sigmoid;
    if (s == "identity") return Nonlinearity::identity;
    throw ConfigError("unknown nonlinearity '" + s + "'");
}

double ModelConfig::resolved_token_scale() const {
    return token_init_scale > 0.0 ? token_init_scale : 1.0 / std::sqrt(static_cast<double>(d));
}

void ModelConfig::validate() const {
    if (d < 1) throw ConfigError("model: d must be positive");
    if (heads < 1) throw ConfigError("model: heads must be positive");
    if (tokens_per_head < 1) throw ConfigError("model: tokens_per_head must be positive");
    if (gamma <= 0.0) throw ConfigError("model: gamma must be positive");
    if (beta < 0.0) throw ConfigError("model: beta must be non-negative");
    if (dense_threshold < 1) throw ConfigError("model: dense_threshold must be positive");
}

void Codebook::validate() const {
    if (tokens_per_head < 1) throw ContractViolation("codebook: tokens_per_head must be >= 1");
    if (static_cast<std::int32_t>(head_tokens.size()) != heads)
        throw ContractViolation("codebook: head count mismatch");
    for (const Matrix& t : head_tokens) {
        if (t.rows() != tokens_per_head) throw ContractViolation("codebook: token rows mismatch");
        if (metric == Metric::cosine)
            for (Eigen::Index i = 0; i < t.rows(); ++i)
                if (t.row(i).norm() < 1e-12)
                    throw ContractViolation("codebook: zero-norm token under cosine metric");
    }
}

GfmParams GfmParams::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    double wscale = 1.0 / std::sqrt(static_cast<double>(cfg.d));

    GfmParams p;
    p.config = cfg;
    for (int l = 0; l < 2; ++l) {
        EncoderLayerParams layer;
        layer.w_self = rng.normal_matrix(cfg.d, cfg.d, wscale);
        layer.w_nbr = rng.normal_matrix(cfg.d, cfg.d, wscale);
        layer.w_edge = rng.normal_matrix(cfg.d, cfg.d, wscale);
        layer.bias = Matrix::Zero(1, cfg.d);
        p.encoder.layers.push_back(std::move(layer));
    }
    p.codebook.heads = cfg.heads;
    p.codebook.tokens_per_head = cfg.tokens_per_head;
    p.codebook.metric = cfg.metric;
    for (int m = 0; m < cfg.heads; ++m)
        p.codebook.head_tokens.push_back(rng.normal_matrix(cfg.tokens_per_head, cfg.d, cfg.resolved_token_scale()));
    p.codebook.projection = rng.normal_matrix(static_cast<Eigen::Index>(cfg.heads) * cfg.d, cfg.d,
                                              1.0 / std::sqrt(static_cast<double>(cfg.heads) * static_cast<double>(cfg.d)));
    p.decoder.w1 = rng.normal_matrix(cfg.d, cfg.d, wscale);
    p.decoder.b1 = Matrix::Zero(1, cfg.d);
    p.decoder.w2 = rng.normal_matrix(cfg.d, cfg.d, wscale);
    p.decoder.b2 = Matrix::Zero(1, cfg.d);
    p.validate();
    return p;
}

std::vector<const Matrix*> GfmParams::tensors() const {
    std::vector<const Matrix*> out;
    for (const auto& l : encoder.layers) {
        out.push_back(&l.w_self);
        out.push_back(&l.w_nbr);
        out.push_back(&l.w_edge);
        out.push_back(&l.bias);
    }
    for (const auto& t : codebook.head_tokens) out.push_back(&t);
    out.push_back(&codebook.projection);
    out.push_back(&decoder.w1);
    out.push_back(&decoder.b1);
    out.push_back(&decoder.w2);
    out.push_back(&decoder.b2);
    return out;
}

std::vector<Matrix*> GfmParams::tensors() {
    std::vector<Matrix*> out;
    for (auto& l : encoder.layers) {
        out.push_back(&l.w_self);
        out.push_back(&l.w_nbr);
        out.push_back(&l.w_edge);
        out.push_back(&l.bias);
    }
    for (auto& t : codebook.head_tokens) out.push_back(&t);
    out.push_back(&codebook.projection);
    out.push_back(&decoder.w1);
    out.push_back(&decoder.b1);
    out.push_back(&decoder.w2);
    out.push_back(&decoder.b2);
    return out;
}

Eigen::Index GfmParams::flat_size() const {
    Eigen::Index n = 0;
    for (const Matrix* t : tensors()) n += t->size();
    return n;
}

Eigen::VectorXd GfmParams::flatten() const {
    Eigen::VectorXd flat(flat_size());
    Eigen::Index at = 0;
    for (const Matrix* t : tensors()) {
        std::memcpy(flat.data() + at, t->data(), sizeof(double) * static_cast<std::size_t>(t->size()));
        at += t->size();
    }
    return flat;
}

void GfmParams::unflatten(const Eigen::VectorXd& flat) {
    if (flat.size() != flat_size())
        throw ContractViolation("unflatten: expected " + std::to_string(flat_size()) + " values, got " +
                                std::to_string(flat.size()));
    Eigen::Index at = 0;
    for (Matrix* t : tensors()) {
        std::memcpy(t->data(), flat.data() + at, sizeof(double) * static_cast<std::size_t>(t->size()));
        at += t->size();
    }
}

std::uint64_t GfmParams::digest() const {
    std::uint64_t h = fnv1a_init();
    for (const Matrix* t : tensors()) h = fnv1a_matrix(h, *t);
    return h;
}

void GfmParams::validate() const {
    config.validate();
    if (encoder.layers.size() != 2) throw ContractViolation("encoder must have exactly 2 layers");
    for (const auto& l : encoder.layers) {
        if (l.w_self.rows() != config.d || l.w_self.cols() != config.d ||
            l.w_nbr.rows() != config.d || l.w_edge.rows() != config.d ||
            l.bias.cols() != config.d)
            throw ContractViolation("encoder layer shape mismatch");
        for (const Matrix* m : {&l.w_self, &l.w_nbr, &l.w_edge, &l.bias})
            if (!m->allFinite()) throw NumericError("non-finite encoder parameter");
    }
    codebook.validate();
    if (codebook.projection.rows() != static_cast<Eigen::Index>(config.heads) * config.d ||
        codebook.projection.cols() != config.d)
        throw ContractViolation("projection shape mismatch");
    for (const Matrix* m : {&decoder.w1, &decoder.b1, &decoder.w2, &decoder.b2})
        if (!m->allFinite()) throw NumericError("non-finite decoder parameter");
}

// ---- checkpoint io ---------------------------------------------------------

void save_params(const GfmParams& p, const fs::path& dir) {
    p.validate();
    fs::create_directories(dir);
    json shapes = json::array();
    for (const Matrix* t : p.tensors()) shapes.push_back({t->rows(), t->cols()});
    json manifest = {
        {"schema", 1},
        {"d", p.config.d},
        {"heads", p.config.heads},
        {"tokens_per_head", p.config.tokens_per_head},
        {"metric", to_string(p.config.metric)},
        {"nonlinearity", to_string(p.config.act)},
        {"gamma", p.config.gamma},
        {"beta", p.config.beta},
        {"dense_threshold", p.config.dense_threshold},
        {"token_init_scale", p.config.token_init_scale},
        {"shapes", shapes},
    };
    std::ofstream mf(dir / "params.json", std::ios::trunc);
    mf << manifest.dump(2) << "\n";
    if (!mf) throw DataError("cannot write " + (dir / "params.json").string());

    Eigen::VectorXd flat = p.flatten();
    std::ofstream bf(dir / "params.f64", std::ios::binary | std::ios::trunc);
    bf.write(reinterpret_cast<const char*>(flat.data()), static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(flat.size())));
    if (!bf) throw DataError("cannot write " + (dir / "params.f64").string());
}

GfmParams load_params(const fs::path& dir) {
    std::ifstream mf(dir / "params.json");
    if (!mf) throw DataError("missing parameter manifest at " + (dir / "params.json").string());
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw DataError("malformed parameter manifest: " + std::string(e.what()));
    }
    int schema = manifest.value("schema", -1);
    if (schema != 1)
        throw DataError("parameter schema version mismatch: file has " + std::to_string(schema) +
                        ", reader expects 1");

    ModelConfig cfg;
    cfg.d = manifest.at("d").get<Eigen::Index>();
    cfg.heads = manifest.at("heads").get<std::int32_t>();
    cfg.tokens_per_head = manifest.at("tokens_per_head").get<std::int32_t>();
    cfg.metric = metric_from_string(manifest.at("metric").get<std::string>());
    cfg.act = nonlinearity_from_string(manifest.at("nonlinearity").get<std::string>());
    cfg.gamma = manifest.at("gamma").get<double>();
    cfg.beta = manifest.at("beta").get<double>();
    cfg.dense_threshold = manifest.at("dense_threshold").get<Eigen::Index>();
    cfg.token_init_scale = manifest.at("token_init_scale").get<double>();

    GfmParams p = GfmParams::init(cfg, 0);
    json shapes = manifest.at("shapes");
    auto ts = p.tensors();
    if (shapes.size() != ts.size()) throw DataError("parameter manifest shape list mismatch");
    for (std::size_t i = 0; i < ts.size(); ++i)
        if (ts[i]->rows() != shapes[i][0].get<Eigen::Index>() || ts[i]->cols() != shapes[i][1].get<Eigen::Index>())
            throw DataError("parameter shape mismatch at tensor " + std::to_string(i));

    std::ifstream bf(dir / "params.f64", std::ios::binary);
    if (!bf) throw DataError("missing parameter blob at " + (dir / "params.f64").string());
    Eigen::VectorXd flat(p.flat_size());
    bf.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(flat.size())));
    if (bf.gcount() != static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(flat.size())))
        throw DataError("parameter blob truncated at byte offset " + std::to_string(bf.gcount()));
    p.unflatten(flat);
    return p;
}

// ---- forward pieces --------------------------------------------------------

GfmHandles register_params(Tape& tape, const GfmParams& p) {
    p.validate();
    GfmHandles h;
    for (const auto& l : p.encoder.layers) {
        std::array<Handle, 4> lh = {tape.parameter(l.w_self), tape.parameter(l.w_nbr),
                                    tape.parameter(l.w_edge), tape.parameter(l.bias)};
        h.encoder_layers.push_back(lh);
        for (Handle x : lh) h.ordered.push_back(x);
    }
    for (const auto& t : p.codebook.head_tokens) {
        h.head_tokens.push_back(tape.parameter(t));
        h.ordered.push_back(h.head_tokens.back());
    }
    h.projection = tape.parameter(p.codebook.projection);
    h.ordered.push_back(h.projection);
    h.dec_w1 = tape.parameter(p.decoder.w1);
    h.dec_b1 = tape.parameter(p.decoder.b1);
    h.dec_w2 = tape.parameter(p.decoder.w2);
    h.dec_b2 = tape.parameter(p.decoder.b2);
    h.ordered.push_back(h.dec_w1);
    h.ordered.push_back(h.dec_b1);
    h.ordered.push_back(h.dec_w2);
    h.ordered.push_back(h.dec_b2);
    return h;
}

namespace {

Handle apply_act(Tape& tape, Nonlinearity act, Handle x) {
    switch (act) {
        case Nonlinearity::relu: return ad::relu(tape, x);
        case Nonlinearity::sigmoid: return ad::sigmoid(tape, x);
        case Nonlinearity::identity: return x;
    }
    throw ContractViolation("unknown nonlinearity");
}

}  // namespace

Handle encode(Tape& tape, const GfmHandles& h, const GfmParams& p, const graph::TextAttributedGraph& g,
              Handle features) {
    if (g.feature_dim() != p.config.d)
        throw ContractViolation("encode: graph dimension " + std::to_string(g.feature_dim()) +
                                " does not match model d=" + std::to_string(p.config.d));
    Handle x = features >= 0 ? features : tape.constant(g.node_features);
    Handle nbr_op = tape.constant(g.neighbor_mean_operator());
    Handle edge_mean = -1;
    if (g.has_edge_features()) edge_mean = tape.constant(g.mean_incident_edge_features());

    Handle hcur = x;
    for (std::size_t l = 0; l < h.encoder_layers.size(); ++l) {
        const auto& lh = h.encoder_layers[l];
        Handle self_term = ad::matmul(tape, hcur, lh[0]);
        Handle nbr_sum = ad::matmul(tape, nbr_op, hcur);
        if (edge_mean >= 0) nbr_sum = ad::add(tape, nbr_sum, ad::matmul(tape, edge_mean, lh[2]));
        Handle nbr_term = ad::matmul(tape, nbr_sum, lh[1]);
        Handle pre = ad::add_rowvec(tape, ad::add(tape, self_term, nbr_term), lh[3]);
        hcur = (l + 1 == h.encoder_layers.size()) ? pre : apply_act(tape, p.config.act, pre);
    }
    return hcur;
}

std::vector<std::int32_t> nearest_tokens(const Matrix& z, const Matrix& tokens, Metric metric,
                                         int* fallbacks) {
    std::vector<std::int32_t> idx(static_cast<std::size_t>(z.rows()), 0);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        Metric node_metric = metric;
        if (metric == Metric::cosine && z.row(i).norm() < 1e-12) {
            node_metric = Metric::l2;
            if (fallbacks) ++*fallbacks;
        }
        std::int32_t best = 0;
        double best_score = 0.0;
        for (Eigen::Index t = 0; t < tokens.rows(); ++t) {
            double score;
            if (node_metric == Metric::cosine) {
                double nz = std::max(z.row(i).norm(), 1e-12);
                double nt = std::max(tokens.row(t).norm(), 1e-12);
                score = z.row(i).dot(tokens.row(t)) / (nz * nt);
            } else {
                score = -(z.row(i) - tokens.row(t)).squaredNorm();
            }
            if (t == 0 || score > best_score) {
                best = static_cast<std::int32_t>(t);
                best_score = score;
            }
        }
        idx[static_cast<std::size_t>(i)] = best;
    }
    return idx;
}

namespace {

QuantizeResult quantize_impl(Tape& tape, const GfmHandles& h, const GfmParams& p, Handle z,
                             const Eigen::MatrixX<std::int32_t>* frozen) {
    const Matrix& zv = tape.value(z);
    if (!zv.allFinite()) throw NumericError("quantize: non-finite embeddings");
    if (zv.cols() != p.config.d) throw ContractViolation("quantize: embedding dimension mismatch");

    QuantizeResult out;
    out.indices.resize(zv.rows(), p.config.heads);
    std::vector<Handle> head_outputs;
    for (std::int32_t m = 0; m < p.config.heads; ++m) {
        std::vector<std::int32_t> idx;
        if (frozen) {
            idx.assign(frozen->col(m).data(), frozen->col(m).data() + frozen->rows());
        } else {
            idx = nearest_tokens(zv, tape.value(h.head_tokens[static_cast<std::size_t>(m)]), p.config.metric,
                           &out.cosine_fallbacks);
        }
        tape.record_discrete(idx.data(), idx.size());
        for (Eigen::Index i = 0; i < zv.rows(); ++i) out.indices(i, m) = idx[static_cast<std::size_t>(i)];
        head_outputs.push_back(ad::gather_rows(tape, h.head_tokens[static_cast<std::size_t>(m)], std::move(idx)));
    }
    Handle cat = p.config.heads == 1 ? head_outputs[0] : ad::concat_cols(tape, head_outputs);
    out.z_q = ad::matmul(tape, cat, h.projection);
    out.st = ad::straight_through(tape, z, out.z_q);
    return out;
}

}  // namespace

QuantizeResult quantize(Tape& tape, const GfmHandles& h, const GfmParams& p, Handle z) {
    return quantize_impl(tape, h, p, z, nullptr);
}

QuantizeResult quantize_with_indices(Tape& tape, const GfmHandles& h, const GfmParams& p, Handle z,
                                     const Eigen::MatrixX<std::int32_t>& indices) {
    if (indices.rows() != tape.value(z).rows() || indices.cols() != p.config.heads)
        throw ContractViolation("quantize_with_indices: index shape mismatch");
    return quantize_impl(tape, h, p, z, &indices);
}

Handle decode_features(Tape& tape, const GfmHandles& h, const GfmParams& p, Handle z_q) {
    Handle hidden = apply_act(tape, p.config.act, ad::add_rowvec(tape, ad::matmul(tape, z_q, h.dec_w1), h.dec_b1));
    return ad::add_rowvec(tape, ad::matmul(tape, hidden, h.dec_w2), h.dec_b2);
}

Handle loss_feat(Tape& tape, Handle x, Handle x_hat, double gamma) {
    Handle c = ad::rowwise_cosine(tape, x, x_hat);
    Handle ones = tape.constant(Matrix::Ones(tape.value(c).rows(), 1));
    return ad::mean_all(tape, ad::pow_const(tape, ad::sub(tape, ones, c), gamma));
}

Handle loss_topo(Tape& tape, const graph::TextAttributedGraph& g, Handle x_hat,
                 Eigen::Index dense_threshold, Rng& rng) {
    const Eigen::Index n = g.node_count;
    if (tape.value(x_hat).rows() != n) throw ContractViolation("loss_topo: row count mismatch");

    if (n <= dense_threshold) {
        Handle a = tape.constant(g.dense_adjacency());
        Handle scores = ad::sigmoid(tape, ad::matmul(tape, x_hat, ad::transpose(tape, x_hat)));
        Handle diff = ad::sub(tape, a, scores);
        return ad::sum_all(tape, ad::hadamard(tape, diff, diff));
    }

    // sampled estimator: every positive entry, equally many sampled zeros
    std::vector<std::int32_t> pi, pj;
    std::unordered_set<std::int64_t> pos_keys;
    for (const auto& [u, v] : g.edges) {
        pi.push_back(u);
        pj.push_back(v);
        pos_keys.insert(static_cast<std::int64_t>(u) * n + v);
        if (u != v) {
            pi.push_back(v);
            pj.push_back(u);
            pos_keys.insert(static_cast<std::int64_t>(v) * n + u);
        }
    }
    std::int64_t pos_count = static_cast<std::int64_t>(pi.size());
    std::int64_t neg_total = static_cast<std::int64_t>(n) * n - pos_count;
    std::int64_t want = pos_count > 0 ? pos_count : std::min<std::int64_t>(n, 1024);
    want = std::min(want, neg_total);

    std::vector<std::int32_t> ni, nj;
    while (static_cast<std::int64_t>(ni.size()) < want) {
        std::int32_t i = static_cast<std::int32_t>(rng.uniform_int(n));
        std::int32_t j = static_cast<std::int32_t>(rng.uniform_int(n));
        if (pos_keys.count(static_cast<std::int64_t>(i) * n + j)) continue;
        ni.push_back(i);
        nj.push_back(j);
    }

    Handle loss = tape.constant(Matrix::Zero(1, 1));
    if (pos_count > 0) {
        Handle u = ad::gather_rows(tape, x_hat, pi);
        Handle v = ad::gather_rows(tape, x_hat, pj);
        Handle s = ad::sigmoid(tape, ad::rowwise_dot(tape, u, v));
        Handle d = ad::sub(tape, tape.constant(Matrix::Ones(static_cast<Eigen::Index>(pos_count), 1)), s);
        loss = ad::add(tape, loss, ad::sum_all(tape, ad::hadamard(tape, d, d)));
    }
    if (!ni.empty()) {
        Handle u = ad::gather_rows(tape, x_hat, ni);
        Handle v = ad::gather_rows(tape, x_hat, nj);
        Handle s = ad::sigmoid(tape, ad::rowwise_dot(tape, u, v));
        double w = static_cast<double>(neg_total) / static_cast<double>(ni.size());
        loss = ad::add(tape, loss, ad::scale(tape, ad::sum_all(tape, ad::hadamard(tape, s, s)), w));
    }
    return loss;
}

void LossBreakdown::check_additivity() const {
    double sum = feat + topo + codebook_term + beta * commitment_term;
    if (relative_error(total, sum) > 1e-10)
        throw NumericError("loss breakdown does not add up: total=" + std::to_string(total) +
                           " parts=" + std::to_string(sum));
}

PretrainLoss loss_pretrain(Tape& tape, const GfmHandles& h, const GfmParams& p,
                           const graph::TextAttributedGraph& g, Rng& rng, Handle features,
                           const Eigen::MatrixX<std::int32_t>* frozen_indices) {
    if (g.node_count < 1) throw ContractViolation("loss_pretrain: empty graph");
    PretrainLoss out;
    out.z = encode(tape, h, p, g, features);
    out.quant = frozen_indices ? quantize_with_indices(tape, h, p, out.z, *frozen_indices)
                               : quantize(tape, h, p, out.z);
    Handle x_hat = decode_features(tape, h, p, out.quant.st);

    // reconstruction targets the raw attributes even when the encoder input
    // was prompt-augmented
    out.feat = loss_feat(tape, tape.constant(g.node_features), x_hat, p.config.gamma);
    out.topo = loss_topo(tape, g, x_hat, p.config.dense_threshold, rng);

    double inv_n = 1.0 / static_cast<double>(g.node_count);
    Handle cb_diff = ad::sub(tape, ad::stop_gradient(tape, out.z), out.quant.z_q);
    out.codebook = ad::scale(tape, ad::sum_all(tape, ad::hadamard(tape, cb_diff, cb_diff)), inv_n);
    Handle cm_diff = ad::sub(tape, out.z, ad::stop_gradient(tape, out.quant.z_q));
    out.commitment = ad::scale(tape, ad::sum_all(tape, ad::hadamard(tape, cm_diff, cm_diff)), inv_n);

    out.total = ad::add(tape, ad::add(tape, out.feat, out.topo),
                        ad::add(tape, out.codebook, ad::scale(tape, out.commitment, p.config.beta)));

    out.breakdown.total = tape.value(out.total)(0, 0);
    out.breakdown.feat = tape.value(out.feat)(0, 0);
    out.breakdown.topo = tape.value(out.topo)(0, 0);
    out.breakdown.codebook_term = tape.value(out.codebook)(0, 0);
    out.breakdown.commitment_term = tape.value(out.commitment)(0, 0);
    out.breakdown.gamma = p.config.gamma;
    out.breakdown.beta = p.config.beta;
    out.breakdown.check_additivity();

    std::set<std::pair<std::int32_t, std::int32_t>> used;
    for (Eigen::Index i = 0; i < out.quant.indices.rows(); ++i)
        for (Eigen::Index m = 0; m < out.quant.indices.cols(); ++m)
            used.insert({static_cast<std::int32_t>(m), out.quant.indices(i, m)});
    out.token_utilization = static_cast<double>(used.size()) /
                            static_cast<double>(p.config.heads * p.config.tokens_per_head);
    return out;
}

// ---- optimizer and local training -------------------------------------------

void Optimizer::step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, double lr) {
    if (params.size() != grads.size()) throw ContractViolation("optimizer: param/grad count mismatch");
    if (kind == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < params.size(); ++i) *params[i] -= lr * *grads[i];
        return;
    }
    if (m.empty()) {
        for (const Matrix* p : params) {
            m.push_back(Matrix::Zero(p->rows(), p->cols()));
            v.push_back(Matrix::Zero(p->rows(), p->cols()));
        }
    }
    if (m.size() != params.size()) throw ContractViolation("optimizer: state size mismatch");
    step_count += 1;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * *grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i]->cwiseProduct(*grads[i]);
        Matrix mhat = m[i] / bc1;
        Matrix vhat = v[i] / bc2;
        *params[i] -= lr * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
    }
}

LocalTrainResult local_pretrain_step(GfmParams& params, const graph::TextAttributedGraph& g, double lr,
                                     int epochs, Optimizer& opt, Rng& rng, prompt::PromptSet* prompts) {
    if (lr < 0.0) throw ContractViolation("local_pretrain_step: lr must be non-negative");
    if (epochs < 1) throw ContractViolation("local_pretrain_step: epochs must be >= 1");

    LocalTrainResult result;
    for (int e = 0; e < epochs; ++e) {
        GfmParams snapshot = params;
        prompt::PromptSet prompt_snapshot;
        if (prompts) prompt_snapshot = *prompts;
        try {
            Tape tape;
            GfmHandles h = register_params(tape, params);
            prompt::PromptHandles ph;
            Handle features = -1;
            if (prompts) {
                ph = prompt::register_prompts(tape, *prompts);
                features = prompt::apply_prompts_local(tape, ph, tape.constant(g.node_features));
            }
            PretrainLoss loss = loss_pretrain(tape, h, params, g, rng, features);
            ad::GradientMap grads = tape.backward(loss.total);

            std::vector<Matrix*> ps = params.tensors();
            std::vector<const Matrix*> gs;
            gs.reserve(ps.size());
            for (std::size_t i = 0; i < ps.size(); ++i) gs.push_back(&grads.at(h.ordered[i]));
            if (prompts) {
                ps.push_back(&prompts->prompts);
                ps.push_back(&prompts->projections);
                gs.push_back(&grads.at(ph.prompts));
                gs.push_back(&grads.at(ph.projections));
            }
            opt.step(ps, gs, lr);
            for (Matrix* p : ps)
                if (!p->allFinite()) throw NumericError("parameter became non-finite after update");
            result.history.push_back(loss.breakdown);
        } catch (const NumericError&) {
            params = snapshot;
            if (prompts) *prompts = prompt_snapshot;
            result.diverged = true;
            break;
        }
    }
    return result;
}

Matrix embed(const GfmParams& params, const graph::TextAttributedGraph& g, const prompt::PromptPool* pool,
             Eigen::Index top_k) {
    Tape tape;
    GfmHandles h = register_params(tape, params);
    Handle features = -1;
    if (pool) features = tape.constant(prompt::apply_pool(*pool, g.node_features, top_k));
    Handle z = encode(tape, h, params, g, features);
    QuantizeResult q = quantize(tape, h, params, z);
    return tape.value(q.z_q);
}

Matrix encoder_embeddings(const GfmParams& params, const graph::TextAttributedGraph& g,
                          const prompt::PromptPool* pool, Eigen::Index top_k) {
    Tape tape;
    GfmHandles h = register_params(tape, params);
    Handle features = -1;
    if (pool) features = tape.constant(prompt::apply_pool(*pool, g.node_features, top_k));
    return tape.value(encode(tape, h, params, g, features));
}

}  // namespace fedgfm::model
