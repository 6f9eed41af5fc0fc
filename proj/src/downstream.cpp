#include "fedgfm/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace fedgfm::task {

using model::GfmParams;

std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::node_cls: return "node_cls";
        case TaskKind::edge_cls: return "edge_cls";
        case TaskKind::graph_cls_multitask: return "graph_cls_multitask";
    }
    throw ContractViolation("unknown task kind");
}

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "node_cls") return TaskKind::node_cls;
    if (s == "edge_cls") return TaskKind::edge_cls;
    if (s == "graph_cls_multitask") return TaskKind::graph_cls_multitask;
    throw ConfigError("unknown task kind '" + s + "'");
}

TaskKind task_kind_for(const graph::TextAttributedGraph& g) {
    switch (g.label_level) {
        case graph::LabelLevel::node: return TaskKind::node_cls;
        case graph::LabelLevel::edge: return TaskKind::edge_cls;
        case graph::LabelLevel::graph: return TaskKind::graph_cls_multitask;
    }
    throw ContractViolation("unknown label level");
}

TaskHead TaskHead::make(TaskKind kind, Eigen::Index d, Eigen::Index arity, std::uint64_t seed) {
    if (arity < 1) throw ContractViolation("task head needs arity >= 1");
    Rng rng(seed);
    TaskHead h;
    h.kind = kind;
    h.weight = rng.normal_matrix(d, arity, 1.0 / std::sqrt(static_cast<double>(d)));
    h.bias = Matrix::Zero(1, arity);
    return h;
}

std::uint64_t TaskHead::digest() const {
    std::uint64_t h = fnv1a_init();
    h = fnv1a_u64(h, static_cast<std::uint64_t>(kind));
    h = fnv1a_matrix(h, weight);
    h = fnv1a_matrix(h, bias);
    return h;
}

std::vector<std::int32_t> UnitData::unit_classes() const {
    if (kind == TaskKind::graph_cls_multitask)
        return std::vector<std::int32_t>(static_cast<std::size_t>(unit_count()), -1);
    std::vector<std::int32_t> out(static_cast<std::size_t>(labels.size()));
    for (Eigen::Index i = 0; i < labels.size(); ++i) out[static_cast<std::size_t>(i)] = labels(i);
    return out;
}

UnitData extract_units(const GfmParams& gfm, const prompt::PromptPool* pool,
                       const graph::TextAttributedGraph& g, Eigen::Index top_k) {
    UnitData u;
    u.kind = task_kind_for(g);
    u.arity = g.class_count;
    Matrix z = model::embed(gfm, g, pool, top_k);
    switch (u.kind) {
        case TaskKind::node_cls:
            u.embeddings = z;
            u.labels = g.labels_int;
            break;
        case TaskKind::edge_cls: {
            u.embeddings.resize(g.edge_count(), z.cols());
            for (std::size_t e = 0; e < g.edges.size(); ++e)
                u.embeddings.row(static_cast<Eigen::Index>(e)) =
                    0.5 * (z.row(g.edges[e].first) + z.row(g.edges[e].second));
            u.labels = g.labels_int;
            break;
        }
        case TaskKind::graph_cls_multitask:
            u.embeddings = z.colwise().mean();
            u.task_labels = g.labels_float;
            break;
    }
    return u;
}

UnitData extract_units(const GfmParams& gfm, const prompt::PromptPool* pool,
                       const graph::GraphCollection& c, Eigen::Index top_k) {
    c.validate();
    UnitData first = extract_units(gfm, pool, c.graphs.front(), top_k);
    if (first.kind != TaskKind::graph_cls_multitask) {
        if (c.graphs.size() == 1) return first;
        throw ContractViolation("collections of node/edge graphs are evaluated per graph");
    }
    UnitData u;
    u.kind = TaskKind::graph_cls_multitask;
    u.arity = c.graphs.front().class_count;
    u.embeddings.resize(static_cast<Eigen::Index>(c.graphs.size()), gfm.config.d);
    u.task_labels.resize(static_cast<Eigen::Index>(c.graphs.size()), u.arity);
    for (std::size_t i = 0; i < c.graphs.size(); ++i) {
        Matrix z = model::embed(gfm, c.graphs[i], pool, top_k);
        u.embeddings.row(static_cast<Eigen::Index>(i)) = z.colwise().mean();
        u.task_labels.row(static_cast<Eigen::Index>(i)) = c.graphs[i].labels_float.row(0);
    }
    return u;
}

namespace {

Matrix gather(const Matrix& m, const std::vector<std::int64_t>& idx) {
    Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
    return out;
}

Matrix softmax_rows_plain(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::ArrayXd e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
        out.row(i) = (e / e.sum()).matrix().transpose();
    }
    return out;
}

double accuracy_on(const UnitData& units, const TaskHead& head, const std::vector<std::int64_t>& idx) {
    Matrix logits = (gather(units.embeddings, idx) * head.weight).rowwise() + head.bias.row(0);
    std::int64_t correct = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index arg;
        logits.row(i).maxCoeff(&arg);
        if (static_cast<std::int32_t>(arg) == units.labels(idx[static_cast<std::size_t>(i)])) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(std::max<Eigen::Index>(1, logits.rows()));
}

double masked_auc_on(const UnitData& units, const TaskHead& head, const std::vector<std::int64_t>& idx) {
    Matrix logits = (gather(units.embeddings, idx) * head.weight).rowwise() + head.bias.row(0);
    double sum = 0.0;
    int tasks = 0;
    for (Eigen::Index t = 0; t < logits.cols(); ++t) {
        std::vector<double> scores;
        std::vector<std::int32_t> labels;
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
            double y = units.task_labels(idx[static_cast<std::size_t>(i)], t);
            if (std::isnan(y)) continue;
            scores.push_back(logits(i, t));
            labels.push_back(y > 0.5 ? 1 : 0);
        }
        std::optional<double> auc = roc_auc(scores, labels);
        if (auc) {
            sum += *auc;
            ++tasks;
        }
    }
    return tasks > 0 ? sum / tasks : 0.5;
}

double metric_on(const UnitData& units, const TaskHead& head, const std::vector<std::int64_t>& idx) {
    return units.kind == TaskKind::graph_cls_multitask ? masked_auc_on(units, head, idx)
                                                       : accuracy_on(units, head, idx);
}

}  // namespace

std::optional<double> roc_auc(const std::vector<double>& scores, const std::vector<std::int32_t>& labels) {
    if (scores.size() != labels.size()) throw ContractViolation("roc_auc: score/label size mismatch");
    std::int64_t pos = 0, neg = 0;
    for (std::int32_t y : labels) (y != 0 ? pos : neg) += 1;
    if (pos == 0 || neg == 0) return std::nullopt;

    // average ranks with ties; AUC = (R_pos - P(P+1)/2) / (P*N), identical to
    // pairwise counting with half credit for ties
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<double> rank(scores.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double rank_sum = 0.0;
    for (std::size_t k = 0; k < labels.size(); ++k)
        if (labels[k] != 0) rank_sum += rank[k];
    return (rank_sum - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1)) /
           (static_cast<double>(pos) * static_cast<double>(neg));
}

FinetuneResult finetune(const UnitData& units, const graph::DataSplit& split, const FinetuneOptions& opts) {
    if (split.train.empty()) throw ContractViolation("finetune: empty training split");
    if (opts.max_epochs < 1 || opts.patience < 1) throw ContractViolation("finetune: bad schedule");

    FinetuneResult result;
    result.head = TaskHead::make(units.kind, units.embeddings.cols(), units.arity, opts.seed);

    Matrix x = gather(units.embeddings, split.train);
    const Eigen::Index m = x.rows();

    // one-hot (node/edge) or masked binary targets (graph)
    Matrix targets, mask;
    if (units.kind == TaskKind::graph_cls_multitask) {
        targets = Matrix::Zero(m, units.arity);
        mask = Matrix::Zero(m, units.arity);
        for (Eigen::Index i = 0; i < m; ++i)
            for (Eigen::Index t = 0; t < units.arity; ++t) {
                double y = units.task_labels(split.train[static_cast<std::size_t>(i)], t);
                if (std::isnan(y)) continue;
                targets(i, t) = y > 0.5 ? 1.0 : 0.0;
                mask(i, t) = 1.0;
            }
        for (Eigen::Index t = 0; t < units.arity; ++t)
            if (mask.col(t).sum() == 0.0)
                result.warnings.push_back("task " + std::to_string(t) + " has no labels in train; skipped");
    } else {
        targets = Matrix::Zero(m, units.arity);
        for (Eigen::Index i = 0; i < m; ++i) {
            std::int32_t y = units.labels(split.train[static_cast<std::size_t>(i)]);
            if (y < 0 || y >= units.arity) throw DataError("label out of range in training split");
            targets(i, y) = 1.0;
        }
    }

    model::Optimizer opt;
    opt.kind = model::OptimizerKind::adam;

    TaskHead best = result.head;
    double best_metric = -std::numeric_limits<double>::infinity();
    int since_best = 0;
    const bool use_val = !split.val.empty();

    for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
        Matrix logits = (x * result.head.weight).rowwise() + result.head.bias.row(0);
        Matrix dlogits;
        if (units.kind == TaskKind::graph_cls_multitask) {
            Matrix probs = (1.0 / (1.0 + (-logits.array()).exp())).matrix();
            double denom = std::max(1.0, mask.sum());
            dlogits = mask.cwiseProduct(probs - targets) / denom;
        } else {
            dlogits = (softmax_rows_plain(logits) - targets) / static_cast<double>(m);
        }
        Matrix dw = x.transpose() * dlogits;
        Matrix db = dlogits.colwise().sum();
        std::vector<Matrix*> params = {&result.head.weight, &result.head.bias};
        std::vector<const Matrix*> grads = {&dw, &db};
        opt.step(params, grads, opts.lr);
        result.epochs_run = epoch + 1;

        double metric = metric_on(units, result.head, use_val ? split.val : split.train);
        if (metric > best_metric) {
            best_metric = metric;
            best = result.head;
            since_best = 0;
        } else if (++since_best >= opts.patience) {
            break;
        }
    }
    result.head = best;
    result.best_val_metric = best_metric;
    return result;
}

FinetuneResult finetune(const GfmParams& gfm, const prompt::PromptPool* pool,
                        const graph::TextAttributedGraph& g, const graph::DataSplit& split,
                        const FinetuneOptions& opts) {
    return finetune(extract_units(gfm, pool, g), split, opts);
}

double evaluate(const UnitData& units, const TaskHead& head, const std::vector<std::int64_t>& indices) {
    if (indices.empty()) throw ContractViolation("evaluate: empty index set");
    return metric_on(units, head, indices);
}

double evaluate(const GfmParams& gfm, const prompt::PromptPool* pool, const TaskHead& head,
                const graph::TextAttributedGraph& g, const graph::DataSplit& split) {
    return evaluate(extract_units(gfm, pool, g), head, split.test);
}

graph::DataSplit few_shot_subsample(const graph::DataSplit& split, const std::vector<std::int32_t>& classes,
                                    TaskKind kind, const FewShotSpec& spec) {
    if (kind == TaskKind::graph_cls_multitask)
        throw ContractViolation("few-shot subsampling is defined for node and edge tasks only");
    if (spec.shots < 1) throw ContractViolation("few-shot: shots must be >= 1");

    std::map<std::int32_t, std::vector<std::int64_t>> by_class;
    for (std::int64_t i : split.train) by_class[classes[static_cast<std::size_t>(i)]].push_back(i);

    graph::DataSplit out = split;
    out.train.clear();
    Rng rng(spec.seed);
    for (auto& [cls, members] : by_class) {
        rng.shuffle(members);
        std::size_t keep = std::min<std::size_t>(members.size(), static_cast<std::size_t>(spec.shots));
        for (std::size_t i = 0; i < keep; ++i) out.train.push_back(members[i]);
    }
    std::sort(out.train.begin(), out.train.end());
    return out;
}

double EntanglementReport::mean_offdiagonal(const Matrix& m) const {
    if (m.rows() < 2) return 0.0;
    double sum = 0.0;
    int count = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = i + 1; j < m.cols(); ++j) {
            sum += m(i, j);
            ++count;
        }
    return sum / count;
}

namespace {

Matrix cosine_matrix(const std::vector<Matrix>& means) {
    Eigen::Index k = static_cast<Eigen::Index>(means.size());
    Matrix out = Matrix::Identity(k, k);
    for (Eigen::Index a = 0; a < k; ++a)
        for (Eigen::Index b = a + 1; b < k; ++b) {
            double na = std::max(means[static_cast<std::size_t>(a)].norm(), 1e-12);
            double nb = std::max(means[static_cast<std::size_t>(b)].norm(), 1e-12);
            double c = means[static_cast<std::size_t>(a)].row(0).dot(means[static_cast<std::size_t>(b)].row(0)) / (na * nb);
            out(a, b) = c;
            out(b, a) = c;
        }
    return out;
}

}  // namespace

EntanglementReport entanglement_diagnostic(const GfmParams& gfm, const prompt::PromptPool* pool,
                                           const std::vector<graph::TextAttributedGraph>& domains,
                                           const GfmParams* reference) {
    if (domains.size() < 2) throw ContractViolation("entanglement diagnostic needs at least two domains");
    EntanglementReport report;
    std::vector<Matrix> raw, fed, ref;
    for (const auto& g : domains) {
        report.domains.push_back(g.domain_tag);
        raw.push_back(g.node_features.colwise().mean());
        // encoder outputs, where representation collapse shows up; comparing
        // quantized outputs across differently-structured projections would
        // mostly measure the projection
        fed.push_back(Matrix(model::encoder_embeddings(gfm, g, pool).colwise().mean()));
        if (reference) ref.push_back(Matrix(model::encoder_embeddings(*reference, g).colwise().mean()));
    }
    report.raw_similarity = cosine_matrix(raw);
    report.federated_similarity = cosine_matrix(fed);
    if (reference) report.reference_similarity = cosine_matrix(ref);
    return report;
}

}  // namespace fedgfm::task
