#pragma once

#include "fedgfm/gvqvae.hpp"
#include "fedgfm/partition.hpp"

#include <optional>
#include <string>
#include <vector>

namespace fedgfm::task {

enum class TaskKind { node_cls, edge_cls, graph_cls_multitask };

std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);
TaskKind task_kind_for(const graph::TextAttributedGraph& g);

// Linear map from the frozen embedding to class logits (node/edge) or
// per-task binary logits (graph multi-task).
struct TaskHead {
    TaskKind kind = TaskKind::node_cls;
    Matrix weight;  // d x arity
    Matrix bias;    // 1 x arity

    static TaskHead make(TaskKind kind, Eigen::Index d, Eigen::Index arity, std::uint64_t seed);
    Eigen::Index arity() const { return weight.cols(); }
    std::uint64_t digest() const;
};

// Frozen-backbone unit embeddings with their labels: rows are nodes, labeled
// edges (mean of endpoint embeddings), or graphs (mean-pooled nodes).
struct UnitData {
    TaskKind kind = TaskKind::node_cls;
    Matrix embeddings;    // units x d
    IntVector labels;     // node/edge units
    Matrix task_labels;   // graph units x tasks, NaN = missing
    std::int32_t arity = 0;

    Eigen::Index unit_count() const { return embeddings.rows(); }
    std::vector<std::int32_t> unit_classes() const;  // stratification key (node/edge)
};

UnitData extract_units(const model::GfmParams& gfm, const prompt::PromptPool* pool,
                       const graph::TextAttributedGraph& g, Eigen::Index top_k = 0);
UnitData extract_units(const model::GfmParams& gfm, const prompt::PromptPool* pool,
                       const graph::GraphCollection& c, Eigen::Index top_k = 0);

struct FinetuneOptions {
    double lr = 1e-2;
    int max_epochs = 1000;
    int patience = 20;
    std::uint64_t seed = 0;
};

struct FinetuneResult {
    TaskHead head;
    int epochs_run = 0;
    double best_val_metric = 0.0;
    std::vector<std::string> warnings;  // e.g. all-NaN task columns skipped
};

// Head-only supervised training with early stopping on the validation metric
// (accuracy for node/edge, mean ROC-AUC for graph multi-task). The backbone
// and pool never change; only the head does.
FinetuneResult finetune(const UnitData& units, const graph::DataSplit& split, const FinetuneOptions& opts);

// Convenience wrapper over frozen model state.
FinetuneResult finetune(const model::GfmParams& gfm, const prompt::PromptPool* pool,
                        const graph::TextAttributedGraph& g, const graph::DataSplit& split,
                        const FinetuneOptions& opts);

// Accuracy (node/edge) or mean-over-tasks ROC-AUC (graph; NaN labels masked,
// single-class tasks skipped) on the given index set.
double evaluate(const UnitData& units, const TaskHead& head, const std::vector<std::int64_t>& indices);
double evaluate(const model::GfmParams& gfm, const prompt::PromptPool* pool, const TaskHead& head,
                const graph::TextAttributedGraph& g, const graph::DataSplit& split);

// Rank-based ROC-AUC with the half-credit tie convention; exactly equal to
// exhaustive pairwise comparison. Returns nullopt when only one class
// appears.
std::optional<double> roc_auc(const std::vector<double>& scores, const std::vector<std::int32_t>& labels);

struct FewShotSpec {
    int shots = 2;
    std::uint64_t seed = 0;
};

// Keeps at most `shots` training units per class; validation and test stay
// untouched. Graph multi-task units are rejected.
graph::DataSplit few_shot_subsample(const graph::DataSplit& split, const std::vector<std::int32_t>& classes,
                                    TaskKind kind, const FewShotSpec& spec);

struct EntanglementReport {
    std::vector<std::string> domains;
    Matrix raw_similarity;        // pairwise cosine of mean-pooled raw features
    Matrix federated_similarity;  // same for the model's embeddings
    Matrix reference_similarity;  // optional second model; empty if absent

    double mean_offdiagonal(const Matrix& m) const;
};

EntanglementReport entanglement_diagnostic(const model::GfmParams& gfm, const prompt::PromptPool* pool,
                                           const std::vector<graph::TextAttributedGraph>& domains,
                                           const model::GfmParams* reference = nullptr);

}  // namespace fedgfm::task
