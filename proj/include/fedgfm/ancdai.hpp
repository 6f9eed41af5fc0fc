#pragma once

#include "fedgfm/gvqvae.hpp"

#include <filesystem>
#include <vector>

namespace fedgfm::anchor {

// Mean-pooled encoder output of a client's graph under the shared round-0
// initialization. Bound to the (graph, init) pair through source_digest so a
// stale prototype cannot seed a fresh run.
struct DomainPrototype {
    std::int32_t client_id = 0;
    Matrix p;  // 1 x d
    std::uint64_t source_digest = 0;
};

DomainPrototype extract_prototype(const model::GfmParams& global_init,
                                  const graph::TextAttributedGraph& g, std::int32_t client_id);
// Graph-level clients: mean over all nodes of all graphs in the collection.
DomainPrototype extract_prototype(const model::GfmParams& global_init, const graph::GraphCollection& c,
                                  std::int32_t client_id);

struct AnchorSet {
    std::int32_t client_id = 0;
    Eigen::Index count = 0;
    double sigma = 0.0;
    std::uint64_t seed = 0;
    Matrix anchors;  // count x d

    void validate(const DomainPrototype& source) const;  // sigma=0 anchors equal the prototype bitwise
};

AnchorSet synthesize_anchors(const DomainPrototype& p, Eigen::Index count, double sigma, std::uint64_t seed);

// sigma_abs >= 0 wins; otherwise sigma_rel * mean L2 norm of the prototypes.
double resolve_sigma(const std::vector<DomainPrototype>& prototypes, double sigma_abs, double sigma_rel);

// Seeds every head with floor(T/K) fresh anchors per prototype in
// prototype-major order; the T mod K leftover tokens are drawn at the default
// token scale. The shared projection becomes the head-averaging map so the
// initial quantized outputs sit on the anchor geometry.
model::Codebook init_codebook(const std::vector<DomainPrototype>& prototypes, const model::ModelConfig& cfg,
                              double sigma, std::uint64_t seed);

void save_prototypes(const std::vector<DomainPrototype>& prototypes, const std::filesystem::path& file);
std::vector<DomainPrototype> load_prototypes(const std::filesystem::path& file);

// ---- empirical separability harnesses ---------------------------------------

struct SeparabilityReport {
    int trials = 0;
    std::vector<std::string> domains;
    Matrix mean_sq_distance;  // pairwise E||p^a - p^b||^2 over trials
    Matrix feature_gap;       // ||X^a - X^b||_F^2 on size-matched graphs
    Matrix adjacency_gap;     // ||A^a - A^b||_F^2
    double alpha = 0.0;            // min over trials and pairs of distance / gap
    double min_trial_ratio = 0.0;  // min over trials of the per-trial worst pair
    Eigen::Index truncated_to = -1;  // common node count when domains disagreed

    double ancdai_separation_rate = 0.0;  // mean P[code(z^a) != code(z^b)]
    double random_separation_rate = 0.0;
    double win_rate = 0.0;           // fraction of trials with ancdai >= random
    double mean_difference = 0.0;    // ancdai - random, averaged over trials
    double difference_stderr = 0.0;  // standard error of the per-trial difference

    // Domain-signal measure: cross-domain minus within-domain separation per
    // codebook. Zero (within noise) when domains are indistinguishable.
    double ancdai_excess = 0.0, ancdai_excess_stderr = 0.0;
    double random_excess = 0.0, random_excess_stderr = 0.0;
};

// Fresh random global inits over fixed domain graphs; reports the empirical
// constant relating prototype distance to the feature+adjacency gap.
SeparabilityReport check_theorem1(const std::vector<graph::SyntheticDomainSpec>& domain_specs, int trials,
                                  const model::ModelConfig& cfg, std::uint64_t seed);

// Per trial: prototypes from fresh graphs, an anchor-seeded codebook vs a
// Gaussian one of identical shape, code assignments of held-out nodes, and
// the cross-domain separation rate of each. sigma_abs < 0 uses the relative
// default.
SeparabilityReport check_theorem2(const std::vector<graph::SyntheticDomainSpec>& domain_specs,
                                  double sigma_abs, double sigma_rel, int trials,
                                  const model::ModelConfig& cfg, std::uint64_t seed);

}  // namespace fedgfm::anchor
