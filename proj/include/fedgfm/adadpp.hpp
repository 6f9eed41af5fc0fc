#pragma once

#include "fedgfm/common.hpp"
#include "fedgfm/rng.hpp"
#include "fedgfm/tape.hpp"

#include <cstdint>
#include <vector>

namespace fedgfm::prompt {

// Per-client learnable feature prompts with their attention projections.
// Trained locally alongside the backbone; never federated.
struct PromptSet {
    std::int32_t client_id = 0;
    Matrix prompts;      // lambda x d
    Matrix projections;  // lambda x d

    static PromptSet init(std::int32_t client_id, Eigen::Index prompt_count, Eigen::Index d,
                          double init_scale, std::uint64_t seed);

    Eigen::Index prompt_count() const { return prompts.rows(); }
    Eigen::Index dim() const { return prompts.cols(); }
    void validate() const;
    std::uint64_t digest() const;
};

// Fine-tuning-time union of all clients' prompt sets, client-id ascending.
// Frozen once built.
struct PromptPool {
    std::vector<PromptSet> sets;

    Eigen::Index total_prompts() const;
    Matrix stacked_prompts() const;      // (K*lambda) x d
    Matrix stacked_projections() const;  // (K*lambda) x d
    std::uint64_t digest() const;
};

PromptPool build_pool(const std::vector<PromptSet>& sets);

struct PromptHandles {
    ad::Handle prompts = -1;
    ad::Handle projections = -1;
};

PromptHandles register_prompts(ad::Tape& tape, const PromptSet& set);

// Soft prompt attention: per node, alpha = softmax(W x_i) over the given
// prompts, output x_i + sum_j alpha_j phi_j. Used both for the per-client
// augmentation during pre-training and, with all sets stacked, for the pooled
// augmentation at fine-tuning time (one softmax over all K*lambda logits).
ad::Handle apply_prompt_attention(ad::Tape& tape, ad::Handle x, ad::Handle projections, ad::Handle prompts);

ad::Handle apply_prompts_local(ad::Tape& tape, const PromptHandles& h, ad::Handle x);

// Frozen pool application; top_k = 0 keeps the full softmax, top_k > 0
// restricts each node to its k highest-logit prompts (renormalized).
Matrix apply_pool(const PromptPool& pool, const Matrix& features, Eigen::Index top_k = 0);

}  // namespace fedgfm::prompt
