#include "fedgfm/adadpp.hpp"

#include <algorithm>
#include <set>

namespace fedgfm::prompt {

PromptSet PromptSet::init(std::int32_t client_id, Eigen::Index prompt_count, Eigen::Index d,
                          double init_scale, std::uint64_t seed) {
    if (prompt_count < 1) throw ContractViolation("prompt set needs at least one prompt");
    Rng rng(seed);
    PromptSet s;
    s.client_id = client_id;
    s.prompts = rng.normal_matrix(prompt_count, d, init_scale);
    s.projections = rng.normal_matrix(prompt_count, d, init_scale);
    return s;
}

void PromptSet::validate() const {
    if (prompts.rows() < 1) throw ContractViolation("prompt set needs at least one prompt");
    if (prompts.rows() != projections.rows() || prompts.cols() != projections.cols())
        throw ContractViolation("prompts and projections must share shape");
}

std::uint64_t PromptSet::digest() const {
    std::uint64_t h = fnv1a_init();
    h = fnv1a_u64(h, static_cast<std::uint64_t>(client_id));
    h = fnv1a_matrix(h, prompts);
    h = fnv1a_matrix(h, projections);
    return h;
}

Eigen::Index PromptPool::total_prompts() const {
    Eigen::Index n = 0;
    for (const auto& s : sets) n += s.prompt_count();
    return n;
}

Matrix PromptPool::stacked_prompts() const {
    Matrix out(total_prompts(), sets.front().dim());
    Eigen::Index at = 0;
    for (const auto& s : sets) {
        out.middleRows(at, s.prompt_count()) = s.prompts;
        at += s.prompt_count();
    }
    return out;
}

Matrix PromptPool::stacked_projections() const {
    Matrix out(total_prompts(), sets.front().dim());
    Eigen::Index at = 0;
    for (const auto& s : sets) {
        out.middleRows(at, s.prompt_count()) = s.projections;
        at += s.prompt_count();
    }
    return out;
}

std::uint64_t PromptPool::digest() const {
    std::uint64_t h = fnv1a_init();
    for (const auto& s : sets) h = fnv1a_u64(h, s.digest());
    return h;
}

PromptPool build_pool(const std::vector<PromptSet>& sets) {
    if (sets.empty()) throw ContractViolation("build_pool: no prompt sets");
    std::set<std::int32_t> ids;
    Eigen::Index d = sets.front().dim();
    for (const auto& s : sets) {
        s.validate();
        if (!ids.insert(s.client_id).second)
            throw ContractViolation("build_pool: duplicate client id " + std::to_string(s.client_id));
        if (s.dim() != d) throw ContractViolation("build_pool: prompt dimension mismatch");
    }
    PromptPool pool;
    pool.sets = sets;
    std::sort(pool.sets.begin(), pool.sets.end(),
              [](const PromptSet& a, const PromptSet& b) { return a.client_id < b.client_id; });
    return pool;
}

PromptHandles register_prompts(ad::Tape& tape, const PromptSet& set) {
    set.validate();
    return {tape.parameter(set.prompts), tape.parameter(set.projections)};
}

ad::Handle apply_prompt_attention(ad::Tape& tape, ad::Handle x, ad::Handle projections, ad::Handle prompts) {
    using namespace ad;
    if (tape.value(x).cols() != tape.value(projections).cols())
        throw ContractViolation("apply_prompt_attention: feature dimension mismatch");
    Handle logits = matmul(tape, x, transpose(tape, projections));  // n x lambda
    Handle alpha = softmax_rows(tape, logits);
    return add(tape, x, matmul(tape, alpha, prompts));
}

ad::Handle apply_prompts_local(ad::Tape& tape, const PromptHandles& h, ad::Handle x) {
    return apply_prompt_attention(tape, x, h.projections, h.prompts);
}

Matrix apply_pool(const PromptPool& pool, const Matrix& features, Eigen::Index top_k) {
    if (pool.sets.empty()) throw ContractViolation("apply_pool: empty pool");
    if (top_k < 0 || top_k > pool.total_prompts())
        throw ContractViolation("apply_pool: top_k out of range");

    if (top_k == 0) {
        // same op sequence as the tape path, so a one-client pool reproduces
        // the local application bitwise
        ad::Tape tape;
        ad::Handle x = tape.constant(features);
        ad::Handle w = tape.constant(pool.stacked_projections());
        ad::Handle phi = tape.constant(pool.stacked_prompts());
        return tape.value(apply_prompt_attention(tape, x, w, phi));
    }

    Matrix w = pool.stacked_projections();
    Matrix phi = pool.stacked_prompts();
    Matrix logits = features * w.transpose();
    Matrix out = features;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(logits.cols()));
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(), order.begin() + top_k, order.end(), [&](Eigen::Index a, Eigen::Index b) {
            if (logits(i, a) != logits(i, b)) return logits(i, a) > logits(i, b);
            return a < b;
        });
        double mx = logits(i, order[0]);
        double denom = 0.0;
        for (Eigen::Index k = 0; k < top_k; ++k) denom += std::exp(logits(i, order[static_cast<std::size_t>(k)]) - mx);
        for (Eigen::Index k = 0; k < top_k; ++k) {
            double a = std::exp(logits(i, order[static_cast<std::size_t>(k)]) - mx) / denom;
            out.row(i) += a * phi.row(order[static_cast<std::size_t>(k)]);
        }
    }
    return out;
}

}  // namespace fedgfm::prompt
