#pragma once

#include "fedgfm/adadpp.hpp"
#include "fedgfm/graph.hpp"
#include "fedgfm/tape.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace fedgfm::model {

enum class Metric { cosine, l2 };
enum class Nonlinearity { relu, sigmoid, identity };

std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);
std::string to_string(Nonlinearity a);
Nonlinearity nonlinearity_from_string(const std::string& s);

struct ModelConfig {
    Eigen::Index d = 768;
    std::int32_t heads = 4;
    std::int32_t tokens_per_head = 128;
    Metric metric = Metric::cosine;
    Nonlinearity act = Nonlinearity::relu;
    double gamma = 2.0;                  // feature-loss scaling exponent
    double beta = 0.25;                  // commitment weight
    Eigen::Index dense_threshold = 2000; // above this, topology loss is edge-sampled
    double token_init_scale = -1.0;      // -1 = 1/sqrt(d)

    double resolved_token_scale() const;
    void validate() const;
};

struct EncoderLayerParams {
    Matrix w_self, w_nbr, w_edge;  // each d x d
    Matrix bias;                   // 1 x d
};

struct EncoderParams {
    std::vector<EncoderLayerParams> layers;  // 2-layer mean-aggregation stack
};

struct Codebook {
    std::int32_t heads = 0;
    std::int32_t tokens_per_head = 0;
    Metric metric = Metric::cosine;
    std::vector<Matrix> head_tokens;  // heads entries, each T x d
    Matrix projection;                // (heads*d) x d shared output map

    void validate() const;  // cosine metric forbids zero-norm tokens
};

struct DecoderParams {
    Matrix w1, b1, w2, b2;  // one hidden layer, width d, maps d -> d
};

// The unit of federated exchange: encoder + multi-head codebook + decoder,
// with a stable flat-vector view used by aggregation and checkpoints.
struct GfmParams {
    ModelConfig config;
    EncoderParams encoder;
    Codebook codebook;
    DecoderParams decoder;

    static GfmParams init(const ModelConfig& cfg, std::uint64_t seed);

    // Stable tensor ordering: per encoder layer (w_self, w_nbr, w_edge, bias),
    // head tokens in head order, projection, decoder (w1, b1, w2, b2).
    std::vector<const Matrix*> tensors() const;
    std::vector<Matrix*> tensors();
    Eigen::VectorXd flatten() const;
    void unflatten(const Eigen::VectorXd& flat);
    Eigen::Index flat_size() const;
    std::uint64_t digest() const;
    void validate() const;
};

// Parameter checkpoint: raw little-endian float64 blob plus a json manifest
// carrying the ordering schema version and shapes. Round-trips bitwise.
void save_params(const GfmParams& p, const std::filesystem::path& dir);
GfmParams load_params(const std::filesystem::path& dir);

// ---- tape-side forward pieces ----------------------------------------------

struct GfmHandles {
    std::vector<ad::Handle> ordered;  // aligned with GfmParams::tensors()
    std::vector<std::array<ad::Handle, 4>> encoder_layers;  // w_self, w_nbr, w_edge, bias
    std::vector<ad::Handle> head_tokens;
    ad::Handle projection = -1;
    ad::Handle dec_w1 = -1, dec_b1 = -1, dec_w2 = -1, dec_b2 = -1;
};

GfmHandles register_params(ad::Tape& tape, const GfmParams& p);

// Two rounds of h_i <- act(W_self h_i + W_nbr mean_{j in N(i)}(h_j + e_ij W_edge) + b),
// final layer linear; isolated nodes take a zero neighbor term. `features`
// may be a prompt-augmented handle; -1 uses the graph's own features.
ad::Handle encode(ad::Tape& tape, const GfmHandles& h, const GfmParams& p,
                  const graph::TextAttributedGraph& g, ad::Handle features = -1);

struct QuantizeResult {
    ad::Handle z_q = -1;            // projected quantized embedding (codebook/commitment path)
    ad::Handle st = -1;             // straight-through output feeding the decoder
    Eigen::MatrixX<std::int32_t> indices;  // n x heads
    int cosine_fallbacks = 0;       // zero-norm rows retrieved by L2 instead
};

// Nearest-token retrieval for one head: ties to the lowest index, zero-norm
// rows under cosine fall back to L2 (counted when `fallbacks` is given).
std::vector<std::int32_t> nearest_tokens(const Matrix& z, const Matrix& tokens, Metric metric,
                                         int* fallbacks = nullptr);

QuantizeResult quantize(ad::Tape& tape, const GfmHandles& h, const GfmParams& p, ad::Handle z);
// Same wiring with the per-head retrieval fixed (finite-difference harness).
QuantizeResult quantize_with_indices(ad::Tape& tape, const GfmHandles& h, const GfmParams& p,
                                     ad::Handle z, const Eigen::MatrixX<std::int32_t>& indices);

ad::Handle decode_features(ad::Tape& tape, const GfmHandles& h, const GfmParams& p, ad::Handle z_q);

ad::Handle loss_feat(ad::Tape& tape, ad::Handle x, ad::Handle x_hat, double gamma);

// || A - sigma(Xhat Xhat^T) ||_F^2, dense up to config.dense_threshold nodes;
// beyond that, all positive entries plus an equal count of sampled non-edges,
// scaled to the full-sum estimate.
ad::Handle loss_topo(ad::Tape& tape, const graph::TextAttributedGraph& g, ad::Handle x_hat,
                     Eigen::Index dense_threshold, Rng& rng);

struct LossBreakdown {
    double total = 0.0, feat = 0.0, topo = 0.0;
    double codebook_term = 0.0, commitment_term = 0.0;
    double gamma = 0.0, beta = 0.0;

    void check_additivity() const;  // total == feat + topo + cb + beta*commit (1e-10 rel)
};

struct PretrainLoss {
    ad::Handle total = -1, feat = -1, topo = -1, codebook = -1, commitment = -1;
    ad::Handle z = -1;
    QuantizeResult quant;
    LossBreakdown breakdown;
    double token_utilization = 0.0;  // fraction of tokens selected at least once
};

// Full pre-training objective, tape-recorded end to end. Reconstruction terms
// reach the encoder through the straight-through route, the codebook term
// reaches tokens (and projection) only, the commitment term the encoder only.
PretrainLoss loss_pretrain(ad::Tape& tape, const GfmHandles& h, const GfmParams& p,
                           const graph::TextAttributedGraph& g, Rng& rng,
                           ad::Handle features = -1,
                           const Eigen::MatrixX<std::int32_t>* frozen_indices = nullptr);

// ---- local training --------------------------------------------------------

enum class OptimizerKind { sgd, adam };

struct Optimizer {
    OptimizerKind kind = OptimizerKind::sgd;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::int64_t step_count = 0;
    std::vector<Matrix> m, v;  // adam moments, lazily shaped

    void step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, double lr);
};

struct LocalTrainResult {
    std::vector<LossBreakdown> history;  // one entry per epoch
    bool diverged = false;               // NaN abort; params hold the last good state
};

// Full-graph gradient descent for `epochs` passes. When `prompts` is given,
// features are prompt-augmented and the prompt set trains with the backbone.
LocalTrainResult local_pretrain_step(GfmParams& params, const graph::TextAttributedGraph& g, double lr,
                                     int epochs, Optimizer& opt, Rng& rng,
                                     prompt::PromptSet* prompts = nullptr);

// Frozen-backbone embedding: prompt-augment (optionally), encode, quantize;
// returns the projected quantized representation, the model's output space.
Matrix embed(const GfmParams& params, const graph::TextAttributedGraph& g,
             const prompt::PromptPool* pool = nullptr, Eigen::Index top_k = 0);

// Encoder output without quantization (prototype extraction, entanglement
// diagnostics).
Matrix encoder_embeddings(const GfmParams& params, const graph::TextAttributedGraph& g,
                          const prompt::PromptPool* pool = nullptr, Eigen::Index top_k = 0);

}  // namespace fedgfm::model
