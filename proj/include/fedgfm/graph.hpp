#pragma once

#include "fedgfm/common.hpp"
#include "fedgfm/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace fedgfm::graph {

enum class LabelLevel { node, edge, graph };

std::string to_string(LabelLevel level);
LabelLevel label_level_from_string(const std::string& s);

// Undirected graph with dense per-node features. Edges are stored once with
// endpoints normalized (u <= v); labels live at node, edge, or graph level.
// Graph-level labels are a 1xT float row with NaN marking missing tasks.
struct TextAttributedGraph {
    std::int64_t node_count = 0;
    std::vector<std::pair<std::int32_t, std::int32_t>> edges;
    Matrix node_features;                   // n x d
    Matrix edge_features;                   // |E| x d, or empty
    LabelLevel label_level = LabelLevel::node;
    IntVector labels_int;                   // node or edge level
    Matrix labels_float;                    // graph level, 1 x tasks
    std::int32_t class_count = 0;           // classes (node/edge) or task count (graph)
    std::string domain_tag;

    Eigen::Index feature_dim() const { return node_features.cols(); }
    std::int64_t edge_count() const { return static_cast<std::int64_t>(edges.size()); }
    bool has_edge_features() const { return edge_features.size() > 0; }

    // Throws DataError when an invariant is broken (dangling endpoints,
    // duplicate edges, feature row mismatch, label arity mismatch).
    void validate() const;

    Matrix dense_adjacency() const;          // n x n, symmetric binary
    Matrix neighbor_mean_operator() const;   // n x n; row i averages over N(i), zero for isolated nodes
    Matrix mean_incident_edge_features() const;  // n x d; zero rows without edge features
    std::vector<std::int64_t> degrees() const;
    std::map<std::int64_t, std::int64_t> degree_distribution() const;

    std::uint64_t digest() const;
};

struct GraphCollection {
    std::vector<TextAttributedGraph> graphs;

    void validate() const;  // non-empty, uniform feature dim and label arity
    std::int64_t total_nodes() const;
};

// ---- on-disk container -----------------------------------------------------
// A container is a directory holding `manifest` (json), `features.bin`
// (little-endian float32, row-major n x d), `edges.bin` (little-endian uint32
// pairs), `labels.bin` (int32 for node/edge level, float32 with NaN for graph
// level) and optionally `edge_features.bin`.

TextAttributedGraph load_graph(const std::filesystem::path& container);
void save_graph(const TextAttributedGraph& g, const std::filesystem::path& container);

// A collection is a directory of containers named g<index>, ordered by name.
GraphCollection load_collection(const std::filesystem::path& dir);
void save_collection(const GraphCollection& c, const std::filesystem::path& dir);

// ---- synthetic domains -----------------------------------------------------

// Stochastic block model with class-conditioned Gaussian features. Class
// means are drawn once per spec (optionally restricted to a coordinate
// window, which makes disjoint-support domains easy to construct) and nodes
// take their block's class.
struct SyntheticDomainSpec {
    std::string name = "synthetic";
    std::int64_t node_count = 0;
    std::vector<std::int64_t> block_sizes;
    double intra_p = 0.1;
    double inter_p = 0.01;
    std::int32_t class_count = 0;
    Eigen::Index feature_dim = 0;
    double mean_scale = 1.0;       // scale of the per-class mean draw
    double cov_scale = 0.1;        // per-node Gaussian spread around the class mean
    Eigen::Index support_offset = 0;   // class means live in [offset, offset+width)
    Eigen::Index support_width = -1;   // -1 = full feature_dim
    std::uint64_t seed = 0;
    // Class means are the domain's identity and always derive from `seed`;
    // node noise and edges come from `sample_seed` when set (>= 0), letting
    // harnesses draw fresh instances of the same domain.
    std::int64_t sample_seed = -1;

    void validate() const;
};

TextAttributedGraph synth_domain(const SyntheticDomainSpec& spec);

}  // namespace fedgfm::graph
