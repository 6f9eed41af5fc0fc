#pragma once

#include "fedgfm/graph.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace fedgfm::graph {

// Maps each unit (node for subgraph-level decentralization, graph index for
// graph-level) to a client id in [0, K).
struct PartitionAssignment {
    std::int32_t client_count = 0;
    std::vector<std::int32_t> assignment;

    void validate() const;  // every client id owns at least one unit
};

struct LouvainResult {
    std::vector<std::int32_t> communities;   // per node, compacted ids
    std::vector<double> sweep_modularity;    // modularity after each node-move sweep
    double final_modularity = 0.0;
};

// Greedy modularity maximization: node-move sweeps followed by community
// aggregation, repeated until stable. Deterministic (fixed scan order, ties
// to the lowest community id).
LouvainResult louvain_communities(const TextAttributedGraph& g, double resolution = 1.0);

double modularity(const TextAttributedGraph& g, const std::vector<std::int32_t>& communities,
                  double resolution = 1.0);

// Louvain communities bin-packed into K clients: communities sorted by size
// descending, each assigned to the currently smallest client.
PartitionAssignment louvain_partition(const TextAttributedGraph& g, std::int32_t clients);

// Uniform shuffle of graph indices, then near-equal contiguous chunks.
PartitionAssignment random_allocate(const GraphCollection& c, std::int32_t clients, std::uint64_t seed);

struct InducedSubgraphs {
    std::vector<TextAttributedGraph> client_graphs;
    std::vector<std::vector<std::int32_t>> node_origin;  // client-local -> global node id
    std::int64_t intra_edges = 0;
    std::int64_t dropped_cross_edges = 0;
};

// Cross-client edges are dropped, not repaired.
InducedSubgraphs induce_subgraphs(const TextAttributedGraph& g, const PartitionAssignment& p);

// ---- train/val/test splits -------------------------------------------------

struct SplitRatios {
    double train = 0.0, val = 0.0, test = 0.0;
};

struct DataSplit {
    std::vector<std::int64_t> train, val, test;
    std::vector<std::string> warnings;  // e.g. a class with no training members
};

// Stratified-by-class random split; units with class -1 form one stratum.
// Per-stratum counts are floor(ratio * size); the remainder stays unassigned.
DataSplit split(const std::vector<std::int32_t>& unit_classes, const SplitRatios& ratios, std::uint64_t seed);

}  // namespace fedgfm::graph
