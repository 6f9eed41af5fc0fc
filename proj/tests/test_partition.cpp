#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fedgfm/partition.hpp"

#include <algorithm>
#include <set>

using namespace fedgfm;
using namespace fedgfm::graph;

namespace {

TextAttributedGraph bare_graph(std::int64_t n, std::vector<std::pair<std::int32_t, std::int32_t>> edges) {
    TextAttributedGraph g;
    g.node_count = n;
    g.edges = std::move(edges);
    g.node_features = Matrix::Zero(n, 2);
    g.label_level = LabelLevel::node;
    g.class_count = 1;
    g.labels_int = IntVector::Zero(n);
    g.validate();
    return g;
}

TextAttributedGraph two_cliques_bridge() {
    std::vector<std::pair<std::int32_t, std::int32_t>> edges;
    for (int u = 0; u < 5; ++u)
        for (int v = u + 1; v < 5; ++v) edges.push_back({u, v});
    for (int u = 5; u < 10; ++u)
        for (int v = u + 1; v < 10; ++v) edges.push_back({u, v});
    edges.push_back({4, 5});
    return bare_graph(10, std::move(edges));
}

// Exhaustive best 2-partition by modularity (oracle for the clique test).
std::pair<double, std::vector<std::int32_t>> best_two_partition(const TextAttributedGraph& g) {
    double best = -1.0;
    std::vector<std::int32_t> arg;
    for (std::uint32_t mask = 0; mask < (1u << g.node_count); ++mask) {
        std::vector<std::int32_t> comm(static_cast<std::size_t>(g.node_count));
        for (std::int64_t i = 0; i < g.node_count; ++i) comm[static_cast<std::size_t>(i)] = (mask >> i) & 1u;
        double q = modularity(g, comm);
        if (q > best) {
            best = q;
            arg = comm;
        }
    }
    return {best, arg};
}

// All set partitions of {0..n-1} (oracle for the complete-graph test).
void enumerate_partitions(std::int64_t n, std::vector<std::int32_t>& comm, std::int32_t used,
                          const std::function<void(const std::vector<std::int32_t>&)>& visit) {
    if (static_cast<std::int64_t>(comm.size()) == n) {
        visit(comm);
        return;
    }
    for (std::int32_t c = 0; c <= used; ++c) {
        comm.push_back(c);
        enumerate_partitions(n, comm, std::max(used, c + 1), visit);
        comm.pop_back();
    }
}

}  // namespace

TEST_CASE("louvain recovers two cliques joined by a bridge") {
    TextAttributedGraph g = two_cliques_bridge();
    PartitionAssignment p = louvain_partition(g, 2);
    std::set<std::int32_t> first(p.assignment.begin(), p.assignment.begin() + 5);
    std::set<std::int32_t> second(p.assignment.begin() + 5, p.assignment.end());
    CHECK(first.size() == 1);
    CHECK(second.size() == 1);
    CHECK(*first.begin() != *second.begin());

    auto [best_q, best_comm] = best_two_partition(g);
    std::vector<std::int32_t> clique_comm = {0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
    CHECK(modularity(g, clique_comm) == doctest::Approx(best_q));
    LouvainResult lv = louvain_communities(g);
    CHECK(lv.final_modularity == doctest::Approx(best_q));
}

TEST_CASE("louvain with one client keeps the whole graph") {
    TextAttributedGraph g = two_cliques_bridge();
    PartitionAssignment p = louvain_partition(g, 1);
    for (std::int32_t c : p.assignment) CHECK(c == 0);
}

TEST_CASE("complete graph collapses to a single community") {
    std::vector<std::pair<std::int32_t, std::int32_t>> edges;
    for (int u = 0; u < 4; ++u)
        for (int v = u + 1; v < 4; ++v) edges.push_back({u, v});
    TextAttributedGraph k4 = bare_graph(4, std::move(edges));

    LouvainResult lv = louvain_communities(k4);
    std::set<std::int32_t> comms(lv.communities.begin(), lv.communities.end());
    CHECK(comms.size() == 1);

    // exhaustive oracle: no partition beats the single community
    double single = modularity(k4, {0, 0, 0, 0});
    double best = -1.0;
    std::vector<std::int32_t> acc;
    enumerate_partitions(4, acc, 0, [&](const std::vector<std::int32_t>& comm) {
        best = std::max(best, modularity(k4, comm));
    });
    CHECK(single == doctest::Approx(best));
}

TEST_CASE("louvain rejects more clients than nodes") {
    TextAttributedGraph g = bare_graph(3, {{0, 1}});
    CHECK_THROWS_AS((void)louvain_partition(g, 4), ContractViolation);
}

TEST_CASE("modularity never decreases across sweeps on random block models") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        SyntheticDomainSpec spec;
        spec.node_count = 60;
        spec.block_sizes = {20, 20, 20};
        spec.intra_p = 0.3;
        spec.inter_p = 0.05;
        spec.class_count = 3;
        spec.feature_dim = 4;
        spec.seed = seed;
        TextAttributedGraph g = synth_domain(spec);
        LouvainResult lv = louvain_communities(g);  // throws internally on decrease
        for (std::size_t s = 1; s < lv.sweep_modularity.size(); ++s)
            CHECK(lv.sweep_modularity[s] >= lv.sweep_modularity[s - 1] - 1e-9);
    }
}

TEST_CASE("induced subgraphs keep only intra-client edges and account for drops") {
    SyntheticDomainSpec spec;
    spec.node_count = 50;
    spec.block_sizes = {25, 25};
    spec.intra_p = 0.4;
    spec.inter_p = 0.1;
    spec.class_count = 2;
    spec.feature_dim = 3;
    spec.seed = 11;
    TextAttributedGraph g = synth_domain(spec);
    PartitionAssignment p = louvain_partition(g, 2);
    InducedSubgraphs sub = induce_subgraphs(g, p);
    CHECK(sub.intra_edges + sub.dropped_cross_edges == g.edge_count());
    std::int64_t kept = 0;
    for (const auto& cg : sub.client_graphs) kept += cg.edge_count();
    CHECK(kept == sub.intra_edges);
    // features and labels follow their nodes
    for (std::size_t k = 0; k < sub.client_graphs.size(); ++k)
        for (std::size_t i = 0; i < sub.node_origin[k].size(); ++i) {
            CHECK(sub.client_graphs[k].node_features.row(static_cast<Eigen::Index>(i)) ==
                  g.node_features.row(sub.node_origin[k][i]));
            CHECK(sub.client_graphs[k].labels_int(static_cast<Eigen::Index>(i)) ==
                  g.labels_int(sub.node_origin[k][i]));
        }
}

TEST_CASE("random_allocate balances and is seed-deterministic") {
    GraphCollection c;
    for (int i = 0; i < 6; ++i) c.graphs.push_back(bare_graph(3, {{0, 1}}));

    PartitionAssignment p = random_allocate(c, 3, 42);
    std::vector<int> counts(3, 0);
    for (std::int32_t k : p.assignment) counts[static_cast<std::size_t>(k)] += 1;
    CHECK(counts == std::vector<int>{2, 2, 2});

    c.graphs.push_back(bare_graph(3, {{0, 1}}));
    PartitionAssignment p7 = random_allocate(c, 3, 42);
    std::vector<int> c7(3, 0);
    for (std::int32_t k : p7.assignment) c7[static_cast<std::size_t>(k)] += 1;
    CHECK(*std::max_element(c7.begin(), c7.end()) - *std::min_element(c7.begin(), c7.end()) <= 1);

    CHECK(random_allocate(c, 3, 42).assignment == p7.assignment);
    CHECK_THROWS_AS((void)random_allocate(c, 9, 1), ContractViolation);
}

TEST_CASE("split honors preset ratios on single-stratum units") {
    std::vector<std::int32_t> wiki(100, -1);
    DataSplit s = split(wiki, {0.8, 0.1, 0.1}, 7);
    CHECK(s.train.size() == 80);
    CHECK(s.val.size() == 10);
    CHECK(s.test.size() == 10);

    std::vector<std::int32_t> cora(2708, -1);
    DataSplit s2 = split(cora, {0.05, 0.20, 0.40}, 7);
    CHECK(s2.train.size() == 135);
    CHECK(s2.val.size() == 541);
    CHECK(s2.test.size() == 1083);

    DataSplit all = split(wiki, {1.0, 0.0, 0.0}, 7);
    CHECK(all.train.size() == 100);
    CHECK(all.val.empty());
    CHECK(all.test.empty());
}

TEST_CASE("split is stratified per class and sets are disjoint") {
    std::vector<std::int32_t> classes;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 40 + 10 * c; ++i) classes.push_back(c);
    DataSplit s = split(classes, {0.5, 0.25, 0.25}, 3);

    std::set<std::int64_t> seen;
    for (auto v : s.train) CHECK(seen.insert(v).second);
    for (auto v : s.val) CHECK(seen.insert(v).second);
    for (auto v : s.test) CHECK(seen.insert(v).second);

    for (int c = 0; c < 3; ++c) {
        std::int64_t m = 40 + 10 * c;
        std::int64_t train_c = std::count_if(s.train.begin(), s.train.end(),
                                             [&](std::int64_t i) { return classes[static_cast<std::size_t>(i)] == c; });
        CHECK(std::abs(train_c - static_cast<std::int64_t>(0.5 * static_cast<double>(m))) <= 1);
    }
}

TEST_CASE("split flags a class with no training members") {
    std::vector<std::int32_t> classes = {0, 0, 0, 0, 1};  // class 1 too small for 0.5 train
    DataSplit s = split(classes, {0.5, 0.0, 0.0}, 1);
    REQUIRE(s.warnings.size() == 1);
    CHECK(s.warnings[0].find("class 1") != std::string::npos);
}

TEST_CASE("split determinism and ratio-sum contract") {
    std::vector<std::int32_t> classes(50, -1);
    DataSplit a = split(classes, {0.6, 0.2, 0.2}, 9);
    DataSplit b = split(classes, {0.6, 0.2, 0.2}, 9);
    CHECK(a.train == b.train);
    CHECK(a.val == b.val);
    CHECK(a.test == b.test);
    CHECK_THROWS_AS((void)split(classes, {0.9, 0.2, 0.2}, 1), ContractViolation);
}
