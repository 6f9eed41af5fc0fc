#include "fedgfm/partition.hpp"

#include <algorithm>
#include <map>
#include <numeric>

namespace fedgfm::graph {

void PartitionAssignment::validate() const {
    if (client_count < 1) throw ContractViolation("partition needs at least one client");
    std::vector<std::int64_t> counts(static_cast<std::size_t>(client_count), 0);
    for (std::int32_t c : assignment) {
        if (c < 0 || c >= client_count) throw ContractViolation("client id out of range");
        counts[static_cast<std::size_t>(c)] += 1;
    }
    for (std::int32_t k = 0; k < client_count; ++k)
        if (counts[static_cast<std::size_t>(k)] == 0)
            throw ContractViolation("client " + std::to_string(k) + " received no units");
}

namespace {

// Weighted multigraph state for the aggregation phases.
struct WorkGraph {
    std::int64_t n = 0;
    double total_weight = 0.0;                                // 2m
    std::vector<std::vector<std::pair<std::int32_t, double>>> adj;  // neighbor, weight (both directions)
    std::vector<double> self_loops;                           // internal weight kept during aggregation
    std::vector<double> weighted_degree;                      // sum of incident weights incl. 2*self
};

WorkGraph from_graph(const TextAttributedGraph& g) {
    WorkGraph w;
    w.n = g.node_count;
    w.adj.assign(static_cast<std::size_t>(w.n), {});
    w.self_loops.assign(static_cast<std::size_t>(w.n), 0.0);
    w.weighted_degree.assign(static_cast<std::size_t>(w.n), 0.0);
    for (const auto& [u, v] : g.edges) {
        if (u == v) {
            w.self_loops[static_cast<std::size_t>(u)] += 1.0;
            w.weighted_degree[static_cast<std::size_t>(u)] += 2.0;
            w.total_weight += 2.0;
            continue;
        }
        w.adj[static_cast<std::size_t>(u)].push_back({v, 1.0});
        w.adj[static_cast<std::size_t>(v)].push_back({u, 1.0});
        w.weighted_degree[static_cast<std::size_t>(u)] += 1.0;
        w.weighted_degree[static_cast<std::size_t>(v)] += 1.0;
        w.total_weight += 2.0;
    }
    return w;
}

double work_modularity(const WorkGraph& w, const std::vector<std::int32_t>& comm, double resolution) {
    if (w.total_weight == 0.0) return 0.0;
    std::map<std::int32_t, double> internal, total;
    for (std::int64_t i = 0; i < w.n; ++i) {
        std::int32_t ci = comm[static_cast<std::size_t>(i)];
        total[ci] += w.weighted_degree[static_cast<std::size_t>(i)];
        internal[ci] += 2.0 * w.self_loops[static_cast<std::size_t>(i)];
        for (const auto& [j, wt] : w.adj[static_cast<std::size_t>(i)])
            if (comm[static_cast<std::size_t>(j)] == ci) internal[ci] += wt;
    }
    double q = 0.0;
    for (const auto& [c, tot] : total) {
        double in = internal.count(c) ? internal.at(c) : 0.0;
        q += in / w.total_weight - resolution * (tot / w.total_weight) * (tot / w.total_weight);
    }
    return q;
}

// One level of the method: local node moves until no move improves
// modularity. Returns compacted community ids; appends per-sweep modularity.
std::vector<std::int32_t> move_phase(const WorkGraph& w, double resolution,
                                     std::vector<double>* sweep_log) {
    std::vector<std::int32_t> comm(static_cast<std::size_t>(w.n));
    std::iota(comm.begin(), comm.end(), 0);
    std::vector<double> community_total = w.weighted_degree;
    if (w.total_weight == 0.0) return comm;

    const double m2 = w.total_weight;
    bool moved = true;
    while (moved) {
        moved = false;
        for (std::int64_t i = 0; i < w.n; ++i) {
            std::int32_t current = comm[static_cast<std::size_t>(i)];
            double ki = w.weighted_degree[static_cast<std::size_t>(i)];

            // weight from i into each adjacent community (self loops move with
            // i and are constant across choices)
            std::map<std::int32_t, double> links;
            links[current] += 0.0;
            for (const auto& [j, wt] : w.adj[static_cast<std::size_t>(i)])
                links[comm[static_cast<std::size_t>(j)]] += wt;

            // score(c) = l_c - resolution * tot_c * ki / m2, with i removed;
            // differences of this score are proportional to modularity gains
            community_total[static_cast<std::size_t>(current)] -= ki;
            std::int32_t best = current;
            double best_score = links[current] - resolution * community_total[static_cast<std::size_t>(current)] * ki / m2;
            for (const auto& [c, l] : links) {
                double score = l - resolution * community_total[static_cast<std::size_t>(c)] * ki / m2;
                if (score > best_score + 1e-12 ||
                    (std::abs(score - best_score) <= 1e-12 && c < best)) {
                    best = c;
                    best_score = score;
                }
            }
            community_total[static_cast<std::size_t>(best)] += ki;
            if (best != current) {
                comm[static_cast<std::size_t>(i)] = best;
                moved = true;
            }
        }
        if (sweep_log) sweep_log->push_back(work_modularity(w, comm, resolution));
    }

    // compact ids
    std::map<std::int32_t, std::int32_t> remap;
    for (std::int32_t& c : comm) {
        auto it = remap.emplace(c, static_cast<std::int32_t>(remap.size())).first;
        c = it->second;
    }
    return comm;
}

WorkGraph aggregate(const WorkGraph& w, const std::vector<std::int32_t>& comm, std::int32_t n_comm) {
    WorkGraph out;
    out.n = n_comm;
    out.adj.assign(static_cast<std::size_t>(n_comm), {});
    out.self_loops.assign(static_cast<std::size_t>(n_comm), 0.0);
    out.weighted_degree.assign(static_cast<std::size_t>(n_comm), 0.0);
    out.total_weight = w.total_weight;

    std::map<std::pair<std::int32_t, std::int32_t>, double> between;
    for (std::int64_t i = 0; i < w.n; ++i) {
        std::int32_t ci = comm[static_cast<std::size_t>(i)];
        out.self_loops[static_cast<std::size_t>(ci)] += w.self_loops[static_cast<std::size_t>(i)];
        for (const auto& [j, wt] : w.adj[static_cast<std::size_t>(i)]) {
            std::int32_t cj = comm[static_cast<std::size_t>(j)];
            if (ci == cj) {
                if (i < j) out.self_loops[static_cast<std::size_t>(ci)] += wt;
            } else if (ci < cj) {
                between[{ci, cj}] += wt;
            }
        }
    }
    for (const auto& [key, wt] : between) {
        out.adj[static_cast<std::size_t>(key.first)].push_back({key.second, wt});
        out.adj[static_cast<std::size_t>(key.second)].push_back({key.first, wt});
    }
    for (std::int32_t c = 0; c < n_comm; ++c) {
        double deg = 2.0 * out.self_loops[static_cast<std::size_t>(c)];
        for (const auto& [j, wt] : out.adj[static_cast<std::size_t>(c)]) deg += wt;
        out.weighted_degree[static_cast<std::size_t>(c)] = deg;
    }
    return out;
}

}  // namespace

double modularity(const TextAttributedGraph& g, const std::vector<std::int32_t>& communities,
                  double resolution) {
    if (communities.size() != static_cast<std::size_t>(g.node_count))
        throw ContractViolation("modularity: community vector length mismatch");
    return work_modularity(from_graph(g), communities, resolution);
}

LouvainResult louvain_communities(const TextAttributedGraph& g, double resolution) {
    LouvainResult result;
    result.communities.assign(static_cast<std::size_t>(g.node_count), 0);
    std::iota(result.communities.begin(), result.communities.end(), 0);
    if (g.node_count == 0) return result;

    WorkGraph w = from_graph(g);
    std::vector<std::int32_t> node_to_comm = result.communities;

    while (true) {
        std::vector<std::int32_t> comm = move_phase(w, resolution, &result.sweep_modularity);
        std::int32_t n_comm = comm.empty() ? 0 : *std::max_element(comm.begin(), comm.end()) + 1;
        for (std::size_t i = 0; i < node_to_comm.size(); ++i)
            node_to_comm[i] = comm[static_cast<std::size_t>(node_to_comm[i])];
        if (n_comm == w.n) break;  // no merge happened at this level
        w = aggregate(w, comm, n_comm);
    }

    result.communities = node_to_comm;
    result.final_modularity = modularity(g, result.communities, resolution);

    for (std::size_t s = 1; s < result.sweep_modularity.size(); ++s)
        if (result.sweep_modularity[s] < result.sweep_modularity[s - 1] - 1e-9)
            throw NumericError("modularity decreased across node-move sweeps");
    return result;
}

PartitionAssignment louvain_partition(const TextAttributedGraph& g, std::int32_t clients) {
    if (clients < 1) throw ContractViolation("louvain_partition: need clients >= 1");
    if (clients > g.node_count)
        throw ContractViolation("louvain_partition: more clients than nodes");

    LouvainResult lv = louvain_communities(g);
    std::int32_t n_comm = 0;
    for (std::int32_t c : lv.communities) n_comm = std::max(n_comm, c + 1);

    std::vector<std::int64_t> comm_size(static_cast<std::size_t>(n_comm), 0);
    for (std::int32_t c : lv.communities) comm_size[static_cast<std::size_t>(c)] += 1;

    // split oversized communities when there are fewer communities than
    // clients, so every client ends up non-empty
    std::vector<std::vector<std::int32_t>> groups(static_cast<std::size_t>(n_comm));
    for (std::int64_t i = 0; i < g.node_count; ++i)
        groups[static_cast<std::size_t>(lv.communities[static_cast<std::size_t>(i)])].push_back(static_cast<std::int32_t>(i));
    while (static_cast<std::int32_t>(groups.size()) < clients) {
        auto biggest = std::max_element(groups.begin(), groups.end(),
                                        [](const auto& a, const auto& b) { return a.size() < b.size(); });
        std::vector<std::int32_t> half(biggest->begin() + static_cast<std::ptrdiff_t>(biggest->size() / 2),
                                       biggest->end());
        biggest->resize(biggest->size() / 2);
        groups.push_back(std::move(half));
    }

    // biggest-first onto the currently smallest client
    std::vector<std::size_t> order(groups.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (groups[a].size() != groups[b].size()) return groups[a].size() > groups[b].size();
        return a < b;
    });

    PartitionAssignment p;
    p.client_count = clients;
    p.assignment.assign(static_cast<std::size_t>(g.node_count), 0);
    std::vector<std::int64_t> load(static_cast<std::size_t>(clients), 0);
    for (std::size_t gi : order) {
        std::int32_t target = 0;
        for (std::int32_t k = 1; k < clients; ++k)
            if (load[static_cast<std::size_t>(k)] < load[static_cast<std::size_t>(target)]) target = k;
        for (std::int32_t node : groups[gi]) p.assignment[static_cast<std::size_t>(node)] = target;
        load[static_cast<std::size_t>(target)] += static_cast<std::int64_t>(groups[gi].size());
    }
    p.validate();
    return p;
}

PartitionAssignment random_allocate(const GraphCollection& c, std::int32_t clients, std::uint64_t seed) {
    std::int64_t n = static_cast<std::int64_t>(c.graphs.size());
    if (n < clients) throw ContractViolation("random_allocate: fewer graphs than clients");
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);

    PartitionAssignment p;
    p.client_count = clients;
    p.assignment.assign(static_cast<std::size_t>(n), 0);
    std::int64_t base = n / clients, extra = n % clients, at = 0;
    for (std::int32_t k = 0; k < clients; ++k) {
        std::int64_t take = base + (k < extra ? 1 : 0);
        for (std::int64_t i = 0; i < take; ++i)
            p.assignment[static_cast<std::size_t>(order[static_cast<std::size_t>(at++)])] = k;
    }
    p.validate();
    return p;
}

InducedSubgraphs induce_subgraphs(const TextAttributedGraph& g, const PartitionAssignment& p) {
    if (p.assignment.size() != static_cast<std::size_t>(g.node_count))
        throw ContractViolation("induce_subgraphs: assignment length mismatch");
    p.validate();

    InducedSubgraphs out;
    out.client_graphs.resize(static_cast<std::size_t>(p.client_count));
    out.node_origin.resize(static_cast<std::size_t>(p.client_count));

    std::vector<std::int32_t> local(static_cast<std::size_t>(g.node_count), -1);
    for (std::int64_t i = 0; i < g.node_count; ++i) {
        std::size_t k = static_cast<std::size_t>(p.assignment[static_cast<std::size_t>(i)]);
        local[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(out.node_origin[k].size());
        out.node_origin[k].push_back(static_cast<std::int32_t>(i));
    }

    std::vector<std::vector<std::size_t>> edge_pick(static_cast<std::size_t>(p.client_count));
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
        auto [u, v] = g.edges[e];
        if (p.assignment[static_cast<std::size_t>(u)] == p.assignment[static_cast<std::size_t>(v)]) {
            edge_pick[static_cast<std::size_t>(p.assignment[static_cast<std::size_t>(u)])].push_back(e);
            out.intra_edges += 1;
        } else {
            out.dropped_cross_edges += 1;
        }
    }

    for (std::int32_t k = 0; k < p.client_count; ++k) {
        auto& ck = out.client_graphs[static_cast<std::size_t>(k)];
        const auto& nodes = out.node_origin[static_cast<std::size_t>(k)];
        ck.node_count = static_cast<std::int64_t>(nodes.size());
        ck.label_level = g.label_level;
        ck.class_count = g.class_count;
        ck.domain_tag = g.domain_tag;
        ck.node_features.resize(ck.node_count, g.feature_dim());
        for (std::size_t i = 0; i < nodes.size(); ++i)
            ck.node_features.row(static_cast<Eigen::Index>(i)) = g.node_features.row(nodes[i]);
        if (g.label_level == LabelLevel::node) {
            ck.labels_int.resize(ck.node_count);
            for (std::size_t i = 0; i < nodes.size(); ++i) ck.labels_int(static_cast<Eigen::Index>(i)) = g.labels_int(nodes[i]);
        }
        bool ef = g.has_edge_features();
        if (ef) ck.edge_features.resize(static_cast<Eigen::Index>(edge_pick[static_cast<std::size_t>(k)].size()), g.feature_dim());
        if (g.label_level == LabelLevel::edge)
            ck.labels_int.resize(static_cast<Eigen::Index>(edge_pick[static_cast<std::size_t>(k)].size()));
        Eigen::Index row = 0;
        for (std::size_t e : edge_pick[static_cast<std::size_t>(k)]) {
            auto [u, v] = g.edges[e];
            ck.edges.emplace_back(local[static_cast<std::size_t>(u)], local[static_cast<std::size_t>(v)]);
            if (ef) ck.edge_features.row(row) = g.edge_features.row(static_cast<Eigen::Index>(e));
            if (g.label_level == LabelLevel::edge) ck.labels_int(row) = g.labels_int(static_cast<Eigen::Index>(e));
            ++row;
        }
        ck.validate();
    }
    return out;
}

DataSplit split(const std::vector<std::int32_t>& unit_classes, const SplitRatios& ratios, std::uint64_t seed) {
    if (ratios.train < 0.0 || ratios.val < 0.0 || ratios.test < 0.0)
        throw ContractViolation("split: negative ratio");
    if (ratios.train + ratios.val + ratios.test > 1.0 + 1e-12)
        throw ContractViolation("split: ratios sum above 1");

    std::map<std::int32_t, std::vector<std::int64_t>> strata;
    for (std::size_t i = 0; i < unit_classes.size(); ++i)
        strata[unit_classes[i]].push_back(static_cast<std::int64_t>(i));

    DataSplit out;
    Rng rng(seed);
    for (auto& [cls, members] : strata) {
        rng.shuffle(members);
        std::int64_t m = static_cast<std::int64_t>(members.size());
        auto take = [m](double r) { return static_cast<std::int64_t>(std::floor(r * static_cast<double>(m) + 1e-9)); };
        std::int64_t n_train = take(ratios.train), n_val = take(ratios.val), n_test = take(ratios.test);
        std::int64_t at = 0;
        for (std::int64_t i = 0; i < n_train; ++i) out.train.push_back(members[static_cast<std::size_t>(at++)]);
        for (std::int64_t i = 0; i < n_val; ++i) out.val.push_back(members[static_cast<std::size_t>(at++)]);
        for (std::int64_t i = 0; i < n_test; ++i) out.test.push_back(members[static_cast<std::size_t>(at++)]);
        if (n_train == 0 && ratios.train > 0.0)
            out.warnings.push_back("class " + std::to_string(cls) + " has no training members");
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

}  // namespace fedgfm::graph
