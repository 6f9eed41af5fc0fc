#include "fedgfm/graph.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

namespace fedgfm::graph {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(LabelLevel level) {
    switch (level) {
        case LabelLevel::node: return "node";
        case LabelLevel::edge: return "edge";
        case LabelLevel::graph: return "graph";
    }
    throw ContractViolation("unknown label level");
}

LabelLevel label_level_from_string(const std::string& s) {
    if (s == "node") return LabelLevel::node;
    if (s == "edge") return LabelLevel::edge;
    if (s == "graph") return LabelLevel::graph;
    throw DataError("unknown label_level '" + s + "'");
}

void TextAttributedGraph::validate() const {
    if (node_count < 0) throw DataError("negative node count");
    if (node_features.rows() != node_count)
        throw DataError("feature matrix has " + std::to_string(node_features.rows()) + " rows for " +
                        std::to_string(node_count) + " nodes");
    std::set<std::pair<std::int32_t, std::int32_t>> seen;
    for (const auto& [u, v] : edges) {
        if (u < 0 || v < 0 || u >= node_count || v >= node_count)
            throw DataError("edge (" + std::to_string(u) + "," + std::to_string(v) + ") out of range for n=" +
                            std::to_string(node_count));
        auto key = std::minmax(u, v);
        if (!seen.insert({key.first, key.second}).second)
            throw DataError("duplicate undirected edge (" + std::to_string(u) + "," + std::to_string(v) + ")");
    }
    if (has_edge_features() && edge_features.rows() != edge_count())
        throw DataError("edge feature rows do not match edge count");
    switch (label_level) {
        case LabelLevel::node:
            if (labels_int.size() != node_count) throw DataError("node labels must have length n");
            break;
        case LabelLevel::edge:
            if (labels_int.size() != edge_count()) throw DataError("edge labels must have length |E|");
            break;
        case LabelLevel::graph:
            if (labels_float.rows() != 1 || labels_float.cols() != class_count)
                throw DataError("graph labels must be 1 x task_count");
            break;
    }
}

Matrix TextAttributedGraph::dense_adjacency() const {
    Matrix a = Matrix::Zero(node_count, node_count);
    for (const auto& [u, v] : edges) {
        a(u, v) = 1.0;
        a(v, u) = 1.0;
    }
    return a;
}

Matrix TextAttributedGraph::neighbor_mean_operator() const {
    Matrix m = Matrix::Zero(node_count, node_count);
    std::vector<std::int64_t> deg = degrees();
    for (const auto& [u, v] : edges) {
        m(u, v) += 1.0;
        m(v, u) += 1.0;
    }
    for (std::int64_t i = 0; i < node_count; ++i)
        if (deg[i] > 0) m.row(i) /= static_cast<double>(deg[i]);
    return m;
}

Matrix TextAttributedGraph::mean_incident_edge_features() const {
    Matrix out = Matrix::Zero(node_count, feature_dim());
    if (!has_edge_features()) return out;
    std::vector<std::int64_t> deg = degrees();
    for (std::size_t e = 0; e < edges.size(); ++e) {
        out.row(edges[e].first) += edge_features.row(static_cast<Eigen::Index>(e));
        out.row(edges[e].second) += edge_features.row(static_cast<Eigen::Index>(e));
    }
    for (std::int64_t i = 0; i < node_count; ++i)
        if (deg[i] > 0) out.row(i) /= static_cast<double>(deg[i]);
    return out;
}

std::vector<std::int64_t> TextAttributedGraph::degrees() const {
    std::vector<std::int64_t> deg(static_cast<std::size_t>(node_count), 0);
    for (const auto& [u, v] : edges) {
        deg[static_cast<std::size_t>(u)] += 1;
        if (u != v) deg[static_cast<std::size_t>(v)] += 1;
    }
    return deg;
}

std::map<std::int64_t, std::int64_t> TextAttributedGraph::degree_distribution() const {
    std::map<std::int64_t, std::int64_t> hist;
    for (std::int64_t d : degrees()) hist[d] += 1;
    return hist;
}

std::uint64_t TextAttributedGraph::digest() const {
    std::uint64_t h = fnv1a_init();
    h = fnv1a_u64(h, static_cast<std::uint64_t>(node_count));
    for (const auto& [u, v] : edges) {
        h = fnv1a_u64(h, static_cast<std::uint64_t>(u));
        h = fnv1a_u64(h, static_cast<std::uint64_t>(v));
    }
    h = fnv1a_matrix(h, node_features);
    if (has_edge_features()) h = fnv1a_matrix(h, edge_features);
    h = fnv1a_u64(h, static_cast<std::uint64_t>(label_level));
    h = fnv1a_bytes(h, labels_int.data(), sizeof(std::int32_t) * static_cast<std::size_t>(labels_int.size()));
    if (labels_float.size() > 0) h = fnv1a_matrix(h, labels_float);
    return h;
}

void GraphCollection::validate() const {
    if (graphs.empty()) throw DataError("empty graph collection");
    Eigen::Index d = graphs.front().feature_dim();
    std::int32_t arity = graphs.front().class_count;
    LabelLevel level = graphs.front().label_level;
    for (const auto& g : graphs) {
        g.validate();
        if (g.feature_dim() != d) throw DataError("collection mixes feature dimensions");
        if (g.class_count != arity || g.label_level != level)
            throw DataError("collection mixes label arities");
    }
}

std::int64_t GraphCollection::total_nodes() const {
    std::int64_t n = 0;
    for (const auto& g : graphs) n += g.node_count;
    return n;
}

// ---- binary io -------------------------------------------------------------

namespace {

void write_bytes(const fs::path& p, const void* data, std::size_t n) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + p.string());
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!f) throw DataError("short write to " + p.string());
}

std::vector<char> read_bytes(const fs::path& p, std::size_t expected) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw DataError("cannot read " + p.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() != expected)
        throw DataError("format error in " + p.string() + ": expected " + std::to_string(expected) +
                        " bytes, file ends at byte offset " + std::to_string(buf.size()));
    return buf;
}

Matrix read_f32_matrix(const fs::path& p, Eigen::Index rows, Eigen::Index cols) {
    std::vector<char> buf = read_bytes(p, sizeof(float) * static_cast<std::size_t>(rows * cols));
    Matrix m(rows, cols);
    const float* src = reinterpret_cast<const float*>(buf.data());
    for (Eigen::Index i = 0; i < rows * cols; ++i) m.data()[i] = static_cast<double>(src[i]);
    return m;
}

void write_f32_matrix(const fs::path& p, const Matrix& m) {
    std::vector<float> buf(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
    write_bytes(p, buf.data(), sizeof(float) * buf.size());
}

}  // namespace

TextAttributedGraph load_graph(const fs::path& container) {
    fs::path mp = container / "manifest";
    std::ifstream mf(mp);
    if (!mf) throw DataError("missing manifest at " + mp.string());
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw DataError("malformed manifest " + mp.string() + ": " + e.what());
    }

    TextAttributedGraph g;
    try {
        g.node_count = manifest.at("n").get<std::int64_t>();
        g.label_level = label_level_from_string(manifest.at("label_level").get<std::string>());
        g.class_count = manifest.at("classes").get<std::int32_t>();
        g.domain_tag = manifest.value("domain_tag", "");
        std::int64_t edge_count = manifest.at("edges").get<std::int64_t>();
        Eigen::Index d = manifest.at("d").get<Eigen::Index>();

        std::vector<char> ebuf =
            read_bytes(container / "edges.bin", sizeof(std::uint32_t) * 2 * static_cast<std::size_t>(edge_count));
        const std::uint32_t* ep = reinterpret_cast<const std::uint32_t*>(ebuf.data());
        g.edges.reserve(static_cast<std::size_t>(edge_count));
        for (std::int64_t e = 0; e < edge_count; ++e)
            g.edges.emplace_back(static_cast<std::int32_t>(ep[2 * e]), static_cast<std::int32_t>(ep[2 * e + 1]));

        g.node_features = read_f32_matrix(container / "features.bin", g.node_count, d);
        if (manifest.value("edge_features", false))
            g.edge_features = read_f32_matrix(container / "edge_features.bin", edge_count, d);

        if (g.label_level == LabelLevel::graph) {
            std::vector<char> lb = read_bytes(container / "labels.bin",
                                              sizeof(float) * static_cast<std::size_t>(g.class_count));
            g.labels_float.resize(1, g.class_count);
            const float* lp = reinterpret_cast<const float*>(lb.data());
            for (std::int32_t i = 0; i < g.class_count; ++i) g.labels_float(0, i) = static_cast<double>(lp[i]);
        } else {
            std::int64_t count = g.label_level == LabelLevel::node ? g.node_count : edge_count;
            std::vector<char> lb =
                read_bytes(container / "labels.bin", sizeof(std::int32_t) * static_cast<std::size_t>(count));
            g.labels_int.resize(count);
            std::memcpy(g.labels_int.data(), lb.data(), lb.size());
        }
    } catch (const json::exception& e) {
        throw DataError("manifest " + mp.string() + ": " + e.what());
    }
    g.validate();
    return g;
}

void save_graph(const TextAttributedGraph& g, const fs::path& container) {
    g.validate();
    fs::create_directories(container);
    json manifest = {
        {"schema", 1},
        {"n", g.node_count},
        {"edges", g.edge_count()},
        {"d", g.feature_dim()},
        {"label_level", to_string(g.label_level)},
        {"classes", g.class_count},
        {"domain_tag", g.domain_tag},
        {"edge_features", g.has_edge_features()},
    };
    std::ofstream mf(container / "manifest", std::ios::trunc);
    mf << manifest.dump(2) << "\n";
    if (!mf) throw DataError("cannot write manifest in " + container.string());

    std::vector<std::uint32_t> ebuf;
    ebuf.reserve(g.edges.size() * 2);
    for (const auto& [u, v] : g.edges) {
        ebuf.push_back(static_cast<std::uint32_t>(u));
        ebuf.push_back(static_cast<std::uint32_t>(v));
    }
    write_bytes(container / "edges.bin", ebuf.data(), sizeof(std::uint32_t) * ebuf.size());
    write_f32_matrix(container / "features.bin", g.node_features);
    if (g.has_edge_features()) write_f32_matrix(container / "edge_features.bin", g.edge_features);

    if (g.label_level == LabelLevel::graph) {
        std::vector<float> lb(static_cast<std::size_t>(g.class_count));
        for (std::int32_t i = 0; i < g.class_count; ++i) lb[static_cast<std::size_t>(i)] = static_cast<float>(g.labels_float(0, i));
        write_bytes(container / "labels.bin", lb.data(), sizeof(float) * lb.size());
    } else {
        write_bytes(container / "labels.bin", g.labels_int.data(),
                    sizeof(std::int32_t) * static_cast<std::size_t>(g.labels_int.size()));
    }
}

GraphCollection load_collection(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("collection directory missing: " + dir.string());
    std::vector<fs::path> entries;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) entries.push_back(e.path());
    std::sort(entries.begin(), entries.end());
    GraphCollection c;
    for (const auto& p : entries) c.graphs.push_back(load_graph(p));
    c.validate();
    return c;
}

void save_collection(const GraphCollection& c, const fs::path& dir) {
    c.validate();
    fs::create_directories(dir);
    char name[16];
    for (std::size_t i = 0; i < c.graphs.size(); ++i) {
        std::snprintf(name, sizeof name, "g%06zu", i);
        save_graph(c.graphs[i], dir / name);
    }
}

// ---- synthetic domains -----------------------------------------------------

void SyntheticDomainSpec::validate() const {
    if (node_count <= 0) throw ConfigError("synthetic spec: node_count must be positive");
    if (feature_dim <= 0) throw ConfigError("synthetic spec: feature_dim must be positive");
    if (class_count <= 0) throw ConfigError("synthetic spec: class_count must be positive");
    if (block_sizes.empty()) throw ConfigError("synthetic spec: block_sizes must be non-empty");
    std::int64_t total = 0;
    for (std::int64_t b : block_sizes) total += b;
    if (total != node_count) throw ConfigError("synthetic spec: block sizes must sum to node_count");
    if (intra_p < 0.0 || intra_p > 1.0 || inter_p < 0.0 || inter_p > 1.0)
        throw ConfigError("synthetic spec: probabilities must lie in [0,1]");
    Eigen::Index width = support_width < 0 ? feature_dim : support_width;
    if (support_offset < 0 || support_offset + width > feature_dim)
        throw ConfigError("synthetic spec: feature support window out of range");
}

TextAttributedGraph synth_domain(const SyntheticDomainSpec& spec) {
    spec.validate();
    Rng mean_rng(spec.seed);
    Rng rng(spec.sample_seed >= 0 ? static_cast<std::uint64_t>(spec.sample_seed)
                                  : mix_seed(spec.seed, 0xfea7));
    Eigen::Index width = spec.support_width < 0 ? spec.feature_dim : spec.support_width;

    Matrix class_means = Matrix::Zero(spec.class_count, spec.feature_dim);
    for (std::int32_t c = 0; c < spec.class_count; ++c)
        for (Eigen::Index j = 0; j < width; ++j)
            class_means(c, spec.support_offset + j) = spec.mean_scale * mean_rng.normal();

    TextAttributedGraph g;
    g.node_count = spec.node_count;
    g.label_level = LabelLevel::node;
    g.class_count = spec.class_count;
    g.domain_tag = spec.name;

    std::vector<std::int32_t> block_of(static_cast<std::size_t>(spec.node_count));
    {
        std::int64_t at = 0;
        for (std::size_t b = 0; b < spec.block_sizes.size(); ++b)
            for (std::int64_t i = 0; i < spec.block_sizes[b]; ++i) block_of[static_cast<std::size_t>(at++)] = static_cast<std::int32_t>(b);
    }

    g.labels_int.resize(spec.node_count);
    g.node_features.resize(spec.node_count, spec.feature_dim);
    for (std::int64_t i = 0; i < spec.node_count; ++i) {
        std::int32_t cls = block_of[static_cast<std::size_t>(i)] % spec.class_count;
        g.labels_int(i) = cls;
        for (Eigen::Index j = 0; j < spec.feature_dim; ++j)
            g.node_features(i, j) = class_means(cls, j) + spec.cov_scale * rng.normal();
    }

    for (std::int64_t u = 0; u < spec.node_count; ++u) {
        for (std::int64_t v = u + 1; v < spec.node_count; ++v) {
            double p = block_of[static_cast<std::size_t>(u)] == block_of[static_cast<std::size_t>(v)] ? spec.intra_p : spec.inter_p;
            if (rng.uniform() < p)
                g.edges.emplace_back(static_cast<std::int32_t>(u), static_cast<std::int32_t>(v));
        }
    }
    g.validate();
    return g;
}

}  // namespace fedgfm::graph
