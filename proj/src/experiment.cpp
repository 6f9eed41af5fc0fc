#include "fedgfm/experiment.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

namespace fedgfm::exp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key)) throw ConfigError("unknown config key '" + key + "' in " + where);
}

graph::SyntheticDomainSpec parse_synthetic(const json& j, const std::string& where) {
    reject_unknown(j,
                   {"name", "node_count", "block_sizes", "intra_p", "inter_p", "class_count", "feature_dim",
                    "mean_scale", "cov_scale", "support_offset", "support_width", "seed", "sample_seed"},
                   where);
    graph::SyntheticDomainSpec s;
    s.name = j.value("name", "synthetic");
    s.node_count = j.at("node_count").get<std::int64_t>();
    s.block_sizes = j.at("block_sizes").get<std::vector<std::int64_t>>();
    s.intra_p = j.value("intra_p", 0.1);
    s.inter_p = j.value("inter_p", 0.01);
    s.class_count = j.at("class_count").get<std::int32_t>();
    s.feature_dim = j.at("feature_dim").get<Eigen::Index>();
    s.mean_scale = j.value("mean_scale", 1.0);
    s.cov_scale = j.value("cov_scale", 0.1);
    s.support_offset = j.value("support_offset", 0);
    s.support_width = j.value("support_width", -1);
    s.seed = j.value("seed", 0ULL);
    s.sample_seed = j.value("sample_seed", -1);
    s.validate();
    return s;
}

PartitionMethod partition_from_string(const std::string& s) {
    if (s == "none") return PartitionMethod::none;
    if (s == "louvain") return PartitionMethod::louvain;
    if (s == "random") return PartitionMethod::random;
    throw ConfigError("unknown partition method '" + s + "'");
}

std::string to_string(PartitionMethod m) {
    switch (m) {
        case PartitionMethod::none: return "none";
        case PartitionMethod::louvain: return "louvain";
        case PartitionMethod::random: return "random";
    }
    throw ContractViolation("unknown partition method");
}

// Scoped lock file; one experiment process per output directory.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / "lock") {
        fs::create_directories(dir);
        if (fs::exists(path_))
            throw ConfigError("output directory " + dir.string() + " is locked by another run (remove 'lock' if stale)");
        std::ofstream f(path_);
        f << "pid " << ::getpid() << "\n";
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }

private:
    fs::path path_;
};

void write_run_report(const fs::path& out, const std::string& command, const ExperimentConfig& cfg,
                      const json& extra) {
    json report = {
        {"command", command},
        {"version", kVersion},
        {"seed", cfg.seed},
        {"config", json::parse(config_snapshot(cfg))},
    };
    for (const auto& [k, v] : extra.items()) report[k] = v;
    std::ofstream f(out / "run_report.json", std::ios::trunc);
    f << report.dump(2) << "\n";
    if (!f) throw DataError("cannot write run report in " + out.string());
}

}  // namespace

void ExperimentConfig::validate() const {
    if (datasets.empty()) throw ConfigError("config needs at least one dataset");
    std::set<std::string> names;
    for (const auto& d : datasets) {
        if (!names.insert(d.name).second) throw ConfigError("duplicate dataset name '" + d.name + "'");
        if (d.container.has_value() == d.synthetic.has_value())
            throw ConfigError("dataset '" + d.name + "' needs exactly one of container/synthetic");
        if (d.clients < 1) throw ConfigError("dataset '" + d.name + "' needs at least one client");
        if (d.split.train < 0 || d.split.val < 0 || d.split.test < 0 ||
            d.split.train + d.split.val + d.split.test > 1.0 + 1e-12)
            throw ConfigError("dataset '" + d.name + "' has invalid split ratios");
        if (d.container && !fs::exists(*d.container))
            throw ConfigError("dataset '" + d.name + "' container path does not exist: " + d.container->string());
    }
    model.validate();
    federation.validate();
    std::int64_t total_clients = 0;
    for (const auto& d : datasets) total_clients += d.clients;
    if (adadpp_top_k < 0 ||
        adadpp_top_k > static_cast<Eigen::Index>(total_clients) * federation.prompts_per_client)
        throw ConfigError("adadpp top_k exceeds the pool size K*lambda");
    if (finetune.lr_grid.empty()) throw ConfigError("finetune lr_grid must be non-empty");
    if (finetune.seeds.empty()) throw ConfigError("finetune seeds must be non-empty");
    if (finetune.patience < 1 || finetune.max_epochs < 1) throw ConfigError("finetune schedule invalid");
    if (finetune.shots < 0) throw ConfigError("finetune shots must be >= 0");
}

ExperimentConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid json: ") + e.what());
    }
    reject_unknown(j, {"data", "model", "federation", "ancdai", "adadpp", "finetune", "seed"}, "config");

    ExperimentConfig cfg;
    cfg.seed = j.value("seed", 0ULL);

    if (!j.contains("data")) throw ConfigError("config is missing the data section");
    reject_unknown(j.at("data"), {"datasets"}, "data");
    for (const json& jd : j.at("data").at("datasets")) {
        reject_unknown(jd, {"name", "container", "synthetic", "partition", "clients", "split"},
                       "data.datasets entry");
        DatasetConfig d;
        d.name = jd.at("name").get<std::string>();
        if (jd.contains("container")) d.container = fs::path(jd.at("container").get<std::string>());
        if (jd.contains("synthetic")) d.synthetic = parse_synthetic(jd.at("synthetic"), "dataset " + d.name);
        d.partition = partition_from_string(jd.value("partition", "louvain"));
        d.clients = jd.value("clients", 3);
        if (jd.contains("split")) {
            reject_unknown(jd.at("split"), {"train", "val", "test"}, "split");
            d.split.train = jd.at("split").value("train", 0.0);
            d.split.val = jd.at("split").value("val", 0.0);
            d.split.test = jd.at("split").value("test", 0.0);
        }
        cfg.datasets.push_back(std::move(d));
    }

    if (j.contains("model")) {
        const json& jm = j.at("model");
        reject_unknown(jm,
                       {"d", "heads", "tokens_per_head", "metric", "nonlinearity", "gamma", "beta",
                        "dense_threshold", "token_init_scale"},
                       "model");
        cfg.model.d = jm.value("d", cfg.model.d);
        cfg.model.heads = jm.value("heads", cfg.model.heads);
        cfg.model.tokens_per_head = jm.value("tokens_per_head", cfg.model.tokens_per_head);
        if (jm.contains("metric")) cfg.model.metric = model::metric_from_string(jm.at("metric"));
        if (jm.contains("nonlinearity"))
            cfg.model.act = model::nonlinearity_from_string(jm.at("nonlinearity"));
        cfg.model.gamma = jm.value("gamma", cfg.model.gamma);
        cfg.model.beta = jm.value("beta", cfg.model.beta);
        cfg.model.dense_threshold = jm.value("dense_threshold", cfg.model.dense_threshold);
        cfg.model.token_init_scale = jm.value("token_init_scale", cfg.model.token_init_scale);
    }

    if (j.contains("federation")) {
        const json& jf = j.at("federation");
        reject_unknown(jf,
                       {"rounds", "local_epochs", "lr", "optimizer", "participation",
                        "weight_by_graph_count", "deterministic"},
                       "federation");
        cfg.federation.rounds = jf.value("rounds", cfg.federation.rounds);
        cfg.federation.local_epochs = jf.value("local_epochs", cfg.federation.local_epochs);
        cfg.federation.lr = jf.value("lr", cfg.federation.lr);
        if (jf.contains("optimizer")) {
            std::string o = jf.at("optimizer").get<std::string>();
            if (o != "sgd" && o != "adam") throw ConfigError("unknown optimizer '" + o + "'");
            cfg.federation.optimizer = o == "adam" ? model::OptimizerKind::adam : model::OptimizerKind::sgd;
        }
        cfg.federation.participation = jf.value("participation", cfg.federation.participation);
        cfg.federation.weight_by_graph_count =
            jf.value("weight_by_graph_count", cfg.federation.weight_by_graph_count);
        cfg.federation.deterministic = jf.value("deterministic", cfg.federation.deterministic);
    }

    if (j.contains("ancdai")) {
        const json& ja = j.at("ancdai");
        reject_unknown(ja, {"enabled", "sigma_abs", "sigma_rel"}, "ancdai");
        cfg.federation.ancdai_enabled = ja.value("enabled", cfg.federation.ancdai_enabled);
        cfg.federation.ancdai_sigma_abs = ja.value("sigma_abs", cfg.federation.ancdai_sigma_abs);
        cfg.federation.ancdai_sigma_rel = ja.value("sigma_rel", cfg.federation.ancdai_sigma_rel);
    }

    if (j.contains("adadpp")) {
        const json& ja = j.at("adadpp");
        reject_unknown(ja, {"enabled", "prompts", "init_scale", "top_k"}, "adadpp");
        cfg.federation.adadpp_enabled = ja.value("enabled", cfg.federation.adadpp_enabled);
        cfg.federation.prompts_per_client = ja.value("prompts", cfg.federation.prompts_per_client);
        cfg.federation.prompt_init_scale = ja.value("init_scale", cfg.federation.prompt_init_scale);
        cfg.adadpp_top_k = ja.value("top_k", cfg.adadpp_top_k);
    }

    if (j.contains("finetune")) {
        const json& jf = j.at("finetune");
        reject_unknown(jf, {"lr_grid", "patience", "max_epochs", "seeds", "shots"}, "finetune");
        if (jf.contains("lr_grid")) cfg.finetune.lr_grid = jf.at("lr_grid").get<std::vector<double>>();
        cfg.finetune.patience = jf.value("patience", cfg.finetune.patience);
        cfg.finetune.max_epochs = jf.value("max_epochs", cfg.finetune.max_epochs);
        if (jf.contains("seeds")) cfg.finetune.seeds = jf.at("seeds").get<std::vector<std::uint64_t>>();
        cfg.finetune.shots = jf.value("shots", cfg.finetune.shots);
    }

    cfg.federation.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const fs::path& file) {
    std::ifstream f(file);
    if (!f) throw ConfigError("cannot read config file " + file.string());
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config(text);
}

std::string config_snapshot(const ExperimentConfig& cfg) {
    json datasets = json::array();
    for (const auto& d : cfg.datasets) {
        json jd = {{"name", d.name},
                   {"partition", to_string(d.partition)},
                   {"clients", d.clients},
                   {"split", {{"train", d.split.train}, {"val", d.split.val}, {"test", d.split.test}}}};
        if (d.container) jd["container"] = d.container->string();
        if (d.synthetic) {
            const auto& s = *d.synthetic;
            jd["synthetic"] = {{"name", s.name},
                               {"node_count", s.node_count},
                               {"block_sizes", s.block_sizes},
                               {"intra_p", s.intra_p},
                               {"inter_p", s.inter_p},
                               {"class_count", s.class_count},
                               {"feature_dim", s.feature_dim},
                               {"mean_scale", s.mean_scale},
                               {"cov_scale", s.cov_scale},
                               {"support_offset", s.support_offset},
                               {"support_width", s.support_width},
                               {"seed", s.seed},
                               {"sample_seed", s.sample_seed}};
        }
        datasets.push_back(jd);
    }
    json j = {
        {"seed", cfg.seed},
        {"data", {{"datasets", datasets}}},
        {"model",
         {{"d", cfg.model.d},
          {"heads", cfg.model.heads},
          {"tokens_per_head", cfg.model.tokens_per_head},
          {"metric", model::to_string(cfg.model.metric)},
          {"nonlinearity", model::to_string(cfg.model.act)},
          {"gamma", cfg.model.gamma},
          {"beta", cfg.model.beta},
          {"dense_threshold", cfg.model.dense_threshold},
          {"token_init_scale", cfg.model.token_init_scale}}},
        {"federation",
         {{"rounds", cfg.federation.rounds},
          {"local_epochs", cfg.federation.local_epochs},
          {"lr", cfg.federation.lr},
          {"optimizer", cfg.federation.optimizer == model::OptimizerKind::adam ? "adam" : "sgd"},
          {"participation", cfg.federation.participation},
          {"weight_by_graph_count", cfg.federation.weight_by_graph_count},
          {"deterministic", cfg.federation.deterministic}}},
        {"ancdai",
         {{"enabled", cfg.federation.ancdai_enabled},
          {"sigma_abs", cfg.federation.ancdai_sigma_abs},
          {"sigma_rel", cfg.federation.ancdai_sigma_rel}}},
        {"adadpp",
         {{"enabled", cfg.federation.adadpp_enabled},
          {"prompts", cfg.federation.prompts_per_client},
          {"init_scale", cfg.federation.prompt_init_scale},
          {"top_k", cfg.adadpp_top_k}}},
        {"finetune",
         {{"lr_grid", cfg.finetune.lr_grid},
          {"patience", cfg.finetune.patience},
          {"max_epochs", cfg.finetune.max_epochs},
          {"seeds", cfg.finetune.seeds},
          {"shots", cfg.finetune.shots}}},
    };
    return j.dump(2);
}

// ---- data preparation --------------------------------------------------------

PreparedData prepare_data(const ExperimentConfig& cfg) {
    cfg.validate();
    PreparedData out;
    std::int32_t next_client = 0;
    for (const auto& d : cfg.datasets) {
        PreparedDataset pd;
        pd.config = d;
        if (d.synthetic) {
            graph::TextAttributedGraph g = graph::synth_domain(*d.synthetic);
            if (d.partition == PartitionMethod::louvain && d.clients > 1) {
                graph::PartitionAssignment p = graph::louvain_partition(g, d.clients);
                graph::InducedSubgraphs sub = graph::induce_subgraphs(g, p);
                pd.dropped_cross_edges = sub.dropped_cross_edges;
                for (auto& cg : sub.client_graphs) {
                    graph::GraphCollection c;
                    c.graphs.push_back(std::move(cg));
                    pd.shards.push_back(std::move(c));
                }
            } else {
                graph::GraphCollection c;
                c.graphs.push_back(std::move(g));
                pd.shards.push_back(std::move(c));
                for (std::int32_t k = 1; k < d.clients; ++k)
                    throw ConfigError("dataset '" + d.name + "': partition=none supports a single client");
            }
        } else {
            // a container dir with a manifest is a single graph; otherwise a collection
            if (fs::exists(*d.container / "manifest")) {
                graph::TextAttributedGraph g = graph::load_graph(*d.container);
                if (d.clients == 1 || d.partition == PartitionMethod::none) {
                    if (d.clients != 1)
                        throw ConfigError("dataset '" + d.name + "': partition=none supports a single client");
                    graph::GraphCollection c;
                    c.graphs.push_back(std::move(g));
                    pd.shards.push_back(std::move(c));
                } else if (d.partition == PartitionMethod::louvain) {
                    graph::PartitionAssignment p = graph::louvain_partition(g, d.clients);
                    graph::InducedSubgraphs sub = graph::induce_subgraphs(g, p);
                    pd.dropped_cross_edges = sub.dropped_cross_edges;
                    for (auto& cg : sub.client_graphs) {
                        graph::GraphCollection c;
                        c.graphs.push_back(std::move(cg));
                        pd.shards.push_back(std::move(c));
                    }
                } else {
                    throw ConfigError("dataset '" + d.name + "': random allocation needs a graph collection");
                }
            } else {
                graph::GraphCollection all = graph::load_collection(*d.container);
                if (d.partition != PartitionMethod::random)
                    throw ConfigError("dataset '" + d.name + "': collections use random allocation");
                graph::PartitionAssignment p =
                    graph::random_allocate(all, d.clients, mix_seed(cfg.seed, fnv1a_bytes(fnv1a_init(), d.name.data(), d.name.size())));
                pd.shards.assign(static_cast<std::size_t>(d.clients), {});
                for (std::size_t g = 0; g < all.graphs.size(); ++g)
                    pd.shards[static_cast<std::size_t>(p.assignment[g])].graphs.push_back(all.graphs[g]);
            }
        }
        if (static_cast<std::int32_t>(pd.shards.size()) != d.clients)
            throw ContractViolation("dataset '" + d.name + "' produced " + std::to_string(pd.shards.size()) +
                                    " shards for " + std::to_string(d.clients) + " clients");
        for (auto& shard : pd.shards) {
            shard.validate();
            if (shard.graphs.front().feature_dim() != cfg.model.d)
                throw ConfigError("dataset '" + d.name + "' feature dim " +
                                  std::to_string(shard.graphs.front().feature_dim()) +
                                  " does not match model d=" + std::to_string(cfg.model.d));
            pd.client_ids.push_back(next_client++);
            out.client_shards.push_back(shard);
        }
        out.datasets.push_back(std::move(pd));
    }
    return out;
}

// ---- metric records ------------------------------------------------------------

void write_metrics(const fs::path& file, const std::vector<MetricRecord>& records) {
    std::ofstream f(file, std::ios::trunc);
    if (!f) throw DataError("cannot write metrics to " + file.string());
    for (const auto& r : records) {
        json line = {{"dataset", r.dataset}, {"client", r.client},   {"task", r.task},
                     {"metric_name", r.metric_name}, {"value", r.value}, {"seed", r.seed},
                     {"ablation_flags", {{"ancdai", r.ancdai}, {"adadpp", r.adadpp}}}};
        f << line.dump() << "\n";
    }
}

std::vector<MetricRecord> read_metrics(const fs::path& file) {
    std::ifstream f(file);
    if (!f) throw DataError("cannot read metrics from " + file.string());
    std::vector<MetricRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        MetricRecord r;
        r.dataset = j.at("dataset").get<std::string>();
        r.client = j.at("client").get<std::int32_t>();
        r.task = j.at("task").get<std::string>();
        r.metric_name = j.at("metric_name").get<std::string>();
        r.value = j.at("value").get<double>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.ancdai = j.at("ablation_flags").at("ancdai").get<bool>();
        r.adadpp = j.at("ablation_flags").at("adadpp").get<bool>();
        out.push_back(std::move(r));
    }
    return out;
}

std::string summary_csv(const std::vector<MetricRecord>& records) {
    std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> groups;
    for (const auto& r : records) groups[{r.dataset, r.task, r.metric_name}].push_back(r.value);
    std::string out = "dataset,task,metric,mean,std,runs\n";
    char buf[256];
    for (const auto& [key, values] : groups) {
        double mean = 0.0;
        for (double v : values) mean += v / static_cast<double>(values.size());
        double var = 0.0;
        for (double v : values) var += (v - mean) * (v - mean);
        if (values.size() > 1) var /= static_cast<double>(values.size() - 1);
        std::snprintf(buf, sizeof buf, "%s,%s,%s,%.6f,%.6f,%zu\n", std::get<0>(key).c_str(),
                      std::get<1>(key).c_str(), std::get<2>(key).c_str(), mean, std::sqrt(var),
                      values.size());
        out += buf;
    }
    return out;
}

// ---- subcommands ---------------------------------------------------------------

void cmd_partition(const ExperimentConfig& cfg, const fs::path& out) {
    DirLock lock(out);
    PreparedData data = prepare_data(cfg);
    json summary = json::array();
    for (const auto& pd : data.datasets) {
        fs::path base = out / "partition" / pd.config.name;
        for (std::size_t k = 0; k < pd.shards.size(); ++k) {
            fs::path cdir = base / ("client" + std::to_string(k));
            if (pd.shards[k].graphs.size() == 1)
                graph::save_graph(pd.shards[k].graphs.front(), cdir);
            else
                graph::save_collection(pd.shards[k], cdir);
        }
        json totals = json::array();
        for (const auto& shard : pd.shards) totals.push_back(shard.total_nodes());
        summary.push_back({{"dataset", pd.config.name},
                           {"clients", pd.shards.size()},
                           {"nodes_per_client", totals},
                           {"dropped_cross_edges", pd.dropped_cross_edges}});
    }
    std::ofstream sf(out / "partition" / "summary.json", std::ios::trunc);
    sf << summary.dump(2) << "\n";
    write_run_report(out, "partition", cfg, {{"artifacts", {(out / "partition").string()}}});
}

namespace {

std::vector<fed::ClientState> build_clients(const ExperimentConfig& cfg, const PreparedData& data,
                                            const model::GfmParams& global) {
    std::vector<fed::ClientState> clients;
    std::int32_t id = 0;
    for (const auto& shard : data.client_shards)
        clients.push_back(fed::ClientState::make(id++, shard, global, cfg.federation));
    return clients;
}

}  // namespace

void cmd_pretrain(const ExperimentConfig& cfg, const fs::path& out) {
    DirLock lock(out);
    PreparedData data = prepare_data(cfg);
    model::GfmParams global = model::GfmParams::init(cfg.model, mix_seed(cfg.seed, 0x91f0));
    std::vector<fed::ClientState> clients = build_clients(cfg, data, global);
    fed::PretrainOutcome outcome = fed::run_pretraining(cfg.federation, clients, global);
    fed::save_checkpoint(out / "checkpoint", outcome.server, clients, cfg.federation);
    write_run_report(out, "pretrain", cfg,
                     {{"artifacts", {(out / "checkpoint").string()}},
                      {"rounds_completed", outcome.server.round},
                      {"global_digest", hex_digest(outcome.server.global.digest())}});
}

namespace {

struct LoadedRun {
    fed::Checkpoint ckpt;
    PreparedData data;
    std::optional<prompt::PromptPool> pool;
};

LoadedRun load_run(const ExperimentConfig& cfg, const fs::path& checkpoint) {
    LoadedRun run;
    run.ckpt = fed::load_checkpoint(checkpoint / "checkpoint");
    run.data = prepare_data(cfg);
    std::vector<graph::GraphCollection> shards = run.data.client_shards;
    fed::attach_data(run.ckpt, shards);
    if (run.ckpt.config.adadpp_enabled) {
        std::vector<prompt::PromptSet> sets;
        for (const auto& c : run.ckpt.clients) sets.push_back(c.prompts);
        run.pool = prompt::build_pool(sets);
    }
    return run;
}

fs::path head_path(const fs::path& heads_dir, const std::string& dataset, std::int32_t client,
                   std::uint64_t seed) {
    return heads_dir / (dataset + "_client" + std::to_string(client) + "_seed" + std::to_string(seed) + ".json");
}

void save_head(const task::TaskHead& head, const fs::path& file, double lr) {
    json j = {{"kind", task::to_string(head.kind)},
              {"lr", lr},
              {"weight", std::vector<double>(head.weight.data(), head.weight.data() + head.weight.size())},
              {"weight_rows", head.weight.rows()},
              {"weight_cols", head.weight.cols()},
              {"bias", std::vector<double>(head.bias.data(), head.bias.data() + head.bias.size())}};
    std::ofstream f(file, std::ios::trunc);
    f << j.dump() << "\n";
    if (!f) throw DataError("cannot write head checkpoint " + file.string());
}

task::TaskHead load_head(const fs::path& file) {
    std::ifstream f(file);
    if (!f) throw DataError("missing head checkpoint " + file.string());
    json j;
    f >> j;
    task::TaskHead head;
    head.kind = task::task_kind_from_string(j.at("kind").get<std::string>());
    Eigen::Index rows = j.at("weight_rows").get<Eigen::Index>(), cols = j.at("weight_cols").get<Eigen::Index>();
    std::vector<double> w = j.at("weight").get<std::vector<double>>();
    std::vector<double> b = j.at("bias").get<std::vector<double>>();
    head.weight = Eigen::Map<const Matrix>(w.data(), rows, cols);
    head.bias = Eigen::Map<const Matrix>(b.data(), 1, cols);
    return head;
}

}  // namespace

std::vector<MetricRecord> cmd_finetune(const ExperimentConfig& cfg, const fs::path& checkpoint,
                                       const fs::path& out) {
    DirLock lock(out);
    LoadedRun run = load_run(cfg, checkpoint);
    const prompt::PromptPool* pool = run.pool ? &*run.pool : nullptr;
    std::uint64_t pool_digest = run.pool ? run.pool->digest() : 0;
    std::uint64_t gfm_digest = run.ckpt.server.global.digest();

    fs::path heads_dir = out / "heads";
    fs::create_directories(heads_dir);

    std::vector<MetricRecord> records;
    for (const auto& pd : run.data.datasets) {
        for (std::size_t k = 0; k < pd.shards.size(); ++k) {
            std::int32_t client = pd.client_ids[k];
            task::UnitData units = pd.shards[k].graphs.size() == 1
                                       ? task::extract_units(run.ckpt.server.global, pool,
                                                             pd.shards[k].graphs.front(), cfg.adadpp_top_k)
                                       : task::extract_units(run.ckpt.server.global, pool, pd.shards[k],
                                                             cfg.adadpp_top_k);
            std::string task_name = task::to_string(units.kind);
            std::string metric_name = units.kind == task::TaskKind::graph_cls_multitask ? "auc" : "accuracy";

            for (std::uint64_t seed : cfg.finetune.seeds) {
                graph::DataSplit split =
                    graph::split(units.unit_classes(), pd.config.split,
                                 mix_seed(cfg.seed, mix_seed(seed, mix_seed(0x517, static_cast<std::uint64_t>(client)))));
                if (cfg.finetune.shots > 0)
                    split = task::few_shot_subsample(split, units.unit_classes(), units.kind,
                                                     {cfg.finetune.shots, mix_seed(seed, 0xf5)});
                if (split.train.empty() || split.test.empty())
                    throw DataError("dataset '" + pd.config.name + "' client " + std::to_string(client) +
                                    " has an empty train or test split");

                double best_val = -std::numeric_limits<double>::infinity();
                double best_lr = cfg.finetune.lr_grid.front();
                task::TaskHead best_head;
                for (double lr : cfg.finetune.lr_grid) {
                    task::FinetuneOptions opts;
                    opts.lr = lr;
                    opts.patience = cfg.finetune.patience;
                    opts.max_epochs = cfg.finetune.max_epochs;
                    opts.seed = mix_seed(seed, mix_seed(0xbead, static_cast<std::uint64_t>(client)));
                    task::FinetuneResult r = task::finetune(units, split, opts);
                    if (r.best_val_metric > best_val) {
                        best_val = r.best_val_metric;
                        best_lr = lr;
                        best_head = r.head;
                    }
                }
                double test_metric = task::evaluate(units, best_head, split.test);
                save_head(best_head, head_path(heads_dir, pd.config.name, client, seed), best_lr);
                records.push_back({pd.config.name, client, task_name, metric_name, test_metric, seed,
                                   run.ckpt.config.ancdai_enabled, run.ckpt.config.adadpp_enabled});
            }
        }
    }

    if (run.pool && run.pool->digest() != pool_digest) throw ContractViolation("prompt pool changed during fine-tuning");
    if (run.ckpt.server.global.digest() != gfm_digest) throw ContractViolation("backbone changed during fine-tuning");

    write_metrics(out / "metrics.jsonl", records);
    std::ofstream cf(out / "summary.csv", std::ios::trunc);
    cf << summary_csv(records);
    write_run_report(out, "finetune", cfg,
                     {{"artifacts", {(out / "metrics.jsonl").string(), (out / "summary.csv").string(),
                                     heads_dir.string()}},
                      {"records", records.size()}});
    return records;
}

std::vector<MetricRecord> cmd_evaluate(const ExperimentConfig& cfg, const fs::path& checkpoint,
                                       const fs::path& heads, const fs::path& out) {
    DirLock lock(out);
    LoadedRun run = load_run(cfg, checkpoint);
    const prompt::PromptPool* pool = run.pool ? &*run.pool : nullptr;

    std::vector<MetricRecord> records;
    for (const auto& pd : run.data.datasets) {
        for (std::size_t k = 0; k < pd.shards.size(); ++k) {
            std::int32_t client = pd.client_ids[k];
            task::UnitData units = pd.shards[k].graphs.size() == 1
                                       ? task::extract_units(run.ckpt.server.global, pool,
                                                             pd.shards[k].graphs.front(), cfg.adadpp_top_k)
                                       : task::extract_units(run.ckpt.server.global, pool, pd.shards[k],
                                                             cfg.adadpp_top_k);
            std::string metric_name = units.kind == task::TaskKind::graph_cls_multitask ? "auc" : "accuracy";
            for (std::uint64_t seed : cfg.finetune.seeds) {
                fs::path hp = head_path(heads / "heads", pd.config.name, client, seed);
                task::TaskHead head = load_head(hp);
                graph::DataSplit split =
                    graph::split(units.unit_classes(), pd.config.split,
                                 mix_seed(cfg.seed, mix_seed(seed, mix_seed(0x517, static_cast<std::uint64_t>(client)))));
                double metric = task::evaluate(units, head, split.test);
                records.push_back({pd.config.name, client, task::to_string(units.kind), metric_name, metric,
                                   seed, run.ckpt.config.ancdai_enabled, run.ckpt.config.adadpp_enabled});
            }
        }
    }
    write_metrics(out / "metrics.jsonl", records);
    std::ofstream cf(out / "summary.csv", std::ios::trunc);
    cf << summary_csv(records);
    write_run_report(out, "evaluate", cfg, {{"records", records.size()}});
    return records;
}

void cmd_diagnose(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& out,
                  std::int64_t degree_cap, const std::optional<fs::path>& reference) {
    DirLock lock(out);
    LoadedRun run = load_run(cfg, checkpoint);
    const prompt::PromptPool* pool = run.pool ? &*run.pool : nullptr;

    // one representative graph per dataset: the union of its shards' graphs
    std::vector<graph::TextAttributedGraph> domains;
    for (const auto& pd : run.data.datasets) {
        // use the first shard's first graph as the domain probe
        graph::TextAttributedGraph g = pd.shards.front().graphs.front();
        g.domain_tag = pd.config.name;
        domains.push_back(std::move(g));
    }

    std::optional<model::GfmParams> ref;
    if (reference) ref = fed::load_checkpoint(*reference / "checkpoint").server.global;
    task::EntanglementReport report = task::entanglement_diagnostic(
        run.ckpt.server.global, pool, domains, ref ? &*ref : nullptr);

    auto matrix_csv = [&](const Matrix& m) {
        std::string text = "domain";
        for (const auto& d : report.domains) text += "," + d;
        text += "\n";
        char buf[64];
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            text += report.domains[static_cast<std::size_t>(i)];
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                std::snprintf(buf, sizeof buf, ",%.6f", m(i, j));
                text += buf;
            }
            text += "\n";
        }
        return text;
    };
    std::ofstream rf(out / "similarity_raw.csv", std::ios::trunc);
    rf << matrix_csv(report.raw_similarity);
    std::ofstream ff(out / "similarity_model.csv", std::ios::trunc);
    ff << matrix_csv(report.federated_similarity);
    if (ref) {
        std::ofstream xf(out / "similarity_reference.csv", std::ios::trunc);
        xf << matrix_csv(report.reference_similarity);
    }

    for (std::size_t i = 0; i < domains.size(); ++i) {
        std::ofstream df(out / ("degree_" + report.domains[i] + ".csv"), std::ios::trunc);
        df << "degree,count\n";
        for (const auto& [deg, count] : domains[i].degree_distribution()) {
            if (degree_cap > 0 && deg > degree_cap) continue;
            df << deg << "," << count << "\n";
        }
    }
    write_run_report(out, "diagnose", cfg,
                     {{"mean_offdiagonal_model", report.mean_offdiagonal(report.federated_similarity)},
                      {"mean_offdiagonal_raw", report.mean_offdiagonal(report.raw_similarity)}});
}

void cmd_sweep(const ExperimentConfig& cfg, const std::string& axis, const fs::path& out) {
    DirLock lock(out);
    std::vector<double> grid;
    if (axis == "codebook_tokens") grid = {32, 64, 128, 256};
    else if (axis == "prompt_count") grid = {1, 2, 3, 4, 8};
    else if (axis == "sigma") grid = {0.01, 0.025, 0.05, 0.1, 0.2};
    else throw ConfigError("unknown sweep axis '" + axis + "' (codebook_tokens|prompt_count|sigma)");

    std::string csv = "axis,value,dataset,task,metric,mean,std,runs\n";
    for (double value : grid) {
        ExperimentConfig point = cfg;
        if (axis == "codebook_tokens") point.model.tokens_per_head = static_cast<std::int32_t>(value);
        else if (axis == "prompt_count") point.federation.prompts_per_client = static_cast<Eigen::Index>(value);
        else point.federation.ancdai_sigma_rel = value;

        fs::path pdir = out / (axis + "_" + std::to_string(value));
        cmd_pretrain(point, pdir / "pre");
        std::vector<MetricRecord> records = cmd_finetune(point, pdir / "pre", pdir / "ft");
        std::string summary = summary_csv(records);
        std::istringstream lines(summary);
        std::string line;
        std::getline(lines, line);  // header
        while (std::getline(lines, line))
            if (!line.empty()) csv += axis + "," + std::to_string(value) + "," + line + "\n";
    }
    std::ofstream sf(out / "sweep.csv", std::ios::trunc);
    sf << csv;
    write_run_report(out, "sweep", cfg, {{"axis", axis}, {"points", grid.size()}});
}

// ---- argv entry point -----------------------------------------------------------

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"desk-scale federated graph foundation model simulator"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "runs", checkpoint_dir, heads_dir, axis, reference_dir;
    std::int64_t seed_override = -1;
    bool deterministic = false;
    std::int64_t degree_cap = 0;

    app.add_option("--config", config_path, "experiment config (json)")->required();
    app.add_option("--seed", seed_override, "override the experiment seed");
    app.add_option("--out", out_dir, "output directory");
    app.add_flag("--deterministic", deterministic, "force sequential client execution");

    CLI::App* partition = app.add_subcommand("partition", "write per-client data shards");
    CLI::App* pretrain = app.add_subcommand("pretrain", "federated pre-training to a checkpoint");
    CLI::App* finetune = app.add_subcommand("finetune", "fine-tune task heads from a checkpoint");
    finetune->add_option("--checkpoint", checkpoint_dir, "pretrain output directory")->required();
    CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate saved heads on the test splits");
    evaluate->add_option("--checkpoint", checkpoint_dir, "pretrain output directory")->required();
    evaluate->add_option("--heads", heads_dir, "finetune output directory holding heads/")->required();
    CLI::App* diagnose = app.add_subcommand("diagnose", "embedding-similarity and degree tables");
    diagnose->add_option("--checkpoint", checkpoint_dir, "pretrain output directory")->required();
    diagnose->add_option("--degree-cap", degree_cap, "restrict degree tables to degrees <= cap");
    diagnose->add_option("--reference", reference_dir, "optional reference checkpoint directory");
    CLI::App* sweep = app.add_subcommand("sweep", "grid over one sensitivity axis");
    sweep->add_option("--axis", axis, "codebook_tokens | prompt_count | sigma")->required();

    std::vector<const char*> argv;
    argv.push_back("fedgfm");
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        ExperimentConfig cfg = load_config(config_path);
        if (seed_override >= 0) {
            cfg.seed = static_cast<std::uint64_t>(seed_override);
            cfg.federation.seed = cfg.seed;
        }
        if (deterministic) cfg.federation.deterministic = true;

        if (partition->parsed()) cmd_partition(cfg, out_dir);
        else if (pretrain->parsed()) cmd_pretrain(cfg, out_dir);
        else if (finetune->parsed()) (void)cmd_finetune(cfg, checkpoint_dir, out_dir);
        else if (evaluate->parsed()) (void)cmd_evaluate(cfg, checkpoint_dir, heads_dir, out_dir);
        else if (diagnose->parsed())
            cmd_diagnose(cfg, checkpoint_dir, out_dir, degree_cap,
                         reference_dir.empty() ? std::nullopt : std::optional<fs::path>(reference_dir));
        else if (sweep->parsed()) cmd_sweep(cfg, axis, out_dir);
        return 0;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace fedgfm::exp
