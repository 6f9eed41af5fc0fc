#include "fedgfm/federation.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <thread>

namespace fedgfm::fed {

namespace fs = std::filesystem;
using nlohmann::json;
using model::GfmParams;

void FedConfig::validate() const {
    if (rounds < 0) throw ConfigError("federation: rounds must be >= 0");
    if (local_epochs < 1) throw ConfigError("federation: local_epochs must be >= 1");
    if (lr < 0.0) throw ConfigError("federation: lr must be >= 0");
    if (participation <= 0.0 || participation > 1.0)
        throw ConfigError("federation: participation must be in (0, 1]");
    if (prompts_per_client < 1) throw ConfigError("federation: prompts_per_client must be >= 1");
}

std::uint64_t collection_digest(const graph::GraphCollection& c) {
    std::uint64_t h = fnv1a_init();
    for (const auto& g : c.graphs) h = fnv1a_u64(h, g.digest());
    return h;
}

ClientState ClientState::make(std::int32_t id, graph::GraphCollection data, const GfmParams& global,
                              const FedConfig& cfg) {
    data.validate();
    ClientState c;
    c.client_id = id;
    c.params = global;
    c.prompts = prompt::PromptSet::init(id, cfg.prompts_per_client, global.config.d, cfg.prompt_init_scale,
                                        mix_seed(cfg.seed, mix_seed(0x9209, static_cast<std::uint64_t>(id))));
    c.sample_count = cfg.weight_by_graph_count ? static_cast<std::int64_t>(data.graphs.size())
                                               : data.total_nodes();
    c.data = std::move(data);
    c.optimizer.kind = cfg.optimizer;
    if (c.sample_count < 1) throw ContractViolation("client needs at least one sample");
    return c;
}

void broadcast(const ServerState& server, std::vector<ClientState>& clients) {
    for (ClientState& c : clients) c.params = server.global;
}

model::GfmParams aggregate(const std::vector<const ClientState*>& clients) {
    if (clients.empty()) throw ContractViolation("aggregate: no clients");

    std::vector<const ClientState*> ordered = clients;
    std::sort(ordered.begin(), ordered.end(),
              [](const ClientState* a, const ClientState* b) { return a->client_id < b->client_id; });

    const GfmParams& first = ordered.front()->params;
    Eigen::Index n = first.flat_size();
    double total = 0.0;
    for (const ClientState* c : ordered) {
        if (c->params.flat_size() != n) throw ContractViolation("aggregate: parameter schema mismatch");
        if (c->sample_count < 1) throw ContractViolation("aggregate: client sample count must be positive");
        total += static_cast<double>(c->sample_count);
    }

    Eigen::VectorXd acc = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd lo = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
    Eigen::VectorXd hi = Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
    for (const ClientState* c : ordered) {
        Eigen::VectorXd flat = c->params.flatten();
        acc += (static_cast<double>(c->sample_count) / total) * flat;
        lo = lo.cwiseMin(flat);
        hi = hi.cwiseMax(flat);
    }
    acc = acc.cwiseMax(lo).cwiseMin(hi);

    GfmParams out = first;
    out.unflatten(acc);
    return out;
}

model::GfmParams aggregate(const std::vector<ClientState>& clients) {
    std::vector<const ClientState*> ptrs;
    ptrs.reserve(clients.size());
    for (const ClientState& c : clients) ptrs.push_back(&c);
    return aggregate(ptrs);
}

namespace {

RoundRecord::ClientEntry train_client(ClientState& client, const FedConfig& cfg, int round) {
    RoundRecord::ClientEntry entry;
    entry.client = client.client_id;
    auto start = std::chrono::steady_clock::now();

    Rng round_rng(mix_seed(cfg.seed, mix_seed(static_cast<std::uint64_t>(client.client_id),
                                              static_cast<std::uint64_t>(round))));
    model::LocalTrainResult last;
    for (int epoch = 0; epoch < cfg.local_epochs && !entry.diverged; ++epoch) {
        model::LossBreakdown epoch_loss;
        double weight = 0.0;
        for (graph::TextAttributedGraph& g : client.data.graphs) {
            model::LocalTrainResult r = model::local_pretrain_step(
                client.params, g, cfg.lr, 1, client.optimizer, round_rng,
                cfg.adadpp_enabled ? &client.prompts : nullptr);
            if (r.diverged) {
                entry.diverged = true;
                break;
            }
            double w = static_cast<double>(g.node_count);
            const model::LossBreakdown& b = r.history.front();
            epoch_loss.total += w * b.total;
            epoch_loss.feat += w * b.feat;
            epoch_loss.topo += w * b.topo;
            epoch_loss.codebook_term += w * b.codebook_term;
            epoch_loss.commitment_term += w * b.commitment_term;
            epoch_loss.gamma = b.gamma;
            epoch_loss.beta = b.beta;
            weight += w;
        }
        if (!entry.diverged && weight > 0.0) {
            epoch_loss.total /= weight;
            epoch_loss.feat /= weight;
            epoch_loss.topo /= weight;
            epoch_loss.commitment_term /= weight;
            epoch_loss.codebook_term /= weight;
            entry.loss = epoch_loss;
        }
    }
    // deterministic runs promise bitwise-identical checkpoints, so wall-clock
    // audit fields are zeroed there
    entry.duration_ms = cfg.deterministic
                            ? 0.0
                            : std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return entry;
}

// One communication round: broadcast, local updates (sequential in id order
// under deterministic mode, threaded otherwise), weighted aggregation.
RoundRecord run_round(const FedConfig& cfg, int round, ServerState& server,
                      std::vector<ClientState>& clients) {
    RoundRecord record;
    record.round = round;
    record.digest_before = hex_digest(server.global.digest());

    broadcast(server, clients);

    std::vector<std::size_t> participating;
    for (std::size_t i = 0; i < clients.size(); ++i) participating.push_back(i);
    if (cfg.participation < 1.0) {
        Rng pick(mix_seed(cfg.seed, mix_seed(0x9a57, static_cast<std::uint64_t>(round))));
        pick.shuffle(participating);
        std::size_t keep = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::ceil(cfg.participation * static_cast<double>(clients.size()))));
        participating.resize(keep);
        std::sort(participating.begin(), participating.end());
    }

    record.clients.resize(participating.size());
    auto run_one = [&](std::size_t slot) {
        record.clients[slot] = train_client(clients[participating[slot]], cfg, round);
    };
    if (cfg.deterministic) {
        for (std::size_t s = 0; s < participating.size(); ++s) run_one(s);
    } else {
        std::vector<std::thread> workers;
        workers.reserve(participating.size());
        for (std::size_t s = 0; s < participating.size(); ++s) workers.emplace_back(run_one, s);
        for (std::thread& t : workers) t.join();
    }

    // diverged clients sit out this round's average; weights renormalize
    std::vector<const ClientState*> contributors;
    for (std::size_t s = 0; s < participating.size(); ++s)
        if (!record.clients[s].diverged) contributors.push_back(&clients[participating[s]]);
    if (!contributors.empty()) server.global = aggregate(contributors);

    record.digest_after = hex_digest(server.global.digest());
    server.round = round;
    return record;
}

}  // namespace

PretrainOutcome run_pretraining(const FedConfig& cfg, std::vector<ClientState>& clients,
                                const GfmParams& global_init) {
    cfg.validate();
    if (clients.empty()) throw ContractViolation("run_pretraining: no clients");

    PretrainOutcome out;
    out.server.global = global_init;

    if (cfg.ancdai_enabled) {
        for (const ClientState& c : clients)
            out.server.prototypes.push_back(anchor::extract_prototype(global_init, c.data, c.client_id));
        double sigma = anchor::resolve_sigma(out.server.prototypes, cfg.ancdai_sigma_abs, cfg.ancdai_sigma_rel);
        out.server.global.codebook = anchor::init_codebook(out.server.prototypes, global_init.config, sigma,
                                                           mix_seed(cfg.seed, 0xa2c4));
    }

    for (int r = 1; r <= cfg.rounds; ++r) {
        RoundRecord record = run_round(cfg, r, out.server, clients);
        out.server.log.push_back(record);
        out.history.push_back(std::move(record));
    }
    return out;
}

// ---- checkpointing -----------------------------------------------------------

namespace {

constexpr int kCheckpointSchema = 1;

json config_to_json(const FedConfig& cfg) {
    return json{{"rounds", cfg.rounds},
                {"local_epochs", cfg.local_epochs},
                {"lr", cfg.lr},
                {"optimizer", cfg.optimizer == model::OptimizerKind::sgd ? "sgd" : "adam"},
                {"ancdai_enabled", cfg.ancdai_enabled},
                {"adadpp_enabled", cfg.adadpp_enabled},
                {"ancdai_sigma_abs", cfg.ancdai_sigma_abs},
                {"ancdai_sigma_rel", cfg.ancdai_sigma_rel},
                {"prompts_per_client", cfg.prompts_per_client},
                {"prompt_init_scale", cfg.prompt_init_scale},
                {"participation", cfg.participation},
                {"weight_by_graph_count", cfg.weight_by_graph_count},
                {"deterministic", cfg.deterministic},
                {"seed", cfg.seed}};
}

FedConfig config_from_json(const json& j) {
    FedConfig cfg;
    cfg.rounds = j.at("rounds").get<int>();
    cfg.local_epochs = j.at("local_epochs").get<int>();
    cfg.lr = j.at("lr").get<double>();
    cfg.optimizer = j.at("optimizer").get<std::string>() == "adam" ? model::OptimizerKind::adam
                                                                   : model::OptimizerKind::sgd;
    cfg.ancdai_enabled = j.at("ancdai_enabled").get<bool>();
    cfg.adadpp_enabled = j.at("adadpp_enabled").get<bool>();
    cfg.ancdai_sigma_abs = j.at("ancdai_sigma_abs").get<double>();
    cfg.ancdai_sigma_rel = j.at("ancdai_sigma_rel").get<double>();
    cfg.prompts_per_client = j.at("prompts_per_client").get<Eigen::Index>();
    cfg.prompt_init_scale = j.at("prompt_init_scale").get<double>();
    cfg.participation = j.at("participation").get<double>();
    cfg.weight_by_graph_count = j.at("weight_by_graph_count").get<bool>();
    cfg.deterministic = j.at("deterministic").get<bool>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

void write_matrix_blob(const fs::path& p, const Matrix& m) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + p.string());
    std::int64_t rows = m.rows(), cols = m.cols();
    f.write(reinterpret_cast<const char*>(&rows), sizeof rows);
    f.write(reinterpret_cast<const char*>(&cols), sizeof cols);
    f.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
    if (!f) throw DataError("short write to " + p.string());
}

Matrix read_matrix_blob(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw DataError("cannot read " + p.string());
    std::int64_t rows = 0, cols = 0;
    if (!f.read(reinterpret_cast<char*>(&rows), sizeof rows) ||
        !f.read(reinterpret_cast<char*>(&cols), sizeof cols))
        throw DataError("matrix blob truncated: " + p.string());
    Matrix m(rows, cols);
    if (!f.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size()))))
        throw DataError("matrix blob truncated: " + p.string());
    return m;
}

json loss_to_json(const model::LossBreakdown& b) {
    return json{{"total", b.total},         {"feat", b.feat},
                {"topo", b.topo},           {"codebook", b.codebook_term},
                {"commit", b.commitment_term}, {"gamma", b.gamma},
                {"beta", b.beta}};
}

model::LossBreakdown loss_from_json(const json& j) {
    model::LossBreakdown b;
    b.total = j.at("total").get<double>();
    b.feat = j.at("feat").get<double>();
    b.topo = j.at("topo").get<double>();
    b.codebook_term = j.at("codebook").get<double>();
    b.commitment_term = j.at("commit").get<double>();
    b.gamma = j.at("gamma").get<double>();
    b.beta = j.at("beta").get<double>();
    return b;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const ServerState& server, const std::vector<ClientState>& clients,
                     const FedConfig& cfg) {
    fs::create_directories(dir);
    model::save_params(server.global, dir / "global");

    json manifest = {
        {"schema", kCheckpointSchema},
        {"round", server.round},
        {"config", config_to_json(cfg)},
        {"rng", {{"scheme", "mix(seed, client, round)"}, {"seed", cfg.seed}, {"next_round", server.round + 1}}},
        {"clients", json::array()},
    };
    for (const ClientState& c : clients) {
        json jc = {{"id", c.client_id},
                   {"samples", c.sample_count},
                   {"data_digest", collection_digest(c.data)},
                   {"optimizer_steps", c.optimizer.step_count}};
        manifest["clients"].push_back(jc);
        fs::path cdir = dir / ("client" + std::to_string(c.client_id));
        model::save_params(c.params, cdir);
        write_matrix_blob(cdir / "prompts.mat", c.prompts.prompts);
        write_matrix_blob(cdir / "projections.mat", c.prompts.projections);
        for (std::size_t i = 0; i < c.optimizer.m.size(); ++i) {
            write_matrix_blob(cdir / ("adam_m" + std::to_string(i) + ".mat"), c.optimizer.m[i]);
            write_matrix_blob(cdir / ("adam_v" + std::to_string(i) + ".mat"), c.optimizer.v[i]);
        }
        std::ofstream mo(cdir / "moments.json", std::ios::trunc);
        mo << json{{"count", c.optimizer.m.size()}, {"steps", c.optimizer.step_count}}.dump() << "\n";
    }
    anchor::save_prototypes(server.prototypes, dir / "prototypes.bin");

    std::ofstream sf(dir / "server.json", std::ios::trunc);
    sf << manifest.dump(2) << "\n";
    if (!sf) throw DataError("cannot write server manifest");

    std::ofstream rf(dir / "rounds.jsonl", std::ios::trunc);
    for (const RoundRecord& r : server.log) {
        for (const auto& ce : r.clients) {
            json line = {{"round", r.round},
                         {"client", ce.client},
                         {"loss_total", ce.loss.total},
                         {"loss_feat", ce.loss.feat},
                         {"loss_topo", ce.loss.topo},
                         {"loss_codebook", ce.loss.codebook_term},
                         {"loss_commit", ce.loss.commitment_term},
                         {"duration_ms", ce.duration_ms},
                         {"diverged", ce.diverged}};
            rf << line.dump() << "\n";
        }
    }

    std::ofstream lf(dir / "round_log.json", std::ios::trunc);
    json full = json::array();
    for (const RoundRecord& r : server.log) {
        json jr = {{"round", r.round},
                   {"digest_before", r.digest_before},
                   {"digest_after", r.digest_after},
                   {"clients", json::array()}};
        for (const auto& ce : r.clients)
            jr["clients"].push_back({{"client", ce.client},
                                     {"loss", loss_to_json(ce.loss)},
                                     {"diverged", ce.diverged},
                                     {"duration_ms", ce.duration_ms}});
        full.push_back(jr);
    }
    lf << full.dump(2) << "\n";
}

Checkpoint load_checkpoint(const fs::path& dir) {
    std::ifstream sf(dir / "server.json");
    if (!sf) throw DataError("missing checkpoint manifest at " + (dir / "server.json").string());
    json manifest;
    try {
        sf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
    }
    int schema = manifest.value("schema", -1);
    if (schema != kCheckpointSchema)
        throw DataError("checkpoint schema version mismatch: file has " + std::to_string(schema) +
                        ", reader expects " + std::to_string(kCheckpointSchema));

    Checkpoint ckpt;
    ckpt.config = config_from_json(manifest.at("config"));
    ckpt.server.global = model::load_params(dir / "global");
    ckpt.server.round = manifest.at("round").get<int>();
    if (fs::exists(dir / "prototypes.bin")) ckpt.server.prototypes = anchor::load_prototypes(dir / "prototypes.bin");

    for (const json& jc : manifest.at("clients")) {
        ClientState c;
        c.client_id = jc.at("id").get<std::int32_t>();
        c.sample_count = jc.at("samples").get<std::int64_t>();
        fs::path cdir = dir / ("client" + std::to_string(c.client_id));
        c.params = model::load_params(cdir);
        c.prompts.client_id = c.client_id;
        c.prompts.prompts = read_matrix_blob(cdir / "prompts.mat");
        c.prompts.projections = read_matrix_blob(cdir / "projections.mat");
        c.optimizer.kind = ckpt.config.optimizer;
        std::ifstream mo(cdir / "moments.json");
        if (mo) {
            json jm;
            mo >> jm;
            std::size_t count = jm.at("count").get<std::size_t>();
            c.optimizer.step_count = jm.at("steps").get<std::int64_t>();
            for (std::size_t i = 0; i < count; ++i) {
                c.optimizer.m.push_back(read_matrix_blob(cdir / ("adam_m" + std::to_string(i) + ".mat")));
                c.optimizer.v.push_back(read_matrix_blob(cdir / ("adam_v" + std::to_string(i) + ".mat")));
            }
        }
        ckpt.clients.push_back(std::move(c));
        ckpt.client_data_digests.push_back(jc.at("data_digest").get<std::uint64_t>());
    }

    // round log (for audit continuity)
    std::ifstream lf(dir / "round_log.json");
    if (lf) {
        json full;
        lf >> full;
        for (const json& jr : full) {
            RoundRecord r;
            r.round = jr.at("round").get<int>();
            r.digest_before = jr.at("digest_before").get<std::string>();
            r.digest_after = jr.at("digest_after").get<std::string>();
            for (const json& jc : jr.at("clients")) {
                RoundRecord::ClientEntry ce;
                ce.client = jc.at("client").get<std::int32_t>();
                ce.loss = loss_from_json(jc.at("loss"));
                ce.diverged = jc.at("diverged").get<bool>();
                ce.duration_ms = jc.at("duration_ms").get<double>();
                r.clients.push_back(ce);
            }
            ckpt.server.log.push_back(std::move(r));
        }
    }
    return ckpt;
}

void attach_data(Checkpoint& ckpt, const std::vector<graph::GraphCollection>& shards) {
    if (shards.size() != ckpt.clients.size())
        throw ContractViolation("attach_data: shard count does not match checkpointed clients");
    for (std::size_t i = 0; i < shards.size(); ++i) {
        if (collection_digest(shards[i]) != ckpt.client_data_digests[i])
            throw DataError("attach_data: shard digest mismatch for client " +
                            std::to_string(ckpt.clients[i].client_id));
        ckpt.clients[i].data = shards[i];
    }
}

PretrainOutcome resume_pretraining(Checkpoint& ckpt) {
    for (const auto& c : ckpt.clients)
        if (c.data.graphs.empty()) throw ContractViolation("resume: client data not attached");

    PretrainOutcome out;
    out.server = ckpt.server;
    for (int r = ckpt.server.round + 1; r <= ckpt.config.rounds; ++r) {
        RoundRecord record = run_round(ckpt.config, r, out.server, ckpt.clients);
        out.server.log.push_back(record);
        out.history.push_back(std::move(record));
    }
    return out;
}

}  // namespace fedgfm::fed
