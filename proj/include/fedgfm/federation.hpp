#pragma once

#include "fedgfm/ancdai.hpp"
#include "fedgfm/gvqvae.hpp"
#include "fedgfm/partition.hpp"

#include <filesystem>
#include <vector>

namespace fedgfm::fed {

struct FedConfig {
    int rounds = 25;
    int local_epochs = 2;
    double lr = 1e-4;
    model::OptimizerKind optimizer = model::OptimizerKind::sgd;
    bool ancdai_enabled = true;
    bool adadpp_enabled = true;
    double ancdai_sigma_abs = -1.0;  // < 0: relative scaling below
    double ancdai_sigma_rel = 0.05;
    Eigen::Index prompts_per_client = 3;
    double prompt_init_scale = 0.01;
    double participation = 1.0;           // fraction of clients training per round
    bool weight_by_graph_count = false;   // N_k = graph count instead of node count
    bool deterministic = true;            // sequential client execution in id order
    std::uint64_t seed = 0;

    void validate() const;
};

// One client: local backbone, private prompts, and its data shard. The shard
// is a collection (a single graph for subgraph-level decentralization).
struct ClientState {
    std::int32_t client_id = 0;
    model::GfmParams params;
    prompt::PromptSet prompts;
    graph::GraphCollection data;
    std::int64_t sample_count = 0;  // N_k
    model::Optimizer optimizer;

    static ClientState make(std::int32_t id, graph::GraphCollection data, const model::GfmParams& global,
                            const FedConfig& cfg);
};

struct RoundRecord {
    int round = 0;
    struct ClientEntry {
        std::int32_t client = 0;
        model::LossBreakdown loss;
        bool diverged = false;
        bool participated = true;
        double duration_ms = 0.0;
    };
    std::vector<ClientEntry> clients;
    std::string digest_before;  // global params entering the round
    std::string digest_after;   // after aggregation
};

struct ServerState {
    model::GfmParams global;
    int round = 0;  // rounds completed
    std::vector<anchor::DomainPrototype> prototypes;
    std::vector<RoundRecord> log;
};

// Deep-copies the server's backbone into every client; prompts are untouched.
void broadcast(const ServerState& server, std::vector<ClientState>& clients);

// Sample-count-weighted coordinatewise mean over the listed clients, summed
// in client-id order and clamped per coordinate to the participating min/max
// (the true mean always lies inside; the clamp pins the identical-client
// fixed point exactly).
model::GfmParams aggregate(const std::vector<const ClientState*>& clients);
model::GfmParams aggregate(const std::vector<ClientState>& clients);

struct PretrainOutcome {
    ServerState server;
    std::vector<RoundRecord> history;
};

// The round loop: (prototype extraction + codebook seeding when enabled),
// then rounds of broadcast, local updates, aggregate. Clients that hit a NaN
// abort are dropped from that round's average and recorded.
PretrainOutcome run_pretraining(const FedConfig& cfg, std::vector<ClientState>& clients,
                                const model::GfmParams& global_init);

// Checkpoint directory: server manifest, global parameter blob, per-client
// blobs (params, prompts, optimizer moments), prototype registry, and the
// round log as json-lines. Client graphs are referenced by digest, not
// stored; resume re-attaches the same data.
void save_checkpoint(const std::filesystem::path& dir, const ServerState& server,
                     const std::vector<ClientState>& clients, const FedConfig& cfg);

struct Checkpoint {
    ServerState server;
    FedConfig config;
    std::vector<ClientState> clients;            // data left empty
    std::vector<std::uint64_t> client_data_digests;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Re-attach data shards (validated against the stored digests) so the run can
// continue from the checkpointed round.
void attach_data(Checkpoint& ckpt, const std::vector<graph::GraphCollection>& shards);

// Continue a loaded run to cfg.rounds; equals the uninterrupted run bitwise.
PretrainOutcome resume_pretraining(Checkpoint& ckpt);

std::uint64_t collection_digest(const graph::GraphCollection& c);

}  // namespace fedgfm::fed
