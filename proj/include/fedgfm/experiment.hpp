#pragma once

#include "fedgfm/downstream.hpp"
#include "fedgfm/federation.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fedgfm::exp {

enum class PartitionMethod { none, louvain, random };

struct DatasetConfig {
    std::string name;
    std::optional<std::filesystem::path> container;  // a graph dir, or a collection dir
    std::optional<graph::SyntheticDomainSpec> synthetic;
    PartitionMethod partition = PartitionMethod::louvain;
    std::int32_t clients = 3;
    graph::SplitRatios split{0.8, 0.1, 0.1};
};

struct FinetuneConfig {
    std::vector<double> lr_grid = {1e-5, 1e-4, 1e-3, 1e-2, 1e-1};
    int patience = 20;
    int max_epochs = 1000;
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    int shots = 0;  // > 0 enables few-shot subsampling
};

struct ExperimentConfig {
    std::vector<DatasetConfig> datasets;
    model::ModelConfig model;
    fed::FedConfig federation;  // seed filled from the experiment seed
    Eigen::Index adadpp_top_k = 0;
    FinetuneConfig finetune;
    std::uint64_t seed = 0;

    void validate() const;
};

// Strict parser: unknown keys anywhere are a ConfigError.
ExperimentConfig load_config(const std::filesystem::path& file);
ExperimentConfig parse_config(const std::string& json_text);
std::string config_snapshot(const ExperimentConfig& cfg);  // resolved config as json

// One dataset's prepared shards plus bookkeeping for reports.
struct PreparedDataset {
    DatasetConfig config;
    std::vector<graph::GraphCollection> shards;      // one per client
    std::vector<std::int32_t> client_ids;            // global ids
    std::int64_t dropped_cross_edges = 0;
};

struct PreparedData {
    std::vector<PreparedDataset> datasets;
    std::vector<graph::GraphCollection> client_shards;  // indexed by global client id
};

PreparedData prepare_data(const ExperimentConfig& cfg);

struct MetricRecord {
    std::string dataset;
    std::int32_t client = 0;
    std::string task;
    std::string metric_name;
    double value = 0.0;
    std::uint64_t seed = 0;
    bool ancdai = false;
    bool adadpp = false;
};

void write_metrics(const std::filesystem::path& file, const std::vector<MetricRecord>& records);
std::vector<MetricRecord> read_metrics(const std::filesystem::path& file);
std::string summary_csv(const std::vector<MetricRecord>& records);

// Subcommand bodies; each writes artifacts under `out` and a run report.
void cmd_partition(const ExperimentConfig& cfg, const std::filesystem::path& out);
void cmd_pretrain(const ExperimentConfig& cfg, const std::filesystem::path& out);
std::vector<MetricRecord> cmd_finetune(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                       const std::filesystem::path& out);
std::vector<MetricRecord> cmd_evaluate(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                       const std::filesystem::path& heads,
                                       const std::filesystem::path& out);
void cmd_diagnose(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                  const std::filesystem::path& out, std::int64_t degree_cap,
                  const std::optional<std::filesystem::path>& reference);
void cmd_sweep(const ExperimentConfig& cfg, const std::string& axis, const std::filesystem::path& out);

// Full argv-level entry point (used by the binary and by tests); returns the
// process exit code: 0 ok, 1 contract/other, 2 config, 3 data, 4 numeric.
int run_cli(const std::vector<std::string>& args);

}  // namespace fedgfm::exp
