#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "headlab/clustering.hpp"
#include "headlab/heads.hpp"
#include "headlab/llc.hpp"
#include "headlab/model.hpp"
#include "headlab/store.hpp"

namespace headlab {

struct ExperimentConfig {
  nlohmann::json raw;
  std::string hash;
  ModelConfig model;
  TrainConfig training;
  SgldConfig sgld;
  std::map<std::string, nlohmann::json> data_specs;
  std::vector<std::uint64_t> seeds;  // one training run per seed
  nlohmann::json measure;            // per-phase settings
  nlohmann::json clustering;

  std::string train_source = "train";
};

// Parses and validates; errors name the offending field path.
ExperimentConfig load_experiment_config(const std::filesystem::path& file);
ExperimentConfig experiment_from_json(const nlohmann::json& j);

DataSource make_source(const ExperimentConfig& cfg, const std::string& name,
                       std::uint64_t seed_override = 0);
// Standalone spec -> source (the same schema as config "data" entries).
DataSource data_source_from_spec(const nlohmann::json& spec, std::size_t vocab,
                                 std::size_t default_k, std::uint64_t seed_override = 0);

// Layout helpers under one output root.
std::filesystem::path seed_dir(const std::filesystem::path& out, std::uint64_t seed);
std::filesystem::path train_dir(const std::filesystem::path& out, std::uint64_t seed);
std::vector<std::pair<std::uint64_t, std::filesystem::path>> list_checkpoints(
    const std::filesystem::path& training_dir);

struct GridOptions {
  int workers = 1;
  long max_new_cells = -1;  // stop after computing this many fresh cells (testing)
  std::uint64_t seed_override = 0;
};

struct PhaseResult {
  int attempted = 0;
  int computed = 0;
  int skipped = 0;
  int failed = 0;
  std::filesystem::path csv;

  double failure_rate() const {
    return attempted ? static_cast<double>(failed) / attempted : 0.0;
  }
};

// Phases: llc | hessian | ablate | classify | compose.
PhaseResult run_measure(const ExperimentConfig& cfg, const std::filesystem::path& out,
                        const std::string& phase, const GridOptions& opts = {});

int run_train(const ExperimentConfig& cfg, const std::filesystem::path& out,
              std::uint64_t seed_override = 0);

// Clustering over exported trajectory CSVs; writes labels CSV, metrics JSON
// and (for HAC) a dendrogram JSON.
int run_cluster(const ExperimentConfig& cfg, const std::filesystem::path& out);

// Summary document joining head reports, cluster labels, final rLLCs,
// multigram counts and score summaries across seeds.
int run_report(const ExperimentConfig& cfg, const std::filesystem::path& out);

// Trajectory CSV helpers (shared schema across metric families).
struct TrajectoryRow {
  std::uint64_t step = 0;
  std::string target;
  std::string source;
  std::string metric;
  double value = 0.0;
  double std_error = 0.0;
  double init_loss = 0.0;
  int chains_ok = 0;
};

void write_trajectory_csv(const std::filesystem::path& file,
                          const std::vector<TrajectoryRow>& rows,
                          const std::string& config_hash);
std::vector<TrajectoryRow> read_trajectory_csv(const std::filesystem::path& file);

// Rows -> per-target matrix over steps for one (metric, source); sources
// concatenate in the given order.
TrajectoryMatrix matrix_from_rows(const std::vector<TrajectoryRow>& rows,
                                  const std::string& metric,
                                  const std::vector<std::string>& sources);

// Target-name expansion: "model", "heads", explicit region names or
// patterns; returns (target name, region patterns) pairs.
std::vector<std::pair<std::string, std::vector<std::string>>> expand_targets(
    const ModelConfig& model, const std::vector<std::string>& specs);

std::vector<HeadKey> all_heads(const ModelConfig& model);

// Classifier templates/thresholds derived from the training source's pattern
// tables plus measure.classify overrides.
ClassifierConfig classifier_config_for(const ExperimentConfig& cfg);

// Minimal SVG polyline chart for smoke-viewing trajectory CSVs.
void write_svg_chart(const std::filesystem::path& file,
                     const std::vector<TrajectoryRow>& rows, const std::string& metric);

}  // namespace headlab
