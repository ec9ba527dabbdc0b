#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskroute/config.hpp"

namespace taskroute {

/// Loads (or generates) the data described by `config`, splits it and
/// normalises by the train mean.
DatasetSplits load_dataset(const DataConfig& config);

/// Fills task_count and input_shape of the model config from the data.
ModelConfig resolve_model_config(const ModelConfig& model, const TaskDataset& data);

struct ExperimentResult {
  Model<float> model;
  MetricsReport metrics;
};

ExperimentResult run_experiment(const ExperimentConfig& config, const DatasetSplits& data);
ExperimentResult run_experiment(const ExperimentConfig& config);

struct SweepRow {
  double sigma = 0.0;
  std::uint64_t seed = 0;
  double macro_accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  std::vector<double> task_accuracy;
};

struct SweepSummary {
  double sigma = 0.0;
  std::size_t runs = 0;
  double mean_accuracy = 0.0, std_accuracy = 0.0;
  double mean_precision = 0.0, std_precision = 0.0;
  double mean_recall = 0.0, std_recall = 0.0;
};

struct SweepReport {
  std::vector<std::string> task_names;
  std::vector<SweepRow> rows;
  std::vector<SweepSummary> summary;  // one per sigma, in input order
};

using SweepCallback = std::function<void(const ExperimentConfig&, const ExperimentResult&)>;

/// Trains and evaluates one model per (sigma, seed); the seed replaces both
/// the model seed and the training seed, the data stays fixed.
SweepReport run_sigma_sweep(const ExperimentConfig& base, std::span<const double> sigmas,
                            std::span<const std::uint64_t> seeds, const SweepCallback& on_run = {});

SweepRow sweep_row(double sigma, std::uint64_t seed, const MetricsReport& metrics);
std::vector<SweepSummary> summarize_sweep(std::span<const SweepRow> rows, std::span<const double> sigmas);

/// Columns: sigma, seed, macro_accuracy, macro_precision, macro_recall,
/// then <task>_accuracy per task.
std::string sweep_csv(const SweepReport& report);
std::string sweep_summary_csv(const SweepReport& report);

nlohmann::json metrics_to_json(const MetricsReport& report, const nlohmann::json& config_echo);
MetricsReport metrics_from_json(const nlohmann::json& doc);

/// Checkpoint of a float model; metadata holds the experiment and model config.
Checkpoint make_checkpoint(const Model<float>& model, const ExperimentConfig& experiment);

struct LoadedModel {
  ExperimentConfig experiment;
  Model<float> model;
};

/// Rebuilds the model from checkpoint metadata. Routed models need the
/// routing map; a map whose layers or task count differ is a LoadError.
LoadedModel load_model(const Checkpoint& checkpoint, const RoutingMap* routing);

}  // namespace taskroute
