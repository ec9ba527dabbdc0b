#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "taskroute/data.hpp"
#include "taskroute/model.hpp"
#include "taskroute/training.hpp"

namespace taskroute {

enum class DataKind { synthetic, idx, attributes };

std::string to_string(DataKind kind);

struct DataConfig {
  DataKind kind = DataKind::synthetic;
  SyntheticSpec synthetic;
  double test_fraction = 0.25;
  std::uint64_t split_seed = 0;
  bool normalize = true;

  // kind == idx: separate train/test files, one-vs-rest tasks over classes.
  std::string train_images, train_labels, test_images, test_labels;
  int num_classes = 10;
  std::size_t train_limit = 0;  // 0 keeps everything
  std::size_t test_limit = 0;

  // kind == attributes: CSV table; images from an IDX file or seeded noise.
  std::string table;
  std::string images;
  std::array<std::size_t, 3> image_shape{1, 16, 16};
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
};

/// Parses the documented JSON schema (docs/config-format.md). Unknown keys and
/// out-of-range values raise ConfigError naming the field path.
ExperimentConfig parse_experiment_config(const nlohmann::json& doc);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

nlohmann::json to_json(const ModelConfig& config);
nlohmann::json to_json(const TrainConfig& config);
nlohmann::json to_json(const DataConfig& config);
nlohmann::json to_json(const ExperimentConfig& config);

ModelConfig parse_model_config(const nlohmann::json& doc, const std::string& path = "model");

}  // namespace taskroute
