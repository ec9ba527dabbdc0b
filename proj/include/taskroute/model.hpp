#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "taskroute/autograd.hpp"
#include "taskroute/checkpoint.hpp"
#include "taskroute/routing.hpp"

namespace taskroute {

struct PoolConfig {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

/// conv -> [batch-norm] -> task routing -> relu -> [max-pool]
struct BlockConfig {
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool batchnorm = true;
  std::optional<PoolConfig> pool = PoolConfig{};
};

struct ModelConfig {
  std::array<std::size_t, 3> input_shape{1, 28, 28};  // C, H, W
  std::vector<BlockConfig> blocks;
  std::size_t embedding_dim = 64;
  int task_count = 1;
  double sigma = 1.0;
  std::uint64_t seed = 0;
  RoutingOptions routing;
  /// false for extracted subnets: no routing layers, no masks.
  bool routed = true;
  /// For an extracted subnet, the task of the parent model it serves.
  std::optional<int> source_task;

  /// Four blocks of 32, 64, 128, 128 channels.
  static ModelConfig desk_default(std::array<std::size_t, 3> input_shape = {1, 28, 28});
};

struct BlockGeometry {
  std::array<std::size_t, 3> input;  // C, H, W entering the block
  std::array<std::size_t, 3> conv;   // after conv (and batch-norm, routing, relu)
  std::array<std::size_t, 3> output; // after optional pooling
};

/// Walks the spatial algebra; throws ConfigError naming the offending block.
std::vector<BlockGeometry> infer_geometry(const ModelConfig& config);

/// Flattened trunk width feeding every head.
std::size_t trunk_output_features(const ModelConfig& config);

/// Closed-form count of trainable scalars (excludes batch-norm running stats).
std::size_t count_parameters(const ModelConfig& config);

void validate_model_config(const ModelConfig& config);

std::string block_layer_id(std::size_t block);

/// Shared trunk of routed conv blocks plus one head per task
/// (linear -> relu -> linear to 2 logits).
template <typename T>
class Model {
 public:
  /// Validates the config, builds the routing map and initialises parameters
  /// (Kaiming-uniform weights, zero biases, unit/zero batch-norm affine).
  explicit Model(ModelConfig config);

  /// Same architecture with an externally supplied routing map; the map's
  /// layers must match the trunk.
  Model(ModelConfig config, RoutingMap routing);

  Model(const Model&) = default;
  Model& operator=(const Model&) = default;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const noexcept { return config_; }
  const RoutingMap* routing() const noexcept { return routing_ ? routing_.get() : nullptr; }
  int task_count() const noexcept { return config_.task_count; }

  bool training() const noexcept { return training_; }
  void set_training(bool training) noexcept { training_ = training; }

  std::vector<Parameter<T>>& parameters() noexcept { return params_; }
  const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }
  Parameter<T>& parameter(const std::string& name);
  const Parameter<T>& parameter(const std::string& name) const;

  std::vector<Parameter<T>*> trunk_parameters();
  std::vector<Parameter<T>*> head_parameters(int task);
  /// Trunk plus the head of `task`: everything a batch of that task updates.
  std::vector<Parameter<T>*> active_parameters(int task);

  std::size_t parameter_count() const;

  /// Routed forward for the context's active task; returns logits [B,2].
  /// When `routed_outputs` is given, the output of every routing layer is
  /// appended to it.
  Var<T> forward(Tape<T>& tape, const Tensor<T>& batch, const TaskContext& ctx,
                 std::vector<Var<T>>* routed_outputs = nullptr);

  /// Forward on a private tape, no gradients.
  Tensor<T> predict(const Tensor<T>& batch, const TaskContext& ctx);

  /// Parameters and batch-norm running statistics, in a fixed order.
  std::vector<CheckpointRecord> state_records() const;
  /// Loads every record produced by state_records(); names and shapes must match.
  void load_state(const std::vector<CheckpointRecord>& records);

  /// Hash of all parameter values, running statistics and masks.
  std::uint64_t fingerprint() const;

  template <typename U>
  Model<U> cast() const;

  struct BlockParams {
    std::size_t conv_weight, conv_bias;
    std::optional<std::size_t> bn_gamma, bn_beta;
  };
  struct HeadParams {
    std::size_t fc1_weight, fc1_bias, fc2_weight, fc2_bias;
  };

 private:
  template <typename U>
  friend class Model;
  template <typename U>
  friend Model<U> extract_subnet(const Model<U>& model, int task);

  struct Uninitialized {};
  Model(ModelConfig config, std::shared_ptr<const RoutingMap> routing, Uninitialized);
  void allocate();
  void initialize();

  ModelConfig config_;
  std::shared_ptr<const RoutingMap> routing_;
  std::vector<BlockGeometry> geometry_;
  std::vector<Parameter<T>> params_;
  std::vector<BlockParams> blocks_;
  std::vector<HeadParams> heads_;
  std::vector<Tensor<T>> running_mean_;
  std::vector<Tensor<T>> running_var_;
  bool training_ = true;
};

template <typename T>
Model<T> build_model(const ModelConfig& config) {
  return Model<T>(config);
}

/// The specialised subnet of `task` as a standalone unrouted model: conv
/// filters, biases and batch-norm channels whose bit is 0 are dropped along
/// with the matching input channels of the next layer; only the task's head
/// is kept. Throws ExtractionError in strict mode when the task has an empty
/// mask at some layer.
template <typename T>
Model<T> extract_subnet(const Model<T>& model, int task);

/// Routing-layer geometry of a config, for sharing_statistics().
std::vector<ConvGeometry> routed_conv_geometry(const ModelConfig& config);

}  // namespace taskroute
