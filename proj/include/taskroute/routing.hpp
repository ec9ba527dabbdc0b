#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "taskroute/autograd.hpp"
#include "taskroute/rng.hpp"

namespace taskroute {

/// Fixed-length bit vector; bit c corresponds to channel c.
class BitMask {
 public:
  BitMask() = default;
  explicit BitMask(std::size_t size, bool fill = false);

  std::size_t size() const noexcept { return size_; }
  bool test(std::size_t i) const { return (words_[i / 64] >> (i % 64)) & 1U; }
  void set(std::size_t i, bool on = true);
  std::size_t count() const;
  std::size_t count_and(const BitMask& other) const;
  std::size_t count_or(const BitMask& other) const;
  bool all() const { return count() == size_; }
  bool none() const { return count() == 0; }
  std::vector<std::uint8_t> to_bytes() const;
  std::size_t storage_bits() const { return size_; }

  /// Channel order, four channels per hex digit, most significant bit first:
  /// channel 0 is the 8-bit of the first digit.
  std::string to_hex() const;
  static BitMask from_hex(std::string_view hex, std::size_t size);

  friend bool operator==(const BitMask&, const BitMask&) = default;

 private:
  std::size_t size_ = 0;
  std::vector<std::uint64_t> words_;
};

enum class MaskMode { partition, bernoulli };

std::string to_string(MaskMode mode);
MaskMode parse_mask_mode(std::string_view text);

struct LayerSpec {
  std::string layer_id;
  std::size_t channels = 0;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct TaskMask {
  std::string layer_id;
  int task_id = 0;
  BitMask bits;
};

struct RoutingOptions {
  MaskMode mode = MaskMode::partition;
  /// Reject configurations in which some task gets an empty mask.
  bool strict = false;
};

/// Immutable per-layer, per-task channel masks.
class RoutingMap {
 public:
  double sigma() const noexcept { return sigma_; }
  int task_count() const noexcept { return task_count_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const RoutingOptions& options() const noexcept { return options_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }

  std::size_t layer_index(std::string_view layer_id) const;
  const TaskMask& mask(std::size_t layer, int task) const;
  const TaskMask& mask(std::string_view layer_id, int task) const { return mask(layer_index(layer_id), task); }
  const BitMask& shared(std::size_t layer) const { return shared_.at(layer); }

  /// Non-fatal construction findings, e.g. tasks left with an empty mask.
  const std::vector<std::string>& warnings() const noexcept { return warnings_; }

  /// Bits needed to store every mask.
  std::size_t storage_bits() const;

  /// FNV-1a over all mask bits and header fields.
  std::uint64_t fingerprint() const;

  friend bool operator==(const RoutingMap& a, const RoutingMap& b);

 private:
  friend RoutingMap build_routing_map(std::span<const LayerSpec>, int, double, std::uint64_t, RoutingOptions);
  friend RoutingMap parse_routing_map(std::string_view);
  void finalize();

  double sigma_ = 1.0;
  int task_count_ = 1;
  std::uint64_t seed_ = 0;
  RoutingOptions options_;
  std::vector<LayerSpec> layers_;
  std::vector<std::vector<TaskMask>> masks_;  // [layer][task]
  std::vector<BitMask> shared_;
  std::vector<std::string> warnings_;
};

/// round(sigma * channels), ties to even.
std::size_t shared_channel_count(double sigma, std::size_t channels);

/// Per layer: a seeded permutation of the channels; the first
/// round(sigma*C) entries are shared by every task, the rest are dealt
/// round-robin to tasks 0..T-1 as exclusive channels.
RoutingMap build_routing_map(std::span<const LayerSpec> layers, int task_count, double sigma, std::uint64_t seed,
                             RoutingOptions options = {});

std::string serialize_routing_map(const RoutingMap& map);
RoutingMap parse_routing_map(std::string_view text);
void save_routing_map(const std::filesystem::path& path, const RoutingMap& map);
RoutingMap load_routing_map(const std::filesystem::path& path);

/// m ⊙ X for activations [B,C,H,W]; channel c is kept iff bit c is set.
template <typename T>
Tensor<T> apply_task_routing(const Tensor<T>& activations, const TaskMask& mask);

template <typename T>
Var<T> apply_task_routing(Var<T> activations, const TaskMask& mask);

enum class TaskSampling { uniform_iid, round_robin };

std::string to_string(TaskSampling mode);
TaskSampling parse_task_sampling(std::string_view text);

/// The active task plus the seeded task-sampling state. Owned by one
/// training loop; models read the active task from the context they are given.
class TaskContext {
 public:
  explicit TaskContext(int task_count, std::uint64_t sampler_seed = 0,
                       TaskSampling sampling = TaskSampling::uniform_iid);

  int task_count() const noexcept { return task_count_; }
  void set_active_task(int task);
  std::optional<int> active_task() const noexcept { return active_; }
  /// The active task; throws UsageError when none has been set.
  int require_active_task() const;

  TaskSampling sampling() const noexcept { return sampling_; }
  Rng& sampler() noexcept { return sampler_; }
  std::vector<int>& cycle() noexcept { return cycle_; }
  std::size_t& cycle_pos() noexcept { return cycle_pos_; }

 private:
  int task_count_;
  std::optional<int> active_;
  TaskSampling sampling_;
  Rng sampler_;
  std::vector<int> cycle_;
  std::size_t cycle_pos_ = 0;
};

/// Kernel geometry of one routed conv layer, for parameter accounting.
struct ConvGeometry {
  std::size_t in_channels = 0;  // of the first routed layer; later layers use the previous layer
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  bool batchnorm = false;
};

struct LayerSharing {
  std::string layer_id;
  std::size_t channels = 0;
  std::size_t shared = 0;
  std::vector<std::size_t> active;  // per task
};

struct SharingReport {
  double sigma = 0.0;
  int task_count = 0;
  std::vector<LayerSharing> layers;
  /// T x T Jaccard index of masks, averaged over layers (row-major).
  std::vector<double> jaccard;
  double mean_pairwise_jaccard = 1.0;
  /// Mean over layers of active/C, per task.
  std::vector<double> active_fraction;
  /// Conv (+bias, +batch-norm) parameters of each task's induced subnet;
  /// present only when geometry was supplied.
  std::optional<std::vector<std::size_t>> active_params;
  std::optional<std::size_t> full_params;
  std::size_t mask_storage_bits = 0;

  double pair_jaccard(int a, int b) const {
    return jaccard[static_cast<std::size_t>(a) * static_cast<std::size_t>(task_count) + static_cast<std::size_t>(b)];
  }
};

SharingReport sharing_statistics(const RoutingMap& map, std::span<const ConvGeometry> geometry = {});

std::string format_sharing_text(const SharingReport& report);
std::string format_sharing_layers_csv(const SharingReport& report);
std::string format_sharing_pairs_csv(const SharingReport& report);

}  // namespace taskroute
