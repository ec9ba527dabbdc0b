#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "taskroute/rng.hpp"
#include "taskroute/tensor.hpp"

namespace taskroute {

/// N x T binary matrix, row-major.
class LabelMatrix {
 public:
  LabelMatrix() = default;
  LabelMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), bits_(rows * cols, 0) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c]; }
  void set(std::size_t r, std::size_t c, std::uint8_t v) { bits_[r * cols_ + c] = v; }
  std::size_t positives(std::size_t c) const;
  const std::vector<std::uint8_t>& raw() const noexcept { return bits_; }

  friend bool operator==(const LabelMatrix&, const LabelMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<float> pixels;  // scaled to [0,1]
};

struct IdxData {
  IdxImages images;
  std::vector<int> labels;
};

/// Reads an IDX3 unsigned-byte image file (magic 0x00000803).
IdxImages read_idx_images(const std::filesystem::path& path);
/// Reads an IDX1 unsigned-byte label file (magic 0x00000801).
std::vector<int> read_idx_labels(const std::filesystem::path& path);
IdxImages parse_idx_images(std::span<const std::uint8_t> bytes);
std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes);
/// Images and labels together; counts must agree.
IdxData load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Pixels in [0,1] are quantised to bytes. Images must be single-channel.
void write_idx_images(const std::filesystem::path& path, const Tensor<float>& images);
void write_idx_labels(const std::filesystem::path& path, std::span<const int> labels);

/// One-vs-rest: column k is 1 where label == k.
LabelMatrix make_binary_tasks(std::span<const int> class_labels, int num_classes);

struct AttributeTable {
  LabelMatrix labels;
  std::vector<std::string> names;
  std::vector<double> positive_rate;
};

/// CSV with a header row of task names and N rows of 0/1 cells.
AttributeTable parse_attribute_table(std::string_view text);
AttributeTable load_attribute_table(const std::filesystem::path& path);
void write_attribute_table(const std::filesystem::path& path, const LabelMatrix& labels,
                           std::span<const std::string> names);

enum class Split { train, test };

struct TaskDataset {
  Tensor<float> images;  // [N,C,H,W]
  LabelMatrix labels;    // N x T
  std::vector<std::string> task_names;
  Split split = Split::train;

  std::size_t size() const { return labels.rows(); }
  int task_count() const { return static_cast<int>(labels.cols()); }
  std::array<std::size_t, 3> image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
};

/// Tasks lacking a positive or a negative example, one message each.
std::vector<std::string> dataset_warnings(const TaskDataset& data);

enum class SyntheticStructure { independent, correlated, conflicting };

std::string to_string(SyntheticStructure s);
SyntheticStructure parse_synthetic_structure(std::string_view text);

struct SyntheticSpec {
  int task_count = 8;
  std::array<std::size_t, 3> image_shape{1, 16, 16};
  std::size_t samples = 2000;
  SyntheticStructure structure = SyntheticStructure::independent;
  double rho = 0.0;  // label correlation of task pairs (correlated mode)
  std::uint64_t seed = 0;
  double noise = 0.08;     // std-dev of per-pixel background noise
  double amplitude = 0.35; // brightness of a planted patch
};

/// Planted-patch images on a grid of 4x4 cells with balanced labels
/// (within one sample per task). Layout of the cells:
///   independent - task t is positive iff a bright patch sits in cell t;
///   correlated  - as independent, and the labels of tasks 2k and 2k+1
///                 agree with probability (1+rho)/2;
///   conflicting - tasks 2k and 2k+1 share cell k whose signed brightness v
///                 enters their labels with opposite sign, each task adds a
///                 private signed cell u: y_2k = [v + u_2k > 0],
///                 y_2k+1 = [-v + u_2k+1 > 0].
TaskDataset generate_synthetic(const SyntheticSpec& spec);

/// Number of 4x4 planting cells available for an image shape.
std::size_t synthetic_cell_count(std::array<std::size_t, 3> image_shape);

/// Pixel rectangle (row, col, size) of a planting cell.
struct PatchRect {
  std::size_t row, col, size;
};
PatchRect synthetic_cell(std::array<std::size_t, 3> image_shape, std::size_t cell);
/// Cell that carries task t's own feature.
std::size_t synthetic_task_cell(const SyntheticSpec& spec, int task);
/// Cell shared by a conflicting pair (tasks 2k, 2k+1 -> k).
std::size_t synthetic_shared_cell(const SyntheticSpec& spec, int task);

/// Noise images of the given shape paired with an existing label matrix.
TaskDataset noise_dataset(const LabelMatrix& labels, std::vector<std::string> names,
                          std::array<std::size_t, 3> image_shape, std::uint64_t seed);

struct DatasetSplits {
  TaskDataset train;
  TaskDataset test;
  std::vector<std::size_t> train_indices;  // into the source dataset
  std::vector<std::size_t> test_indices;
  std::vector<double> channel_mean;  // subtracted by normalize_by_mean
};

/// Seeded disjoint split; the union covers every sample.
DatasetSplits split_dataset(const TaskDataset& all, double test_fraction, std::uint64_t seed);

/// Subtracts the train split's per-channel mean from both splits.
void normalize_by_mean(DatasetSplits& splits);

TaskDataset subset(const TaskDataset& data, std::span<const std::size_t> indices, Split split);

/// Copies the selected images into a batch [n,C,H,W]; with a non-null rng
/// each image is mirrored horizontally with probability 1/2.
Tensor<float> gather_images(const TaskDataset& data, std::span<const std::size_t> indices, Rng* flip_rng = nullptr);

template <typename T>
std::vector<T> gather_labels(const TaskDataset& data, std::span<const std::size_t> indices, int task);

}  // namespace taskroute
