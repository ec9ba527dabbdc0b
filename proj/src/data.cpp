#include "taskroute/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

namespace taskroute {

std::size_t LabelMatrix::positives(std::size_t c) const {
  std::size_t n = 0;
  for (std::size_t r = 0; r < rows_; ++r) n += bits_[r * cols_ + c];
  return n;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

void put_be32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

void check_magic(std::span<const std::uint8_t> bytes, std::uint32_t expected, std::size_t header, const char* what) {
  if (bytes.size() < 4) {
    throw ParseError(std::string(what) + ": file too short for magic number (" + std::to_string(bytes.size()) +
                         " bytes)",
                     0);
  }
  const std::uint32_t magic = be32(bytes, 0);
  if (magic != expected) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%s: bad magic 0x%08x, expected 0x%08x", what, magic, expected);
    throw ParseError(buf, 0);
  }
  if (bytes.size() < header) {
    throw ParseError(std::string(what) + ": truncated header, expected " + std::to_string(header) + " bytes, got " +
                         std::to_string(bytes.size()),
                     bytes.size());
  }
}

void check_payload(std::span<const std::uint8_t> bytes, std::size_t header, std::size_t expected, const char* what) {
  const std::size_t actual = bytes.size() - header;
  if (actual < expected) {
    throw ParseError(std::string(what) + ": truncated payload, expected " + std::to_string(expected) +
                         " bytes, got " + std::to_string(actual),
                     bytes.size());
  }
  if (actual > expected) {
    throw ParseError(std::string(what) + ": " + std::to_string(actual - expected) + " trailing bytes after payload",
                     header + expected);
  }
}

}  // namespace

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes) {
  check_magic(bytes, 0x00000803, 16, "idx images");
  IdxImages out;
  out.count = be32(bytes, 4);
  out.rows = be32(bytes, 8);
  out.cols = be32(bytes, 12);
  const std::size_t n = out.count * out.rows * out.cols;
  check_payload(bytes, 16, n, "idx images");
  out.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.pixels[i] = static_cast<float>(bytes[16 + i]) / 255.0F;
  return out;
}

std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  check_magic(bytes, 0x00000801, 8, "idx labels");
  const std::size_t n = be32(bytes, 4);
  check_payload(bytes, 8, n, "idx labels");
  return std::vector<int>(bytes.begin() + 8, bytes.end());
}

IdxImages read_idx_images(const std::filesystem::path& path) { return parse_idx_images(read_file(path)); }

std::vector<int> read_idx_labels(const std::filesystem::path& path) { return parse_idx_labels(read_file(path)); }

IdxData load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  IdxData out;
  out.images = read_idx_images(images_path);
  out.labels = read_idx_labels(labels_path);
  if (out.images.count != out.labels.size()) {
    throw ParseError("idx count mismatch: " + images_path.string() + " has " + std::to_string(out.images.count) +
                         " images, " + labels_path.string() + " has " + std::to_string(out.labels.size()) + " labels",
                     4);
  }
  return out;
}

void write_idx_images(const std::filesystem::path& path, const Tensor<float>& images) {
  if (images.rank() != 4 || images.dim(1) != 1) {
    throw ConfigError("idx export needs single-channel images [N,1,H,W], got " + shape_str(images.shape()));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  put_be32(out, 0x00000803);
  put_be32(out, static_cast<std::uint32_t>(images.dim(0)));
  put_be32(out, static_cast<std::uint32_t>(images.dim(2)));
  put_be32(out, static_cast<std::uint32_t>(images.dim(3)));
  for (const float v : images.data()) {
    const float clamped = std::clamp(v, 0.0F, 1.0F);
    out.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(clamped * 255.0F))));
  }
}

void write_idx_labels(const std::filesystem::path& path, std::span<const int> labels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  put_be32(out, 0x00000801);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (const int l : labels) {
    if (l < 0 || l > 255) throw DataError("idx label " + std::to_string(l) + " does not fit in a byte");
    out.put(static_cast<char>(static_cast<std::uint8_t>(l)));
  }
}

LabelMatrix make_binary_tasks(std::span<const int> class_labels, int num_classes) {
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  LabelMatrix out(class_labels.size(), static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < class_labels.size(); ++i) {
    const int l = class_labels[i];
    if (l < 0 || l >= num_classes) {
      throw DataError("label " + std::to_string(l) + " at index " + std::to_string(i) + " outside [0," +
                      std::to_string(num_classes) + ")");
    }
    out.set(i, static_cast<std::size_t>(l), 1);
  }
  return out;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::pair<std::string_view, std::size_t>> split_csv(std::string_view line, std::size_t offset) {
  std::vector<std::pair<std::string_view, std::size_t>> cells;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      cells.emplace_back(trim(line.substr(start, i - start)), offset + start);
      start = i + 1;
    }
  }
  return cells;
}

}  // namespace

AttributeTable parse_attribute_table(std::string_view text) {
  std::vector<std::pair<std::string_view, std::size_t>> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    if (!trim(line).empty()) lines.emplace_back(line, pos);
    pos = end + 1;
  }
  if (lines.empty()) throw ParseError("attribute table is empty (no header row)", 0);
  AttributeTable out;
  for (const auto& [name, at] : split_csv(lines[0].first, lines[0].second)) {
    if (name.empty()) throw ParseError("attribute table header has an empty column name", at);
    out.names.emplace_back(name);
  }
  const std::size_t T = out.names.size();
  out.labels = LabelMatrix(lines.size() - 1, T);
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto cells = split_csv(lines[r].first, lines[r].second);
    if (cells.size() != T) {
      throw ParseError("attribute table row " + std::to_string(r) + " has " + std::to_string(cells.size()) +
                           " cells, header has " + std::to_string(T),
                       lines[r].second);
    }
    for (std::size_t c = 0; c < T; ++c) {
      const auto& [cell, at] = cells[c];
      if (cell != "0" && cell != "1") {
        throw ParseError("attribute table row " + std::to_string(r) + ", column " + std::to_string(c) + " ('" +
                             out.names[c] + "'): non-binary cell '" + std::string(cell) + "'",
                         at);
      }
      out.labels.set(r - 1, c, cell == "1" ? 1 : 0);
    }
  }
  for (std::size_t c = 0; c < T; ++c) {
    out.positive_rate.push_back(out.labels.rows() == 0
                                    ? 0.0
                                    : static_cast<double>(out.labels.positives(c)) / static_cast<double>(out.labels.rows()));
  }
  return out;
}

AttributeTable load_attribute_table(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_attribute_table(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void write_attribute_table(const std::filesystem::path& path, const LabelMatrix& labels,
                           std::span<const std::string> names) {
  if (names.size() != labels.cols()) throw ConfigError("attribute table: name count does not match columns");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  for (std::size_t c = 0; c < names.size(); ++c) out << (c ? "," : "") << names[c];
  out << '\n';
  for (std::size_t r = 0; r < labels.rows(); ++r) {
    for (std::size_t c = 0; c < labels.cols(); ++c) out << (c ? "," : "") << int{labels.at(r, c)};
    out << '\n';
  }
}

std::vector<std::string> dataset_warnings(const TaskDataset& data) {
  std::vector<std::string> out;
  for (std::size_t t = 0; t < data.labels.cols(); ++t) {
    const std::size_t pos = data.labels.positives(t);
    const std::string name = t < data.task_names.size() ? data.task_names[t] : std::to_string(t);
    if (pos == 0) out.push_back("task '" + name + "' has no positive examples");
    if (pos == data.size()) out.push_back("task '" + name + "' has no negative examples");
  }
  return out;
}

std::string to_string(SyntheticStructure s) {
  switch (s) {
    case SyntheticStructure::independent: return "independent";
    case SyntheticStructure::correlated: return "correlated";
    case SyntheticStructure::conflicting: return "conflicting";
  }
  return "independent";
}

SyntheticStructure parse_synthetic_structure(std::string_view text) {
  if (text == "independent") return SyntheticStructure::independent;
  if (text == "correlated") return SyntheticStructure::correlated;
  if (text == "conflicting") return SyntheticStructure::conflicting;
  throw ConfigError("unknown synthetic structure '" + std::string(text) +
                    "' (expected independent, correlated or conflicting)");
}

std::size_t synthetic_cell_count(std::array<std::size_t, 3> image_shape) {
  return (image_shape[1] / 4) * (image_shape[2] / 4);
}

PatchRect synthetic_cell(std::array<std::size_t, 3> image_shape, std::size_t cell) {
  const std::size_t per_row = image_shape[2] / 4;
  return PatchRect{(cell / per_row) * 4, (cell % per_row) * 4, 3};
}

std::size_t synthetic_task_cell(const SyntheticSpec& spec, int task) {
  if (spec.structure == SyntheticStructure::conflicting) {
    return static_cast<std::size_t>(spec.task_count / 2 + task);
  }
  return static_cast<std::size_t>(task);
}

std::size_t synthetic_shared_cell(const SyntheticSpec&, int task) { return static_cast<std::size_t>(task / 2); }

namespace {

std::vector<std::uint8_t> balanced_labels(std::size_t n, Rng& rng) {
  std::vector<std::uint8_t> y(n, 0);
  std::fill(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(n / 2), 1);
  rng.shuffle(y.begin(), y.end());
  return y;
}

void fill_background(Tensor<float>& images, double noise, Rng& rng) {
  for (auto& v : images.data()) v = static_cast<float>(std::clamp(0.5 + noise * rng.normal(), 0.0, 1.0));
}

void plant(Tensor<float>& images, std::size_t n, const PatchRect& rect, double delta) {
  for (std::size_t c = 0; c < images.dim(1); ++c) {
    for (std::size_t i = 0; i < rect.size; ++i) {
      for (std::size_t j = 0; j < rect.size; ++j) {
        float& px = images.at(n, c, rect.row + i, rect.col + j);
        px = static_cast<float>(std::clamp(static_cast<double>(px) + delta, 0.0, 1.0));
      }
    }
  }
}

}  // namespace

TaskDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.task_count < 1) throw ConfigError("synthetic task_count must be >= 1");
  if (spec.samples < 2) throw ConfigError("synthetic samples must be >= 2");
  if (!(spec.rho >= -1.0 && spec.rho <= 1.0)) throw ConfigError("synthetic rho must be in [-1,1]");
  if (spec.image_shape[0] == 0 || spec.image_shape[1] < 4 || spec.image_shape[2] < 4) {
    throw ConfigError("synthetic image_shape must be at least 1x4x4");
  }
  const auto T = static_cast<std::size_t>(spec.task_count);
  const std::size_t cells = synthetic_cell_count(spec.image_shape);
  const bool conflicting = spec.structure == SyntheticStructure::conflicting;
  if (conflicting && T % 2 != 0) throw ConfigError("conflicting synthetic structure needs an even task_count");
  const std::size_t needed = conflicting ? T + T / 2 : T;
  if (needed > cells) {
    throw ConfigError("synthetic image " + std::to_string(spec.image_shape[1]) + "x" +
                      std::to_string(spec.image_shape[2]) + " has " + std::to_string(cells) + " planting cells, " +
                      std::to_string(needed) + " needed for " + std::to_string(T) + " " + to_string(spec.structure) +
                      " tasks");
  }
  const std::size_t N = spec.samples;
  Rng rng(derive_seed(spec.seed, "synthetic"));
  TaskDataset out;
  out.images = Tensor<float>({N, spec.image_shape[0], spec.image_shape[1], spec.image_shape[2]});
  out.labels = LabelMatrix(N, T);
  for (std::size_t t = 0; t < T; ++t) out.task_names.push_back("task" + std::to_string(t));
  fill_background(out.images, spec.noise, rng);

  std::vector<std::vector<std::uint8_t>> labels(T);
  for (std::size_t t = 0; t < T; ++t) labels[t] = balanced_labels(N, rng);

  if (spec.structure == SyntheticStructure::correlated) {
    // Flip an equal number of positives and negatives so the partner stays balanced.
    const double flip_rate = (1.0 - spec.rho) / 2.0;
    for (std::size_t k = 0; k + 1 < T; k += 2) {
      std::vector<std::size_t> pos, neg;
      for (std::size_t n = 0; n < N; ++n) (labels[k][n] ? pos : neg).push_back(n);
      rng.shuffle(pos.begin(), pos.end());
      rng.shuffle(neg.begin(), neg.end());
      const auto flips = static_cast<std::size_t>(std::llround(flip_rate * static_cast<double>(std::min(pos.size(), neg.size()))));
      labels[k + 1] = labels[k];
      for (std::size_t i = 0; i < flips; ++i) {
        labels[k + 1][pos[i]] = 0;
        labels[k + 1][neg[i]] = 1;
      }
    }
  }

  constexpr double kMargin = 0.1;
  for (std::size_t n = 0; n < N; ++n) {
    if (!conflicting) {
      for (std::size_t t = 0; t < T; ++t) {
        if (labels[t][n]) plant(out.images, n, synthetic_cell(spec.image_shape, t), spec.amplitude);
      }
      continue;
    }
    for (std::size_t k = 0; k < T / 2; ++k) {
      const bool ya = labels[2 * k][n] != 0, yb = labels[2 * k + 1][n] != 0;
      double v = 0.0, ua = 0.0, ub = 0.0;
      for (;;) {
        v = rng.uniform(-1.0, 1.0);
        ua = rng.uniform(-1.0, 1.0);
        ub = rng.uniform(-1.0, 1.0);
        const double sa = v + ua, sb = -v + ub;
        if (std::abs(sa) < kMargin || std::abs(sb) < kMargin) continue;
        if ((sa > 0) == ya && (sb > 0) == yb) break;
      }
      plant(out.images, n, synthetic_cell(spec.image_shape, k), spec.amplitude * v);
      plant(out.images, n, synthetic_cell(spec.image_shape, T / 2 + 2 * k), spec.amplitude * ua);
      plant(out.images, n, synthetic_cell(spec.image_shape, T / 2 + 2 * k + 1), spec.amplitude * ub);
    }
  }
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t n = 0; n < N; ++n) out.labels.set(n, t, labels[t][n]);
  }
  return out;
}

TaskDataset noise_dataset(const LabelMatrix& labels, std::vector<std::string> names,
                          std::array<std::size_t, 3> image_shape, std::uint64_t seed) {
  TaskDataset out;
  out.images = Tensor<float>({labels.rows(), image_shape[0], image_shape[1], image_shape[2]});
  Rng rng(derive_seed(seed, "noise-images"));
  fill_background(out.images, 0.08, rng);
  out.labels = labels;
  out.task_names = std::move(names);
  return out;
}

TaskDataset subset(const TaskDataset& data, std::span<const std::size_t> indices, Split split) {
  TaskDataset out;
  out.images = gather_images(data, indices);
  out.labels = LabelMatrix(indices.size(), data.labels.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    for (std::size_t t = 0; t < data.labels.cols(); ++t) out.labels.set(i, t, data.labels.at(indices[i], t));
  }
  out.task_names = data.task_names;
  out.split = split;
  return out;
}

DatasetSplits split_dataset(const TaskDataset& all, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must be in (0,1)");
  Rng rng(derive_seed(seed, "split"));
  auto perm = rng.permutation(all.size());
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(all.size())));
  DatasetSplits out;
  out.test_indices.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  out.train_indices.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
  std::sort(out.test_indices.begin(), out.test_indices.end());
  std::sort(out.train_indices.begin(), out.train_indices.end());
  out.train = subset(all, out.train_indices, Split::train);
  out.test = subset(all, out.test_indices, Split::test);
  return out;
}

void normalize_by_mean(DatasetSplits& splits) {
  const auto& img = splits.train.images;
  const std::size_t N = img.dim(0), C = img.dim(1), HW = img.dim(2) * img.dim(3);
  splits.channel_mean.assign(C, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const float* p = img.data().data() + (n * C + c) * HW;
      double acc = 0.0;
      for (std::size_t i = 0; i < HW; ++i) acc += p[i];
      splits.channel_mean[c] += acc;
    }
  }
  for (auto& m : splits.channel_mean) m /= static_cast<double>(std::max<std::size_t>(1, N * HW));
  for (TaskDataset* d : {&splits.train, &splits.test}) {
    auto& t = d->images;
    const std::size_t n_items = t.dim(0);
    for (std::size_t n = 0; n < n_items; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        float* p = t.data().data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) p[i] = static_cast<float>(p[i] - splits.channel_mean[c]);
      }
    }
  }
}

Tensor<float> gather_images(const TaskDataset& data, std::span<const std::size_t> indices, Rng* flip_rng) {
  const auto [C, H, W] = data.image_shape();
  const std::size_t item = C * H * W;
  Tensor<float> out({indices.size(), C, H, W});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= data.size()) throw UsageError("sample index " + std::to_string(indices[i]) + " out of range");
    const float* src = data.images.data().data() + indices[i] * item;
    float* dst = out.data().data() + i * item;
    const bool flip = flip_rng != nullptr && flip_rng->bernoulli(0.5);
    if (!flip) {
      std::copy_n(src, item, dst);
      continue;
    }
    for (std::size_t row = 0; row < C * H; ++row) {
      for (std::size_t w = 0; w < W; ++w) dst[row * W + w] = src[row * W + (W - 1 - w)];
    }
  }
  return out;
}

template <typename T>
std::vector<T> gather_labels(const TaskDataset& data, std::span<const std::size_t> indices, int task) {
  if (task < 0 || task >= data.task_count()) {
    throw DataError("dataset has no labels for task " + std::to_string(task) + " (it has " +
                    std::to_string(data.task_count()) + " tasks)");
  }
  std::vector<T> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = static_cast<T>(data.labels.at(indices[i], static_cast<std::size_t>(task)));
  return out;
}

template std::vector<float> gather_labels(const TaskDataset&, std::span<const std::size_t>, int);
template std::vector<double> gather_labels(const TaskDataset&, std::span<const std::size_t>, int);

}  // namespace taskroute
