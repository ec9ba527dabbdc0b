#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "taskroute/data.hpp"
#include "taskroute/errors.hpp"

using namespace taskroute;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("taskroute_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::uint8_t> be32(std::uint32_t v) {
  return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 8),
          static_cast<std::uint8_t>(v)};
}

std::vector<std::uint8_t> idx_images_bytes(std::uint32_t n, std::uint32_t r, std::uint32_t c) {
  std::vector<std::uint8_t> out;
  for (auto v : {0x00000803u, n, r, c}) {
    const auto b = be32(v);
    out.insert(out.end(), b.begin(), b.end());
  }
  for (std::uint32_t i = 0; i < n * r * c; ++i) out.push_back(static_cast<std::uint8_t>(i * 7));
  return out;
}

double cell_mean(const TaskDataset& d, std::size_t n, const PatchRect& r) {
  double acc = 0.0;
  const std::size_t C = d.images.dim(1);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < r.size; ++i)
      for (std::size_t j = 0; j < r.size; ++j) acc += d.images.at(n, c, r.row + i, r.col + j);
  return acc / static_cast<double>(C * r.size * r.size);
}

}  // namespace

TEST_CASE("idx images parse and report corruption offsets") {
  const auto bytes = idx_images_bytes(2, 3, 4);
  const auto img = parse_idx_images(bytes);
  CHECK(img.count == 2);
  CHECK(img.rows == 3);
  CHECK(img.cols == 4);
  CHECK(img.pixels[1] == doctest::Approx(7.0 / 255.0));

  auto bad = bytes;
  bad[3] = 0x01;
  try {
    parse_idx_images(bad);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 0);
  }
  auto cut = bytes;
  cut.resize(20);
  try {
    parse_idx_images(cut);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 20);
    CHECK(std::string(e.what()).find("expected 24") != std::string::npos);
  }
  const std::vector<std::uint8_t> tiny{0, 0};
  CHECK_THROWS_AS(parse_idx_images(tiny), ParseError);
}

TEST_CASE("idx labels and counts") {
  auto labels = be32(0x00000801);
  const auto n = be32(3);
  labels.insert(labels.end(), n.begin(), n.end());
  labels.insert(labels.end(), {2, 0, 9});
  CHECK(parse_idx_labels(labels) == std::vector<int>{2, 0, 9});
  labels.pop_back();
  CHECK_THROWS_AS(parse_idx_labels(labels), ParseError);
}

TEST_CASE("idx files round trip and count mismatches are caught") {
  const auto dir = temp_dir("idx");
  Tensor<float> imgs({3, 1, 2, 2}, std::vector<float>{0, 1, 0.5f, 0.25f, 1, 1, 0, 0, 0.2f, 0.4f, 0.6f, 0.8f});
  write_idx_images(dir / "img", imgs);
  const std::vector<int> labels{1, 0, 2};
  write_idx_labels(dir / "lab", labels);
  const auto back = load_idx(dir / "img", dir / "lab");
  CHECK(back.labels == labels);
  for (std::size_t i = 0; i < imgs.numel(); ++i) CHECK(std::abs(back.images.pixels[i] - imgs[i]) <= 0.5 / 255.0 + 1e-7);
  const std::vector<int> short_labels{1, 0};
  write_idx_labels(dir / "lab2", short_labels);
  try {
    load_idx(dir / "img", dir / "lab2");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 4);
  }
  CHECK_THROWS_AS(read_idx_images(dir / "missing"), LoadError);
  fs::remove_all(dir);
}

TEST_CASE("one-vs-rest tasks") {
  const std::vector<int> y{0, 2, 1, 2};
  const auto m = make_binary_tasks(y, 3);
  CHECK(m.rows() == 4);
  CHECK(m.cols() == 3);
  CHECK(m.at(1, 2) == 1);
  CHECK(m.at(1, 0) == 0);
  CHECK(m.positives(2) == 2);
  const std::vector<int> bad{0, 3};
  CHECK_THROWS_AS(make_binary_tasks(bad, 3), DataError);
}

TEST_CASE("attribute tables") {
  const std::string text = "smile,hat\n1,0\n0,0\n1,1\n";
  const auto t = parse_attribute_table(text);
  CHECK(t.names == std::vector<std::string>{"smile", "hat"});
  CHECK(t.labels.rows() == 3);
  CHECK(t.positive_rate[0] == doctest::Approx(2.0 / 3.0));
  CHECK(t.positive_rate[1] == doctest::Approx(1.0 / 3.0));

  CHECK_THROWS_AS(parse_attribute_table(""), ParseError);
  const std::string bad = "a,b\n1,0\n0,2\n";
  try {
    parse_attribute_table(bad);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() == bad.find("2\n"));
    CHECK(std::string(e.what()).find("row 2") != std::string::npos);
    CHECK(std::string(e.what()).find("column 1") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_attribute_table("a,b\n1\n"), ParseError);

  const auto dir = temp_dir("attr");
  write_attribute_table(dir / "t.csv", t.labels, t.names);
  const auto back = load_attribute_table(dir / "t.csv");
  CHECK(back.labels == t.labels);
  CHECK(back.names == t.names);
  fs::remove_all(dir);
}

TEST_CASE("synthetic labels are balanced and deterministic") {
  for (auto structure : {SyntheticStructure::independent, SyntheticStructure::correlated,
                         SyntheticStructure::conflicting}) {
    SyntheticSpec s;
    s.structure = structure;
    s.samples = 301;
    s.rho = 0.6;
    const auto a = generate_synthetic(s);
    const auto b = generate_synthetic(s);
    CHECK(a.images == b.images);
    CHECK(a.labels == b.labels);
    for (int t = 0; t < s.task_count; ++t) {
      const auto p = a.labels.positives(static_cast<std::size_t>(t));
      CHECK(p >= 150);
      CHECK(p <= 151);
    }
    for (float v : a.images.storage()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    s.seed = 1;
    CHECK_FALSE(generate_synthetic(s).images == a.images);
  }
}

TEST_CASE("independent synthetic: the task cell carries the label") {
  SyntheticSpec s;
  s.samples = 200;
  s.noise = 0.0;
  const auto d = generate_synthetic(s);
  for (std::size_t n = 0; n < d.size(); ++n)
    for (int t = 0; t < s.task_count; ++t) {
      const double m = cell_mean(d, n, synthetic_cell(s.image_shape, synthetic_task_cell(s, t)));
      const double expect = d.labels.at(n, static_cast<std::size_t>(t)) ? 0.5 + s.amplitude : 0.5;
      CHECK(std::abs(m - expect) < 1e-6);
    }
}

TEST_CASE("correlated synthetic: pair agreement follows rho") {
  SyntheticSpec s;
  s.structure = SyntheticStructure::correlated;
  s.samples = 4000;
  s.rho = 0.5;
  const auto d = generate_synthetic(s);
  for (std::size_t k = 0; k + 1 < 8; k += 2) {
    std::size_t agree = 0;
    for (std::size_t n = 0; n < d.size(); ++n) agree += d.labels.at(n, k) == d.labels.at(n, k + 1);
    CHECK(static_cast<double>(agree) / d.size() == doctest::Approx(0.75).epsilon(0.01));
  }
}

TEST_CASE("conflicting synthetic: labels follow the signed cell rule") {
  SyntheticSpec s;
  s.structure = SyntheticStructure::conflicting;
  s.samples = 300;
  s.noise = 0.0;
  const auto d = generate_synthetic(s);
  std::size_t agree_pairs = 0, pairs = 0;
  for (std::size_t n = 0; n < d.size(); ++n)
    for (int k = 0; k < s.task_count / 2; ++k) {
      const int a = 2 * k, b = 2 * k + 1;
      CHECK(synthetic_shared_cell(s, a) == synthetic_shared_cell(s, b));
      const double v = (cell_mean(d, n, synthetic_cell(s.image_shape, synthetic_shared_cell(s, a))) - 0.5) / s.amplitude;
      const double ua = (cell_mean(d, n, synthetic_cell(s.image_shape, synthetic_task_cell(s, a))) - 0.5) / s.amplitude;
      const double ub = (cell_mean(d, n, synthetic_cell(s.image_shape, synthetic_task_cell(s, b))) - 0.5) / s.amplitude;
      CHECK(d.labels.at(n, static_cast<std::size_t>(a)) == (v + ua > 0 ? 1 : 0));
      CHECK(d.labels.at(n, static_cast<std::size_t>(b)) == (-v + ub > 0 ? 1 : 0));
      CHECK(std::abs(v + ua) >= 0.1 - 1e-5);
      agree_pairs += d.labels.at(n, static_cast<std::size_t>(a)) == d.labels.at(n, static_cast<std::size_t>(b));
      ++pairs;
    }
  // labels within a pair are independent draws, so they agree about half the time
  CHECK(static_cast<double>(agree_pairs) / pairs == doctest::Approx(0.5).epsilon(0.1));
  SyntheticSpec odd = s;
  odd.task_count = 7;
  CHECK_THROWS_AS(generate_synthetic(odd), ConfigError);
  SyntheticSpec big = s;
  big.task_count = 12;  // 18 cells needed, 16 available
  CHECK_THROWS_AS(generate_synthetic(big), ConfigError);
}

TEST_CASE("split hygiene and normalisation") {
  SyntheticSpec s;
  s.samples = 101;
  const auto all = generate_synthetic(s);
  auto splits = split_dataset(all, 0.25, 3);
  std::set<std::size_t> seen(splits.train_indices.begin(), splits.train_indices.end());
  for (auto i : splits.test_indices) CHECK(seen.insert(i).second);
  CHECK(seen.size() == all.size());
  CHECK(splits.test.size() == 25);
  CHECK(splits.train.split == Split::train);
  CHECK(splits.test.split == Split::test);
  const auto again = split_dataset(all, 0.25, 3);
  CHECK(again.test_indices == splits.test_indices);

  const auto raw_test = splits.test.images;
  normalize_by_mean(splits);
  double mean = 0.0;
  for (float v : splits.train.images.storage()) mean += v;
  CHECK(std::abs(mean / splits.train.images.numel()) < 1e-5);
  for (std::size_t i = 0; i < raw_test.numel(); ++i) {
    CHECK(std::abs(splits.test.images[i] - (raw_test[i] - splits.channel_mean[0])) < 1e-6);
  }
  CHECK_THROWS_AS(split_dataset(all, 1.0, 0), ConfigError);
}

TEST_CASE("dataset warnings flag single-class tasks") {
  LabelMatrix m(4, 2);
  m.set(0, 0, 1);
  const auto d = noise_dataset(m, {"a", "b"}, {1, 4, 4}, 0);
  const auto w = dataset_warnings(d);
  REQUIRE(w.size() == 1);
  CHECK(w[0].find("b") != std::string::npos);
}

TEST_CASE("gather helpers") {
  SyntheticSpec s;
  s.samples = 10;
  const auto d = generate_synthetic(s);
  const std::vector<std::size_t> idx{3, 1};
  const auto x = gather_images(d, idx);
  CHECK(x.shape() == Shape{2, 1, 16, 16});
  CHECK(x.at(0, 0, 5, 5) == d.images.at(3, 0, 5, 5));
  const auto y = gather_labels<double>(d, idx, 2);
  CHECK(y[1] == d.labels.at(1, 2));
  CHECK_THROWS_AS(gather_labels<double>(d, idx, 8), DataError);
  Rng rng(0);
  const std::vector<std::size_t> many(64, 0);
  const auto flipped = gather_images(d, many, &rng);
  std::size_t mirrored = 0;
  for (std::size_t n = 0; n < 64; ++n) mirrored += flipped.at(n, 0, 0, 0) == d.images.at(0, 0, 0, 15) &&
                                                   flipped.at(n, 0, 0, 0) != d.images.at(0, 0, 0, 0);
  CHECK(mirrored > 10);
  CHECK(mirrored < 54);
}

TEST_CASE("conflicting synthetic: shared predictors are capped, separate ones are not") {
  SyntheticSpec s;
  s.structure = SyntheticStructure::conflicting;
  s.task_count = 2;
  s.samples = 2000;
  const auto d = generate_synthetic(s);
  std::size_t agree = 0, sep_a = 0, sep_b = 0;
  std::vector<std::size_t> shared_hits(3, 0);
  for (std::size_t n = 0; n < d.size(); ++n) {
    const bool ya = d.labels.at(n, 0), yb = d.labels.at(n, 1);
    agree += ya == yb;
    const double v = cell_mean(d, n, synthetic_cell(s.image_shape, synthetic_shared_cell(s, 0))) - 0.5;
    const double ua = cell_mean(d, n, synthetic_cell(s.image_shape, synthetic_task_cell(s, 0))) - 0.5;
    const double ub = cell_mean(d, n, synthetic_cell(s.image_shape, synthetic_task_cell(s, 1))) - 0.5;
    sep_a += (v + ua > 0) == ya;
    sep_b += (-v + ub > 0) == yb;
    // candidate single predictors applied to both tasks
    const bool preds[3] = {v > 0, ua + ub > 0, v + ua > 0};
    for (std::size_t k = 0; k < 3; ++k) shared_hits[k] += (preds[k] == ya) + (preds[k] == yb);
  }
  const double N = static_cast<double>(d.size());
  // any predictor shared by both tasks is right on at most one label where they disagree
  const double bound = (1.0 + agree / N) / 2.0;
  CHECK(bound == doctest::Approx(0.75).epsilon(0.03));
  for (auto h : shared_hits) CHECK(h / (2.0 * N) <= bound + 1e-12);
  // pixel noise blurs samples near the margin
  CHECK(sep_a / N > 0.97);
  CHECK(sep_b / N > 0.97);

  s.noise = 0.0;
  const auto clean = generate_synthetic(s);
  std::size_t exact = 0;
  for (std::size_t n = 0; n < clean.size(); ++n) {
    const double v = cell_mean(clean, n, synthetic_cell(s.image_shape, synthetic_shared_cell(s, 0))) - 0.5;
    const double ua = cell_mean(clean, n, synthetic_cell(s.image_shape, synthetic_task_cell(s, 0))) - 0.5;
    const double ub = cell_mean(clean, n, synthetic_cell(s.image_shape, synthetic_task_cell(s, 1))) - 0.5;
    exact += ((v + ua > 0) == (clean.labels.at(n, 0) != 0)) && ((-v + ub > 0) == (clean.labels.at(n, 1) != 0));
  }
  CHECK(exact == clean.size());
}
