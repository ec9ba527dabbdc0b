#include <set>
#include <type_traits>

#include "doctest.h"
#include "helpers.hpp"
#include "taskroute/errors.hpp"
#include "taskroute/routing.hpp"

using namespace taskroute;
using namespace testutil;

namespace {

RoutingMap one_layer(std::size_t C, int T, double sigma, std::uint64_t seed = 1, RoutingOptions opt = {}) {
  const std::vector<LayerSpec> layers{{"L", C}};
  return build_routing_map(layers, T, sigma, seed, opt);
}

}  // namespace

TEST_CASE("shared count rounds half to even") {
  CHECK(shared_channel_count(0.5, 5) == 2);
  CHECK(shared_channel_count(0.5, 7) == 4);
  CHECK(shared_channel_count(0.25, 10) == 2);
  CHECK(shared_channel_count(0.3, 10) == 3);
  CHECK(shared_channel_count(0.0, 9) == 0);
  CHECK(shared_channel_count(1.0, 9) == 9);
}

TEST_CASE("partition masks satisfy the construction identities") {
  Rng rng(99);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t C = 2 + rng.uniform_below(200);
    const int T = 1 + static_cast<int>(rng.uniform_below(std::min<std::size_t>(C, 32)));
    const double sigma = static_cast<double>(rng.uniform_below(11)) / 10.0;
    CAPTURE(C);
    CAPTURE(T);
    CAPTURE(sigma);
    const auto map = one_layer(C, T, sigma, trial);
    const auto S = shared_channel_count(sigma, C);
    CHECK(map.shared(0).count() == S);
    BitMask uni(C);
    std::size_t lo = C, hi = 0;
    for (int t = 0; t < T; ++t) {
      const auto& m = map.mask(0, t).bits;
      CHECK(m.count_and(map.shared(0)) == S);
      lo = std::min(lo, m.count() - S);
      hi = std::max(hi, m.count() - S);
      for (std::size_t c = 0; c < C; ++c) {
        if (m.test(c)) uni.set(c);
      }
      for (int u = t + 1; u < T; ++u) CHECK(m.count_and(map.mask(0, u).bits) == S);
    }
    CHECK(uni.all());
    CHECK(hi - lo <= 1);
    if (sigma == 1.0) {
      for (int t = 0; t < T; ++t) CHECK(map.mask(0, t).bits.all());
    }
  }
}

TEST_CASE("construction is deterministic in the seed and varies across seeds") {
  const std::vector<LayerSpec> layers{{"a", 32}, {"b", 64}};
  const auto m1 = build_routing_map(layers, 4, 0.5, 7);
  const auto m2 = build_routing_map(layers, 4, 0.5, 7);
  const auto m3 = build_routing_map(layers, 4, 0.5, 8);
  CHECK(m1 == m2);
  CHECK(m1.fingerprint() == m2.fingerprint());
  CHECK_FALSE(m1 == m3);
}

TEST_CASE("empty masks warn, strict mode rejects") {
  const auto map = one_layer(3, 5, 0.0);
  CHECK(map.warnings().size() == 2);
  CHECK_THROWS_AS(one_layer(3, 5, 0.0, 1, RoutingOptions{MaskMode::partition, true}), ConfigError);
  CHECK_NOTHROW(one_layer(5, 5, 0.0, 1, RoutingOptions{MaskMode::partition, true}));
}

TEST_CASE("invalid construction arguments") {
  CHECK_THROWS_AS(one_layer(8, 2, 1.5), ConfigError);
  CHECK_THROWS_AS(one_layer(8, 2, -0.1), ConfigError);
  CHECK_THROWS_AS(one_layer(8, 0, 0.5), ConfigError);
  const std::vector<LayerSpec> dup{{"x", 4}, {"x", 4}};
  CHECK_THROWS_AS(build_routing_map(dup, 2, 0.5, 0), ConfigError);
}

TEST_CASE("bernoulli mode keeps each bit with probability sigma + (1 - sigma) / T") {
  const auto map = one_layer(4096, 4, 0.2, 3, RoutingOptions{MaskMode::bernoulli, false});
  const double p = 0.2 + 0.8 / 4.0;
  for (int t = 0; t < 4; ++t) {
    const double frac = static_cast<double>(map.mask(0, t).bits.count()) / 4096.0;
    CHECK(std::abs(frac - p) < 0.03);
  }
}

TEST_CASE("hex encoding puts channel 0 in the high bit of the first digit") {
  BitMask m(5);
  m.set(0);
  m.set(2);
  m.set(4);
  CHECK(m.to_hex() == "a8");
  CHECK(BitMask::from_hex("a8", 5) == m);
  CHECK_THROWS_AS(BitMask::from_hex("a9", 5), ParseError);
  CHECK_THROWS_AS(BitMask::from_hex("a", 5), ParseError);
  CHECK_THROWS_AS(BitMask::from_hex("g8", 5), ParseError);
}

TEST_CASE("routing map text round trip") {
  const std::vector<LayerSpec> layers{{"trunk.block0", 13}, {"trunk.block1", 70}};
  for (double sigma : {0.0, 0.1, 0.5, 1.0}) {
    const auto map = build_routing_map(layers, 6, sigma, 42);
    const auto text = serialize_routing_map(map);
    const auto back = parse_routing_map(text);
    CHECK(back == map);
    CHECK(serialize_routing_map(back) == text);
    CHECK(back.sigma() == sigma);
  }
}

TEST_CASE("routing map parse errors carry the line offset") {
  const auto text = serialize_routing_map(one_layer(8, 2, 0.5));
  try {
    parse_routing_map("bogus\n" + text);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 0);
  }
  const auto pos = text.find("mask L 1");
  REQUIRE(pos != std::string::npos);
  auto broken = text;
  broken.replace(pos, 8, "mask L 9");
  try {
    parse_routing_map(broken);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() == pos);
  }
  CHECK_THROWS_AS(parse_routing_map(""), ParseError);
  CHECK_THROWS_AS(load_routing_map("/nonexistent/map.txt"), LoadError);
}

TEST_CASE("task routing zeroes masked channels and is linear") {
  Rng rng(17);
  const auto map = one_layer(6, 3, 0.34, 5);
  const auto& mask = map.mask(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor<double>({2, 6, 3, 3}, rng);
    const auto y = random_tensor<double>({2, 6, 3, 3}, rng);
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    Tensor<double> comb(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) comb[i] = a * x[i] + b * y[i];
    const auto rc = apply_task_routing(comb, mask);
    const auto rx = apply_task_routing(x, mask);
    const auto ry = apply_task_routing(y, mask);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(std::abs(rc[i] - (a * rx[i] + b * ry[i])) < 1e-12);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 6; ++c)
        for (std::size_t k = 0; k < 9; ++k) {
          const auto idx = (n * 6 + c) * 9 + k;
          if (mask.bits.test(c)) CHECK(rx[idx] == x[idx]);
          else CHECK(rx[idx] == 0.0);
        }
  }
  const auto wrong = random_tensor<double>({1, 5, 2, 2}, rng);
  try {
    apply_task_routing(wrong, mask);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("'L'") != std::string::npos);
  }
}

TEST_CASE("routing map exposes masks read-only") {
  const auto map = one_layer(4, 2, 0.5);
  static_assert(std::is_same_v<decltype(map.mask(0, 0)), const TaskMask&>);
  static_assert(std::is_same_v<decltype(map.shared(0)), const BitMask&>);
  CHECK_THROWS_AS(map.mask(0, 2), UsageError);
  CHECK_THROWS_AS(map.mask("nope", 0), UsageError);
}

TEST_CASE("task context guards the active task") {
  TaskContext ctx(3);
  CHECK_THROWS_AS(ctx.require_active_task(), UsageError);
  CHECK_THROWS_AS(ctx.set_active_task(3), UsageError);
  CHECK_THROWS_AS(ctx.set_active_task(-1), UsageError);
  ctx.set_active_task(2);
  CHECK(ctx.require_active_task() == 2);
  CHECK_THROWS_AS(TaskContext(0), UsageError);
}

TEST_CASE("sharing statistics") {
  SUBCASE("C=10, T=2, sigma=0.6 gives Jaccard 0.6") {
    const auto r = sharing_statistics(one_layer(10, 2, 0.6));
    CHECK(r.pair_jaccard(0, 1) == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(r.mean_pairwise_jaccard == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(r.layers[0].active == std::vector<std::size_t>{8, 8});
  }
  SUBCASE("sigma=1 shares everything, sigma=0 nothing") {
    const std::vector<LayerSpec> layers{{"a", 16}, {"b", 32}};
    const auto full = sharing_statistics(build_routing_map(layers, 4, 1.0, 0));
    CHECK(full.mean_pairwise_jaccard == 1.0);
    const auto none = sharing_statistics(build_routing_map(layers, 4, 0.0, 0));
    CHECK(none.mean_pairwise_jaccard == 0.0);
    CHECK(none.active_fraction[0] == doctest::Approx(0.25));
  }
  SUBCASE("subnet parameter accounting") {
    // two layers of 8 and 12 channels, T=2, sigma=0.5: shared 4 and 6,
    // exclusive 2 and 3 per task, so each task keeps 6 and 9 channels
    const std::vector<LayerSpec> layers{{"a", 8}, {"b", 12}};
    const auto map = build_routing_map(layers, 2, 0.5, 3);
    const std::vector<ConvGeometry> geo{{3, 3, 3, true}, {0, 3, 3, true}};
    const auto r = sharing_statistics(map, geo);
    REQUIRE(r.active_params);
    const std::size_t task = 6 * (3 * 9 + 1) + 2 * 6 + 9 * (6 * 9 + 1) + 2 * 9;
    const std::size_t full = 8 * (3 * 9 + 1) + 2 * 8 + 12 * (8 * 9 + 1) + 2 * 12;
    CHECK((*r.active_params)[0] == task);
    CHECK((*r.active_params)[1] == task);
    CHECK(*r.full_params == full);
    CHECK(r.mask_storage_bits == 2 * 8 + 2 * 12);
  }
  SUBCASE("csv layouts") {
    const auto r = sharing_statistics(one_layer(4, 2, 0.5));
    CHECK(format_sharing_layers_csv(r).rfind("layer,channels,shared,task,active\n", 0) == 0);
    CHECK(format_sharing_pairs_csv(r).rfind("task_a,task_b,jaccard\n", 0) == 0);
    CHECK(format_sharing_text(r).find("tasks: 2") != std::string::npos);
  }
}
