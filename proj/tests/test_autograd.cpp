#include <cmath>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "taskroute/checkpoint.hpp"
#include "taskroute/errors.hpp"
#include "taskroute/optim.hpp"
#include "taskroute/parallel.hpp"

using namespace taskroute;
using namespace testutil;
namespace tops = taskroute::ops;

namespace {

// Naive six-loop convolution with zero padding.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                           std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(0), K = w.dim(2), L = w.dim(3);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - L) / stride + 1;
  Tensor<double> y({B, Cout, Ho, Wo});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < Cout; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = b[o];
          for (std::size_t c = 0; c < Cin; ++c)
            for (std::size_t p = 0; p < K; ++p)
              for (std::size_t q = 0; q < L; ++q) {
                const auto r = static_cast<long>(i * stride + p) - static_cast<long>(pad);
                const auto s = static_cast<long>(j * stride + q) - static_cast<long>(pad);
                if (r < 0 || s < 0 || r >= static_cast<long>(H) || s >= static_cast<long>(W)) continue;
                acc += w.at(o, c, p, q) * x.at(n, c, static_cast<std::size_t>(r), static_cast<std::size_t>(s));
              }
          y.at(n, o, i, j) = acc;
        }
  return y;
}

using Builder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Loss = sum(f(inputs) * R) for a fixed random R; returns the worst relative
// error over every entry of input `which`.
GradCheck check_input(std::vector<Tensor<double>> inputs, std::size_t which, const Builder& f, Rng& rng) {
  Tensor<double> weights;
  auto forward = [&](Tape<double>& tape, bool grads, std::vector<Var<double>>& vars) {
    vars.clear();
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      vars.push_back(grads && i == which ? tape.variable(inputs[i]) : tape.constant(inputs[i]));
    }
    auto y = f(tape, vars);
    if (weights.numel() != y.value().numel() || weights.shape() != y.shape()) {
      weights = random_tensor<double>(y.shape(), rng);
    }
    return tops::sum(tops::mul(y, tape.constant(weights)));
  };
  Tape<double> tape;
  std::vector<Var<double>> vars;
  auto loss = forward(tape, true, vars);
  tape.backward(loss);
  const auto analytic = tape.grad(vars[which]).value_or(Tensor<double>(inputs[which].shape()));
  return finite_difference(inputs[which], analytic, [&] {
    Tape<double> t;
    std::vector<Var<double>> v;
    return forward(t, false, v).value().item();
  });
}

}  // namespace

TEST_CASE("conv2d matches the six-loop oracle") {
  Rng rng(11);
  struct Case {
    std::size_t B, Cin, H, W, Cout, K, stride, pad;
  };
  for (const Case c : {Case{2, 3, 5, 5, 4, 3, 1, 1}, Case{1, 1, 7, 7, 2, 3, 2, 0}, Case{3, 2, 6, 4, 3, 1, 1, 0},
                       Case{2, 4, 9, 9, 5, 5, 2, 2}}) {
    const auto x = random_tensor<double>({c.B, c.Cin, c.H, c.W}, rng);
    const auto w = random_tensor<double>({c.Cout, c.Cin, c.K, c.K}, rng);
    const auto b = random_tensor<double>({c.Cout}, rng);
    Tape<double> tape;
    auto y = tops::conv2d(tape.constant(x), tape.constant(w), tape.constant(b), c.stride, c.pad);
    const auto expect = conv_oracle(x, w, b, c.stride, c.pad);
    REQUIRE(y.shape() == expect.shape());
    CHECK(max_abs_diff(y.value(), expect) < 1e-12);
  }
}

TEST_CASE("conv2d shape errors name the offending shapes") {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 2, 6, 6}));
  auto w = tape.constant(Tensor<double>({3, 3, 3, 3}));
  auto b = tape.constant(Tensor<double>({3}));
  CHECK_THROWS_AS(tops::conv2d(x, w, b, 1, 1), ConfigError);
  auto w2 = tape.constant(Tensor<double>({3, 2, 3, 3}));
  CHECK_NOTHROW(tops::conv2d(x, w2, b, 1, 1));
  // (6 + 0 - 3) is not divisible by 2
  CHECK_THROWS_AS(tops::conv2d(x, w2, b, 2, 0), ConfigError);
}

TEST_CASE("conv2d is identical across thread counts") {
  Rng rng(5);
  const auto x = random_tensor<float>({4, 3, 12, 12}, rng);
  const auto w = random_tensor<float>({8, 3, 3, 3}, rng);
  const auto b = random_tensor<float>({8}, rng);
  auto run = [&](int threads) {
    set_num_threads(threads);
    Tape<float> tape;
    auto wv = tape.variable(w);
    auto y = tops::conv2d(tape.constant(x), wv, tape.constant(b), 1, 1);
    auto loss = tops::sum(y);
    tape.backward(loss);
    return std::pair{y.value(), *tape.grad(wv)};
  };
  const auto one = run(1);
  const auto four = run(4);
  set_num_threads(1);
  CHECK(one.first == four.first);
  CHECK(one.second == four.second);
}

TEST_CASE("linear matches the naive oracle") {
  Rng rng(3);
  const auto x = random_tensor<double>({5, 7}, rng);
  const auto w = random_tensor<double>({4, 7}, rng);
  const auto b = random_tensor<double>({4}, rng);
  Tape<double> tape;
  auto y = tops::linear(tape.constant(x), tape.constant(w), tape.constant(b));
  REQUIRE(y.shape() == Shape{5, 4});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t m = 0; m < 4; ++m) {
      double acc = b[m];
      for (std::size_t n = 0; n < 7; ++n) acc += x[i * 7 + n] * w[m * 7 + n];
      CHECK(std::abs(y.value()[i * 4 + m] - acc) < 1e-12);
    }
  CHECK_THROWS_AS(tops::linear(tape.constant(x), tape.constant(Tensor<double>({4, 6})), tape.constant(b)),
                  ConfigError);
}

TEST_CASE("batchnorm training normalises per channel and updates running stats") {
  Rng rng(8);
  const std::size_t B = 4, C = 3, H = 3, W = 2, M = B * H * W;
  auto x = random_tensor<double>({B, C, H, W}, rng, -2.0, 3.0);
  Tensor<double> gamma({C}, 1.0), beta({C}, 0.0), rm({C}, 0.0), rv({C}, 1.0);
  Tape<double> tape;
  auto y = tops::batchnorm2d(tape.constant(x), tape.constant(gamma), tape.constant(beta),
                             tops::BatchNormState<double>{rm, rv}, true);
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0, ymean = 0.0;
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          mean += x.at(n, c, i, j);
          ymean += y.value().at(n, c, i, j);
        }
    mean /= M;
    ymean /= M;
    double var = 0.0, yvar = 0.0;
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          var += (x.at(n, c, i, j) - mean) * (x.at(n, c, i, j) - mean);
          yvar += y.value().at(n, c, i, j) * y.value().at(n, c, i, j);
        }
    CHECK(std::abs(ymean) < 1e-12);
    CHECK(std::abs(yvar / M - (var / M) / (var / M + 1e-5)) < 1e-10);
    CHECK(std::abs(rm[c] - 0.1 * mean) < 1e-12);
    CHECK(std::abs(rv[c] - (0.9 + 0.1 * var / (M - 1))) < 1e-12);
  }
}

TEST_CASE("batchnorm eval uses running statistics") {
  Tensor<double> x({2, 1, 1, 2}, std::vector<double>{1.0, 2.0, 3.0, 4.0});
  Tensor<double> gamma({1}, 2.0), beta({1}, 0.5), rm({1}, 1.0), rv({1}, 4.0);
  Tape<double> tape;
  auto y = tops::batchnorm2d(tape.constant(x), tape.constant(gamma), tape.constant(beta),
                             tops::BatchNormState<double>{rm, rv}, false);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(y.value()[i] - (2.0 * (x[i] - 1.0) / std::sqrt(4.0 + 1e-5) + 0.5)) < 1e-12);
  }
  CHECK(rm[0] == 1.0);
  CHECK(rv[0] == 4.0);
}

TEST_CASE("batchnorm rejects a batch with one value per channel") {
  Tensor<double> gamma({2}, 1.0), beta({2}, 0.0), rm({2}, 0.0), rv({2}, 1.0);
  Tape<double> tape;
  CHECK_THROWS_AS(tops::batchnorm2d(tape.constant(Tensor<double>({1, 2, 1, 1})), tape.constant(gamma),
                                    tape.constant(beta), tops::BatchNormState<double>{rm, rv}, true),
                  DegenerateBatchError);
}

TEST_CASE("maxpool picks the first maximum and floors the output") {
  Tensor<double> x({1, 1, 3, 3}, std::vector<double>{1, 1, 0, 1, 1, 0, 0, 0, 0});
  Tape<double> tape;
  auto xv = tape.variable(x);
  auto y = tops::maxpool2d(xv, 2, 2);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.value()[0] == 1.0);
  tape.backward(tops::sum(y));
  const auto g = *tape.grad(xv);
  CHECK(g[0] == 1.0);
  CHECK(g[1] == 0.0);
  CHECK(g[3] == 0.0);
  CHECK(g[4] == 0.0);
  Tape<double> t2;
  CHECK_THROWS_AS(tops::maxpool2d(t2.constant(Tensor<double>({1, 1, 1, 3})), 2, 2), ConfigError);
}

TEST_CASE("finite-difference gradients of every op") {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    CAPTURE(trial);
    const std::size_t B = 2 + rng.uniform_below(2), C = 1 + rng.uniform_below(3);
    const std::size_t H = 4 + rng.uniform_below(3), W = 4 + rng.uniform_below(3);
    // conv: input, weight, bias
    {
      const std::size_t Cout = 1 + rng.uniform_below(3);
      std::vector<Tensor<double>> in{random_tensor<double>({B, C, H, W}, rng),
                                     random_tensor<double>({Cout, C, 3, 3}, rng),
                                     random_tensor<double>({Cout}, rng)};
      Builder f = [](Tape<double>&, const std::vector<Var<double>>& v) { return tops::conv2d(v[0], v[1], v[2], 1, 1); };
      for (std::size_t k = 0; k < 3; ++k) CHECK(check_input(in, k, f, rng).ok());
    }
    // batch-norm in training mode: input, gamma, beta
    {
      std::vector<Tensor<double>> in{random_tensor<double>({B, C, H, W}, rng), random_tensor<double>({C}, rng, 0.5, 1.5),
                                     random_tensor<double>({C}, rng)};
      Builder f = [C](Tape<double>&, const std::vector<Var<double>>& v) {
        static thread_local Tensor<double> rm, rv;
        rm = Tensor<double>({C});
        rv = Tensor<double>({C}, 1.0);
        return tops::batchnorm2d(v[0], v[1], v[2], tops::BatchNormState<double>{rm, rv}, true);
      };
      for (std::size_t k = 0; k < 3; ++k) CHECK(check_input(in, k, f, rng).ok());
    }
    // relu, sigmoid, maxpool, flatten, select_channels, scale
    {
      std::vector<Tensor<double>> in{random_away_from_zero<double>({B, C, H, W}, rng)};
      std::vector<std::uint8_t> keep(C);
      for (auto& k : keep) k = rng.bernoulli(0.5);
      std::vector<Builder> unary{
          [](Tape<double>&, const std::vector<Var<double>>& v) { return tops::relu(v[0]); },
          [](Tape<double>&, const std::vector<Var<double>>& v) { return tops::sigmoid(tops::scale(v[0], 3.0)); },
          [](Tape<double>&, const std::vector<Var<double>>& v) { return tops::maxpool2d(v[0], 2, 2); },
          [](Tape<double>&, const std::vector<Var<double>>& v) { return tops::flatten(v[0]); },
          [keep](Tape<double>&, const std::vector<Var<double>>& v) {
            return tops::select_channels(v[0], std::span<const std::uint8_t>(keep));
          }};
      for (const auto& f : unary) CHECK(check_input(in, 0, f, rng).ok());
    }
    // linear, add, mul
    {
      const std::size_t N = 3 + rng.uniform_below(4), M = 1 + rng.uniform_below(4);
      std::vector<Tensor<double>> in{random_tensor<double>({B, N}, rng), random_tensor<double>({M, N}, rng),
                                     random_tensor<double>({M}, rng)};
      Builder f = [](Tape<double>&, const std::vector<Var<double>>& v) { return tops::linear(v[0], v[1], v[2]); };
      for (std::size_t k = 0; k < 3; ++k) CHECK(check_input(in, k, f, rng).ok());
      std::vector<Tensor<double>> pair{random_tensor<double>({B, N}, rng), random_tensor<double>({B, N}, rng)};
      Builder fa = [](Tape<double>&, const std::vector<Var<double>>& v) { return tops::add(v[0], v[1]); };
      Builder fm = [](Tape<double>&, const std::vector<Var<double>>& v) { return tops::mul(v[0], v[1]); };
      for (std::size_t k = 0; k < 2; ++k) {
        CHECK(check_input(pair, k, fa, rng).ok());
        CHECK(check_input(pair, k, fm, rng).ok());
      }
    }
    // bce with one and two logits
    for (std::size_t K : {1u, 2u}) {
      std::vector<double> y(B);
      for (auto& v : y) v = static_cast<double>(rng.uniform_below(2));
      std::vector<Tensor<double>> in{random_tensor<double>({B, K}, rng, -3.0, 3.0)};
      Builder f = [y](Tape<double>&, const std::vector<Var<double>>& v) {
        return tops::bce_with_logits(v[0], std::span<const double>(y));
      };
      CHECK(check_input(in, 0, f, rng).ok());
    }
  }
}

TEST_CASE("bce matches a wide-precision oracle") {
  const std::vector<double> z0{0.3, -2.0, 40.0, -40.0, 0.0};
  const std::vector<double> z1{-1.1, 5.0, -30.0, 60.0, 0.0};
  const std::vector<double> y{1, 0, 1, 0, 1};
  // two-logit form: softplus(d) - y d with d = z1 - z0
  long double expect = 0.0L;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const long double d = static_cast<long double>(z1[i]) - z0[i];
    const long double sp = d > 0 ? d + std::log1p(std::exp(-d)) : std::log1p(std::exp(d));
    expect += sp - y[i] * d;
  }
  expect /= y.size();
  Tensor<double> logits({5, 2});
  for (std::size_t i = 0; i < 5; ++i) {
    logits[2 * i] = z0[i];
    logits[2 * i + 1] = z1[i];
  }
  Tape<double> tape;
  auto loss = tops::bce_with_logits(tape.constant(logits), std::span<const double>(y));
  CHECK(std::abs(loss.value().item() - static_cast<double>(expect)) < 1e-12);

  Tape<double> t1;
  Tensor<double> single({1, 1}, std::vector<double>{-800.0});
  const std::vector<double> pos{1.0};
  CHECK(std::abs(tops::bce_with_logits(t1.constant(single), std::span<const double>(pos)).value().item() - 800.0) <
        1e-9);

  Tape<double> t2;
  const std::vector<double> bad{0.5};
  CHECK_THROWS_AS(tops::bce_with_logits(t2.constant(single), std::span<const double>(bad)), DataError);
}

TEST_CASE("backward misuse is reported") {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({2}, 1.0));
  CHECK_THROWS_AS(tape.backward(x), UsageError);
  auto s = tops::sum(x);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), UsageError);
  CHECK_THROWS_AS(tape.constant(Tensor<double>({1})), UsageError);

  Tape<double> t2;
  auto n = tops::sum(t2.variable(Tensor<double>({1}, std::nan(""))));
  CHECK_THROWS_AS(t2.backward(n), NumericError);
}

TEST_CASE("parameter gradients overwrite or accumulate") {
  Parameter<double> p("p", Tensor<double>({2}, 1.0));
  for (int i = 0; i < 2; ++i) {
    Tape<double> tape;
    tape.backward(tops::sum(tops::scale(tape.parameter(p), 3.0)));
  }
  CHECK((*p.grad)[0] == 3.0);
  Tape<double> tape;
  tape.backward(tops::sum(tops::scale(tape.parameter(p), 3.0)), GradMode::accumulate);
  CHECK((*p.grad)[0] == 6.0);
  // the same parameter used twice on one tape sums both paths
  Tape<double> t2;
  auto a = t2.parameter(p);
  auto b = t2.parameter(p);
  t2.backward(tops::sum(tops::add(a, tops::scale(b, 2.0))));
  CHECK((*p.grad)[1] == 3.0);
}

TEST_CASE("sgd momentum recurrence") {
  Parameter<double> p("w", Tensor<double>({3}, std::vector<double>{1.0, -2.0, 0.5}));
  const std::vector<double> g{0.4, -1.0, 2.0};
  const auto start = p.value;
  std::vector<Parameter<double>*> ps{&p};
  for (int step = 0; step < 2; ++step) {
    p.grad = Tensor<double>({3}, g);
    sgd_momentum_step<double>(ps, 0.01, 0.5);
  }
  // v1 = g, v2 = 1.5 g, total displacement 0.01 * 2.5 g
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(p.value[i] - (start[i] - 0.025 * g[i])) < 1e-15);
  CHECK(!p.grad.has_value());

  Parameter<double> q("q", Tensor<double>({1}, 1.0));
  p.grad = Tensor<double>({3}, g);
  std::vector<Parameter<double>*> both{&p, &q};
  const auto before = p.value;
  CHECK_THROWS_AS(sgd_momentum_step<double>(both, 0.01, 0.5), UsageError);
  CHECK(p.value == before);
}

TEST_CASE("checkpoint round trip and corruption offsets") {
  Checkpoint c;
  c.metadata = R"({"k":1})";
  c.records.push_back({"a", {2, 2}, {1.0, 2.0, 3.5, -4.0}, CheckpointRecord::DType::f32});
  c.records.push_back({"b", {3}, {0.1, 0.2, 0.3}, CheckpointRecord::DType::f64});
  const auto bytes = encode_checkpoint(c);
  const auto back = decode_checkpoint(bytes);
  CHECK(back.metadata == c.metadata);
  REQUIRE(back.records.size() == 2);
  CHECK(back.records[0].values == c.records[0].values);
  CHECK(back.records[1].values == c.records[1].values);
  CHECK(back.records[1].shape == Shape{3});

  auto bad = bytes;
  bad[0] = 'X';
  try {
    decode_checkpoint(bad);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 0);
  }
  auto cut = bytes;
  cut.resize(bytes.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint(cut), ParseError);
  auto extra = bytes;
  extra.push_back(0);
  try {
    decode_checkpoint(extra);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() == bytes.size());
  }
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.bin"), LoadError);
}
