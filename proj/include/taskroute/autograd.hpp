#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "taskroute/tensor.hpp"

namespace taskroute {

/// A trainable tensor with its momentum buffer and the gradient written by the
/// last backward pass.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> velocity;
  std::optional<Tensor<T>> grad;

  Parameter() = default;
  Parameter(std::string param_name, Tensor<T> initial)
      : name(std::move(param_name)), value(std::move(initial)), velocity(value.shape()) {}
};

enum class GradMode { overwrite, accumulate };

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
};

/// Records one forward pass. Nodes are appended in execution order, so the
/// reverse of the recording order is a valid topological order for backward.
/// A tape supports exactly one backward pass.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr, {}); }

  /// Leaf that requires a gradient but is not bound to a Parameter.
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true, nullptr, {}); }

  /// Leaf bound to `param`; backward writes the gradient into param.grad.
  /// The parameter must outlive the tape.
  Var<T> parameter(Parameter<T>& param) { return push(param.value, true, &param, {}); }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || nodes_.at(p.id).requires_grad;
    return push(std::move(value), needs, nullptr, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient of the loss w.r.t. node `id` after backward; empty if unreached.
  std::optional<Tensor<T>> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty() && n.value.numel() != 0) return std::nullopt;
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return Tensor<T>(n.value.shape(), n.grad);
  }

  /// Incoming gradient of node `id` during backward.
  const std::vector<T>& upstream(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient buffer of a parent node, zero-initialised on first use.
  /// Returns nullptr when the parent does not require a gradient.
  std::vector<T>* accumulator(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.size() != n.value.numel()) n.grad.assign(n.value.numel(), T{0});
    return &n.grad;
  }

  void backward(Var<T> loss, GradMode mode = GradMode::overwrite);

  bool backward_done() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn fn;
    bool reached = false;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Parameter<T>* param, BackwardFn fn) {
    if (consumed_) throw UsageError("tape already consumed by backward; start a new forward pass");
    nodes_.push_back(Node{std::move(value), {}, requires_grad, param, std::move(fn), false});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

namespace ops {

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, std::size_t stride, std::size_t padding);

/// Running statistics of a batch-norm layer; updated in training mode only.
template <typename T>
struct BatchNormState {
  Tensor<T>& running_mean;
  Tensor<T>& running_var;
};

template <typename T>
Var<T> batchnorm2d(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormState<T> state, bool training,
                   double momentum = 0.1, double eps = 1e-5);

template <typename T>
Var<T> relu(Var<T> x);

template <typename T>
Var<T> sigmoid(Var<T> x);

/// Gradient flows to the first maximum in row-major window order.
template <typename T>
Var<T> maxpool2d(Var<T> x, std::size_t kernel, std::size_t stride);

template <typename T>
Var<T> flatten(Var<T> x);

/// y = x W^T + b with x [B,N], W [M,N], b [M].
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

template <typename T>
Var<T> scale(Var<T> a, T factor);

template <typename T>
Var<T> sum(Var<T> a);

/// Multiplies channel c of a [B,C,H,W] tensor by keep[c] ? 1 : 0. Masked
/// entries are written as +0 and receive no gradient.
template <typename T>
Var<T> select_channels(Var<T> x, std::span<const std::uint8_t> keep);

/// Mean binary cross-entropy over the batch. Logits [B,1] are read as a single
/// log-odds; logits [B,2] as a two-way softmax whose class 1 is the positive.
template <typename T>
Var<T> bce_with_logits(Var<T> logits, std::span<const T> targets);

}  // namespace ops

/// Forward-only helpers on plain tensors.
template <typename T>
Tensor<T> select_channels(const Tensor<T>& x, std::span<const std::uint8_t> keep);

}  // namespace taskroute
