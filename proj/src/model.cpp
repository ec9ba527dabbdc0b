#include "taskroute/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>

namespace taskroute {

ModelConfig ModelConfig::desk_default(std::array<std::size_t, 3> input_shape) {
  ModelConfig c;
  c.input_shape = input_shape;
  for (const std::size_t width : {32, 64, 128, 128}) {
    BlockConfig b;
    b.out_channels = width;
    c.blocks.push_back(b);
  }
  return c;
}

std::string block_layer_id(std::size_t block) { return "trunk.block" + std::to_string(block); }

namespace {

std::vector<BlockGeometry> walk_geometry(const ModelConfig& config, bool allow_empty_blocks) {
  const auto [c0, h0, w0] = config.input_shape;
  if (c0 == 0 || h0 == 0 || w0 == 0) throw ConfigError("model.input_shape must be positive in every dimension");
  std::vector<BlockGeometry> out;
  std::array<std::size_t, 3> cur = config.input_shape;
  for (std::size_t i = 0; i < config.blocks.size(); ++i) {
    const auto& b = config.blocks[i];
    const std::string where = "block " + std::to_string(i) + ": ";
    if (b.out_channels == 0 && !allow_empty_blocks) throw ConfigError(where + "out_channels must be positive");
    if (b.kernel == 0 || b.stride == 0) throw ConfigError(where + "kernel and stride must be positive");
    BlockGeometry g;
    g.input = cur;
    std::array<std::size_t, 2> spatial{};
    for (int axis = 0; axis < 2; ++axis) {
      const std::size_t in = cur[static_cast<std::size_t>(axis) + 1];
      const std::size_t padded = in + 2 * b.padding;
      if (padded < b.kernel || (padded - b.kernel) % b.stride != 0) {
        throw ConfigError(where + (axis == 0 ? "height " : "width ") + std::to_string(in) + " with kernel " +
                          std::to_string(b.kernel) + ", stride " + std::to_string(b.stride) + ", padding " +
                          std::to_string(b.padding) + " does not give a positive integer output size");
      }
      spatial[static_cast<std::size_t>(axis)] = (padded - b.kernel) / b.stride + 1;
    }
    g.conv = {b.out_channels, spatial[0], spatial[1]};
    g.output = g.conv;
    if (b.pool) {
      if (b.pool->kernel == 0 || b.pool->stride == 0) throw ConfigError(where + "pool kernel and stride must be positive");
      if (b.pool->kernel > spatial[0] || b.pool->kernel > spatial[1]) {
        throw ConfigError(where + "pooling window " + std::to_string(b.pool->kernel) + " exceeds spatial extent " +
                          std::to_string(spatial[0]) + "x" + std::to_string(spatial[1]));
      }
      g.output = {b.out_channels, (spatial[0] - b.pool->kernel) / b.pool->stride + 1,
                  (spatial[1] - b.pool->kernel) / b.pool->stride + 1};
    }
    cur = g.output;
    out.push_back(g);
  }
  return out;
}

void check_common(const ModelConfig& config) {
  if (config.blocks.empty()) throw ConfigError("model.blocks must contain at least one block");
  if (config.embedding_dim == 0) throw ConfigError("model.embedding_dim must be positive");
  if (config.task_count < 1) throw ConfigError("model.task_count must be >= 1");
  if (!(config.sigma >= 0.0 && config.sigma <= 1.0)) {
    throw ConfigError("model.sigma must be in [0,1], got " + std::to_string(config.sigma));
  }
}

std::size_t trunk_features(const std::vector<BlockGeometry>& geometry) {
  const auto& last = geometry.back().output;
  return last[0] * last[1] * last[2];
}

}  // namespace

std::vector<BlockGeometry> infer_geometry(const ModelConfig& config) { return walk_geometry(config, false); }

std::size_t trunk_output_features(const ModelConfig& config) { return trunk_features(infer_geometry(config)); }

void validate_model_config(const ModelConfig& config) {
  check_common(config);
  infer_geometry(config);
}

std::size_t count_parameters(const ModelConfig& config) {
  const auto geometry = walk_geometry(config, true);
  std::size_t total = 0;
  for (std::size_t i = 0; i < config.blocks.size(); ++i) {
    const auto& b = config.blocks[i];
    const std::size_t cin = geometry[i].input[0];
    total += b.out_channels * cin * b.kernel * b.kernel + b.out_channels;
    if (b.batchnorm) total += 2 * b.out_channels;
  }
  const std::size_t features = trunk_features(geometry);
  const std::size_t E = config.embedding_dim;
  total += static_cast<std::size_t>(config.task_count) * (E * features + E + 2 * E + 2);
  return total;
}

std::vector<ConvGeometry> routed_conv_geometry(const ModelConfig& config) {
  std::vector<ConvGeometry> out;
  for (const auto& b : config.blocks) out.push_back(ConvGeometry{0, b.kernel, b.kernel, b.batchnorm});
  if (!out.empty()) out.front().in_channels = config.input_shape[0];
  return out;
}

namespace {

std::vector<LayerSpec> layer_specs(const ModelConfig& config) {
  std::vector<LayerSpec> specs;
  for (std::size_t i = 0; i < config.blocks.size(); ++i) specs.push_back({block_layer_id(i), config.blocks[i].out_channels});
  return specs;
}

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig config) : config_(std::move(config)) {
  check_common(config_);
  geometry_ = infer_geometry(config_);
  if (config_.routed) {
    const auto specs = layer_specs(config_);
    routing_ = std::make_shared<const RoutingMap>(
        build_routing_map(specs, config_.task_count, config_.sigma, config_.seed, config_.routing));
  }
  allocate();
  initialize();
}

template <typename T>
Model<T>::Model(ModelConfig config, RoutingMap routing) : config_(std::move(config)) {
  check_common(config_);
  geometry_ = infer_geometry(config_);
  if (!config_.routed) throw ConfigError("routing map supplied for an unrouted model");
  if (routing.layers() != layer_specs(config_) || routing.task_count() != config_.task_count) {
    throw LoadError("routing map layers/tasks do not match the model (map has " +
                    std::to_string(routing.layers().size()) + " layers and " + std::to_string(routing.task_count()) +
                    " tasks)");
  }
  routing_ = std::make_shared<const RoutingMap>(std::move(routing));
  allocate();
  initialize();
}

template <typename T>
Model<T>::Model(ModelConfig config, std::shared_ptr<const RoutingMap> routing, Uninitialized)
    : config_(std::move(config)), routing_(std::move(routing)) {
  geometry_ = walk_geometry(config_, true);
  allocate();
}

template <typename T>
void Model<T>::allocate() {
  params_.clear();
  blocks_.clear();
  heads_.clear();
  running_mean_.clear();
  running_var_.clear();
  const auto add = [this](std::string name, Shape shape) {
    params_.emplace_back(std::move(name), Tensor<T>(std::move(shape)));
    return params_.size() - 1;
  };
  for (std::size_t i = 0; i < config_.blocks.size(); ++i) {
    const auto& b = config_.blocks[i];
    const std::string prefix = block_layer_id(i);
    const std::size_t cin = geometry_[i].input[0];
    BlockParams bp{};
    bp.conv_weight = add(prefix + ".conv.weight", {b.out_channels, cin, b.kernel, b.kernel});
    bp.conv_bias = add(prefix + ".conv.bias", {b.out_channels});
    if (b.batchnorm) {
      bp.bn_gamma = add(prefix + ".bn.weight", {b.out_channels});
      bp.bn_beta = add(prefix + ".bn.bias", {b.out_channels});
    }
    running_mean_.emplace_back(Shape{b.out_channels}, T{0});
    running_var_.emplace_back(Shape{b.out_channels}, T{1});
    blocks_.push_back(bp);
  }
  const std::size_t features = trunk_features(geometry_);
  const std::size_t E = config_.embedding_dim;
  for (int t = 0; t < config_.task_count; ++t) {
    const std::string prefix = "heads." + std::to_string(t);
    HeadParams hp{};
    hp.fc1_weight = add(prefix + ".fc1.weight", {E, features});
    hp.fc1_bias = add(prefix + ".fc1.bias", {E});
    hp.fc2_weight = add(prefix + ".fc2.weight", {2, E});
    hp.fc2_bias = add(prefix + ".fc2.bias", {2});
    heads_.push_back(hp);
  }
}

template <typename T>
void Model<T>::initialize() {
  Rng rng(derive_seed(config_.seed, "init"));
  const auto kaiming = [&rng](Tensor<T>& w, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  };
  for (auto& bp : blocks_) {
    auto& w = params_[bp.conv_weight].value;
    kaiming(w, w.dim(1) * w.dim(2) * w.dim(3));
    if (bp.bn_gamma) {
      for (auto& v : params_[*bp.bn_gamma].value.data()) v = T{1};
    }
  }
  for (auto& hp : heads_) {
    kaiming(params_[hp.fc1_weight].value, params_[hp.fc1_weight].value.dim(1));
    kaiming(params_[hp.fc2_weight].value, params_[hp.fc2_weight].value.dim(1));
  }
}

template <typename T>
Parameter<T>& Model<T>::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw UsageError("model has no parameter '" + name + "'");
}

template <typename T>
const Parameter<T>& Model<T>::parameter(const std::string& name) const {
  return const_cast<Model*>(this)->parameter(name);
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::trunk_parameters() {
  std::vector<Parameter<T>*> out;
  for (const auto& bp : blocks_) {
    out.push_back(&params_[bp.conv_weight]);
    out.push_back(&params_[bp.conv_bias]);
    if (bp.bn_gamma) {
      out.push_back(&params_[*bp.bn_gamma]);
      out.push_back(&params_[*bp.bn_beta]);
    }
  }
  return out;
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::head_parameters(int task) {
  if (task < 0 || task >= config_.task_count) {
    throw UsageError("task " + std::to_string(task) + " out of range [0," + std::to_string(config_.task_count) + ")");
  }
  const auto& hp = heads_[static_cast<std::size_t>(task)];
  return {&params_[hp.fc1_weight], &params_[hp.fc1_bias], &params_[hp.fc2_weight], &params_[hp.fc2_bias]};
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::active_parameters(int task) {
  auto out = trunk_parameters();
  const auto head = head_parameters(task);
  out.insert(out.end(), head.begin(), head.end());
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

template <typename T>
Var<T> Model<T>::forward(Tape<T>& tape, const Tensor<T>& batch, const TaskContext& ctx,
                         std::vector<Var<T>>* routed_outputs) {
  const int task = ctx.require_active_task();
  if (task >= config_.task_count) {
    throw UsageError("active task " + std::to_string(task) + " but model has " + std::to_string(config_.task_count) +
                     " heads");
  }
  const auto& in = config_.input_shape;
  if (batch.rank() != 4 || batch.dim(1) != in[0] || batch.dim(2) != in[1] || batch.dim(3) != in[2]) {
    throw ConfigError("model expects input [B," + std::to_string(in[0]) + "," + std::to_string(in[1]) + "," +
                      std::to_string(in[2]) + "], got " + shape_str(batch.shape()));
  }
  Var<T> x = tape.constant(batch);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = config_.blocks[i];
    const auto& bp = blocks_[i];
    x = ops::conv2d(x, tape.parameter(params_[bp.conv_weight]), tape.parameter(params_[bp.conv_bias]), b.stride,
                    b.padding);
    if (bp.bn_gamma) {
      x = ops::batchnorm2d(x, tape.parameter(params_[*bp.bn_gamma]), tape.parameter(params_[*bp.bn_beta]),
                           ops::BatchNormState<T>{running_mean_[i], running_var_[i]}, training_);
    }
    if (routing_) {
      x = apply_task_routing(x, routing_->mask(i, task));
      if (routed_outputs) routed_outputs->push_back(x);
    }
    x = ops::relu(x);
    if (b.pool) x = ops::maxpool2d(x, b.pool->kernel, b.pool->stride);
  }
  x = ops::flatten(x);
  const auto& hp = heads_[static_cast<std::size_t>(task)];
  x = ops::relu(ops::linear(x, tape.parameter(params_[hp.fc1_weight]), tape.parameter(params_[hp.fc1_bias])));
  return ops::linear(x, tape.parameter(params_[hp.fc2_weight]), tape.parameter(params_[hp.fc2_bias]));
}

template <typename T>
Tensor<T> Model<T>::predict(const Tensor<T>& batch, const TaskContext& ctx) {
  Tape<T> tape;
  return forward(tape, batch, ctx).value();
}

template <typename T>
std::vector<CheckpointRecord> Model<T>::state_records() const {
  const auto dtype = sizeof(T) == 4 ? CheckpointRecord::DType::f32 : CheckpointRecord::DType::f64;
  std::vector<CheckpointRecord> out;
  const auto push = [&](const std::string& name, const Tensor<T>& t) {
    out.push_back(CheckpointRecord{name, t.shape(), std::vector<double>(t.data().begin(), t.data().end()), dtype});
  };
  for (const auto& p : params_) push(p.name, p.value);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (!blocks_[i].bn_gamma) continue;
    push(block_layer_id(i) + ".bn.running_mean", running_mean_[i]);
    push(block_layer_id(i) + ".bn.running_var", running_var_[i]);
  }
  return out;
}

template <typename T>
void Model<T>::load_state(const std::vector<CheckpointRecord>& records) {
  std::size_t used = 0;
  const auto load = [&](const std::string& name, Tensor<T>& dst) {
    const CheckpointRecord* rec = nullptr;
    for (const auto& r : records) {
      if (r.name == name) rec = &r;
    }
    if (!rec) throw LoadError("checkpoint is missing tensor '" + name + "'");
    if (rec->shape != dst.shape()) {
      throw LoadError("checkpoint tensor '" + name + "' has shape " + shape_str(rec->shape) + ", model expects " +
                      shape_str(dst.shape()));
    }
    for (std::size_t k = 0; k < rec->values.size(); ++k) dst[k] = static_cast<T>(rec->values[k]);
    ++used;
  };
  for (auto& p : params_) load(p.name, p.value);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (!blocks_[i].bn_gamma) continue;
    load(block_layer_id(i) + ".bn.running_mean", running_mean_[i]);
    load(block_layer_id(i) + ".bn.running_var", running_var_[i]);
  }
  if (used != records.size()) {
    throw LoadError("checkpoint has " + std::to_string(records.size()) + " tensors, model uses " + std::to_string(used));
  }
  for (auto& p : params_) {
    p.velocity = Tensor<T>(p.value.shape());
    p.grad.reset();
  }
}

template <typename T>
std::uint64_t Model<T>::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix_bytes = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& r : state_records()) {
    mix_bytes(r.name.data(), r.name.size());
    mix_bytes(r.values.data(), r.values.size() * sizeof(double));
  }
  if (routing_) {
    const std::uint64_t rh = routing_->fingerprint();
    mix_bytes(&rh, sizeof(rh));
  }
  return h;
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> out(config_, routing_, typename Model<U>::Uninitialized{});
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.params_[i].value = params_[i].value.template cast<U>();
    out.params_[i].velocity = params_[i].velocity.template cast<U>();
  }
  for (std::size_t i = 0; i < running_mean_.size(); ++i) {
    out.running_mean_[i] = running_mean_[i].template cast<U>();
    out.running_var_[i] = running_var_[i].template cast<U>();
  }
  out.training_ = training_;
  return out;
}

template <typename T>
Model<T> extract_subnet(const Model<T>& model, int task) {
  const RoutingMap* map = model.routing();
  if (!map) throw UsageError("extract_subnet: model has no routing map");
  if (task < 0 || task >= model.task_count()) {
    throw UsageError("extract_subnet: task " + std::to_string(task) + " out of range [0," +
                     std::to_string(model.task_count()) + ")");
  }
  const auto& cfg = model.config_;
  std::vector<std::vector<std::size_t>> keep(cfg.blocks.size());
  for (std::size_t l = 0; l < cfg.blocks.size(); ++l) {
    const auto& bits = map->mask(l, task).bits;
    for (std::size_t c = 0; c < bits.size(); ++c) {
      if (bits.test(c)) keep[l].push_back(c);
    }
    if (keep[l].empty() && map->options().strict) {
      throw ExtractionError("task " + std::to_string(task) + " has an empty mask at layer '" + block_layer_id(l) + "'");
    }
  }

  ModelConfig sub = cfg;
  sub.routed = false;
  sub.task_count = 1;
  sub.source_task = cfg.source_task ? cfg.source_task : std::optional<int>(task);
  for (std::size_t l = 0; l < sub.blocks.size(); ++l) sub.blocks[l].out_channels = keep[l].size();
  Model<T> out(sub, nullptr, typename Model<T>::Uninitialized{});
  out.training_ = model.training_;

  for (std::size_t l = 0; l < cfg.blocks.size(); ++l) {
    const auto& src = model.blocks_[l];
    const auto& dst = out.blocks_[l];
    const auto& w = model.params_[src.conv_weight].value;
    auto& nw = out.params_[dst.conv_weight].value;
    const std::size_t cin = w.dim(1), kk = w.dim(2) * w.dim(3);
    std::vector<std::size_t> in_keep;
    if (l == 0) {
      for (std::size_t c = 0; c < cin; ++c) in_keep.push_back(c);
    } else {
      in_keep = keep[l - 1];
    }
    for (std::size_t o = 0; o < keep[l].size(); ++o) {
      for (std::size_t i = 0; i < in_keep.size(); ++i) {
        for (std::size_t k = 0; k < kk; ++k) {
          nw[(o * in_keep.size() + i) * kk + k] = w[(keep[l][o] * cin + in_keep[i]) * kk + k];
        }
      }
      out.params_[dst.conv_bias].value[o] = model.params_[src.conv_bias].value[keep[l][o]];
      if (src.bn_gamma) {
        out.params_[*dst.bn_gamma].value[o] = model.params_[*src.bn_gamma].value[keep[l][o]];
        out.params_[*dst.bn_beta].value[o] = model.params_[*src.bn_beta].value[keep[l][o]];
      }
      out.running_mean_[l][o] = model.running_mean_[l][keep[l][o]];
      out.running_var_[l][o] = model.running_var_[l][keep[l][o]];
    }
  }

  const auto& last = model.geometry_.back().output;
  const std::size_t plane = last[1] * last[2];
  const auto& src_head = model.heads_[static_cast<std::size_t>(task)];
  const auto& dst_head = out.heads_[0];
  const auto& fc1 = model.params_[src_head.fc1_weight].value;
  auto& nfc1 = out.params_[dst_head.fc1_weight].value;
  const std::size_t E = fc1.dim(0), N = fc1.dim(1), nN = nfc1.dim(1);
  const auto& last_keep = keep.back();
  for (std::size_t e = 0; e < E; ++e) {
    for (std::size_t c = 0; c < last_keep.size(); ++c) {
      for (std::size_t s = 0; s < plane; ++s) nfc1[e * nN + c * plane + s] = fc1[e * N + last_keep[c] * plane + s];
    }
  }
  out.params_[dst_head.fc1_bias].value = model.params_[src_head.fc1_bias].value;
  out.params_[dst_head.fc2_weight].value = model.params_[src_head.fc2_weight].value;
  out.params_[dst_head.fc2_bias].value = model.params_[src_head.fc2_bias].value;
  return out;
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;
template Model<float> extract_subnet(const Model<float>&, int);
template Model<double> extract_subnet(const Model<double>&, int);

}  // namespace taskroute
