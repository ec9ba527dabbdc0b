#include "taskroute/config.hpp"

#include <fstream>
#include <set>

namespace taskroute {

using nlohmann::json;

std::string to_string(DataKind kind) {
  switch (kind) {
    case DataKind::synthetic: return "synthetic";
    case DataKind::idx: return "idx";
    case DataKind::attributes: return "attributes";
  }
  return "synthetic";
}

namespace {

// Typed access to one JSON object; remembers which keys were read so that
// unknown keys can be rejected.
class Fields {
 public:
  Fields(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return obj_.contains(key) && !obj_.at(key).is_null();
  }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return obj_.at(key);
  }

  std::string name(const std::string& key) const { return path_ + "." + key; }

  double number(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_number()) throw ConfigError(name(key) + " must be a number");
    return v.get<double>();
  }

  std::uint64_t uint(const std::string& key, std::uint64_t fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(name(key) + " must be a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }

  int integer(const std::string& key, int fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_number_integer()) throw ConfigError(name(key) + " must be an integer");
    return v.get<int>();
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_boolean()) throw ConfigError(name(key) + " must be true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& key, const std::string& fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_string()) throw ConfigError(name(key) + " must be a string");
    return v.get<std::string>();
  }

  std::array<std::size_t, 3> shape3(const std::string& key, std::array<std::size_t, 3> fallback) {
    if (!has(key)) return fallback;
    const auto& v = obj_.at(key);
    if (!v.is_array() || v.size() != 3) throw ConfigError(name(key) + " must be an array [C, H, W]");
    std::array<std::size_t, 3> out{};
    for (std::size_t i = 0; i < 3; ++i) {
      if (!v[i].is_number_unsigned() || v[i].get<std::uint64_t>() == 0) {
        throw ConfigError(name(key) + " entries must be positive integers");
      }
      out[i] = v[i].get<std::size_t>();
    }
    return out;
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!used_.count(key)) throw ConfigError("unknown field " + name(key));
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> used_;
};

template <typename Fn>
auto rethrow_as(const std::string& field, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(field + ": " + e.what());
  }
}

BlockConfig parse_block(const json& doc, const std::string& path) {
  Fields f(doc, path);
  BlockConfig b;
  if (!f.has("out_channels")) throw ConfigError(f.name("out_channels") + " is required");
  b.out_channels = f.uint("out_channels", 0);
  if (b.out_channels == 0) throw ConfigError(f.name("out_channels") + " must be positive");
  b.kernel = f.uint("kernel", b.kernel);
  b.stride = f.uint("stride", b.stride);
  b.padding = f.uint("padding", b.padding);
  b.batchnorm = f.boolean("batchnorm", b.batchnorm);
  if (f.has("pool")) {
    const auto& p = f.raw("pool");
    if (p.is_boolean()) {
      if (!p.get<bool>()) b.pool.reset();
    } else {
      Fields pf(p, f.name("pool"));
      PoolConfig pc;
      pc.kernel = pf.uint("kernel", pc.kernel);
      pc.stride = pf.uint("stride", pc.stride);
      pf.finish();
      b.pool = pc;
    }
  } else if (doc.contains("pool")) {
    b.pool.reset();  // explicit null
  }
  f.finish();
  return b;
}

}  // namespace

ModelConfig parse_model_config(const json& doc, const std::string& path) {
  Fields f(doc, path);
  ModelConfig m;
  m.blocks = ModelConfig::desk_default().blocks;
  m.input_shape = f.shape3("input_shape", m.input_shape);
  if (f.has("blocks")) {
    const auto& blocks = f.raw("blocks");
    if (!blocks.is_array() || blocks.empty()) throw ConfigError(f.name("blocks") + " must be a non-empty array");
    m.blocks.clear();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      m.blocks.push_back(parse_block(blocks[i], f.name("blocks") + "[" + std::to_string(i) + "]"));
    }
  }
  m.embedding_dim = f.uint("embedding_dim", m.embedding_dim);
  if (m.embedding_dim == 0) throw ConfigError(f.name("embedding_dim") + " must be positive");
  m.task_count = f.integer("task_count", 0);
  m.sigma = f.number("sigma", m.sigma);
  if (!(m.sigma >= 0.0 && m.sigma <= 1.0)) {
    throw ConfigError(f.name("sigma") + " must be in [0,1], got " + f.raw("sigma").dump());
  }
  m.seed = f.uint("seed", m.seed);
  m.routing.mode = rethrow_as(f.name("routing_mode"), [&] { return parse_mask_mode(f.string("routing_mode", "partition")); });
  m.routing.strict = f.boolean("strict", false);
  m.routed = f.boolean("routed", true);
  if (f.has("source_task")) m.source_task = f.integer("source_task", 0);
  f.finish();
  return m;
}

ExperimentConfig parse_experiment_config(const json& doc) {
  Fields root(doc, "config");
  ExperimentConfig c;
  if (root.has("model")) c.model = parse_model_config(root.raw("model"), "model");
  else {
    c.model.blocks = ModelConfig::desk_default().blocks;
    c.model.task_count = 0;
  }

  if (root.has("train")) {
    Fields f(root.raw("train"), "train");
    c.train.lr = f.number("lr", c.train.lr);
    if (!(c.train.lr > 0.0)) throw ConfigError("train.lr must be > 0");
    c.train.momentum = f.number("momentum", c.train.momentum);
    if (!(c.train.momentum >= 0.0 && c.train.momentum < 1.0)) throw ConfigError("train.momentum must be in [0,1)");
    c.train.batch_size = f.uint("batch_size", c.train.batch_size);
    if (c.train.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    c.train.epochs = f.integer("epochs", c.train.epochs);
    if (c.train.epochs < 0) throw ConfigError("train.epochs must be >= 0");
    c.train.task_sampling =
        rethrow_as("train.task_sampling", [&] { return parse_task_sampling(f.string("task_sampling", "uniform_iid")); });
    c.train.seed = f.uint("seed", c.train.seed);
    c.train.augment_flip = f.boolean("augment_flip", false);
    f.finish();
  }

  if (root.has("data")) {
    Fields f(root.raw("data"), "data");
    auto& d = c.data;
    const std::string kind = f.string("kind", "synthetic");
    if (kind == "synthetic") {
      d.kind = DataKind::synthetic;
    } else if (kind == "idx") {
      d.kind = DataKind::idx;
    } else if (kind == "attributes") {
      d.kind = DataKind::attributes;
    } else {
      throw ConfigError("data.kind must be synthetic, idx or attributes, got '" + kind + "'");
    }
    d.test_fraction = f.number("test_fraction", d.test_fraction);
    if (!(d.test_fraction > 0.0 && d.test_fraction < 1.0)) throw ConfigError("data.test_fraction must be in (0,1)");
    d.split_seed = f.uint("seed", 0);
    d.normalize = f.boolean("normalize", true);
    if (d.kind == DataKind::synthetic) {
      auto& s = d.synthetic;
      s.seed = d.split_seed;
      s.structure = rethrow_as("data.structure",
                               [&] { return parse_synthetic_structure(f.string("structure", "independent")); });
      s.task_count = f.integer("tasks", s.task_count);
      if (s.task_count < 1) throw ConfigError("data.tasks must be >= 1");
      s.samples = f.uint("samples", s.samples);
      if (s.samples < 4) throw ConfigError("data.samples must be >= 4");
      s.image_shape = f.shape3("image_shape", s.image_shape);
      s.rho = f.number("rho", s.rho);
      if (!(s.rho >= -1.0 && s.rho <= 1.0)) throw ConfigError("data.rho must be in [-1,1]");
      s.noise = f.number("noise", s.noise);
      if (!(s.noise >= 0.0)) throw ConfigError("data.noise must be >= 0");
      s.amplitude = f.number("amplitude", s.amplitude);
    } else if (d.kind == DataKind::idx) {
      const std::pair<const char*, std::string*> files[] = {{"train_images", &d.train_images},
                                                            {"train_labels", &d.train_labels},
                                                            {"test_images", &d.test_images},
                                                            {"test_labels", &d.test_labels}};
      for (const auto& [key, dst] : files) {
        *dst = f.string(key, "");
        if (dst->empty()) throw ConfigError(std::string("data.") + key + " is required for idx data");
      }
      d.num_classes = f.integer("num_classes", d.num_classes);
      if (d.num_classes < 2) throw ConfigError("data.num_classes must be >= 2");
      d.train_limit = f.uint("train_limit", 0);
      d.test_limit = f.uint("test_limit", 0);
    } else {
      d.table = f.string("table", "");
      if (d.table.empty()) throw ConfigError("data.table is required for attribute data");
      d.images = f.string("images", "");
      d.image_shape = f.shape3("image_shape", d.image_shape);
    }
    f.finish();
  }
  root.finish();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  ExperimentConfig c = parse_experiment_config(doc);
  const auto base = path.parent_path();
  const auto resolve = [&base](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  for (auto* p : {&c.data.train_images, &c.data.train_labels, &c.data.test_images, &c.data.test_labels,
                  &c.data.table, &c.data.images}) {
    resolve(*p);
  }
  return c;
}

json to_json(const ModelConfig& m) {
  json blocks = json::array();
  for (const auto& b : m.blocks) {
    json jb = {{"out_channels", b.out_channels}, {"kernel", b.kernel},       {"stride", b.stride},
               {"padding", b.padding},           {"batchnorm", b.batchnorm}};
    jb["pool"] = b.pool ? json{{"kernel", b.pool->kernel}, {"stride", b.pool->stride}} : json(false);
    blocks.push_back(jb);
  }
  json out = {{"input_shape", m.input_shape},
              {"blocks", blocks},
              {"embedding_dim", m.embedding_dim},
              {"task_count", m.task_count},
              {"sigma", m.sigma},
              {"seed", m.seed},
              {"routing_mode", to_string(m.routing.mode)},
              {"strict", m.routing.strict},
              {"routed", m.routed}};
  if (m.source_task) out["source_task"] = *m.source_task;
  return out;
}

json to_json(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"momentum", t.momentum},
          {"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"task_sampling", to_string(t.task_sampling)},
          {"seed", t.seed},
          {"augment_flip", t.augment_flip}};
}

json to_json(const DataConfig& d) {
  json out = {{"kind", to_string(d.kind)},
              {"test_fraction", d.test_fraction},
              {"seed", d.split_seed},
              {"normalize", d.normalize}};
  switch (d.kind) {
    case DataKind::synthetic:
      out["structure"] = to_string(d.synthetic.structure);
      out["tasks"] = d.synthetic.task_count;
      out["samples"] = d.synthetic.samples;
      out["image_shape"] = d.synthetic.image_shape;
      out["rho"] = d.synthetic.rho;
      out["noise"] = d.synthetic.noise;
      out["amplitude"] = d.synthetic.amplitude;
      break;
    case DataKind::idx:
      out["train_images"] = d.train_images;
      out["train_labels"] = d.train_labels;
      out["test_images"] = d.test_images;
      out["test_labels"] = d.test_labels;
      out["num_classes"] = d.num_classes;
      out["train_limit"] = d.train_limit;
      out["test_limit"] = d.test_limit;
      break;
    case DataKind::attributes:
      out["table"] = d.table;
      if (!d.images.empty()) out["images"] = d.images;
      out["image_shape"] = d.image_shape;
      break;
  }
  return out;
}

json to_json(const ExperimentConfig& c) {
  return {{"model", to_json(c.model)}, {"train", to_json(c.train)}, {"data", to_json(c.data)}};
}

}  // namespace taskroute
