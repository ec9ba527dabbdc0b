#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "taskroute/experiment.hpp"
#include "taskroute/parallel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace taskroute;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write " + path.string());
  out << text;
  if (!out) throw LoadError("write failed for " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw LoadError("cannot create output directory " + dir.string());
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw LoadError(what + " not found: " + path.string());
}

/// A run manifest is accepted as a config: its config snapshot is used.
ExperimentConfig read_config(const fs::path& path) {
  require_file(path, "config file");
  std::ifstream in(path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  if (doc.is_object() && doc.value("schema", "") == "taskroute-manifest") {
    if (!doc.contains("config")) throw ConfigError("manifest " + path.string() + " has no config section");
    return parse_experiment_config(doc.at("config"));
  }
  return load_experiment_config(path);
}

struct Overrides {
  std::optional<double> sigma;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
};

void apply(ExperimentConfig& cfg, const Overrides& o) {
  if (o.sigma) {
    if (!(*o.sigma >= 0.0 && *o.sigma <= 1.0)) throw ConfigError("--sigma must be in [0,1]");
    cfg.model.sigma = *o.sigma;
  }
  if (o.epochs) {
    if (*o.epochs < 0) throw ConfigError("--epochs must be >= 0");
    cfg.train.epochs = *o.epochs;
  }
  if (o.seed) {
    cfg.model.seed = *o.seed;
    cfg.train.seed = *o.seed;
  }
}

void write_run(const fs::path& dir, const ExperimentConfig& cfg, const ExperimentResult& result) {
  save_checkpoint(dir / "checkpoint.bin", make_checkpoint(result.model, cfg));
  if (const auto* map = result.model.routing()) save_routing_map(dir / "routing_map.txt", *map);
  write_text(dir / "metrics.json", metrics_to_json(result.metrics, to_json(cfg)).dump(2) + "\n");
}

int cmd_train(const fs::path& config_path, const fs::path& out, const Overrides& overrides, int threads) {
  const auto t0 = Clock::now();
  ExperimentConfig cfg = read_config(config_path);
  apply(cfg, overrides);
  ensure_dir(out);
  const auto t_data = Clock::now();
  const auto data = load_dataset(cfg.data);
  for (const auto& w : dataset_warnings(data.train)) std::cerr << "warning: " << w << "\n";
  const double data_s = seconds_since(t_data);
  const auto t_train = Clock::now();
  const auto result = run_experiment(cfg, data);
  const double train_s = seconds_since(t_train);
  if (const auto* map = result.model.routing()) {
    for (const auto& w : map->warnings()) std::cerr << "warning: " << w << "\n";
  }
  write_run(out, cfg, result);

  const json manifest = {
      {"schema", "taskroute-manifest"},
      {"version", 1},
      {"command", "train"},
      {"code_version", TASKROUTE_VERSION},
      {"config", to_json(cfg)},
      {"seeds", {{"model", cfg.model.seed}, {"train", cfg.train.seed}, {"data", cfg.data.split_seed}}},
      {"threads", threads},
      {"outputs",
       {{"checkpoint", (out / "checkpoint.bin").string()},
        {"routing_map", (out / "routing_map.txt").string()},
        {"metrics", (out / "metrics.json").string()}}},
      {"timings", {{"data_s", data_s}, {"train_eval_s", train_s}, {"total_s", seconds_since(t0)}}}};
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "macro_accuracy " << result.metrics.macro_accuracy << "\n";
  return 0;
}

Model<float> load_checkpoint_model(const fs::path& checkpoint, const std::string& routing_flag,
                                   ExperimentConfig* experiment) {
  require_file(checkpoint, "checkpoint");
  const auto ckpt = load_checkpoint(checkpoint);
  std::optional<RoutingMap> routing;
  fs::path map_path = routing_flag;
  if (map_path.empty()) {
    const auto sibling = checkpoint.parent_path() / "routing_map.txt";
    if (fs::is_regular_file(sibling)) map_path = sibling;
  } else {
    require_file(map_path, "routing map");
  }
  if (!map_path.empty()) routing = load_routing_map(map_path);
  auto loaded = load_model(ckpt, routing ? &*routing : nullptr);
  if (experiment) *experiment = loaded.experiment;
  return std::move(loaded.model);
}

int cmd_evaluate(const fs::path& checkpoint, const std::string& routing, const std::string& config_path,
                 const fs::path& out) {
  ExperimentConfig cfg;
  auto model = load_checkpoint_model(checkpoint, routing, &cfg);
  if (!config_path.empty()) cfg.data = read_config(config_path).data;
  const auto data = load_dataset(cfg.data);
  TaskContext ctx(model.task_count(), 0);
  const auto report = evaluate(model, data.test, ctx);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  write_text(out, metrics_to_json(report, to_json(cfg)).dump(2) + "\n");
  std::cout << "macro_accuracy " << report.macro_accuracy << "\n";
  return 0;
}

int cmd_analyze(const fs::path& map_path, const fs::path& out, const std::string& config_path) {
  require_file(map_path, "routing map");
  const auto map = load_routing_map(map_path);
  std::vector<ConvGeometry> geometry;
  if (!config_path.empty()) {
    auto cfg = read_config(config_path);
    ModelConfig mc = cfg.model;
    if (cfg.data.kind == DataKind::synthetic) mc.input_shape = cfg.data.synthetic.image_shape;
    else if (cfg.data.kind == DataKind::attributes) mc.input_shape = cfg.data.image_shape;
    geometry = routed_conv_geometry(mc);
  }
  const auto report = sharing_statistics(map, geometry);
  ensure_dir(out);
  const auto text = format_sharing_text(report);
  write_text(out / "sharing.txt", text);
  write_text(out / "sharing_layers.csv", format_sharing_layers_csv(report));
  write_text(out / "sharing_pairs.csv", format_sharing_pairs_csv(report));
  std::cout << text;
  return 0;
}

int cmd_extract(const fs::path& checkpoint, const std::string& routing, int task, const fs::path& out) {
  ExperimentConfig cfg;
  auto model = load_checkpoint_model(checkpoint, routing, &cfg);
  if (task < 0 || task >= model.task_count()) {
    throw UsageError("--task " + std::to_string(task) + " is out of range [0," + std::to_string(model.task_count()) +
                     ")");
  }
  const auto subnet = extract_subnet(model, task);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  save_checkpoint(out, make_checkpoint(subnet, cfg));
  std::cout << "parameters " << subnet.parameter_count() << " of " << model.parameter_count() << "\n";
  return 0;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& flag) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    try {
      if constexpr (std::is_same_v<T, double>) out.push_back(std::stod(item, &used));
      else out.push_back(std::stoull(item, &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw UsageError(flag + ": cannot parse '" + item + "'");
  }
  if (out.empty()) throw UsageError(flag + " is empty");
  return out;
}

std::string run_dir_name(double sigma, std::uint64_t seed) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "sigma_%.4g_seed_%llu", sigma, static_cast<unsigned long long>(seed));
  return buf;
}

int cmd_sweep(const fs::path& config_path, const std::string& sigmas_text, const std::string& seeds_text,
              const fs::path& out, const Overrides& overrides) {
  ExperimentConfig cfg = read_config(config_path);
  apply(cfg, overrides);
  const auto sigmas = parse_list<double>(sigmas_text, "--sigmas");
  const auto seeds = parse_list<std::uint64_t>(seeds_text, "--seeds");
  ensure_dir(out);
  const auto report = run_sigma_sweep(cfg, sigmas, seeds, [&](const ExperimentConfig& run, const ExperimentResult& r) {
    const auto dir = out / "runs" / run_dir_name(run.model.sigma, run.model.seed);
    ensure_dir(dir);
    write_run(dir, run, r);
    std::cout << "sigma " << run.model.sigma << " seed " << run.model.seed << " macro_accuracy "
              << r.metrics.macro_accuracy << std::endl;
  });
  write_text(out / "sweep.csv", sweep_csv(report));
  write_text(out / "sweep_summary.csv", sweep_summary_csv(report));
  return 0;
}

int run_guarded(const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const LoadError& e) {
    std::cerr << "load error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-routed multi-task CNN training and analysis"};
  app.require_subcommand(1);
  app.set_version_flag("--version", TASKROUTE_VERSION);
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads for tensor ops")->check(CLI::PositiveNumber);

  std::string config, out, checkpoint, routing, map, sigmas, seeds, eval_config;
  int task = -1;
  Overrides ov;

  auto* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("--config", config, "Experiment config (JSON) or run manifest")->required();
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--sigma", ov.sigma, "Sharing ratio in [0,1]");
  train->add_option("--epochs", ov.epochs, "Training epochs");
  train->add_option("--seed", ov.seed, "Model and training seed");
  train->add_option("--threads", threads, "Worker threads for tensor ops")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint on its test split");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--routing", routing, "Routing map (default: routing_map.txt next to the checkpoint)");
  eval->add_option("--config", eval_config, "Config whose data section replaces the checkpoint's");
  eval->add_option("--out", out, "Metrics JSON path")->required();
  eval->add_option("--threads", threads, "Worker threads for tensor ops")->check(CLI::PositiveNumber);

  auto* analyze = app.add_subcommand("analyze", "Sharing statistics of a routing map");
  analyze->add_option("--map", map, "Routing map file")->required();
  analyze->add_option("--out", out, "Output directory")->required();
  analyze->add_option("--config", eval_config, "Config for parameter accounting");

  auto* extract = app.add_subcommand("extract", "Write the standalone subnet of one task");
  extract->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  extract->add_option("--routing", routing, "Routing map (default: routing_map.txt next to the checkpoint)");
  extract->add_option("--task", task, "Task id")->required();
  extract->add_option("--out", out, "Output checkpoint path")->required();

  auto* sweep = app.add_subcommand("sweep", "Train and evaluate over a grid of sharing ratios and seeds");
  sweep->add_option("--config", config, "Experiment config (JSON)")->required();
  sweep->add_option("--sigmas", sigmas, "Comma-separated sharing ratios")->required();
  sweep->add_option("--seeds", seeds, "Comma-separated seeds")->required();
  sweep->add_option("--out", out, "Output directory")->required();
  sweep->add_option("--epochs", ov.epochs, "Training epochs");
  sweep->add_option("--threads", threads, "Worker threads for tensor ops")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  set_num_threads(threads);

  if (*train) return run_guarded([&] { return cmd_train(config, out, ov, threads); });
  if (*eval) return run_guarded([&] { return cmd_evaluate(checkpoint, routing, eval_config, out); });
  if (*analyze) return run_guarded([&] { return cmd_analyze(map, out, eval_config); });
  if (*extract) return run_guarded([&] { return cmd_extract(checkpoint, routing, task, out); });
  if (*sweep) return run_guarded([&] { return cmd_sweep(config, sigmas, seeds, out, ov); });
  return 2;
}
