#include "taskroute/experiment.hpp"

#include <charconv>
#include <cmath>
#include <numeric>

namespace taskroute {

using nlohmann::json;

namespace {

std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

TaskDataset from_idx(const IdxImages& images, const LabelMatrix& labels, std::vector<std::string> names,
                     std::size_t limit, Split split) {
  const std::size_t n = limit ? std::min(limit, images.count) : images.count;
  TaskDataset out;
  out.images = Tensor<float>({n, 1, images.rows, images.cols});
  const std::size_t px = images.rows * images.cols;
  std::copy_n(images.pixels.begin(), n * px, out.images.data().begin());
  out.labels = LabelMatrix(n, labels.cols());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < labels.cols(); ++t) out.labels.set(i, t, labels.at(i, t));
  }
  out.task_names = std::move(names);
  out.split = split;
  return out;
}

std::vector<std::string> class_names(int num_classes) {
  std::vector<std::string> names;
  for (int k = 0; k < num_classes; ++k) names.push_back("class" + std::to_string(k));
  return names;
}

json nan_to_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double null_to_nan(const json& v) { return v.is_null() ? std::nan("") : v.get<double>(); }

}  // namespace

DatasetSplits load_dataset(const DataConfig& config) {
  DatasetSplits splits;
  switch (config.kind) {
    case DataKind::synthetic: {
      splits = split_dataset(generate_synthetic(config.synthetic), config.test_fraction, config.split_seed);
      break;
    }
    case DataKind::idx: {
      const auto train = load_idx(config.train_images, config.train_labels);
      const auto test = load_idx(config.test_images, config.test_labels);
      if (train.images.rows != test.images.rows || train.images.cols != test.images.cols) {
        throw DataError("train and test IDX images differ in size");
      }
      const auto names = class_names(config.num_classes);
      splits.train = from_idx(train.images, make_binary_tasks(train.labels, config.num_classes), names,
                              config.train_limit, Split::train);
      splits.test = from_idx(test.images, make_binary_tasks(test.labels, config.num_classes), names,
                             config.test_limit, Split::test);
      splits.train_indices.resize(splits.train.size());
      std::iota(splits.train_indices.begin(), splits.train_indices.end(), std::size_t{0});
      splits.test_indices.resize(splits.test.size());
      std::iota(splits.test_indices.begin(), splits.test_indices.end(), std::size_t{0});
      break;
    }
    case DataKind::attributes: {
      auto table = load_attribute_table(config.table);
      TaskDataset all;
      if (config.images.empty()) {
        all = noise_dataset(table.labels, table.names, config.image_shape, config.split_seed);
      } else {
        const auto images = read_idx_images(config.images);
        if (images.count != table.labels.rows()) {
          throw DataError("attribute table has " + std::to_string(table.labels.rows()) + " rows but " +
                          config.images + " holds " + std::to_string(images.count) + " images");
        }
        all = from_idx(images, table.labels, table.names, 0, Split::train);
      }
      splits = split_dataset(all, config.test_fraction, config.split_seed);
      break;
    }
  }
  if (config.normalize) normalize_by_mean(splits);
  return splits;
}

ModelConfig resolve_model_config(const ModelConfig& model, const TaskDataset& data) {
  ModelConfig out = model;
  out.input_shape = data.image_shape();
  if (out.task_count == 0) {
    out.task_count = data.task_count();
  } else if (out.task_count != data.task_count()) {
    throw ConfigError("model.task_count is " + std::to_string(out.task_count) + " but the data has " +
                      std::to_string(data.task_count()) + " tasks");
  }
  return out;
}

ExperimentResult run_experiment(const ExperimentConfig& config, const DatasetSplits& data) {
  validate_train_config(config.train);
  Model<float> model(resolve_model_config(config.model, data.train));
  auto log = fit(model, data.train, config.train);
  TaskContext ctx(model.task_count(), 0);
  auto metrics = evaluate(model, data.test, ctx);
  metrics.epoch_log = std::move(log);
  return {std::move(model), std::move(metrics)};
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  return run_experiment(config, load_dataset(config.data));
}

SweepRow sweep_row(double sigma, std::uint64_t seed, const MetricsReport& metrics) {
  SweepRow row;
  row.sigma = sigma;
  row.seed = seed;
  row.macro_accuracy = metrics.macro_accuracy;
  row.macro_precision = metrics.macro_precision;
  row.macro_recall = metrics.macro_recall;
  for (const auto& t : metrics.per_task) row.task_accuracy.push_back(t.accuracy);
  return row;
}

std::vector<SweepSummary> summarize_sweep(std::span<const SweepRow> rows, std::span<const double> sigmas) {
  std::vector<SweepSummary> out;
  for (double s : sigmas) {
    SweepSummary sum;
    sum.sigma = s;
    std::vector<const SweepRow*> sel;
    for (const auto& r : rows) {
      if (r.sigma == s) sel.push_back(&r);
    }
    sum.runs = sel.size();
    const auto stat = [&](auto field, double& mean, double& sd) {
      mean = 0.0;
      sd = 0.0;
      if (sel.empty()) return;
      for (const auto* r : sel) mean += r->*field;
      mean /= static_cast<double>(sel.size());
      if (sel.size() < 2) return;
      for (const auto* r : sel) sd += (r->*field - mean) * (r->*field - mean);
      sd = std::sqrt(sd / static_cast<double>(sel.size() - 1));
    };
    stat(&SweepRow::macro_accuracy, sum.mean_accuracy, sum.std_accuracy);
    stat(&SweepRow::macro_precision, sum.mean_precision, sum.std_precision);
    stat(&SweepRow::macro_recall, sum.mean_recall, sum.std_recall);
    out.push_back(sum);
  }
  return out;
}

SweepReport run_sigma_sweep(const ExperimentConfig& base, std::span<const double> sigmas,
                            std::span<const std::uint64_t> seeds, const SweepCallback& on_run) {
  if (sigmas.empty() || seeds.empty()) throw ConfigError("sweep needs at least one sigma and one seed");
  for (double s : sigmas) {
    if (!(s >= 0.0 && s <= 1.0)) throw ConfigError("sweep sigma " + fmt_double(s) + " must be in [0,1]");
  }
  const auto data = load_dataset(base.data);
  SweepReport report;
  report.task_names = data.train.task_names;
  for (double s : sigmas) {
    for (auto seed : seeds) {
      ExperimentConfig cfg = base;
      cfg.model.sigma = s;
      cfg.model.seed = seed;
      cfg.train.seed = seed;
      auto result = run_experiment(cfg, data);
      report.rows.push_back(sweep_row(s, seed, result.metrics));
      if (on_run) on_run(cfg, result);
    }
  }
  report.summary = summarize_sweep(report.rows, sigmas);
  return report;
}

std::string sweep_csv(const SweepReport& report) {
  std::string out = "sigma,seed,macro_accuracy,macro_precision,macro_recall";
  for (const auto& name : report.task_names) out += "," + name + "_accuracy";
  out += "\n";
  for (const auto& r : report.rows) {
    out += fmt_double(r.sigma) + "," + std::to_string(r.seed) + "," + fmt_double(r.macro_accuracy) + "," +
           fmt_double(r.macro_precision) + "," + fmt_double(r.macro_recall);
    for (double a : r.task_accuracy) out += "," + fmt_double(a);
    out += "\n";
  }
  return out;
}

std::string sweep_summary_csv(const SweepReport& report) {
  std::string out =
      "sigma,runs,mean_accuracy,std_accuracy,mean_precision,std_precision,mean_recall,std_recall\n";
  for (const auto& s : report.summary) {
    out += fmt_double(s.sigma) + "," + std::to_string(s.runs) + "," + fmt_double(s.mean_accuracy) + "," +
           fmt_double(s.std_accuracy) + "," + fmt_double(s.mean_precision) + "," + fmt_double(s.std_precision) +
           "," + fmt_double(s.mean_recall) + "," + fmt_double(s.std_recall) + "\n";
  }
  return out;
}

json metrics_to_json(const MetricsReport& report, const json& config_echo) {
  json per_task = json::array();
  for (const auto& t : report.per_task) {
    per_task.push_back({{"task", t.task},
                        {"name", t.name},
                        {"accuracy", t.accuracy},
                        {"precision", t.precision},
                        {"recall", t.recall},
                        {"tp", t.confusion.tp},
                        {"fp", t.confusion.fp},
                        {"tn", t.confusion.tn},
                        {"fn", t.confusion.fn}});
  }
  json epochs = json::array();
  for (const auto& e : report.epoch_log) {
    json task_loss = json::array();
    for (double l : e.task_loss) task_loss.push_back(nan_to_null(l));
    epochs.push_back({{"epoch", e.epoch},
                      {"mean_loss", nan_to_null(e.mean_loss)},
                      {"batches", e.batches},
                      {"task_loss", task_loss},
                      {"task_batches", e.task_batches}});
  }
  return {{"schema", "taskroute-metrics"},
          {"version", 1},
          {"config", config_echo},
          {"decision_rule", report.decision_rule},
          {"per_task", per_task},
          {"macro", {{"accuracy", report.macro_accuracy},
                     {"precision", report.macro_precision},
                     {"recall", report.macro_recall}}},
          {"epochs", epochs}};
}

MetricsReport metrics_from_json(const json& doc) {
  try {
    MetricsReport r;
    r.decision_rule = doc.at("decision_rule").get<std::string>();
    for (const auto& t : doc.at("per_task")) {
      TaskMetrics m;
      m.task = t.at("task").get<int>();
      m.name = t.at("name").get<std::string>();
      m.accuracy = t.at("accuracy").get<double>();
      m.precision = t.at("precision").get<double>();
      m.recall = t.at("recall").get<double>();
      m.confusion = {t.at("tp").get<std::uint64_t>(), t.at("fp").get<std::uint64_t>(),
                     t.at("tn").get<std::uint64_t>(), t.at("fn").get<std::uint64_t>()};
      r.per_task.push_back(std::move(m));
    }
    const auto& macro = doc.at("macro");
    r.macro_accuracy = macro.at("accuracy").get<double>();
    r.macro_precision = macro.at("precision").get<double>();
    r.macro_recall = macro.at("recall").get<double>();
    for (const auto& e : doc.at("epochs")) {
      EpochSummary s;
      s.epoch = e.at("epoch").get<int>();
      s.mean_loss = null_to_nan(e.at("mean_loss"));
      s.batches = e.at("batches").get<std::size_t>();
      for (const auto& l : e.at("task_loss")) s.task_loss.push_back(null_to_nan(l));
      s.task_batches = e.at("task_batches").get<std::vector<std::size_t>>();
      r.epoch_log.push_back(std::move(s));
    }
    return r;
  } catch (const json::exception& e) {
    throw LoadError(std::string("malformed metrics document: ") + e.what());
  }
}

Checkpoint make_checkpoint(const Model<float>& model, const ExperimentConfig& experiment) {
  Checkpoint ckpt;
  const json meta = {{"format", "taskroute-checkpoint"},
                     {"experiment", to_json(experiment)},
                     {"model", to_json(model.config())},
                     {"code_version", TASKROUTE_VERSION}};
  ckpt.metadata = meta.dump(2);
  ckpt.records = model.state_records();
  return ckpt;
}

LoadedModel load_model(const Checkpoint& checkpoint, const RoutingMap* routing) {
  json meta;
  try {
    meta = json::parse(checkpoint.metadata);
  } catch (const json::parse_error& e) {
    throw LoadError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  if (!meta.is_object() || !meta.contains("experiment") || !meta.contains("model")) {
    throw LoadError("checkpoint metadata lacks the experiment or model section");
  }
  ExperimentConfig experiment;
  ModelConfig mc;
  try {
    experiment = parse_experiment_config(meta.at("experiment"));
    mc = parse_model_config(meta.at("model"));
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint metadata: ") + e.what());
  }
  if (mc.task_count < 1) throw LoadError("checkpoint metadata: model.task_count must be >= 1");
  Model<float> model = (mc.routed && routing) ? Model<float>(mc, *routing) : Model<float>(mc);
  model.load_state(checkpoint.records);
  return {std::move(experiment), std::move(model)};
}

}  // namespace taskroute
