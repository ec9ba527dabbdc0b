#include "taskroute/training.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <type_traits>

#include "taskroute/optim.hpp"

namespace taskroute {

void validate_train_config(const TrainConfig& c) {
  if (!(c.lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("train.momentum must be in [0,1)");
  if (c.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (c.epochs < 0) throw ConfigError("train.epochs must be >= 0");
}

int sample_task(TaskContext& ctx) {
  const int T = ctx.task_count();
  if (T == 1) return 0;
  if (ctx.sampling() == TaskSampling::uniform_iid) {
    return static_cast<int>(ctx.sampler().uniform_below(static_cast<std::uint64_t>(T)));
  }
  auto& cycle = ctx.cycle();
  auto& pos = ctx.cycle_pos();
  if (cycle.empty() || pos >= cycle.size()) {
    cycle.resize(static_cast<std::size_t>(T));
    std::iota(cycle.begin(), cycle.end(), 0);
    ctx.sampler().shuffle(cycle.begin(), cycle.end());
    pos = 0;
  }
  return cycle[pos++];
}

TaskContext make_training_context(int task_count, const TrainConfig& config) {
  return TaskContext(task_count, derive_seed(config.seed, "task-sampler"), config.task_sampling);
}

template <typename T>
EpochSummary train_epoch(Model<T>& model, const TaskDataset& data, const TrainConfig& config, TaskContext& ctx,
                         int epoch) {
  validate_train_config(config);
  if (data.size() == 0) throw UsageError("train_epoch: empty dataset");
  const int T_tasks = model.task_count();
  model.set_training(true);
  Rng order_rng(derive_seed(config.seed, "data-order", static_cast<std::uint64_t>(epoch)));
  Rng flip_rng(derive_seed(config.seed, "flip", static_cast<std::uint64_t>(epoch)));
  const auto order = order_rng.permutation(data.size());

  EpochSummary summary;
  summary.epoch = epoch;
  summary.task_loss.assign(static_cast<std::size_t>(T_tasks), 0.0);
  summary.task_batches.assign(static_cast<std::size_t>(T_tasks), 0);
  double total = 0.0;
  for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
    const std::size_t end = std::min(order.size(), start + config.batch_size);
    if (end - start < 2) break;
    const std::span<const std::size_t> idx(order.data() + start, end - start);
    const int task = sample_task(ctx);
    ctx.set_active_task(task);
    const int column = dataset_column(model.config(), data, task);
    const Tensor<float> images = gather_images(data, idx, config.augment_flip ? &flip_rng : nullptr);
    const std::vector<T> targets = gather_labels<T>(data, idx, column);

    Tape<T> tape;
    Var<T> logits;
    if constexpr (std::is_same_v<T, float>) {
      logits = model.forward(tape, images, ctx);
    } else {
      logits = model.forward(tape, images.template cast<T>(), ctx);
    }
    const Var<T> loss = ops::bce_with_logits(logits, std::span<const T>(targets));
    tape.backward(loss);
    auto params = model.active_parameters(task);
    sgd_momentum_step<T>(params, static_cast<T>(config.lr), static_cast<T>(config.momentum));

    const double l = static_cast<double>(loss.value().item());
    total += l;
    summary.task_loss[static_cast<std::size_t>(task)] += l;
    ++summary.task_batches[static_cast<std::size_t>(task)];
    ++summary.batches;
  }
  summary.mean_loss = summary.batches ? total / static_cast<double>(summary.batches) : 0.0;
  for (std::size_t t = 0; t < summary.task_loss.size(); ++t) {
    summary.task_loss[t] = summary.task_batches[t]
                               ? summary.task_loss[t] / static_cast<double>(summary.task_batches[t])
                               : std::numeric_limits<double>::quiet_NaN();
  }
  return summary;
}

template <typename T>
std::vector<EpochSummary> fit(Model<T>& model, const TaskDataset& data, const TrainConfig& config) {
  validate_train_config(config);
  TaskContext ctx = make_training_context(model.task_count(), config);
  std::vector<EpochSummary> log;
  for (int e = 1; e <= config.epochs; ++e) log.push_back(train_epoch(model, data, config, ctx, e));
  return log;
}

double Confusion::accuracy() const {
  return total() == 0 ? 0.0 : static_cast<double>(tp + tn) / static_cast<double>(total());
}

double Confusion::precision() const {
  return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
}

double Confusion::recall() const {
  return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}

MetricsReport build_report(const std::vector<Confusion>& confusions, std::span<const std::string> names,
                           std::span<const int> task_ids) {
  MetricsReport r;
  for (std::size_t i = 0; i < confusions.size(); ++i) {
    TaskMetrics m;
    m.task = task_ids.empty() ? static_cast<int>(i) : task_ids[i];
    m.name = i < names.size() ? names[i] : "task" + std::to_string(m.task);
    m.confusion = confusions[i];
    m.accuracy = confusions[i].accuracy();
    m.precision = confusions[i].precision();
    m.recall = confusions[i].recall();
    r.macro_accuracy += m.accuracy;
    r.macro_precision += m.precision;
    r.macro_recall += m.recall;
    r.per_task.push_back(std::move(m));
  }
  if (!confusions.empty()) {
    const auto n = static_cast<double>(confusions.size());
    r.macro_accuracy /= n;
    r.macro_precision /= n;
    r.macro_recall /= n;
  }
  return r;
}

int dataset_column(const ModelConfig& config, const TaskDataset& data, int task) {
  int column = task;
  if (config.source_task && config.task_count == 1) column = *config.source_task + task;
  if (column < 0 || column >= data.task_count()) {
    throw DataError("dataset has no labels for task " + std::to_string(column) + " (it has " +
                    std::to_string(data.task_count()) + " tasks)");
  }
  return column;
}

template <typename T>
std::vector<T> task_scores(Model<T>& model, const TaskDataset& data, TaskContext& ctx, int task,
                           std::size_t batch_size) {
  ctx.set_active_task(task);
  std::vector<T> scores;
  scores.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<float> images = gather_images(data, idx);
    Tensor<T> logits;
    if constexpr (std::is_same_v<T, float>) {
      logits = model.predict(images, ctx);
    } else {
      logits = model.predict(images.template cast<T>(), ctx);
    }
    for (std::size_t i = 0; i < idx.size(); ++i) scores.push_back(logits[2 * i + 1] - logits[2 * i]);
  }
  return scores;
}

template <typename T>
MetricsReport evaluate(Model<T>& model, const TaskDataset& data, TaskContext& ctx) {
  if (data.size() == 0) throw UsageError("evaluate: empty evaluation set");
  const bool was_training = model.training();
  model.set_training(false);
  std::vector<Confusion> confusions;
  std::vector<std::string> names;
  std::vector<int> ids;
  for (int t = 0; t < model.task_count(); ++t) {
    const int column = dataset_column(model.config(), data, t);
    const auto scores = task_scores(model, data, ctx, t);
    Confusion c;
    for (std::size_t n = 0; n < data.size(); ++n) {
      const bool predicted = scores[n] > T{0};
      const bool actual = data.labels.at(n, static_cast<std::size_t>(column)) != 0;
      if (predicted && actual) ++c.tp;
      if (predicted && !actual) ++c.fp;
      if (!predicted && !actual) ++c.tn;
      if (!predicted && actual) ++c.fn;
    }
    confusions.push_back(c);
    names.push_back(static_cast<std::size_t>(column) < data.task_names.size()
                        ? data.task_names[static_cast<std::size_t>(column)]
                        : "task" + std::to_string(column));
    ids.push_back(column);
  }
  model.set_training(was_training);
  return build_report(confusions, names, ids);
}

template EpochSummary train_epoch(Model<float>&, const TaskDataset&, const TrainConfig&, TaskContext&, int);
template EpochSummary train_epoch(Model<double>&, const TaskDataset&, const TrainConfig&, TaskContext&, int);
template std::vector<EpochSummary> fit(Model<float>&, const TaskDataset&, const TrainConfig&);
template std::vector<EpochSummary> fit(Model<double>&, const TaskDataset&, const TrainConfig&);
template std::vector<float> task_scores(Model<float>&, const TaskDataset&, TaskContext&, int, std::size_t);
template std::vector<double> task_scores(Model<double>&, const TaskDataset&, TaskContext&, int, std::size_t);
template MetricsReport evaluate(Model<float>&, const TaskDataset&, TaskContext&);
template MetricsReport evaluate(Model<double>&, const TaskDataset&, TaskContext&);

}  // namespace taskroute
