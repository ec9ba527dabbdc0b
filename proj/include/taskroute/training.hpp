#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "taskroute/data.hpp"
#include "taskroute/model.hpp"
#include "taskroute/routing.hpp"

namespace taskroute {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.5;
  std::size_t batch_size = 64;
  int epochs = 35;
  TaskSampling task_sampling = TaskSampling::uniform_iid;
  std::uint64_t seed = 0;
  bool augment_flip = false;
};

void validate_train_config(const TrainConfig& config);

/// Draws the next task from the context's sampler: uniform in [0,T) or the
/// next entry of a seeded permutation that is reshuffled every cycle.
int sample_task(TaskContext& ctx);

struct EpochSummary {
  int epoch = 0;
  double mean_loss = 0.0;
  std::size_t batches = 0;
  std::vector<double> task_loss;        // mean over the task's batches; NaN if never sampled
  std::vector<std::size_t> task_batches;
};

/// One pass over `data` in a seeded order. Per minibatch: sample a task,
/// make it active, forward through the routed trunk and that task's head,
/// binary cross-entropy on that task's labels, backward, SGD step on the
/// trunk and that head. A trailing batch of a single sample is skipped
/// (batch-norm needs two).
template <typename T>
EpochSummary train_epoch(Model<T>& model, const TaskDataset& data, const TrainConfig& config, TaskContext& ctx,
                         int epoch);

/// Context with the sampler seeded from config.seed.
TaskContext make_training_context(int task_count, const TrainConfig& config);

template <typename T>
std::vector<EpochSummary> fit(Model<T>& model, const TaskDataset& data, const TrainConfig& config);

struct Confusion {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  double accuracy() const;
  double precision() const;  // 0 when nothing was predicted positive
  double recall() const;     // 0 when there are no positives
};

struct TaskMetrics {
  int task = 0;
  std::string name;
  Confusion confusion;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct MetricsReport {
  std::vector<TaskMetrics> per_task;
  double macro_accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  std::vector<EpochSummary> epoch_log;
  std::string decision_rule = "argmax";
};

MetricsReport build_report(const std::vector<Confusion>& confusions, std::span<const std::string> names,
                           std::span<const int> task_ids = {});

/// Logit margin (positive minus negative) of model task `task` for every sample.
template <typename T>
std::vector<T> task_scores(Model<T>& model, const TaskDataset& data, TaskContext& ctx, int task,
                           std::size_t batch_size = 256);

/// Column of `data` that model task `task` predicts: the same index for a
/// multi-task model, the source task for an extracted subnet.
int dataset_column(const ModelConfig& config, const TaskDataset& data, int task);

/// Per task: activate it, predict the full set in eval mode, threshold by
/// argmax over the two logits, accumulate the confusion matrix.
template <typename T>
MetricsReport evaluate(Model<T>& model, const TaskDataset& data, TaskContext& ctx);

}  // namespace taskroute
