#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "radmae/datamodel.hpp"
#include "radmae/evalstat.hpp"
#include "radmae/model.hpp"
#include "radmae/optim.hpp"

namespace radmae {

enum class LossKind { kSigmoidBce, kSoftmaxCe, kMse };
enum class SelectionMetric { kAuroc, kMae };

std::string to_string(LossKind k);
std::string to_string(SelectionMetric m);

struct TaskSpec {
  std::string id;
  TaskKind kind = TaskKind::kBinary;
  int num_classes = 2;    // K for multiclass, 2 for binary, 1 for regression
  LossKind loss = LossKind::kSigmoidBce;
  SelectionMetric metric = SelectionMetric::kAuroc;
  std::string label_key;  // manifest task id the labels are read from
  std::string description;

  // 1 logit (binary), K logits (multiclass) or 1 value (regression).
  int output_arity() const { return kind == TaskKind::kMulticlass ? num_classes : 1; }
};

TaskSpec make_task(std::string id, TaskKind kind, int num_classes, std::string label_key, std::string description = {});

/// The twelve downstream tasks.
const std::map<std::string, TaskSpec>& register_builtin_tasks();

/// Exact id, or the unique builtin whose id starts with `name` followed by '-'.
/// Throws kNotFound "unknown task" otherwise.
const TaskSpec& lookup_task(const std::string& name);

/// Builtin lookup first, then a task declared in the manifest.
TaskSpec resolve_task(const std::string& name, const DatasetManifest& manifest);

/// Fails when the manifest declaration behind `task.label_key` disagrees with `task`.
void check_task_against_manifest(const TaskSpec& task, const DatasetManifest& manifest);

/// Optimisation settings for fine-tuning. Defaults follow the transformer
/// recipe; conv_baseline() returns the convolutional one.
struct FinetuneConfig {
  double base_lr = 5e-5;
  double layerwise_lr_decay = 0.75;  // 1.0 disables
  int batch_size = 64;
  double weight_decay = 0.05;
  double warmup_ratio = 0.1;
  int epochs = 50;
  BackboneConfig backbone;
  std::optional<std::filesystem::path> init_checkpoint;  // MAE checkpoint for the encoder
  bool horizontal_flip = false;
  std::uint64_t seed = 0;

  static FinetuneConfig conv_baseline();
  void validate() const;
};

nlohmann::json to_json(const FinetuneConfig& c);
FinetuneConfig finetune_config_from_json(const nlohmann::json& j, FinetuneConfig defaults = {});

/// Images and labels by id. The harness reads data only through this
/// interface, which lets tests audit which ids a run touched.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual Image image(const std::string& id) const = 0;
  virtual LabeledTarget label(const std::string& id, const std::string& task) const = 0;
};

/// Reads images from disk through ingest_image at a fixed geometry, caching decoded pixels.
class ManifestSource : public SampleSource {
 public:
  ManifestSource(const DatasetManifest& manifest, int height, int width, int channels);
  Image image(const std::string& id) const override;
  LabeledTarget label(const std::string& id, const std::string& task) const override;
  const DatasetManifest& manifest() const { return manifest_; }

 private:
  const DatasetManifest& manifest_;
  int height_, width_, channels_;
  mutable std::mutex mu_;
  mutable std::map<std::string, Image> cache_;
};

/// Images held in memory, parallel to the manifest entries.
class MemorySource : public SampleSource {
 public:
  MemorySource(const DatasetManifest& manifest, std::vector<Image> images);
  Image image(const std::string& id) const override;
  LabeledTarget label(const std::string& id, const std::string& task) const override;

 private:
  const DatasetManifest& manifest_;
  std::vector<Image> images_;
};

/// Classifier with a task head; loads encoder weights when a backbone checkpoint is given.
Classifier attach_head(const std::optional<std::filesystem::path>& backbone_checkpoint, const TaskSpec& task,
                       const BackboneConfig& backbone, std::uint64_t init_seed = 0);

// ---------------------------------------------------------------------------
// Generic supervised loop shared by single-task and multi-head training.

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double lr = 0.0;
  double selection = 0.0;
  nlohmann::json metrics = nlohmann::json::object();
};

struct FitSchedule {
  double base_lr = 5e-5;
  double layerwise_lr_decay = 0.75;
  int batch_size = 64;
  AdamWConfig optimizer;
  double warmup_ratio = 0.1;
  int epochs = 50;
  std::uint64_t seed = 0;
};

struct FitResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_selection = 0.0;
};

// Loss for training sample `index`; accumulates gradients when `grads` is set.
using SampleLoss = std::function<double(const Classifier&, std::size_t index, nn::Gradients* grads, Rng& rng)>;
// Mean loss over the batch; gradients of that mean are accumulated when `grads` is set.
using BatchLoss = std::function<double(const Classifier&, const std::vector<std::size_t>& indices, nn::Gradients* grads,
                                       Rng& rng)>;
// Validation metrics for the current weights: (selection value, full metrics).
using Validator = std::function<std::pair<double, nlohmann::json>(const Classifier&)>;

/// Mini-batch AdamW with cosine schedule and layer-wise lr decay. After every
/// epoch the validator runs; the weights of the best epoch (earliest on ties)
/// are restored into `model` on return.
FitResult fit(Classifier& model, std::size_t n_train, const SampleLoss& loss, const Validator& validate, bool maximize,
              const FitSchedule& schedule, const std::function<void(const EpochRecord&)>& on_epoch = {});

FitResult fit(Classifier& model, std::size_t n_train, const BatchLoss& loss, const Validator& validate, bool maximize,
              const FitSchedule& schedule, const std::function<void(const EpochRecord&)>& on_epoch = {});

/// 1-based epoch of the best value; earliest wins ties.
int select_best_epoch(const std::vector<double>& values, bool maximize);

// ---------------------------------------------------------------------------

/// Per-sample scores for a task: probabilities (binary: P(class 1), multiclass:
/// K probabilities) or regression values in label units.
struct Predictions {
  std::vector<std::string> ids;
  std::vector<double> scores;  // n x width, row-major
  int width = 1;
  std::vector<LabeledTarget> labels;
};

struct TaskModel {
  Classifier model;
  double target_mean = 0.0;  // regression targets are standardised for training
  double target_std = 1.0;
};

/// Restores a fold checkpoint written by finetune_cv. `task` receives the
/// task it was trained for.
TaskModel load_task_model(const std::filesystem::path& checkpoint, TaskSpec* task = nullptr);

Predictions predict(const TaskModel& model, const TaskSpec& task, const SampleSource& source,
                    const std::vector<std::string>& ids);

/// Selection metric plus the secondary metrics, computed on unmasked labels.
/// Throws "AUROC undefined" when a binary validation set holds one class.
std::pair<double, nlohmann::json> task_metrics(const TaskSpec& task, const Predictions& p);

struct FoldResult {
  TaskModel best;
  FitResult fit;
  std::vector<std::string> notes;
};

struct CvOptions {
  std::optional<std::filesystem::path> run_dir;  // writes fold{k}/history.jsonl, best.ckpt
  std::function<void(int fold, const EpochRecord&)> on_epoch;
};

/// Trains one model per fold. Entries whose label for the task is masked are
/// dropped from that fold's train and validation lists.
std::vector<FoldResult> finetune_cv(const SampleSource& source, const TaskSpec& task, const SplitPlan& plan,
                                    const FinetuneConfig& config, const CvOptions& options = {});

struct TestReport {
  std::string task;
  std::map<std::string, stats::MetricReport> metrics;  // auroc/balanced_accuracy/f1/... or mae/rmse
  std::vector<nlohmann::json> per_fold;
  // Per-group selection metric per fold, when a group field is given.
  std::map<std::string, stats::MetricReport> subgroups;
  std::vector<std::string> notes;
};

/// Per-fold test metrics and mean with a 95% CI across folds.
TestReport evaluate_test(const std::vector<const TaskModel*>& models, const SampleSource& source,
                         const DatasetManifest& manifest, const SplitPlan& plan, const TaskSpec& task,
                         const std::optional<std::string>& group_field = std::nullopt);

nlohmann::json to_json(const TestReport& r);

inline const std::vector<double> kDefaultSweepFractions{0.1, 0.2, 0.5, 0.9};

struct SweepPoint {
  double fraction = 0.0;
  std::uint64_t seed = 0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  double metric = 0.0;  // mean test selection metric across folds
  std::vector<double> per_fold;
};

struct SweepResult {
  std::string metric;
  std::vector<SweepPoint> points;
  std::map<double, stats::MetricReport> summary;  // fraction -> distribution over seeds
};

/// For each (fraction, seed): subsample, fine-tune every fold, select, and test
/// on the sweep's held-out set (original test set plus unselected pool ids).
SweepResult label_efficiency_sweep(const SampleSource& source, const DatasetManifest& manifest, const TaskSpec& task,
                                   const SplitPlan& base_plan, const std::vector<double>& fractions,
                                   const std::vector<std::uint64_t>& seeds, const FinetuneConfig& config,
                                   const std::function<void(const SweepPoint&)>& on_point = {});

nlohmann::json to_json(const SweepResult& r);

}  // namespace radmae
