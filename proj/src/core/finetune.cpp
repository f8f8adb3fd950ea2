#include "radmae/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "radmae/error.hpp"

namespace radmae {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::kSigmoidBce: return "sigmoid-bce";
    case LossKind::kSoftmaxCe: return "softmax-ce";
    case LossKind::kMse: return "mse";
  }
  return "unknown";
}

std::string to_string(SelectionMetric m) { return m == SelectionMetric::kAuroc ? "auroc" : "mae"; }

TaskSpec make_task(std::string id, TaskKind kind, int num_classes, std::string label_key, std::string description) {
  TaskSpec t;
  t.id = std::move(id);
  t.kind = kind;
  t.label_key = std::move(label_key);
  t.description = std::move(description);
  switch (kind) {
    case TaskKind::kBinary:
      t.num_classes = 2;
      t.loss = LossKind::kSigmoidBce;
      t.metric = SelectionMetric::kAuroc;
      break;
    case TaskKind::kMulticlass:
      if (num_classes < 2) fail("multiclass task needs at least two classes");
      t.num_classes = num_classes;
      t.loss = LossKind::kSoftmaxCe;
      t.metric = SelectionMetric::kAuroc;
      break;
    case TaskKind::kRegression:
      t.num_classes = 1;
      t.loss = LossKind::kMse;
      t.metric = SelectionMetric::kMae;
      break;
  }
  return t;
}

const std::map<std::string, TaskSpec>& register_builtin_tasks() {
  static const std::map<std::string, TaskSpec> tasks = [] {
    std::map<std::string, TaskSpec> m;
    const auto add = [&m](TaskSpec t) { m.emplace(t.id, std::move(t)); };
    add(make_task("wrist-AO-10class", TaskKind::kMulticlass, 10, "ao_class", "pediatric wrist AO fracture subtype"));
    add(make_task("wrist-fracture", TaskKind::kBinary, 2, "wrist_fracture", "pediatric wrist fracture"));
    add(make_task("fracture", TaskKind::kBinary, 2, "fracture", "general fracture"));
    add(make_task("abnormality", TaskKind::kBinary, 2, "abnormality", "musculoskeletal abnormality"));
    add(make_task("tumor-subtype-9class", TaskKind::kMulticlass, 9, "tumor_subtype", "bone tumor subtype"));
    add(make_task("tumor-malignancy", TaskKind::kBinary, 2, "malignancy", "benign vs malignant bone tumor"));
    add(make_task("tumor-presence", TaskKind::kBinary, 2, "tumor_presence", "bone tumor presence"));
    add(make_task("OA-KL-5class", TaskKind::kMulticlass, 5, "kl_grade", "knee osteoarthritis KL grade"));
    add(make_task("bone-age-regression", TaskKind::kRegression, 1, "bone_age", "pediatric bone age in months"));
    add(make_task("pes-planus", TaskKind::kBinary, 2, "pes_planus", "flatfoot"));
    add(make_task("wrist-implant", TaskKind::kBinary, 2, "implant", "pediatric wrist implant"));
    add(make_task("implant", TaskKind::kBinary, 2, "implant", "orthopedic implant"));
    return m;
  }();
  return tasks;
}

const TaskSpec& lookup_task(const std::string& name) {
  const auto& tasks = register_builtin_tasks();
  if (auto it = tasks.find(name); it != tasks.end()) return it->second;
  const TaskSpec* match = nullptr;
  int matches = 0;
  for (const auto& [id, spec] : tasks)
    if (id.size() > name.size() && id.compare(0, name.size(), name) == 0 && id[name.size()] == '-') {
      match = &spec;
      ++matches;
    }
  if (matches == 1) return *match;
  throw Error(ErrorCode::kNotFound, matches > 1 ? "ambiguous task '" + name + "'" : "unknown task '" + name + "'");
}

TaskSpec resolve_task(const std::string& name, const DatasetManifest& manifest) {
  try {
    return lookup_task(name);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNotFound) throw;
    const auto it = manifest.tasks.find(name);
    if (it == manifest.tasks.end()) throw;
    return make_task(name, it->second.kind, it->second.cardinality(), name);
  }
}

void check_task_against_manifest(const TaskSpec& task, const DatasetManifest& manifest) {
  const auto it = manifest.tasks.find(task.label_key);
  if (it == manifest.tasks.end())
    fail("task '" + task.id + "' reads labels '" + task.label_key + "', which the manifest does not declare");
  if (it->second.kind != task.kind || (task.kind == TaskKind::kMulticlass && it->second.cardinality() != task.num_classes))
    fail("task '" + task.id + "' expects " + to_string(task.kind) +
         (task.kind == TaskKind::kMulticlass ? "(" + std::to_string(task.num_classes) + ")" : "") + " labels but '" +
         task.label_key + "' is declared as " + to_string(it->second.kind) +
         (it->second.kind == TaskKind::kMulticlass ? "(" + std::to_string(it->second.cardinality()) + ")" : ""));
}

// ---------------------------------------------------------------------------

FinetuneConfig FinetuneConfig::conv_baseline() {
  FinetuneConfig c;
  c.base_lr = 5e-4;
  c.weight_decay = 1e-4;
  c.layerwise_lr_decay = 1.0;
  c.backbone.kind = "conv";
  return c;
}

void FinetuneConfig::validate() const {
  backbone.validate();
  if (!(base_lr > 0.0)) fail("base_lr must be positive");
  if (!(layerwise_lr_decay > 0.0 && layerwise_lr_decay <= 1.0)) fail("layerwise_lr_decay must be in (0, 1]");
  if (batch_size <= 0) fail("batch_size must be positive");
  if (epochs < 0) fail("epochs must be non-negative");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) fail("warmup_ratio must be in [0, 1)");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
}

json to_json(const FinetuneConfig& c) {
  json j{{"base_lr", c.base_lr},           {"layerwise_lr_decay", c.layerwise_lr_decay},
         {"batch_size", c.batch_size},     {"weight_decay", c.weight_decay},
         {"warmup_ratio", c.warmup_ratio}, {"epochs", c.epochs},
         {"backbone", to_json(c.backbone)}, {"horizontal_flip", c.horizontal_flip},
         {"seed", c.seed}};
  j["init_checkpoint"] = c.init_checkpoint ? json(c.init_checkpoint->string()) : json(nullptr);
  return j;
}

FinetuneConfig finetune_config_from_json(const json& j, FinetuneConfig c) {
  try {
    if (j.contains("backbone")) {
      const auto& b = j.at("backbone");
      // Switching to the conv baseline also switches its optimiser defaults.
      if (b.value("kind", c.backbone.kind) == "conv" && c.backbone.kind != "conv") {
        const auto geometry = c.backbone.encoder;
        c = FinetuneConfig::conv_baseline();
        c.backbone.encoder = geometry;
      }
      c.backbone = backbone_config_from_json(b, c.backbone);
    }
    c.base_lr = j.value("base_lr", c.base_lr);
    c.layerwise_lr_decay = j.value("layerwise_lr_decay", c.layerwise_lr_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
    c.epochs = j.value("epochs", c.epochs);
    c.horizontal_flip = j.value("horizontal_flip", c.horizontal_flip);
    c.seed = j.value("seed", c.seed);
    if (j.contains("init_checkpoint") && !j.at("init_checkpoint").is_null())
      c.init_checkpoint = fs::path(j.at("init_checkpoint").get<std::string>());
  } catch (const json::exception& ex) {
    fail_parse(std::string("finetune config: ") + ex.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

namespace {

LabeledTarget manifest_label(const DatasetManifest& manifest, const std::string& id, const std::string& task) {
  const auto& e = manifest.entry(id);
  const auto it = e.labels.find(task);
  if (it == e.labels.end()) throw Error(ErrorCode::kNotFound, "missing label '" + task + "' on entry '" + id + "'");
  return it->second;
}

}  // namespace

ManifestSource::ManifestSource(const DatasetManifest& manifest, int height, int width, int channels)
    : manifest_(manifest), height_(height), width_(width), channels_(channels) {}

Image ManifestSource::image(const std::string& id) const {
  {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(id); it != cache_.end()) return it->second;
  }
  Image img = ingest_image(manifest_.image_path(manifest_.entry(id)), height_, width_, channels_).pixels;
  std::lock_guard lock(mu_);
  return cache_.emplace(id, std::move(img)).first->second;
}

LabeledTarget ManifestSource::label(const std::string& id, const std::string& task) const {
  return manifest_label(manifest_, id, task);
}

MemorySource::MemorySource(const DatasetManifest& manifest, std::vector<Image> images)
    : manifest_(manifest), images_(std::move(images)) {
  if (images_.size() != manifest.entries.size()) fail("image count differs from manifest entries");
}

Image MemorySource::image(const std::string& id) const { return images_[manifest_.index_of(id)]; }

LabeledTarget MemorySource::label(const std::string& id, const std::string& task) const {
  return manifest_label(manifest_, id, task);
}

Classifier attach_head(const std::optional<fs::path>& backbone_checkpoint, const TaskSpec& task,
                       const BackboneConfig& backbone, std::uint64_t init_seed) {
  Classifier model(backbone, task.output_arity(), init_seed);
  if (backbone_checkpoint) model.load_backbone(*backbone_checkpoint);
  return model;
}

// ---------------------------------------------------------------------------

int select_best_epoch(const std::vector<double>& values, bool maximize) {
  if (values.empty()) return 0;
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (maximize ? values[i] > values[best] : values[i] < values[best]) best = i;
  return static_cast<int>(best) + 1;
}

FitResult fit(Classifier& model, std::size_t n_train, const SampleLoss& loss, const Validator& validate, bool maximize,
              const FitSchedule& schedule, const std::function<void(const EpochRecord&)>& on_epoch) {
  const BatchLoss batch = [&loss](const Classifier& m, const std::vector<std::size_t>& idx, nn::Gradients* grads,
                                  Rng& rng) {
    double sum = 0.0;
    for (auto i : idx) sum += loss(m, i, grads, rng);
    if (grads) grads->scale(1.0 / static_cast<double>(idx.size()));
    return sum / static_cast<double>(idx.size());
  };
  return fit(model, n_train, batch, validate, maximize, schedule, on_epoch);
}

FitResult fit(Classifier& model, std::size_t n_train, const BatchLoss& loss, const Validator& validate, bool maximize,
              const FitSchedule& schedule, const std::function<void(const EpochRecord&)>& on_epoch) {
  if (n_train == 0) fail("training set is empty");
  if (schedule.batch_size <= 0) fail("batch_size must be positive");
  const auto n = static_cast<long>(n_train);
  const long steps_per_epoch = (n + schedule.batch_size - 1) / schedule.batch_size;
  const long total = steps_per_epoch * schedule.epochs;
  const auto warmup = static_cast<long>(std::lround(schedule.warmup_ratio * static_cast<double>(total)));
  const auto scales = schedule.layerwise_lr_decay < 1.0
                          ? layerwise_lr_scales(model.num_layers(), schedule.layerwise_lr_decay)
                          : std::vector<double>{};

  AdamW optimizer(model.params(), schedule.optimizer);
  nn::Gradients grads(model.params());
  Rng rng(schedule.seed);
  std::vector<std::size_t> order(n_train);
  std::vector<nn::Matrix> best_values;
  FitResult result;
  long step = 0;
  for (int epoch = 1; epoch <= schedule.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    double loss_sum = 0.0, lr = 0.0;
    for (long start = 0; start < n; start += schedule.batch_size) {
      const long end = std::min(n, start + schedule.batch_size);
      grads.zero();
      const std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
      const double batch = loss(model, idx, &grads, rng);
      if (!std::isfinite(batch) || !grads.all_finite())
        throw Error(ErrorCode::kNumeric, "non-finite training loss at epoch " + std::to_string(epoch));
      lr = cosine_lr(step, total, warmup, schedule.base_lr);
      optimizer.step(model.params(), grads, lr, scales);
      loss_sum += batch * static_cast<double>(end - start);
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.lr = lr;
    std::tie(rec.selection, rec.metrics) = validate(model);
    const bool better = result.history.empty() ||
                        (maximize ? rec.selection > result.best_selection : rec.selection < result.best_selection);
    if (better) {
      result.best_epoch = epoch;
      result.best_selection = rec.selection;
      best_values.clear();
      for (const auto& p : model.params()) best_values.push_back(p.value);
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (!best_values.empty())
    for (std::size_t i = 0; i < best_values.size(); ++i) model.params()[i].value = best_values[i];
  return result;
}

// ---------------------------------------------------------------------------

namespace {

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// Loss and dL/dlogits for one sample; `y` is the class index, 0/1 or the standardised target.
double task_loss(const TaskSpec& task, const nn::Matrix& logits, double y, nn::Matrix* dlogits) {
  switch (task.loss) {
    case LossKind::kSigmoidBce: {
      const double z = logits(0, 0);
      if (dlogits) *dlogits = nn::Matrix::Constant(1, 1, sigmoid(z) - y);
      return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z;
    }
    case LossKind::kSoftmaxCe: {
      const nn::Matrix p = nn::softmax_rows(logits);
      const int k = static_cast<int>(y);
      if (dlogits) {
        *dlogits = p;
        (*dlogits)(0, k) -= 1.0;
      }
      const double m = logits.maxCoeff();
      return m + std::log((logits.array() - m).exp().sum()) - logits(0, k);
    }
    case LossKind::kMse: {
      const double d = logits(0, 0) - y;
      if (dlogits) *dlogits = nn::Matrix::Constant(1, 1, 2.0 * d);
      return d * d;
    }
  }
  return 0.0;
}

void require_two_classes(const TaskSpec& task, const std::vector<LabeledTarget>& labels, const std::string& where) {
  std::set<int> seen;
  for (const auto& l : labels)
    if (!l.masked) seen.insert(l.class_index());
  if (seen.size() < 2)
    fail("AUROC undefined: " + where + " holds " + (seen.empty() ? "no labelled samples" : "a single class") +
         " for task '" + task.id + "'");
}

}  // namespace

TaskModel load_task_model(const fs::path& checkpoint, TaskSpec* task) {
  json extra;
  std::string kind;
  Classifier model = Classifier::load(checkpoint, &extra, &kind);
  if (kind != "classifier") fail("checkpoint '" + checkpoint.string() + "' holds a '" + kind + "' model, not classifier");
  if (task) {
    const auto id = extra.value("task", std::string());
    const auto& builtin = register_builtin_tasks();
    if (const auto it = builtin.find(id); it != builtin.end()) {
      *task = it->second;
    } else {
      *task = make_task(id, task_kind_from_string(extra.value("task_kind", std::string("binary"))),
                        extra.value("num_classes", 2), extra.value("label_key", id));
    }
  }
  TaskModel out{Classifier(model), extra.value("target_mean", 0.0), extra.value("target_std", 1.0)};
  return out;
}

Predictions predict(const TaskModel& model, const TaskSpec& task, const SampleSource& source,
                    const std::vector<std::string>& ids) {
  Predictions p;
  p.ids = ids;
  p.width = task.kind == TaskKind::kMulticlass ? task.num_classes : 1;
  p.scores.reserve(ids.size() * static_cast<std::size_t>(p.width));
  for (const auto& id : ids) {
    const nn::Matrix z = model.model.logits(source.image(id));
    switch (task.kind) {
      case TaskKind::kBinary: p.scores.push_back(sigmoid(z(0, 0))); break;
      case TaskKind::kMulticlass: {
        const nn::Matrix prob = nn::softmax_rows(z);
        p.scores.insert(p.scores.end(), prob.data(), prob.data() + prob.size());
        break;
      }
      case TaskKind::kRegression: p.scores.push_back(z(0, 0) * model.target_std + model.target_mean); break;
    }
    p.labels.push_back(source.label(id, task.label_key));
  }
  return p;
}

std::pair<double, json> task_metrics(const TaskSpec& task, const Predictions& p) {
  std::vector<double> scores;
  std::vector<int> labels, preds;
  std::vector<double> targets;
  const auto w = static_cast<std::size_t>(p.width);
  for (std::size_t i = 0; i < p.ids.size(); ++i) {
    if (p.labels[i].masked) continue;
    if (task.kind == TaskKind::kRegression) {
      scores.push_back(p.scores[i]);
      targets.push_back(p.labels[i].value);
      continue;
    }
    labels.push_back(p.labels[i].class_index());
    if (task.kind == TaskKind::kBinary) {
      scores.push_back(p.scores[i]);
      preds.push_back(p.scores[i] > 0.5 ? 1 : 0);
    } else {
      const auto row = p.scores.begin() + static_cast<std::ptrdiff_t>(i * w);
      scores.insert(scores.end(), row, row + static_cast<std::ptrdiff_t>(w));
      preds.push_back(static_cast<int>(std::max_element(row, row + static_cast<std::ptrdiff_t>(w)) - row));
    }
  }
  json m;
  if (task.kind == TaskKind::kRegression) {
    if (targets.empty()) fail("no labelled samples to evaluate");
    const auto r = stats::regression_metrics(scores, targets);
    m = {{"mae", r.mae}, {"rmse", r.rmse}, {"n", targets.size()}};
    return {r.mae, m};
  }
  std::vector<LabeledTarget> unmasked;
  for (int l : labels) unmasked.push_back(LabeledTarget::of(l));
  require_two_classes(task, unmasked, "evaluation set");
  double auc = 0.0;
  std::vector<int> skipped;
  if (task.kind == TaskKind::kBinary) {
    auc = stats::auroc(scores, labels);
  } else {
    auc = stats::auroc_ovr_macro(scores, labels, task.num_classes, &skipped);
  }
  const auto c = stats::classification_metrics(preds, labels, task.num_classes);
  m = {{"auroc", auc},      {"balanced_accuracy", c.balanced_accuracy},
       {"precision", c.precision}, {"recall", c.recall},
       {"f1", c.f1},        {"n", labels.size()}};
  if (!skipped.empty()) m["auroc_skipped_classes"] = skipped;
  return {auc, m};
}

std::vector<FoldResult> finetune_cv(const SampleSource& source, const TaskSpec& task, const SplitPlan& plan,
                                    const FinetuneConfig& config, const CvOptions& options) {
  config.validate();
  if (plan.folds.empty()) fail("split plan has no folds");
  std::vector<FoldResult> results;
  for (std::size_t k = 0; k < plan.folds.size(); ++k) {
    const auto& fold = plan.folds[k];
    FoldResult fr{TaskModel{attach_head(config.init_checkpoint, task, config.backbone, derive_seed(config.seed, "head"))},
                  {}, {}};
    std::vector<std::string> train, val;
    std::vector<double> train_targets;
    for (const auto& id : fold.train_ids) {
      const auto l = source.label(id, task.label_key);
      if (l.masked) continue;
      train.push_back(id);
      train_targets.push_back(l.value);
    }
    std::vector<LabeledTarget> val_labels;
    for (const auto& id : fold.val_ids) {
      const auto l = source.label(id, task.label_key);
      if (l.masked) continue;
      val.push_back(id);
      val_labels.push_back(l);
    }
    const auto dropped = fold.train_ids.size() + fold.val_ids.size() - train.size() - val.size();
    if (dropped > 0) fr.notes.push_back("dropped " + std::to_string(dropped) + " entries with masked labels");
    if (train.empty()) fail("fold " + std::to_string(k) + " has no labelled training entries");
    if (val.empty()) fail("fold " + std::to_string(k) + " has no labelled validation entries");
    if (task.kind != TaskKind::kRegression) require_two_classes(task, val_labels, "fold " + std::to_string(k) + " validation set");

    if (task.kind == TaskKind::kRegression) {
      const double mean = std::accumulate(train_targets.begin(), train_targets.end(), 0.0) / train_targets.size();
      double ss = 0.0;
      for (double t : train_targets) ss += (t - mean) * (t - mean);
      const double sd = std::sqrt(ss / train_targets.size());
      fr.best.target_mean = mean;
      fr.best.target_std = sd > 1e-12 ? sd : 1.0;
    }
    const double t_mean = fr.best.target_mean, t_std = fr.best.target_std;

    const SampleLoss loss = [&](const Classifier& model, std::size_t index, nn::Gradients* grads, Rng& rng) {
      Image img = source.image(train[index]);
      if (config.horizontal_flip && rng.bernoulli(0.5)) img = horizontal_flip(img);
      const double y = task.kind == TaskKind::kRegression ? (train_targets[index] - t_mean) / t_std : train_targets[index];
      Classifier::Cache cache;
      const nn::Matrix z = model.forward(img, cache);
      nn::Matrix dz;
      const double l = task_loss(task, z, y, grads ? &dz : nullptr);
      if (grads) model.backward(cache, dz, *grads);
      return l;
    };
    const Validator validate = [&](const Classifier& model) {
      const TaskModel view{model, t_mean, t_std};
      return task_metrics(task, predict(view, task, source, val));
    };

    std::optional<fs::path> fold_dir;
    if (options.run_dir) {
      fold_dir = *options.run_dir / ("fold" + std::to_string(k));
      fs::create_directories(*fold_dir);
      std::ofstream(*fold_dir / "history.jsonl", std::ios::trunc);
    }
    const auto on_epoch = [&](const EpochRecord& rec) {
      if (fold_dir) {
        std::ofstream out(*fold_dir / "history.jsonl", std::ios::app);
        out << json{{"epoch", rec.epoch}, {"train_loss", rec.train_loss}, {"lr", rec.lr},
                    {to_string(task.metric), rec.selection}, {"val", rec.metrics}}
                   .dump()
            << '\n';
      }
      if (options.on_epoch) options.on_epoch(static_cast<int>(k), rec);
    };

    FitSchedule schedule;
    schedule.base_lr = config.base_lr;
    schedule.layerwise_lr_decay = config.layerwise_lr_decay;
    schedule.batch_size = config.batch_size;
    schedule.optimizer.weight_decay = config.weight_decay;
    schedule.warmup_ratio = config.warmup_ratio;
    schedule.epochs = config.epochs;
    schedule.seed = derive_seed(config.seed, static_cast<std::uint64_t>(k));
    fr.fit = fit(fr.best.model, train.size(), loss, validate, task.metric == SelectionMetric::kAuroc, schedule, on_epoch);

    if (fold_dir) {
      fr.best.model.save(*fold_dir / "best.ckpt", "classifier",
                         {{"task", task.id},
                          {"task_kind", to_string(task.kind)},
                          {"label_key", task.label_key},
                          {"num_classes", task.num_classes},
                          {"fold", k},
                          {"best_epoch", fr.fit.best_epoch},
                          {to_string(task.metric), fr.fit.best_selection},
                          {"target_mean", fr.best.target_mean},
                          {"target_std", fr.best.target_std},
                          {"finetune", to_json(config)}},
                         fr.fit.best_epoch);
    }
    results.push_back(std::move(fr));
  }
  return results;
}

// ---------------------------------------------------------------------------

TestReport evaluate_test(const std::vector<const TaskModel*>& models, const SampleSource& source,
                         const DatasetManifest& manifest, const SplitPlan& plan, const TaskSpec& task,
                         const std::optional<std::string>& group_field) {
  if (models.empty()) fail("no fold models to evaluate");
  if (plan.test_ids.empty()) fail("test set is empty");
  TestReport report;
  report.task = task.id;
  std::vector<std::string> ids;
  for (const auto& id : plan.test_ids) {
    const auto l = source.label(id, task.label_key);
    if (!l.masked) ids.push_back(id);
  }
  if (ids.empty()) fail("missing labels on test entries: every test label for '" + task.label_key + "' is masked");
  if (ids.size() < plan.test_ids.size())
    report.notes.push_back("excluded " + std::to_string(plan.test_ids.size() - ids.size()) +
                           " test entries with masked labels");

  std::map<std::string, std::vector<double>> per_metric;
  std::map<std::string, std::vector<double>> per_group;
  for (const auto* m : models) {
    const auto preds = predict(*m, task, source, ids);
    const auto [sel, metrics] = task_metrics(task, preds);
    (void)sel;
    report.per_fold.push_back(metrics);
    for (const auto& [name, value] : metrics.items())
      if (name != "n" && value.is_number()) per_metric[name].push_back(value.get<double>());
    if (group_field) {
      std::map<std::string, Predictions> groups;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto g = manifest.entry(ids[i]).field(*group_field).value_or("other");
        auto& gp = groups[g];
        gp.width = preds.width;
        gp.ids.push_back(ids[i]);
        gp.labels.push_back(preds.labels[i]);
        const auto w = static_cast<std::size_t>(preds.width);
        gp.scores.insert(gp.scores.end(), preds.scores.begin() + static_cast<std::ptrdiff_t>(i * w),
                         preds.scores.begin() + static_cast<std::ptrdiff_t>((i + 1) * w));
      }
      for (const auto& [g, gp] : groups) {
        try {
          per_group[g].push_back(task_metrics(task, gp).first);
        } catch (const Error&) {
          // Metric undefined for this subgroup (e.g. a single class); skipped.
        }
      }
    }
  }
  for (auto& [name, values] : per_metric) report.metrics[name] = stats::make_metric_report(name, std::move(values));
  for (auto& [g, values] : per_group)
    report.subgroups[g] = stats::make_metric_report(to_string(task.metric), std::move(values));
  return report;
}

json to_json(const TestReport& r) {
  json metrics = json::object(), subgroups = json::object();
  for (const auto& [k, v] : r.metrics) metrics[k] = stats::to_json(v);
  for (const auto& [k, v] : r.subgroups) subgroups[k] = stats::to_json(v);
  return {{"task", r.task}, {"metrics", metrics}, {"per_fold", r.per_fold}, {"subgroups", subgroups}, {"notes", r.notes}};
}

SweepResult label_efficiency_sweep(const SampleSource& source, const DatasetManifest& manifest, const TaskSpec& task,
                                   const SplitPlan& base_plan, const std::vector<double>& fractions,
                                   const std::vector<std::uint64_t>& seeds, const FinetuneConfig& config,
                                   const std::function<void(const SweepPoint&)>& on_point) {
  if (fractions.empty() || seeds.empty()) fail("sweep needs at least one fraction and one seed");
  for (double f : fractions)
    if (!(f > 0.0 && f <= 1.0)) fail("sweep fractions must lie in (0, 1]");
  SweepResult result;
  result.metric = to_string(task.metric);
  std::map<double, std::vector<double>> by_fraction;
  for (double f : fractions) {
    for (auto seed : seeds) {
      const auto plan = subsample_training(base_plan, f, seed);
      FinetuneConfig cfg = config;
      cfg.seed = seed;
      const auto folds = finetune_cv(source, task, plan, cfg);
      std::vector<const TaskModel*> models;
      for (const auto& fr : folds) models.push_back(&fr.best);
      const auto report = evaluate_test(models, source, manifest, plan, task);
      SweepPoint pt;
      pt.fraction = f;
      pt.seed = seed;
      pt.train_size = plan.pool_ids().size();
      pt.test_size = plan.test_ids.size();
      const auto& m = report.metrics.at(result.metric);
      pt.metric = m.mean;
      pt.per_fold = m.per_fold;
      by_fraction[f].push_back(pt.metric);
      result.points.push_back(pt);
      if (on_point) on_point(pt);
    }
  }
  for (auto& [f, values] : by_fraction) result.summary[f] = stats::make_metric_report(result.metric, std::move(values));
  return result;
}

json to_json(const SweepResult& r) {
  json points = json::array(), summary = json::array();
  for (const auto& p : r.points)
    points.push_back({{"fraction", p.fraction},
                      {"seed", p.seed},
                      {"train_size", p.train_size},
                      {"test_size", p.test_size},
                      {r.metric, p.metric},
                      {"per_fold", p.per_fold}});
  for (const auto& [f, m] : r.summary) {
    auto j = stats::to_json(m);
    j["fraction"] = f;
    summary.push_back(j);
  }
  return {{"metric", r.metric}, {"points", points}, {"summary", summary}};
}

}  // namespace radmae
