#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "radmae/error.hpp"
#include "radmae/finetune.hpp"
#include "radmae/optim.hpp"

using namespace radmae;

namespace {

BackboneConfig tiny_conv() {
  BackboneConfig b;
  b.kind = "conv";
  b.encoder.image_height = 16;
  b.encoder.image_width = 16;
  b.encoder.channels = 1;
  b.encoder.patch = 4;
  b.encoder.dim = 16;
  b.encoder.depth = 1;
  b.encoder.heads = 2;
  b.conv_width = 8;
  b.conv_out = 16;
  return b;
}

// Binary task "toy": positives carry a bright 6x6 square, negatives do not.
struct ToyData {
  DatasetManifest manifest;
  std::vector<Image> images;
};

ToyData toy_data(int n, std::uint64_t seed, bool regression = false) {
  ToyData d;
  d.manifest.tasks["toy"] = regression ? TaskDeclaration{TaskKind::kRegression, {}}
                                       : TaskDeclaration{TaskKind::kBinary, {"neg", "pos"}};
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    Image img(16, 16, 1);
    for (auto& v : img.data()) v = 0.2 + 0.1 * rng.uniform();
    const int y = i % 2;
    if (y) {
      const int r = static_cast<int>(rng.uniform(1, 9)), c = static_cast<int>(rng.uniform(1, 9));
      for (int a = r; a < r + 6; ++a)
        for (int b = c; b < c + 6; ++b) img.at(a, b, 0) = 0.9;
    }
    ManifestEntry e;
    e.id = "t" + std::to_string(i);
    e.path = e.id + ".png";
    e.patient_id = "p" + std::to_string(i);
    e.fields["body_part"] = i % 4 < 2 ? "hand" : "foot";
    e.labels["toy"] = LabeledTarget::of(regression ? 10.0 * y + rng.uniform() : y);
    d.manifest.entries.push_back(e);
    d.images.push_back(std::move(img));
  }
  return d;
}

class TrackingSource : public SampleSource {
 public:
  explicit TrackingSource(const SampleSource& inner) : inner_(inner) {}
  Image image(const std::string& id) const override {
    touched.insert(id);
    return inner_.image(id);
  }
  LabeledTarget label(const std::string& id, const std::string& task) const override {
    touched.insert(id);
    return inner_.label(id, task);
  }
  mutable std::set<std::string> touched;

 private:
  const SampleSource& inner_;
};

FinetuneConfig quick_config(int epochs) {
  FinetuneConfig c = FinetuneConfig::conv_baseline();
  c.backbone = tiny_conv();
  c.base_lr = 1e-2;
  c.batch_size = 16;
  c.epochs = epochs;
  return c;
}

SplitPlan toy_plan(const DatasetManifest& m, int folds, std::uint64_t seed) {
  SplitOptions o;
  o.folds = folds;
  o.seed = seed;
  o.test_fraction = 0.2;
  o.stratify_key = "toy";
  o.group_key = "patient_id";
  return make_splits(m, o);
}

}  // namespace

TEST_CASE("registry holds the twelve builtin tasks") {
  const auto& tasks = register_builtin_tasks();
  CHECK(tasks.size() == 12);
  for (const char* id : {"wrist-AO-10class", "wrist-fracture", "fracture", "abnormality", "tumor-subtype-9class",
                         "tumor-malignancy", "tumor-presence", "OA-KL-5class", "bone-age-regression", "pes-planus",
                         "wrist-implant", "implant"})
    CHECK(tasks.count(id) == 1);
  for (const auto& [id, t] : tasks) {
    if (t.kind == TaskKind::kBinary) CHECK((t.loss == LossKind::kSigmoidBce && t.metric == SelectionMetric::kAuroc));
    if (t.kind == TaskKind::kMulticlass) CHECK((t.loss == LossKind::kSoftmaxCe && t.metric == SelectionMetric::kAuroc));
    if (t.kind == TaskKind::kRegression) CHECK((t.loss == LossKind::kMse && t.metric == SelectionMetric::kMae));
  }
}

TEST_CASE("task lookup by prefix") {
  CHECK(lookup_task("tumor-subtype").num_classes == 9);
  CHECK(lookup_task("tumor-subtype").output_arity() == 9);
  CHECK(lookup_task("OA-KL").num_classes == 5);
  CHECK(lookup_task("bone-age").kind == TaskKind::kRegression);
  CHECK(lookup_task("bone-age").metric == SelectionMetric::kMae);
  CHECK(lookup_task("wrist-AO").num_classes == 10);
  CHECK(lookup_task("fracture").id == "fracture");
  try {
    lookup_task("bogus");
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNotFound);
    CHECK(std::string(e.what()).find("unknown task") != std::string::npos);
  }
  CHECK_THROWS(lookup_task("tumor"));  // ambiguous: three tumor-* tasks
  CHECK_THROWS(lookup_task("tumor-sub"));
}

TEST_CASE("manifest declaration must agree with the task") {
  DatasetManifest m;
  m.tasks["tumor_subtype"] = {TaskKind::kMulticlass, {"a", "b", "c", "d"}};
  CHECK_THROWS(check_task_against_manifest(lookup_task("tumor-subtype"), m));
  CHECK_THROWS(check_task_against_manifest(lookup_task("pes-planus"), m));
  m.tasks["pes_planus"] = {TaskKind::kBinary, {"no", "yes"}};
  CHECK_NOTHROW(check_task_against_manifest(lookup_task("pes-planus"), m));
  CHECK(resolve_task("tumor_subtype", m).num_classes == 4);
}

TEST_CASE("config defaults and json round trip") {
  const FinetuneConfig t;
  CHECK(t.base_lr == 5e-5);
  CHECK(t.layerwise_lr_decay == 0.75);
  CHECK(t.batch_size == 64);
  CHECK(t.weight_decay == 0.05);
  CHECK(t.warmup_ratio == 0.1);
  CHECK(t.epochs == 50);
  const auto c = FinetuneConfig::conv_baseline();
  CHECK(c.base_lr == 5e-4);
  CHECK(c.weight_decay == 1e-4);
  CHECK(c.layerwise_lr_decay == 1.0);
  auto q = quick_config(3);
  q.init_checkpoint = "x/y";
  const auto back = finetune_config_from_json(to_json(q));
  CHECK(to_json(back) == to_json(q));
  CHECK_THROWS(finetune_config_from_json({{"base_lr", -1.0}}));
}

TEST_CASE("attach_head output arity and bias identity") {
  const auto b = tiny_conv();
  CHECK(attach_head(std::nullopt, lookup_task("fracture"), b).outputs() == 1);
  CHECK(attach_head(std::nullopt, lookup_task("tumor-subtype"), b).outputs() == 9);
  CHECK(attach_head(std::nullopt, lookup_task("bone-age"), b).outputs() == 1);
  const auto model = attach_head(std::nullopt, lookup_task("tumor-subtype"), b, 3);
  const auto& head = model.head();
  const nn::Matrix zero = nn::Matrix::Zero(1, head.in);
  const nn::Matrix out = head.forward(model.params(), zero);
  CHECK((out - model.params().value(head.bias)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("layerwise schedule is geometric") {
  const auto s = layerwise_lr_scales(3, 0.75);
  REQUIRE(s.size() == 3);
  CHECK(s[0] == doctest::Approx(0.5625).epsilon(1e-15));
  CHECK(s[1] == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(s[2] == 1.0);
  const auto l = layerwise_lr_scales(6, 0.6);
  for (std::size_t i = 1; i < l.size(); ++i) CHECK(l[i - 1] / l[i] == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("checkpoint selection picks the earliest best epoch") {
  CHECK(select_best_epoch({0.5, 0.8, 0.7, 0.8}, true) == 2);
  CHECK(select_best_epoch({3.0, 2.0, 2.0, 5.0}, false) == 2);
  CHECK(select_best_epoch({0.6}, true) == 1);
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + trial % 9);
    for (auto& x : v) x = std::round(rng.uniform() * 4) / 4;
    const bool maximize = trial % 2 == 0;
    const int best = select_best_epoch(v, maximize);
    const double target = maximize ? *std::max_element(v.begin(), v.end()) : *std::min_element(v.begin(), v.end());
    CHECK(v[best - 1] == target);
    for (int i = 0; i < best - 1; ++i) CHECK(v[i] != target);
  }
}

TEST_CASE("task metrics trivial cases") {
  const auto task = make_task("toy", TaskKind::kBinary, 2, "toy");
  Predictions p;
  for (int i = 0; i < 10; ++i) {
    p.ids.push_back("x" + std::to_string(i));
    p.labels.push_back(LabeledTarget::of(i % 2));
    p.scores.push_back(i % 2 ? 0.9 : 0.1);
  }
  auto [auc, m] = task_metrics(task, p);
  CHECK(auc == 1.0);
  CHECK(m["balanced_accuracy"] == 1.0);
  CHECK(m["f1"] == 1.0);
  std::fill(p.scores.begin(), p.scores.end(), 0.3);
  CHECK(task_metrics(task, p).first == 0.5);

  // Masked rows are ignored entirely.
  p.labels.push_back(LabeledTarget::unknown());
  p.ids.push_back("masked");
  p.scores.push_back(0.99);
  CHECK(task_metrics(task, p).first == 0.5);

  Predictions one = p;
  for (auto& l : one.labels) l = LabeledTarget::of(1);
  CHECK_THROWS_WITH(task_metrics(task, one), doctest::Contains("AUROC undefined"));

  const auto reg = make_task("age", TaskKind::kRegression, 1, "age");
  Predictions r;
  for (int i = 0; i < 8; ++i) {
    r.ids.push_back("r" + std::to_string(i));
    r.labels.push_back(LabeledTarget::of(i * 3.0));
    r.scores.push_back(i * 3.0 + 1.0);
  }
  const auto [mae, rm] = task_metrics(reg, r);
  CHECK(mae == doctest::Approx(1.0));
  CHECK(rm["rmse"].get<double>() == doctest::Approx(1.0));
}

TEST_CASE("single-epoch cv selects epoch one and never reads test ids") {
  const auto data = toy_data(60, 1);
  const MemorySource mem(data.manifest, data.images);
  TrackingSource src(mem);
  const auto task = make_task("toy", TaskKind::kBinary, 2, "toy");
  const auto plan = toy_plan(data.manifest, 3, 5);
  std::map<int, int> evaluations;
  CvOptions opts;
  opts.on_epoch = [&](int fold, const EpochRecord&) { ++evaluations[fold]; };
  const auto folds = finetune_cv(src, task, plan, quick_config(1), opts);
  REQUIRE(folds.size() == 3);
  for (const auto& f : folds) {
    CHECK(f.fit.history.size() == 1);
    CHECK(f.fit.best_epoch == 1);
  }
  for (int k = 0; k < 3; ++k) CHECK(evaluations[k] == 1);
  for (const auto& id : plan.test_ids) CHECK(src.touched.count(id) == 0);
}

TEST_CASE("restored weights belong to the selected epoch") {
  const auto data = toy_data(40, 2);
  const MemorySource src(data.manifest, data.images);
  const auto task = make_task("toy", TaskKind::kBinary, 2, "toy");
  const auto plan = toy_plan(data.manifest, 2, 1);
  auto folds = finetune_cv(src, task, plan, quick_config(4));
  for (std::size_t k = 0; k < folds.size(); ++k) {
    const auto& f = folds[k];
    std::vector<double> sel;
    for (const auto& h : f.fit.history) sel.push_back(h.selection);
    CHECK(f.fit.best_epoch == select_best_epoch(sel, true));
    std::vector<std::string> val;
    for (const auto& id : plan.folds[k].val_ids) val.push_back(id);
    CHECK(task_metrics(task, predict(f.best, task, src, val)).first == f.fit.best_selection);
  }
}

TEST_CASE("single-class validation fold is rejected") {
  auto data = toy_data(20, 3);
  for (auto& e : data.manifest.entries) e.labels["toy"] = LabeledTarget::of(1);
  const MemorySource src(data.manifest, data.images);
  SplitPlan plan;
  plan.folds.push_back({{"t0", "t1", "t2"}, {"t3", "t4"}});
  plan.test_ids = {"t5"};
  CHECK_THROWS_WITH(finetune_cv(src, make_task("toy", TaskKind::kBinary, 2, "toy"), plan, quick_config(1)),
                    doctest::Contains("AUROC undefined"));
}

TEST_CASE("masked labels are dropped from folds and test") {
  auto data = toy_data(40, 4);
  data.manifest.entries[0].labels["toy"] = LabeledTarget::unknown();
  data.manifest.entries[1].labels["toy"] = LabeledTarget::unknown();
  const MemorySource src(data.manifest, data.images);
  const auto task = make_task("toy", TaskKind::kBinary, 2, "toy");
  SplitPlan plan;
  Fold f;
  for (int i = 0; i < 30; ++i) (i < 22 ? f.train_ids : f.val_ids).push_back("t" + std::to_string(i < 22 ? i : i));
  plan.folds.push_back(f);
  for (int i = 30; i < 40; ++i) plan.test_ids.push_back("t" + std::to_string(i));
  plan.test_ids.push_back("t1");
  const auto folds = finetune_cv(src, task, plan, quick_config(1));
  REQUIRE(folds[0].notes.size() == 1);
  CHECK(folds[0].notes[0].find("dropped 2") != std::string::npos);
  const auto report = evaluate_test({&folds[0].best}, src, data.manifest, plan, task);
  REQUIRE(report.notes.size() == 1);
  CHECK(report.notes[0].find("excluded 1") != std::string::npos);

  SplitPlan all_masked = plan;
  all_masked.test_ids = {"t0", "t1"};
  CHECK_THROWS_WITH(evaluate_test({&folds[0].best}, src, data.manifest, all_masked, task),
                    doctest::Contains("missing labels"));
}

TEST_CASE("separable task reaches high test auroc with subgroups and run files") {
  const auto data = toy_data(120, 5);
  const MemorySource src(data.manifest, data.images);
  const auto task = make_task("toy", TaskKind::kBinary, 2, "toy");
  const auto plan = toy_plan(data.manifest, 5, 2);
  const auto dir = std::filesystem::path(RADMAE_TEST_DATA_DIR) / "finetune_run";
  std::filesystem::remove_all(dir);
  CvOptions opts;
  opts.run_dir = dir;
  const auto cfg = quick_config(30);
  const auto folds = finetune_cv(src, task, plan, cfg, opts);
  std::vector<const TaskModel*> models;
  for (const auto& f : folds) models.push_back(&f.best);
  const auto report = evaluate_test(models, src, data.manifest, plan, task, std::string("body_part"));
  MESSAGE("separable toy test AUROC mean ", report.metrics.at("auroc").mean, " folds ", nlohmann::json(report.metrics.at("auroc").per_fold).dump());
  CHECK(report.metrics.at("auroc").mean >= 0.95);
  CHECK(report.metrics.at("auroc").per_fold.size() == 5);
  CHECK(report.metrics.count("balanced_accuracy") == 1);
  CHECK(report.subgroups.count("hand") == 1);
  CHECK(report.subgroups.count("foot") == 1);
  const auto j = to_json(report);
  CHECK(j["metrics"].contains("auroc"));

  for (int k = 0; k < 5; ++k) {
    const auto fd = dir / ("fold" + std::to_string(k));
    std::ifstream h(fd / "history.jsonl");
    int lines = 0;
    for (std::string line; std::getline(h, line);) {
      const auto rec = nlohmann::json::parse(line);
      CHECK(rec.contains("auroc"));
      ++lines;
    }
    CHECK(lines == cfg.epochs);
    nlohmann::json extra;
    std::string kind;
    const auto loaded = Classifier::load(fd / "best.ckpt", &extra, &kind);
    CHECK(kind == "classifier");
    CHECK(extra["best_epoch"] == folds[static_cast<std::size_t>(k)].fit.best_epoch);
    CHECK(extra["finetune"] == to_json(cfg));
    const auto& img = data.images[0];
    CHECK((loaded.logits(img) - folds[static_cast<std::size_t>(k)].best.model.logits(img)).cwiseAbs().maxCoeff() <
          1e-12);
  }
}

TEST_CASE("regression task standardises targets and reports mae") {
  const auto data = toy_data(60, 6, true);
  const MemorySource src(data.manifest, data.images);
  const auto task = make_task("toy", TaskKind::kRegression, 1, "toy");
  const auto plan = toy_plan(data.manifest, 2, 3);
  const auto folds = finetune_cv(src, task, plan, quick_config(10));
  for (const auto& f : folds) {
    CHECK(f.best.target_std > 1.0);
    CHECK(f.fit.best_selection < 5.0);  // predicting the mean would give about 5
  }
  std::vector<const TaskModel*> models{&folds[0].best, &folds[1].best};
  const auto report = evaluate_test(models, src, data.manifest, plan, task);
  CHECK(report.metrics.count("mae") == 1);
  CHECK(report.metrics.count("rmse") == 1);
}

TEST_CASE("label-efficiency sweep sizes and identity fraction") {
  const auto data = toy_data(80, 7);
  const MemorySource src(data.manifest, data.images);
  const auto task = make_task("toy", TaskKind::kBinary, 2, "toy");
  const auto plan = toy_plan(data.manifest, 2, 4);
  const auto n = plan.pool_ids().size();
  const auto cfg = quick_config(2);
  const auto sweep = label_efficiency_sweep(src, data.manifest, task, plan, {0.5, 1.0}, {11}, cfg);
  REQUIRE(sweep.points.size() == 2);
  CHECK(sweep.points[0].train_size == static_cast<std::size_t>(std::ceil(0.5 * static_cast<double>(n))));
  CHECK(sweep.points[0].test_size == plan.test_ids.size() + n - sweep.points[0].train_size);
  CHECK(sweep.points[1].train_size == n);

  auto direct_cfg = cfg;
  direct_cfg.seed = 11;
  const auto folds = finetune_cv(src, task, plan, direct_cfg);
  std::vector<const TaskModel*> models;
  for (const auto& f : folds) models.push_back(&f.best);
  const auto report = evaluate_test(models, src, data.manifest, plan, task);
  CHECK(sweep.points[1].metric == report.metrics.at("auroc").mean);
  CHECK(kDefaultSweepFractions == std::vector<double>{0.1, 0.2, 0.5, 0.9});
  CHECK_THROWS(label_efficiency_sweep(src, data.manifest, task, plan, {0.0}, {1}, cfg));
  CHECK(to_json(sweep)["summary"].size() == 2);
}
