#include "radmae.h"

#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>

#include <json.hpp>

#include "radmae/checkpoint.hpp"
#include "radmae/error.hpp"
#include "radmae/errormap.hpp"
#include "radmae/finetune.hpp"
#include "radmae/mae.hpp"
#include "radmae/multihead.hpp"
#include "radmae/synthgen.hpp"

using nlohmann::json;
namespace fs = std::filesystem;
using namespace radmae;

struct rmae_model {
  region::MultiheadModel model;
  std::unique_ptr<region::Proposer> proposer;
  bool include_whole_image = false;
};

namespace {

thread_local std::string last_error;

std::mutex log_mu;
rmae_log_fn log_fn = nullptr;
void* log_user = nullptr;

void emit(const json& event) {
  std::lock_guard lock(log_mu);
  if (log_fn) log_fn(event.dump().c_str(), log_user);
}

rmae_status status_of(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return RMAE_INVALID_ARGUMENT;
    case ErrorCode::kIo: return RMAE_IO;
    case ErrorCode::kParse: return RMAE_PARSE;
    case ErrorCode::kNumeric: return RMAE_NUMERIC;
    case ErrorCode::kNotFound: return RMAE_NOT_FOUND;
    case ErrorCode::kInternal: return RMAE_INTERNAL;
  }
  return RMAE_INTERNAL;
}

char* dup_string(const std::string& s) {
  auto* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

template <typename F>
rmae_status guarded(F&& body) {
  try {
    body();
    return RMAE_OK;
  } catch (const Error& e) {
    last_error = e.what();
    return status_of(e.code());
  } catch (const json::exception& e) {
    last_error = std::string("json: ") + e.what();
    return RMAE_PARSE;
  } catch (const fs::filesystem_error& e) {
    last_error = e.what();
    return RMAE_IO;
  } catch (const std::exception& e) {
    last_error = e.what();
    return RMAE_INTERNAL;
  } catch (...) {
    last_error = "unknown failure";
    return RMAE_INTERNAL;
  }
}

json parse_config(const char* text) {
  if (!text || !*text) return json::object();
  json j = json::parse(text);
  if (!j.is_object()) fail_parse("configuration must be a JSON object");
  return j;
}

void put_result(char** out, const json& j) {
  if (!out) fail("result pointer is null");
  *out = dup_string(j.dump());
}

std::string require_string(const json& cfg, const char* key) {
  if (!cfg.contains(key) || !cfg.at(key).is_string() || cfg.at(key).get<std::string>().empty())
    fail(std::string("missing '") + key + "'");
  return cfg.at(key).get<std::string>();
}

json section(const json& cfg, const char* key) {
  return cfg.contains(key) && cfg.at(key).is_object() ? cfg.at(key) : json::object();
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail_io("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail_io("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail_parse(path.string() + ": " + e.what());
  }
}

std::string utc_stamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

// runs/<task>/<timestamp>, with a numeric suffix when the stamp is taken.
fs::path fresh_run_dir(const json& cfg, const std::string& task) {
  if (cfg.contains("run_dir") && cfg.at("run_dir").is_string()) return cfg.at("run_dir").get<std::string>();
  const fs::path base = fs::path(cfg.value("runs_dir", std::string("runs"))) / task;
  const std::string stamp = utc_stamp();
  fs::path dir = base / stamp;
  for (int i = 1; fs::exists(dir); ++i) dir = base / (stamp + "-" + std::to_string(i));
  return dir;
}

// Encoder geometry of an MAE checkpoint, used when a backbone is initialised from it.
std::optional<EncoderConfig> checkpoint_encoder(const json& finetune) {
  if (!finetune.contains("init_checkpoint") || !finetune.at("init_checkpoint").is_string()) return std::nullopt;
  const auto meta = read_checkpoint_meta(finetune.at("init_checkpoint").get<std::string>());
  return mae_config_from_json(meta.config).encoder;
}

// "desk" sizes a ViT to the toy MAE geometry; "full" keeps the library defaults.
FinetuneConfig finetune_defaults(const json& cfg) {
  FinetuneConfig c;
  if (cfg.value("preset", std::string("desk")) == "desk") {
    c.backbone.encoder = toy_mae_config().encoder;
    c.base_lr = 1e-3;
    c.epochs = 20;
    c.batch_size = 32;
  }
  const json ft = section(cfg, "finetune");
  if (auto enc = checkpoint_encoder(ft)) c.backbone.encoder = *enc;
  return finetune_config_from_json(ft, c);
}

region::MultiheadConfig multihead_defaults(const json& cfg) {
  region::MultiheadConfig c;
  if (cfg.value("preset", std::string("desk")) == "desk") {
    c.backbone.kind = "conv";
    c.backbone.encoder.image_height = 32;
    c.backbone.encoder.image_width = 32;
    c.backbone.encoder.channels = 1;
    c.backbone.encoder.patch = 4;
    c.backbone.conv_width = 16;
    c.backbone.conv_out = 64;
    c.base_lr = 3e-3;
    c.layerwise_lr_decay = 1.0;
    c.epochs = 40;
    c.batch_size = 32;
  }
  return region::multihead_config_from_json(section(cfg, "multihead"), c);
}

SplitOptions split_options(const json& cfg, const DatasetManifest& manifest, const std::optional<std::string>& stratify) {
  const json s = section(cfg, "splits");
  SplitOptions o;
  o.test_fraction = s.value("test_fraction", o.test_fraction);
  o.folds = s.value("folds", o.folds);
  o.seed = s.value("seed", o.seed);
  o.stratify_key = stratify;
  if (s.contains("stratify")) {
    o.stratify_key = s.at("stratify").is_null() ? std::nullopt : std::optional(s.at("stratify").get<std::string>());
  }
  bool all_have_patient = !manifest.entries.empty();
  for (const auto& e : manifest.entries) all_have_patient = all_have_patient && e.patient_id.has_value();
  if (all_have_patient) o.group_key = "patient_id";
  if (s.contains("group_key")) {
    o.group_key = s.at("group_key").is_null() ? std::nullopt : std::optional(s.at("group_key").get<std::string>());
  }
  return o;
}

SplitPlan load_or_make_plan(const json& cfg, const DatasetManifest& manifest, const std::optional<std::string>& stratify) {
  if (cfg.contains("plan") && cfg.at("plan").is_string()) return split_plan_from_json(read_json(cfg.at("plan").get<std::string>()));
  return make_splits(manifest, split_options(cfg, manifest, stratify));
}

std::optional<std::string> group_field(const json& cfg) {
  if (!cfg.contains("group_field")) return std::string("body_part");
  if (cfg.at("group_field").is_null()) return std::nullopt;
  return cfg.at("group_field").get<std::string>();
}

void emit_epoch(const std::string& task, int fold, const EpochRecord& r) {
  emit({{"event", "epoch"},
        {"task", task},
        {"fold", fold},
        {"epoch", r.epoch},
        {"train_loss", r.train_loss},
        {"lr", r.lr},
        {"selection", r.selection}});
}

json run_multihead(const json& cfg) {
  const fs::path manifest_path = require_string(cfg, "manifest");
  const auto manifest = load_manifest(manifest_path);
  auto mh = multihead_defaults(cfg);
  mh.group_field = group_field(cfg);
  const fs::path dir = fresh_run_dir(cfg, "multihead");
  const auto plan = load_or_make_plan(cfg, manifest, std::string("abnormality"));
  json echo = cfg;
  echo["multihead"] = region::to_json(mh);
  write_json(dir / "config.json", echo);
  write_json(dir / "plan.json", split_plan_to_json(plan));
  ManifestSource source(manifest, mh.source_height, mh.source_width, mh.backbone.encoder.channels);
  region::MultiheadOptions opt;
  opt.run_dir = dir;
  opt.on_epoch = [](int fold, const EpochRecord& r) { emit_epoch("multihead", fold, r); };
  const auto report = region::train_multihead(source, manifest, plan, mh, opt);
  json out = region::to_json(report);
  write_json(dir / "report.json", out);
  out["run_dir"] = dir.string();
  return out;
}

json run_finetune(const json& cfg) {
  const std::string task_name = require_string(cfg, "task");
  if (task_name == "multihead") return run_multihead(cfg);
  // Without a manifest only builtins can match; fail on the task name first.
  if (!cfg.contains("manifest")) lookup_task(task_name);
  const auto manifest = load_manifest(require_string(cfg, "manifest"));
  const TaskSpec task = resolve_task(task_name, manifest);
  check_task_against_manifest(task, manifest);
  const auto config = finetune_defaults(cfg);
  const std::optional<std::string> stratify =
      task.kind == TaskKind::kRegression ? std::nullopt : std::optional(task.label_key);
  const auto plan = load_or_make_plan(cfg, manifest, stratify);
  const fs::path dir = fresh_run_dir(cfg, task.id);
  json echo = cfg;
  echo["task"] = task.id;
  echo["finetune"] = to_json(config);
  write_json(dir / "config.json", echo);
  write_json(dir / "plan.json", split_plan_to_json(plan));

  const auto& enc = config.backbone.encoder;
  ManifestSource source(manifest, enc.image_height, enc.image_width, enc.channels);
  CvOptions opt;
  opt.run_dir = dir;
  opt.on_epoch = [&](int fold, const EpochRecord& r) { emit_epoch(task.id, fold, r); };
  const auto folds = finetune_cv(source, task, plan, config, opt);
  std::vector<const TaskModel*> models;
  for (const auto& f : folds) models.push_back(&f.best);
  const auto report = evaluate_test(models, source, manifest, plan, task, group_field(cfg));
  json out = to_json(report);
  json fold_notes = json::array();
  for (const auto& f : folds) fold_notes.push_back(f.notes);
  out["fold_notes"] = fold_notes;
  write_json(dir / "report.json", out);
  out["run_dir"] = dir.string();
  return out;
}

json run_sweep(const json& cfg) {
  const auto manifest = load_manifest(require_string(cfg, "manifest"));
  const TaskSpec task = resolve_task(require_string(cfg, "task"), manifest);
  check_task_against_manifest(task, manifest);
  const auto config = finetune_defaults(cfg);
  const auto fractions = cfg.value("fractions", kDefaultSweepFractions);
  const auto seeds = cfg.value("seeds", std::vector<std::uint64_t>{0, 1, 2});
  const std::optional<std::string> stratify =
      task.kind == TaskKind::kRegression ? std::nullopt : std::optional(task.label_key);
  const auto plan = load_or_make_plan(cfg, manifest, stratify);
  const fs::path dir = fresh_run_dir(cfg, task.id + "-sweep");
  json echo = cfg;
  echo["task"] = task.id;
  echo["finetune"] = to_json(config);
  echo["fractions"] = fractions;
  echo["seeds"] = seeds;
  write_json(dir / "config.json", echo);
  write_json(dir / "plan.json", split_plan_to_json(plan));
  const auto& enc = config.backbone.encoder;
  ManifestSource source(manifest, enc.image_height, enc.image_width, enc.channels);
  const auto result = label_efficiency_sweep(source, manifest, task, plan, fractions, seeds, config, [&](const SweepPoint& p) {
    emit({{"event", "sweep_point"}, {"fraction", p.fraction}, {"seed", p.seed}, {"metric", p.metric}});
  });
  json out = to_json(result);
  write_json(dir / "sweep.json", out);
  out["run_dir"] = dir.string();
  return out;
}

json run_pretrain(const json& cfg) {
  const auto manifest = load_manifest(require_string(cfg, "manifest"));
  const fs::path out_dir = require_string(cfg, "out");
  const MaeConfig defaults = cfg.value("preset", std::string("desk")) == "desk" ? toy_mae_config() : MaeConfig{};
  const MaeConfig mae = mae_config_from_json(section(cfg, "mae"), defaults);
  json echo = cfg;
  echo["mae"] = to_json(mae);
  write_json(out_dir / "config.json", echo);
  PretrainOptions opt;
  if (cfg.contains("init_checkpoint") && cfg.at("init_checkpoint").is_string())
    opt.init_checkpoint = cfg.at("init_checkpoint").get<std::string>();
  opt.on_step = [](long step, double loss) {
    if (step % 50 == 0) emit({{"event", "step"}, {"step", step}, {"loss", loss}});
  };
  const auto result = pretrain(manifest, mae, out_dir, opt);
  json out{{"steps", result.steps},
           {"epoch_losses", result.epoch_losses},
           {"last_checkpoint", result.last_checkpoint.string()},
           {"best_checkpoint", result.best_checkpoint.string()}};
  write_json(out_dir / "pretrain.json", out);
  return out;
}

json run_synth(const json& cfg) {
  const fs::path out_dir = require_string(cfg, "out");
  const auto spec = synth::corpus_spec_from_json(section(cfg, "corpus"));
  const auto manifest = synth::build_corpus(spec, out_dir);
  json echo = cfg;
  echo["corpus"] = synth::to_json(spec);
  write_json(out_dir / "config.json", echo);
  return {{"manifest", (out_dir / "manifest.json").string()}, {"entries", manifest.entries.size()}};
}

json map_image(const MaeModel& model, const Image& image, const errormap::MapOptions& options, const fs::path& out_dir,
               const std::string& stem) {
  const auto map = errormap::generate_error_map(image, model, options);
  fs::create_directories(out_dir);
  errormap::write_pfm(out_dir / (stem + ".pfm"), map);
  errormap::write_coverage_pgm(out_dir / (stem + ".coverage.pgm"), map);
  write_png(out_dir / (stem + ".heatmap.png"), errormap::render_heatmap(map));
  const std::size_t total = static_cast<std::size_t>(map.height) * map.width;
  json j{{"id", stem},
         {"score", errormap::score_image(map)},
         {"passes", map.n_passes},
         {"height", map.height},
         {"width", map.width},
         {"defined_pixels", map.defined_count()},
         {"undefined_pixels", total - map.defined_count()},
         {"pfm", stem + ".pfm"},
         {"heatmap", stem + ".heatmap.png"},
         {"coverage", stem + ".coverage.pgm"}};
  write_json(out_dir / (stem + ".json"), j);
  return j;
}

json run_errormap(const json& cfg) {
  const fs::path ckpt = require_string(cfg, "checkpoint");
  const fs::path out_dir = cfg.value("out", std::string("errormap"));
  const MaeModel model = MaeModel::load(ckpt);
  const auto& enc = model.config().encoder;
  errormap::MapOptions options;
  options.n_passes = cfg.value("passes", options.n_passes);
  options.seed = cfg.value("seed", options.seed);
  if (cfg.contains("mask_ratio") && cfg.at("mask_ratio").is_number()) options.mask_ratio = cfg.at("mask_ratio").get<double>();
  write_json(out_dir / "config.json", cfg);

  if (cfg.contains("image") && cfg.at("image").is_string()) {
    const fs::path path = cfg.at("image").get<std::string>();
    const auto sample = ingest_image(path, enc.image_height, enc.image_width, enc.channels);
    return map_image(model, sample.pixels, options, out_dir, path.stem().string());
  }

  // Manifest mode: score every entry, then compare normals against abnormals.
  const auto manifest = load_manifest(require_string(cfg, "manifest"));
  const std::string label = cfg.value("label", std::string("abnormality"));
  const std::size_t limit = cfg.value("limit", manifest.entries.size());
  std::vector<double> normal, abnormal;
  json scores = json::array();
  for (std::size_t i = 0; i < manifest.entries.size() && i < limit; ++i) {
    const auto& e = manifest.entries[i];
    const auto sample = ingest_image(manifest.image_path(e), enc.image_height, enc.image_width, enc.channels);
    json row = map_image(model, sample.pixels, options, out_dir / "maps", e.id);
    if (const auto it = e.labels.find(label); it != e.labels.end() && !it->second.masked) {
      (it->second.value > 0.5 ? abnormal : normal).push_back(row["score"].get<double>());
      row["label"] = it->second.value;
    }
    scores.push_back(row);
    emit({{"event", "errormap"}, {"id", e.id}, {"score", row["score"]}});
  }
  json out{{"scores", scores}};
  if (!normal.empty() && !abnormal.empty()) out["comparison"] = errormap::to_json(errormap::compare_groups(normal, abnormal));
  write_json(out_dir / "scores.json", out);
  return out;
}

json run_evaluate(const json& cfg) {
  if (cfg.contains("a") || cfg.contains("b")) {
    const auto a = cfg.at("a").get<std::vector<double>>();
    const auto b = cfg.at("b").get<std::vector<double>>();
    return to_json(stats::compare_models(a, b, cfg.value("alpha", 0.05)));
  }
  const fs::path dir = require_string(cfg, "run");
  const json echo = read_json(dir / "config.json");
  if (echo.value("task", std::string()) == "multihead") fail("evaluate supports single-task runs; multihead runs carry report.json");
  const auto manifest = load_manifest(cfg.value("manifest", echo.value("manifest", std::string())));
  const auto plan = split_plan_from_json(read_json(dir / "plan.json"));
  std::vector<TaskModel> models;
  TaskSpec task;
  for (std::size_t k = 0; k < plan.folds.size(); ++k) {
    const fs::path ckpt = dir / ("fold" + std::to_string(k)) / "best.ckpt";
    if (!fs::exists(ckpt)) fail_io("missing checkpoint " + ckpt.string());
    models.push_back(load_task_model(ckpt, &task));
  }
  check_task_against_manifest(task, manifest);
  const auto& enc = models.front().model.config().encoder;
  ManifestSource source(manifest, enc.image_height, enc.image_width, enc.channels);
  std::vector<const TaskModel*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  const auto report = evaluate_test(ptrs, source, manifest, plan, task, group_field(cfg.contains("group_field") ? cfg : echo));
  json out = to_json(report);
  write_json(dir / "evaluate.json", out);
  return out;
}

rmae_status run(const char* config_json, char** result_json, json (*fn)(const json&)) {
  return guarded([&] { put_result(result_json, fn(parse_config(config_json))); });
}

}  // namespace

extern "C" {

const char* rmae_version(void) { return "0.1.0"; }

const char* rmae_status_name(rmae_status status) {
  switch (status) {
    case RMAE_OK: return "ok";
    case RMAE_INVALID_ARGUMENT: return "invalid_argument";
    case RMAE_IO: return "io";
    case RMAE_PARSE: return "parse";
    case RMAE_NUMERIC: return "numeric";
    case RMAE_NOT_FOUND: return "not_found";
    case RMAE_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* rmae_last_error(void) { return last_error.c_str(); }

void rmae_free_string(char* s) { std::free(s); }

void rmae_set_log(rmae_log_fn fn, void* user) {
  std::lock_guard lock(log_mu);
  log_fn = fn;
  log_user = user;
}

rmae_status rmae_synth(const char* c, char** r) { return run(c, r, run_synth); }
rmae_status rmae_pretrain(const char* c, char** r) { return run(c, r, run_pretrain); }
rmae_status rmae_finetune(const char* c, char** r) { return run(c, r, run_finetune); }
rmae_status rmae_sweep(const char* c, char** r) { return run(c, r, run_sweep); }
rmae_status rmae_errormap(const char* c, char** r) { return run(c, r, run_errormap); }
rmae_status rmae_evaluate(const char* c, char** r) { return run(c, r, run_evaluate); }

rmae_status rmae_tasks(char** result_json) {
  return guarded([&] {
    json out = json::array();
    for (const auto& [id, t] : register_builtin_tasks())
      out.push_back({{"id", id},
                     {"kind", to_string(t.kind)},
                     {"num_classes", t.num_classes},
                     {"label_key", t.label_key},
                     {"metric", to_string(t.metric)},
                     {"description", t.description}});
    put_result(result_json, out);
  });
}

rmae_status rmae_model_load(const char* checkpoint, const char* options_json, rmae_model** model) {
  return guarded([&] {
    if (!checkpoint || !model) fail("checkpoint and model pointers are required");
    const json opt = parse_config(options_json);
    auto m = std::make_unique<rmae_model>(rmae_model{region::load_multihead(checkpoint), nullptr, false});
    if (opt.contains("detections") && opt.at("detections").is_string()) {
      m->proposer = std::make_unique<region::DetectionJsonProposer>(
          region::DetectionJsonProposer::from_file(opt.at("detections").get<std::string>(), opt.value("min_score", 0.0)));
    } else {
      m->proposer = std::make_unique<region::WholeImageProposer>();
    }
    m->include_whole_image = opt.value("include_whole_image", false);
    *model = m.release();
  });
}

void rmae_model_free(rmae_model* model) { delete model; }

rmae_status rmae_model_info(const rmae_model* model, char** info_json) {
  return guarded([&] {
    if (!model) fail("model is null");
    const auto& cfg = model->model.model.config();
    put_result(info_json, {{"model_version", model->model.version},
                           {"proposer", model->proposer->name()},
                           {"backbone", to_json(cfg)},
                           {"source_size", {model->model.source_height, model->model.source_width}},
                           {"outputs", model->model.model.outputs()}});
  });
}

rmae_status rmae_model_predict(const rmae_model* model, const uint8_t* bytes, size_t size, const char* options_json,
                               char** prediction_json) {
  return guarded([&] {
    if (!model) fail("model is null");
    if (!bytes || size == 0) fail_parse("empty image upload");
    const json opt = parse_config(options_json);
    region::AggregationOptions agg;
    agg.threshold = opt.value("threshold", agg.threshold);
    if (!(agg.threshold >= 0.0 && agg.threshold <= 1.0)) fail("threshold must be in [0, 1]");
    if (opt.contains("trigger")) agg.trigger = region::tumor_trigger_from_string(opt.at("trigger").get<std::string>());
    const auto& m = model->model;
    const auto sample = ingest_image(std::span<const std::uint8_t>(bytes, size), m.source_height, m.source_width,
                                     m.model.config().encoder.channels);
    std::vector<std::string> warnings;
    const std::string id = opt.value("image_id", std::string());
    const auto boxes = region::propose_regions(sample.pixels, *model->proposer, id, &warnings, model->include_whole_image);
    const auto regions = region::predict_regions(m.model, sample.pixels, boxes, m.crop);
    json out = region::to_json(region::aggregate_image(regions, agg));
    out["schema_version"] = "1.0";
    out["image_id"] = id;
    out["model_version"] = m.version;
    out["warnings"] = warnings;
    put_result(prediction_json, out);
  });
}

}  // extern "C"
