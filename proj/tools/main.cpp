#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "radmae.h"
#include "service.hpp"

using nlohmann::json;

namespace {

// Exit codes: the C API status, or 64 for command-line misuse.
constexpr int kUsageExit = 64;

void error_line(const std::string& kind, int code, const std::string& message) {
  std::cerr << json{{"error", kind}, {"code", code}, {"message", message}}.dump() << std::endl;
}

json read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path);
  json j = json::parse(in);
  if (!j.is_object()) throw std::runtime_error("config " + path + " must hold a JSON object");
  return j;
}

// "a.b.c=value": value parsed as JSON when possible, else taken as a string.
void apply_set(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::runtime_error("--set expects key=value, got '" + assignment + "'");
  std::string pointer = "/" + assignment.substr(0, eq);
  for (auto& c : pointer)
    if (c == '.') c = '/';
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  cfg[json::json_pointer(pointer)] = value;
}

struct Overrides {
  std::vector<std::pair<std::string, std::function<json()>>> items;

  template <typename T>
  void bind(CLI::App* app, const std::string& flag, const std::string& key, T& storage, const std::string& help) {
    auto* opt = app->add_option(flag, storage, help);
    items.emplace_back(key, [opt, &storage]() -> json { return opt->count() ? json(storage) : json(); });
  }

  void apply(json& cfg) const {
    for (const auto& [key, get] : items) {
      json v = get();
      if (v.is_null()) continue;
      std::string pointer = "/" + key;
      for (auto& c : pointer)
        if (c == '.') c = '/';
      cfg[json::json_pointer(pointer)] = v;
    }
  }
};

void log_to_stderr(const char* line, void*) { std::cerr << line << std::endl; }

int report(rmae_status st, char* result) {
  if (st != RMAE_OK) {
    error_line(rmae_status_name(st), static_cast<int>(st), rmae_last_error());
    return static_cast<int>(st);
  }
  std::cout << json::parse(result).dump(2) << std::endl;
  rmae_free_string(result);
  return 0;
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

httplib::Server* running_server = nullptr;

void stop_server(int) {
  if (running_server) running_server->stop();
}

int serve(const json& cfg) {
  const std::string ckpt = cfg.value("checkpoint", std::string());
  if (ckpt.empty()) {
    error_line("invalid_argument", RMAE_INVALID_ARGUMENT, "missing 'checkpoint'");
    return RMAE_INVALID_ARGUMENT;
  }
  json load_opt = json::object();
  if (cfg.contains("detections")) load_opt["detections"] = cfg.at("detections");
  if (cfg.contains("min_score")) load_opt["min_score"] = cfg.at("min_score");
  if (cfg.contains("include_whole_image")) load_opt["include_whole_image"] = cfg.at("include_whole_image");
  rmae_model* model = nullptr;
  if (const auto st = rmae_model_load(ckpt.c_str(), load_opt.dump().c_str(), &model); st != RMAE_OK)
    return report(st, nullptr);

  radmae::service::ServiceOptions opt;
  opt.threads = cfg.value("threads", opt.threads);
  opt.log_level = radmae::service::log_level_from_string(cfg.value("log_level", env_or("RADMAE_LOG_LEVEL", "info")));
  auto server = radmae::service::make_server(model, opt);
  const std::string host = cfg.value("host", env_or("RADMAE_HOST", "127.0.0.1"));
  const int port = cfg.value("port", std::stoi(env_or("RADMAE_PORT", "8080")));
  if (!server->bind_to_port(host, port)) {
    error_line("io", RMAE_IO, "cannot bind " + host + ":" + std::to_string(port));
    rmae_model_free(model);
    return RMAE_IO;
  }
  running_server = server.get();
  std::signal(SIGINT, stop_server);
  std::signal(SIGTERM, stop_server);
  std::cerr << json{{"event", "listening"}, {"host", host}, {"port", port}}.dump() << std::endl;
  server->listen_after_bind();
  running_server = nullptr;
  rmae_model_free(model);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"radmae: masked-autoencoder radiograph toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(rmae_version()));

  std::string config_path;
  std::vector<std::string> sets;
  Overrides ov;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--set", sets, "Override a config key, e.g. --set finetune.epochs=5")->take_all();
  };

  int n_normal = 0, n_abnormal = 0, epochs = 0, folds = 0, passes = 0, port = 0, threads = 0;
  std::uint64_t seed = 0;
  long max_steps = 0;
  std::size_t limit = 0;
  double lr = 0.0, mask_ratio = 0.0, min_score = 0.0, test_fraction = 0.0, alpha = 0.0;
  std::string out, manifest, task, preset, init_ckpt, runs_dir, run_dir, image, ckpt, detections, host, backbone, plan,
      run, label, log_level;
  std::vector<double> fractions, a_values, b_values;
  std::vector<int> size;
  std::vector<std::uint64_t> seeds;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic radiograph corpus");
  common(synth);
  ov.bind(synth, "--out", "out", out, "Output directory");
  ov.bind(synth, "--n-normal", "corpus.n_normal", n_normal, "Normal images");
  ov.bind(synth, "--n-abnormal", "corpus.n_abnormal", n_abnormal, "Abnormal images");
  ov.bind(synth, "--seed", "corpus.seed", seed, "Seed");
  ov.bind(synth, "--size", "corpus.size", size, "Image side, or height and width");

  auto* pre = app.add_subcommand("pretrain", "Masked-autoencoder pretraining");
  common(pre);
  ov.bind(pre, "--manifest", "manifest", manifest, "Corpus manifest");
  ov.bind(pre, "--out", "out", out, "Checkpoint directory");
  ov.bind(pre, "--preset", "preset", preset, "desk | full");
  ov.bind(pre, "--epochs", "mae.epochs", epochs, "Epochs");
  ov.bind(pre, "--max-steps", "mae.max_steps", max_steps, "Optimizer step cap");
  ov.bind(pre, "--seed", "mae.seed", seed, "Seed");
  ov.bind(pre, "--init-checkpoint", "init_checkpoint", init_ckpt, "Initial weights");

  auto add_training = [&](CLI::App* sub) {
    ov.bind(sub, "--manifest", "manifest", manifest, "Dataset manifest");
    ov.bind(sub, "--task", "task", task, "Task id, or 'multihead'");
    ov.bind(sub, "--preset", "preset", preset, "desk | full");
    ov.bind(sub, "--runs-dir", "runs_dir", runs_dir, "Root for runs/<task>/<timestamp>");
    ov.bind(sub, "--run-dir", "run_dir", run_dir, "Explicit run directory");
    ov.bind(sub, "--plan", "plan", plan, "Split plan JSON to reuse");
    ov.bind(sub, "--folds", "splits.folds", folds, "Cross-validation folds");
    ov.bind(sub, "--test-fraction", "splits.test_fraction", test_fraction, "Held-out test fraction");
  };

  auto* ft = app.add_subcommand("finetune", "Cross-validated fine-tuning on a downstream task");
  common(ft);
  add_training(ft);
  ov.bind(ft, "--epochs", "finetune.epochs", epochs, "Epochs");
  ov.bind(ft, "--lr", "finetune.base_lr", lr, "Base learning rate");
  ov.bind(ft, "--seed", "finetune.seed", seed, "Seed");
  ov.bind(ft, "--backbone", "finetune.backbone.kind", backbone, "vit | conv");
  ov.bind(ft, "--backbone-checkpoint", "finetune.init_checkpoint", init_ckpt, "MAE checkpoint for the encoder");

  auto* sw = app.add_subcommand("sweep", "Label-efficiency sweep");
  common(sw);
  add_training(sw);
  ov.bind(sw, "--epochs", "finetune.epochs", epochs, "Epochs");
  ov.bind(sw, "--fractions", "fractions", fractions, "Training fractions");
  ov.bind(sw, "--seeds", "seeds", seeds, "Sweep seeds");
  ov.bind(sw, "--backbone-checkpoint", "finetune.init_checkpoint", init_ckpt, "MAE checkpoint for the encoder");

  auto* em = app.add_subcommand("errormap", "Zero-shot reconstruction error maps");
  common(em);
  ov.bind(em, "--image", "image", image, "Single image");
  ov.bind(em, "--manifest", "manifest", manifest, "Score every manifest entry");
  ov.bind(em, "--ckpt,--checkpoint", "checkpoint", ckpt, "MAE checkpoint");
  ov.bind(em, "--passes", "passes", passes, "Masking passes");
  ov.bind(em, "--seed", "seed", seed, "Seed");
  ov.bind(em, "--mask-ratio", "mask_ratio", mask_ratio, "Mask ratio override");
  ov.bind(em, "--out", "out", out, "Output directory");
  ov.bind(em, "--limit", "limit", limit, "Maximum manifest entries");
  ov.bind(em, "--label", "label", label, "Binary label splitting normal from abnormal");

  auto* ev = app.add_subcommand("evaluate", "Re-evaluate a run on its test set, or compare per-fold metrics");
  common(ev);
  ov.bind(ev, "--run", "run", run, "Run directory");
  ov.bind(ev, "--manifest", "manifest", manifest, "Manifest override");
  ov.bind(ev, "--a", "a", a_values, "Per-fold metric values of model A");
  ov.bind(ev, "--b", "b", b_values, "Per-fold metric values of model B");
  ov.bind(ev, "--alpha", "alpha", alpha, "Significance level");

  auto* sv = app.add_subcommand("serve", "HTTP inference service");
  common(sv);
  ov.bind(sv, "--ckpt,--checkpoint", "checkpoint", ckpt, "Multi-head checkpoint");
  ov.bind(sv, "--detections", "detections", detections, "Detection JSON for region proposals");
  ov.bind(sv, "--min-score", "min_score", min_score, "Minimum detection score");
  ov.bind(sv, "--host", "host", host, "Bind address (env RADMAE_HOST)");
  ov.bind(sv, "--port", "port", port, "Port (env RADMAE_PORT)");
  ov.bind(sv, "--threads", "threads", threads, "Worker threads");
  ov.bind(sv, "--log-level", "log_level", log_level, "error | info | debug (env RADMAE_LOG_LEVEL)");

  if (argc > 1 && argv[1][0] != '-' && !app.get_subcommand_no_throw(argv[1])) {
    error_line("usage", kUsageExit, std::string("unknown subcommand '") + argv[1] + "'");
    return kUsageExit;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    error_line("usage", kUsageExit, e.what());
    return kUsageExit;
  }

  json cfg = json::object();
  try {
    if (!config_path.empty()) cfg = read_config(config_path);
    ov.apply(cfg);
    for (const auto& s : sets) apply_set(cfg, s);
    // Training flags land under "finetune"; the multi-head trainer reads "multihead".
    if (cfg.value("task", std::string()) == "multihead" && cfg.contains("finetune") && !cfg.contains("multihead")) {
      cfg["multihead"] = cfg["finetune"];
      cfg.erase("finetune");
    }
  } catch (const std::exception& e) {
    error_line("invalid_config", kUsageExit, e.what());
    return kUsageExit;
  }

  rmae_set_log(log_to_stderr, nullptr);
  const std::string text = cfg.dump();
  char* result = nullptr;
  const auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    using Workflow = rmae_status (*)(const char*, char**);
    const std::map<std::string, Workflow> workflows{{"synth", rmae_synth},       {"pretrain", rmae_pretrain},
                                                    {"finetune", rmae_finetune}, {"sweep", rmae_sweep},
                                                    {"errormap", rmae_errormap}, {"evaluate", rmae_evaluate}};
    if (const auto it = workflows.find(name); it != workflows.end()) {
      const rmae_status st = it->second(text.c_str(), &result);
      return report(st, result);
    }
    if (name == "serve") return serve(cfg);
  } catch (const std::exception& e) {
    error_line("internal", RMAE_INTERNAL, e.what());
    return RMAE_INTERNAL;
  }
  error_line("usage", kUsageExit, "unknown subcommand " + name);
  return kUsageExit;
}
