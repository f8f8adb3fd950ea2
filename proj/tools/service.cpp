#include "service.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <random>

#include <json.hpp>

namespace radmae::service {

using nlohmann::json;

namespace {

std::mutex log_mu;

void log_line(const json& j) {
  std::lock_guard lock(log_mu);
  std::cerr << j.dump() << std::endl;
}

std::string incident_id() {
  static std::atomic<unsigned> counter{0};
  thread_local std::mt19937_64 gen{std::random_device{}()};
  char buf[24];
  std::snprintf(buf, sizeof buf, "%08x%04x", static_cast<unsigned>(gen()), counter++ & 0xffffu);
  return buf;
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& reason) {
  send_json(res, status, {{"error", {{"status", status}, {"reason", reason}}}});
}

// Takes ownership of a C API string.
json take_json(char* s) {
  json j = json::parse(s);
  rmae_free_string(s);
  return j;
}

}  // namespace

LogLevel log_level_from_string(const std::string& s) {
  if (s == "error") return LogLevel::kError;
  if (s == "info") return LogLevel::kInfo;
  if (s == "debug") return LogLevel::kDebug;
  throw std::invalid_argument("unknown log level '" + s + "'");
}

std::unique_ptr<httplib::Server> make_server(const rmae_model* model, const ServiceOptions& options) {
  char* info_text = nullptr;
  if (rmae_model_info(model, &info_text) != RMAE_OK) throw std::runtime_error(rmae_last_error());
  const json info = take_json(info_text);
  const std::string model_version = info.at("model_version").get<std::string>();

  auto server = std::make_unique<httplib::Server>();
  const int threads = std::max(1, options.threads);
  server->new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
  server->set_payload_max_length(kMaxUploadBytes);
  const LogLevel level = options.log_level;

  server->Get("/health", [model_version](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}, {"model_version", model_version}});
  });

  server->Get("/version", [info](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200,
              {{"service", "radmae"},
               {"version", rmae_version()},
               {"schema_version", kSchemaVersion},
               {"model_version", info.at("model_version")},
               {"proposer", info.at("proposer")},
               {"backbone", info.at("backbone")}});
  });

  server->Post("/predict", [model, level](const httplib::Request& req, httplib::Response& res) {
    const auto t0 = std::chrono::steady_clock::now();
    if (!req.is_multipart_form_data()) return send_error(res, 400, "expected multipart/form-data with an 'image' file");
    httplib::MultipartFormData file;
    if (req.has_file("image")) {
      file = req.get_file_value("image");
    } else if (req.files.size() == 1) {
      file = req.files.begin()->second;
    } else {
      return send_error(res, 400, "missing 'image' file field");
    }
    if (file.content.size() > kMaxUploadBytes) return send_error(res, 413, "image exceeds 32 MB");
    if (file.content.empty()) return send_error(res, 400, "empty image upload");

    json opt = json::object();
    opt["image_id"] = req.has_param("image_id") ? req.get_param_value("image_id") : file.filename;
    if (req.has_param("threshold")) {
      const std::string t = req.get_param_value("threshold");
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(t, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != t.size() || !(v >= 0.0 && v <= 1.0)) return send_error(res, 400, "threshold must be a number in [0, 1]");
      opt["threshold"] = v;
    }
    if (req.has_param("trigger")) opt["trigger"] = req.get_param_value("trigger");

    char* out = nullptr;
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(file.content.data());
    const rmae_status st = rmae_model_predict(model, bytes, file.content.size(), opt.dump().c_str(), &out);
    if (st == RMAE_PARSE || st == RMAE_INVALID_ARGUMENT) {
      if (level >= LogLevel::kInfo) log_line({{"event", "predict_rejected"}, {"reason", rmae_last_error()}});
      return send_error(res, 400, std::string("malformed upload: ") + rmae_last_error());
    }
    if (st != RMAE_OK) {
      const std::string id = incident_id();
      log_line({{"event", "predict_failed"}, {"incident", id}, {"status", rmae_status_name(st)}, {"detail", rmae_last_error()}});
      return send_json(res, 500, {{"error", {{"status", 500}, {"reason", "inference failed"}, {"incident", id}}}});
    }
    res.status = 200;
    res.set_content(out, "application/json");
    rmae_free_string(out);
    if (level >= LogLevel::kDebug) {
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      log_line({{"event", "predict"}, {"bytes", file.content.size()}, {"ms", ms}});
    }
  });

  server->set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const std::string reason = res.status == 413 ? "image exceeds 32 MB"
                               : res.status == 404 ? "not found"
                                                   : httplib::status_message(res.status);
    send_error(res, res.status, reason);
  });

  server->set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    const std::string id = incident_id();
    std::string detail = "unknown";
    try {
      if (ep) std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      detail = e.what();
    } catch (...) {
    }
    log_line({{"event", "handler_exception"}, {"incident", id}, {"detail", detail}});
    send_json(res, 500, {{"error", {{"status", 500}, {"reason", "internal error"}, {"incident", id}}}});
  });
  return server;
}

}  // namespace radmae::service
