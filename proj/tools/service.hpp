#pragma once

#include <cstddef>
#include <memory>
#include <string>

#include <httplib.h>

#include "radmae.h"

namespace radmae::service {

inline constexpr std::size_t kMaxUploadBytes = 32u * 1024u * 1024u;
inline constexpr const char* kSchemaVersion = "1.0";

enum class LogLevel { kError, kInfo, kDebug };
LogLevel log_level_from_string(const std::string& s);

struct ServiceOptions {
  int threads = 8;
  LogLevel log_level = LogLevel::kInfo;
};

/// Routes /predict, /health and /version onto a server that borrows `model`.
/// The model must outlive the server.
std::unique_ptr<httplib::Server> make_server(const rmae_model* model, const ServiceOptions& options = {});

}  // namespace radmae::service
