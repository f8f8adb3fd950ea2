#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "radmae/nn.hpp"

namespace radmae {

/// On-disk layout: `<dir>/meta.json` (kind, config echo, step, parameter
/// index) and `<dir>/params.bin` (float64 little-endian, concatenated in
/// index order, each parameter row-major).
struct CheckpointMeta {
  std::string kind;  // "mae", "classifier", "multihead"
  nlohmann::json config;
  nlohmann::json extra = nlohmann::json::object();
  std::uint64_t step = 0;
  int epoch = 0;
};

void save_checkpoint(const std::filesystem::path& dir, const CheckpointMeta& meta, const nn::ParameterSet& params);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& dir);

struct LoadReport {
  std::size_t loaded = 0;
  std::size_t skipped = 0;  // present in the file but not in the target set
  std::size_t missing = 0;  // present in the target set but not in the file
};

/// Copies parameters from a checkpoint into `params`, matching by name after
/// replacing `source_prefix` with `target_prefix`. Shape mismatches throw.
/// With `strict`, every target parameter must be found.
LoadReport load_parameters(const std::filesystem::path& dir, nn::ParameterSet& params, bool strict = true,
                           const std::string& source_prefix = "", const std::string& target_prefix = "");

}  // namespace radmae
