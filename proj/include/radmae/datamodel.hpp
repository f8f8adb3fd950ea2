#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "radmae/image.hpp"

namespace radmae {

enum class TaskKind { kBinary, kMulticlass, kRegression };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

/// Label for one task on one sample. `masked` is the availability flag m:
/// when set, the value is ignored by every loss and metric.
struct LabeledTarget {
  double value = 0.0;
  bool masked = false;

  static LabeledTarget of(double v) { return {v, false}; }
  static LabeledTarget unknown() { return {0.0, true}; }

  int class_index() const { return static_cast<int>(value); }
  friend bool operator==(const LabeledTarget&, const LabeledTarget&) = default;
};

struct TaskDeclaration {
  TaskKind kind = TaskKind::kBinary;
  std::vector<std::string> class_names;  // empty for regression

  // 2 for binary, K for multiclass, 1 for regression.
  int cardinality() const;
  friend bool operator==(const TaskDeclaration&, const TaskDeclaration&) = default;
};

/// Axis-aligned box in pixel units with a location class.
struct RegionAnnotation {
  int x = 0, y = 0, w = 0, h = 0;
  int location = -1;
  friend bool operator==(const RegionAnnotation&, const RegionAnnotation&) = default;
};

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  std::string id;
  std::optional<std::string> patient_id;
  std::map<std::string, std::string> fields;  // free-form categorical fields (body_part, source, ...)
  std::map<std::string, LabeledTarget> labels;
  std::vector<RegionAnnotation> regions;

  // Looks up `patient_id` or a free-form field.
  std::optional<std::string> field(const std::string& key) const;
};

struct DatasetManifest {
  std::map<std::string, TaskDeclaration> tasks;
  std::vector<ManifestEntry> entries;
  std::filesystem::path root;  // directory image paths are resolved against

  const ManifestEntry& entry(const std::string& id) const;
  std::size_t index_of(const std::string& id) const;
  std::filesystem::path image_path(const ManifestEntry& e) const { return root / e.path; }
};

/// Checks task declarations, label task ids, class index ranges and id uniqueness.
void validate_manifest(const DatasetManifest& manifest);

DatasetManifest parse_manifest(const nlohmann::json& doc, const std::filesystem::path& root);
DatasetManifest load_manifest(const std::filesystem::path& path);
nlohmann::json manifest_to_json(const DatasetManifest& manifest);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// One image with identifiers and labels; pixels in [0,1].
struct ImageSample {
  std::string id;
  Image pixels;
  std::optional<std::string> patient_id;
  std::optional<std::string> body_part;
  std::map<std::string, LabeledTarget> labels;
};

/// Reads a PNG/JPEG, resizes bilinearly to `height` x `width`, scales to [0,1]
/// and maps to `channels` (gray inputs are replicated).
ImageSample ingest_image(const std::filesystem::path& path, int height, int width, int channels);
/// Same contract for an encoded PNG or JPEG held in memory.
ImageSample ingest_image(std::span<const std::uint8_t> bytes, int height, int width, int channels);

struct Fold {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  friend bool operator==(const Fold&, const Fold&) = default;
};

struct SplitPlan {
  std::vector<std::string> test_ids;
  std::vector<Fold> folds;
  std::uint64_t seed = 0;
  std::optional<std::string> group_key;
  std::optional<std::string> stratify_key;
  // Stratum per id (class index, -1 for masked) when stratified.
  std::map<std::string, int> strata;
  // Group per id when grouped.
  std::map<std::string, std::string> groups;
  double requested_test_fraction = 0.0;
  double actual_test_fraction = 0.0;
  std::vector<std::string> notes;  // fallbacks, warnings, provenance

  std::vector<std::string> pool_ids() const;  // union of fold val sets
  friend bool operator==(const SplitPlan&, const SplitPlan&) = default;
};

struct SplitOptions {
  double test_fraction = 0.1;
  int folds = 5;
  std::uint64_t seed = 0;
  std::optional<std::string> stratify_key;
  std::optional<std::string> group_key;
};

/// Held-out test set plus k folds over the remainder. Grouped splits keep every
/// group on one side of each boundary; stratified splits deal each class
/// round-robin so per-class fold counts differ by at most one.
SplitPlan make_splits(const DatasetManifest& manifest, const SplitOptions& options);

/// Stratified reduction of the train/val pool to ceil(fraction * N) ids.
/// Unselected pool ids join the held-out test set; folds are restricted to the
/// selected ids.
SplitPlan subsample_training(const SplitPlan& plan, double fraction, std::uint64_t seed);

/// Splits `total` across buckets in proportion to `sizes` using largest
/// remainders; each share is floor or ceil of its exact quota.
std::vector<std::size_t> apportion(const std::vector<std::size_t>& sizes, std::size_t total);

nlohmann::json split_plan_to_json(const SplitPlan& plan);
SplitPlan split_plan_from_json(const nlohmann::json& doc);

}  // namespace radmae
