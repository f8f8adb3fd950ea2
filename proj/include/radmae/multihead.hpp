#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "radmae/datamodel.hpp"
#include "radmae/evalstat.hpp"
#include "radmae/finetune.hpp"
#include "radmae/model.hpp"

// Two-stage region classifier: proposals, cropping, a five-head shared output
// and image-level aggregation.
namespace radmae::region {

enum class Activation { kSigmoid, kSoftmax };

struct HeadGroup {
  std::string name;
  int arity = 1;
  Activation activation = Activation::kSigmoid;
  int offset = 0;
  std::string label_key;  // manifest task the head reads
  std::vector<std::string> class_names;
};

struct HeadLayout {
  std::vector<HeadGroup> groups;
  int total = 0;

  const HeadGroup& group(const std::string& name) const;
  int index_of(const std::string& name) const;
};

/// abnormality(1) | tumor_subtype(4) | location(29) | fracture(3) | implant(1) = 38 logits.
const HeadLayout& head_layout();

enum Head : int { kAbnormality = 0, kTumorSubtype = 1, kLocation = 2, kFracture = 3, kImplant = 4 };
inline constexpr int kHeadCount = 5;
inline constexpr int kMalignantClass = 0;
inline constexpr int kSubtypeNormalClass = 3;
inline constexpr int kFractureNormalClass = 2;

struct RegionBox {
  int x = 0, y = 0, w = 0, h = 0;
  int location = -1;  // anatomical class, -1 when unknown
  double confidence = 1.0;

  double area() const { return static_cast<double>(w) * h; }
  friend bool operator==(const RegionBox&, const RegionBox&) = default;
};

nlohmann::json to_json(const RegionBox& b);

// ---------------------------------------------------------------------------
// Proposals

class Proposer {
 public:
  virtual ~Proposer() = default;
  virtual std::string name() const = 0;
  // `image_id` identifies the image for proposers keyed by id; may be empty.
  virtual std::vector<RegionBox> propose(const Image& image, const std::string& image_id) const = 0;
};

/// Boxes stored in the manifest entry for the image id.
class GroundTruthProposer : public Proposer {
 public:
  explicit GroundTruthProposer(const DatasetManifest& manifest) : manifest_(manifest) {}
  std::string name() const override { return "ground-truth"; }
  std::vector<RegionBox> propose(const Image& image, const std::string& image_id) const override;

 private:
  const DatasetManifest& manifest_;
};

class WholeImageProposer : public Proposer {
 public:
  std::string name() const override { return "whole-image"; }
  std::vector<RegionBox> propose(const Image& image, const std::string& image_id) const override;
};

/// Reads detector output in the detection JSON format (docs/formats.md):
/// either {"detections": [...]} for every image or {"images": {id: [...]}}.
class DetectionJsonProposer : public Proposer {
 public:
  explicit DetectionJsonProposer(nlohmann::json doc, double min_score = 0.0);
  static DetectionJsonProposer from_file(const std::filesystem::path& path, double min_score = 0.0);
  std::string name() const override { return "detection-json"; }
  std::vector<RegionBox> propose(const Image& image, const std::string& image_id) const override;

 private:
  nlohmann::json doc_;
  double min_score_;
};

std::vector<RegionBox> parse_detections(const nlohmann::json& list);

RegionBox whole_image_box(const Image& image);

/// Clips every box to the image and drops empty ones. Falls back to the whole
/// image when nothing remains, with a warning when boxes were proposed but
/// none survived or the proposer threw. When
/// `include_whole_image` is set the whole-image box is appended as well.
std::vector<RegionBox> propose_regions(const Image& image, const Proposer& proposer, const std::string& image_id = {},
                                       std::vector<std::string>* warnings = nullptr, bool include_whole_image = false);

// ---------------------------------------------------------------------------
// Cropping

struct CropOptions {
  int out_size = 224;
  double ior_floor = 0.7;
  double max_rotation_deg = 10.0;
  double jitter = 0.1;  // brightness and contrast, +-fraction
  int max_attempts = 50;
};

// Window in pixel coordinates; may extend past the image (padded with zeros).
struct CropWindow {
  double x = 0.0, y = 0.0, w = 0.0, h = 0.0;
};

/// Area of window intersected with the box, over the box area.
double intersection_over_region(const CropWindow& window, const RegionBox& box);

/// Random window with IoR >= floor; the tight box when no attempt qualifies.
CropWindow sample_crop_window(const RegionBox& box, double ior_floor, Rng& rng, int max_attempts = 50);

struct CropResult {
  Image image;
  CropWindow window;
  double rotation_deg = 0.0;
  double brightness = 0.0;
  double contrast = 1.0;
};

/// Tight crop resized to out_size when `augment` is false; otherwise an
/// IoR-constrained window, rotation and brightness/contrast jitter.
CropResult crop_region(const Image& image, const RegionBox& box, bool augment, std::uint64_t seed,
                       const CropOptions& options = {});

// ---------------------------------------------------------------------------
// Loss

using HeadTargets = std::array<LabeledTarget, kHeadCount>;

struct LossBreakdown {
  double total = 0.0;
  std::array<double, kHeadCount> per_head{};
  std::array<int, kHeadCount> active{};  // unmasked samples per head
};

/// Per head: BCE (sigmoid) or CE (softmax) averaged over that head's unmasked
/// samples, then an equally weighted sum over heads. Fully masked heads add 0.
/// `dlogits` (n x 38) receives d total / d logits when given.
LossBreakdown masked_multitask_loss(const nn::Matrix& logits, const std::vector<HeadTargets>& targets,
                                    nn::Matrix* dlogits = nullptr);

/// Per-head probabilities from one 38-logit row.
std::array<std::vector<double>, kHeadCount> head_probabilities(const nn::Matrix& logits_row);

// ---------------------------------------------------------------------------
// Training

struct RegionSample {
  std::string image_id;
  RegionBox box;
  HeadTargets targets;
};

/// One sample per stored region; labels come from the entry, the region's own
/// location class overrides the entry's location label.
std::vector<RegionSample> region_samples(const DatasetManifest& manifest, const std::vector<std::string>& ids);

struct MultiheadConfig {
  double base_lr = 5e-5;
  double layerwise_lr_decay = 0.75;
  double weight_decay = 0.02;
  double warmup_ratio = 0.1;
  int epochs = 30;
  int batch_size = 64;
  BackboneConfig backbone;  // encoder geometry fixes the crop size
  std::optional<std::filesystem::path> init_checkpoint;
  CropOptions crop;
  bool augment = true;
  std::uint64_t seed = 0;
  std::optional<std::string> group_field = std::string("body_part");  // confusion grouping
  // Size images are ingested at; region boxes are in these pixel coordinates.
  int source_height = 64;
  int source_width = 64;

  void validate() const;
};

nlohmann::json to_json(const MultiheadConfig& c);
MultiheadConfig multihead_config_from_json(const nlohmann::json& j, MultiheadConfig defaults = {});

struct HeadMetrics {
  std::string head;
  bool trained = true;  // false: no unmasked label anywhere in the dataset
  bool defined = false;
  double auroc = 0.0;
  double balanced_accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int n = 0;
  std::optional<stats::ConfusionMatrix> confusion;
  std::map<std::string, stats::ConfusionMatrix> grouped_confusion;
  std::string note;
};

nlohmann::json to_json(const HeadMetrics& m);

/// Region-level metrics per head on unmasked labels only. `groups` is parallel
/// to the samples (may be empty).
std::vector<HeadMetrics> evaluate_heads(const std::vector<nn::Matrix>& logits, const std::vector<HeadTargets>& targets,
                                        const std::vector<std::optional<std::string>>& groups = {},
                                        const std::array<bool, kHeadCount>& trained = {true, true, true, true, true});

/// Mean AUROC over heads whose AUROC is defined.
double mean_defined_auroc(const std::vector<HeadMetrics>& heads);

struct MultiheadFold {
  Classifier model;
  FitResult fit;
  std::vector<HeadMetrics> validation;
  std::vector<HeadMetrics> test;
};

struct MultiheadReport {
  std::vector<MultiheadFold> folds;
  std::array<bool, kHeadCount> trained{};
  // head -> test AUROC across folds
  std::map<std::string, stats::MetricReport> test_auroc;
  std::vector<std::string> notes;
};

nlohmann::json to_json(const MultiheadReport& r);

struct MultiheadOptions {
  std::optional<std::filesystem::path> run_dir;  // fold{k}/history.jsonl, best.ckpt, metrics.json
  std::function<void(int fold, const EpochRecord&)> on_epoch;
};

/// K-fold training with best-validation selection (mean AUROC over heads),
/// then evaluation of each fold's model on the held-out test ids.
MultiheadReport train_multihead(const SampleSource& source, const DatasetManifest& manifest, const SplitPlan& plan,
                                const MultiheadConfig& config, const MultiheadOptions& options = {});

/// Logits for one region; no augmentation.
nn::Matrix region_logits(const Classifier& model, const Image& image, const RegionBox& box, const CropOptions& crop);

// ---------------------------------------------------------------------------
// Inference and aggregation

struct RegionPrediction {
  RegionBox box;
  std::array<std::vector<double>, kHeadCount> probabilities;
};

nlohmann::json to_json(const RegionPrediction& p, int location_top_k = 3);

/// Region trigger: tumor_subtype argmax != normal (default) or P(abnormal) > threshold.
enum class TumorTrigger { kSubtypeArgmax, kAbnormality };
std::string to_string(TumorTrigger t);
TumorTrigger tumor_trigger_from_string(const std::string& s);

struct AggregationOptions {
  double threshold = 0.5;  // malignancy rule; also abnormality trigger, fracture and implant flags
  TumorTrigger trigger = TumorTrigger::kSubtypeArgmax;
};

enum class Malignancy { kNone, kBenign, kMalignant };
std::string to_string(Malignancy m);

struct ImagePrediction {
  bool tumor_positive = false;
  Malignancy malignancy = Malignancy::kNone;
  double max_p_malignant = 0.0;
  bool fracture = false;
  bool implant = false;
  std::vector<RegionPrediction> regions;
  AggregationOptions applied;
};

/// Tumor-positive when any region triggers; malignant iff the maximum regional
/// P(malignant) exceeds the threshold, else benign. Independent of region order.
ImagePrediction aggregate_image(const std::vector<RegionPrediction>& regions, const AggregationOptions& options = {});

nlohmann::json to_json(const ImagePrediction& p);

/// Crops each box, runs the model and returns per-region probabilities.
std::vector<RegionPrediction> predict_regions(const Classifier& model, const Image& image,
                                              const std::vector<RegionBox>& boxes, const CropOptions& crop);

/// Loads a multi-head checkpoint written by train_multihead. Throws when the
/// stored output arity is not the head layout.
struct MultiheadModel {
  Classifier model;
  CropOptions crop;
  std::string version;
  nlohmann::json metadata;
  int source_height = 64;
  int source_width = 64;
};
MultiheadModel load_multihead(const std::filesystem::path& checkpoint);

}  // namespace radmae::region
