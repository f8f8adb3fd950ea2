#include "radmae/multihead.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "radmae/error.hpp"
#include "radmae/synthgen.hpp"

namespace radmae::region {

using nlohmann::json;
namespace fs = std::filesystem;

const HeadGroup& HeadLayout::group(const std::string& name) const { return groups.at(static_cast<std::size_t>(index_of(name))); }

int HeadLayout::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < groups.size(); ++i)
    if (groups[i].name == name) return static_cast<int>(i);
  fail("unknown head '" + name + "'");
}

const HeadLayout& head_layout() {
  static const HeadLayout layout = [] {
    std::vector<std::string> locations;
    for (auto n : synth::location_names()) locations.emplace_back(n);
    HeadLayout l;
    l.groups = {
        {"abnormality", 1, Activation::kSigmoid, 0, "abnormality", {"normal", "abnormal"}},
        {"tumor_subtype", 4, Activation::kSoftmax, 0, "tumor_subtype", synth::kSubtypeClasses},
        {"location", synth::kLocationCount, Activation::kSoftmax, 0, "location", locations},
        {"fracture", 3, Activation::kSoftmax, 0, "fracture", synth::kFractureClasses},
        {"implant", 1, Activation::kSigmoid, 0, "implant", {"absent", "present"}},
    };
    for (auto& g : l.groups) {
      g.offset = l.total;
      l.total += g.arity;
    }
    return l;
  }();
  return layout;
}

json to_json(const RegionBox& b) {
  return {{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}, {"location_class", b.location}, {"confidence", b.confidence}};
}

// ---------------------------------------------------------------------------

RegionBox whole_image_box(const Image& image) { return {0, 0, image.width(), image.height(), -1, 1.0}; }

std::vector<RegionBox> GroundTruthProposer::propose(const Image&, const std::string& image_id) const {
  std::vector<RegionBox> out;
  for (const auto& r : manifest_.entry(image_id).regions) out.push_back({r.x, r.y, r.w, r.h, r.location, 1.0});
  return out;
}

std::vector<RegionBox> WholeImageProposer::propose(const Image& image, const std::string&) const {
  return {whole_image_box(image)};
}

std::vector<RegionBox> parse_detections(const json& list) {
  if (!list.is_array()) fail_parse("detections must be an array");
  std::vector<RegionBox> out;
  for (const auto& d : list) {
    try {
      const auto& b = d.at("box");
      if (!b.is_array() || b.size() != 4) fail_parse("box must be [x, y, w, h]");
      RegionBox r;
      r.x = static_cast<int>(std::floor(b[0].get<double>()));
      r.y = static_cast<int>(std::floor(b[1].get<double>()));
      r.w = static_cast<int>(std::lround(b[2].get<double>()));
      r.h = static_cast<int>(std::lround(b[3].get<double>()));
      r.confidence = std::clamp(d.value("score", 1.0), 0.0, 1.0);
      if (d.contains("class")) {
        const auto& c = d.at("class");
        if (c.is_number_integer()) {
          r.location = c.get<int>();
        } else if (c.is_string()) {
          const auto& names = synth::location_names();
          const auto it = std::find(names.begin(), names.end(), c.get<std::string>());
          r.location = it == names.end() ? -1 : static_cast<int>(it - names.begin());
        }
        if (r.location >= synth::kLocationCount) r.location = -1;
      }
      out.push_back(r);
    } catch (const json::exception& ex) {
      fail_parse(std::string("detection: ") + ex.what());
    }
  }
  return out;
}

DetectionJsonProposer::DetectionJsonProposer(json doc, double min_score) : doc_(std::move(doc)), min_score_(min_score) {
  if (!doc_.is_object() || (!doc_.contains("detections") && !doc_.contains("images")))
    fail_parse("detection JSON needs a 'detections' list or an 'images' map");
}

DetectionJsonProposer DetectionJsonProposer::from_file(const fs::path& path, double min_score) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open detections '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& ex) {
    fail_parse("detections '" + path.string() + "': " + ex.what());
  }
  return DetectionJsonProposer(std::move(doc), min_score);
}

std::vector<RegionBox> DetectionJsonProposer::propose(const Image&, const std::string& image_id) const {
  const json* list = nullptr;
  if (doc_.contains("images") && doc_.at("images").contains(image_id)) {
    list = &doc_.at("images").at(image_id);
  } else if (doc_.contains("detections")) {
    list = &doc_.at("detections");
  } else {
    return {};
  }
  auto boxes = parse_detections(*list);
  std::erase_if(boxes, [&](const RegionBox& b) { return b.confidence < min_score_; });
  return boxes;
}

std::vector<RegionBox> propose_regions(const Image& image, const Proposer& proposer, const std::string& image_id,
                                       std::vector<std::string>* warnings, bool include_whole_image) {
  const auto note = [&](const std::string& msg) {
    warn(msg);
    if (warnings) warnings->push_back(msg);
  };
  std::vector<RegionBox> raw;
  try {
    raw = proposer.propose(image, image_id);
  } catch (const std::exception& ex) {
    note("proposer '" + proposer.name() + "' failed (" + ex.what() + "); using the whole image");
  }
  std::vector<RegionBox> out;
  for (auto b : raw) {
    const int x0 = std::clamp(b.x, 0, image.width()), y0 = std::clamp(b.y, 0, image.height());
    const int x1 = std::clamp(b.x + b.w, 0, image.width()), y1 = std::clamp(b.y + b.h, 0, image.height());
    if (x1 <= x0 || y1 <= y0) continue;
    b.x = x0;
    b.y = y0;
    b.w = x1 - x0;
    b.h = y1 - y0;
    out.push_back(b);
  }
  if (out.empty()) {
    if (!raw.empty()) note("no proposed box overlaps the image; using the whole image");
    out.push_back(whole_image_box(image));
  } else if (include_whole_image) {
    out.push_back(whole_image_box(image));
  }
  return out;
}

// ---------------------------------------------------------------------------

double intersection_over_region(const CropWindow& w, const RegionBox& b) {
  const double ix = std::max(0.0, std::min(w.x + w.w, static_cast<double>(b.x + b.w)) - std::max(w.x, double(b.x)));
  const double iy = std::max(0.0, std::min(w.y + w.h, static_cast<double>(b.y + b.h)) - std::max(w.y, double(b.y)));
  return ix * iy / b.area();
}

CropWindow sample_crop_window(const RegionBox& box, double ior_floor, Rng& rng, int max_attempts) {
  for (int a = 0; a < max_attempts; ++a) {
    CropWindow w;
    w.w = box.w * rng.uniform(0.8, 1.25);
    w.h = box.h * rng.uniform(0.8, 1.25);
    const double cx = box.x + 0.5 * box.w + box.w * rng.uniform(-0.2, 0.2);
    const double cy = box.y + 0.5 * box.h + box.h * rng.uniform(-0.2, 0.2);
    w.x = cx - 0.5 * w.w;
    w.y = cy - 0.5 * w.h;
    if (intersection_over_region(w, box) >= ior_floor) return w;
  }
  return {double(box.x), double(box.y), double(box.w), double(box.h)};
}

CropResult crop_region(const Image& image, const RegionBox& box, bool augment, std::uint64_t seed,
                       const CropOptions& options) {
  if (box.w < 4 || box.h < 4)
    fail("box " + std::to_string(box.w) + "x" + std::to_string(box.h) + " is smaller than 4x4 pixels");
  if (options.out_size <= 0) fail("crop size must be positive");
  CropResult r;
  r.window = {double(box.x), double(box.y), double(box.w), double(box.h)};
  Rng rng(seed);
  if (augment) {
    r.window = sample_crop_window(box, options.ior_floor, rng, options.max_attempts);
    r.rotation_deg = rng.uniform(-options.max_rotation_deg, options.max_rotation_deg);
    r.brightness = rng.uniform(-options.jitter, options.jitter);
    r.contrast = 1.0 + rng.uniform(-options.jitter, options.jitter);
  }
  const int s = options.out_size, ch = image.channels();
  r.image = Image(s, s, ch);
  const double th = r.rotation_deg * std::numbers::pi / 180.0, ct = std::cos(th), st = std::sin(th);
  const double cx = r.window.x + 0.5 * r.window.w, cy = r.window.y + 0.5 * r.window.h;
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < s; ++j) {
      const double dx = (j + 0.5) / s * r.window.w - 0.5 * r.window.w;
      const double dy = (i + 0.5) / s * r.window.h - 0.5 * r.window.h;
      const double x = cx + ct * dx - st * dy, y = cy + st * dx + ct * dy;
      for (int c = 0; c < ch; ++c) r.image.at(i, j, c) = sample_bilinear(image, y - 0.5, x - 0.5, c);
    }
  }
  if (augment) {
    auto px = r.image.data();
    const double mean = std::accumulate(px.begin(), px.end(), 0.0) / static_cast<double>(px.size());
    for (auto& v : px) v = std::clamp(((v - mean) * r.contrast + mean) * (1.0 + r.brightness), 0.0, 1.0);
  }
  return r;
}

// ---------------------------------------------------------------------------

namespace {

double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }
double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

LossBreakdown masked_multitask_loss(const nn::Matrix& logits, const std::vector<HeadTargets>& targets,
                                    nn::Matrix* dlogits) {
  const auto& layout = head_layout();
  if (logits.cols() != layout.total) fail("logits have " + std::to_string(logits.cols()) + " columns, layout needs 38");
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) fail("logits and targets differ in batch size");
  if (dlogits) *dlogits = nn::Matrix::Zero(logits.rows(), logits.cols());
  LossBreakdown out;
  for (int h = 0; h < kHeadCount; ++h) {
    const auto& g = layout.groups[static_cast<std::size_t>(h)];
    int active = 0;
    for (const auto& t : targets) active += !t[static_cast<std::size_t>(h)].masked;
    out.active[static_cast<std::size_t>(h)] = active;
    if (active == 0) continue;
    const double inv = 1.0 / active;
    double sum = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const auto& t = targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(h)];
      if (t.masked) continue;
      if (g.activation == Activation::kSigmoid) {
        const double z = logits(i, g.offset), y = t.value;
        sum -= y * log_sigmoid(z) + (1.0 - y) * log_sigmoid(-z);
        if (dlogits) (*dlogits)(i, g.offset) = (sigmoid(z) - y) * inv;
      } else {
        const int k = t.class_index();
        if (k < 0 || k >= g.arity) fail("label " + std::to_string(k) + " out of range for head '" + g.name + "'");
        const auto row = logits.row(i).segment(g.offset, g.arity);
        const double m = row.maxCoeff();
        const double lse = m + std::log((row.array() - m).exp().sum());
        sum += lse - row(k);
        if (dlogits) {
          for (int c = 0; c < g.arity; ++c) (*dlogits)(i, g.offset + c) = std::exp(row(c) - lse) * inv;
          (*dlogits)(i, g.offset + k) -= inv;
        }
      }
    }
    out.per_head[static_cast<std::size_t>(h)] = sum * inv;
    out.total += sum * inv;
  }
  return out;
}

std::array<std::vector<double>, kHeadCount> head_probabilities(const nn::Matrix& row) {
  std::array<std::vector<double>, kHeadCount> out;
  const auto& layout = head_layout();
  for (int h = 0; h < kHeadCount; ++h) {
    const auto& g = layout.groups[static_cast<std::size_t>(h)];
    auto& p = out[static_cast<std::size_t>(h)];
    if (g.activation == Activation::kSigmoid) {
      p.push_back(sigmoid(row(0, g.offset)));
      continue;
    }
    const auto seg = row.row(0).segment(g.offset, g.arity);
    const double m = seg.maxCoeff();
    double z = 0.0;
    for (int c = 0; c < g.arity; ++c) z += std::exp(seg(c) - m);
    for (int c = 0; c < g.arity; ++c) p.push_back(std::exp(seg(c) - m) / z);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<RegionSample> region_samples(const DatasetManifest& manifest, const std::vector<std::string>& ids) {
  const auto& layout = head_layout();
  std::vector<RegionSample> out;
  for (const auto& id : ids) {
    const auto& e = manifest.entry(id);
    HeadTargets base;
    for (int h = 0; h < kHeadCount; ++h) {
      const auto it = e.labels.find(layout.groups[static_cast<std::size_t>(h)].label_key);
      base[static_cast<std::size_t>(h)] = it == e.labels.end() ? LabeledTarget::unknown() : it->second;
    }
    for (const auto& r : e.regions) {
      RegionSample s{id, {r.x, r.y, r.w, r.h, r.location, 1.0}, base};
      if (r.location >= 0) s.targets[kLocation] = LabeledTarget::of(r.location);
      out.push_back(s);
    }
  }
  return out;
}

void MultiheadConfig::validate() const {
  backbone.validate();
  if (!(base_lr > 0.0)) fail("base_lr must be positive");
  if (!(layerwise_lr_decay > 0.0 && layerwise_lr_decay <= 1.0)) fail("layerwise_lr_decay must be in (0, 1]");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) fail("warmup_ratio must be in [0, 1)");
  if (epochs < 0) fail("epochs must be non-negative");
  if (batch_size <= 0) fail("batch_size must be positive");
  if (!(crop.ior_floor > 0.0 && crop.ior_floor <= 1.0)) fail("ior_floor must be in (0, 1]");
  if (crop.max_rotation_deg < 0.0 || crop.jitter < 0.0 || crop.jitter >= 1.0) fail("invalid crop augmentation");
  if (backbone.encoder.image_height != backbone.encoder.image_width) fail("region crops need a square backbone input");
  if (source_height <= 0 || source_width <= 0) fail("source image size must be positive");
}

json to_json(const MultiheadConfig& c) {
  return {{"base_lr", c.base_lr},
          {"layerwise_lr_decay", c.layerwise_lr_decay},
          {"weight_decay", c.weight_decay},
          {"warmup_ratio", c.warmup_ratio},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"backbone", to_json(c.backbone)},
          {"init_checkpoint", c.init_checkpoint ? json(c.init_checkpoint->string()) : json(nullptr)},
          {"crop",
           {{"ior_floor", c.crop.ior_floor},
            {"max_rotation_deg", c.crop.max_rotation_deg},
            {"jitter", c.crop.jitter},
            {"max_attempts", c.crop.max_attempts}}},
          {"augment", c.augment},
          {"seed", c.seed},
          {"group_field", c.group_field ? json(*c.group_field) : json(nullptr)},
          {"source_size", {c.source_height, c.source_width}}};
}

MultiheadConfig multihead_config_from_json(const json& j, MultiheadConfig c) {
  try {
    c.base_lr = j.value("base_lr", c.base_lr);
    c.layerwise_lr_decay = j.value("layerwise_lr_decay", c.layerwise_lr_decay);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("backbone")) c.backbone = backbone_config_from_json(j.at("backbone"), c.backbone);
    if (j.contains("init_checkpoint"))
      c.init_checkpoint = j.at("init_checkpoint").is_null()
                              ? std::nullopt
                              : std::optional<fs::path>(j.at("init_checkpoint").get<std::string>());
    if (j.contains("crop")) {
      const auto& k = j.at("crop");
      c.crop.ior_floor = k.value("ior_floor", c.crop.ior_floor);
      c.crop.max_rotation_deg = k.value("max_rotation_deg", c.crop.max_rotation_deg);
      c.crop.jitter = k.value("jitter", c.crop.jitter);
      c.crop.max_attempts = k.value("max_attempts", c.crop.max_attempts);
    }
    c.augment = j.value("augment", c.augment);
    c.seed = j.value("seed", c.seed);
    if (j.contains("source_size")) {
      const auto& s = j.at("source_size");
      if (!s.is_array() || s.size() != 2) fail_parse("source_size must be [height, width]");
      c.source_height = s[0].get<int>();
      c.source_width = s[1].get<int>();
    }
    if (j.contains("group_field"))
      c.group_field = j.at("group_field").is_null() ? std::nullopt
                                                    : std::optional<std::string>(j.at("group_field").get<std::string>());
  } catch (const json::exception& ex) {
    fail_parse(std::string("multihead config: ") + ex.what());
  }
  c.crop.out_size = c.backbone.encoder.image_height;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

json to_json(const HeadMetrics& m) {
  json j{{"head", m.head}, {"status", m.trained ? "trained" : "untrained"}, {"n", m.n}};
  if (!m.trained) return j;
  j["auroc"] = m.defined ? json(m.auroc) : json(nullptr);
  j["balanced_accuracy"] = m.balanced_accuracy;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  if (m.confusion) j["confusion"] = stats::to_json(*m.confusion);
  if (!m.grouped_confusion.empty()) {
    json g = json::object();
    for (const auto& [k, v] : m.grouped_confusion) g[k] = stats::to_json(v);
    j["grouped_confusion"] = g;
  }
  if (!m.note.empty()) j["note"] = m.note;
  return j;
}

std::vector<HeadMetrics> evaluate_heads(const std::vector<nn::Matrix>& logits, const std::vector<HeadTargets>& targets,
                                        const std::vector<std::optional<std::string>>& groups,
                                        const std::array<bool, kHeadCount>& trained) {
  if (logits.size() != targets.size()) fail("logits and targets differ in length");
  const auto& layout = head_layout();
  std::vector<std::array<std::vector<double>, kHeadCount>> probs;
  probs.reserve(logits.size());
  for (const auto& z : logits) probs.push_back(head_probabilities(z));

  std::vector<HeadMetrics> out;
  for (int h = 0; h < kHeadCount; ++h) {
    const auto hs = static_cast<std::size_t>(h);
    const auto& g = layout.groups[hs];
    HeadMetrics m;
    m.head = g.name;
    m.trained = trained[hs];
    if (!m.trained) {
      m.note = "untrained: no unmasked labels";
      out.push_back(m);
      continue;
    }
    std::vector<double> scores;
    std::vector<int> labels, preds;
    std::vector<LabeledTarget> all_labels;
    std::vector<int> all_preds;
    std::vector<std::optional<std::string>> all_groups;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const auto& p = probs[i][hs];
      const int pred = g.activation == Activation::kSigmoid
                           ? (p[0] > 0.5 ? 1 : 0)
                           : static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      all_preds.push_back(pred);
      all_labels.push_back(targets[i][hs]);
      all_groups.push_back(groups.empty() ? std::nullopt : groups[i]);
      if (targets[i][hs].masked) continue;
      labels.push_back(targets[i][hs].class_index());
      preds.push_back(pred);
      scores.insert(scores.end(), p.begin(), p.end());
    }
    m.n = static_cast<int>(labels.size());
    const int k = g.activation == Activation::kSigmoid ? 2 : g.arity;
    std::set<int> present(labels.begin(), labels.end());
    if (present.size() >= 2) {
      m.defined = true;
      m.auroc = g.activation == Activation::kSigmoid ? stats::auroc(scores, labels)
                                                     : stats::auroc_ovr_macro(scores, labels, k);
    } else {
      m.note = labels.empty() ? "no unmasked labels in this set" : "AUROC undefined: single class present";
    }
    if (!labels.empty()) {
      const auto c = stats::classification_metrics(preds, labels, k);
      m.balanced_accuracy = c.balanced_accuracy;
      m.precision = c.precision;
      m.recall = c.recall;
      m.f1 = c.f1;
      if (g.activation == Activation::kSoftmax) {
        m.confusion = stats::confusion_matrix(preds, labels, k);
        if (!groups.empty()) m.grouped_confusion = stats::grouped_confusion(all_preds, all_labels, all_groups, k);
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

double mean_defined_auroc(const std::vector<HeadMetrics>& heads) {
  double sum = 0.0;
  int n = 0;
  for (const auto& h : heads)
    if (h.trained && h.defined) {
      sum += h.auroc;
      ++n;
    }
  return n ? sum / n : 0.0;
}

json to_json(const MultiheadReport& r) {
  json folds = json::array();
  for (std::size_t k = 0; k < r.folds.size(); ++k) {
    json val = json::array(), test = json::array();
    for (const auto& m : r.folds[k].validation) val.push_back(to_json(m));
    for (const auto& m : r.folds[k].test) test.push_back(to_json(m));
    folds.push_back({{"fold", k},
                     {"best_epoch", r.folds[k].fit.best_epoch},
                     {"best_mean_auroc", r.folds[k].fit.best_selection},
                     {"validation", val},
                     {"test", test}});
  }
  json heads = json::object();
  const auto& layout = head_layout();
  for (int h = 0; h < kHeadCount; ++h) {
    const auto& name = layout.groups[static_cast<std::size_t>(h)].name;
    if (!r.trained[static_cast<std::size_t>(h)]) {
      heads[name] = {{"status", "untrained"}};
    } else if (auto it = r.test_auroc.find(name); it != r.test_auroc.end()) {
      heads[name] = {{"status", "trained"}, {"test_auroc", stats::to_json(it->second)}};
    } else {
      heads[name] = {{"status", "trained"}, {"test_auroc", nullptr}};
    }
  }
  return {{"heads", heads}, {"folds", folds}, {"notes", r.notes}};
}

nn::Matrix region_logits(const Classifier& model, const Image& image, const RegionBox& box, const CropOptions& crop) {
  return model.logits(fit_to_model(crop_region(image, box, false, 0, crop).image, model.config()));
}

MultiheadReport train_multihead(const SampleSource& source, const DatasetManifest& manifest, const SplitPlan& plan,
                                const MultiheadConfig& config_in, const MultiheadOptions& options) {
  MultiheadConfig config = config_in;
  config.crop.out_size = config.backbone.encoder.image_height;
  config.validate();
  if (plan.folds.empty()) fail("split plan has no folds");
  const auto& layout = head_layout();

  MultiheadReport report;
  {
    std::vector<std::string> all;
    for (const auto& e : manifest.entries) all.push_back(e.id);
    const auto samples = region_samples(manifest, all);
    for (int h = 0; h < kHeadCount; ++h) {
      const auto hs = static_cast<std::size_t>(h);
      report.trained[hs] =
          std::any_of(samples.begin(), samples.end(), [&](const RegionSample& s) { return !s.targets[hs].masked; });
      if (!report.trained[hs]) report.notes.push_back("head '" + layout.groups[hs].name + "' untrained: no unmasked labels");
    }
  }

  const auto group_of = [&](const std::string& id) -> std::optional<std::string> {
    if (!config.group_field) return std::nullopt;
    return manifest.entry(id).field(*config.group_field);
  };
  // Deterministic crops are shared across folds and epochs.
  std::map<std::pair<std::string, std::array<int, 4>>, Image> tight_cache;
  const auto tight = [&](const RegionSample& s) -> const Image& {
    const auto key = std::make_pair(s.image_id, std::array<int, 4>{s.box.x, s.box.y, s.box.w, s.box.h});
    auto it = tight_cache.find(key);
    if (it == tight_cache.end())
      it = tight_cache
               .emplace(key, fit_to_model(crop_region(source.image(s.image_id), s.box, false, 0, config.crop).image,
                                          config.backbone))
               .first;
    return it->second;
  };
  const auto eval_set = [&](const Classifier& model, const std::vector<RegionSample>& set) {
    std::vector<nn::Matrix> logits;
    std::vector<HeadTargets> targets;
    std::vector<std::optional<std::string>> groups;
    for (const auto& s : set) {
      logits.push_back(model.logits(tight(s)));
      targets.push_back(s.targets);
      groups.push_back(group_of(s.image_id));
    }
    return evaluate_heads(logits, targets, groups, report.trained);
  };

  std::map<std::string, std::vector<double>> test_auroc;
  const auto test_samples = region_samples(manifest, plan.test_ids);
  for (std::size_t k = 0; k < plan.folds.size(); ++k) {
    const auto train = region_samples(manifest, plan.folds[k].train_ids);
    const auto val = region_samples(manifest, plan.folds[k].val_ids);
    if (train.empty() || val.empty()) fail("fold " + std::to_string(k) + " has no regions");

    Classifier model(config.backbone, layout.total, derive_seed(config.seed, "multihead"));
    if (config.init_checkpoint) model.load_backbone(*config.init_checkpoint);

    const BatchLoss loss = [&](const Classifier& m, const std::vector<std::size_t>& idx, nn::Gradients* grads,
                               Rng& rng) {
      const auto n = static_cast<Eigen::Index>(idx.size());
      nn::Matrix logits(n, layout.total);
      std::vector<Classifier::Cache> caches(idx.size());
      std::vector<HeadTargets> targets;
      for (Eigen::Index b = 0; b < n; ++b) {
        const auto& s = train[idx[static_cast<std::size_t>(b)]];
        const Image& input =
            config.augment
                ? fit_to_model(crop_region(source.image(s.image_id), s.box, true, rng.next(), config.crop).image,
                               config.backbone)
                : tight(s);
        logits.row(b) = m.forward(input, caches[static_cast<std::size_t>(b)]);
        targets.push_back(s.targets);
      }
      nn::Matrix dlogits;
      const auto l = masked_multitask_loss(logits, targets, grads ? &dlogits : nullptr);
      if (grads)
        for (Eigen::Index b = 0; b < n; ++b) m.backward(caches[static_cast<std::size_t>(b)], dlogits.row(b), *grads);
      return l.total;
    };
    const Validator validate = [&](const Classifier& m) {
      const auto heads = eval_set(m, val);
      json metrics = json::array();
      for (const auto& h : heads) metrics.push_back(to_json(h));
      return std::make_pair(mean_defined_auroc(heads), metrics);
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
                    {"mean_auroc", rec.selection}, {"val", rec.metrics}}
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
    MultiheadFold fold{Classifier(model), {}, {}, {}};
    fold.fit = fit(fold.model, train.size(), loss, validate, true, schedule, on_epoch);
    fold.validation = eval_set(fold.model, val);
    if (!test_samples.empty()) {
      fold.test = eval_set(fold.model, test_samples);
      for (const auto& h : fold.test)
        if (h.trained && h.defined) test_auroc[h.head].push_back(h.auroc);
    }

    if (fold_dir) {
      json test = json::array(), valj = json::array();
      for (const auto& h : fold.test) test.push_back(to_json(h));
      for (const auto& h : fold.validation) valj.push_back(to_json(h));
      std::ofstream(*fold_dir / "metrics.json") << json{{"validation", valj}, {"test", test}}.dump(2) << '\n';
      json heads = json::array();
      for (const auto& g : layout.groups)
        heads.push_back({{"name", g.name}, {"arity", g.arity}, {"offset", g.offset},
                         {"activation", g.activation == Activation::kSigmoid ? "sigmoid" : "softmax"}});
      std::array<bool, kHeadCount> trained = report.trained;
      fold.model.save(*fold_dir / "best.ckpt", "multihead",
                      {{"multihead", to_json(config)},
                       {"layout", heads},
                       {"trained_heads", trained},
                       {"fold", k},
                       {"best_epoch", fold.fit.best_epoch},
                       {"mean_auroc", fold.fit.best_selection},
                       {"model_version", "multihead-s" + std::to_string(config.seed) + "-f" + std::to_string(k) +
                                             "-e" + std::to_string(fold.fit.best_epoch)}},
                      fold.fit.best_epoch);
    }
    report.folds.push_back(std::move(fold));
  }
  for (auto& [head, values] : test_auroc) report.test_auroc[head] = stats::make_metric_report("auroc", std::move(values));
  return report;
}

// ---------------------------------------------------------------------------

json to_json(const RegionPrediction& p, int top_k) {
  const auto& layout = head_layout();
  json probs = json::object();
  for (int h = 0; h < kHeadCount; ++h) probs[layout.groups[static_cast<std::size_t>(h)].name] = p.probabilities[static_cast<std::size_t>(h)];
  const auto& loc = p.probabilities[kLocation];
  std::vector<int> order(loc.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return loc[static_cast<std::size_t>(a)] > loc[static_cast<std::size_t>(b)]; });
  json top = json::array();
  for (int i = 0; i < std::min<int>(top_k, static_cast<int>(order.size())); ++i) {
    const auto c = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
    top.push_back({{"class", order[static_cast<std::size_t>(i)]}, {"name", layout.groups[kLocation].class_names[c]}, {"p", loc[c]}});
  }
  return {{"box", to_json(p.box)}, {"location_top_k", top}, {"probabilities", probs}};
}

std::string to_string(TumorTrigger t) { return t == TumorTrigger::kSubtypeArgmax ? "subtype-argmax" : "abnormality"; }

TumorTrigger tumor_trigger_from_string(const std::string& s) {
  if (s == "subtype-argmax") return TumorTrigger::kSubtypeArgmax;
  if (s == "abnormality") return TumorTrigger::kAbnormality;
  fail("unknown tumor trigger '" + s + "' (expected subtype-argmax or abnormality)");
}

std::string to_string(Malignancy m) {
  switch (m) {
    case Malignancy::kNone: return "none";
    case Malignancy::kBenign: return "benign";
    case Malignancy::kMalignant: return "malignant";
  }
  return "none";
}

ImagePrediction aggregate_image(const std::vector<RegionPrediction>& regions, const AggregationOptions& options) {
  ImagePrediction out;
  out.regions = regions;
  out.applied = options;
  const double t = options.threshold;
  for (const auto& r : regions) {
    const auto& sub = r.probabilities[kTumorSubtype];
    const bool tumor = options.trigger == TumorTrigger::kSubtypeArgmax
                           ? std::max_element(sub.begin(), sub.end()) - sub.begin() != kSubtypeNormalClass
                           : r.probabilities[kAbnormality][0] > t;
    out.tumor_positive = out.tumor_positive || tumor;
    out.max_p_malignant = std::max(out.max_p_malignant, sub[kMalignantClass]);
    out.fracture = out.fracture || 1.0 - r.probabilities[kFracture][kFractureNormalClass] > t;
    out.implant = out.implant || r.probabilities[kImplant][0] > t;
  }
  if (out.tumor_positive) out.malignancy = out.max_p_malignant > t ? Malignancy::kMalignant : Malignancy::kBenign;
  return out;
}

json to_json(const ImagePrediction& p) {
  json regions = json::array();
  for (const auto& r : p.regions) regions.push_back(to_json(r));
  return {{"regions", regions},
          {"image_level",
           {{"tumor_positive", p.tumor_positive},
            {"malignancy", to_string(p.malignancy)},
            {"max_p_malignant", p.max_p_malignant},
            {"fracture", p.fracture},
            {"implant", p.implant}}},
          {"thresholds", {{"threshold", p.applied.threshold}, {"tumor_trigger", to_string(p.applied.trigger)}}}};
}

std::vector<RegionPrediction> predict_regions(const Classifier& model, const Image& image,
                                              const std::vector<RegionBox>& boxes, const CropOptions& crop) {
  if (model.outputs() != head_layout().total) fail("model is not a multi-head classifier");
  std::vector<RegionPrediction> out;
  for (const auto& b : boxes) out.push_back({b, head_probabilities(region_logits(model, image, b, crop))});
  return out;
}

MultiheadModel load_multihead(const fs::path& checkpoint) {
  json extra;
  std::string kind;
  Classifier model = Classifier::load(checkpoint, &extra, &kind);
  if (kind != "multihead") fail("checkpoint '" + checkpoint.string() + "' holds a '" + kind + "' model, not multihead");
  if (model.outputs() != head_layout().total)
    fail("checkpoint output arity " + std::to_string(model.outputs()) + " differs from the 38-way head layout");
  MultiheadConfig cfg = extra.contains("multihead") ? multihead_config_from_json(extra.at("multihead")) : MultiheadConfig{};
  CropOptions crop = cfg.crop;
  crop.out_size = model.config().encoder.image_height;
  return MultiheadModel{Classifier(model), crop, extra.value("model_version", std::string("unversioned")), extra,
                        cfg.source_height, cfg.source_width};
}

}  // namespace radmae::region
