#include "radmae/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "radmae/error.hpp"

namespace radmae::synth {

using nlohmann::json;

const std::array<std::string_view, kLocationCount>& location_names() {
  static const std::array<std::string_view, kLocationCount> names{
      "Distal Femur",       "Proximal Femur",   "Proximal Tibia",    "Proximal Fibula",   "Patella",
      "Pelvis",             "Femur Diaphysis",  "Metacarpal",        "Metatarsal",        "Proximal Humerus",
      "Clavicle",           "Distal Tibia",     "Finger Phalanges",  "Hindfoot",          "Distal Fibula",
      "Proximal Radius",    "Distal Humerus",   "Scapula",           "Tibia Diaphysis",   "Proximal Ulna",
      "Fibula Diaphysis",   "Humerus Diaphysis", "Toe Phalanges",    "Distal Radius",     "Midfoot",
      "Carpal Bones",       "Distal Ulna",      "Radius Diaphysis",  "Ulna Diaphysis"};
  return names;
}

std::string to_string(AnomalyKind kind) {
  switch (kind) {
    case AnomalyKind::kTumorBlob: return "tumor_blob";
    case AnomalyKind::kFractureGap: return "fracture_gap";
    case AnomalyKind::kImplantBar: return "implant_bar";
  }
  return "unknown";
}

AnomalyKind anomaly_kind_from_string(const std::string& s) {
  if (s == "tumor_blob" || s == "tumor") return AnomalyKind::kTumorBlob;
  if (s == "fracture_gap" || s == "fracture") return AnomalyKind::kFractureGap;
  if (s == "implant_bar" || s == "implant") return AnomalyKind::kImplantBar;
  fail("unknown anomaly kind '" + s + "'");
}

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr double kBoneThreshold = 0.3;

double smoothstep(double lo, double hi, double x) {
  const double t = std::clamp((x - lo) / (hi - lo), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Unit axis direction in (row, col) coordinates; angle counter-clockwise from +col.
std::pair<double, double> axis(double angle_deg) {
  return {-std::sin(angle_deg * kDeg), std::cos(angle_deg * kDeg)};
}

double channel_mean(const Image& img, int i, int j) {
  double s = 0.0;
  for (int c = 0; c < img.channels(); ++c) s += img.at(i, j, c);
  return s / img.channels();
}

void set_label(ImageSample& s, const std::string& task, double v) { s.labels[task] = LabeledTarget::of(v); }

}  // namespace

std::pair<double, double> ShaftGeometry::point(double t, double d) const {
  const auto [ai, aj] = axis(angle_deg);
  return {center_i + t * ai + d * aj, center_j + t * aj - d * ai};
}

RegionAnnotation ShaftGeometry::box(int height, int width) const {
  const double pad = radius * 1.4 + 2.0;
  const auto [ai, aj] = axis(angle_deg);
  const double ext_i = std::abs(ai) * half_length + pad;
  const double ext_j = std::abs(aj) * half_length + pad;
  const int top = std::max(0, static_cast<int>(std::floor(center_i - ext_i)));
  const int left = std::max(0, static_cast<int>(std::floor(center_j - ext_j)));
  const int bottom = std::min(height, static_cast<int>(std::ceil(center_i + ext_i)) + 1);
  const int right = std::min(width, static_cast<int>(std::ceil(center_j + ext_j)) + 1);
  return RegionAnnotation{left, top, right - left, bottom - top, location};
}

NormalImage generate_normal(std::uint64_t seed, int height, int width, int location) {
  if (height < 32 || width < 32) fail("synthetic images must be at least 32x32");
  if (location >= kLocationCount) fail("location index out of range");
  Rng rng(seed);
  const int loc = location >= 0 ? location : static_cast<int>(rng.below(kLocationCount));
  const double s = std::min(height, width);

  ShaftGeometry g;
  g.location = loc;
  g.angle_deg = -80.0 + loc * (160.0 / (kLocationCount - 1)) + rng.uniform(-1.0, 1.0);
  g.radius = s * (0.065 + 0.018 * (loc % 3)) * rng.uniform(0.95, 1.05);
  g.half_length = s * rng.uniform(0.30, 0.36);
  g.center_i = height / 2.0 + rng.uniform(-0.06, 0.06) * s;
  g.center_j = width / 2.0 + rng.uniform(-0.06, 0.06) * s;
  // 0: plain tube, 1: flared at the far end, 2: flared at both ends.
  const int flare = (loc / 3) % 3;
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double period = rng.uniform(0.25, 0.45);

  const auto [ai, aj] = axis(g.angle_deg);
  Image img(height, width, 1);
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      const double di = i - g.center_i, dj = j - g.center_j;
      const double t = di * ai + dj * aj;
      const double d = std::abs(di * aj - dj * ai);
      const double tc = std::clamp(t, -g.half_length, g.half_length);
      double bulge = 1.0;
      const double u = std::abs(tc) / g.half_length;
      if ((flare == 2 || (flare == 1 && tc > 0)) && u > 0.7) bulge += 0.4 * std::pow((u - 0.7) / 0.3, 2);
      const double r = g.radius * bulge;
      const double q = std::max(std::abs(t) - g.half_length, 0.0);
      const double dist = std::sqrt(d * d + q * q);
      const double rho = dist / r;

      const double marrow = 0.48 + 0.05 * std::sin(t * period + phase);
      const double cortex = smoothstep(0.6, 0.85, rho);
      const double bone = marrow * (1.0 - cortex) + 0.88 * cortex;
      const double soft = 0.012 + 0.12 * std::max(0.0, 1.0 - (dist - r) / r);
      const double edge = std::clamp(r - dist + 0.5, 0.0, 1.0);
      const double v = edge * bone + (1.0 - edge) * soft + 0.012 * rng.normal();
      img.at(i, j) = std::clamp(v, 0.0, 1.0);
    }
  }

  NormalImage out;
  out.shaft = g;
  out.sample.pixels = std::move(img);
  out.sample.body_part = std::string(location_names()[loc]);
  set_label(out.sample, "abnormality", 0);
  set_label(out.sample, "tumor_presence", 0);
  set_label(out.sample, "tumor_subtype", kSubtypeNormal);
  out.sample.labels["malignancy"] = LabeledTarget::unknown();
  set_label(out.sample, "location", loc);
  set_label(out.sample, "fracture", kFractureNormal);
  set_label(out.sample, "implant", 0);
  return out;
}

Injection inject_anomaly(const ImageSample& image, const AnomalySpec& spec, std::uint64_t seed) {
  const Image& src = image.pixels;
  const int h = src.height(), w = src.width();
  const int ci = static_cast<int>(std::lround(spec.center_i));
  const int cj = static_cast<int>(std::lround(spec.center_j));
  if (ci < 0 || ci >= h || cj < 0 || cj >= w) fail("anomaly center outside the image");
  bool on_bone = false;
  for (int i = std::max(0, ci - 2); i <= std::min(h - 1, ci + 2) && !on_bone; ++i)
    for (int j = std::max(0, cj - 2); j <= std::min(w - 1, cj + 2) && !on_bone; ++j)
      on_bone = channel_mean(src, i, j) >= kBoneThreshold;
  if (!on_bone) fail("anomaly off-bone: center is not on the shaft");
  if (!(spec.scale > 0.0)) fail("anomaly scale must be positive");

  Rng rng(seed);
  // Per-pixel weight in [-1, 1]; zero outside the footprint.
  std::vector<double> weight(static_cast<std::size_t>(h) * w, 0.0);
  PixelMask footprint(h, w);
  const auto [ai, aj] = axis(spec.angle_deg);

  switch (spec.kind) {
    case AnomalyKind::kTumorBlob: {
      const double a = rng.uniform(0.0, 2.0 * std::numbers::pi), b = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const double di = i - spec.center_i, dj = j - spec.center_j;
          const double rho = std::sqrt(di * di + dj * dj);
          const double phi = std::atan2(di, dj);
          double p = 0.0;
          bool inside = false;
          switch (spec.subtype) {
            case TumorSubtype::kMalignant: {
              const double edge = spec.scale * (1.0 + 0.25 * std::sin(3 * phi + a) + 0.15 * std::sin(5 * phi + b));
              inside = rho <= edge;
              if (inside) p = -(0.35 + 0.65 * rng.uniform());
              break;
            }
            case TumorSubtype::kIntermediate: {
              const double edge = spec.scale * (1.0 + 0.2 * std::sin(3 * phi + a));
              inside = rho <= edge;
              if (inside) p = -0.9 * (1.0 - std::pow(rho / edge, 4)) - 0.05;
              break;
            }
            case TumorSubtype::kBenign: {
              inside = rho <= spec.scale;
              if (inside) p = rho < 0.7 * spec.scale ? -0.5 : 0.9;
              break;
            }
          }
          if (inside) {
            footprint.at(i, j) = 1;
            weight[static_cast<std::size_t>(i) * w + j] = p;
          }
        }
      break;
    }
    case AnomalyKind::kFractureGap: {
      // Measure the local bone half-width across the axis from the image itself.
      double extent = 0.0;
      for (int sign : {-1, 1}) {
        double e = 0.0;
        for (double step = 0.0; step < std::max(h, w); step += 0.5) {
          const int pi = static_cast<int>(std::lround(spec.center_i + sign * step * aj));
          const int pj = static_cast<int>(std::lround(spec.center_j - sign * step * ai));
          if (pi < 0 || pi >= h || pj < 0 || pj >= w || channel_mean(src, pi, pj) < kBoneThreshold) break;
          e = step;
        }
        extent = std::max(extent, e);
      }
      extent += 1.5;
      const double slope = std::tan(rng.uniform(-25.0, 25.0) * kDeg);
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const double di = i - spec.center_i, dj = j - spec.center_j;
          const double t = di * ai + dj * aj;
          const double d = di * aj - dj * ai;
          if (std::abs(d) > extent) continue;
          const double off = std::abs(t - slope * d);
          if (off > spec.scale / 2.0) continue;
          footprint.at(i, j) = 1;
          weight[static_cast<std::size_t>(i) * w + j] = off > spec.scale / 2.0 - 0.5 ? -0.5 : -1.0;
        }
      break;
    }
    case AnomalyKind::kImplantBar: {
      const double half_width = 1.1;
      const int screws = 2 + static_cast<int>(rng.below(2));
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const double di = i - spec.center_i, dj = j - spec.center_j;
          const double t = di * ai + dj * aj;
          const double d = di * aj - dj * ai;
          bool on = std::abs(t) <= spec.scale && std::abs(d) <= half_width;
          for (int k = 0; k < screws && !on; ++k) {
            const double ts = -spec.scale * 0.8 + k * (1.6 * spec.scale / (screws - 1));
            on = std::abs(t - ts) <= 0.6 && std::abs(d) <= half_width + 2.5;
          }
          if (on) {
            footprint.at(i, j) = 1;
            weight[static_cast<std::size_t>(i) * w + j] = 1.0;
          }
        }
      break;
    }
  }

  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      if (footprint.at(i, j) && (i == 0 || j == 0 || i == h - 1 || j == w - 1))
        fail("anomaly footprint touches the image border");

  Injection out{image, std::move(footprint)};
  Image& dst = out.sample.pixels;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      if (!out.footprint.at(i, j)) continue;
      const double p = weight[static_cast<std::size_t>(i) * w + j];
      for (int c = 0; c < dst.channels(); ++c) {
        double& v = dst.at(i, j, c);
        switch (spec.kind) {
          case AnomalyKind::kTumorBlob: v = std::clamp(v + spec.intensity_delta * p, 0.0, 1.0); break;
          case AnomalyKind::kFractureGap: v = std::clamp(v * (1.0 + spec.intensity_delta * p), 0.0, 1.0); break;
          case AnomalyKind::kImplantBar: v = std::clamp(v + spec.intensity_delta * p * (1.0 - v), 0.0, 1.0); break;
        }
      }
    }

  auto& labels = out.sample.labels;
  labels["abnormality"] = LabeledTarget::of(1);
  const auto has_tumor = [&] {
    const auto it = labels.find("tumor_presence");
    return it != labels.end() && !it->second.masked && it->second.value == 1.0;
  };
  switch (spec.kind) {
    case AnomalyKind::kTumorBlob:
      labels["tumor_presence"] = LabeledTarget::of(1);
      labels["tumor_subtype"] = LabeledTarget::of(static_cast<int>(spec.subtype));
      labels["malignancy"] = spec.subtype == TumorSubtype::kIntermediate
                                 ? LabeledTarget::unknown()
                                 : LabeledTarget::of(spec.subtype == TumorSubtype::kMalignant ? 1 : 0);
      if (auto it = labels.find("fracture"); it != labels.end() && !it->second.masked && it->second.value == 1.0)
        it->second.value = 0;
      break;
    case AnomalyKind::kFractureGap:
      labels["fracture"] = LabeledTarget::of(has_tumor() ? 0 : 1);
      break;
    case AnomalyKind::kImplantBar:
      labels["implant"] = LabeledTarget::of(1);
      break;
  }
  return out;
}

AnomalySpec random_anomaly(const ShaftGeometry& shaft, AnomalyKind kind, int height, int width, Rng& rng) {
  (void)height;
  (void)width;
  AnomalySpec spec;
  spec.kind = kind;
  spec.angle_deg = shaft.angle_deg;
  const auto [ci, cj] =
      shaft.point(rng.uniform(-0.55, 0.55) * shaft.half_length, rng.uniform(-0.2, 0.2) * shaft.radius);
  spec.center_i = ci;
  spec.center_j = cj;
  switch (kind) {
    case AnomalyKind::kTumorBlob:
      spec.scale = shaft.radius * rng.uniform(0.9, 1.3);
      spec.intensity_delta = rng.uniform(0.3, 0.45);
      break;
    case AnomalyKind::kFractureGap:
      spec.scale = rng.uniform(1.8, 3.0);
      spec.intensity_delta = rng.uniform(0.6, 0.8);
      break;
    case AnomalyKind::kImplantBar:
      spec.scale = shaft.half_length * rng.uniform(0.35, 0.5);
      spec.intensity_delta = rng.uniform(0.8, 0.95);
      break;
  }
  return spec;
}

// ---------------------------------------------------------------------------

void CorpusSpec::validate() const {
  if (n_normal < 0 || n_abnormal < 0) fail("corpus counts must be non-negative");
  if (n_normal + n_abnormal == 0) fail("corpus must contain at least one image");
  if (height < 32 || width < 32) fail("synthetic images must be at least 32x32");
  double total = 0.0;
  for (const auto& [kind, p] : mix) {
    if (p < 0.0) fail("anomaly proportions must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) fail("anomaly proportions must sum to 1");
  if (masked_fracture_fraction < 0.0 || masked_fracture_fraction > 1.0) fail("masked_fracture_fraction must be in [0, 1]");
  if (pathologic_fracture_fraction < 0.0 || pathologic_fracture_fraction > 1.0)
    fail("pathologic_fracture_fraction must be in [0, 1]");
}

json to_json(const CorpusSpec& spec) {
  json mix = json::object();
  for (const auto& [kind, p] : spec.mix) mix[to_string(kind)] = p;
  return {{"n_normal", spec.n_normal},
          {"n_abnormal", spec.n_abnormal},
          {"size", {spec.height, spec.width}},
          {"seed", spec.seed},
          {"mix", mix},
          {"masked_fracture_fraction", spec.masked_fracture_fraction},
          {"pathologic_fracture_fraction", spec.pathologic_fracture_fraction},
          {"id_prefix", spec.id_prefix}};
}

CorpusSpec corpus_spec_from_json(const json& j, CorpusSpec spec) {
  try {
    spec.n_normal = j.value("n_normal", spec.n_normal);
    spec.n_abnormal = j.value("n_abnormal", spec.n_abnormal);
    if (j.contains("size")) {
      auto size = j.at("size").is_array() ? j.at("size").get<std::vector<int>>() : std::vector<int>{j.at("size").get<int>()};
      if (size.size() == 1) size.push_back(size[0]);
      if (size.size() != 2) fail_parse("size must be a side length or [height, width]");
      spec.height = size[0];
      spec.width = size[1];
    }
    spec.seed = j.value("seed", spec.seed);
    if (j.contains("mix")) {
      spec.mix.clear();
      for (const auto& [k, v] : j.at("mix").items()) spec.mix[anomaly_kind_from_string(k)] = v.get<double>();
    }
    spec.masked_fracture_fraction = j.value("masked_fracture_fraction", spec.masked_fracture_fraction);
    spec.pathologic_fracture_fraction = j.value("pathologic_fracture_fraction", spec.pathologic_fracture_fraction);
    spec.id_prefix = j.value("id_prefix", spec.id_prefix);
  } catch (const json::exception& ex) {
    fail_parse(std::string("corpus spec: ") + ex.what());
  }
  spec.validate();
  return spec;
}

std::map<std::string, TaskDeclaration> corpus_tasks() {
  std::vector<std::string> locations;
  for (auto n : location_names()) locations.emplace_back(n);
  return {
      {"abnormality", {TaskKind::kBinary, {"normal", "abnormal"}}},
      {"tumor_presence", {TaskKind::kBinary, {"absent", "present"}}},
      {"tumor_subtype", {TaskKind::kMulticlass, kSubtypeClasses}},
      {"malignancy", {TaskKind::kBinary, {"benign", "malignant"}}},
      {"location", {TaskKind::kMulticlass, locations}},
      {"fracture", {TaskKind::kMulticlass, kFractureClasses}},
      {"implant", {TaskKind::kBinary, {"absent", "present"}}},
  };
}

namespace {

constexpr std::array kKindOrder{AnomalyKind::kTumorBlob, AnomalyKind::kFractureGap, AnomalyKind::kImplantBar};

double mix_share(const CorpusSpec& spec, AnomalyKind kind) {
  const auto it = spec.mix.find(kind);
  return it == spec.mix.end() ? 0.0 : it->second;
}

// Injects with a few redraws when the sampled footprint reaches the border.
Injection inject_on_shaft(const ImageSample& base, const ShaftGeometry& shaft, AnomalyKind kind, TumorSubtype subtype,
                          int h, int w, Rng& rng) {
  for (int attempt = 0;; ++attempt) {
    AnomalySpec spec = random_anomaly(shaft, kind, h, w, rng);
    spec.subtype = subtype;
    try {
      return inject_anomaly(base, spec, rng.next());
    } catch (const Error&) {
      if (attempt >= 40) throw;
    }
  }
}

}  // namespace

InMemoryCorpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const int total = spec.n_normal + spec.n_abnormal;
  Rng rng(spec.seed);

  std::vector<std::size_t> shares;
  for (auto kind : kKindOrder) shares.push_back(static_cast<std::size_t>(std::llround(mix_share(spec, kind) * 1e9)));
  const auto counts = spec.n_abnormal > 0 ? apportion(shares, static_cast<std::size_t>(spec.n_abnormal))
                                          : std::vector<std::size_t>(kKindOrder.size(), 0);

  // -1 marks a normal image; otherwise the index into kKindOrder.
  std::vector<int> plan(static_cast<std::size_t>(spec.n_normal), -1);
  for (std::size_t k = 0; k < kKindOrder.size(); ++k) plan.insert(plan.end(), counts[k], static_cast<int>(k));
  rng.shuffle(plan);

  const auto n_tumor = static_cast<int>(counts[0]);
  const int n_intermediate = static_cast<int>(std::lround(0.1 * n_tumor));
  const int n_malignant = (n_tumor - n_intermediate + 1) / 2;
  std::vector<TumorSubtype> subtypes(static_cast<std::size_t>(n_malignant), TumorSubtype::kMalignant);
  subtypes.insert(subtypes.end(), static_cast<std::size_t>(n_intermediate), TumorSubtype::kIntermediate);
  subtypes.insert(subtypes.end(), static_cast<std::size_t>(n_tumor - n_malignant - n_intermediate),
                  TumorSubtype::kBenign);
  rng.shuffle(subtypes);

  const bool tumors_on = mix_share(spec, AnomalyKind::kTumorBlob) > 0.0;
  const bool fractures_on = mix_share(spec, AnomalyKind::kFractureGap) > 0.0;
  const bool implants_on = mix_share(spec, AnomalyKind::kImplantBar) > 0.0;

  InMemoryCorpus corpus;
  corpus.manifest.tasks = corpus_tasks();
  int patient = 0, patient_left = 0;
  bool patient_masks_fracture = false;
  std::size_t next_subtype = 0;
  char buf[64];
  for (int n = 0; n < total; ++n) {
    if (patient_left == 0) {
      ++patient;
      patient_left = 1 + static_cast<int>(rng.below(4));
      patient_masks_fracture = rng.bernoulli(spec.masked_fracture_fraction);
    }
    --patient_left;
    std::snprintf(buf, sizeof buf, "%s%05d", spec.id_prefix.c_str(), n);
    const std::string id = buf;
    std::snprintf(buf, sizeof buf, "%sP%04d", spec.id_prefix.c_str(), patient);
    const std::string patient_id = buf;

    const auto item_seed = derive_seed(spec.seed, id);
    Rng item(derive_seed(item_seed, std::string_view("anomaly")));
    auto normal = generate_normal(item_seed, spec.height, spec.width);
    ImageSample sample = std::move(normal.sample);
    PixelMask footprint(spec.height, spec.width);
    std::string anomaly = "none";
    if (plan[n] >= 0) {
      const AnomalyKind kind = kKindOrder[plan[n]];
      anomaly = to_string(kind);
      const TumorSubtype subtype = kind == AnomalyKind::kTumorBlob ? subtypes[next_subtype++] : TumorSubtype::kBenign;
      auto inj = inject_on_shaft(sample, normal.shaft, kind, subtype, spec.height, spec.width, item);
      footprint = inj.footprint;
      sample = std::move(inj.sample);
      if (kind == AnomalyKind::kTumorBlob && fractures_on && item.bernoulli(spec.pathologic_fracture_fraction)) {
        auto frac = inject_on_shaft(sample, normal.shaft, AnomalyKind::kFractureGap, subtype, spec.height, spec.width,
                                    item);
        for (std::size_t b = 0; b < footprint.bits.size(); ++b) footprint.bits[b] |= frac.footprint.bits[b];
        sample = std::move(frac.sample);
        anomaly += "+fracture_gap";
      }
    }
    for (auto& v : sample.pixels.data()) v = std::round(v * 255.0) / 255.0;

    auto& labels = sample.labels;
    if (!tumors_on)
      for (const char* t : {"tumor_presence", "tumor_subtype", "malignancy"}) labels[t] = LabeledTarget::unknown();
    if (!fractures_on || patient_masks_fracture) labels["fracture"] = LabeledTarget::unknown();
    if (!implants_on) labels["implant"] = LabeledTarget::unknown();

    ManifestEntry e;
    e.id = id;
    e.path = "images/" + id + ".png";
    e.patient_id = patient_id;
    e.fields["source"] = patient_masks_fracture ? "btxrd-like" : "synthetic";
    e.fields["body_part"] = *sample.body_part;
    e.fields["anomaly"] = anomaly;
    e.labels = labels;
    e.regions.push_back(normal.shaft.box(spec.height, spec.width));
    corpus.manifest.entries.push_back(std::move(e));
    corpus.images.push_back(std::move(sample.pixels));
    corpus.footprints.push_back(std::move(footprint));
  }
  validate_manifest(corpus.manifest);
  return corpus;
}

DatasetManifest build_corpus(const CorpusSpec& spec, const std::filesystem::path& out) {
  auto corpus = generate_corpus(spec);
  std::error_code ec;
  std::filesystem::create_directories(out / "images", ec);
  if (ec) fail_io("cannot create output directory " + (out / "images").string() + ": " + ec.message());
  for (std::size_t i = 0; i < corpus.images.size(); ++i)
    write_png(out / corpus.manifest.entries[i].path, corpus.images[i]);
  corpus.manifest.root = out;
  save_manifest(corpus.manifest, out / "manifest.json");
  return corpus.manifest;
}

}  // namespace radmae::synth
