#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "radmae/datamodel.hpp"
#include "radmae/random.hpp"

// Procedural radiograph-like images: one bright "shaft" with cortical edges on
// a near-black background, plus injectable tumors, fractures and implants.
namespace radmae::synth {

inline constexpr int kLocationCount = 29;
const std::array<std::string_view, kLocationCount>& location_names();

inline const std::vector<std::string> kSubtypeClasses{"malignant", "intermediate", "benign", "normal"};
inline const std::vector<std::string> kFractureClasses{"neoplastic pathologic fracture", "non-neoplastic fracture",
                                                       "normal"};
inline constexpr int kSubtypeNormal = 3;
inline constexpr int kFractureNormal = 2;

enum class AnomalyKind { kTumorBlob, kFractureGap, kImplantBar };
enum class TumorSubtype { kMalignant = 0, kIntermediate = 1, kBenign = 2 };

std::string to_string(AnomalyKind kind);
AnomalyKind anomaly_kind_from_string(const std::string& s);  // accepts "tumor" / "fracture" / "implant" too

struct AnomalySpec {
  AnomalyKind kind = AnomalyKind::kTumorBlob;
  double center_i = 0.0;  // row
  double center_j = 0.0;  // column
  double scale = 6.0;     // pixels
  double intensity_delta = 0.35;
  TumorSubtype subtype = TumorSubtype::kBenign;  // tumor_blob only
  double angle_deg = 0.0;  // shaft axis, orients fracture bands and implant bars
};

/// Shaft placement; the location class fixes the axis angle and the width band.
struct ShaftGeometry {
  double center_i = 0.0;
  double center_j = 0.0;
  double angle_deg = 0.0;
  double half_length = 0.0;
  double radius = 0.0;
  int location = 0;

  RegionAnnotation box(int height, int width) const;
  // Point at signed axial offset t and perpendicular offset d.
  std::pair<double, double> point(double t, double d) const;
};

struct NormalImage {
  ImageSample sample;
  ShaftGeometry shaft;
};

/// Deterministic per seed. `location` < 0 draws one from the seed.
NormalImage generate_normal(std::uint64_t seed, int height, int width, int location = -1);

struct Injection {
  ImageSample sample;
  PixelMask footprint;  // every pixel the anomaly may modify
};

/// Adds one anomaly. Throws "anomaly off-bone" when the center is not on the
/// shaft and rejects footprints touching the image border.
Injection inject_anomaly(const ImageSample& image, const AnomalySpec& spec, std::uint64_t seed);

/// Draws a plausible anomaly on the given shaft.
AnomalySpec random_anomaly(const ShaftGeometry& shaft, AnomalyKind kind, int height, int width, Rng& rng);

struct CorpusSpec {
  int n_normal = 100;
  int n_abnormal = 100;
  int height = 64;
  int width = 64;
  std::uint64_t seed = 0;
  std::map<AnomalyKind, double> mix{{AnomalyKind::kTumorBlob, 0.5},
                                    {AnomalyKind::kFractureGap, 0.3},
                                    {AnomalyKind::kImplantBar, 0.2}};
  // Fraction of patients whose fracture labels are unknown (source "btxrd-like").
  double masked_fracture_fraction = 0.1;
  // Fraction of tumor cases that also carry a pathologic fracture (needs fractures in the mix).
  double pathologic_fracture_fraction = 0.2;
  std::string id_prefix = "syn";

  void validate() const;
};

nlohmann::json to_json(const CorpusSpec& spec);
CorpusSpec corpus_spec_from_json(const nlohmann::json& j, CorpusSpec defaults = {});

/// Task declarations carried by every synthetic manifest.
std::map<std::string, TaskDeclaration> corpus_tasks();

/// Writes `<out>/images/<id>.png` plus `<out>/manifest.json` and returns the manifest.
DatasetManifest build_corpus(const CorpusSpec& spec, const std::filesystem::path& out);

/// Same corpus without touching the filesystem; images stay in memory.
struct InMemoryCorpus {
  DatasetManifest manifest;
  std::vector<Image> images;  // parallel to manifest.entries
  std::vector<PixelMask> footprints;
};
InMemoryCorpus generate_corpus(const CorpusSpec& spec);

}  // namespace radmae::synth
