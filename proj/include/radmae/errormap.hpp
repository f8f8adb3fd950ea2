#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "radmae/image.hpp"
#include "radmae/mae.hpp"

// Zero-shot abnormality maps from repeated masked reconstruction.
namespace radmae::errormap {

/// Coverage-normalised squared reconstruction error. Pixels never hidden in
/// any pass are undefined and excluded from every statistic.
struct ErrorMap {
  int height = 0;
  int width = 0;
  int n_passes = 0;
  std::vector<double> sum;       // sum over passes of e(i, j)
  std::vector<int> coverage;     // number of passes hiding (i, j)

  bool defined(int i, int j) const { return coverage[index(i, j)] > 0; }
  // E(i, j), or NaN when undefined.
  double at(int i, int j) const {
    const auto k = index(i, j);
    return coverage[k] > 0 ? sum[k] / coverage[k] : std::numeric_limits<double>::quiet_NaN();
  }
  std::size_t defined_count() const;

 private:
  std::size_t index(int i, int j) const { return static_cast<std::size_t>(i) * width + j; }
};

/// delta = (xhat - x) * M, with M broadcast over channels.
Image masked_delta(const Image& x, const Image& xhat, const PixelMask& mask);

/// e(i, j) = (1/C) * sum_c delta(i, j, c)^2, as a single-channel grid.
Image pixel_error(const Image& delta);

struct PassRecord {
  PixelMask mask;
  Image reconstruction;
  Image error;  // e for this pass
};

PassRecord make_pass(const Image& x, const Image& xhat, const PixelMask& mask);

/// Sums per-pixel errors and coverage over passes. Per-pixel contributions are
/// added in sorted order, so the result does not depend on pass order.
ErrorMap accumulate(std::span<const PassRecord> passes);

struct MapOptions {
  int n_passes = 10;
  std::uint64_t seed = 0;
  std::optional<double> mask_ratio;  // defaults to the model's pretraining ratio
};

/// Reconstructs `image` under `n_passes` random masks with a read-only model
/// and accumulates the error map. `passes` receives the per-pass records.
ErrorMap generate_error_map(const Image& image, const MaeModel& model, const MapOptions& options = {},
                            std::vector<PassRecord>* passes = nullptr);

/// Mean E over defined pixels, optionally restricted to `region`.
double score_image(const ErrorMap& map, const PixelMask* region = nullptr);

struct GroupComparison {
  double u = 0.0;  // U of the abnormal group
  double p_value = 1.0;
  bool exact = false;
  double median_normal = 0.0;
  double median_abnormal = 0.0;
  std::size_t n_normal = 0;
  std::size_t n_abnormal = 0;
  std::string stars;
  std::vector<std::string> warnings;
};

/// Two-sided Mann-Whitney U between per-image scores.
GroupComparison compare_groups(std::span<const double> normal_scores, std::span<const double> abnormal_scores);
nlohmann::json to_json(const GroupComparison& g);

/// 8-bit RGB heatmap, min-max normalised over defined pixels; undefined pixels are black.
Image render_heatmap(const ErrorMap& map);

/// Raw E as a little-endian Portable Float Map (NaN where undefined).
void write_pfm(const std::filesystem::path& path, const ErrorMap& map);
/// Reads a single-channel PFM back as row-major values (top row first).
std::vector<double> read_pfm(const std::filesystem::path& path, int* height, int* width);
/// Coverage counts as a 16-bit binary PGM.
void write_coverage_pgm(const std::filesystem::path& path, const ErrorMap& map);

}  // namespace radmae::errormap
