#include "radmae/errormap.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "radmae/error.hpp"
#include "radmae/evalstat.hpp"

namespace radmae::errormap {

std::size_t ErrorMap::defined_count() const {
  return static_cast<std::size_t>(std::count_if(coverage.begin(), coverage.end(), [](int c) { return c > 0; }));
}

Image masked_delta(const Image& x, const Image& xhat, const PixelMask& mask) {
  if (!x.same_shape(xhat)) fail("image and reconstruction shapes differ");
  if (mask.height != x.height() || mask.width != x.width()) fail("mask shape differs from the image");
  Image delta(x.height(), x.width(), x.channels());
  for (int i = 0; i < x.height(); ++i)
    for (int j = 0; j < x.width(); ++j) {
      const auto m = mask.at(i, j);
      if (m > 1) fail("mask must be binary");
      if (!m) continue;
      for (int c = 0; c < x.channels(); ++c) delta.at(i, j, c) = xhat.at(i, j, c) - x.at(i, j, c);
    }
  return delta;
}

Image pixel_error(const Image& delta) {
  Image e(delta.height(), delta.width(), 1);
  const double inv_c = 1.0 / delta.channels();
  for (int i = 0; i < delta.height(); ++i)
    for (int j = 0; j < delta.width(); ++j) {
      double s = 0.0;
      for (int c = 0; c < delta.channels(); ++c) s += delta.at(i, j, c) * delta.at(i, j, c);
      e.at(i, j) = s * inv_c;
    }
  return e;
}

PassRecord make_pass(const Image& x, const Image& xhat, const PixelMask& mask) {
  return PassRecord{mask, xhat, pixel_error(masked_delta(x, xhat, mask))};
}

ErrorMap accumulate(std::span<const PassRecord> passes) {
  if (passes.empty()) fail("error map needs at least one pass");
  const int h = passes[0].mask.height, w = passes[0].mask.width;
  for (const auto& p : passes)
    if (p.mask.height != h || p.mask.width != w || p.error.height() != h || p.error.width() != w ||
        p.error.channels() != 1)
      fail("all passes must share one shape");
  ErrorMap map;
  map.height = h;
  map.width = w;
  map.n_passes = static_cast<int>(passes.size());
  map.sum.assign(static_cast<std::size_t>(h) * w, 0.0);
  map.coverage.assign(map.sum.size(), 0);
  std::vector<double> terms;
  terms.reserve(passes.size());
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      terms.clear();
      for (const auto& p : passes)
        if (p.mask.at(i, j)) terms.push_back(p.error.at(i, j));
      std::sort(terms.begin(), terms.end());
      double s = 0.0;
      for (double t : terms) s += t;
      const auto k = static_cast<std::size_t>(i) * w + j;
      map.sum[k] = s;
      map.coverage[k] = static_cast<int>(terms.size());
    }
  return map;
}

ErrorMap generate_error_map(const Image& image, const MaeModel& model, const MapOptions& options,
                            std::vector<PassRecord>* passes) {
  if (options.n_passes < 1) fail("n_passes must be at least 1");
  const auto& enc = model.config().encoder;
  const double ratio = options.mask_ratio.value_or(model.config().mask_ratio);
  std::vector<PassRecord> records;
  records.reserve(static_cast<std::size_t>(options.n_passes));
  for (int p = 0; p < options.n_passes; ++p) {
    const auto mask = sample_mask(enc.grid_rows(), enc.grid_cols(), enc.patch, ratio,
                                  derive_seed(options.seed, static_cast<std::uint64_t>(p)));
    records.push_back(make_pass(image, model.reconstruct(image, mask), mask.pixel_mask()));
  }
  auto map = accumulate(records);
  if (passes) *passes = std::move(records);
  return map;
}

double score_image(const ErrorMap& map, const PixelMask* region) {
  if (region && (region->height != map.height || region->width != map.width))
    fail("region mask shape differs from the error map");
  double s = 0.0;
  std::size_t n = 0;
  for (int i = 0; i < map.height; ++i)
    for (int j = 0; j < map.width; ++j) {
      if (!map.defined(i, j) || (region && !region->at(i, j))) continue;
      s += map.at(i, j);
      ++n;
    }
  if (n == 0) fail("no defined error-map pixels in scope");
  return s / static_cast<double>(n);
}

GroupComparison compare_groups(std::span<const double> normal_scores, std::span<const double> abnormal_scores) {
  if (normal_scores.empty() || abnormal_scores.empty()) fail("both groups must be nonempty");
  GroupComparison g;
  g.n_normal = normal_scores.size();
  g.n_abnormal = abnormal_scores.size();
  if (g.n_normal < 3 || g.n_abnormal < 3) {
    g.warnings.push_back("underpowered: fewer than 3 images in a group");
    warn(g.warnings.back());
  }
  const auto mw = stats::mann_whitney_u(abnormal_scores, normal_scores);
  g.u = mw.u;
  g.p_value = mw.p_value;
  g.exact = mw.exact;
  g.median_normal = stats::median({normal_scores.begin(), normal_scores.end()});
  g.median_abnormal = stats::median({abnormal_scores.begin(), abnormal_scores.end()});
  g.stars = stats::significance_stars(g.p_value);
  return g;
}

nlohmann::json to_json(const GroupComparison& g) {
  return {{"U", g.u},
          {"p", g.p_value},
          {"exact", g.exact},
          {"medians", {{"normal", g.median_normal}, {"abnormal", g.median_abnormal}}},
          {"n", {{"normal", g.n_normal}, {"abnormal", g.n_abnormal}}},
          {"stars", g.stars},
          {"warnings", g.warnings}};
}

namespace {

// Piecewise-linear approximation of a perceptual dark-to-bright colormap.
std::array<double, 3> colormap(double t) {
  static constexpr std::array<std::array<double, 3>, 5> stops{{{0.0, 0.0, 0.02},
                                                               {0.34, 0.06, 0.43},
                                                               {0.72, 0.15, 0.36},
                                                               {0.98, 0.55, 0.04},
                                                               {0.99, 1.0, 0.64}}};
  t = std::clamp(t, 0.0, 1.0) * (stops.size() - 1);
  const auto k = std::min(static_cast<std::size_t>(t), stops.size() - 2);
  const double f = t - static_cast<double>(k);
  std::array<double, 3> rgb{};
  for (int c = 0; c < 3; ++c) rgb[c] = stops[k][c] * (1.0 - f) + stops[k + 1][c] * f;
  return rgb;
}

void write_le_float(std::ofstream& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  unsigned char b[4];
  for (int k = 0; k < 4; ++k) b[k] = static_cast<unsigned char>(bits >> (8 * k));
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Image render_heatmap(const ErrorMap& map) {
  double lo = INFINITY, hi = -INFINITY;
  for (int i = 0; i < map.height; ++i)
    for (int j = 0; j < map.width; ++j)
      if (map.defined(i, j)) {
        lo = std::min(lo, map.at(i, j));
        hi = std::max(hi, map.at(i, j));
      }
  Image out(map.height, map.width, 3);
  if (!(hi >= lo)) return out;
  const double span = hi > lo ? hi - lo : 1.0;
  for (int i = 0; i < map.height; ++i)
    for (int j = 0; j < map.width; ++j) {
      if (!map.defined(i, j)) continue;
      const auto rgb = colormap((map.at(i, j) - lo) / span);
      for (int c = 0; c < 3; ++c) out.at(i, j, c) = rgb[c];
    }
  return out;
}

void write_pfm(const std::filesystem::path& path, const ErrorMap& map) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_io("cannot write " + path.string());
  out << "Pf\n" << map.width << ' ' << map.height << "\n-1.0\n";
  // PFM stores rows bottom to top.
  for (int i = map.height - 1; i >= 0; --i)
    for (int j = 0; j < map.width; ++j) write_le_float(out, static_cast<float>(map.at(i, j)));
  if (!out) fail_io("write failed for " + path.string());
}

std::vector<double> read_pfm(const std::filesystem::path& path, int* height, int* width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_io("cannot read " + path.string());
  std::string magic;
  int w = 0, h = 0;
  double scale = 0.0;
  in >> magic >> w >> h >> scale;
  in.get();
  if (magic != "Pf" || w <= 0 || h <= 0 || scale >= 0.0) fail_parse("unsupported PFM header in " + path.string());
  std::vector<double> values(static_cast<std::size_t>(h) * w);
  for (int i = h - 1; i >= 0; --i)
    for (int j = 0; j < w; ++j) {
      unsigned char b[4];
      if (!in.read(reinterpret_cast<char*>(b), 4)) fail_parse("truncated PFM " + path.string());
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(b[k]) << (8 * k);
      values[static_cast<std::size_t>(i) * w + j] = std::bit_cast<float>(bits);
    }
  if (height) *height = h;
  if (width) *width = w;
  return values;
}

void write_coverage_pgm(const std::filesystem::path& path, const ErrorMap& map) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_io("cannot write " + path.string());
  out << "P5\n" << map.width << ' ' << map.height << "\n65535\n";
  for (int c : map.coverage) {
    const auto v = static_cast<std::uint16_t>(std::clamp(c, 0, 65535));
    const char b[2] = {static_cast<char>(v >> 8), static_cast<char>(v & 0xff)};
    out.write(b, 2);
  }
  if (!out) fail_io("write failed for " + path.string());
}

}  // namespace radmae::errormap
