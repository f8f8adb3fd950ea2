#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "radmae/error.hpp"
#include "radmae/errormap.hpp"

using namespace radmae;
using namespace radmae::errormap;

namespace {

Image random_image(int h, int w, int c, Rng& rng, double scale = 1.0) {
  Image img(h, w, c);
  for (auto& v : img.data()) v = scale * rng.uniform();
  return img;
}

PixelMask random_mask(int h, int w, Rng& rng) {
  PixelMask m(h, w);
  for (auto& b : m.bits) b = rng.bernoulli(0.5) ? 1 : 0;
  return m;
}

}  // namespace

TEST_CASE("delta and pixel error closed forms") {
  Image x(3, 3, 2, 0.5), xhat = x;
  xhat.at(1, 2, 0) = 0.6;
  xhat.at(1, 2, 1) = 0.2;
  PixelMask none(3, 3), one(3, 3);
  one.at(1, 2) = 1;
  const Image d_none = masked_delta(x, xhat, none), d_same = masked_delta(x, x, one);
  for (double v : d_none.data()) CHECK(v == 0.0);
  for (double v : d_same.data()) CHECK(v == 0.0);
  const Image d = masked_delta(x, xhat, one);
  CHECK(d.at(1, 2, 0) == doctest::Approx(0.1));
  CHECK(d.at(1, 2, 1) == doctest::Approx(-0.3));
  const Image e = pixel_error(d);
  CHECK(e.at(1, 2) == doctest::Approx(0.05));
  CHECK(e.at(0, 0) == 0.0);
  Image single(1, 1, 1, 0.7);
  CHECK(pixel_error(single).at(0, 0) == doctest::Approx(0.49));
  CHECK_THROWS_AS(masked_delta(x, Image(3, 3, 1), one), Error);
}

TEST_CASE("accumulate averages over coverage and flags undefined pixels") {
  std::vector<PassRecord> passes;
  for (int p = 0; p < 10; ++p) {
    PassRecord r{PixelMask(1, 2), Image(1, 2, 1), Image(1, 2, 1)};
    if (p == 1 || p == 3) {
      r.mask.at(0, 0) = 1;
      r.error.at(0, 0) = p == 1 ? 0.2 : 0.4;
    }
    passes.push_back(r);
  }
  const auto map = accumulate(passes);
  CHECK(map.at(0, 0) == doctest::Approx(0.3));
  CHECK(map.coverage[0] == 2);
  CHECK_FALSE(map.defined(0, 1));
  CHECK(std::isnan(map.at(0, 1)));
  CHECK(score_image(map) == doctest::Approx(0.3));
  CHECK_THROWS_AS(accumulate(std::span<const PassRecord>{}), Error);
}

TEST_CASE("pass order and scaling") {
  Rng rng(21);
  const Image x = random_image(16, 16, 3, rng);
  std::vector<PassRecord> passes;
  for (int p = 0; p < 10; ++p) passes.push_back(make_pass(x, random_image(16, 16, 3, rng), random_mask(16, 16, rng)));
  const auto ref = accumulate(passes);
  for (int k = 0; k < 5; ++k) {
    rng.shuffle(passes);
    const auto perm = accumulate(passes);
    CHECK(perm.sum == ref.sum);
    CHECK(perm.coverage == ref.coverage);
  }
  const double s = 2.5;
  std::vector<PassRecord> scaled;
  Image xs = x;
  for (auto& v : xs.data()) v *= s;
  for (const auto& p : passes) {
    Image r = p.reconstruction;
    for (auto& v : r.data()) v *= s;
    scaled.push_back(make_pass(xs, r, p.mask));
  }
  const auto sm = accumulate(scaled);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j)
      if (ref.defined(i, j)) CHECK(sm.at(i, j) == doctest::Approx(s * s * ref.at(i, j)).epsilon(1e-12));
  for (const auto& p : passes)
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j)
        if (!p.mask.at(i, j)) CHECK(p.error.at(i, j) == 0.0);
}

TEST_CASE("score_image restricts to region and defined pixels") {
  ErrorMap map;
  map.height = 2;
  map.width = 2;
  map.n_passes = 1;
  map.sum = {0.4, 0.4, 0.0, 0.0};
  map.coverage = {1, 1, 1, 0};
  PixelMask top(2, 2);
  top.at(0, 0) = top.at(0, 1) = 1;
  CHECK(score_image(map, &top) == doctest::Approx(0.4));
  CHECK(score_image(map) == doctest::Approx(0.8 / 3));
  PixelMask undefined_only(2, 2);
  undefined_only.at(1, 1) = 1;
  CHECK_THROWS_AS(score_image(map, &undefined_only), Error);
  map.sum = {0.2, 0.2, 0.2, 0.2};
  map.coverage = {1, 1, 1, 1};
  CHECK(score_image(map) == doctest::Approx(0.2));
}

TEST_CASE("generated maps use the model read-only with exact coverage") {
  MaeConfig cfg;
  cfg.encoder = EncoderConfig{32, 32, 1, 8, 16, 1, 2, 2.0};
  cfg.decoder = DecoderConfig{8, 1, 2, 2.0};
  const MaeModel model(cfg, 2);
  Rng rng(1);
  const Image img = random_image(32, 32, 1, rng);
  std::vector<PassRecord> passes;
  const auto map = generate_error_map(img, model, {}, &passes);
  CHECK(map.n_passes == 10);
  CHECK(passes.size() == 10);
  long covered = 0;
  for (int c : map.coverage) covered += c;
  CHECK(covered == 10L * 12 * 64);
  const auto again = generate_error_map(img, model, {});
  CHECK(again.sum == map.sum);
}

TEST_CASE("group comparison") {
  std::vector<double> a{1, 2, 3, 4, 5}, b = a;
  const auto same = compare_groups(a, b);
  CHECK(same.p_value > 0.9);
  CHECK(same.stars == "ns");
  std::vector<double> lo, hi;
  for (int i = 0; i < 20; ++i) {
    lo.push_back(i);
    hi.push_back(100 + i);
  }
  const auto sep = compare_groups(lo, hi);
  CHECK(sep.p_value < 1e-6);
  CHECK(sep.stars == "****");
  CHECK(sep.median_abnormal > sep.median_normal);
  const auto small = compare_groups(std::vector<double>{1, 2}, std::vector<double>{3, 4});
  CHECK(small.u == 4.0);
  CHECK_FALSE(small.warnings.empty());
}

TEST_CASE("float grid and heatmap outputs") {
  ErrorMap map;
  map.height = 2;
  map.width = 3;
  map.n_passes = 2;
  map.sum = {0.1, 0.2, 0.3, 0.4, 0.5, 0.0};
  map.coverage = {1, 1, 1, 2, 1, 0};
  const auto path = std::filesystem::temp_directory_path() / "radmae_test_map.pfm";
  write_pfm(path, map);
  int h = 0, w = 0;
  const auto values = read_pfm(path, &h, &w);
  CHECK(h == 2);
  CHECK(w == 3);
  CHECK(values[3] == doctest::Approx(0.2).epsilon(1e-6));
  CHECK(std::isnan(values[5]));
  std::filesystem::remove(path);
  const Image heat = render_heatmap(map);
  CHECK(heat.channels() == 3);
  CHECK(heat.at(1, 2, 0) == 0.0);
}
