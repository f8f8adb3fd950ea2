#include <doctest.h>

#include <chrono>
#include <cmath>

#include "radmae/error.hpp"
#include "radmae/mae.hpp"

using namespace radmae;

namespace {

MaeConfig tiny_config() {
  MaeConfig c;
  c.encoder = EncoderConfig{16, 16, 1, 8, 8, 1, 2, 2.0};
  c.decoder = DecoderConfig{8, 1, 2, 2.0};
  return c;
}

Image random_image(int h, int w, int c, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w, c);
  for (auto& v : img.data()) v = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("patchify round trip and patch order") {
  const Image img = random_image(32, 24, 3, 7);
  const auto grid = patchify(img, 8);
  CHECK(grid.count() == 12);
  CHECK(grid.patches.cols() == 192);
  CHECK(grid.patches(5, 0) == img.at(8, 16, 0));
  CHECK(unpatchify(grid) == img);
  CHECK_THROWS_AS(patchify(img, 5), Error);

  Image gray(224, 224, 1, 0.25);
  const auto g2 = patchify(gray, 16);
  CHECK(g2.count() == 196);
  CHECK(g2.patches.cols() == 256);
  CHECK((g2.patches.array() == 0.25).all());
}

TEST_CASE("mask sampling counts, determinism and degenerate guard") {
  const auto m = sample_mask(196, 0.75, 3);
  CHECK(m.masked_count() == 147);
  CHECK(sample_mask(196, 0.75, 3).patch_mask == m.patch_mask);
  for (int n : {1, 2, 3, 7, 16, 49, 196})
    for (double r : {0.1, 0.25, 0.5, 0.75, 0.9}) {
      const auto expected = std::lround(r * n);
      if (expected == 0 || expected == n) {
        CHECK_THROWS_WITH_AS(sample_mask(n, r, 1), doctest::Contains("degenerate mask"), Error);
      } else {
        CHECK(static_cast<long>(sample_mask(n, r, 1).masked_count()) == expected);
      }
    }
  const auto pm = sample_mask(4, 4, 8, 0.5, 11).pixel_mask();
  const auto pg = sample_mask(4, 4, 8, 0.5, 11);
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j) CHECK(pm.at(i, j) == pg.patch_mask[(i / 8) * 4 + j / 8]);
}

TEST_CASE("mask sampling is uniform over patches") {
  std::vector<int> hits(16, 0);
  for (int s = 0; s < 10000; ++s) {
    const auto m = sample_mask(16, 0.5, derive_seed(99, static_cast<std::uint64_t>(s)));
    for (int i = 0; i < 16; ++i) hits[i] += m.patch_mask[i];
  }
  for (int h : hits) CHECK(std::abs(h - 5000) <= 200);
}

TEST_CASE("reconstruction loss closed forms") {
  nn::Matrix target = nn::Matrix::Random(4, 12);
  std::vector<std::uint8_t> mask{0, 1, 0, 0};
  CHECK(reconstruction_loss(target, target, mask, false) == 0.0);
  nn::Matrix pred = target;
  pred.row(1).array() += 0.3;
  CHECK(reconstruction_loss(pred, target, mask, false) == doctest::Approx(0.09).epsilon(1e-12));
  pred.row(0).array() += 5.0;
  CHECK(reconstruction_loss(pred, target, mask, false) == doctest::Approx(0.09).epsilon(1e-12));
  std::vector<std::uint8_t> none(4, 0);
  CHECK_THROWS_AS(reconstruction_loss(pred, target, none, false), Error);
}

TEST_CASE("normalized loss gradient matches finite differences") {
  Rng rng(5);
  nn::Matrix target(3, 6), pred(3, 6);
  for (Eigen::Index i = 0; i < target.size(); ++i) {
    target.data()[i] = rng.uniform();
    pred.data()[i] = rng.normal();
  }
  std::vector<std::uint8_t> mask{1, 0, 1};
  for (bool normalize : {false, true}) {
    const nn::Matrix g = reconstruction_loss_grad(pred, target, mask, normalize);
    for (Eigen::Index i = 0; i < pred.size(); ++i) {
      nn::Matrix p = pred, q = pred;
      const double h = 1e-6;
      p.data()[i] += h;
      q.data()[i] -= h;
      const double fd =
          (reconstruction_loss(p, target, mask, normalize) - reconstruction_loss(q, target, mask, normalize)) / (2 * h);
      CHECK(g.data()[i] == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("MAE parameter gradients match finite differences") {
  const auto cfg = tiny_config();
  MaeModel model(cfg, 3);
  const Image img = random_image(16, 16, 1, 4);
  const auto mask = MaskPattern::from_bits(2, 2, 8, {1, 0, 0, 1});
  nn::Gradients grads(model.params());
  model.loss(img, mask, &grads);
  Rng pick(17);
  int checked = 0;
  for (std::size_t p = 0; p < model.params().size(); ++p) {
    auto& value = model.params()[p].value;
    for (int t = 0; t < 3; ++t) {
      const auto idx = static_cast<Eigen::Index>(pick.below(static_cast<std::uint64_t>(value.size())));
      const double orig = value.data()[idx];
      const double h = 1e-5;
      value.data()[idx] = orig + h;
      const double up = model.loss(img, mask);
      value.data()[idx] = orig - h;
      const double down = model.loss(img, mask);
      value.data()[idx] = orig;
      const double fd = (up - down) / (2 * h);
      const double an = grads[p].data()[idx];
      INFO(model.params()[p].name, " index ", idx);
      CHECK(std::abs(an - fd) <= 1e-6 + 1e-4 * std::abs(fd));
      ++checked;
    }
  }
  CHECK(checked > 30);
}

TEST_CASE("reconstruct composites visible patches") {
  const auto cfg = tiny_config();
  MaeModel model(cfg, 1);
  const Image img = random_image(16, 16, 1, 9);
  const auto empty = MaskPattern::from_bits(2, 2, 8, {0, 0, 0, 0});
  CHECK(model.reconstruct(img, empty) == img);
  const auto mask = MaskPattern::from_bits(2, 2, 8, {0, 1, 1, 0});
  const Image out = model.reconstruct(img, mask);
  const auto pm = mask.pixel_mask();
  bool changed = false;
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) {
      if (!pm.at(i, j)) CHECK(out.at(i, j) == img.at(i, j));
      else changed = changed || out.at(i, j) != img.at(i, j);
    }
  CHECK(changed);
  CHECK_THROWS_AS(model.reconstruct(random_image(8, 8, 1, 1), empty), Error);
}

TEST_CASE("toy MAE step cost") {
  const auto cfg = toy_mae_config();
  MaeModel model(cfg, 0);
  const Image img = random_image(64, 64, 1, 2);
  nn::Gradients grads(model.params());
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < 20; ++i) model.loss(img, sample_mask(8, 8, 8, 0.75, i), &grads);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / 20;
  MESSAGE("toy MAE fwd+bwd per image: ", ms, " ms");
  CHECK(ms < 100);
}
