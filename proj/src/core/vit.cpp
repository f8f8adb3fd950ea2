#include "radmae/vit.hpp"

#include <algorithm>

#include "radmae/error.hpp"

namespace radmae {

PatchGrid patchify(const Image& image, int patch) {
  if (patch <= 0) fail("patch size must be positive");
  if (image.height() % patch != 0 || image.width() % patch != 0)
    fail("image " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
         " not divisible by patch size " + std::to_string(patch));
  PatchGrid grid;
  grid.patch = patch;
  grid.channels = image.channels();
  grid.grid_rows = image.height() / patch;
  grid.grid_cols = image.width() / patch;
  grid.patches.resize(grid.count(), patch * patch * image.channels());
  for (int gr = 0; gr < grid.grid_rows; ++gr) {
    for (int gc = 0; gc < grid.grid_cols; ++gc) {
      const int row = gr * grid.grid_cols + gc;
      int col = 0;
      for (int i = 0; i < patch; ++i)
        for (int j = 0; j < patch; ++j)
          for (int c = 0; c < image.channels(); ++c) grid.patches(row, col++) = image.at(gr * patch + i, gc * patch + j, c);
    }
  }
  return grid;
}

Image unpatchify(const PatchGrid& grid) {
  const int p = grid.patch;
  if (grid.patches.rows() != grid.count() || grid.patches.cols() != p * p * grid.channels)
    fail("patch matrix does not match grid shape");
  Image out(grid.grid_rows * p, grid.grid_cols * p, grid.channels);
  for (int gr = 0; gr < grid.grid_rows; ++gr) {
    for (int gc = 0; gc < grid.grid_cols; ++gc) {
      const int row = gr * grid.grid_cols + gc;
      int col = 0;
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j)
          for (int c = 0; c < grid.channels; ++c) out.at(gr * p + i, gc * p + j, c) = grid.patches(row, col++);
    }
  }
  return out;
}

void EncoderConfig::validate() const {
  if (patch <= 0 || image_height <= 0 || image_width <= 0 || channels <= 0) fail("encoder sizes must be positive");
  if (image_height % patch != 0 || image_width % patch != 0) fail("patch size must divide the image size");
  if (heads <= 0 || dim % heads != 0) fail("encoder_dim must be divisible by the head count");
  if (dim % 4 != 0) fail("encoder_dim must be divisible by 4");
  if (depth < 0) fail("encoder depth must be non-negative");
}

VitEncoder::VitEncoder(nn::ParameterSet& ps, const EncoderConfig& cfg, Rng& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg.validate();
  patch_embed_ = nn::Linear(ps, prefix + ".patch_embed", cfg.patch_dim(), cfg.dim, 0, rng);
  cls_token_ = ps.add(prefix + ".cls_token", nn::truncated_normal(1, cfg.dim, 0.02, rng), 0, false);
  pos_ = nn::sincos_position_table(cfg.dim, cfg.grid_rows(), cfg.grid_cols());
  for (int b = 0; b < cfg.depth; ++b)
    blocks_.emplace_back(ps, prefix + ".blocks." + std::to_string(b), cfg.dim, cfg.heads, cfg.mlp_ratio, b + 1, rng);
  norm_ = nn::LayerNorm(ps, prefix + ".norm", cfg.dim, cfg.depth + 1);
}

nn::Matrix VitEncoder::forward(const nn::ParameterSet& ps, const nn::Matrix& patches, std::span<const int> keep,
                               Cache& cache) const {
  if (patches.rows() != cfg_.num_patches() || patches.cols() != cfg_.patch_dim())
    fail("encoder input has " + std::to_string(patches.rows()) + "x" + std::to_string(patches.cols()) +
         " patches, expected " + std::to_string(cfg_.num_patches()) + "x" + std::to_string(cfg_.patch_dim()));
  const auto k = static_cast<Eigen::Index>(keep.size());
  cache.keep.assign(keep.begin(), keep.end());
  cache.kept_patches.resize(k, patches.cols());
  for (Eigen::Index i = 0; i < k; ++i) cache.kept_patches.row(i) = patches.row(keep[i]);

  nn::Matrix x(k + 1, cfg_.dim);
  x.row(0) = ps.value(cls_token_).row(0) + pos_.row(0);
  if (k > 0) {
    x.bottomRows(k) = patch_embed_.forward(ps, cache.kept_patches);
    for (Eigen::Index i = 0; i < k; ++i) x.row(i + 1) += pos_.row(1 + keep[i]);
  }
  cache.blocks.resize(blocks_.size());
  for (std::size_t b = 0; b < blocks_.size(); ++b) x = blocks_[b].forward(ps, x, cache.blocks[b]);
  return norm_.forward(ps, x, cache.norm);
}

void VitEncoder::backward(const nn::ParameterSet& ps, const Cache& cache, const nn::Matrix& dout,
                          nn::Gradients& g) const {
  nn::Matrix d = norm_.backward(ps, cache.norm, dout, g);
  for (std::size_t b = blocks_.size(); b-- > 0;) d = blocks_[b].backward(ps, cache.blocks[b], d, g);
  g[cls_token_] += d.row(0);
  const auto k = static_cast<Eigen::Index>(cache.keep.size());
  if (k > 0) {
    const nn::Matrix dx = d.bottomRows(k);
    g[patch_embed_.weight].noalias() += cache.kept_patches.transpose() * dx;
    g[patch_embed_.bias] += dx.colwise().sum();
  }
}

MaeDecoder::MaeDecoder(nn::ParameterSet& ps, const EncoderConfig& enc, const DecoderConfig& cfg, Rng& rng,
                       const std::string& prefix)
    : enc_(enc), cfg_(cfg) {
  if (cfg.heads <= 0 || cfg.dim % cfg.heads != 0) fail("decoder_dim must be divisible by the head count");
  embed_ = nn::Linear(ps, prefix + ".embed", enc.dim, cfg.dim, 0, rng);
  mask_token_ = ps.add(prefix + ".mask_token", nn::truncated_normal(1, cfg.dim, 0.02, rng), 0, false);
  pos_ = nn::sincos_position_table(cfg.dim, enc.grid_rows(), enc.grid_cols());
  for (int b = 0; b < cfg.depth; ++b)
    blocks_.emplace_back(ps, prefix + ".blocks." + std::to_string(b), cfg.dim, cfg.heads, cfg.mlp_ratio, 0, rng);
  norm_ = nn::LayerNorm(ps, prefix + ".norm", cfg.dim, 0);
  pred_ = nn::Linear(ps, prefix + ".pred", cfg.dim, enc.patch_dim(), 0, rng);
}

nn::Matrix MaeDecoder::forward(const nn::ParameterSet& ps, const nn::Matrix& latent, std::span<const int> keep,
                               Cache& cache) const {
  const int n = enc_.num_patches();
  cache.latent = latent;
  cache.keep.assign(keep.begin(), keep.end());
  std::vector<bool> visible(n, false);
  for (int k : keep) visible[k] = true;
  cache.masked.clear();
  for (int i = 0; i < n; ++i)
    if (!visible[i]) cache.masked.push_back(i);

  const nn::Matrix y = embed_.forward(ps, latent);
  nn::Matrix x(n + 1, cfg_.dim);
  x.row(0) = y.row(0);
  for (std::size_t j = 0; j < keep.size(); ++j) x.row(1 + keep[j]) = y.row(1 + static_cast<Eigen::Index>(j));
  for (int m : cache.masked) x.row(1 + m) = ps.value(mask_token_).row(0);
  x += pos_;
  cache.blocks.resize(blocks_.size());
  for (std::size_t b = 0; b < blocks_.size(); ++b) x = blocks_[b].forward(ps, x, cache.blocks[b]);
  cache.normed = norm_.forward(ps, x, cache.norm);
  return pred_.forward(ps, cache.normed.bottomRows(n));
}

nn::Matrix MaeDecoder::backward(const nn::ParameterSet& ps, const Cache& cache, const nn::Matrix& dpred,
                                nn::Gradients& g) const {
  const int n = enc_.num_patches();
  nn::Matrix dnormed = nn::Matrix::Zero(n + 1, cfg_.dim);
  dnormed.bottomRows(n) = pred_.backward(ps, cache.normed.bottomRows(n), dpred, g);
  nn::Matrix d = norm_.backward(ps, cache.norm, dnormed, g);
  for (std::size_t b = blocks_.size(); b-- > 0;) d = blocks_[b].backward(ps, cache.blocks[b], d, g);
  for (int m : cache.masked) g[mask_token_] += d.row(1 + m);
  nn::Matrix dy(cache.keep.size() + 1, cfg_.dim);
  dy.row(0) = d.row(0);
  for (std::size_t j = 0; j < cache.keep.size(); ++j) dy.row(1 + static_cast<Eigen::Index>(j)) = d.row(1 + cache.keep[j]);
  return embed_.backward(ps, cache.latent, dy, g);
}

}  // namespace radmae
