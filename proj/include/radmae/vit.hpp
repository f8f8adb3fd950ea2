#pragma once

#include <span>
#include <vector>

#include "radmae/image.hpp"
#include "radmae/nn.hpp"

namespace radmae {

/// Image split into non-overlapping p x p patches, row-major over the grid.
/// Each row holds one patch flattened in (row, col, channel) order.
struct PatchGrid {
  nn::Matrix patches;
  int grid_rows = 0;
  int grid_cols = 0;
  int patch = 0;
  int channels = 0;

  int count() const { return grid_rows * grid_cols; }
};

PatchGrid patchify(const Image& image, int patch);
Image unpatchify(const PatchGrid& grid);

struct EncoderConfig {
  int image_height = 224;
  int image_width = 224;
  int channels = 3;
  int patch = 16;
  int dim = 1024;
  int depth = 24;
  int heads = 16;
  double mlp_ratio = 4.0;

  int grid_rows() const { return image_height / patch; }
  int grid_cols() const { return image_width / patch; }
  int num_patches() const { return grid_rows() * grid_cols(); }
  int patch_dim() const { return patch * patch * channels; }
  void validate() const;
};

/// ViT encoder over a subset of patches (all of them for fine-tuning, the
/// visible ones for masked pretraining). Output keeps the class token in row 0.
/// Layer ids: embedding 0, block i -> i + 1, final norm depth + 1.
class VitEncoder {
 public:
  struct Cache {
    std::vector<int> keep;
    nn::Matrix kept_patches;
    std::vector<nn::Block::Cache> blocks;
    nn::LayerNorm::Cache norm;
  };

  VitEncoder() = default;
  VitEncoder(nn::ParameterSet& ps, const EncoderConfig& cfg, Rng& rng, const std::string& prefix = "encoder");

  nn::Matrix forward(const nn::ParameterSet& ps, const nn::Matrix& patches, std::span<const int> keep,
                     Cache& cache) const;
  void backward(const nn::ParameterSet& ps, const Cache& cache, const nn::Matrix& dout, nn::Gradients& g) const;

  const EncoderConfig& config() const { return cfg_; }
  int num_layers() const { return cfg_.depth + 2; }

 private:
  EncoderConfig cfg_;
  nn::Linear patch_embed_;
  std::size_t cls_token_ = 0;
  nn::Matrix pos_;
  std::vector<nn::Block> blocks_;
  nn::LayerNorm norm_;
};

struct DecoderConfig {
  int dim = 512;
  int depth = 8;
  int heads = 16;
  double mlp_ratio = 4.0;
};

/// Lightweight decoder: embeds visible latents, fills masked slots with a
/// shared learned token, adds fixed positions and predicts every patch.
class MaeDecoder {
 public:
  struct Cache {
    nn::Matrix latent;
    std::vector<int> keep;
    std::vector<int> masked;
    std::vector<nn::Block::Cache> blocks;
    nn::LayerNorm::Cache norm;
    nn::Matrix normed;
  };

  MaeDecoder() = default;
  MaeDecoder(nn::ParameterSet& ps, const EncoderConfig& enc, const DecoderConfig& cfg, Rng& rng,
             const std::string& prefix = "decoder");

  // Returns an N x patch_dim prediction (class token dropped).
  nn::Matrix forward(const nn::ParameterSet& ps, const nn::Matrix& latent, std::span<const int> keep,
                     Cache& cache) const;
  // Returns dL/dlatent.
  nn::Matrix backward(const nn::ParameterSet& ps, const Cache& cache, const nn::Matrix& dpred,
                      nn::Gradients& g) const;

 private:
  EncoderConfig enc_;
  DecoderConfig cfg_;
  nn::Linear embed_;
  std::size_t mask_token_ = 0;
  nn::Matrix pos_;
  std::vector<nn::Block> blocks_;
  nn::LayerNorm norm_;
  nn::Linear pred_;
};

}  // namespace radmae
