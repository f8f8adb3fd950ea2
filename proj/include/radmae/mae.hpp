#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "radmae/datamodel.hpp"
#include "radmae/optim.hpp"
#include "radmae/vit.hpp"

namespace radmae {

/// Masked-autoencoder hyperparameters. Defaults are the ViT-L/16 pretraining
/// recipe; desk-scale runs override sizes.
struct MaeConfig {
  EncoderConfig encoder;  // ViT-L/16: 24 blocks x 1024, 16 heads, 224x224x3
  DecoderConfig decoder;  // 8 blocks x 512
  double mask_ratio = 0.75;
  bool normalize_pixel_loss = false;
  double base_lr = 7.5e-5;
  AdamWConfig optimizer;  // wd 0.05, betas (0.9, 0.999)
  double warmup_ratio = 0.05;
  int epochs = 50;
  int batch_size = 128;
  double crop_min_area = 0.2;
  double crop_max_area = 1.0;
  bool horizontal_flip = true;
  std::uint64_t seed = 0;
  // Optional cap on optimizer steps (0 = epochs * steps_per_epoch).
  long max_steps = 0;

  void validate() const;
};

nlohmann::json to_json(const MaeConfig& c);
MaeConfig mae_config_from_json(const nlohmann::json& j, MaeConfig defaults = {});

/// Desk-scale configuration: 64x64 grayscale, patch 8, encoder 2x64, decoder 1x32.
MaeConfig toy_mae_config();

/// Patch-level mask (1 = hidden) on a grid plus the pixel-level expansion.
struct MaskPattern {
  int grid_rows = 0;
  int grid_cols = 0;
  int patch = 0;
  std::vector<std::uint8_t> patch_mask;

  int count() const { return grid_rows * grid_cols; }
  std::size_t masked_count() const;
  std::vector<int> visible_indices() const;
  std::vector<int> masked_indices() const;
  PixelMask pixel_mask() const;

  /// Arbitrary pattern, including degenerate ones; used by tests and tools.
  static MaskPattern from_bits(int grid_rows, int grid_cols, int patch, std::vector<std::uint8_t> bits);
};

/// Exactly round(ratio * N) patches hidden, chosen uniformly without
/// replacement. Throws "degenerate mask" when that count is 0 or N.
MaskPattern sample_mask(int grid_rows, int grid_cols, int patch, double mask_ratio, std::uint64_t seed);
MaskPattern sample_mask(int n_patches, double mask_ratio, std::uint64_t seed);

/// Mean squared error over hidden patches only (mean over the patch values,
/// then over hidden patches). With `normalize`, each target patch is first
/// standardised by its own mean and unbiased variance.
double reconstruction_loss(const nn::Matrix& predicted, const nn::Matrix& target, std::span<const std::uint8_t> patch_mask,
                           bool normalize);

/// Gradient of reconstruction_loss with respect to `predicted`.
nn::Matrix reconstruction_loss_grad(const nn::Matrix& predicted, const nn::Matrix& target,
                                    std::span<const std::uint8_t> patch_mask, bool normalize);

class MaeModel {
 public:
  explicit MaeModel(const MaeConfig& cfg, std::uint64_t init_seed = 0);

  const MaeConfig& config() const { return cfg_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }
  const VitEncoder& encoder() const { return encoder_; }

  /// Loss for one image under `mask`; accumulates parameter gradients when `grads` is set.
  double loss(const Image& image, const MaskPattern& mask, nn::Gradients* grads = nullptr) const;

  /// Raw decoder output for every patch (N x patch_dim), in pixel space.
  nn::Matrix predict_patches(const Image& image, const MaskPattern& mask) const;

  /// Visible patches copied from the input; hidden patches from the decoder.
  Image reconstruct(const Image& image, const MaskPattern& mask) const;

  void save(const std::filesystem::path& dir, std::uint64_t step = 0, int epoch = 0,
            const nlohmann::json& extra = nlohmann::json::object()) const;
  static MaeModel load(const std::filesystem::path& dir);

 private:
  MaeConfig cfg_;
  nn::ParameterSet params_;
  VitEncoder encoder_;
  MaeDecoder decoder_;
};

/// Random resized crop (area fraction in [min_area, max_area], aspect ratio in
/// [3/4, 4/3]) back to the input size, then an optional horizontal flip.
Image augment_for_pretraining(const Image& image, double min_area, double max_area, bool flip, Rng& rng);

struct PretrainResult {
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  long steps = 0;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
};

struct PretrainOptions {
  std::optional<std::filesystem::path> init_checkpoint;  // external weights, loaded by name
  std::function<void(long step, double loss)> on_step;
};

/// Trains on in-memory images; checkpoints every epoch under `out/last` and
/// `out/best` (lowest epoch loss). Throws on a non-finite loss.
PretrainResult pretrain(const std::vector<Image>& images, const MaeConfig& cfg, const std::filesystem::path& out,
                        MaeModel& model, const PretrainOptions& options = {});

/// Loads every manifest image at the configured size and channel count, then trains.
PretrainResult pretrain(const DatasetManifest& corpus, const MaeConfig& cfg, const std::filesystem::path& out,
                        const PretrainOptions& options = {});

}  // namespace radmae
