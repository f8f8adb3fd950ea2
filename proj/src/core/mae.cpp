#include "radmae/mae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "radmae/checkpoint.hpp"
#include "radmae/error.hpp"

namespace radmae {

using nlohmann::json;

void MaeConfig::validate() const {
  encoder.validate();
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) fail("mask_ratio must be in (0, 1)");
  if (decoder.heads <= 0 || decoder.dim % decoder.heads != 0) fail("decoder_dim must be divisible by the head count");
  if (decoder.dim % 4 != 0) fail("decoder_dim must be divisible by 4");
  if (epochs < 0) fail("epochs must be non-negative");
  if (batch_size <= 0) fail("batch_size must be positive");
  if (!(crop_min_area > 0.0 && crop_min_area <= crop_max_area && crop_max_area <= 1.0))
    fail("crop area range must satisfy 0 < min <= max <= 1");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) fail("warmup_ratio must be in [0, 1)");
}

json to_json(const MaeConfig& c) {
  return {{"image_size", {c.encoder.image_height, c.encoder.image_width}},
          {"channels", c.encoder.channels},
          {"patch_size", c.encoder.patch},
          {"encoder_depth", c.encoder.depth},
          {"encoder_dim", c.encoder.dim},
          {"encoder_heads", c.encoder.heads},
          {"decoder_depth", c.decoder.depth},
          {"decoder_dim", c.decoder.dim},
          {"decoder_heads", c.decoder.heads},
          {"mlp_ratio", c.encoder.mlp_ratio},
          {"mask_ratio", c.mask_ratio},
          {"normalize_pixel_loss", c.normalize_pixel_loss},
          {"base_lr", c.base_lr},
          {"optimizer", to_json(c.optimizer)},
          {"warmup_ratio", c.warmup_ratio},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"crop_area", {c.crop_min_area, c.crop_max_area}},
          {"horizontal_flip", c.horizontal_flip},
          {"seed", c.seed},
          {"max_steps", c.max_steps}};
}

MaeConfig mae_config_from_json(const json& j, MaeConfig c) {
  try {
    if (j.contains("image_size")) {
      const auto size = j.at("image_size").get<std::vector<int>>();
      if (size.size() != 2) fail_parse("image_size must be [height, width]");
      c.encoder.image_height = size[0];
      c.encoder.image_width = size[1];
    }
    c.encoder.channels = j.value("channels", c.encoder.channels);
    c.encoder.patch = j.value("patch_size", c.encoder.patch);
    c.encoder.depth = j.value("encoder_depth", c.encoder.depth);
    c.encoder.dim = j.value("encoder_dim", c.encoder.dim);
    c.encoder.heads = j.value("encoder_heads", c.encoder.heads);
    c.decoder.depth = j.value("decoder_depth", c.decoder.depth);
    c.decoder.dim = j.value("decoder_dim", c.decoder.dim);
    c.decoder.heads = j.value("decoder_heads", c.decoder.heads);
    c.encoder.mlp_ratio = j.value("mlp_ratio", c.encoder.mlp_ratio);
    c.decoder.mlp_ratio = c.encoder.mlp_ratio;
    c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
    c.normalize_pixel_loss = j.value("normalize_pixel_loss", c.normalize_pixel_loss);
    c.base_lr = j.value("base_lr", c.base_lr);
    if (j.contains("optimizer")) c.optimizer = adamw_from_json(j.at("optimizer"), c.optimizer);
    c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("crop_area")) {
      const auto area = j.at("crop_area").get<std::vector<double>>();
      if (area.size() != 2) fail_parse("crop_area must be [min, max]");
      c.crop_min_area = area[0];
      c.crop_max_area = area[1];
    }
    c.horizontal_flip = j.value("horizontal_flip", c.horizontal_flip);
    c.seed = j.value("seed", c.seed);
    c.max_steps = j.value("max_steps", c.max_steps);
  } catch (const json::exception& ex) {
    fail_parse(std::string("MAE config: ") + ex.what());
  }
  c.validate();
  return c;
}

MaeConfig toy_mae_config() {
  MaeConfig c;
  c.encoder = EncoderConfig{64, 64, 1, 8, 64, 2, 4, 4.0};
  c.decoder = DecoderConfig{32, 1, 4, 4.0};
  c.base_lr = 1.5e-3;
  c.epochs = 10;
  c.batch_size = 32;
  return c;
}

// ---------------------------------------------------------------------------

std::size_t MaskPattern::masked_count() const {
  return static_cast<std::size_t>(std::count(patch_mask.begin(), patch_mask.end(), std::uint8_t{1}));
}

std::vector<int> MaskPattern::visible_indices() const {
  std::vector<int> out;
  for (int i = 0; i < count(); ++i)
    if (!patch_mask[i]) out.push_back(i);
  return out;
}

std::vector<int> MaskPattern::masked_indices() const {
  std::vector<int> out;
  for (int i = 0; i < count(); ++i)
    if (patch_mask[i]) out.push_back(i);
  return out;
}

PixelMask MaskPattern::pixel_mask() const {
  PixelMask m(grid_rows * patch, grid_cols * patch);
  for (int gr = 0; gr < grid_rows; ++gr)
    for (int gc = 0; gc < grid_cols; ++gc)
      if (patch_mask[gr * grid_cols + gc])
        for (int i = 0; i < patch; ++i)
          for (int j = 0; j < patch; ++j) m.at(gr * patch + i, gc * patch + j) = 1;
  return m;
}

MaskPattern MaskPattern::from_bits(int grid_rows, int grid_cols, int patch, std::vector<std::uint8_t> bits) {
  if (static_cast<int>(bits.size()) != grid_rows * grid_cols) fail("mask bit count does not match the grid");
  for (auto b : bits)
    if (b > 1) fail("mask bits must be 0 or 1");
  return MaskPattern{grid_rows, grid_cols, patch, std::move(bits)};
}

MaskPattern sample_mask(int grid_rows, int grid_cols, int patch, double mask_ratio, std::uint64_t seed) {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) fail("mask ratio must be in (0, 1)");
  const int n = grid_rows * grid_cols;
  if (n <= 0) fail("mask grid must be nonempty");
  const auto hidden = static_cast<int>(std::lround(mask_ratio * n));
  if (hidden == 0 || hidden == n) fail("degenerate mask: round(ratio * N) = " + std::to_string(hidden));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::uint8_t> bits(n, 0);
  for (int i = 0; i < hidden; ++i) bits[order[i]] = 1;
  return MaskPattern{grid_rows, grid_cols, patch, std::move(bits)};
}

MaskPattern sample_mask(int n_patches, double mask_ratio, std::uint64_t seed) {
  return sample_mask(1, n_patches, 1, mask_ratio, seed);
}

// ---------------------------------------------------------------------------

namespace {

nn::Matrix normalized_targets(const nn::Matrix& target) {
  nn::Matrix out(target.rows(), target.cols());
  const double n = static_cast<double>(target.cols());
  for (Eigen::Index r = 0; r < target.rows(); ++r) {
    const double mean = target.row(r).mean();
    const double var = (target.row(r).array() - mean).square().sum() / std::max(1.0, n - 1.0);
    out.row(r) = (target.row(r).array() - mean) / std::sqrt(var + 1e-6);
  }
  return out;
}

void check_loss_shapes(const nn::Matrix& predicted, const nn::Matrix& target, std::span<const std::uint8_t> mask) {
  if (predicted.rows() != target.rows() || predicted.cols() != target.cols())
    fail("prediction and target shapes disagree");
  if (static_cast<Eigen::Index>(mask.size()) != predicted.rows()) fail("patch mask length does not match patch count");
  if (std::none_of(mask.begin(), mask.end(), [](auto b) { return b != 0; }))
    fail("reconstruction loss undefined: no masked patches");
}

}  // namespace

double reconstruction_loss(const nn::Matrix& predicted, const nn::Matrix& target, std::span<const std::uint8_t> patch_mask,
                           bool normalize) {
  check_loss_shapes(predicted, target, patch_mask);
  const nn::Matrix t = normalize ? normalized_targets(target) : target;
  double total = 0.0;
  std::size_t hidden = 0;
  for (Eigen::Index r = 0; r < predicted.rows(); ++r) {
    if (!patch_mask[r]) continue;
    total += (predicted.row(r) - t.row(r)).squaredNorm() / static_cast<double>(predicted.cols());
    ++hidden;
  }
  return total / static_cast<double>(hidden);
}

nn::Matrix reconstruction_loss_grad(const nn::Matrix& predicted, const nn::Matrix& target,
                                    std::span<const std::uint8_t> patch_mask, bool normalize) {
  check_loss_shapes(predicted, target, patch_mask);
  const nn::Matrix t = normalize ? normalized_targets(target) : target;
  const auto hidden = static_cast<double>(std::count_if(patch_mask.begin(), patch_mask.end(), [](auto b) { return b != 0; }));
  const double scale = 2.0 / (hidden * static_cast<double>(predicted.cols()));
  nn::Matrix g = nn::Matrix::Zero(predicted.rows(), predicted.cols());
  for (Eigen::Index r = 0; r < predicted.rows(); ++r)
    if (patch_mask[r]) g.row(r) = scale * (predicted.row(r) - t.row(r));
  return g;
}

// ---------------------------------------------------------------------------

MaeModel::MaeModel(const MaeConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg.validate();
  Rng rng(init_seed);
  encoder_ = VitEncoder(params_, cfg.encoder, rng, "encoder");
  decoder_ = MaeDecoder(params_, cfg.encoder, cfg.decoder, rng, "decoder");
}

namespace {

void check_image(const Image& image, const EncoderConfig& enc) {
  if (image.height() != enc.image_height || image.width() != enc.image_width || image.channels() != enc.channels)
    fail("image " + std::to_string(image.height()) + "x" + std::to_string(image.width()) + "x" +
         std::to_string(image.channels()) + " does not match model input " + std::to_string(enc.image_height) + "x" +
         std::to_string(enc.image_width) + "x" + std::to_string(enc.channels));
}

void check_mask(const MaskPattern& mask, const EncoderConfig& enc) {
  if (mask.grid_rows != enc.grid_rows() || mask.grid_cols != enc.grid_cols() || mask.patch != enc.patch)
    fail("mask grid does not match the model patch grid");
}

}  // namespace

double MaeModel::loss(const Image& image, const MaskPattern& mask, nn::Gradients* grads) const {
  check_image(image, cfg_.encoder);
  check_mask(mask, cfg_.encoder);
  const auto grid = patchify(image, cfg_.encoder.patch);
  const auto keep = mask.visible_indices();
  VitEncoder::Cache enc_cache;
  MaeDecoder::Cache dec_cache;
  const nn::Matrix latent = encoder_.forward(params_, grid.patches, keep, enc_cache);
  const nn::Matrix pred = decoder_.forward(params_, latent, keep, dec_cache);
  const double value = reconstruction_loss(pred, grid.patches, mask.patch_mask, cfg_.normalize_pixel_loss);
  if (grads) {
    const nn::Matrix dpred = reconstruction_loss_grad(pred, grid.patches, mask.patch_mask, cfg_.normalize_pixel_loss);
    const nn::Matrix dlatent = decoder_.backward(params_, dec_cache, dpred, *grads);
    encoder_.backward(params_, enc_cache, dlatent, *grads);
  }
  return value;
}

nn::Matrix MaeModel::predict_patches(const Image& image, const MaskPattern& mask) const {
  check_image(image, cfg_.encoder);
  check_mask(mask, cfg_.encoder);
  const auto grid = patchify(image, cfg_.encoder.patch);
  const auto keep = mask.visible_indices();
  VitEncoder::Cache enc_cache;
  MaeDecoder::Cache dec_cache;
  nn::Matrix pred = decoder_.forward(params_, encoder_.forward(params_, grid.patches, keep, enc_cache), keep, dec_cache);
  if (cfg_.normalize_pixel_loss) {
    // Predictions live in per-patch standardised space; map back with the
    // input patch statistics.
    const double n = static_cast<double>(grid.patches.cols());
    for (Eigen::Index r = 0; r < pred.rows(); ++r) {
      const double mean = grid.patches.row(r).mean();
      const double var = (grid.patches.row(r).array() - mean).square().sum() / std::max(1.0, n - 1.0);
      pred.row(r) = pred.row(r).array() * std::sqrt(var + 1e-6) + mean;
    }
  }
  return pred;
}

Image MaeModel::reconstruct(const Image& image, const MaskPattern& mask) const {
  auto grid = patchify(image, cfg_.encoder.patch);
  if (mask.masked_count() == 0) {
    check_image(image, cfg_.encoder);
    check_mask(mask, cfg_.encoder);
    return image;
  }
  const nn::Matrix pred = predict_patches(image, mask);
  for (int r = 0; r < grid.count(); ++r)
    if (mask.patch_mask[r]) grid.patches.row(r) = pred.row(r);
  return unpatchify(grid);
}

void MaeModel::save(const std::filesystem::path& dir, std::uint64_t step, int epoch, const json& extra) const {
  save_checkpoint(dir, CheckpointMeta{"mae", to_json(cfg_), extra, step, epoch}, params_);
}

MaeModel MaeModel::load(const std::filesystem::path& dir) {
  const auto meta = read_checkpoint_meta(dir);
  if (meta.kind != "mae") fail("checkpoint " + dir.string() + " holds a '" + meta.kind + "' model, expected 'mae'");
  MaeModel model(mae_config_from_json(meta.config), 0);
  load_parameters(dir, model.params_);
  return model;
}

// ---------------------------------------------------------------------------

Image augment_for_pretraining(const Image& image, double min_area, double max_area, bool flip, Rng& rng) {
  const int h = image.height(), w = image.width();
  const double area = static_cast<double>(h) * w;
  int ch = h, cw = w, top = 0, left = 0;
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * rng.uniform(min_area, max_area);
    const double log_ratio = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    const double ratio = std::exp(log_ratio);
    const int tw = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int th = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (tw > 0 && th > 0 && tw <= w && th <= h) {
      cw = tw;
      ch = th;
      top = static_cast<int>(rng.below(static_cast<std::uint64_t>(h - th + 1)));
      left = static_cast<int>(rng.below(static_cast<std::uint64_t>(w - tw + 1)));
      found = true;
    }
  }
  Image out = found ? resize_bilinear(crop(image, top, left, ch, cw), h, w) : image;
  if (flip && rng.bernoulli(0.5)) out = horizontal_flip(out);
  return out;
}

PretrainResult pretrain(const std::vector<Image>& images, const MaeConfig& cfg, const std::filesystem::path& out,
                        MaeModel& model, const PretrainOptions& options) {
  cfg.validate();
  if (images.empty()) fail("pretraining corpus is empty");
  const auto n = static_cast<long>(images.size());
  const long steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  long total = steps_per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);
  const auto warmup = static_cast<long>(std::lround(cfg.warmup_ratio * static_cast<double>(total)));

  PretrainResult result;
  result.last_checkpoint = out / "last";
  result.best_checkpoint = out / "best";
  const json extra{{"trainer", "pretrain"}, {"images", n}};
  if (total == 0) {
    model.save(result.last_checkpoint, 0, 0, extra);
    model.save(result.best_checkpoint, 0, 0, extra);
    return result;
  }

  AdamW optimizer(model.params(), cfg.optimizer);
  nn::Gradients grads(model.params());
  Rng rng(cfg.seed);
  std::vector<long> order(n);
  double best = INFINITY;
  const auto& enc = cfg.encoder;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    std::iota(order.begin(), order.end(), 0L);
    rng.shuffle(order);
    double epoch_sum = 0.0;
    long epoch_batches = 0;
    for (long start = 0; start < n && step < total; start += cfg.batch_size) {
      const long end = std::min(n, start + cfg.batch_size);
      grads.zero();
      double batch_loss = 0.0;
      for (long b = start; b < end; ++b) {
        const Image view = augment_for_pretraining(images[order[b]], cfg.crop_min_area, cfg.crop_max_area,
                                                   cfg.horizontal_flip, rng);
        const auto mask = sample_mask(enc.grid_rows(), enc.grid_cols(), enc.patch, cfg.mask_ratio, rng.next());
        batch_loss += model.loss(view, mask, &grads);
      }
      const double count = static_cast<double>(end - start);
      batch_loss /= count;
      grads.scale(1.0 / count);
      if (!std::isfinite(batch_loss) || !grads.all_finite())
        throw Error(ErrorCode::kNumeric, "non-finite loss " + std::to_string(batch_loss) + " at step " +
                                             std::to_string(step) + " (epoch " + std::to_string(epoch) + ")");
      optimizer.step(model.params(), grads, cosine_lr(step, total, warmup, cfg.base_lr));
      result.step_losses.push_back(batch_loss);
      if (options.on_step) options.on_step(step, batch_loss);
      epoch_sum += batch_loss;
      ++epoch_batches;
      ++step;
    }
    const double epoch_loss = epoch_sum / static_cast<double>(std::max(1L, epoch_batches));
    result.epoch_losses.push_back(epoch_loss);
    json meta = extra;
    meta["epoch_loss"] = epoch_loss;
    model.save(result.last_checkpoint, static_cast<std::uint64_t>(step), epoch + 1, meta);
    if (epoch_loss < best) {
      best = epoch_loss;
      model.save(result.best_checkpoint, static_cast<std::uint64_t>(step), epoch + 1, meta);
    }
  }
  result.steps = step;
  return result;
}

PretrainResult pretrain(const DatasetManifest& corpus, const MaeConfig& cfg, const std::filesystem::path& out,
                        const PretrainOptions& options) {
  cfg.validate();
  if (corpus.entries.empty()) fail("pretraining corpus is empty");
  std::vector<Image> images;
  images.reserve(corpus.entries.size());
  for (const auto& e : corpus.entries)
    images.push_back(ingest_image(corpus.image_path(e), cfg.encoder.image_height, cfg.encoder.image_width,
                                  cfg.encoder.channels)
                         .pixels);
  MaeModel model(cfg, cfg.seed);
  if (options.init_checkpoint) {
    const auto report = load_parameters(*options.init_checkpoint, model.params(), false);
    if (report.loaded == 0) fail("initial checkpoint shares no parameters with the model");
  }
  return pretrain(images, cfg, out, model, options);
}

}  // namespace radmae
