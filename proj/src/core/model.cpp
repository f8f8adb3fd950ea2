#include "radmae/model.hpp"

#include <algorithm>
#include <array>

#include "radmae/checkpoint.hpp"
#include "radmae/error.hpp"
#include "radmae/mae.hpp"

namespace radmae {

using nlohmann::json;

void BackboneConfig::validate() const {
  encoder.validate();
  if (kind == "conv") {
    if (encoder.image_height % 4 != 0 || encoder.image_width % 4 != 0)
      fail("conv backbone needs image sides divisible by 4");
    if (conv_width <= 0 || conv_out <= 0) fail("conv widths must be positive");
  } else if (kind != "vit") {
    fail("unknown backbone kind '" + kind + "'");
  }
}

json to_json(const BackboneConfig& c) {
  json j{{"kind", c.kind},
         {"image_size", {c.encoder.image_height, c.encoder.image_width}},
         {"channels", c.encoder.channels}};
  if (c.kind == "vit") {
    j["patch_size"] = c.encoder.patch;
    j["encoder_dim"] = c.encoder.dim;
    j["encoder_depth"] = c.encoder.depth;
    j["encoder_heads"] = c.encoder.heads;
    j["mlp_ratio"] = c.encoder.mlp_ratio;
  } else {
    j["conv_width"] = c.conv_width;
    j["conv_out"] = c.conv_out;
  }
  return j;
}

BackboneConfig backbone_config_from_json(const json& j, BackboneConfig c) {
  try {
    c.kind = j.value("kind", c.kind);
    if (j.contains("image_size")) {
      const auto size = j.at("image_size").get<std::vector<int>>();
      if (size.size() != 2) fail_parse("image_size must be [height, width]");
      c.encoder.image_height = size[0];
      c.encoder.image_width = size[1];
    }
    c.encoder.channels = j.value("channels", c.encoder.channels);
    c.encoder.patch = j.value("patch_size", c.encoder.patch);
    c.encoder.dim = j.value("encoder_dim", c.encoder.dim);
    c.encoder.depth = j.value("encoder_depth", c.encoder.depth);
    c.encoder.heads = j.value("encoder_heads", c.encoder.heads);
    c.encoder.mlp_ratio = j.value("mlp_ratio", c.encoder.mlp_ratio);
    c.conv_width = j.value("conv_width", c.conv_width);
    c.conv_out = j.value("conv_out", c.conv_out);
  } catch (const json::exception& ex) {
    fail_parse(std::string("backbone config: ") + ex.what());
  }
  c.validate();
  return c;
}

namespace {

class VitBackbone final : public Backbone {
 public:
  struct VitCache : Cache {
    VitEncoder::Cache enc;
  };

  VitBackbone(nn::ParameterSet& ps, const EncoderConfig& cfg, Rng& rng) : enc_(ps, cfg, rng, "encoder") {
    keep_.resize(static_cast<std::size_t>(cfg.num_patches()));
    for (int i = 0; i < cfg.num_patches(); ++i) keep_[static_cast<std::size_t>(i)] = i;
  }

  int embedding_dim() const override { return enc_.config().dim; }
  int num_layers() const override { return enc_.num_layers(); }
  int image_height() const override { return enc_.config().image_height; }
  int image_width() const override { return enc_.config().image_width; }
  int channels() const override { return enc_.config().channels; }

  nn::Matrix forward(const nn::ParameterSet& ps, const Image& image, std::unique_ptr<Cache>& cache) const override {
    auto c = std::make_unique<VitCache>();
    const auto grid = patchify(image, enc_.config().patch);
    const nn::Matrix tokens = enc_.forward(ps, grid.patches, keep_, c->enc);
    nn::Matrix emb = tokens.bottomRows(tokens.rows() - 1).colwise().mean();
    cache = std::move(c);
    return emb;
  }

  void backward(const nn::ParameterSet& ps, const Cache& cache, const nn::Matrix& demb,
                nn::Gradients& g) const override {
    const auto& c = static_cast<const VitCache&>(cache);
    const auto n = static_cast<Eigen::Index>(keep_.size());
    nn::Matrix dtokens(n + 1, demb.cols());
    dtokens.row(0).setZero();
    dtokens.bottomRows(n) = (demb / static_cast<double>(n)).replicate(n, 1);
    enc_.backward(ps, c.enc, dtokens, g);
  }

 private:
  VitEncoder enc_;
  std::vector<int> keep_;
};

// Feature maps are (rows * cols) x channels matrices in raster order.
struct FeatureMap {
  int rows = 0, cols = 0;
  nn::Matrix x;
};

// 3x3 neighbourhoods with zero padding: (rows * cols) x (9 * channels).
nn::Matrix im2col3(const FeatureMap& f) {
  const auto c = f.x.cols();
  nn::Matrix out = nn::Matrix::Zero(static_cast<Eigen::Index>(f.rows) * f.cols, 9 * c);
  for (int i = 0; i < f.rows; ++i)
    for (int j = 0; j < f.cols; ++j)
      for (int k = 0; k < 9; ++k) {
        const int si = i + k / 3 - 1, sj = j + k % 3 - 1;
        if (si < 0 || sj < 0 || si >= f.rows || sj >= f.cols) continue;
        out.block(i * f.cols + j, k * c, 1, c) = f.x.row(si * f.cols + sj);
      }
  return out;
}

nn::Matrix col2im3(const nn::Matrix& dcols, int rows, int cols, Eigen::Index c) {
  nn::Matrix dx = nn::Matrix::Zero(static_cast<Eigen::Index>(rows) * cols, c);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      for (int k = 0; k < 9; ++k) {
        const int si = i + k / 3 - 1, sj = j + k % 3 - 1;
        if (si < 0 || sj < 0 || si >= rows || sj >= cols) continue;
        dx.row(si * cols + sj) += dcols.block(i * cols + j, k * c, 1, c);
      }
  return dx;
}

// Concatenates each 2x2 block: (rows/2 * cols/2) x (4 * channels).
nn::Matrix merge2(const FeatureMap& f) {
  const auto c = f.x.cols();
  const int r2 = f.rows / 2, c2 = f.cols / 2;
  nn::Matrix out(static_cast<Eigen::Index>(r2) * c2, 4 * c);
  for (int r = 0; r < r2; ++r)
    for (int q = 0; q < c2; ++q)
      for (int k = 0; k < 4; ++k) out.block(r * c2 + q, k * c, 1, c) = f.x.row((2 * r + k / 2) * f.cols + 2 * q + k % 2);
  return out;
}

nn::Matrix unmerge2(const nn::Matrix& d, int rows, int cols, Eigen::Index c) {
  const int r2 = rows / 2, c2 = cols / 2;
  nn::Matrix dx(static_cast<Eigen::Index>(rows) * cols, c);
  for (int r = 0; r < r2; ++r)
    for (int q = 0; q < c2; ++q)
      for (int k = 0; k < 4; ++k) dx.row((2 * r + k / 2) * cols + 2 * q + k % 2) = d.block(r * c2 + q, k * c, 1, c);
  return dx;
}

nn::Matrix gelu_of(const nn::Matrix& m) { return m.unaryExpr([](double v) { return nn::gelu(v); }); }

void times_gelu_grad(nn::Matrix& d, const nn::Matrix& pre) {
  d.array() *= pre.unaryExpr([](double v) { return nn::gelu_grad(v); }).array();
}

// Two stages of 3x3 convolution followed by a 2x2 strided merge, then mean
// and max pooling. Every linear map is followed by GELU.
class ConvBackbone final : public Backbone {
 public:
  struct ConvCache : Cache {
    std::array<nn::Matrix, 4> in, pre;  // stage inputs (im2col or merged) and pre-activations
    nn::Matrix out;
    std::vector<Eigen::Index> argmax;
  };

  ConvBackbone(nn::ParameterSet& ps, const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    const int c = cfg.encoder.channels, w = cfg.conv_width;
    layers_[0] = nn::Linear(ps, "conv.c1", 9 * c, w, 0, rng);
    layers_[1] = nn::Linear(ps, "conv.m1", 4 * w, 2 * w, 1, rng);
    layers_[2] = nn::Linear(ps, "conv.c2", 18 * w, 2 * w, 2, rng);
    layers_[3] = nn::Linear(ps, "conv.m2", 8 * w, cfg.conv_out, 3, rng);
  }

  // Mean-pooled and max-pooled channels side by side.
  int embedding_dim() const override { return 2 * cfg_.conv_out; }
  int num_layers() const override { return 5; }
  int image_height() const override { return cfg_.encoder.image_height; }
  int image_width() const override { return cfg_.encoder.image_width; }
  int channels() const override { return cfg_.encoder.channels; }

  nn::Matrix forward(const nn::ParameterSet& ps, const Image& image, std::unique_ptr<Cache>& cache) const override {
    auto c = std::make_unique<ConvCache>();
    const int h = image.height(), w = image.width(), ch = image.channels();
    FeatureMap f{h, w, nn::Matrix(static_cast<Eigen::Index>(h) * w, ch)};
    std::copy(image.data().begin(), image.data().end(), f.x.data());
    for (int s = 0; s < 4; ++s) {
      const bool conv = s % 2 == 0;
      c->in[static_cast<std::size_t>(s)] = conv ? im2col3(f) : merge2(f);
      c->pre[static_cast<std::size_t>(s)] = layers_[static_cast<std::size_t>(s)].forward(ps, c->in[static_cast<std::size_t>(s)]);
      if (!conv) {
        f.rows /= 2;
        f.cols /= 2;
      }
      f.x = gelu_of(c->pre[static_cast<std::size_t>(s)]);
    }
    c->out = f.x;
    const int d = cfg_.conv_out;
    nn::Matrix emb(1, 2 * d);
    emb.leftCols(d) = c->out.colwise().mean();
    c->argmax.resize(static_cast<std::size_t>(d));
    for (int k = 0; k < d; ++k) emb(0, d + k) = c->out.col(k).maxCoeff(&c->argmax[static_cast<std::size_t>(k)]);
    cache = std::move(c);
    return emb;
  }

  void backward(const nn::ParameterSet& ps, const Cache& cache, const nn::Matrix& demb,
                nn::Gradients& g) const override {
    const auto& c = static_cast<const ConvCache&>(cache);
    const auto n = c.out.rows();
    const int d = cfg_.conv_out;
    nn::Matrix dx = (demb.leftCols(d) / static_cast<double>(n)).replicate(n, 1);
    for (int k = 0; k < d; ++k) dx(c.argmax[static_cast<std::size_t>(k)], k) += demb(0, d + k);
    // Spatial size at the input of each stage.
    const int h = cfg_.encoder.image_height, w = cfg_.encoder.image_width;
    const std::array<std::pair<int, int>, 4> size{{{h, w}, {h, w}, {h / 2, w / 2}, {h / 2, w / 2}}};
    const std::array<Eigen::Index, 4> in_ch{cfg_.encoder.channels, cfg_.conv_width, 2 * cfg_.conv_width,
                                            2 * cfg_.conv_width};
    for (int s = 3; s >= 0; --s) {
      const auto su = static_cast<std::size_t>(s);
      times_gelu_grad(dx, c.pre[su]);
      const nn::Matrix din = layers_[su].backward(ps, c.in[su], dx, g);
      if (s == 0) break;
      dx = s % 2 == 0 ? col2im3(din, size[su].first, size[su].second, in_ch[su])
                      : unmerge2(din, size[su].first, size[su].second, in_ch[su]);
    }
  }

 private:
  BackboneConfig cfg_;
  std::array<nn::Linear, 4> layers_;
};

}  // namespace

std::unique_ptr<Backbone> make_backbone(nn::ParameterSet& ps, const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.kind == "conv") return std::make_unique<ConvBackbone>(ps, cfg, rng);
  return std::make_unique<VitBackbone>(ps, cfg.encoder, rng);
}

Classifier::Classifier(const BackboneConfig& cfg, int outputs, std::uint64_t init_seed) : cfg_(cfg), outputs_(outputs) {
  if (outputs <= 0) fail("classifier needs at least one output");
  Rng rng(init_seed);
  backbone_ = make_backbone(params_, cfg, rng);
  head_ = nn::Linear(params_, "head", backbone_->embedding_dim(), outputs, backbone_->num_layers() - 1, rng);
}

Classifier::Classifier(const Classifier& other) : Classifier(other.cfg_, other.outputs_, 0) {
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = other.params_[i].value;
}

nn::Matrix Classifier::forward(const Image& image, Cache& cache) const {
  if (image.height() != backbone_->image_height() || image.width() != backbone_->image_width() ||
      image.channels() != backbone_->channels())
    fail("image " + std::to_string(image.height()) + "x" + std::to_string(image.width()) + "x" +
         std::to_string(image.channels()) + " does not match the model input");
  cache.embedding = backbone_->forward(params_, image, cache.backbone);
  return head_.forward(params_, cache.embedding);
}

void Classifier::backward(const Cache& cache, const nn::Matrix& dlogits, nn::Gradients& g) const {
  const nn::Matrix demb = head_.backward(params_, cache.embedding, dlogits, g);
  backbone_->backward(params_, *cache.backbone, demb, g);
}

nn::Matrix Classifier::embed(const Image& image) const {
  std::unique_ptr<Backbone::Cache> cache;
  return backbone_->forward(params_, image, cache);
}

nn::Matrix Classifier::logits(const Image& image) const {
  Cache cache;
  return forward(image, cache);
}

void Classifier::load_backbone(const std::filesystem::path& mae_checkpoint) {
  if (cfg_.kind != "vit") fail("only transformer backbones load MAE checkpoints");
  const auto meta = read_checkpoint_meta(mae_checkpoint);
  if (meta.kind != "mae") fail("expected an MAE checkpoint at " + mae_checkpoint.string());
  const auto mae = mae_config_from_json(meta.config);
  if (mae.encoder.dim != cfg_.encoder.dim)
    fail("embedding dimension mismatch: checkpoint " + std::to_string(mae.encoder.dim) + ", model " +
         std::to_string(cfg_.encoder.dim));
  if (mae.encoder.depth != cfg_.encoder.depth || mae.encoder.patch != cfg_.encoder.patch ||
      mae.encoder.channels != cfg_.encoder.channels || mae.encoder.image_height != cfg_.encoder.image_height ||
      mae.encoder.image_width != cfg_.encoder.image_width)
    fail("backbone geometry differs from checkpoint " + mae_checkpoint.string());
  const auto report = load_parameters(mae_checkpoint, params_, false, "encoder.", "encoder.");
  if (report.missing != 2) fail("checkpoint " + mae_checkpoint.string() + " does not cover the encoder");
}

void Classifier::save(const std::filesystem::path& dir, const std::string& kind, const json& extra, int epoch) const {
  save_checkpoint(dir, CheckpointMeta{kind, {{"backbone", to_json(cfg_)}, {"outputs", outputs_}}, extra, 0, epoch},
                  params_);
}

Classifier Classifier::load(const std::filesystem::path& dir, json* extra, std::string* kind) {
  const auto meta = read_checkpoint_meta(dir);
  if (meta.kind == "mae") fail("checkpoint " + dir.string() + " holds an MAE, not a classifier");
  Classifier model(backbone_config_from_json(meta.config.at("backbone")), meta.config.at("outputs").get<int>(), 0);
  load_parameters(dir, model.params_);
  if (extra) *extra = meta.extra;
  if (kind) *kind = meta.kind;
  return model;
}

Image fit_to_model(const Image& image, const BackboneConfig& cfg) {
  Image out = image;
  if (out.height() != cfg.encoder.image_height || out.width() != cfg.encoder.image_width)
    out = resize_bilinear(out, cfg.encoder.image_height, cfg.encoder.image_width);
  if (out.channels() != cfg.encoder.channels) out = convert_channels(out, cfg.encoder.channels);
  for (auto& v : out.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

}  // namespace radmae
