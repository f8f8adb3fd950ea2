#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include <json.hpp>

#include "radmae/image.hpp"
#include "radmae/vit.hpp"

namespace radmae {

/// Image -> fixed-size embedding. Implementations keep their weights in the
/// caller's ParameterSet, so several models can share one optimizer.
class Backbone {
 public:
  struct Cache {
    virtual ~Cache() = default;
  };

  virtual ~Backbone() = default;
  virtual int embedding_dim() const = 0;
  // Layer ids run 0 .. num_layers() - 1; the head sits on the last id.
  virtual int num_layers() const = 0;
  virtual int image_height() const = 0;
  virtual int image_width() const = 0;
  virtual int channels() const = 0;
  virtual nn::Matrix forward(const nn::ParameterSet& ps, const Image& image, std::unique_ptr<Cache>& cache) const = 0;
  virtual void backward(const nn::ParameterSet& ps, const Cache& cache, const nn::Matrix& demb,
                        nn::Gradients& g) const = 0;
};

/// "vit": encoder from mae-core, embedding = mean of normalised patch tokens.
/// "conv": two (3x3 conv, 2x2 merge) stages, then mean and max pooling.
struct BackboneConfig {
  std::string kind = "vit";
  EncoderConfig encoder;  // image geometry for both kinds; transformer sizes for "vit"
  int conv_width = 16;
  int conv_out = 64;

  void validate() const;
};

nlohmann::json to_json(const BackboneConfig& c);
BackboneConfig backbone_config_from_json(const nlohmann::json& j, BackboneConfig defaults = {});

std::unique_ptr<Backbone> make_backbone(nn::ParameterSet& ps, const BackboneConfig& cfg, Rng& rng);

/// Backbone plus one linear head emitting `outputs` logits.
class Classifier {
 public:
  Classifier(const BackboneConfig& cfg, int outputs, std::uint64_t init_seed = 0);
  Classifier(const Classifier& other);
  Classifier& operator=(const Classifier&) = delete;

  struct Cache {
    std::unique_ptr<Backbone::Cache> backbone;
    nn::Matrix embedding;
  };

  const BackboneConfig& config() const { return cfg_; }
  int outputs() const { return outputs_; }
  int num_layers() const { return backbone_->num_layers(); }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }
  const nn::Linear& head() const { return head_; }

  nn::Matrix embed(const Image& image) const;
  nn::Matrix logits(const Image& image) const;  // 1 x outputs
  nn::Matrix forward(const Image& image, Cache& cache) const;
  void backward(const Cache& cache, const nn::Matrix& dlogits, nn::Gradients& g) const;

  /// Copies encoder weights from an MAE checkpoint. Throws when the checkpoint
  /// geometry or embedding dimension disagrees with this model.
  void load_backbone(const std::filesystem::path& mae_checkpoint);

  void save(const std::filesystem::path& dir, const std::string& kind, const nlohmann::json& extra = nlohmann::json::object(),
            int epoch = 0) const;
  /// Restores a model saved with `save`; `extra` receives the stored metadata.
  static Classifier load(const std::filesystem::path& dir, nlohmann::json* extra = nullptr, std::string* kind = nullptr);

 private:
  BackboneConfig cfg_;
  int outputs_;
  nn::ParameterSet params_;
  std::unique_ptr<Backbone> backbone_;
  nn::Linear head_;
};

/// Prepares an image for a model: resize, channel conversion, clamp to [0, 1].
Image fit_to_model(const Image& image, const BackboneConfig& cfg);

}  // namespace radmae
