#pragma once

#include <span>
#include <vector>

#include <json.hpp>

#include "radmae/nn.hpp"

namespace radmae {

struct AdamWConfig {
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Decoupled weight decay Adam. Parameters flagged `decay == false` (biases,
/// norms, tokens) skip the decay term.
class AdamW {
 public:
  AdamW(const nn::ParameterSet& params, const AdamWConfig& cfg);

  // `layer_scales[p.layer]` multiplies the learning rate when non-empty.
  void step(nn::ParameterSet& params, const nn::Gradients& grads, double lr, std::span<const double> layer_scales = {});
  long steps() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::vector<nn::Matrix> m_, v_;
  long t_ = 0;
};

/// Linear warm-up for `warmup_steps`, then half-cosine decay to zero at `total_steps`.
double cosine_lr(long step, long total_steps, long warmup_steps, double base_lr);

/// Scale for layer l of `num_layers`: decay^(num_layers - 1 - l). The last
/// layer (the head) trains at the base rate.
std::vector<double> layerwise_lr_scales(int num_layers, double decay);

nlohmann::json to_json(const AdamWConfig& c);
AdamWConfig adamw_from_json(const nlohmann::json& j, AdamWConfig defaults = {});

}  // namespace radmae
