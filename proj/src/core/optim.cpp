#include "radmae/optim.hpp"

#include <cmath>
#include <numbers>

#include "radmae/error.hpp"

namespace radmae {

AdamW::AdamW(const nn::ParameterSet& params, const AdamWConfig& cfg) : cfg_(cfg) {
  for (const auto& p : params) {
    m_.push_back(nn::Matrix::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(nn::Matrix::Zero(p.value.rows(), p.value.cols()));
  }
}

void AdamW::step(nn::ParameterSet& params, const nn::Gradients& grads, double lr, std::span<const double> layer_scales) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    double plr = lr;
    if (!layer_scales.empty()) {
      if (p.layer < 0 || static_cast<std::size_t>(p.layer) >= layer_scales.size())
        fail("parameter " + p.name + " has layer id outside the lr schedule");
      plr *= layer_scales[p.layer];
    }
    if (p.decay && cfg_.weight_decay > 0.0) p.value *= 1.0 - plr * cfg_.weight_decay;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i].cwiseProduct(grads[i]);
    p.value.array() -= plr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
  }
}

double cosine_lr(long step, long total_steps, long warmup_steps, double base_lr) {
  if (total_steps <= 0) return base_lr;
  if (step < warmup_steps) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const long span = std::max(1L, total_steps - warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<double> layerwise_lr_scales(int num_layers, double decay) {
  if (num_layers <= 0) fail("layer count must be positive");
  std::vector<double> scales(num_layers);
  for (int l = 0; l < num_layers; ++l) scales[l] = std::pow(decay, num_layers - 1 - l);
  return scales;
}

nlohmann::json to_json(const AdamWConfig& c) {
  return {{"weight_decay", c.weight_decay}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

AdamWConfig adamw_from_json(const nlohmann::json& j, AdamWConfig d) {
  d.weight_decay = j.value("weight_decay", d.weight_decay);
  d.beta1 = j.value("beta1", d.beta1);
  d.beta2 = j.value("beta2", d.beta2);
  d.eps = j.value("eps", d.eps);
  return d;
}

}  // namespace radmae
