#include <cmath>

#include "ebnet/trainer/trainer.hpp"

namespace ebnet::trainer {

void Adam::step(const std::vector<graph::Param<float>*>& params, double lr, double weight_decay) {
  if (zero_decay_ && weight_decay != 0.0) throw ContractError("weight decay must be zero in Stage II");
  if (state_.slots.empty()) {
    for (const auto* p : params)
      state_.slots.push_back({p->name, Tensor<float>::Array::Zero(p->value.size()),
                              Tensor<float>::Array::Zero(p->value.size())});
  }
  if (state_.slots.size() != params.size()) throw ContractError("optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state_.slots[i].name != params[i]->name || state_.slots[i].m.size() != params[i]->value.size())
      throw ContractError("optimizer slot mismatch for '" + params[i]->name + "'");
    const auto& g = params[i]->value.maybe_grad();
    if (g && !g->allFinite()) throw NumericError("non-finite gradient in '" + params[i]->name + "'");
  }
  ++state_.step;
  const double bc1 = 1.0 - std::pow(beta1_, double(state_.step));
  const double bc2 = 1.0 - std::pow(beta2_, double(state_.step));
  const auto b1 = float(beta1_), b2 = float(beta2_);
  const float step_size = float(lr / bc1);
  const float inv_bc2 = float(1.0 / bc2);
  const auto eps = float(eps_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    graph::Param<float>& p = *params[i];
    if (!p.trainable() || !p.value.has_grad()) continue;
    auto& w = p.value.values();
    Tensor<float>::Array g = *p.value.maybe_grad();
    if (weight_decay != 0.0 && p.decayed()) g += float(weight_decay) * w;
    AdamSlot& s = state_.slots[i];
    s.m = b1 * s.m + (1 - b1) * g;
    s.v = b2 * s.v + (1 - b2) * g.square();
    w -= step_size * s.m / ((s.v * inv_bc2).sqrt() + eps);
    if (p.role == graph::ParamRole::latent_binary) w = w.max(-1.0f).min(1.0f);
  }
}

}  // namespace ebnet::trainer
