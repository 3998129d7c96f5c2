#include "rfx/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace rfx::nn {

bool adamw_step(ParamStore& store, const GradMap& grads, const AdamConfig& cfg) {
  return adamw_step(store, grads, cfg, [&](const std::string&) { return cfg.lr; });
}

bool adamw_step(ParamStore& store, const GradMap& grads, const AdamConfig& cfg,
                const std::function<double(const std::string&)>& lr_of) {
  for (const auto& [name, grad] : grads) {
    if (!grad.all_finite()) return false;
    if (!store.has(name)) throw std::invalid_argument("adamw: unknown parameter " + name);
    if (grad.shape != store.at(name).shape)
      throw std::invalid_argument("adamw: gradient shape mismatch for " + name);
  }
  store.step += 1;
  const double t = double(store.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& [name, grad] : grads) {
    auto& entry = store.params.at(name);
    const double lr = lr_of(name);
    for (size_t i = 0; i < grad.v.size(); ++i) {
      const double g = grad.v[i];
      double& m = entry.m.v[i];
      double& v = entry.vhat.v[i];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      double& p = entry.value.v[i];
      p -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p);
    }
  }
  return true;
}

void ema_update(EmaState& ema, const ParamStore& store, double momentum) {
  if (momentum < 0.0 || momentum > 1.0) throw std::invalid_argument("ema: momentum out of [0,1]");
  for (auto& [name, shadow] : ema.shadow) {
    const Tensor& live = store.at(name);
    if (shadow.shape != live.shape) throw std::invalid_argument("ema: shape mismatch " + name);
    for (size_t i = 0; i < shadow.v.size(); ++i)
      shadow.v[i] = momentum * shadow.v[i] + (1.0 - momentum) * live.v[i];
  }
}

double clip_global_norm(GradMap& grads, double max_norm) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (double x : g.v) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double s = max_norm / norm;
    for (auto& [name, g] : grads)
      for (double& x : g.v) x *= s;
  }
  return norm;
}

Var ParamBinder::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Tensor* value = nullptr;
  if (store_) {
    value = &store_->at(name);
  } else {
    auto vit = values_->find(name);
    if (vit == values_->end()) throw std::out_of_range("binder: missing " + name);
    value = &vit->second;
  }
  Var v = g_->leaf(*value, trainable_);
  bound_.emplace(name, v);
  return v;
}

GradMap ParamBinder::grads() const {
  GradMap out;
  for (const auto& [name, var] : bound_) {
    if (g_->has_grad(var.id))
      out[name] = g_->grad(var.id);
    else
      out[name] = Tensor(g_->val(var.id).shape, 0.0);
  }
  return out;
}

}  // namespace rfx::nn
