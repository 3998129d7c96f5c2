#pragma once

#include <functional>
#include <map>
#include <string>

#include "rfx/graph.hpp"
#include "rfx/tensor.hpp"

namespace rfx::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;
};

using GradMap = std::map<std::string, Tensor>;

// Decoupled weight decay update with bias correction. A non-finite gradient
// rejects the whole step and leaves the counter unchanged. The second form
// takes a per-parameter learning rate (stage-wise schedules).
bool adamw_step(ParamStore& store, const GradMap& grads, const AdamConfig& cfg);
bool adamw_step(ParamStore& store, const GradMap& grads, const AdamConfig& cfg,
                const std::function<double(const std::string&)>& lr_of);

// shadow <- m * shadow + (1 - m) * params
void ema_update(EmaState& ema, const ParamStore& store, double momentum);

// Scales all gradients by min(1, max_norm / global_norm). Returns the norm.
double clip_global_norm(GradMap& grads, double max_norm);

// Binds parameters (live store or EMA shadows) into a graph as leaves, one
// leaf per name, created on first use.
class ParamBinder {
 public:
  ParamBinder(Graph& g, const ParamStore& store, bool trainable = true)
      : g_(&g), store_(&store), trainable_(trainable) {}
  ParamBinder(Graph& g, const std::map<std::string, Tensor>& values)
      : g_(&g), values_(&values), trainable_(false) {}

  Var operator()(const std::string& name);

  // Post-backward gradients for every bound parameter (zeros where untouched).
  GradMap grads() const;

 private:
  Graph* g_;
  const ParamStore* store_ = nullptr;
  const std::map<std::string, Tensor>* values_ = nullptr;
  bool trainable_;
  std::map<std::string, Var> bound_;
};

}  // namespace rfx::nn
