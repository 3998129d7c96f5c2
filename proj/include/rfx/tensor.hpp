#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rfx/rng.hpp"

namespace rfx::nn {

// Dense row-major value container. Double precision throughout: the desk-scale
// models are small and the gradient checks assume it.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  Tensor(std::vector<int> s, double fill = 0.0);
  static Tensor scalar(double x);
  static Tensor from(std::vector<int> s, std::vector<double> data);

  int numel() const;
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  double& at(int r, int c) { return v[size_t(r) * cols() + c]; }
  double at(int r, int c) const { return v[size_t(r) * cols() + c]; }
};

// Named parameters with AdamW moments and a shared step counter.
struct ParamStore {
  struct Entry {
    Tensor value, m, vhat;
  };
  std::map<std::string, Entry> params;  // ordered: deterministic iteration
  int64_t step = 0;

  Tensor& add(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return params.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  // FNV-1a over raw parameter bytes; moments and step excluded.
  uint64_t checksum() const;
};

// Shadow copies tracked by exponential moving average.
struct EmaState {
  std::map<std::string, Tensor> shadow;
  double momentum = 0.999;
};

EmaState make_ema(const ParamStore& store, double momentum);

// Initializers. Weights use uniform(+-1/sqrt(fan_in)), biases zero, learnable
// tokens normal(0, 0.02).
Tensor init_weight(int fan_in, int fan_out, Rng& rng);
Tensor init_bias(int n);
Tensor init_token(std::vector<int> shape, Rng& rng);

// Checkpoint file: magic "RFX3D1", then named tensors with a shape header and
// raw little-endian float64 values.
void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_checkpoint(const std::string& path);

std::map<std::string, Tensor> param_values(const ParamStore& store);
void load_param_values(ParamStore& store, const std::map<std::string, Tensor>& tensors);

}  // namespace rfx::nn
