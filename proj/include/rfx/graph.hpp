#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "rfx/tensor.hpp"

namespace rfx::nn {

class Graph;

struct Var {
  Graph* g = nullptr;
  int id = -1;
  const Tensor& val() const;
};

// Reverse-mode tape. Ops append nodes whose parents always have smaller ids,
// so reverse id order is a topological order for backward.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&)>;

  Var leaf(Tensor value, bool requires_grad = false);
  Var add_node(Tensor value, const std::vector<int>& parents, BackwardFn backward);

  const Tensor& val(int id) const { return nodes_[id].value; }
  const Tensor& val(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires; }

  // Accumulation buffer, allocated on first touch.
  Tensor& grad(int id);
  bool has_grad(int id) const { return nodes_[id].has_grad; }

  void backward(Var root);

  // Number of fully masked attention rows seen by this graph (diagnostic).
  int all_masked_rows = 0;

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires = false;
    std::vector<int> parents;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// ---- elementwise / structural ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var stop_grad(Var a);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(Var a, Var b);
Var slice_rows(Var x, int row0, int row1);
Var gather_rows(Var x, std::vector<int> indices);
// Inverse of a partition of row gathers: out[index_lists[k][i]] = parts[k][i].
Var scatter_rows(const std::vector<Var>& parts, std::vector<std::vector<int>> index_lists,
                 int n_rows);
Var tile_rows(Var row, int n);
Var mean_all(Var x);
Var weighted_sum(const std::vector<std::pair<Var, double>>& terms);

// ---- activations ----
Var gelu(Var x);
Var sigmoid(Var x);
Var softplus(Var x);
// y[r][c] = x[r][c] * col_scale[c] + col_shift[c]
Var affine_cols(Var x, std::vector<double> col_scale, std::vector<double> col_shift);

// ---- core layers ----
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a . b^T
Var linear(Var x, Var w, Var b);
Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var gelu_mlp(Var x, Var w1, Var b1, Var w2, Var b2);

// Per-query-row list of allowed key columns (sorted).
struct AttnPattern {
  std::vector<std::vector<int>> cols;
};

// Additive mask (0 allowed, -inf blocked) -> pattern.
AttnPattern pattern_from_additive_mask(const Tensor& mask);

// Block-sparse predictor mask: context rows self-attend diagonally; mask-token
// and register rows attend to all context, all registers, and themselves.
Tensor block_sparse_mask(int n_ctx, int n_mask_tokens, int n_registers);
AttnPattern block_sparse_pattern(int n_ctx, int n_mask_tokens, int n_registers);

// Multi-head softmax(q k^T / sqrt(dh)) v. With a pattern, scores are computed
// only over allowed columns; a row with no allowed column outputs zeros and
// bumps the graph's all_masked_rows counter.
Var attention(Var q, Var k, Var v, int heads, const AttnPattern* pattern = nullptr);
Var attention_masked(Var q, Var k, Var v, int heads, const Tensor& additive_mask);

// Debug-mode forward: returns per-head softmax weights (heads x nq x nk dense).
std::vector<Tensor> attention_weights(const Tensor& q, const Tensor& k, int heads,
                                      const AttnPattern* pattern = nullptr);

// Rotary embedding over continuous xyz: the vector splits into three equal
// sections, one per axis; consecutive pairs in a section rotate by
// base^(-2t/(d/3)) * coordinate. Norm preserving; d must divide by 6.
Var rotary_xyz(Var x, const Tensor& coords, double base_freq = 10000.0);

// ---- fused losses (targets are constants; gradients flow to logits only) ----
Var sigmoid_bce_mean(Var logits, const Tensor& targets);
Var dice_from_logits(Var logits, const Tensor& targets, double eps = 1.0);
Var l1_sum(Var pred, const Tensor& target);
// 1 - GIoU between two (cx,cy,cz,sx,sy,sz) boxes.
Var giou_loss(Var pred_box, const Tensor& gt_box);
Var softmax_focal_mean(Var logits, const std::vector<int>& target_cols, double alpha,
                       double gamma);
// Mean squared error with stop-grad on the target branch.
Var mse_stopgrad(Var pred, Var target);

// ---- plain helpers (no graph) ----
void softmax_row_inplace(double* row, int n);
Tensor softmax_rows(const Tensor& logits);

// Central-difference check of d(build(inputs))/d(inputs) against the tape.
// Returns the worst relative error over all input elements.
double grad_check(const std::function<Var(Graph&, const std::vector<Var>&)>& build,
                  const std::vector<Tensor>& inputs, double eps = 1e-5);

}  // namespace rfx::nn
