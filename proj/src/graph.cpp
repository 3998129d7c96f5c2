#include "rfx/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace rfx::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using Stride = Eigen::OuterStride<>;
using HeadBlock = Eigen::Map<RowMat, 0, Stride>;
using CHeadBlock = Eigen::Map<const RowMat, 0, Stride>;

constexpr double kInf = std::numeric_limits<double>::infinity();

CMapMat as_mat(const Tensor& t) { return CMapMat(t.v.data(), t.rows(), t.cols()); }
MapMat as_mat(Tensor& t) { return MapMat(t.v.data(), t.rows(), t.cols()); }

// Gradient buffer of a parent, or nullptr when it does not require grad.
Tensor* gbuf(Graph& g, int id) { return g.requires_grad(id) ? &g.grad(id) : nullptr; }

void check_2d(const Tensor& t, const char* who) {
  if (t.shape.size() > 2) throw std::invalid_argument(std::string(who) + ": expects <=2D");
}

}  // namespace

const Tensor& Var::val() const { return g->val(id); }

Var Graph::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires = requires_grad;
  nodes_.push_back(std::move(node));
  return {this, int(nodes_.size()) - 1};
}

Var Graph::add_node(Tensor value, const std::vector<int>& parents, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.parents = parents;
  for (int p : parents) node.requires = node.requires || nodes_[p].requires;
  if (node.requires) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, int(nodes_.size()) - 1};
}

Tensor& Graph::grad(int id) {
  Node& node = nodes_[id];
  if (!node.has_grad) {
    node.grad = Tensor(node.value.shape, 0.0);
    node.has_grad = true;
  }
  return node.grad;
}

void Graph::backward(Var root) {
  if (val(root.id).numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  grad(root.id).v[0] = 1.0;
  for (int id = root.id; id >= 0; --id) {
    Node& node = nodes_[id];
    if (node.has_grad && node.requires && node.backward) node.backward(*this);
  }
}

// ---------------------------------------------------------------------------
// elementwise / structural
// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
  Graph& g = *a.g;
  if (!g.val(a.id).same_shape(g.val(b.id))) throw std::invalid_argument("add: shape mismatch");
  Tensor out = g.val(a.id);
  const Tensor& bv = g.val(b.id);
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv.v[i];
  const int oid = int(g.size());
  return g.add_node(std::move(out), {a.id, b.id}, [oid, a, b](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    for (int pid : {a.id, b.id})
      if (Tensor* gp = gbuf(gg, pid))
        for (size_t i = 0; i < go.v.size(); ++i) gp->v[i] += go.v[i];
  });
}

Var sub(Var a, Var b) {
  Graph& g = *a.g;
  if (!g.val(a.id).same_shape(g.val(b.id))) throw std::invalid_argument("sub: shape mismatch");
  Tensor out = g.val(a.id);
  const Tensor& bv = g.val(b.id);
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= bv.v[i];
  const int oid = int(g.size());
  return g.add_node(std::move(out), {a.id, b.id}, [oid, a, b](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    if (Tensor* ga = gbuf(gg, a.id))
      for (size_t i = 0; i < go.v.size(); ++i) ga->v[i] += go.v[i];
    if (Tensor* gb = gbuf(gg, b.id))
      for (size_t i = 0; i < go.v.size(); ++i) gb->v[i] -= go.v[i];
  });
}

Var mul(Var a, Var b) {
  Graph& g = *a.g;
  if (!g.val(a.id).same_shape(g.val(b.id))) throw std::invalid_argument("mul: shape mismatch");
  Tensor out = g.val(a.id);
  const Tensor& bv = g.val(b.id);
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv.v[i];
  const int oid = int(g.size());
  return g.add_node(std::move(out), {a.id, b.id}, [oid, a, b](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    const Tensor& av = gg.val(a.id);
    const Tensor& bv2 = gg.val(b.id);
    if (Tensor* ga = gbuf(gg, a.id))
      for (size_t i = 0; i < go.v.size(); ++i) ga->v[i] += go.v[i] * bv2.v[i];
    if (Tensor* gb = gbuf(gg, b.id))
      for (size_t i = 0; i < go.v.size(); ++i) gb->v[i] += go.v[i] * av.v[i];
  });
}

Var scale(Var a, double c) {
  Graph& g = *a.g;
  Tensor out = g.val(a.id);
  for (double& x : out.v) x *= c;
  const int oid = int(g.size());
  return g.add_node(std::move(out), {a.id}, [oid, a, c](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    if (Tensor* ga = gbuf(gg, a.id))
      for (size_t i = 0; i < go.v.size(); ++i) ga->v[i] += c * go.v[i];
  });
}

Var stop_grad(Var a) {
  Graph& g = *a.g;
  return g.leaf(g.val(a.id), false);
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  Graph& g = *parts[0].g;
  const int cols = g.val(parts[0].id).cols();
  int rows = 0;
  std::vector<int> parents;
  for (const Var& p : parts) {
    if (g.val(p.id).cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += g.val(p.id).rows();
    parents.push_back(p.id);
  }
  Tensor out({rows, cols});
  int r = 0;
  for (const Var& p : parts) {
    const Tensor& t = g.val(p.id);
    std::copy(t.v.begin(), t.v.end(), out.v.begin() + size_t(r) * cols);
    r += t.rows();
  }
  const int oid = int(g.size());
  auto parts_copy = parts;
  return g.add_node(std::move(out), parents, [oid, parts_copy, cols](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    int row = 0;
    for (const Var& p : parts_copy) {
      const int pr = gg.val(p.id).rows();
      if (Tensor* gp = gbuf(gg, p.id)) {
        for (int i = 0; i < pr * cols; ++i) gp->v[i] += go.v[size_t(row) * cols + i];
      }
      row += pr;
    }
  });
}

Var concat_cols(Var a, Var b) {
  Graph& g = *a.g;
  const Tensor& av = g.val(a.id);
  const Tensor& bv = g.val(b.id);
  if (av.rows() != bv.rows()) throw std::invalid_argument("concat_cols: row mismatch");
  const int n = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor out({n, ca + cb});
  for (int r = 0; r < n; ++r) {
    std::copy_n(av.v.begin() + size_t(r) * ca, ca, out.v.begin() + size_t(r) * (ca + cb));
    std::copy_n(bv.v.begin() + size_t(r) * cb, cb, out.v.begin() + size_t(r) * (ca + cb) + ca);
  }
  const int oid = int(g.size());
  return g.add_node(std::move(out), {a.id, b.id}, [oid, a, b, n, ca, cb](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    Tensor* ga = gbuf(gg, a.id);
    Tensor* gb = gbuf(gg, b.id);
    for (int r = 0; r < n; ++r) {
      const double* row = go.v.data() + size_t(r) * (ca + cb);
      if (ga)
        for (int c = 0; c < ca; ++c) ga->v[size_t(r) * ca + c] += row[c];
      if (gb)
        for (int c = 0; c < cb; ++c) gb->v[size_t(r) * cb + c] += row[ca + c];
    }
  });
}

Var slice_rows(Var x, int row0, int row1) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  if (row0 < 0 || row1 > xv.rows() || row0 >= row1)
    throw std::invalid_argument("slice_rows: bad range");
  const int cols = xv.cols();
  Tensor out({row1 - row0, cols});
  std::copy_n(xv.v.begin() + size_t(row0) * cols, size_t(row1 - row0) * cols, out.v.begin());
  const int oid = int(g.size());
  return g.add_node(std::move(out), {x.id}, [oid, x, row0, cols](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    if (Tensor* gx = gbuf(gg, x.id))
      for (size_t i = 0; i < go.v.size(); ++i) gx->v[size_t(row0) * cols + i] += go.v[i];
  });
}

Var gather_rows(Var x, std::vector<int> indices) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  const int cols = xv.cols();
  Tensor out({int(indices.size()), cols});
  for (size_t i = 0; i < indices.size(); ++i)
    std::copy_n(xv.v.begin() + size_t(indices[i]) * cols, cols, out.v.begin() + i * cols);
  const int oid = int(g.size());
  return g.add_node(std::move(out), {x.id}, [oid, x, idx = std::move(indices), cols](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    if (Tensor* gx = gbuf(gg, x.id))
      for (size_t i = 0; i < idx.size(); ++i)
        for (int c = 0; c < cols; ++c) gx->v[size_t(idx[i]) * cols + c] += go.v[i * cols + c];
  });
}

Var scatter_rows(const std::vector<Var>& parts, std::vector<std::vector<int>> index_lists,
                 int n_rows) {
  if (parts.empty() || parts.size() != index_lists.size())
    throw std::invalid_argument("scatter_rows: parts/index mismatch");
  Graph& g = *parts[0].g;
  const int cols = g.val(parts[0].id).cols();
  Tensor out({n_rows, cols});
  std::vector<int> parents;
  for (size_t k = 0; k < parts.size(); ++k) {
    const Tensor& t = g.val(parts[k].id);
    if (int(index_lists[k].size()) != t.rows())
      throw std::invalid_argument("scatter_rows: index list length");
    parents.push_back(parts[k].id);
    for (size_t i = 0; i < index_lists[k].size(); ++i)
      std::copy_n(t.v.begin() + i * cols, cols,
                  out.v.begin() + size_t(index_lists[k][i]) * cols);
  }
  const int oid = int(g.size());
  auto parts_copy = parts;
  return g.add_node(std::move(out), parents,
                    [oid, parts_copy, lists = std::move(index_lists), cols](Graph& gg) {
                      const Tensor& go = gg.grad(oid);
                      for (size_t k = 0; k < parts_copy.size(); ++k) {
                        Tensor* gp = gbuf(gg, parts_copy[k].id);
                        if (!gp) continue;
                        for (size_t i = 0; i < lists[k].size(); ++i)
                          for (int c = 0; c < cols; ++c)
                            gp->v[i * cols + c] += go.v[size_t(lists[k][i]) * cols + c];
                      }
                    });
}

Var tile_rows(Var row, int n) {
  Graph& g = *row.g;
  const Tensor& rv = g.val(row.id);
  const int cols = rv.numel();
  Tensor out({n, cols});
  for (int r = 0; r < n; ++r) std::copy_n(rv.v.begin(), cols, out.v.begin() + size_t(r) * cols);
  const int oid = int(g.size());
  return g.add_node(std::move(out), {row.id}, [oid, row, n, cols](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    if (Tensor* gr = gbuf(gg, row.id))
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < cols; ++c) gr->v[c] += go.v[size_t(r) * cols + c];
  });
}

Var mean_all(Var x) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  const double inv = 1.0 / double(xv.numel());
  double sum = 0;
  for (double v : xv.v) sum += v;
  const int oid = int(g.size());
  return g.add_node(Tensor::scalar(sum * inv), {x.id}, [oid, x, inv](Graph& gg) {
    const double go = gg.grad(oid).v[0];
    if (Tensor* gx = gbuf(gg, x.id))
      for (double& v : gx->v) v += go * inv;
  });
}

Var weighted_sum(const std::vector<std::pair<Var, double>>& terms) {
  if (terms.empty()) throw std::invalid_argument("weighted_sum: empty");
  Graph& g = *terms[0].first.g;
  double total = 0;
  std::vector<int> parents;
  for (const auto& [v, w] : terms) {
    if (g.val(v.id).numel() != 1) throw std::invalid_argument("weighted_sum: scalar terms only");
    total += w * g.val(v.id).v[0];
    parents.push_back(v.id);
  }
  const int oid = int(g.size());
  auto terms_copy = terms;
  return g.add_node(Tensor::scalar(total), parents, [oid, terms_copy](Graph& gg) {
    const double go = gg.grad(oid).v[0];
    for (const auto& [v, w] : terms_copy)
      if (Tensor* gv = gbuf(gg, v.id)) gv->v[0] += go * w;
  });
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

namespace {
double norm_cdf(double x) { return 0.5 * (1.0 + std::erf(x * 0.7071067811865476)); }
double norm_pdf(double x) { return 0.3989422804014327 * std::exp(-0.5 * x * x); }
}  // namespace

Var gelu(Var x) {
  Graph& g = *x.g;
  Tensor out = g.val(x.id);
  for (double& v : out.v) v *= norm_cdf(v);
  const int oid = int(g.size());
  return g.add_node(std::move(out), {x.id}, [oid, x](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    const Tensor& xv = gg.val(x.id);
    if (Tensor* gx = gbuf(gg, x.id))
      for (size_t i = 0; i < go.v.size(); ++i) {
        const double v = xv.v[i];
        gx->v[i] += go.v[i] * (norm_cdf(v) + v * norm_pdf(v));
      }
  });
}

Var sigmoid(Var x) {
  Graph& g = *x.g;
  Tensor out = g.val(x.id);
  for (double& v : out.v) v = 1.0 / (1.0 + std::exp(-v));
  const int oid = int(g.size());
  return g.add_node(std::move(out), {x.id}, [oid, x](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    const Tensor& y = gg.val(oid);
    if (Tensor* gx = gbuf(gg, x.id))
      for (size_t i = 0; i < go.v.size(); ++i) gx->v[i] += go.v[i] * y.v[i] * (1.0 - y.v[i]);
  });
}

Var softplus(Var x) {
  Graph& g = *x.g;
  Tensor out = g.val(x.id);
  for (double& v : out.v) v = v > 30 ? v : std::log1p(std::exp(v));
  const int oid = int(g.size());
  return g.add_node(std::move(out), {x.id}, [oid, x](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    const Tensor& xv = gg.val(x.id);
    if (Tensor* gx = gbuf(gg, x.id))
      for (size_t i = 0; i < go.v.size(); ++i)
        gx->v[i] += go.v[i] / (1.0 + std::exp(-xv.v[i]));
  });
}

Var affine_cols(Var x, std::vector<double> col_scale, std::vector<double> col_shift) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  const int n = xv.rows(), c = xv.cols();
  if (int(col_scale.size()) != c || int(col_shift.size()) != c)
    throw std::invalid_argument("affine_cols: vector length mismatch");
  Tensor out = xv;
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < c; ++j) out.v[size_t(r) * c + j] = out.v[size_t(r) * c + j] * col_scale[j] + col_shift[j];
  const int oid = int(g.size());
  return g.add_node(std::move(out), {x.id},
                    [oid, x, sc = std::move(col_scale), n, c](Graph& gg) {
                      const Tensor& go = gg.grad(oid);
                      if (Tensor* gx = gbuf(gg, x.id))
                        for (int r = 0; r < n; ++r)
                          for (int j = 0; j < c; ++j)
                            gx->v[size_t(r) * c + j] += go.v[size_t(r) * c + j] * sc[j];
                    });
}

// ---------------------------------------------------------------------------
// core layers
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Graph& g = *a.g;
  const Tensor& av = g.val(a.id);
  const Tensor& bv = g.val(b.id);
  check_2d(av, "matmul");
  if (av.cols() != bv.rows()) throw std::invalid_argument("matmul: inner dim mismatch");
  Tensor out({av.rows(), bv.cols()});
  as_mat(out) = as_mat(av) * as_mat(bv);
  const int oid = int(g.size());
  return g.add_node(std::move(out), {a.id, b.id}, [oid, a, b](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    if (Tensor* ga = gbuf(gg, a.id)) as_mat(*ga) += as_mat(go) * as_mat(gg.val(b.id)).transpose();
    if (Tensor* gb = gbuf(gg, b.id)) as_mat(*gb) += as_mat(gg.val(a.id)).transpose() * as_mat(go);
  });
}

Var matmul_nt(Var a, Var b) {
  Graph& g = *a.g;
  const Tensor& av = g.val(a.id);
  const Tensor& bv = g.val(b.id);
  if (av.cols() != bv.cols()) throw std::invalid_argument("matmul_nt: inner dim mismatch");
  Tensor out({av.rows(), bv.rows()});
  as_mat(out) = as_mat(av) * as_mat(bv).transpose();
  const int oid = int(g.size());
  return g.add_node(std::move(out), {a.id, b.id}, [oid, a, b](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    if (Tensor* ga = gbuf(gg, a.id)) as_mat(*ga) += as_mat(go) * as_mat(gg.val(b.id));
    if (Tensor* gb = gbuf(gg, b.id)) as_mat(*gb) += as_mat(go).transpose() * as_mat(gg.val(a.id));
  });
}

Var linear(Var x, Var w, Var b) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  const Tensor& wv = g.val(w.id);
  const Tensor& bv = g.val(b.id);
  if (xv.cols() != wv.rows() || bv.numel() != wv.cols())
    throw std::invalid_argument("linear: shape mismatch");
  Tensor out({xv.rows(), wv.cols()});
  as_mat(out) = as_mat(xv) * as_mat(wv);
  as_mat(out).rowwise() += CMapVec(bv.v.data(), bv.numel()).transpose();
  const int oid = int(g.size());
  return g.add_node(std::move(out), {x.id, w.id, b.id}, [oid, x, w, b](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    if (Tensor* gx = gbuf(gg, x.id)) as_mat(*gx) += as_mat(go) * as_mat(gg.val(w.id)).transpose();
    if (Tensor* gw = gbuf(gg, w.id)) as_mat(*gw) += as_mat(gg.val(x.id)).transpose() * as_mat(go);
    if (Tensor* gb = gbuf(gg, b.id))
      MapVec(gb->v.data(), gb->numel()) += as_mat(go).colwise().sum().transpose();
  });
}

Var layernorm(Var x, Var gamma, Var beta, double eps) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  const Tensor& gv = g.val(gamma.id);
  const Tensor& bv = g.val(beta.id);
  const int n = xv.rows(), d = xv.cols();
  if (gv.numel() != d || bv.numel() != d) throw std::invalid_argument("layernorm: gamma/beta dim");
  Tensor out({n, d});
  auto stats = std::make_shared<std::vector<double>>(size_t(n) * 2);  // mean, inv_std per row
  for (int r = 0; r < n; ++r) {
    const double* row = xv.v.data() + size_t(r) * d;
    double mean = 0;
    for (int c = 0; c < d; ++c) mean += row[c];
    mean /= d;
    double var = 0;
    for (int c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= d;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    (*stats)[size_t(r) * 2] = mean;
    (*stats)[size_t(r) * 2 + 1] = inv_std;
    for (int c = 0; c < d; ++c)
      out.v[size_t(r) * d + c] = (row[c] - mean) * inv_std * gv.v[c] + bv.v[c];
  }
  const int oid = int(g.size());
  return g.add_node(std::move(out), {x.id, gamma.id, beta.id},
                    [oid, x, gamma, beta, stats, n, d](Graph& gg) {
                      const Tensor& go = gg.grad(oid);
                      const Tensor& xv2 = gg.val(x.id);
                      const Tensor& gv2 = gg.val(gamma.id);
                      Tensor* gx = gbuf(gg, x.id);
                      Tensor* ggam = gbuf(gg, gamma.id);
                      Tensor* gbet = gbuf(gg, beta.id);
                      for (int r = 0; r < n; ++r) {
                        const double mean = (*stats)[size_t(r) * 2];
                        const double inv_std = (*stats)[size_t(r) * 2 + 1];
                        const double* row = xv2.v.data() + size_t(r) * d;
                        const double* grow = go.v.data() + size_t(r) * d;
                        double s1 = 0, s2 = 0;  // mean(gy*gamma), mean(gy*gamma*xhat)
                        for (int c = 0; c < d; ++c) {
                          const double xhat = (row[c] - mean) * inv_std;
                          const double t = grow[c] * gv2.v[c];
                          s1 += t;
                          s2 += t * xhat;
                          if (ggam) ggam->v[c] += grow[c] * xhat;
                          if (gbet) gbet->v[c] += grow[c];
                        }
                        s1 /= d;
                        s2 /= d;
                        if (gx)
                          for (int c = 0; c < d; ++c) {
                            const double xhat = (row[c] - mean) * inv_std;
                            gx->v[size_t(r) * d + c] +=
                                (grow[c] * gv2.v[c] - s1 - xhat * s2) * inv_std;
                          }
                      }
                    });
}

Var gelu_mlp(Var x, Var w1, Var b1, Var w2, Var b2) {
  return linear(gelu(linear(x, w1, b1)), w2, b2);
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

AttnPattern pattern_from_additive_mask(const Tensor& mask) {
  AttnPattern pat;
  const int nq = mask.rows(), nk = mask.cols();
  pat.cols.resize(nq);
  for (int r = 0; r < nq; ++r)
    for (int c = 0; c < nk; ++c)
      if (mask.v[size_t(r) * nk + c] > -kInf) pat.cols[r].push_back(c);
  return pat;
}

Tensor block_sparse_mask(int n_ctx, int n_mask_tokens, int n_registers) {
  if (n_ctx < 0 || n_mask_tokens < 0 || n_registers < 0)
    throw std::invalid_argument("block_sparse_mask: negative count");
  const int s = n_ctx + n_mask_tokens + n_registers;
  Tensor mask({s, s}, -kInf);
  for (int r = 0; r < s; ++r) {
    double* row = mask.v.data() + size_t(r) * s;
    if (r < n_ctx) {
      row[r] = 0;  // context: diagonal self-attention only
    } else {
      for (int c = 0; c < n_ctx; ++c) row[c] = 0;
      for (int c = n_ctx + n_mask_tokens; c < s; ++c) row[c] = 0;
      row[r] = 0;
    }
  }
  return mask;
}

AttnPattern block_sparse_pattern(int n_ctx, int n_mask_tokens, int n_registers) {
  AttnPattern pat;
  const int s = n_ctx + n_mask_tokens + n_registers;
  pat.cols.resize(s);
  for (int r = 0; r < s; ++r) {
    if (r < n_ctx) {
      pat.cols[r] = {r};
      continue;
    }
    auto& cols = pat.cols[r];
    cols.reserve(n_ctx + n_registers + 1);
    for (int c = 0; c < n_ctx; ++c) cols.push_back(c);
    if (r < n_ctx + n_mask_tokens) cols.push_back(r);  // own column, before registers
    for (int c = n_ctx + n_mask_tokens; c < s; ++c) cols.push_back(c);
  }
  return pat;
}

namespace {

struct AttnCache {
  // Dense: per head nq x nk weights. Sparse: per row, per head, |cols| weights.
  std::vector<double> w;
  std::vector<size_t> row_offset;  // sparse path only; offset of row r, head 0
};

}  // namespace

Var attention(Var q, Var k, Var v, int heads, const AttnPattern* pattern) {
  Graph& g = *q.g;
  const Tensor& qv = g.val(q.id);
  const Tensor& kv = g.val(k.id);
  const Tensor& vv = g.val(v.id);
  const int nq = qv.rows(), nk = kv.rows(), d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || vv.rows() != nk)
    throw std::invalid_argument("attention: q/k/v dims disagree");
  if (heads < 1 || d % heads != 0) throw std::invalid_argument("attention: heads must divide d");
  if (pattern && int(pattern->cols.size()) != nq)
    throw std::invalid_argument("attention: pattern rows != nq");
  const int dh = d / heads;
  const double sc = 1.0 / std::sqrt(double(dh));

  auto cache = std::make_shared<AttnCache>();
  Tensor out({nq, d}, 0.0);

  if (!pattern) {
    cache->w.resize(size_t(heads) * nq * nk);
    for (int h = 0; h < heads; ++h) {
      CHeadBlock qh(qv.v.data() + h * dh, nq, dh, Stride(d));
      CHeadBlock kh(kv.v.data() + h * dh, nk, dh, Stride(d));
      CHeadBlock vh(vv.v.data() + h * dh, nk, dh, Stride(d));
      MapMat w(cache->w.data() + size_t(h) * nq * nk, nq, nk);
      w = qh * kh.transpose() * sc;
      for (int r = 0; r < nq; ++r) softmax_row_inplace(w.data() + size_t(r) * nk, nk);
      HeadBlock oh(out.v.data() + h * dh, nq, dh, Stride(d));
      oh = w * vh;
    }
  } else {
    cache->row_offset.resize(nq + 1);
    size_t total = 0;
    for (int r = 0; r < nq; ++r) {
      cache->row_offset[r] = total;
      total += size_t(heads) * pattern->cols[r].size();
      if (pattern->cols[r].empty()) ++g.all_masked_rows;
    }
    cache->row_offset[nq] = total;
    cache->w.resize(total);
    for (int r = 0; r < nq; ++r) {
      const auto& cols = pattern->cols[r];
      const int m = int(cols.size());
      if (m == 0) continue;  // fully masked row: zero output
      for (int h = 0; h < heads; ++h) {
        double* w = cache->w.data() + cache->row_offset[r] + size_t(h) * m;
        CMapVec qr(qv.v.data() + size_t(r) * d + h * dh, dh);
        for (int j = 0; j < m; ++j)
          w[j] = sc * qr.dot(CMapVec(kv.v.data() + size_t(cols[j]) * d + h * dh, dh));
        softmax_row_inplace(w, m);
        MapVec orow(out.v.data() + size_t(r) * d + h * dh, dh);
        for (int j = 0; j < m; ++j)
          orow += w[j] * CMapVec(vv.v.data() + size_t(cols[j]) * d + h * dh, dh);
      }
    }
  }

  const int oid = int(g.size());
  std::shared_ptr<const AttnPattern> pat_copy =
      pattern ? std::make_shared<AttnPattern>(*pattern) : nullptr;
  return g.add_node(
      std::move(out), {q.id, k.id, v.id},
      [oid, q, k, v, heads, dh, sc, nq, nk, cache, pat_copy](Graph& gg) {
        const Tensor& go = gg.grad(oid);
        const Tensor& qv2 = gg.val(q.id);
        const Tensor& kv2 = gg.val(k.id);
        const Tensor& vv2 = gg.val(v.id);
        const int d = dh * heads;
        Tensor* gq = gbuf(gg, q.id);
        Tensor* gk = gbuf(gg, k.id);
        Tensor* gv = gbuf(gg, v.id);
        if (!pat_copy) {
          for (int h = 0; h < heads; ++h) {
            CMapMat w(cache->w.data() + size_t(h) * nq * nk, nq, nk);
            CHeadBlock qh(qv2.v.data() + h * dh, nq, dh, Stride(d));
            CHeadBlock kh(kv2.v.data() + h * dh, nk, dh, Stride(d));
            CHeadBlock vh(vv2.v.data() + h * dh, nk, dh, Stride(d));
            CHeadBlock goh(go.v.data() + h * dh, nq, dh, Stride(d));
            if (gv) {
              HeadBlock gvh(gv->v.data() + h * dh, nk, dh, Stride(d));
              gvh += w.transpose() * goh;
            }
            if (gq || gk) {
              RowMat ds = goh * vh.transpose();            // nq x nk
              RowMat da = w.cwiseProduct(ds);              // w * ds
              Eigen::VectorXd rowsum = da.rowwise().sum();
              da -= w.cwiseProduct(rowsum.replicate(1, nk).eval());
              if (gq) {
                HeadBlock gqh(gq->v.data() + h * dh, nq, dh, Stride(d));
                gqh += da * kh * sc;
              }
              if (gk) {
                HeadBlock gkh(gk->v.data() + h * dh, nk, dh, Stride(d));
                gkh += da.transpose() * qh * sc;
              }
            }
          }
        } else {
          for (int r = 0; r < nq; ++r) {
            const auto& cols = pat_copy->cols[r];
            const int m = int(cols.size());
            if (m == 0) continue;
            for (int h = 0; h < heads; ++h) {
              const double* w = cache->w.data() + cache->row_offset[r] + size_t(h) * m;
              CMapVec gor(go.v.data() + size_t(r) * d + h * dh, dh);
              CMapVec qr(qv2.v.data() + size_t(r) * d + h * dh, dh);
              double tmp = 0;
              // ds_j = <gout, v_j>; da_j = w_j (ds_j - sum w ds)
              std::vector<double> ds(m);
              for (int j = 0; j < m; ++j) {
                ds[j] = gor.dot(CMapVec(vv2.v.data() + size_t(cols[j]) * d + h * dh, dh));
                tmp += w[j] * ds[j];
              }
              for (int j = 0; j < m; ++j) {
                const double da = w[j] * (ds[j] - tmp);
                const size_t col_off = size_t(cols[j]) * d + h * dh;
                if (gq) {
                  MapVec gqr(gq->v.data() + size_t(r) * d + h * dh, dh);
                  gqr += da * sc * CMapVec(kv2.v.data() + col_off, dh);
                }
                if (gk) {
                  MapVec gkr(gk->v.data() + col_off, dh);
                  gkr += da * sc * qr;
                }
                if (gv) {
                  MapVec gvr(gv->v.data() + col_off, dh);
                  gvr += w[j] * gor;
                }
              }
            }
          }
        }
      });
}

Var attention_masked(Var q, Var k, Var v, int heads, const Tensor& additive_mask) {
  const AttnPattern pat = pattern_from_additive_mask(additive_mask);
  return attention(q, k, v, heads, &pat);
}

std::vector<Tensor> attention_weights(const Tensor& q, const Tensor& k, int heads,
                                      const AttnPattern* pattern) {
  const int nq = q.rows(), nk = k.rows(), d = q.cols();
  const int dh = d / heads;
  const double sc = 1.0 / std::sqrt(double(dh));
  std::vector<Tensor> out;
  for (int h = 0; h < heads; ++h) {
    Tensor w({nq, nk}, 0.0);
    for (int r = 0; r < nq; ++r) {
      CMapVec qr(q.v.data() + size_t(r) * d + h * dh, dh);
      if (!pattern) {
        double* row = w.v.data() + size_t(r) * nk;
        for (int c = 0; c < nk; ++c)
          row[c] = sc * qr.dot(CMapVec(k.v.data() + size_t(c) * d + h * dh, dh));
        softmax_row_inplace(row, nk);
      } else {
        const auto& cols = pattern->cols[r];
        if (cols.empty()) continue;
        std::vector<double> s(cols.size());
        for (size_t j = 0; j < cols.size(); ++j)
          s[j] = sc * qr.dot(CMapVec(k.v.data() + size_t(cols[j]) * d + h * dh, dh));
        softmax_row_inplace(s.data(), int(s.size()));
        for (size_t j = 0; j < cols.size(); ++j) w.v[size_t(r) * nk + cols[j]] = s[j];
      }
    }
    out.push_back(std::move(w));
  }
  return out;
}

Var rotary_xyz(Var x, const Tensor& coords, double base_freq) {
  Graph& g = *x.g;
  const Tensor& xv = g.val(x.id);
  const int n = xv.rows(), d = xv.cols();
  if (d % 6 != 0) throw std::invalid_argument("rotary_xyz: d must be divisible by 6");
  if (coords.rows() != n || coords.cols() != 3)
    throw std::invalid_argument("rotary_xyz: coords must be n x 3");
  const int ds = d / 3;       // dims per axis section
  const int np = ds / 2;      // rotation pairs per section
  std::vector<double> freqs(np);
  for (int t = 0; t < np; ++t) freqs[t] = std::pow(base_freq, -2.0 * t / double(ds));

  // cos/sin per (row, section, pair), cached for backward
  auto trig = std::make_shared<std::vector<double>>(size_t(n) * 3 * np * 2);
  Tensor out = xv;
  for (int r = 0; r < n; ++r) {
    for (int axis = 0; axis < 3; ++axis) {
      const double c = coords.v[size_t(r) * 3 + axis];
      double* row = out.v.data() + size_t(r) * d + axis * ds;
      double* tr = trig->data() + ((size_t(r) * 3 + axis) * np) * 2;
      for (int t = 0; t < np; ++t) {
        const double ang = freqs[t] * c;
        const double ca = std::cos(ang), sa = std::sin(ang);
        tr[2 * t] = ca;
        tr[2 * t + 1] = sa;
        const double a = row[2 * t], b = row[2 * t + 1];
        row[2 * t] = a * ca - b * sa;
        row[2 * t + 1] = a * sa + b * ca;
      }
    }
  }
  const int oid = int(g.size());
  return g.add_node(std::move(out), {x.id}, [oid, x, trig, n, d, ds, np](Graph& gg) {
    const Tensor& go = gg.grad(oid);
    Tensor* gx = gbuf(gg, x.id);
    if (!gx) return;
    for (int r = 0; r < n; ++r) {
      for (int axis = 0; axis < 3; ++axis) {
        const double* grow = go.v.data() + size_t(r) * d + axis * ds;
        double* gxrow = gx->v.data() + size_t(r) * d + axis * ds;
        const double* tr = trig->data() + ((size_t(r) * 3 + axis) * np) * 2;
        for (int t = 0; t < np; ++t) {
          const double ca = tr[2 * t], sa = tr[2 * t + 1];
          const double ga = grow[2 * t], gb = grow[2 * t + 1];
          gxrow[2 * t] += ga * ca + gb * sa;   // inverse rotation
          gxrow[2 * t + 1] += -ga * sa + gb * ca;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// fused losses
// ---------------------------------------------------------------------------

Var sigmoid_bce_mean(Var logits, const Tensor& targets) {
  Graph& g = *logits.g;
  const Tensor& xv = g.val(logits.id);
  if (xv.numel() != targets.numel()) throw std::invalid_argument("bce: length mismatch");
  const int n = xv.numel();
  constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
  double loss = 0;
  auto probs = std::make_shared<std::vector<double>>(n);
  for (int i = 0; i < n; ++i) {
    const double p = std::clamp(1.0 / (1.0 + std::exp(-xv.v[i])), lo, hi);
    (*probs)[i] = p;
    loss -= targets.v[i] * std::log(p) + (1.0 - targets.v[i]) * std::log(1.0 - p);
  }
  loss /= n;
  const int oid = int(g.size());
  return g.add_node(Tensor::scalar(loss), {logits.id},
                    [oid, logits, probs, t = targets, n](Graph& gg) {
                      const double go = gg.grad(oid).v[0];
                      if (Tensor* gx = gbuf(gg, logits.id))
                        for (int i = 0; i < n; ++i)
                          gx->v[i] += go * ((*probs)[i] - t.v[i]) / n;
                    });
}

Var dice_from_logits(Var logits, const Tensor& targets, double eps) {
  Graph& g = *logits.g;
  const Tensor& xv = g.val(logits.id);
  if (xv.numel() != targets.numel()) throw std::invalid_argument("dice: length mismatch");
  const int n = xv.numel();
  auto probs = std::make_shared<std::vector<double>>(n);
  double s_pg = 0, s_p = 0, s_g = 0;
  for (int i = 0; i < n; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-xv.v[i]));
    (*probs)[i] = p;
    s_pg += p * targets.v[i];
    s_p += p;
    s_g += targets.v[i];
  }
  const double denom = s_p + s_g + eps;
  const double loss = 1.0 - (2.0 * s_pg + eps) / denom;
  const int oid = int(g.size());
  return g.add_node(Tensor::scalar(loss), {logits.id},
                    [oid, logits, probs, t = targets, n, s_pg, denom, eps](Graph& gg) {
                      const double go = gg.grad(oid).v[0];
                      if (Tensor* gx = gbuf(gg, logits.id))
                        for (int i = 0; i < n; ++i) {
                          const double p = (*probs)[i];
                          const double dldp =
                              -(2.0 * t.v[i] * denom - (2.0 * s_pg + eps)) / (denom * denom);
                          gx->v[i] += go * dldp * p * (1.0 - p);
                        }
                    });
}

Var l1_sum(Var pred, const Tensor& target) {
  Graph& g = *pred.g;
  const Tensor& xv = g.val(pred.id);
  if (xv.numel() != target.numel()) throw std::invalid_argument("l1: length mismatch");
  double loss = 0;
  for (int i = 0; i < xv.numel(); ++i) loss += std::abs(xv.v[i] - target.v[i]);
  const int oid = int(g.size());
  return g.add_node(Tensor::scalar(loss), {pred.id}, [oid, pred, t = target](Graph& gg) {
    const double go = gg.grad(oid).v[0];
    const Tensor& xv2 = gg.val(pred.id);
    if (Tensor* gx = gbuf(gg, pred.id))
      for (int i = 0; i < xv2.numel(); ++i) {
        const double diff = xv2.v[i] - t.v[i];
        gx->v[i] += go * (diff > 0 ? 1.0 : diff < 0 ? -1.0 : 0.0);
      }
  });
}

namespace {

// GIoU of (cx,cy,cz,sx,sy,sz) boxes and its gradient wrt the first box.
double giou_value_grad(const double* a, const double* b, double* grad_a) {
  double inter[3], hull[3];
  double d_inter_dc[3], d_inter_ds[3], d_hull_dc[3], d_hull_ds[3];
  for (int ax = 0; ax < 3; ++ax) {
    const double lo_a = a[ax] - 0.5 * a[3 + ax], hi_a = a[ax] + 0.5 * a[3 + ax];
    const double lo_b = b[ax] - 0.5 * b[3 + ax], hi_b = b[ax] + 0.5 * b[3 + ax];
    const double ov = std::min(hi_a, hi_b) - std::max(lo_a, lo_b);
    inter[ax] = std::max(0.0, ov);
    hull[ax] = std::max(hi_a, hi_b) - std::min(lo_a, lo_b);
    // d(min(hi_a,hi_b))/d{c,s}, d(max(lo_a,lo_b))/d{c,s}
    const double dhi_dc = hi_a < hi_b ? 1.0 : 0.0, dhi_ds = hi_a < hi_b ? 0.5 : 0.0;
    const double dlo_dc = lo_a > lo_b ? 1.0 : 0.0, dlo_ds = lo_a > lo_b ? -0.5 : 0.0;
    d_inter_dc[ax] = ov > 0 ? dhi_dc - dlo_dc : 0.0;
    d_inter_ds[ax] = ov > 0 ? dhi_ds - dlo_ds : 0.0;
    const double hhi_dc = hi_a >= hi_b ? 1.0 : 0.0, hhi_ds = hi_a >= hi_b ? 0.5 : 0.0;
    const double hlo_dc = lo_a <= lo_b ? 1.0 : 0.0, hlo_ds = lo_a <= lo_b ? -0.5 : 0.0;
    d_hull_dc[ax] = hhi_dc - hlo_dc;
    d_hull_ds[ax] = hhi_ds - hlo_ds;
  }
  const double vol_i = inter[0] * inter[1] * inter[2];
  const double vol_a = a[3] * a[4] * a[5];
  const double vol_b = b[3] * b[4] * b[5];
  const double vol_u = vol_a + vol_b - vol_i;
  const double vol_h = hull[0] * hull[1] * hull[2];
  const double giou = vol_i / vol_u - 1.0 + vol_u / vol_h;

  if (grad_a) {
    for (int p = 0; p < 6; ++p) {
      const int ax = p % 3;
      const bool is_size = p >= 3;
      const double others_i = ax == 0 ? inter[1] * inter[2]
                              : ax == 1 ? inter[0] * inter[2]
                                        : inter[0] * inter[1];
      const double others_h = ax == 0 ? hull[1] * hull[2]
                              : ax == 1 ? hull[0] * hull[2]
                                        : hull[0] * hull[1];
      const double d_i = others_i * (is_size ? d_inter_ds[ax] : d_inter_dc[ax]);
      const double d_h = others_h * (is_size ? d_hull_ds[ax] : d_hull_dc[ax]);
      const double d_vol_a =
          !is_size ? 0.0 : (ax == 0 ? a[4] * a[5] : ax == 1 ? a[3] * a[5] : a[3] * a[4]);
      const double d_u = d_vol_a - d_i;
      grad_a[p] = d_i / vol_u - vol_i * d_u / (vol_u * vol_u) + d_u / vol_h -
                  vol_u * d_h / (vol_h * vol_h);
    }
  }
  return giou;
}

}  // namespace

Var giou_loss(Var pred_box, const Tensor& gt_box) {
  Graph& g = *pred_box.g;
  const Tensor& xv = g.val(pred_box.id);
  if (xv.numel() != 6 || gt_box.numel() != 6)
    throw std::invalid_argument("giou_loss: boxes are 6 values");
  const double giou = giou_value_grad(xv.v.data(), gt_box.v.data(), nullptr);
  const int oid = int(g.size());
  return g.add_node(Tensor::scalar(1.0 - giou), {pred_box.id},
                    [oid, pred_box, gt = gt_box](Graph& gg) {
                      const double go = gg.grad(oid).v[0];
                      if (Tensor* gx = gbuf(gg, pred_box.id)) {
                        double grad[6];
                        giou_value_grad(gg.val(pred_box.id).v.data(), gt.v.data(), grad);
                        for (int i = 0; i < 6; ++i) gx->v[i] -= go * grad[i];
                      }
                    });
}

Var softmax_focal_mean(Var logits, const std::vector<int>& target_cols, double alpha,
                       double gamma) {
  Graph& g = *logits.g;
  const Tensor& xv = g.val(logits.id);
  const int n = xv.rows(), c = xv.cols();
  if (int(target_cols.size()) != n) throw std::invalid_argument("focal: one target per row");
  auto probs = std::make_shared<Tensor>(xv);
  double loss = 0;
  for (int r = 0; r < n; ++r) {
    softmax_row_inplace(probs->v.data() + size_t(r) * c, c);
    const double pt = std::max(probs->v[size_t(r) * c + target_cols[r]], 1e-12);
    loss += -alpha * std::pow(1.0 - pt, gamma) * std::log(pt);
  }
  loss /= n;
  const int oid = int(g.size());
  return g.add_node(
      Tensor::scalar(loss), {logits.id},
      [oid, logits, probs, cols = target_cols, alpha, gamma, n, c](Graph& gg) {
        const double go = gg.grad(oid).v[0];
        Tensor* gx = gbuf(gg, logits.id);
        if (!gx) return;
        for (int r = 0; r < n; ++r) {
          const double* p = probs->v.data() + size_t(r) * c;
          const double pt = std::max(p[cols[r]], 1e-12);
          const double one_m = 1.0 - pt;
          // d/dpt of -alpha (1-pt)^gamma log(pt)
          const double dfdpt =
              -alpha * (std::pow(one_m, gamma) / pt -
                        (gamma > 0 ? gamma * std::pow(one_m, gamma - 1.0) * std::log(pt) : 0.0));
          for (int j = 0; j < c; ++j) {
            const double dptdz = pt * ((j == cols[r] ? 1.0 : 0.0) - p[j]);
            gx->v[size_t(r) * c + j] += go * dfdpt * dptdz / n;
          }
        }
      });
}

Var mse_stopgrad(Var pred, Var target) {
  Graph& g = *pred.g;
  const Tensor& pv = g.val(pred.id);
  const Tensor& tv = g.val(target.id);
  if (!pv.same_shape(tv)) throw std::invalid_argument("mse: shape mismatch");
  const int n = pv.numel();
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    const double d = pv.v[i] - tv.v[i];
    loss += d * d;
  }
  loss /= n;
  const int oid = int(g.size());
  // target is a parent for graph structure but receives no gradient
  return g.add_node(Tensor::scalar(loss), {pred.id, target.id},
                    [oid, pred, target, n](Graph& gg) {
                      const double go = gg.grad(oid).v[0];
                      const Tensor& pv2 = gg.val(pred.id);
                      const Tensor& tv2 = gg.val(target.id);
                      if (Tensor* gp = gbuf(gg, pred.id))
                        for (int i = 0; i < n; ++i)
                          gp->v[i] += go * 2.0 * (pv2.v[i] - tv2.v[i]) / n;
                    });
}

// ---------------------------------------------------------------------------
// plain helpers
// ---------------------------------------------------------------------------

void softmax_row_inplace(double* row, int n) {
  double mx = -kInf;
  for (int i = 0; i < n; ++i) mx = std::max(mx, row[i]);
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    row[i] = std::exp(row[i] - mx);
    sum += row[i];
  }
  for (int i = 0; i < n; ++i) row[i] /= sum;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor out = logits;
  for (int r = 0; r < out.rows(); ++r)
    softmax_row_inplace(out.v.data() + size_t(r) * out.cols(), out.cols());
  return out;
}

double grad_check(const std::function<Var(Graph&, const std::vector<Var>&)>& build,
                  const std::vector<Tensor>& inputs, double eps) {
  // analytic pass
  Graph g;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(g.leaf(t, true));
  Var out = build(g, vars);
  if (out.val().numel() != 1) throw std::invalid_argument("grad_check: build must return scalar");
  g.backward(out);

  auto eval = [&](const std::vector<Tensor>& xs) {
    Graph gf;
    std::vector<Var> vs;
    vs.reserve(xs.size());
    for (const Tensor& t : xs) vs.push_back(gf.leaf(t, false));
    return build(gf, vs).val().v[0];
  };

  double worst = 0;
  std::vector<Tensor> probe = inputs;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (size_t e = 0; e < inputs[i].v.size(); ++e) {
      const double keep = probe[i].v[e];
      probe[i].v[e] = keep + eps;
      const double fp = eval(probe);
      probe[i].v[e] = keep - eps;
      const double fm = eval(probe);
      probe[i].v[e] = keep;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = g.has_grad(vars[i].id) ? g.grad(vars[i].id).v[e] : 0.0;
      const double rel =
          std::abs(numeric - analytic) / std::max({1.0, std::abs(numeric), std::abs(analytic)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace rfx::nn
