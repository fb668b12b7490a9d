// Copyright 2026 TE2SL Lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "te2sl/autodiff.hpp"

#include <cassert>
#include <cmath>
#include <string>

#include "te2sl/errors.hpp"
#include "te2sl/params.hpp"

namespace te2sl {

namespace {

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn_acc(Tensor& c, const Tensor& a, const Tensor& b) {
  const int m = a.rows(), k = a.cols(), n = b.cols();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (int i = 0; i < m; ++i) {
    const double* arow = pa + static_cast<size_t>(i) * k;
    double* crow = pc + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = pb + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B^T, with B stored [n x k]
void gemm_nt_acc(Tensor& c, const Tensor& a, const Tensor& b) {
  const int m = a.rows(), k = a.cols(), n = b.rows();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (int i = 0; i < m; ++i) {
    const double* arow = pa + static_cast<size_t>(i) * k;
    double* crow = pc + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = pb + static_cast<size_t>(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

// C[k x n] += A^T * B, with A stored [m x k], B stored [m x n]
void gemm_tn_acc(Tensor& c, const Tensor& a, const Tensor& b) {
  const int m = a.rows(), k = a.cols(), n = b.cols();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (int i = 0; i < m; ++i) {
    const double* arow = pa + static_cast<size_t>(i) * k;
    const double* brow = pb + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = pc + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + t.shape_str());
  }
}

void require_same_graph(Var a, Var b) {
  assert(a.graph == b.graph && a.graph != nullptr);
  (void)a;
  (void)b;
}

}  // namespace

const Tensor& Var::value() const { return graph->value(*this); }

Var Graph::make(Tensor value, std::function<void()> backprop) {
  Node n;
  n.value = std::move(value);
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Graph::set_backprop(int id, std::function<void()> backprop) {
  nodes_[static_cast<size_t>(id)].backprop = std::move(backprop);
}

Var Graph::leaf(Tensor value) { return make(std::move(value), nullptr); }

Var Graph::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var{this, it->second};
  Var v = make(p.value, nullptr);
  nodes_[static_cast<size_t>(v.id)].bound = &p;
  param_nodes_.emplace(&p, v.id);
  return v;
}

Tensor& Graph::grad_ref(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty() && n.value.numel() > 0) n.grad = Tensor::zeros(n.value.shape());
  return n.grad;
}

const Tensor& Graph::grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad; }

void Graph::backward(Var loss, double seed) {
  assert(loss.graph == this);
  assert(!swept_ && "backward may run once per graph");
  swept_ = true;
  const Tensor& lv = value(loss);
  if (lv.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + lv.shape_str());
  }
  if (!lv.all_finite()) {
    throw NumericError("backward: loss is not finite");
  }
  grad_ref(loss.id)[0] += seed;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.grad.empty() && n.backprop) n.backprop();
  }
  for (auto& n : nodes_) {
    if (n.bound != nullptr && n.bound->trainable && !n.grad.empty()) {
      for (long long i = 0; i < n.grad.numel(); ++i) n.bound->grad[i] += n.grad[i];
    }
  }
}

// ---- ops -------------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_graph(a, b);
  Graph* g = a.graph;
  const Tensor& av = g->value(a);
  const Tensor& bv = g->value(b);
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions disagree: " + av.shape_str() + " vs " +
                     bv.shape_str());
  }
  Tensor out({av.rows(), bv.cols()});
  gemm_nn_acc(out, av, bv);
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, aid = a.id, bid = b.id, oid = o.id]() {
    const Tensor& dout = g->grad_ref(oid);
    gemm_nt_acc(g->grad_ref(aid), dout, g->value(Var{g, bid}));  // dA += dC * B^T
    gemm_tn_acc(g->grad_ref(bid), g->value(Var{g, aid}), dout);  // dB += A^T * dC
  });
  return o;
}

Var transpose(Var a) {
  Graph* g = a.graph;
  const Tensor& av = g->value(a);
  require_rank2(av, "transpose");
  Tensor out({av.cols(), av.rows()});
  for (int i = 0; i < av.rows(); ++i)
    for (int j = 0; j < av.cols(); ++j) out.at(j, i) = av.at(i, j);
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, aid = a.id, oid = o.id]() {
    const Tensor& dout = g->grad_ref(oid);
    Tensor& da = g->grad_ref(aid);
    for (int i = 0; i < dout.rows(); ++i)
      for (int j = 0; j < dout.cols(); ++j) da.at(j, i) += dout.at(i, j);
  });
  return o;
}

Var add(Var a, Var b) {
  require_same_graph(a, b);
  Graph* g = a.graph;
  const Tensor& av = g->value(a);
  const Tensor& bv = g->value(b);
  if (!av.same_shape(bv)) {
    throw ShapeError("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  }
  Tensor out = av;
  for (long long i = 0; i < out.numel(); ++i) out[i] += bv[i];
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, aid = a.id, bid = b.id, oid = o.id]() {
    const Tensor& dout = g->grad_ref(oid);
    Tensor& da = g->grad_ref(aid);
    Tensor& db = g->grad_ref(bid);
    for (long long i = 0; i < dout.numel(); ++i) {
      da[i] += dout[i];
      db[i] += dout[i];
    }
  });
  return o;
}

Var sub(Var a, Var b) {
  require_same_graph(a, b);
  Graph* g = a.graph;
  const Tensor& av = g->value(a);
  const Tensor& bv = g->value(b);
  if (!av.same_shape(bv)) {
    throw ShapeError("sub: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  }
  Tensor out = av;
  for (long long i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, aid = a.id, bid = b.id, oid = o.id]() {
    const Tensor& dout = g->grad_ref(oid);
    Tensor& da = g->grad_ref(aid);
    Tensor& db = g->grad_ref(bid);
    for (long long i = 0; i < dout.numel(); ++i) {
      da[i] += dout[i];
      db[i] -= dout[i];
    }
  });
  return o;
}

Var mul(Var a, Var b) {
  require_same_graph(a, b);
  Graph* g = a.graph;
  const Tensor& av = g->value(a);
  const Tensor& bv = g->value(b);
  if (!av.same_shape(bv)) {
    throw ShapeError("mul: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  }
  Tensor out = av;
  for (long long i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, aid = a.id, bid = b.id, oid = o.id]() {
    const Tensor& dout = g->grad_ref(oid);
    const Tensor& av2 = g->value(Var{g, aid});
    const Tensor& bv2 = g->value(Var{g, bid});
    Tensor& da = g->grad_ref(aid);
    Tensor& db = g->grad_ref(bid);
    for (long long i = 0; i < dout.numel(); ++i) {
      da[i] += dout[i] * bv2[i];
      db[i] += dout[i] * av2[i];
    }
  });
  return o;
}

Var scale(Var a, double c) {
  Graph* g = a.graph;
  Tensor out = g->value(a);
  for (long long i = 0; i < out.numel(); ++i) out[i] *= c;
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, aid = a.id, oid = o.id, c]() {
    const Tensor& dout = g->grad_ref(oid);
    Tensor& da = g->grad_ref(aid);
    for (long long i = 0; i < dout.numel(); ++i) da[i] += c * dout[i];
  });
  return o;
}

Var add_bias(Var x, Var bias) {
  require_same_graph(x, bias);
  Graph* g = x.graph;
  const Tensor& xv = g->value(x);
  const Tensor& bv = g->value(bias);
  require_rank2(xv, "add_bias");
  if (bv.rank() != 1 || bv.dim(0) != xv.cols()) {
    throw ShapeError("add_bias: bias " + bv.shape_str() + " does not match input " +
                     xv.shape_str());
  }
  Tensor out = xv;
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j) out.at(i, j) += bv[j];
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, xid = x.id, bid = bias.id, oid = o.id]() {
    const Tensor& dout = g->grad_ref(oid);
    Tensor& dx = g->grad_ref(xid);
    Tensor& db = g->grad_ref(bid);
    for (int i = 0; i < dout.rows(); ++i)
      for (int j = 0; j < dout.cols(); ++j) {
        dx.at(i, j) += dout.at(i, j);
        db[j] += dout.at(i, j);
      }
  });
  return o;
}

Var relu(Var x) {
  Graph* g = x.graph;
  Tensor out = g->value(x);
  for (long long i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, xid = x.id, oid = o.id]() {
    const Tensor& dout = g->grad_ref(oid);
    const Tensor& xv = g->value(Var{g, xid});
    Tensor& dx = g->grad_ref(xid);
    for (long long i = 0; i < dout.numel(); ++i) {
      if (xv[i] > 0.0) dx[i] += dout[i];
    }
  });
  return o;
}

Var silu(Var x) {
  Graph* g = x.graph;
  Tensor out = g->value(x);
  for (long long i = 0; i < out.numel(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-out[i]));
    out[i] = out[i] * s;
  }
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, xid = x.id, oid = o.id]() {
    const Tensor& dout = g->grad_ref(oid);
    const Tensor& xv = g->value(Var{g, xid});
    Tensor& dx = g->grad_ref(xid);
    for (long long i = 0; i < dout.numel(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      dx[i] += dout[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
  return o;
}

Var sigmoid(Var x) {
  Graph* g = x.graph;
  Tensor out = g->value(x);
  for (long long i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, xid = x.id, oid = o.id]() {
    const Tensor& dout = g->grad_ref(oid);
    const Tensor& ov = g->value(Var{g, oid});
    Tensor& dx = g->grad_ref(xid);
    for (long long i = 0; i < dout.numel(); ++i) dx[i] += dout[i] * ov[i] * (1.0 - ov[i]);
  });
  return o;
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_same_graph(x, gamma);
  require_same_graph(x, beta);
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  Graph* g = x.graph;
  const Tensor& xv = g->value(x);
  const Tensor& gv = g->value(gamma);
  const Tensor& bv = g->value(beta);
  require_rank2(xv, "layer_norm");
  const int cols = xv.cols();
  if (gv.rank() != 1 || gv.dim(0) != cols || bv.rank() != 1 || bv.dim(0) != cols) {
    throw ShapeError("layer_norm: gamma " + gv.shape_str() + " / beta " + bv.shape_str() +
                     " do not match input " + xv.shape_str());
  }
  const int rows = xv.rows();
  Tensor out({rows, cols});
  Tensor norm({rows, cols});  // (x - mean) / sqrt(var + eps), cached for backward
  std::vector<double> inv_std(static_cast<size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    double mean = 0.0;
    for (int j = 0; j < cols; ++j) mean += xv.at(i, j);
    mean /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double d = xv.at(i, j) - mean;
      var += d * d;
    }
    var /= cols;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = inv;
    for (int j = 0; j < cols; ++j) {
      const double y = (xv.at(i, j) - mean) * inv;
      norm.at(i, j) = y;
      out.at(i, j) = gv[j] * y + bv[j];
    }
  }
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, xid = x.id, gid = gamma.id, bid = beta.id, oid = o.id,
                         norm = std::move(norm), inv_std = std::move(inv_std)]() {
    const Tensor& dout = g->grad_ref(oid);
    const Tensor& gv2 = g->value(Var{g, gid});
    Tensor& dx = g->grad_ref(xid);
    Tensor& dg = g->grad_ref(gid);
    Tensor& db = g->grad_ref(bid);
    const int rows = dout.rows(), cols = dout.cols();
    for (int i = 0; i < rows; ++i) {
      double mean_g = 0.0, mean_gy = 0.0;
      for (int j = 0; j < cols; ++j) {
        const double gd = dout.at(i, j) * gv2[j];
        mean_g += gd;
        mean_gy += gd * norm.at(i, j);
        dg[j] += dout.at(i, j) * norm.at(i, j);
        db[j] += dout.at(i, j);
      }
      mean_g /= cols;
      mean_gy /= cols;
      const double inv = inv_std[static_cast<size_t>(i)];
      for (int j = 0; j < cols; ++j) {
        const double gd = dout.at(i, j) * gv2[j];
        dx.at(i, j) += inv * (gd - mean_g - norm.at(i, j) * mean_gy);
      }
    }
  });
  return o;
}

Var row_softmax(Var x, bool causal) {
  Graph* g = x.graph;
  const Tensor& xv = g->value(x);
  require_rank2(xv, "row_softmax");
  if (causal && xv.rows() != xv.cols()) {
    throw ShapeError("row_softmax: causal mask needs a square input, got " + xv.shape_str());
  }
  const int rows = xv.rows(), cols = xv.cols();
  Tensor out({rows, cols});
  for (int i = 0; i < rows; ++i) {
    const int limit = causal ? i + 1 : cols;
    double mx = xv.at(i, 0);
    for (int j = 1; j < limit; ++j) mx = std::max(mx, xv.at(i, j));
    double denom = 0.0;
    for (int j = 0; j < limit; ++j) {
      const double e = std::exp(xv.at(i, j) - mx);
      out.at(i, j) = e;
      denom += e;
    }
    for (int j = 0; j < limit; ++j) out.at(i, j) /= denom;
    for (int j = limit; j < cols; ++j) out.at(i, j) = 0.0;
  }
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, xid = x.id, oid = o.id]() {
    const Tensor& dout = g->grad_ref(oid);
    const Tensor& y = g->value(Var{g, oid});
    Tensor& dx = g->grad_ref(xid);
    const int rows = dout.rows(), cols = dout.cols();
    for (int i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += dout.at(i, j) * y.at(i, j);
      for (int j = 0; j < cols; ++j) dx.at(i, j) += y.at(i, j) * (dout.at(i, j) - dot);
    }
  });
  return o;
}

Var softmax_cross_entropy(Var logits, std::span<const int> targets,
                          std::span<const uint8_t> mask) {
  Graph* g = logits.graph;
  const Tensor& lv = g->value(logits);
  require_rank2(lv, "softmax_cross_entropy");
  const int rows = lv.rows(), vocab = lv.cols();
  if (static_cast<int>(targets.size()) != rows || static_cast<int>(mask.size()) != rows) {
    throw ShapeError("softmax_cross_entropy: logits " + lv.shape_str() + " need " +
                     std::to_string(rows) + " targets and mask entries");
  }
  int active = 0;
  for (int i = 0; i < rows; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    ++active;
    const int t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= vocab) {
      throw DataError("softmax_cross_entropy: target id " + std::to_string(t) +
                      " out of range for vocabulary size " + std::to_string(vocab));
    }
  }
  if (active == 0) {
    throw DataError("softmax_cross_entropy: all positions masked, mean undefined");
  }
  // Cache probabilities of contributing rows for the backward pass.
  Tensor probs({rows, vocab});
  double loss = 0.0;
  for (int i = 0; i < rows; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    double mx = lv.at(i, 0);
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, lv.at(i, j));
    double denom = 0.0;
    for (int j = 0; j < vocab; ++j) {
      const double e = std::exp(lv.at(i, j) - mx);
      probs.at(i, j) = e;
      denom += e;
    }
    for (int j = 0; j < vocab; ++j) probs.at(i, j) /= denom;
    loss += mx + std::log(denom) - lv.at(i, targets[static_cast<size_t>(i)]);
  }
  loss /= active;
  Var o = g->make(Tensor({1}, {loss}), nullptr);
  std::vector<int> tcopy(targets.begin(), targets.end());
  std::vector<uint8_t> mcopy(mask.begin(), mask.end());
  g->set_backprop(o.id, [g, lid = logits.id, oid = o.id, probs = std::move(probs),
                         tcopy = std::move(tcopy), mcopy = std::move(mcopy), active]() {
    const double dl = g->grad_ref(oid)[0];
    Tensor& dx = g->grad_ref(lid);
    const int rows = dx.rows(), vocab = dx.cols();
    for (int i = 0; i < rows; ++i) {
      if (!mcopy[static_cast<size_t>(i)]) continue;
      for (int j = 0; j < vocab; ++j) dx.at(i, j) += dl * probs.at(i, j) / active;
      dx.at(i, tcopy[static_cast<size_t>(i)]) -= dl / active;
    }
  });
  return o;
}

Var mse_loss(Var a, Var b) {
  require_same_graph(a, b);
  Graph* g = a.graph;
  const Tensor& av = g->value(a);
  const Tensor& bv = g->value(b);
  if (!av.same_shape(bv)) {
    throw ShapeError("mse_loss: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  }
  const long long n = av.numel();
  double loss = 0.0;
  for (long long i = 0; i < n; ++i) {
    const double d = av[i] - bv[i];
    loss += d * d;
  }
  loss /= static_cast<double>(n);
  Var o = g->make(Tensor({1}, {loss}), nullptr);
  g->set_backprop(o.id, [g, aid = a.id, bid = b.id, oid = o.id, n]() {
    const double dl = g->grad_ref(oid)[0];
    const Tensor& av2 = g->value(Var{g, aid});
    const Tensor& bv2 = g->value(Var{g, bid});
    Tensor& da = g->grad_ref(aid);
    Tensor& db = g->grad_ref(bid);
    const double c = 2.0 * dl / static_cast<double>(n);
    for (long long i = 0; i < n; ++i) {
      const double d = av2[i] - bv2[i];
      da[i] += c * d;
      db[i] -= c * d;
    }
  });
  return o;
}

Var depthwise_conv1d(Var x, Var kernel) {
  require_same_graph(x, kernel);
  Graph* g = x.graph;
  const Tensor& xv = g->value(x);
  const Tensor& kv = g->value(kernel);
  require_rank2(xv, "depthwise_conv1d");
  require_rank2(kv, "depthwise_conv1d");
  const int w = kv.rows();
  if (w % 2 == 0) {
    throw ConfigError("depthwise_conv1d: kernel width must be odd, got " + std::to_string(w));
  }
  if (kv.cols() != xv.cols()) {
    throw ShapeError("depthwise_conv1d: kernel " + kv.shape_str() + " does not match input " +
                     xv.shape_str());
  }
  const int rows = xv.rows(), cols = xv.cols(), c = w / 2;
  Tensor out({rows, cols});
  for (int t = 0; t < rows; ++t) {
    for (int j = 0; j < w; ++j) {
      const int s = t + j - c;
      if (s < 0 || s >= rows) continue;
      for (int d = 0; d < cols; ++d) out.at(t, d) += xv.at(s, d) * kv.at(j, d);
    }
  }
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, xid = x.id, kid = kernel.id, oid = o.id, w, c]() {
    const Tensor& dout = g->grad_ref(oid);
    const Tensor& xv2 = g->value(Var{g, xid});
    const Tensor& kv2 = g->value(Var{g, kid});
    Tensor& dx = g->grad_ref(xid);
    Tensor& dk = g->grad_ref(kid);
    const int rows = dout.rows(), cols = dout.cols();
    for (int t = 0; t < rows; ++t) {
      for (int j = 0; j < w; ++j) {
        const int s = t + j - c;
        if (s < 0 || s >= rows) continue;
        for (int d = 0; d < cols; ++d) {
          dx.at(s, d) += dout.at(t, d) * kv2.at(j, d);
          dk.at(j, d) += dout.at(t, d) * xv2.at(s, d);
        }
      }
    }
  });
  return o;
}

Var embedding_rows(Var table, std::span<const int> ids) {
  Graph* g = table.graph;
  const Tensor& tv = g->value(table);
  require_rank2(tv, "embedding_rows");
  const int vocab = tv.rows(), dim = tv.cols();
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw DataError("embedding_rows: token id " + std::to_string(id) +
                      " out of range for vocabulary size " + std::to_string(vocab));
    }
  }
  const int n = static_cast<int>(ids.size());
  Tensor out({n, dim});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j) out.at(i, j) = tv.at(ids[static_cast<size_t>(i)], j);
  Var o = g->make(std::move(out), nullptr);
  std::vector<int> idc(ids.begin(), ids.end());
  g->set_backprop(o.id, [g, tid = table.id, oid = o.id, idc = std::move(idc)]() {
    const Tensor& dout = g->grad_ref(oid);
    Tensor& dt = g->grad_ref(tid);
    for (int i = 0; i < dout.rows(); ++i)
      for (int j = 0; j < dout.cols(); ++j) dt.at(idc[static_cast<size_t>(i)], j) += dout.at(i, j);
  });
  return o;
}

Var concat_rows(std::span<const Var> parts) {
  assert(!parts.empty());
  Graph* g = parts[0].graph;
  int rows = 0;
  const int cols = g->value(parts[0]).cols();
  for (const Var& p : parts) {
    const Tensor& pv = g->value(p);
    require_rank2(pv, "concat_rows");
    if (pv.cols() != cols) {
      throw ShapeError("concat_rows: column mismatch " + pv.shape_str());
    }
    rows += pv.rows();
  }
  Tensor out({rows, cols});
  int r = 0;
  std::vector<int> pids;
  std::vector<int> offsets;
  for (const Var& p : parts) {
    const Tensor& pv = g->value(p);
    pids.push_back(p.id);
    offsets.push_back(r);
    for (int i = 0; i < pv.rows(); ++i)
      for (int j = 0; j < cols; ++j) out.at(r + i, j) = pv.at(i, j);
    r += pv.rows();
  }
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, oid = o.id, pids = std::move(pids), offsets = std::move(offsets)]() {
    const Tensor& dout = g->grad_ref(oid);
    for (size_t k = 0; k < pids.size(); ++k) {
      Tensor& dp = g->grad_ref(pids[k]);
      if (dp.empty()) continue;
      const int off = offsets[k];
      for (int i = 0; i < dp.rows(); ++i)
        for (int j = 0; j < dp.cols(); ++j) dp.at(i, j) += dout.at(off + i, j);
    }
  });
  return o;
}

Var concat_cols(std::span<const Var> parts) {
  assert(!parts.empty());
  Graph* g = parts[0].graph;
  int cols = 0;
  const int rows = g->value(parts[0]).rows();
  for (const Var& p : parts) {
    const Tensor& pv = g->value(p);
    require_rank2(pv, "concat_cols");
    if (pv.rows() != rows) {
      throw ShapeError("concat_cols: row mismatch " + pv.shape_str());
    }
    cols += pv.cols();
  }
  Tensor out({rows, cols});
  int c = 0;
  std::vector<int> pids;
  std::vector<int> offsets;
  for (const Var& p : parts) {
    const Tensor& pv = g->value(p);
    pids.push_back(p.id);
    offsets.push_back(c);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < pv.cols(); ++j) out.at(i, c + j) = pv.at(i, j);
    c += pv.cols();
  }
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, oid = o.id, pids = std::move(pids), offsets = std::move(offsets)]() {
    const Tensor& dout = g->grad_ref(oid);
    for (size_t k = 0; k < pids.size(); ++k) {
      Tensor& dp = g->grad_ref(pids[k]);
      if (dp.empty()) continue;
      const int off = offsets[k];
      for (int i = 0; i < dp.rows(); ++i)
        for (int j = 0; j < dp.cols(); ++j) dp.at(i, j) += dout.at(i, off + j);
    }
  });
  return o;
}

Var slice_rows(Var x, int r0, int r1) {
  Graph* g = x.graph;
  const Tensor& xv = g->value(x);
  require_rank2(xv, "slice_rows");
  if (r0 < 0 || r1 > xv.rows() || r0 > r1) {
    throw ShapeError("slice_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                     ") out of bounds for " + xv.shape_str());
  }
  const int cols = xv.cols();
  Tensor out({r1 - r0, cols});
  for (int i = r0; i < r1; ++i)
    for (int j = 0; j < cols; ++j) out.at(i - r0, j) = xv.at(i, j);
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, xid = x.id, oid = o.id, r0]() {
    const Tensor& dout = g->grad_ref(oid);
    Tensor& dx = g->grad_ref(xid);
    for (int i = 0; i < dout.rows(); ++i)
      for (int j = 0; j < dout.cols(); ++j) dx.at(r0 + i, j) += dout.at(i, j);
  });
  return o;
}

Var slice_cols(Var x, int c0, int c1) {
  Graph* g = x.graph;
  const Tensor& xv = g->value(x);
  require_rank2(xv, "slice_cols");
  if (c0 < 0 || c1 > xv.cols() || c0 > c1) {
    throw ShapeError("slice_cols: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                     ") out of bounds for " + xv.shape_str());
  }
  const int rows = xv.rows();
  Tensor out({rows, c1 - c0});
  for (int i = 0; i < rows; ++i)
    for (int j = c0; j < c1; ++j) out.at(i, j - c0) = xv.at(i, j);
  Var o = g->make(std::move(out), nullptr);
  g->set_backprop(o.id, [g, xid = x.id, oid = o.id, c0]() {
    const Tensor& dout = g->grad_ref(oid);
    Tensor& dx = g->grad_ref(xid);
    for (int i = 0; i < dout.rows(); ++i)
      for (int j = 0; j < dout.cols(); ++j) dx.at(i, c0 + j) += dout.at(i, j);
  });
  return o;
}

Var attention_core(Var q, Var k, Var v, int heads, bool causal) {
  Graph* g = q.graph;
  const int dim = g->value(q).cols();
  if (heads <= 0 || dim % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const int hd = dim / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Var> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * hd, (h + 1) * hd);
    Var kh = slice_cols(k, h * hd, (h + 1) * hd);
    Var vh = slice_cols(v, h * hd, (h + 1) * hd);
    Var scores = scale(matmul(qh, transpose(kh)), sc);
    Var probs = row_softmax(scores, causal);
    outs.push_back(matmul(probs, vh));
  }
  return concat_cols(outs);
}

Var self_attention(Var x, Var wq, Var wk, Var wv, Var wo, int heads, bool causal) {
  Var q = matmul(x, wq);
  Var k = matmul(x, wk);
  Var v = matmul(x, wv);
  return matmul(attention_core(q, k, v, heads, causal), wo);
}

Var causal_self_attention(Var x, Var wq, Var wk, Var wv, Var wo, int heads) {
  return self_attention(x, wq, wk, wv, wo, heads, /*causal=*/true);
}

}  // namespace te2sl
