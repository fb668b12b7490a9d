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

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "te2sl/tensor.hpp"

namespace te2sl {

struct Parameter;
class Graph;

// Handle to a node in a Graph. Valid for the lifetime of the graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Tensor& value() const;
};

// A single-use reverse-mode tape. Build a fresh graph per forward pass; one
// graph is confined to one thread. Nodes are appended in topological order,
// so the reverse sweep is a simple backwards walk.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Constant input; receives no gradient of its own but still propagates
  // gradient to nothing (it is a leaf).
  Var leaf(Tensor value);

  // Leaf bound to a parameter. Calling twice with the same parameter returns
  // the same node, so tied weights accumulate one gradient.
  Var param(Parameter& p);

  // Reverse sweep from a scalar loss, seeding d(loss)/d(loss) = seed.
  // Gradients of bound trainable parameters are added into Parameter::grad;
  // frozen parameters accumulate nothing. Throws NumericError if the loss
  // value is not finite. May be called once per graph.
  void backward(Var loss, double seed = 1.0);

  const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  const Tensor& grad(Var v) const;

  int size() const { return static_cast<int>(nodes_.size()); }

  // Internal: used by the op constructors below.
  Var make(Tensor value, std::function<void()> backprop);
  Tensor& grad_ref(int id);
  bool grad_live(int id) const { return !nodes_[static_cast<size_t>(id)].grad.empty(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily during backward
    std::function<void()> backprop;
    Parameter* bound = nullptr;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  bool swept_ = false;
};

// ---- differentiable operations -------------------------------------------

// C[i][j] = sum_p A[i][p] * B[p][j]. Inner dimensions must agree.
Var matmul(Var a, Var b);
Var transpose(Var a);

Var add(Var a, Var b);           // same shape
Var sub(Var a, Var b);
Var mul(Var a, Var b);           // elementwise
Var scale(Var a, double c);
Var add_bias(Var x, Var bias);   // bias broadcast over rows of a 2-D input

Var relu(Var x);
Var silu(Var x);
Var sigmoid(Var x);

// Row-wise normalization with population variance; eps sits inside the sqrt.
Var layer_norm(Var x, Var gamma, Var beta, double eps);

// Row-wise softmax. With causal=true (square input), entries above the
// diagonal are excluded and get probability zero.
Var row_softmax(Var x, bool causal);

// Mean over unmasked positions of -log softmax(logits[t])[targets[t]].
// mask[t] != 0 marks contributing rows. Gradients flow only through
// unmasked rows.
Var softmax_cross_entropy(Var logits, std::span<const int> targets,
                          std::span<const uint8_t> mask);

// Mean over all elements of (a - b)^2.
Var mse_loss(Var a, Var b);

// Per-channel 1-D convolution, zero padding, length-preserving.
// kernel is [w x D] with odd w; x is [T x D].
Var depthwise_conv1d(Var x, Var kernel);

// Row gather: out[i] = table[ids[i]]. Gradient scatter-adds into the table.
Var embedding_rows(Var table, std::span<const int> ids);

Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var x, int r0, int r1);
Var slice_cols(Var x, int c0, int c1);

// Multi-head scaled dot-product attention over pre-projected q/k/v,
// returning the concatenated head outputs (no output projection).
Var attention_core(Var q, Var k, Var v, int heads, bool causal);

// Full attention sublayer: project, attend, project back.
Var self_attention(Var x, Var wq, Var wk, Var wv, Var wo, int heads, bool causal);
Var causal_self_attention(Var x, Var wq, Var wk, Var wv, Var wo, int heads);

}  // namespace te2sl
