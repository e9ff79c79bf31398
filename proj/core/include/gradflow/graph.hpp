// Copyright 2026 The gradflow Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gradflow/tensor.hpp"

namespace gradflow::ad {

// Recorded primitives. Every rule needed to differentiate a primitive is
// expressible with primitives from this same set, so a backward sweep can be
// recorded on the tape and differentiated again (used by the alignment-reward
// training loss, which needs gradients of input gradients).
enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,             // elementwise
  kScale,           // a * scalar constant
  kShift,           // a + scalar constant
  kExp,
  kLog,
  kSqrt,
  kRecip,
  kSum,             // all elements -> shape {1}
  kDot,             // -> shape {1}
  kScaleBy,         // tensor * scalar node
  kBroadcastScalar, // scalar node -> given shape
  kMatMul,          // (n,k)x(k,m)
  kTranspose,       // 2-d
  kReshape,
  kConv2d,          // x:(Ci,H,W), k:(Co,Ci,kh,kw), zero-padded "same"
  kConv2dInputAdj,  // adjoint of kConv2d w.r.t. its input
  kConv2dKernelAdj, // adjoint of kConv2d w.r.t. its kernel
  kAvgPool2,        // non-overlapping 2x2 mean
  kAvgPool2Adj,     // adjoint of kAvgPool2
  kSelectPositive,  // cond > 0 ? a : b; no gradient flows into cond
  kChannelSum,      // (C,H,W) -> (C)
  kChannelBroadcast // (C) -> (C,H,W)
};

/// Handle to a node on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

/// Append-only record of primitive operations with eager evaluation.
/// Node inputs always reference strictly earlier nodes, so one reverse
/// index sweep visits each node exactly once.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var leaf(Tensor value);
  Var constant(Tensor value);
  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var shift(Var a, double c);
  Var exp(Var a);
  Var log(Var a);
  Var sqrt(Var a);
  Var recip(Var a);
  Var sum(Var a);
  Var dot(Var a, Var b);
  Var scale_by(Var a, Var scalar);
  Var broadcast_scalar(Var scalar, std::vector<std::size_t> shape);
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var reshape(Var a, std::vector<std::size_t> shape);
  Var conv2d(Var x, Var kernel);
  Var conv2d_input_adj(Var y, Var kernel);
  Var conv2d_kernel_adj(Var x, Var y, std::size_t kh, std::size_t kw);
  Var avg_pool2(Var x);
  Var avg_pool2_adj(Var y);
  Var select_positive(Var cond, Var a, Var b);
  Var channel_sum(Var x);
  Var channel_broadcast(Var b, std::size_t h, std::size_t w);

  const Tensor& value(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Reverse-mode sweep. `root` must be a single-element tensor. Returns the
  /// adjoint of each requested node (zeros when the root does not depend on
  /// it). One pass serves any number of targets.
  std::vector<Tensor> gradients(Var root, std::span<const Var> wrts);
  Tensor gradient(Var root, Var wrt);

  /// Same sweep, but the adjoint computation is recorded as new tape nodes,
  /// so the returned gradient can itself be differentiated by a later
  /// gradients() call.
  Var gradient_graph(Var root, Var wrt);

 private:
  struct Node {
    OpKind kind;
    std::int32_t a0 = -1;
    std::int32_t a1 = -1;
    std::int32_t a2 = -1;
    double scalar = 0.0;
    std::int32_t aux0 = 0;
    std::int32_t aux1 = 0;
    Tensor value;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  void check(Var v) const;

  // useful[i]: node i's value depends on one of the targets through a
  // differentiable path.
  std::vector<char> dependency_mask(std::span<const Var> targets,
                                    std::int32_t up_to) const;

  std::vector<Node> nodes_;
};

// Compositions over the primitive set.
Var neg(Tape& t, Var a);
Var abs_val(Tape& t, Var a);
Var elu(Tape& t, Var a);       // alpha = 1
Var softplus(Tape& t, Var a);  // overflow-safe
Var sigmoid(Tape& t, Var a);   // exp(-softplus(-a)), safe at extreme logits
Var sqnorm(Tape& t, Var a);
Var cosine_sq(Tape& t, Var u, Var w);
Var bce_with_logit(Tape& t, Var logit, double label);

}  // namespace gradflow::ad
