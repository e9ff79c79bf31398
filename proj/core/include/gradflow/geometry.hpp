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

#include <string>
#include <vector>

#include "gradflow/map.hpp"
#include "gradflow/model.hpp"
#include "gradflow/tensor.hpp"

namespace gradflow {

/// Fraction of the squared gradient norm lying in the feature-gradient span.
/// `s` is clamped into [0,1]; the raw ratio parallel_sq/total_sq may exceed
/// the bounds by at most 1e-10 (anything worse is an internal error).
struct AlignmentScore {
  double s = 0.0;
  double parallel_sq = 0.0;
  double total_sq = 0.0;
};

/// Squared cosine between the two gradients; polarity-invariant.
AlignmentScore pointwise_alignment_single(const Tensor& grad_f,
                                          const Tensor& grad_g);

struct ProjectionResult {
  Tensor parallel;       // in the row span of the Jacobian
  Tensor perpendicular;  // orthogonal to every row
};

/// Decomposes grad_f into components parallel and perpendicular to the row
/// span of `jac` through a rank-tolerant pseudo-inverse of jac * jac^T
/// (eigenvalues below 1e-10 times the largest are treated as zero, so
/// dependent feature gradients are harmless).
ProjectionResult project_gradient(const Tensor& grad_f, const Matrix& jac);

/// Multi-feature alignment: |grad_f_par|^2 / |grad_f|^2.
AlignmentScore pointwise_alignment_multi(const Tensor& grad_f,
                                         const Matrix& jac);

struct FlowConfig {
  // Euler step in flow time; <= 0 selects 0.5 / |grad(x0)| so the first
  // step has length 0.5.
  double step_size = 0.0;
  std::size_t max_steps = 1000;
  double vanish_tol = 1e-12;     // stop when |grad| falls below this
  double boundary_level = 0.0;   // 0 for the logit head, 0.5 for probability
};

enum class FlowTermination { kBoundaryCrossed, kMaxSteps, kVanishingGradient };
std::string termination_name(FlowTermination t);

/// Discretized gradient-flow trajectory toward the decision boundary.
/// points[k+1] == points[k] + step_size * direction_sign * gradients[k],
/// exactly as computed, so paths replay bit-identically. The final stored
/// point has no recorded gradient.
struct FlowPath {
  std::vector<Tensor> points;        // steps_taken + 1 entries
  std::vector<Tensor> gradients;     // steps_taken entries (left endpoints)
  std::vector<double> values;        // head value at every point
  std::vector<double> grad_sqnorms;  // steps_taken entries
  double step_size = 0.0;
  double direction_sign = 0.0;   // -sign(value(x0) - boundary_level)
  std::size_t steps_taken = 0;
  FlowTermination termination = FlowTermination::kMaxSteps;
  // Integration width of the final interval; after a boundary crossing one
  // bisection probe narrows it to 1/4 or 3/4 of a step.
  double last_dt = 0.0;
};

/// The Euler update used by trace_gradient_flow, exposed so stored paths can
/// be replayed bit-exactly through the same compiled code.
Tensor flow_step(const Tensor& point, const Tensor& gradient,
                 double step_size, double direction_sign);

/// Explicit Euler along -sign(f(x0) - level) * grad f, stopping at the first
/// boundary crossing, at max_steps, or when the gradient vanishes.
/// A vanishing gradient at the start is a CriticalPointError.
FlowPath trace_gradient_flow(const DifferentiableMap& field,
                             const Tensor& start, const FlowConfig& cfg = {});

struct FlowAlignment {
  double f = 0.0;  // in [0,1]
  double parallel_integral = 0.0;
  double total_integral = 0.0;
};

/// Left-endpoint Riemann sums of |grad_par|^2 and |grad|^2 along the path,
/// with the same discretization in numerator and denominator.
FlowAlignment flow_alignment(const FlowPath& path, const FeatureSet& features);

/// Rank diagnostics of the K x d Jacobian of the probability head
/// (p, 1-p); rows sum to zero, so the maximal rank is K - 1 = 1.
struct RankReport {
  std::vector<double> singular_values;  // descending
  std::size_t numerical_rank = 0;       // count > tol * largest
  bool is_regular = false;              // rank == K - 1
};

RankReport rank_report(const ClassifierParams& params, const Tensor& image,
                       double tol = 1e-8);

}  // namespace gradflow
