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

#include "gradflow/geometry.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "gradflow/features.hpp"
#include "gradflow/graph.hpp"

namespace gradflow {

namespace {

constexpr double kPinvRelTol = 1e-10;   // on eigenvalues of jac * jac^T
constexpr double kScoreSlack = 1e-10;   // allowed numeric overshoot of [0,1]

double clamp_score(double raw, const char* who) {
  if (raw < -kScoreSlack || raw > 1.0 + kScoreSlack) {
    throw Error(std::string(who) + ": alignment ratio " +
                std::to_string(raw) + " outside [0,1] beyond slack");
  }
  return std::clamp(raw, 0.0, 1.0);
}

}  // namespace

AlignmentScore pointwise_alignment_single(const Tensor& grad_f,
                                          const Tensor& grad_g) {
  if (grad_f.size() != grad_g.size()) {
    throw ShapeError("alignment: gradient size mismatch");
  }
  const double total_sq = squared_norm(grad_f.values());
  const double g_sq = squared_norm(grad_g.values());
  if (total_sq == 0.0) {
    throw CriticalPointError("pointwise alignment: grad_f vanished");
  }
  if (g_sq == 0.0) {
    throw CriticalPointError("pointwise alignment: grad_g vanished");
  }
  const double d = dot(grad_f.values(), grad_g.values());
  const double parallel_sq = d * d / g_sq;
  const double raw = parallel_sq / total_sq;
  return {clamp_score(raw, "pointwise_alignment_single"), parallel_sq,
          total_sq};
}

ProjectionResult project_gradient(const Tensor& grad_f, const Matrix& jac) {
  const std::size_t m = jac.rows, d = jac.cols;
  if (grad_f.size() != d) {
    throw ShapeError("project_gradient: dimension mismatch");
  }
  bool any_nonzero_row = false;
  for (std::size_t i = 0; i < m && !any_nonzero_row; ++i) {
    any_nonzero_row = squared_norm(jac.row(i)) > 0.0;
  }
  if (!any_nonzero_row) {
    throw DegenerateFeatureError(
        "project_gradient: every feature gradient row is zero");
  }

  // Gram matrix G = Dg Dg^T and right-hand side b = Dg grad_f.
  Eigen::MatrixXd gram(m, m);
  Eigen::VectorXd rhs(m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i; j < m; ++j) {
      const double v = dot(jac.row(i), jac.row(j));
      gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
      gram(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = v;
    }
    rhs(static_cast<Eigen::Index>(i)) = dot(jac.row(i), grad_f.values());
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  const Eigen::VectorXd& lambda = eig.eigenvalues();
  const double lambda_max = lambda(lambda.size() - 1);
  Eigen::VectorXd y = eig.eigenvectors().transpose() * rhs;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    y(i) = lambda(i) > kPinvRelTol * lambda_max ? y(i) / lambda(i) : 0.0;
  }
  const Eigen::VectorXd coef = eig.eigenvectors() * y;

  ProjectionResult out;
  out.parallel = Tensor::zeros(grad_f.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double c = coef(static_cast<Eigen::Index>(i));
    const auto row = jac.row(i);
    for (std::size_t j = 0; j < d; ++j) out.parallel[j] += c * row[j];
  }
  out.perpendicular = grad_f;
  for (std::size_t j = 0; j < d; ++j) {
    out.perpendicular[j] -= out.parallel[j];
  }
  return out;
}

AlignmentScore pointwise_alignment_multi(const Tensor& grad_f,
                                         const Matrix& jac) {
  const double total_sq = squared_norm(grad_f.values());
  if (total_sq == 0.0) {
    throw CriticalPointError("pointwise alignment: grad_f vanished");
  }
  const ProjectionResult proj = project_gradient(grad_f, jac);
  const double parallel_sq = squared_norm(proj.parallel.values());
  const double raw = parallel_sq / total_sq;
  return {clamp_score(raw, "pointwise_alignment_multi"), parallel_sq,
          total_sq};
}

std::string termination_name(FlowTermination t) {
  switch (t) {
    case FlowTermination::kBoundaryCrossed:
      return "boundary-crossed";
    case FlowTermination::kMaxSteps:
      return "max-steps";
    case FlowTermination::kVanishingGradient:
      return "vanishing-gradient";
  }
  return "unknown";
}

Tensor flow_step(const Tensor& point, const Tensor& gradient,
                 double step_size, double direction_sign) {
  Tensor next = point;
  const double step = step_size * direction_sign;
  for (std::size_t j = 0; j < next.size(); ++j) {
    next[j] += step * gradient[j];
  }
  return next;
}

FlowPath trace_gradient_flow(const DifferentiableMap& field,
                             const Tensor& start, const FlowConfig& cfg) {
  if (cfg.max_steps == 0) throw ConfigError("flow: max_steps must be > 0");
  if (cfg.step_size < 0.0) throw ConfigError("flow: step_size must be > 0");

  auto [v0, g0] = field.value_and_gradient(start);
  const double n0 = std::sqrt(squared_norm(g0.vector.values()));
  if (n0 < cfg.vanish_tol) {
    throw CriticalPointError("flow: vanishing gradient at the start point");
  }

  FlowPath path;
  path.step_size = cfg.step_size > 0.0 ? cfg.step_size : 0.5 / n0;
  const double offset0 = v0 - cfg.boundary_level;
  path.direction_sign = offset0 > 0.0 ? -1.0 : 1.0;
  path.points.push_back(start);
  path.values.push_back(v0);

  if (offset0 == 0.0) {
    path.termination = FlowTermination::kBoundaryCrossed;
    path.last_dt = 0.0;
    return path;
  }

  Tensor x = start;
  Tensor g = std::move(g0.vector);
  const double eta = path.step_size;
  const double dir = path.direction_sign;
  path.termination = FlowTermination::kMaxSteps;
  path.last_dt = eta;

  for (std::size_t k = 0; k < cfg.max_steps; ++k) {
    Tensor next = flow_step(x, g, eta, dir);
    auto [v_next, g_next] = field.value_and_gradient(next);

    path.gradients.push_back(g);
    path.grad_sqnorms.push_back(squared_norm(g.values()));
    path.points.push_back(next);
    path.values.push_back(v_next);
    path.steps_taken = k + 1;

    const double offset_next = v_next - cfg.boundary_level;
    if (offset0 * offset_next <= 0.0) {
      path.termination = FlowTermination::kBoundaryCrossed;
      // One bisection probe: does the crossing sit in the first or second
      // half of the final step?
      const Tensor mid = flow_step(x, g, 0.5 * eta, dir);
      const double v_mid = field.value(mid);
      const bool first_half = offset0 * (v_mid - cfg.boundary_level) <= 0.0;
      path.last_dt = first_half ? 0.25 * eta : 0.75 * eta;
      return path;
    }

    const double n_next = std::sqrt(squared_norm(g_next.vector.values()));
    if (n_next < cfg.vanish_tol) {
      path.termination = FlowTermination::kVanishingGradient;
      return path;
    }
    x = std::move(next);
    g = std::move(g_next.vector);
  }
  return path;
}

FlowAlignment flow_alignment(const FlowPath& path, const FeatureSet& features) {
  if (path.steps_taken == 0) {
    throw Error("flow_alignment: path has no integration steps");
  }
  FlowAlignment out;
  for (std::size_t k = 0; k < path.steps_taken; ++k) {
    const double dt =
        k + 1 == path.steps_taken ? path.last_dt : path.step_size;
    if (dt == 0.0) continue;
    const Matrix jac = feature_jacobian(features, path.points[k]);
    const AlignmentScore score =
        pointwise_alignment_multi(path.gradients[k], jac);
    out.parallel_integral += score.parallel_sq * dt;
    out.total_integral += score.total_sq * dt;
  }
  if (!(out.total_integral > 0.0)) {
    throw Error("flow_alignment: total integrand is not positive");
  }
  out.f = clamp_score(out.parallel_integral / out.total_integral,
                      "flow_alignment");
  return out;
}

RankReport rank_report(const ClassifierParams& params, const Tensor& image,
                       double tol) {
  ad::Tape t;
  const auto pv = register_params(t, params);
  const ad::Var x = t.leaf(image);
  const ad::Var logit = logit_graph(t, params.arch, pv, x);
  const ad::Var p = ad::sigmoid(t, logit);
  const ad::Var q = t.shift(t.scale(p, -1.0), 1.0);  // 1 - p

  const Tensor grad_p = t.gradient(p, x);
  const Tensor grad_q = t.gradient(q, x);

  // Singular values of the 2 x d Jacobian via its 2 x 2 Gram matrix.
  Eigen::Matrix2d gram;
  gram(0, 0) = squared_norm(grad_p.values());
  gram(0, 1) = dot(grad_p.values(), grad_q.values());
  gram(1, 0) = gram(0, 1);
  gram(1, 1) = squared_norm(grad_q.values());
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(gram);

  RankReport report;
  for (int i = 1; i >= 0; --i) {
    report.singular_values.push_back(
        std::sqrt(std::max(0.0, eig.eigenvalues()(i))));
  }
  const double largest = report.singular_values.front();
  for (double s : report.singular_values) {
    if (s > tol * largest) ++report.numerical_rank;
  }
  report.is_regular = report.numerical_rank == 1;
  return report;
}

}  // namespace gradflow
