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

#include "gradflow/features.hpp"

#include <cmath>

#include "gradflow/graph.hpp"
#include "gradflow/rng.hpp"

namespace gradflow {

namespace {

void require_image(const Tensor& x) {
  if (x.rank() != 2) {
    throw ShapeError("feature maps expect an (H,W) image, got " +
                     x.shape_str());
  }
}

// Row/column coordinate grids, flattened to match a flattened image.
std::pair<Tensor, Tensor> coordinate_grids(std::size_t h, std::size_t w) {
  Tensor u1({h * w});
  Tensor u2({h * w});
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      u1[i * w + j] = static_cast<double>(i);
      u2[i * w + j] = static_cast<double>(j);
    }
  }
  return {std::move(u1), std::move(u2)};
}

struct MomentVars {
  ad::Var g1, c11, c12, c22;
};

// Builds g1 and the centered covariance entries on the tape:
//   mu = (1/g1) sum_u u I(u),  C = (1/g1) sum_u I(u) (u-mu)(u-mu)^T
MomentVars covariance_graph(ad::Tape& t, ad::Var flat, std::size_t h,
                            std::size_t w, const char* who) {
  auto [u1t, u2t] = coordinate_grids(h, w);
  const ad::Var u1 = t.constant(std::move(u1t));
  const ad::Var u2 = t.constant(std::move(u2t));

  const ad::Var g1 = t.sum(flat);
  if (!(t.value(g1).item() > kMassThreshold)) {
    throw DegenerateMassError(std::string(who) +
                              ": total intensity below mass threshold");
  }
  const ad::Var inv = t.recip(g1);
  const ad::Var mu1 = t.mul(t.dot(flat, u1), inv);
  const ad::Var mu2 = t.mul(t.dot(flat, u2), inv);

  const std::vector<std::size_t> shape{h * w};
  const ad::Var d1 = t.sub(u1, t.broadcast_scalar(mu1, shape));
  const ad::Var d2 = t.sub(u2, t.broadcast_scalar(mu2, shape));

  const ad::Var c11 = t.mul(t.dot(flat, t.mul(d1, d1)), inv);
  const ad::Var c12 = t.mul(t.dot(flat, t.mul(d1, d2)), inv);
  const ad::Var c22 = t.mul(t.dot(flat, t.mul(d2, d2)), inv);
  return {g1, c11, c12, c22};
}

struct EigenVars {
  ad::Var lambda1, lambda2;
};

// Closed-form eigenvalues of the symmetric 2x2 covariance via the
// trace/determinant quadratic; branch-stable because the discriminant root
// is nonnegative by construction.
EigenVars eigen_graph(ad::Tape& t, const MomentVars& m, const char* who) {
  const ad::Var tr = t.add(m.c11, m.c22);
  const ad::Var dif = t.sub(m.c11, m.c22);
  const ad::Var disc =
      t.add(t.mul(dif, dif), t.scale(t.mul(m.c12, m.c12), 4.0));
  const ad::Var root = t.sqrt(disc);
  const double gap = t.value(root).item();
  if (gap < kEigenvalueTieTol) {
    throw NondifferentiablePointError(
        std::string(who) + ": covariance eigenvalues tied within tolerance");
  }
  const ad::Var l1 = t.scale(t.add(tr, root), 0.5);
  const ad::Var l2 = t.scale(t.sub(tr, root), 0.5);
  if (!(t.value(l2).item() > kEigenvalueFloor)) {
    throw EigenvalueFloorError(std::string(who) +
                               ": smallest eigenvalue under the floor");
  }
  return {l1, l2};
}

// Rethrows the in-flight feature error with its row index, preserving the
// error type.
[[noreturn]] void annotate_and_rethrow(std::size_t index,
                                       const std::string& name) {
  const std::string prefix =
      "feature " + std::to_string(index) + " (" + name + "): ";
  try {
    throw;
  } catch (const DegenerateMassError& e) {
    throw DegenerateMassError(prefix + e.what());
  } catch (const NondifferentiablePointError& e) {
    throw NondifferentiablePointError(prefix + e.what());
  } catch (const EigenvalueFloorError& e) {
    throw EigenvalueFloorError(prefix + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(prefix + e.what());
  } catch (const Error& e) {
    throw Error(prefix + e.what());
  }
}

}  // namespace

MomentSummary moment_summary(const Tensor& image) {
  require_image(image);
  const std::size_t h = image.shape()[0], w = image.shape()[1];
  MomentSummary m;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double v = image.at2(i, j);
      m.g1 += v;
      m.mu[0] += v * static_cast<double>(i);
      m.mu[1] += v * static_cast<double>(j);
    }
  }
  if (!(m.g1 > kMassThreshold)) {
    throw DegenerateMassError("moments: total intensity below mass threshold");
  }
  m.mu[0] /= m.g1;
  m.mu[1] /= m.g1;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double v = image.at2(i, j);
      const double d1 = static_cast<double>(i) - m.mu[0];
      const double d2 = static_cast<double>(j) - m.mu[1];
      m.c11 += v * d1 * d1;
      m.c12 += v * d1 * d2;
      m.c22 += v * d2 * d2;
    }
  }
  m.c11 /= m.g1;
  m.c12 /= m.g1;
  m.c22 /= m.g1;
  const double tr = m.c11 + m.c22;
  const double root =
      std::sqrt((m.c11 - m.c22) * (m.c11 - m.c22) + 4.0 * m.c12 * m.c12);
  m.lambda1 = 0.5 * (tr + root);
  m.lambda2 = 0.5 * (tr - root);
  return m;
}

double BrightnessFeature::value(const Tensor& x) const {
  require_image(x);
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return acc;
}

std::pair<double, Gradient> BrightnessFeature::value_and_gradient(
    const Tensor& x) const {
  return {value(x),
          {WrtTarget::kInputPixels, Tensor::full(x.shape(), 1.0)}};
}

double ExtentFeature::value(const Tensor& x) const {
  const MomentSummary m = moment_summary(x);
  return m.c11 + m.c22;
}

std::pair<double, Gradient> ExtentFeature::value_and_gradient(
    const Tensor& x) const {
  require_image(x);
  const std::size_t h = x.shape()[0], w = x.shape()[1];
  ad::Tape t;
  const ad::Var leaf = t.leaf(x);
  const ad::Var flat = t.reshape(leaf, {h * w});
  const MomentVars m = covariance_graph(t, flat, h, w, "extent");
  const ad::Var g2 = t.add(m.c11, m.c22);
  return {t.value(g2).item(),
          {WrtTarget::kInputPixels, t.gradient(g2, leaf)}};
}

double LogAspectRatioFeature::value(const Tensor& x) const {
  const MomentSummary m = moment_summary(x);
  if (m.lambda1 - m.lambda2 < kEigenvalueTieTol) {
    throw NondifferentiablePointError(
        "log_aspect_ratio: covariance eigenvalues tied within tolerance");
  }
  if (!(m.lambda2 > kEigenvalueFloor)) {
    throw EigenvalueFloorError(
        "log_aspect_ratio: smallest eigenvalue under the floor");
  }
  return 0.5 * (std::log(m.lambda1) - std::log(m.lambda2));
}

std::pair<double, Gradient> LogAspectRatioFeature::value_and_gradient(
    const Tensor& x) const {
  require_image(x);
  const std::size_t h = x.shape()[0], w = x.shape()[1];
  ad::Tape t;
  const ad::Var leaf = t.leaf(x);
  const ad::Var flat = t.reshape(leaf, {h * w});
  const MomentVars m = covariance_graph(t, flat, h, w, "log_aspect_ratio");
  const EigenVars e = eigen_graph(t, m, "log_aspect_ratio");
  const ad::Var g3 =
      t.scale(t.sub(t.log(e.lambda1), t.log(e.lambda2)), 0.5);
  return {t.value(g3).item(),
          {WrtTarget::kInputPixels, t.gradient(g3, leaf)}};
}

RandomFeature::RandomFeature(std::uint64_t seed, std::size_t dim)
    : seed_(seed), weights_({dim}) {
  Rng rng(splitmix64(seed ^ 0x72616e64ULL));
  for (double& v : weights_.values()) v = rng.normal();
}

std::string RandomFeature::name() const {
  return "random:" + std::to_string(seed_);
}

double RandomFeature::value(const Tensor& x) const {
  if (x.size() != weights_.size()) {
    throw ShapeError("random feature: pixel count mismatch");
  }
  return dot(x.values(), weights_.values());
}

std::pair<double, Gradient> RandomFeature::value_and_gradient(
    const Tensor& x) const {
  Tensor g = weights_;
  if (x.rank() == 2) g = g.reshaped(x.shape());
  return {value(x), {WrtTarget::kInputPixels, std::move(g)}};
}

std::shared_ptr<const DifferentiableMap> make_feature(
    const std::string& name, std::size_t pixel_count) {
  if (name == "brightness") return std::make_shared<BrightnessFeature>();
  if (name == "extent") return std::make_shared<ExtentFeature>();
  if (name == "log_aspect_ratio") {
    return std::make_shared<LogAspectRatioFeature>();
  }
  if (name.rfind("random:", 0) == 0) {
    const std::string seed_str = name.substr(7);
    try {
      const std::uint64_t seed = std::stoull(seed_str);
      return std::make_shared<RandomFeature>(seed, pixel_count);
    } catch (const std::exception&) {
      throw ConfigError("bad random feature seed '" + seed_str + "'");
    }
  }
  throw ConfigError("unknown feature '" + name + "'");
}

Matrix feature_jacobian(const FeatureSet& features, const Tensor& image) {
  if (features.empty()) {
    throw ConfigError("feature_jacobian: empty feature set");
  }
  Matrix jac(features.size(), image.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    try {
      const auto [value, grad] = features[i]->value_and_gradient(image);
      (void)value;
      if (grad.vector.size() != image.size()) {
        throw ShapeError("feature gradient size mismatch");
      }
      std::copy(grad.vector.values().begin(), grad.vector.values().end(),
                jac.row(i).begin());
    } catch (const Error&) {
      annotate_and_rethrow(i, features[i]->name());
    }
  }
  return jac;
}

}  // namespace gradflow
