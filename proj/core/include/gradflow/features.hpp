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

#include <array>
#include <cstdint>

#include "gradflow/map.hpp"
#include "gradflow/tensor.hpp"

namespace gradflow {

// Moment singularity guards. The mass threshold protects the 1/g1 division;
// the eigenvalue floor and tie tolerance mark where log(sigma1) - log(sigma2)
// stops being differentiable.
inline constexpr double kMassThreshold = 1e-12;
inline constexpr double kEigenvalueFloor = 1e-9;
inline constexpr double kEigenvalueTieTol = 1e-9;

/// Intensity moments of an image over pixel-grid coordinates u = (row, col).
struct MomentSummary {
  double g1 = 0.0;                     // total intensity
  std::array<double, 2> mu{0.0, 0.0};  // intensity centroid, pixel units
  double c11 = 0.0, c12 = 0.0, c22 = 0.0;  // covariance, pixel^2
  double lambda1 = 0.0, lambda2 = 0.0;     // eigenvalues, lambda1 >= lambda2
};

/// Two-pass centered moments. Throws DegenerateMassError below the mass
/// threshold. Eigenvalues come from the closed-form 2x2 quadratic.
MomentSummary moment_summary(const Tensor& image);

/// g1: sum of pixel intensities. Gradient is the all-ones vector.
class BrightnessFeature : public DifferentiableMap {
 public:
  std::string name() const override { return "brightness"; }
  double value(const Tensor& x) const override;
  std::pair<double, Gradient> value_and_gradient(
      const Tensor& x) const override;
};

/// g2: trace of the intensity-weighted covariance.
class ExtentFeature : public DifferentiableMap {
 public:
  std::string name() const override { return "extent"; }
  double value(const Tensor& x) const override;
  std::pair<double, Gradient> value_and_gradient(
      const Tensor& x) const override;
};

/// g3: log(sigma1) - log(sigma2) over the covariance eigenvalues.
class LogAspectRatioFeature : public DifferentiableMap {
 public:
  std::string name() const override { return "log_aspect_ratio"; }
  double value(const Tensor& x) const override;
  std::pair<double, Gradient> value_and_gradient(
      const Tensor& x) const override;
};

/// Fixed random linear functional w . x with w drawn once from a standard
/// normal; the gradient is the stored weight vector.
class RandomFeature : public DifferentiableMap {
 public:
  RandomFeature(std::uint64_t seed, std::size_t dim);
  std::string name() const override;
  double value(const Tensor& x) const override;
  std::pair<double, Gradient> value_and_gradient(
      const Tensor& x) const override;
  std::uint64_t seed() const { return seed_; }
  const Tensor& weights() const { return weights_; }

 private:
  std::uint64_t seed_;
  Tensor weights_;
};

/// Registry: "brightness" | "extent" | "log_aspect_ratio" | "random:<seed>".
/// `pixel_count` sizes random features.
std::shared_ptr<const DifferentiableMap> make_feature(const std::string& name,
                                                      std::size_t pixel_count);

/// Stacked feature gradients: row i of the result is the gradient of
/// features[i]. Feature errors propagate annotated with the row index.
Matrix feature_jacobian(const FeatureSet& features, const Tensor& image);

}  // namespace gradflow
