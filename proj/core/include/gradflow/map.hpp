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

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gradflow/tensor.hpp"

namespace gradflow {

enum class WrtTarget { kInputPixels, kParameters };

/// An exact reverse-mode gradient with respect to a named target.
struct Gradient {
  WrtTarget wrt = WrtTarget::kInputPixels;
  Tensor vector;  // same shape as the differentiation target
};

/// Contract for a scalar-valued map of an image with an exact gradient.
/// Classifier heads and every interpretable feature satisfy it.
class DifferentiableMap {
 public:
  virtual ~DifferentiableMap() = default;
  virtual std::string name() const = 0;
  virtual double value(const Tensor& x) const = 0;
  virtual std::pair<double, Gradient> value_and_gradient(
      const Tensor& x) const = 0;
};

/// Ordered collection of feature maps; its stacked gradients form the
/// Jacobian Dg (m x d).
using FeatureSet = std::vector<std::shared_ptr<const DifferentiableMap>>;

}  // namespace gradflow
