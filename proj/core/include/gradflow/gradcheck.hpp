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

#include "gradflow/map.hpp"
#include "gradflow/tensor.hpp"

namespace gradflow {

struct GradCheckConfig {
  double step = 1e-5;
  // Above this dimension only a sampled coordinate subset is checked.
  std::size_t exhaustive_limit = 1024;
  std::size_t sample_size = 256;
  std::uint64_t seed = 0x67726164;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  std::size_t coords_checked = 0;
  std::size_t nan_failures = 0;  // coordinates where a difference was NaN

  bool passed(double tol) const {
    return nan_failures == 0 && max_rel_error < tol;
  }
};

/// Central finite differences on every coordinate (or a seeded subset above
/// `exhaustive_limit`) against the map's reverse-mode gradient. The relative
/// error is guarded: |fd - ad| / max(|ad|, |fd|, 1e-3 * max_j|ad_j|, 1e-12).
GradCheckResult finite_difference_check(const DifferentiableMap& map,
                                        const Tensor& x,
                                        const GradCheckConfig& cfg = {});

}  // namespace gradflow
