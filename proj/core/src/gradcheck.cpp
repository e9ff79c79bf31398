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

#include "gradflow/gradcheck.hpp"

#include <cmath>
#include <numeric>

#include "gradflow/rng.hpp"

namespace gradflow {

GradCheckResult finite_difference_check(const DifferentiableMap& map,
                                        const Tensor& x,
                                        const GradCheckConfig& cfg) {
  if (!(cfg.step > 0.0)) throw ConfigError("finite differences need step > 0");

  const auto [value, grad] = map.value_and_gradient(x);
  (void)value;
  const Tensor& analytic = grad.vector;
  const std::size_t d = x.size();

  double grad_scale = 0.0;
  for (double v : analytic.values()) {
    grad_scale = std::max(grad_scale, std::abs(v));
  }

  std::vector<std::size_t> coords(d);
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (d > cfg.exhaustive_limit) {
    Rng rng(cfg.seed);
    const std::size_t take = std::min(cfg.sample_size, d);
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + rng.index(d - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(take);
  }

  GradCheckResult result;
  result.coords_checked = coords.size();
  Tensor probe = x;
  for (std::size_t i : coords) {
    const double saved = probe[i];
    probe[i] = saved + cfg.step;
    const double fp = map.value(probe);
    probe[i] = saved - cfg.step;
    const double fm = map.value(probe);
    probe[i] = saved;

    const double fd = (fp - fm) / (2.0 * cfg.step);
    const double ad = analytic[i];
    if (!std::isfinite(fd) || !std::isfinite(ad)) {
      ++result.nan_failures;
      result.max_rel_error = std::numeric_limits<double>::infinity();
      result.worst_coordinate = i;
      continue;
    }
    const double denom = std::max({std::abs(ad), std::abs(fd),
                                   1e-3 * grad_scale, 1e-12});
    const double rel = std::abs(fd - ad) / denom;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_coordinate = i;
    }
  }
  return result;
}

}  // namespace gradflow
