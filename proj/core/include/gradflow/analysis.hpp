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
#include <string>
#include <vector>

#include "gradflow/errors.hpp"

namespace gradflow {

struct KSResult {
  double d = 0.0;        // sup |ECDF1 - ECDF2| over the pooled sample
  double p_value = 1.0;  // two-sided asymptotic
  std::size_t n1 = 0;
  std::size_t n2 = 0;
};

/// Exact D by a sorted merge (ties handled by advancing both counters),
/// p-value from the asymptotic Kolmogorov distribution at
/// sqrt(n1*n2/(n1+n2)) * D.
KSResult ks_two_sample(std::span<const double> a, std::span<const double> b);

/// Two-sided asymptotic Kolmogorov survival function Q(t) = 2 sum_j
/// (-1)^(j-1) exp(-2 j^2 t^2), evaluated through its theta-function dual for
/// small t.
double kolmogorov_q(double t);

/// Mean of per-class recalls; labels must contain both classes.
double balanced_accuracy(std::span<const std::uint8_t> predictions,
                         std::span<const std::uint8_t> labels);

/// Per-sample scores for one model, keyed by feature tag in table order.
struct ScoreSamples {
  std::vector<std::string> tags;
  std::vector<std::vector<double>> values;

  void add(std::string tag, std::vector<double> vals);
  const std::vector<double>* find(const std::string& tag) const;
};

/// One row of the comparison table: per-feature mean for the plain and
/// (optionally) enhanced model plus the plain-vs-enhanced KS p-value.
struct SummaryRow {
  std::string feature;
  double mean_plain = 0.0;
  std::size_t n_plain = 0;
  bool has_enhanced = false;
  double mean_enhanced = 0.0;
  std::size_t n_enhanced = 0;
  bool has_p = false;
  double p_value = 1.0;
  bool small_sample = false;  // a group has fewer than 20 samples
};

/// Builds the table in the plain model's tag order. When `enhanced` is given
/// its tags must cover the plain tags (mismatches are errors).
std::vector<SummaryRow> summarize(const ScoreSamples& plain,
                                  const ScoreSamples* enhanced);

/// CSV with the columns: feature,mean_plain,mean_enhanced,p_value.
std::string render_csv(const std::vector<SummaryRow>& rows);

/// Aligned plain-text table, scientific notation with two significant
/// digits; appends a caution note when any group is small.
std::string render_text(const std::vector<SummaryRow>& rows);

}  // namespace gradflow
