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

#include "gradflow/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

namespace gradflow {

KSResult ks_two_sample(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) {
    throw Error("ks_two_sample: both samples must be nonempty");
  }
  std::vector<double> sa(a.begin(), a.end());
  std::vector<double> sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());

  const double n1 = static_cast<double>(sa.size());
  const double n2 = static_cast<double>(sb.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < sa.size() && j < sb.size()) {
    const double x = std::min(sa[i], sb[j]);
    while (i < sa.size() && sa[i] == x) ++i;
    while (j < sb.size() && sb[j] == x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / n1 -
                             static_cast<double>(j) / n2));
  }
  // Once one sample is exhausted the gap can only shrink toward |1 - F|,
  // which is already covered by the last pooled point.
  const double n_eff = n1 * n2 / (n1 + n2);
  KSResult out;
  out.d = d;
  out.p_value = kolmogorov_q(std::sqrt(n_eff) * d);
  out.n1 = sa.size();
  out.n2 = sb.size();
  return out;
}

double kolmogorov_q(double t) {
  if (!(t > 0.0)) return 1.0;
  if (t < 1.18) {
    // Jacobi theta dual, accurate where the alternating series is slow:
    // P(K <= t) = sqrt(2 pi)/t * sum_{j>=1} exp(-(2j-1)^2 pi^2 / (8 t^2)).
    const double f = std::numbers::pi * std::numbers::pi / (8.0 * t * t);
    double cdf = 0.0;
    for (int j = 1; j <= 20; ++j) {
      const double term = std::exp(-(2.0 * j - 1.0) * (2.0 * j - 1.0) * f);
      cdf += term;
      if (term < 1e-300) break;
    }
    cdf *= std::sqrt(2.0 * std::numbers::pi) / t;
    return std::clamp(1.0 - cdf, 0.0, 1.0);
  }
  double q = 0.0;
  double sign = 1.0;
  for (int j = 1; j <= 200; ++j) {
    const double term = std::exp(-2.0 * j * j * t * t);
    q += sign * term;
    sign = -sign;
    if (term < 1e-300) break;
  }
  return std::clamp(2.0 * q, 0.0, 1.0);
}

double balanced_accuracy(std::span<const std::uint8_t> predictions,
                         std::span<const std::uint8_t> labels) {
  if (predictions.size() != labels.size()) {
    throw ShapeError("balanced_accuracy: size mismatch");
  }
  std::size_t hit[2] = {0, 0};
  std::size_t count[2] = {0, 0};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int c = labels[i] != 0;
    ++count[c];
    hit[c] += (predictions[i] != 0) == (c == 1);
  }
  if (count[0] == 0 || count[1] == 0) {
    throw SingleClassError("balanced_accuracy: labels contain one class only");
  }
  const double recall0 = static_cast<double>(hit[0]) / count[0];
  const double recall1 = static_cast<double>(hit[1]) / count[1];
  return 0.5 * (recall0 + recall1);
}

void ScoreSamples::add(std::string tag, std::vector<double> vals) {
  tags.push_back(std::move(tag));
  values.push_back(std::move(vals));
}

const std::vector<double>* ScoreSamples::find(const std::string& tag) const {
  for (std::size_t i = 0; i < tags.size(); ++i) {
    if (tags[i] == tag) return &values[i];
  }
  return nullptr;
}

std::vector<SummaryRow> summarize(const ScoreSamples& plain,
                                  const ScoreSamples* enhanced) {
  auto mean_of = [](const std::vector<double>& v) {
    if (v.empty()) throw Error("summarize: empty score sample");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };

  std::vector<SummaryRow> rows;
  for (std::size_t i = 0; i < plain.tags.size(); ++i) {
    SummaryRow row;
    row.feature = plain.tags[i];
    row.mean_plain = mean_of(plain.values[i]);
    row.n_plain = plain.values[i].size();
    row.small_sample = row.n_plain < 20;
    if (enhanced != nullptr) {
      const std::vector<double>* ev = enhanced->find(plain.tags[i]);
      if (ev == nullptr) {
        throw ConfigError("summarize: enhanced scores missing feature '" +
                          plain.tags[i] + "'");
      }
      row.has_enhanced = true;
      row.mean_enhanced = mean_of(*ev);
      row.n_enhanced = ev->size();
      row.small_sample = row.small_sample || row.n_enhanced < 20;
      const KSResult ks = ks_two_sample(plain.values[i], *ev);
      row.has_p = true;
      row.p_value = ks.p_value;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {
std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1e", v);
  return buf;
}
}  // namespace

std::string render_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  os << "feature,mean_plain,mean_enhanced,p_value\n";
  for (const SummaryRow& r : rows) {
    os << r.feature << ',' << sci(r.mean_plain) << ',';
    if (r.has_enhanced) os << sci(r.mean_enhanced);
    os << ',';
    if (r.has_p) os << sci(r.p_value);
    os << '\n';
  }
  return os.str();
}

std::string render_text(const std::vector<SummaryRow>& rows) {
  std::size_t width = 16;
  for (const SummaryRow& r : rows) {
    width = std::max(width, r.feature.size() + 2);
  }
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof(line), "%-*s %12s %12s %12s\n",
                static_cast<int>(width), "feature", "mean-plain",
                "mean-enhanced", "p-value");
  os << line;
  bool small = false;
  for (const SummaryRow& r : rows) {
    small = small || r.small_sample;
    std::snprintf(line, sizeof(line), "%-*s %12s %12s %12s\n",
                  static_cast<int>(width), r.feature.c_str(),
                  sci(r.mean_plain).c_str(),
                  r.has_enhanced ? sci(r.mean_enhanced).c_str() : "-",
                  r.has_p ? sci(r.p_value).c_str() : "-");
    os << line;
  }
  if (small) {
    os << "note: a score group has fewer than 20 samples; the asymptotic "
          "KS p-values are rough at this size\n";
  }
  return os.str();
}

}  // namespace gradflow
