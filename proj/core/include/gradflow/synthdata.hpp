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
#include <string>
#include <utility>
#include <vector>

#include "gradflow/rng.hpp"
#include "gradflow/tensor.hpp"

namespace gradflow {

/// One elliptical blob: Gaussian intensity falloff inside an ellipse support,
/// exactly zero outside it.
struct BlobSpec {
  std::array<double, 2> center{32.0, 32.0};     // (row, col), pixels
  std::array<double, 2> semi_axes{10.0, 6.0};   // major, minor, pixels
  double rotation = 0.0;                        // radians
  double peak = 1.0;                            // intensity at the center
  double falloff = 2.0;                         // exponent rate over support
  double noise = 0.0;                           // additive sigma inside
};

/// Parameter distribution the generator draws blobs from.
struct BlobRanges {
  std::array<double, 2> semi_axis_major{6.0, 14.0};
  std::array<double, 2> semi_axis_minor{4.0, 10.0};  // clipped to the major
  std::array<double, 2> peak{0.5, 1.0};
  double falloff = 2.0;
  double noise = 0.02;
  double margin = 2.0;  // blob must stay this many pixels inside the image
};

enum class LabelRuleKind {
  kBrightnessThreshold,
  kExtentThreshold,
  kAspectThreshold,
  kMixedLogistic,
};

std::string rule_name(LabelRuleKind k);
LabelRuleKind rule_from_name(const std::string& name);

/// Labels are functions of the true generative parameters (not the rendered
/// pixels), so pixel-level feature noise is realistic.
struct LabelRule {
  LabelRuleKind kind = LabelRuleKind::kBrightnessThreshold;
  double positive_rate = 0.13;
  // kMixedLogistic: logistic weights on the standardized rule variables
  // (mass, extent, log aspect).
  std::array<double, 3> mixed_weights{1.0, 1.0, 1.0};
};

struct Dataset {
  std::size_t resolution = 64;
  std::uint64_t seed = 0;
  LabelRule rule;
  std::vector<Tensor> images;
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return images.size(); }
  std::size_t positives() const;
};

/// Closed-form rule variables of a blob's continuum intensity profile.
double blob_mass(const BlobSpec& spec);
double blob_extent(const BlobSpec& spec);
double blob_log_aspect(const BlobSpec& spec);

/// Renders a blob; per-pixel noise (if any) comes from `noise_rng` in
/// row-major order of the support pixels. Intensities clipped to [0, 1].
Tensor render_blob(const BlobSpec& spec, std::size_t resolution,
                   Rng* noise_rng = nullptr);

/// Zeroes every pixel outside the blob's ellipse support.
Tensor mask(const Tensor& image, const BlobSpec& blob);

/// Reproducible dataset: sample i depends only on (seed, i). Throws
/// ConfigError for n == 0 or blobs that cannot fit the image.
Dataset generate(std::size_t n, std::size_t resolution,
                 const BlobRanges& ranges, const LabelRule& rule,
                 std::uint64_t seed);

/// Deterministic stratified split; the second part holds ~test_fraction of
/// each class.
std::pair<Dataset, Dataset> stratified_split(const Dataset& ds,
                                             double test_fraction,
                                             std::uint64_t seed);

// Dataset file layout (version 1, little-endian):
//   magic "GFLOWDS1" | u32 version | u8 endian tag
//   u64 n | u32 height | u32 width | u64 seed
//   u8 rule kind | f64 positive rate | f64 mixed weights x3
//   n x { f64 pixels[h*w] | u8 label }
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

/// JSON manifest next to a dataset file: sample count, resolution, seed,
/// rule, realized positive rate.
void write_dataset_manifest(const Dataset& ds, const std::string& json_path,
                            const std::string& data_file);

/// 8/16-bit binary PGM (P5), scaled to [0,1].
Tensor read_pgm(const std::string& path);

/// Import list: one "image.pgm,mask.pgm,label" line per sample (the mask
/// column may be empty). Masked pixels are set to exactly zero.
Dataset import_raster_list(const std::string& csv_path);

}  // namespace gradflow
