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
#include <functional>
#include <span>
#include <vector>

#include "gradflow/map.hpp"
#include "gradflow/model.hpp"
#include "gradflow/rng.hpp"
#include "gradflow/synthdata.hpp"
#include "gradflow/tensor.hpp"

namespace gradflow {

struct AugmentConfig {
  bool enabled = true;
  double max_rotation_deg = 20.0;
  double max_translate_frac = 0.015;  // of image width/height, per axis
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 3.0e-5;
  std::vector<double> lambdas;  // one weight per feature; empty means plain
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  Head reward_head = Head::kLogit;  // gradient used inside the reward cosine
  AugmentConfig augment;
  double val_fraction = 0.3;
  double vanish_tol = 1e-12;  // reward skipped below this gradient norm
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double balanced_accuracy = 0.0;
  double mean_reward = 0.0;  // lambda-weighted reward per drawn sample
  std::size_t skipped_reward_samples = 0;
};

struct TrainRecord {
  std::vector<EpochRecord> epochs;
};

struct TrainResult {
  ClassifierParams params;
  TrainRecord record;
  TrainState state;  // optimizer + rng snapshot for resumable checkpoints
};

/// Class-balanced sampling with replacement: each sample is drawn with
/// probability proportional to 1 / count(its class).
std::vector<std::size_t> weighted_epoch_indices(
    const std::vector<std::uint8_t>& labels, std::size_t n_draws, Rng& rng);

/// Bilinear inverse warp around the image center with zero fill. Integer
/// translations at zero rotation reproduce pixels exactly.
Tensor warp_image(const Tensor& image, double angle_rad, double shift_rows,
                  double shift_cols);

/// Draws rotation ~ U(-max_deg, max_deg) and per-axis translation
/// ~ U(-frac, frac) * extent from `rng`, then warps.
Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng);

class AdamOptimizer {
 public:
  explicit AdamOptimizer(const ClassifierParams& params);

  void step(ClassifierParams& params, std::span<const Tensor> grads,
            const TrainConfig& cfg);

  std::size_t steps() const { return t_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void restore(std::vector<Tensor> m, std::vector<Tensor> v, std::size_t t);

 private:
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

/// One term of the training objective, with optional parameter gradients:
///   bce(logit, label) - sum_i lambda_i cos^2(grad_x f, grad_x g_i).
/// The reward needs gradients of the input gradient; those flow through a
/// backward sweep recorded on the tape. A vanishing input gradient (or a
/// feature singularity at this image) skips the reward term for the sample.
struct SampleEval {
  double loss = 0.0;
  double bce = 0.0;
  double reward = 0.0;  // lambda-weighted, already subtracted from loss
  bool reward_skipped = false;
  std::vector<Tensor> param_grads;  // empty unless want_grads
};

SampleEval evaluate_sample(const ClassifierParams& params, const Tensor& image,
                           std::uint8_t label, const FeatureSet& features,
                           std::span<const double> lambdas, Head reward_head,
                           double vanish_tol, bool want_grads);

struct BatchStats {
  double loss = 0.0;
  double reward = 0.0;
  std::size_t skipped = 0;
};

/// Total loss of a batch (value only): sum over samples of
/// L(f(x), y) - sum_i lambda_i cos^2. With all lambdas zero this is exactly
/// the summed binary cross-entropy.
double alignment_loss(const ClassifierParams& params,
                      std::span<const Tensor> images,
                      std::span<const std::uint8_t> labels,
                      const FeatureSet& features,
                      std::span<const double> lambdas, Head reward_head,
                      double vanish_tol = 1e-12, BatchStats* stats = nullptr);

using EpochCallback = std::function<void(
    const ClassifierParams&, const TrainState&, const EpochRecord&)>;

/// Seeded, reproducible training loop: stratified 70/30-style split,
/// class-balanced batch sampling, optional augmentation, Adam updates on the
/// summed batch loss. Per-sample gradients accumulate in draw order, so the
/// result does not depend on any parallel schedule. When every lambda is
/// zero no reward machinery runs at all.
///
/// Per-epoch balanced accuracy is computed on the held-out split when it
/// contains both classes, otherwise on the training split.
TrainResult train(const ClassifierParams& init, const Dataset& data,
                  const FeatureSet& features, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {},
                  const TrainState* resume = nullptr);

}  // namespace gradflow
