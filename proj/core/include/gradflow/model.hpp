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

#include "gradflow/graph.hpp"
#include "gradflow/map.hpp"
#include "gradflow/tensor.hpp"

namespace gradflow {

enum class Head { kLogit, kProbability };

std::string head_name(Head h);
Head head_from_name(const std::string& name);

/// Binary classifier architecture: three convolutional blocks
/// (5x5, 3x3, 3x3 kernels, each conv -> 2x2 average pool -> ELU) followed by
/// three fully-connected layers. Channel counts and input resolution are
/// configurable; kernel sizes are fixed.
struct ArchConfig {
  std::size_t resolution = 64;
  std::array<std::size_t, 3> conv_channels{8, 16, 32};
  std::array<std::size_t, 3> fc_dims{256, 128, 1};

  static constexpr std::array<std::size_t, 3> kKernelSizes{5, 3, 3};

  void validate() const;
  std::size_t pixel_count() const { return resolution * resolution; }
  std::size_t pooled_resolution() const { return resolution / 8; }
  std::size_t flat_dim() const {
    return conv_channels[2] * pooled_resolution() * pooled_resolution();
  }
  bool operator==(const ArchConfig&) const = default;
};

struct ClassifierOutput {
  double logit = 0.0;
  double probability = 0.5;  // 1 / (1 + exp(-logit))
};

constexpr std::size_t kNumParamTensors = 12;

/// All trainable tensors plus the architecture and init seed they belong to.
struct ClassifierParams {
  ArchConfig arch;
  std::uint64_t init_seed = 0;

  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;
  Tensor conv3_w, conv3_b;
  Tensor fc1_w, fc1_b;
  Tensor fc2_w, fc2_b;
  Tensor fc3_w, fc3_b;

  /// Fan-in scaled uniform init, reproducible from the seed.
  static ClassifierParams init(const ArchConfig& arch, std::uint64_t seed);
  static ClassifierParams zeros(const ArchConfig& arch);

  std::array<Tensor*, kNumParamTensors> tensors();
  std::array<const Tensor*, kNumParamTensors> tensors() const;
  std::size_t parameter_count() const;
};

/// Registers every parameter tensor as a tape leaf, in tensors() order.
std::array<ad::Var, kNumParamTensors> register_params(
    ad::Tape& tape, const ClassifierParams& params);

/// Builds the logit graph on `tape`. `image` must be an (H,W) node matching
/// the configured resolution.
ad::Var logit_graph(ad::Tape& tape, const ArchConfig& arch,
                    const std::array<ad::Var, kNumParamTensors>& pv,
                    ad::Var image);

/// Pure function of (params, image): deterministic logit and probability.
ClassifierOutput predict(const ClassifierParams& params, const Tensor& image);

/// Exact reverse-mode gradient of the chosen head w.r.t. input pixels.
/// A zero gradient (critical point) is returned as-is.
Gradient input_gradient(const ClassifierParams& params, const Tensor& image,
                        Head head = Head::kLogit);

/// DifferentiableMap adapter for a classifier head, usable with the
/// finite-difference harness and the gradient-flow tracer.
class ClassifierHeadMap : public DifferentiableMap {
 public:
  ClassifierHeadMap(const ClassifierParams& params, Head head)
      : params_(&params), head_(head) {}
  std::string name() const override;
  double value(const Tensor& x) const override;
  std::pair<double, Gradient> value_and_gradient(
      const Tensor& x) const override;

 private:
  const ClassifierParams* params_;
  Head head_;
};

/// Optimizer and loop state embedded in a checkpoint so training can resume.
struct TrainState {
  std::uint64_t next_epoch = 0;
  std::uint64_t adam_step = 0;
  std::vector<Tensor> adam_m, adam_v;  // aligned with ClassifierParams order
  std::string rng_state;
  std::uint64_t config_hash = 0;
};

// Checkpoint file layout (version 1, all integers and doubles little-endian):
//   magic "GFLOWCK1" | u32 version | u8 endian tag (1 = little)
//   u32 resolution | u32 conv channels x3 | u32 fc dims x3 | u64 init seed
//   12 x { u32 rank | u64 dims[rank] | f64 data[...] }
//   u8 has_train_state
//   [ u64 next_epoch | u64 adam_step | 12 x f64 m-data | 12 x f64 v-data
//     | string rng_state | u64 config_hash ]
void save_checkpoint(const std::string& path, const ClassifierParams& params,
                     const TrainState* state = nullptr);
ClassifierParams load_checkpoint(const std::string& path,
                                 TrainState* state_out = nullptr,
                                 bool* has_state = nullptr);

}  // namespace gradflow
