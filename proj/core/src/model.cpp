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

#include "gradflow/model.hpp"

#include <cmath>
#include <fstream>

#include "gradflow/detail/binio.hpp"
#include "gradflow/rng.hpp"

namespace gradflow {

namespace {
constexpr char kCheckpointMagic[8] = {'G', 'F', 'L', 'O', 'W', 'C', 'K', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

std::string head_name(Head h) {
  return h == Head::kLogit ? "logit" : "probability";
}

Head head_from_name(const std::string& name) {
  if (name == "logit") return Head::kLogit;
  if (name == "probability") return Head::kProbability;
  throw ConfigError("unknown head '" + name + "'");
}

void ArchConfig::validate() const {
  if (resolution < 8 || resolution % 8 != 0) {
    throw ConfigError("resolution must be a positive multiple of 8");
  }
  for (std::size_t c : conv_channels) {
    if (c == 0) throw ConfigError("conv channel counts must be positive");
  }
  if (fc_dims[0] == 0 || fc_dims[1] == 0 || fc_dims[2] != 1) {
    throw ConfigError("fc dims must be positive and end in a single logit");
  }
}

ClassifierParams ClassifierParams::zeros(const ArchConfig& arch) {
  arch.validate();
  ClassifierParams p;
  p.arch = arch;
  const auto [c1, c2, c3] = arch.conv_channels;
  const auto [k1, k2, k3] = ArchConfig::kKernelSizes;
  p.conv1_w = Tensor::zeros({c1, 1, k1, k1});
  p.conv1_b = Tensor::zeros({c1});
  p.conv2_w = Tensor::zeros({c2, c1, k2, k2});
  p.conv2_b = Tensor::zeros({c2});
  p.conv3_w = Tensor::zeros({c3, c2, k3, k3});
  p.conv3_b = Tensor::zeros({c3});
  const std::size_t flat = arch.flat_dim();
  p.fc1_w = Tensor::zeros({flat, arch.fc_dims[0]});
  p.fc1_b = Tensor::zeros({1, arch.fc_dims[0]});
  p.fc2_w = Tensor::zeros({arch.fc_dims[0], arch.fc_dims[1]});
  p.fc2_b = Tensor::zeros({1, arch.fc_dims[1]});
  p.fc3_w = Tensor::zeros({arch.fc_dims[1], arch.fc_dims[2]});
  p.fc3_b = Tensor::zeros({1, arch.fc_dims[2]});
  return p;
}

ClassifierParams ClassifierParams::init(const ArchConfig& arch,
                                        std::uint64_t seed) {
  ClassifierParams p = zeros(arch);
  p.init_seed = seed;
  Rng rng(seed);
  auto fill = [&rng](Tensor& w, Tensor& b, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
    for (double& v : b.values()) v = rng.uniform(-bound, bound);
  };
  const auto [k1, k2, k3] = ArchConfig::kKernelSizes;
  fill(p.conv1_w, p.conv1_b, 1 * k1 * k1);
  fill(p.conv2_w, p.conv2_b, arch.conv_channels[0] * k2 * k2);
  fill(p.conv3_w, p.conv3_b, arch.conv_channels[1] * k3 * k3);
  fill(p.fc1_w, p.fc1_b, arch.flat_dim());
  fill(p.fc2_w, p.fc2_b, arch.fc_dims[0]);
  fill(p.fc3_w, p.fc3_b, arch.fc_dims[1]);
  return p;
}

std::array<Tensor*, kNumParamTensors> ClassifierParams::tensors() {
  return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &conv3_w, &conv3_b,
          &fc1_w,   &fc1_b,   &fc2_w,   &fc2_b,   &fc3_w,   &fc3_b};
}

std::array<const Tensor*, kNumParamTensors> ClassifierParams::tensors() const {
  return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &conv3_w, &conv3_b,
          &fc1_w,   &fc1_b,   &fc2_w,   &fc2_b,   &fc3_w,   &fc3_b};
}

std::size_t ClassifierParams::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : tensors()) n += t->size();
  return n;
}

std::array<ad::Var, kNumParamTensors> register_params(
    ad::Tape& tape, const ClassifierParams& params) {
  std::array<ad::Var, kNumParamTensors> vars;
  const auto ts = params.tensors();
  for (std::size_t i = 0; i < kNumParamTensors; ++i) {
    vars[i] = tape.leaf(*ts[i]);
  }
  return vars;
}

ad::Var logit_graph(ad::Tape& t, const ArchConfig& arch,
                    const std::array<ad::Var, kNumParamTensors>& pv,
                    ad::Var image) {
  const Tensor& img = t.value(image);
  if (img.rank() != 2 || img.shape()[0] != arch.resolution ||
      img.shape()[1] != arch.resolution) {
    throw ShapeError("image resolution mismatch: expected " +
                     std::to_string(arch.resolution) + "x" +
                     std::to_string(arch.resolution) + ", got " +
                     img.shape_str());
  }

  std::size_t res = arch.resolution;
  ad::Var x = t.reshape(image, {1, res, res});
  for (int block = 0; block < 3; ++block) {
    const ad::Var w = pv[2 * block];
    const ad::Var b = pv[2 * block + 1];
    ad::Var c = t.add(t.conv2d(x, w), t.channel_broadcast(b, res, res));
    res /= 2;
    x = ad::elu(t, t.avg_pool2(c));
  }

  ad::Var flat = t.reshape(x, {1, arch.flat_dim()});
  ad::Var h1 = ad::elu(t, t.add(t.matmul(flat, pv[6]), pv[7]));
  ad::Var h2 = ad::elu(t, t.add(t.matmul(h1, pv[8]), pv[9]));
  ad::Var out = t.add(t.matmul(h2, pv[10]), pv[11]);
  return t.reshape(out, {1});
}

namespace {
double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

ClassifierOutput predict(const ClassifierParams& params, const Tensor& image) {
  ad::Tape t;
  const auto pv = register_params(t, params);
  const ad::Var x = t.constant(image);
  const ad::Var logit = logit_graph(t, params.arch, pv, x);
  const double l = t.value(logit).item();
  return {l, stable_sigmoid(l)};
}

Gradient input_gradient(const ClassifierParams& params, const Tensor& image,
                        Head head) {
  ad::Tape t;
  const auto pv = register_params(t, params);
  const ad::Var x = t.leaf(image);
  ad::Var root = logit_graph(t, params.arch, pv, x);
  if (head == Head::kProbability) root = ad::sigmoid(t, root);
  return {WrtTarget::kInputPixels, t.gradient(root, x)};
}

std::string ClassifierHeadMap::name() const {
  return "classifier/" + head_name(head_);
}

double ClassifierHeadMap::value(const Tensor& x) const {
  const ClassifierOutput out = predict(*params_, x);
  return head_ == Head::kLogit ? out.logit : out.probability;
}

std::pair<double, Gradient> ClassifierHeadMap::value_and_gradient(
    const Tensor& x) const {
  return {value(x), input_gradient(*params_, x, head_)};
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

namespace {

void put_tensor(std::ostream& os, const Tensor& t) {
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::put_u64(os, e);
  for (double v : t.values()) detail::put_f64(os, v);
}

Tensor get_tensor(std::istream& is) {
  const std::uint32_t rank = detail::get_u32(is);
  if (rank > 8) throw DataError("checkpoint: implausible tensor rank");
  std::vector<std::size_t> shape(rank);
  std::size_t n = 1;
  for (auto& e : shape) {
    e = static_cast<std::size_t>(detail::get_u64(is));
    n *= e;
  }
  std::vector<double> data(n);
  for (double& v : data) v = detail::get_f64(is);
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

void save_checkpoint(const std::string& path, const ClassifierParams& params,
                     const TrainState* state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u8(os, 1);  // little-endian payload
  detail::put_u32(os, static_cast<std::uint32_t>(params.arch.resolution));
  for (std::size_t c : params.arch.conv_channels) {
    detail::put_u32(os, static_cast<std::uint32_t>(c));
  }
  for (std::size_t f : params.arch.fc_dims) {
    detail::put_u32(os, static_cast<std::uint32_t>(f));
  }
  detail::put_u64(os, params.init_seed);
  for (const Tensor* t : params.tensors()) put_tensor(os, *t);
  detail::put_u8(os, state != nullptr ? 1 : 0);
  if (state != nullptr) {
    detail::put_u64(os, state->next_epoch);
    detail::put_u64(os, state->adam_step);
    for (const Tensor& m : state->adam_m) put_tensor(os, m);
    for (const Tensor& v : state->adam_v) put_tensor(os, v);
    detail::put_string(os, state->rng_state);
    detail::put_u64(os, state->config_hash);
  }
  if (!os) throw DataError("checkpoint write failed: " + path);
}

ClassifierParams load_checkpoint(const std::string& path,
                                 TrainState* state_out, bool* has_state) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  if (!is.read(magic, 8) ||
      !std::equal(magic, magic + 8, kCheckpointMagic)) {
    throw DataError("not a checkpoint file: " + path);
  }
  const std::uint32_t version = detail::get_u32(is);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " +
                    std::to_string(version));
  }
  if (detail::get_u8(is) != 1) {
    throw DataError("unsupported checkpoint endianness tag");
  }
  ArchConfig arch;
  arch.resolution = detail::get_u32(is);
  for (std::size_t& c : arch.conv_channels) c = detail::get_u32(is);
  for (std::size_t& f : arch.fc_dims) f = detail::get_u32(is);
  arch.validate();
  ClassifierParams params = ClassifierParams::zeros(arch);
  params.init_seed = detail::get_u64(is);
  for (Tensor* t : params.tensors()) {
    Tensor loaded = get_tensor(is);
    if (!loaded.same_shape(*t)) {
      throw DataError("checkpoint tensor shape does not match architecture");
    }
    if (!loaded.all_finite()) {
      throw DataError("checkpoint contains non-finite parameters");
    }
    *t = std::move(loaded);
  }
  const bool with_state = detail::get_u8(is) != 0;
  if (has_state != nullptr) *has_state = with_state;
  if (with_state && state_out != nullptr) {
    state_out->next_epoch = detail::get_u64(is);
    state_out->adam_step = detail::get_u64(is);
    state_out->adam_m.clear();
    state_out->adam_v.clear();
    for (std::size_t i = 0; i < kNumParamTensors; ++i) {
      state_out->adam_m.push_back(get_tensor(is));
    }
    for (std::size_t i = 0; i < kNumParamTensors; ++i) {
      state_out->adam_v.push_back(get_tensor(is));
    }
    state_out->rng_state = detail::get_string(is);
    state_out->config_hash = detail::get_u64(is);
  }
  return params;
}

}  // namespace gradflow
