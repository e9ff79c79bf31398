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

#include "gradflow/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "gradflow/analysis.hpp"
#include "gradflow/features.hpp"
#include "gradflow/graph.hpp"

namespace gradflow {

std::vector<std::size_t> weighted_epoch_indices(
    const std::vector<std::uint8_t>& labels, std::size_t n_draws, Rng& rng) {
  std::size_t count[2] = {0, 0};
  for (std::uint8_t l : labels) ++count[l != 0];
  if (count[0] == 0 || count[1] == 0) {
    throw SingleClassError("weighted sampling needs both classes");
  }
  // Cumulative weights, one entry per sample, weight 1/count(class).
  std::vector<double> cumulative(labels.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    acc += 1.0 / static_cast<double>(count[labels[i] != 0]);
    cumulative[i] = acc;
  }
  std::vector<std::size_t> out(n_draws);
  for (std::size_t k = 0; k < n_draws; ++k) {
    const double u = rng.uniform() * acc;
    out[k] = static_cast<std::size_t>(
        std::lower_bound(cumulative.begin(), cumulative.end(), u) -
        cumulative.begin());
    if (out[k] >= labels.size()) out[k] = labels.size() - 1;
  }
  return out;
}

Tensor warp_image(const Tensor& image, double angle_rad, double shift_rows,
                  double shift_cols) {
  if (image.rank() != 2) throw ShapeError("warp: (H,W) image expected");
  const std::size_t h = image.shape()[0], w = image.shape()[1];
  const double cy = 0.5 * static_cast<double>(h - 1);
  const double cx = 0.5 * static_cast<double>(w - 1);
  const double c = std::cos(angle_rad), s = std::sin(angle_rad);
  Tensor out({h, w});
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      // invert: forward maps u -> R(u - c) + c + t
      const double py = static_cast<double>(i) - cy - shift_rows;
      const double px = static_cast<double>(j) - cx - shift_cols;
      const double sy = c * py + s * px + cy;
      const double sx = -s * py + c * px + cx;
      const double fy = std::floor(sy), fx = std::floor(sx);
      const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(fy);
      const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(fx);
      const double wy = sy - fy, wx = sx - fx;
      auto sample = [&](std::ptrdiff_t y, std::ptrdiff_t x) -> double {
        if (y < 0 || y >= static_cast<std::ptrdiff_t>(h) || x < 0 ||
            x >= static_cast<std::ptrdiff_t>(w)) {
          return 0.0;
        }
        return image.at2(static_cast<std::size_t>(y),
                         static_cast<std::size_t>(x));
      };
      out.at2(i, j) = (1 - wy) * ((1 - wx) * sample(y0, x0) +
                                  wx * sample(y0, x0 + 1)) +
                      wy * ((1 - wx) * sample(y0 + 1, x0) +
                            wx * sample(y0 + 1, x0 + 1));
    }
  }
  return out;
}

Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng) {
  const double deg = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);
  const double ty = rng.uniform(-cfg.max_translate_frac,
                                cfg.max_translate_frac) *
                    static_cast<double>(image.shape()[0]);
  const double tx = rng.uniform(-cfg.max_translate_frac,
                                cfg.max_translate_frac) *
                    static_cast<double>(image.shape()[1]);
  return warp_image(image, deg * std::numbers::pi / 180.0, ty, tx);
}

AdamOptimizer::AdamOptimizer(const ClassifierParams& params) {
  for (const Tensor* t : params.tensors()) {
    m_.push_back(Tensor::zeros(t->shape()));
    v_.push_back(Tensor::zeros(t->shape()));
  }
}

void AdamOptimizer::restore(std::vector<Tensor> m, std::vector<Tensor> v,
                            std::size_t t) {
  if (m.size() != m_.size() || v.size() != v_.size()) {
    throw ConfigError("adam restore: moment tensor count mismatch");
  }
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

void AdamOptimizer::step(ClassifierParams& params,
                         std::span<const Tensor> grads,
                         const TrainConfig& cfg) {
  auto ts = params.tensors();
  if (grads.size() != ts.size()) {
    throw ConfigError("adam step: gradient count mismatch");
  }
  ++t_;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double bias1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bias2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t p = 0; p < ts.size(); ++p) {
    Tensor& w = *ts[p];
    Tensor& m = m_[p];
    Tensor& v = v_[p];
    const Tensor& g = grads[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / bias1;
      const double vhat = v[i] / bias2;
      w[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

SampleEval evaluate_sample(const ClassifierParams& params, const Tensor& image,
                           std::uint8_t label, const FeatureSet& features,
                           std::span<const double> lambdas, Head reward_head,
                           double vanish_tol, bool want_grads) {
  if (lambdas.size() != features.size()) {
    throw ConfigError("evaluate_sample: one lambda per feature required");
  }
  bool any_reward = false;
  for (double l : lambdas) {
    if (l < 0.0) throw ConfigError("lambdas must be nonnegative");
    any_reward = any_reward || l > 0.0;
  }

  ad::Tape tape;
  const auto pv = register_params(tape, params);
  const ad::Var x = tape.leaf(image);
  const ad::Var logit = logit_graph(tape, params.arch, pv, x);
  ad::Var loss = ad::bce_with_logit(tape, logit, label != 0 ? 1.0 : 0.0);

  SampleEval eval;
  eval.bce = tape.value(loss).item();

  if (any_reward) {
    // Feature gradients are constants with respect to the parameters.
    Matrix jac;
    bool feature_ok = true;
    try {
      jac = feature_jacobian(features, image);
    } catch (const Error&) {
      feature_ok = false;
    }
    const ad::Var reward_root =
        reward_head == Head::kLogit ? logit : ad::sigmoid(tape, logit);
    const ad::Var input_grad =
        tape.reshape(tape.gradient_graph(reward_root, x), {image.size()});
    const double grad_norm =
        std::sqrt(tape.value(tape.dot(input_grad, input_grad)).item());
    if (!feature_ok || grad_norm < vanish_tol) {
      eval.reward_skipped = true;
    } else {
      ad::Var reward;
      for (std::size_t i = 0; i < features.size(); ++i) {
        if (lambdas[i] == 0.0) continue;
        std::vector<double> row(jac.row(i).begin(), jac.row(i).end());
        const ad::Var w =
            tape.constant(Tensor({image.size()}, std::move(row)));
        const ad::Var term =
            tape.scale(ad::cosine_sq(tape, input_grad, w), lambdas[i]);
        reward = reward.valid() ? tape.add(reward, term) : term;
      }
      eval.reward = tape.value(reward).item();
      loss = tape.sub(loss, reward);
    }
  }

  eval.loss = tape.value(loss).item();
  if (want_grads) {
    std::vector<ad::Var> targets(pv.begin(), pv.end());
    eval.param_grads = tape.gradients(loss, targets);
  }
  return eval;
}

double alignment_loss(const ClassifierParams& params,
                      std::span<const Tensor> images,
                      std::span<const std::uint8_t> labels,
                      const FeatureSet& features,
                      std::span<const double> lambdas, Head reward_head,
                      double vanish_tol, BatchStats* stats) {
  if (images.size() != labels.size()) {
    throw ShapeError("alignment_loss: images/labels size mismatch");
  }
  BatchStats local;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const SampleEval ev =
        evaluate_sample(params, images[i], labels[i], features, lambdas,
                        reward_head, vanish_tol, /*want_grads=*/false);
    local.loss += ev.loss;
    local.reward += ev.reward;
    local.skipped += ev.reward_skipped ? 1 : 0;
  }
  if (stats != nullptr) *stats = local;
  return local.loss;
}

namespace {

std::vector<std::uint8_t> predict_labels(const ClassifierParams& params,
                                         const std::vector<Tensor>& images) {
  std::vector<std::uint8_t> out;
  out.reserve(images.size());
  for (const Tensor& img : images) {
    out.push_back(predict(params, img).logit > 0.0 ? 1 : 0);
  }
  return out;
}

bool has_both_classes(const std::vector<std::uint8_t>& labels) {
  bool seen[2] = {false, false};
  for (std::uint8_t l : labels) seen[l != 0] = true;
  return seen[0] && seen[1];
}

}  // namespace

TrainResult train(const ClassifierParams& init, const Dataset& data,
                  const FeatureSet& features, const TrainConfig& cfg,
                  const EpochCallback& on_epoch, const TrainState* resume) {
  if (cfg.epochs == 0 || cfg.batch_size == 0) {
    throw ConfigError("train: epochs and batch_size must be positive");
  }
  if (cfg.lambdas.size() != features.size()) {
    throw ConfigError("train: one lambda per feature required");
  }
  if (data.size() == 0 || !has_both_classes(data.labels)) {
    throw SingleClassError("train: dataset must contain both classes");
  }

  auto [train_part, val_part] =
      stratified_split(data, cfg.val_fraction, cfg.seed);
  if (train_part.size() == 0 || !has_both_classes(train_part.labels)) {
    throw SingleClassError("train: training split lost a class");
  }
  const bool val_usable =
      val_part.size() > 0 && has_both_classes(val_part.labels);

  TrainResult result;
  result.params = init;
  AdamOptimizer adam(result.params);
  Rng rng(cfg.seed);
  std::size_t first_epoch = 0;
  if (resume != nullptr) {
    adam.restore(resume->adam_m, resume->adam_v,
                 static_cast<std::size_t>(resume->adam_step));
    rng.restore(resume->rng_state);
    first_epoch = static_cast<std::size_t>(resume->next_epoch);
  }

  const std::size_t n_train = train_part.size();
  std::vector<Tensor> batch_grads;
  for (std::size_t epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order =
        weighted_epoch_indices(train_part.labels, n_train, rng);

    EpochRecord record;
    record.epoch = epoch;
    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size) {
      const std::size_t stop =
          std::min(order.size(), start + cfg.batch_size);

      // Augmentation draws happen in draw order before any evaluation, so
      // the rng stream is independent of how gradients are computed.
      std::vector<Tensor> batch_images;
      std::vector<std::uint8_t> batch_labels;
      batch_images.reserve(stop - start);
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t idx = order[k];
        batch_images.push_back(
            cfg.augment.enabled
                ? augment(train_part.images[idx], cfg.augment, rng)
                : train_part.images[idx]);
        batch_labels.push_back(train_part.labels[idx]);
      }

      batch_grads.clear();
      for (const Tensor* t : result.params.tensors()) {
        batch_grads.push_back(Tensor::zeros(t->shape()));
      }
      for (std::size_t k = 0; k < batch_images.size(); ++k) {
        const SampleEval ev = evaluate_sample(
            result.params, batch_images[k], batch_labels[k], features,
            cfg.lambdas, cfg.reward_head, cfg.vanish_tol,
            /*want_grads=*/true);
        record.mean_loss += ev.loss;
        record.mean_reward += ev.reward;
        record.skipped_reward_samples += ev.reward_skipped ? 1 : 0;
        for (std::size_t p = 0; p < batch_grads.size(); ++p) {
          double* dst = batch_grads[p].data();
          const double* src = ev.param_grads[p].data();
          for (std::size_t i = 0; i < batch_grads[p].size(); ++i) {
            dst[i] += src[i];
          }
        }
      }
      adam.step(result.params, batch_grads, cfg);
    }
    record.mean_loss /= static_cast<double>(order.size());
    record.mean_reward /= static_cast<double>(order.size());

    const Dataset& eval_part = val_usable ? val_part : train_part;
    record.balanced_accuracy =
        balanced_accuracy(predict_labels(result.params, eval_part.images),
                          eval_part.labels);
    result.record.epochs.push_back(record);

    if (on_epoch) {
      TrainState state;
      state.next_epoch = epoch + 1;
      state.adam_step = adam.steps();
      state.adam_m = adam.first_moments();
      state.adam_v = adam.second_moments();
      state.rng_state = rng.state();
      on_epoch(result.params, state, record);
    }
  }

  result.state.next_epoch = cfg.epochs;
  result.state.adam_step = adam.steps();
  result.state.adam_m = adam.first_moments();
  result.state.adam_v = adam.second_moments();
  result.state.rng_state = rng.state();
  return result;
}

}  // namespace gradflow
