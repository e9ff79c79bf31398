#include <cmath>
#include <cstring>
#include <numbers>

#include "doctest.h"
#include "gradflow/features.hpp"
#include "gradflow/graph.hpp"
#include "gradflow/model.hpp"
#include "gradflow/training.hpp"
#include "test_util.hpp"

using namespace gradflow;

namespace {

ArchConfig tiny_arch() {
  ArchConfig arch;
  arch.resolution = 8;
  arch.conv_channels = {2, 2, 4};
  arch.fc_dims = {8, 4, 1};
  return arch;
}

// Two linearly separable intensity classes on 8x8 images.
Dataset separable_dataset(std::size_t n, std::uint64_t seed,
                          double gap = 0.4) {
  Rng rng(seed);
  Dataset ds;
  ds.resolution = 8;
  ds.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    const bool positive = i % 2 == 1;
    const double base = positive ? 0.3 + gap : 0.3;
    Tensor img({8, 8});
    for (double& v : img.values()) v = base + rng.uniform(-0.08, 0.08);
    ds.images.push_back(std::move(img));
    ds.labels.push_back(positive ? 1 : 0);
  }
  return ds;
}

double stable_bce(double logit, double y) {
  const double sp =
      std::max(logit, 0.0) + std::log1p(std::exp(-std::abs(logit)));
  return sp - y * logit;
}

}  // namespace

TEST_CASE("weighted sampling balances classes and needs both of them") {
  std::vector<std::uint8_t> labels(300, 0);
  for (int i = 0; i < 39; ++i) labels[i] = 1;  // 13% positives
  Rng rng(1);
  const auto idx = weighted_epoch_indices(labels, 20000, rng);
  double positive = 0.0;
  for (std::size_t i : idx) positive += labels[i];
  CHECK(positive / 20000.0 == doctest::Approx(0.5).epsilon(0.04));

  std::vector<std::uint8_t> single(10, 1);
  Rng rng2(2);
  CHECK_THROWS_AS(weighted_epoch_indices(single, 5, rng2), SingleClassError);
}

TEST_CASE("zero-draw augmentation is the identity") {
  Rng rng(3);
  const Tensor img = testutil::random_tensor({10, 10}, rng, 0.0, 1.0);
  const Tensor out = warp_image(img, 0.0, 0.0, 0.0);
  CHECK(testutil::max_abs_diff(out, img) < 1e-12);
}

TEST_CASE("integer translation shifts pixels exactly") {
  Rng rng(4);
  Tensor img({8, 8});
  for (std::size_t i = 2; i < 6; ++i) {
    for (std::size_t j = 2; j < 6; ++j) img.at2(i, j) = rng.uniform(0.2, 1.0);
  }
  const Tensor out = warp_image(img, 0.0, 1.0, -2.0);
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      const double want =
          (i >= 1 && j + 2 < 8) ? img.at2(i - 1, j + 2) : 0.0;
      CHECK(out.at2(i, j) == want);
    }
  }
}

TEST_CASE("rotation of an interior blob preserves total mass within 1%") {
  Tensor img({32, 32});
  for (std::size_t i = 0; i < 32; ++i) {
    for (std::size_t j = 0; j < 32; ++j) {
      const double dy = (static_cast<double>(i) - 15.5) / 4.0;
      const double dx = (static_cast<double>(j) - 15.5) / 5.0;
      const double q = dy * dy + dx * dx;
      if (q <= 1.0) img.at2(i, j) = std::exp(-2.0 * q);
    }
  }
  const Tensor rot = warp_image(img, 15.0 * std::numbers::pi / 180.0, 0, 0);
  double m0 = 0.0, m1 = 0.0;
  for (double v : img.values()) m0 += v;
  for (double v : rot.values()) m1 += v;
  CHECK(std::abs(m1 - m0) / m0 < 0.01);
}

TEST_CASE("adam first step moves weights by roughly the learning rate") {
  auto params = ClassifierParams::zeros(tiny_arch());
  AdamOptimizer adam(params);
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  std::vector<Tensor> grads;
  for (const Tensor* t : params.tensors()) {
    grads.push_back(Tensor::full(t->shape(), 1.0));
  }
  adam.step(params, grads, cfg);
  // mhat = vhat = 1 on the first step, so the update is lr/(1+eps).
  CHECK(params.conv1_w[0] ==
        doctest::Approx(-0.01 / (1.0 + cfg.adam_eps)).epsilon(1e-12));
}

TEST_CASE("zero lambdas give exactly the summed binary cross-entropy") {
  const auto params = ClassifierParams::init(tiny_arch(), 5);
  const Dataset ds = separable_dataset(6, 6);
  double expected = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    expected += stable_bce(predict(params, ds.images[i]).logit, ds.labels[i]);
  }
  const double base = alignment_loss(params, ds.images, ds.labels, {}, {},
                                     Head::kLogit);
  CHECK(base == doctest::Approx(expected).epsilon(1e-12));

  // lambda = 0 with features present is bitwise the same loss
  FeatureSet fs{make_feature("brightness", 64)};
  const std::vector<double> zeros{0.0};
  const double with_zero = alignment_loss(params, ds.images, ds.labels, fs,
                                          zeros, Head::kLogit);
  CHECK(std::memcmp(&base, &with_zero, sizeof(double)) == 0);
}

TEST_CASE("a feature parallel to the model gradient rewards lambda per "
          "sample") {
  const auto params = ClassifierParams::init(tiny_arch(), 7);
  const Dataset ds = separable_dataset(4, 8);
  // The classifier's own input gradient as the rewarded feature: the cosine
  // is 1 on every sample.
  FeatureSet fs{std::make_shared<ClassifierHeadMap>(params, Head::kLogit)};
  const std::vector<double> lambda{0.05};
  BatchStats stats;
  const double enhanced = alignment_loss(params, ds.images, ds.labels, fs,
                                         lambda, Head::kLogit, 1e-12, &stats);
  const double base = alignment_loss(params, ds.images, ds.labels, {}, {},
                                     Head::kLogit);
  CHECK(stats.skipped == 0);
  CHECK(enhanced == doctest::Approx(base - 0.05 * ds.size()).epsilon(1e-12));
}

TEST_CASE("the reward term never increases the loss") {
  const auto params = ClassifierParams::init(tiny_arch(), 9);
  const Dataset ds = separable_dataset(6, 10);
  FeatureSet fs{make_feature("brightness", 64), make_feature("random:3", 64)};
  const std::vector<double> lambdas{0.02, 0.01};
  const double enhanced = alignment_loss(params, ds.images, ds.labels, fs,
                                         lambdas, Head::kLogit);
  const double base =
      alignment_loss(params, ds.images, ds.labels, {}, {}, Head::kLogit);
  CHECK(enhanced <= base);
}

TEST_CASE("a vanishing model gradient skips the reward with a counter") {
  const auto params = ClassifierParams::zeros(tiny_arch());
  const Dataset ds = separable_dataset(3, 11);
  FeatureSet fs{make_feature("brightness", 64)};
  const std::vector<double> lambda{0.1};
  BatchStats stats;
  alignment_loss(params, ds.images, ds.labels, fs, lambda, Head::kLogit,
                 1e-12, &stats);
  CHECK(stats.skipped == ds.size());
}

// d(reward)/d(params) on a two-parameter toy built from the same graph
// pieces the trainer uses: f(x; a, b) = a x0^2 + b x0 x1.
TEST_CASE("reward parameter gradient matches finite differences on a toy") {
  const Tensor x0({2}, {0.8, -0.6});
  const Tensor w({2}, {0.9, 0.4});

  auto reward_of = [&](double a, double b, std::vector<double>* grads) {
    ad::Tape t;
    const ad::Var av = t.leaf(Tensor::scalar(a));
    const ad::Var bv = t.leaf(Tensor::scalar(b));
    const ad::Var xv = t.leaf(x0);
    const ad::Var e0 = t.constant(Tensor({2}, {1.0, 0.0}));
    const ad::Var e1 = t.constant(Tensor({2}, {0.0, 1.0}));
    const ad::Var x1 = t.dot(xv, e0);
    const ad::Var x2 = t.dot(xv, e1);
    const ad::Var f = t.add(t.mul(av, t.mul(x1, x1)),
                            t.mul(bv, t.mul(x1, x2)));
    const ad::Var gx = t.gradient_graph(f, xv);
    const ad::Var reward = ad::cosine_sq(t, gx, t.constant(w));
    if (grads != nullptr) {
      const ad::Var targets[2] = {av, bv};
      const auto g = t.gradients(reward, targets);
      *grads = {g[0].item(), g[1].item()};
    }
    return t.value(reward).item();
  };

  std::vector<double> grads;
  reward_of(0.7, -1.2, &grads);
  const double h = 1e-6;
  const double fd_a =
      (reward_of(0.7 + h, -1.2, nullptr) - reward_of(0.7 - h, -1.2, nullptr)) /
      (2 * h);
  const double fd_b =
      (reward_of(0.7, -1.2 + h, nullptr) - reward_of(0.7, -1.2 - h, nullptr)) /
      (2 * h);
  CHECK(grads[0] == doctest::Approx(fd_a).epsilon(1e-4));
  CHECK(grads[1] == doctest::Approx(fd_b).epsilon(1e-4));
}

// The full production path: enhanced per-sample loss gradients against
// central finite differences of the loss value, through the conv net.
TEST_CASE("enhanced sample gradients match finite differences end to end") {
  auto params = ClassifierParams::init(tiny_arch(), 13);
  Rng rng(14);
  Tensor img({8, 8});
  for (std::size_t i = 1; i < 7; ++i) {
    for (std::size_t j = 1; j < 7; ++j) img.at2(i, j) = rng.uniform(0.1, 1.0);
  }
  FeatureSet fs{make_feature("brightness", 64), make_feature("extent", 64)};
  const std::vector<double> lambdas{0.05, 0.02};

  const SampleEval ev = evaluate_sample(params, img, 1, fs, lambdas,
                                        Head::kLogit, 1e-12, true);
  REQUIRE_FALSE(ev.reward_skipped);
  REQUIRE(ev.param_grads.size() == kNumParamTensors);

  auto loss_at = [&](const ClassifierParams& p) {
    return evaluate_sample(p, img, 1, fs, lambdas, Head::kLogit, 1e-12, false)
        .loss;
  };

  Rng pick(15);
  const auto tensors = params.tensors();
  const double h = 1e-5;
  for (int probe = 0; probe < 24; ++probe) {
    const std::size_t ti = pick.index(tensors.size());
    const std::size_t ci = pick.index(tensors[ti]->size());
    ClassifierParams pp = params, pm = params;
    (*pp.tensors()[ti])[ci] += h;
    (*pm.tensors()[ti])[ci] -= h;
    const double fd = (loss_at(pp) - loss_at(pm)) / (2 * h);
    const double got = ev.param_grads[ti][ci];
    const double denom = std::max({std::abs(fd), std::abs(got), 1e-6});
    CHECK(std::abs(fd - got) / denom < 1e-4);
  }
}

TEST_CASE("training with zero lambdas is bitwise the plain path") {
  const Dataset ds = separable_dataset(24, 16);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-3;
  cfg.seed = 17;
  cfg.val_fraction = 0.25;

  const auto init = ClassifierParams::init(tiny_arch(), 18);
  const TrainResult plain = train(init, ds, {}, cfg);

  TrainConfig with_features = cfg;
  with_features.lambdas = {0.0, 0.0};
  FeatureSet fs{make_feature("brightness", 64), make_feature("random:1", 64)};
  const TrainResult zeroed = train(init, ds, fs, with_features);

  const auto a = plain.params.tensors();
  const auto b = zeroed.params.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::memcmp(a[i]->data(), b[i]->data(), 8 * a[i]->size()) == 0);
  }
}

TEST_CASE("training follows the documented loop order") {
  // Reference loop re-implemented from the public pieces; must reproduce
  // train() bit for bit.
  const Dataset ds = separable_dataset(20, 19);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 6;
  cfg.learning_rate = 2e-3;
  cfg.seed = 20;
  cfg.val_fraction = 0.3;

  const auto init = ClassifierParams::init(tiny_arch(), 21);
  const TrainResult got = train(init, ds, {}, cfg);

  auto [train_part, val_part] = stratified_split(ds, cfg.val_fraction,
                                                 cfg.seed);
  ClassifierParams params = init;
  AdamOptimizer adam(params);
  Rng rng(cfg.seed);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order =
        weighted_epoch_indices(train_part.labels, train_part.size(), rng);
    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<Tensor> images;
      std::vector<std::uint8_t> labels;
      for (std::size_t k = start; k < stop; ++k) {
        images.push_back(augment(train_part.images[order[k]], cfg.augment,
                                 rng));
        labels.push_back(train_part.labels[order[k]]);
      }
      std::vector<Tensor> grads;
      for (const Tensor* t : params.tensors()) {
        grads.push_back(Tensor::zeros(t->shape()));
      }
      for (std::size_t k = 0; k < images.size(); ++k) {
        const SampleEval ev = evaluate_sample(params, images[k], labels[k],
                                              {}, {}, cfg.reward_head,
                                              cfg.vanish_tol, true);
        for (std::size_t p = 0; p < grads.size(); ++p) {
          for (std::size_t i = 0; i < grads[p].size(); ++i) {
            grads[p][i] += ev.param_grads[p][i];
          }
        }
      }
      adam.step(params, grads, cfg);
    }
  }
  const auto a = got.params.tensors();
  const auto b = params.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::memcmp(a[i]->data(), b[i]->data(), 8 * a[i]->size()) == 0);
  }
}

TEST_CASE("same seed twice gives bit-identical trained parameters") {
  const Dataset ds = separable_dataset(20, 22);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-3;
  cfg.seed = 23;
  const auto init = ClassifierParams::init(tiny_arch(), 24);
  const TrainResult r1 = train(init, ds, {}, cfg);
  const TrainResult r2 = train(init, ds, {}, cfg);
  const auto a = r1.params.tensors();
  const auto b = r2.params.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::memcmp(a[i]->data(), b[i]->data(), 8 * a[i]->size()) == 0);
  }
}

TEST_CASE("single-class datasets are rejected") {
  Dataset ds = separable_dataset(10, 25);
  for (auto& l : ds.labels) l = 1;
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train(ClassifierParams::init(tiny_arch(), 26), ds, {}, cfg),
                  SingleClassError);
}

TEST_CASE("resuming from a checkpointed state replays the straight run") {
  const Dataset ds = separable_dataset(20, 27);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-3;
  cfg.seed = 28;
  const auto init = ClassifierParams::init(tiny_arch(), 29);
  const TrainResult full = train(init, ds, {}, cfg);

  TrainConfig half = cfg;
  half.epochs = 2;
  const TrainResult first = train(init, ds, {}, half);
  const TrainResult second =
      train(first.params, ds, {}, cfg, {}, &first.state);

  const auto a = full.params.tensors();
  const auto b = second.params.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::memcmp(a[i]->data(), b[i]->data(), 8 * a[i]->size()) == 0);
  }
  CHECK(second.record.epochs.front().epoch == 2);
}

TEST_CASE("plain training separates linearly separable toy data") {
  const Dataset ds = separable_dataset(60, 30);

  // separability oracle: intensity mean alone solves the task
  std::vector<double> mean_intensity;
  for (const Tensor& img : ds.images) {
    double m = 0.0;
    for (double v : img.values()) m += v;
    mean_intensity.push_back(m);
  }
  double best_split = 0.0;
  for (double thr = 15.0; thr < 40.0; thr += 0.25) {
    std::size_t hit[2] = {0, 0}, cnt[2] = {0, 0};
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const int cls = ds.labels[i];
      ++cnt[cls];
      hit[cls] += (mean_intensity[i] > thr) == (cls == 1);
    }
    best_split = std::max(best_split,
                          0.5 * (static_cast<double>(hit[0]) / cnt[0] +
                                 static_cast<double>(hit[1]) / cnt[1]));
  }
  REQUIRE(best_split >= 0.95);

  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-2;
  cfg.seed = 31;
  cfg.augment.enabled = false;
  const TrainResult r = train(ClassifierParams::init(tiny_arch(), 32), ds, {},
                              cfg);
  double best = 0.0;
  for (const EpochRecord& e : r.record.epochs) {
    best = std::max(best, e.balanced_accuracy);
  }
  CHECK(best >= 0.95);
  CHECK(r.record.epochs.back().balanced_accuracy >= 0.95);
}

TEST_CASE("loss decreases over the first ten epochs in 19 of 20 runs") {
  int decreased = 0;
  for (int run = 0; run < 20; ++run) {
    const Dataset ds = separable_dataset(24, 100 + run);
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 8;
    cfg.learning_rate = 3e-2;
    cfg.seed = 200 + run;
    cfg.augment.enabled = false;
    const TrainResult r =
        train(ClassifierParams::init(tiny_arch(), 300 + run), ds, {}, cfg);
    decreased += r.record.epochs.back().mean_loss <
                 r.record.epochs.front().mean_loss;
  }
  CHECK(decreased >= 19);
}
