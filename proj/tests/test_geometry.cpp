#include <cmath>

#include "doctest.h"
#include "gradflow/features.hpp"
#include "gradflow/geometry.hpp"
#include "gradflow/rng.hpp"
#include "test_util.hpp"

using namespace gradflow;

namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

Matrix rows(std::vector<std::vector<double>> r) {
  Matrix m(r.size(), r[0].size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    for (std::size_t j = 0; j < r[i].size(); ++j) m(i, j) = r[i][j];
  }
  return m;
}

/// Linear field w.x with constant gradient w.
class LinearMap : public DifferentiableMap {
 public:
  explicit LinearMap(Tensor w) : w_(std::move(w)) {}
  std::string name() const override { return "linear"; }
  double value(const Tensor& x) const override {
    return dot(x.values(), w_.values());
  }
  std::pair<double, Gradient> value_and_gradient(
      const Tensor& x) const override {
    return {value(x), {WrtTarget::kInputPixels, w_}};
  }

 private:
  Tensor w_;
};

/// f(x) = 0.5 (a x0^2 + b x1^2) - c, a smooth toy with curved flow lines.
class QuadraticMap : public DifferentiableMap {
 public:
  QuadraticMap(double a, double b, double c) : a_(a), b_(b), c_(c) {}
  std::string name() const override { return "quadratic"; }
  double value(const Tensor& x) const override {
    return 0.5 * (a_ * x[0] * x[0] + b_ * x[1] * x[1]) - c_;
  }
  std::pair<double, Gradient> value_and_gradient(
      const Tensor& x) const override {
    Tensor g({2}, {a_ * x[0], b_ * x[1]});
    return {value(x), {WrtTarget::kInputPixels, std::move(g)}};
  }

 private:
  double a_, b_, c_;
};

/// Brute-force least-squares oracle: fit grad_f on the rows of jac by
/// normal equations with a tiny ridge, refined through the residual.
Tensor least_squares_parallel(const Tensor& grad_f, const Matrix& jac) {
  const std::size_t m = jac.rows, d = jac.cols;
  // Gauss-Seidel style iteration on the normal equations avoids forming an
  // explicit pseudo-inverse; good enough as an independent check.
  std::vector<double> coef(m, 0.0);
  for (int sweep = 0; sweep < 20000; ++sweep) {
    for (std::size_t i = 0; i < m; ++i) {
      const double gii = dot(jac.row(i), jac.row(i));
      if (gii == 0.0) continue;
      double r = dot(jac.row(i), grad_f.values());
      for (std::size_t j = 0; j < m; ++j) {
        if (j == i) continue;
        r -= coef[j] * dot(jac.row(i), jac.row(j));
      }
      coef[i] = r / gii;
    }
  }
  Tensor parallel({d});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < d; ++j) parallel[j] += coef[i] * jac(i, j);
  }
  return parallel;
}

}  // namespace

TEST_CASE("pointwise single alignment: orthogonal, collinear, diagonal") {
  CHECK(pointwise_alignment_single(vec({1, 0}), vec({0, 1})).s == 0.0);
  CHECK(pointwise_alignment_single(vec({2, 0}), vec({-3, 0})).s ==
        doctest::Approx(1.0));
  CHECK(pointwise_alignment_single(vec({1, 1}), vec({1, 0})).s ==
        doctest::Approx(0.5));
}

TEST_CASE("pointwise single alignment reports which gradient vanished") {
  try {
    pointwise_alignment_single(vec({0, 0}), vec({1, 0}));
    FAIL("expected CriticalPointError");
  } catch (const CriticalPointError& e) {
    CHECK(std::string(e.what()).find("grad_f") != std::string::npos);
  }
  try {
    pointwise_alignment_single(vec({1, 0}), vec({0, 0}));
    FAIL("expected CriticalPointError");
  } catch (const CriticalPointError& e) {
    CHECK(std::string(e.what()).find("grad_g") != std::string::npos);
  }
}

TEST_CASE("projection onto orthonormal rows e1, e2") {
  const auto proj =
      project_gradient(vec({3, 4, 12}), rows({{1, 0, 0}, {0, 1, 0}}));
  CHECK(proj.parallel[0] == doctest::Approx(3.0));
  CHECK(proj.parallel[1] == doctest::Approx(4.0));
  CHECK(proj.parallel[2] == doctest::Approx(0.0));
  CHECK(proj.perpendicular[2] == doctest::Approx(12.0));
  const auto score =
      pointwise_alignment_multi(vec({3, 4, 12}), rows({{1, 0, 0}, {0, 1, 0}}));
  CHECK(score.s == doctest::Approx(25.0 / 169.0));
}

TEST_CASE("rank-deficient Jacobian: duplicated direction is harmless") {
  const auto proj = project_gradient(vec({1, 1}), rows({{1, 0}, {2, 0}}));
  CHECK(proj.parallel[0] == doctest::Approx(1.0));
  CHECK(proj.parallel[1] == doctest::Approx(0.0));
  const auto score =
      pointwise_alignment_multi(vec({1, 1}), rows({{1, 0}, {2, 0}}));
  CHECK(score.s == doctest::Approx(0.5));
}

TEST_CASE("all-zero Jacobian is a degenerate feature error") {
  CHECK_THROWS_AS(project_gradient(vec({1, 1}), rows({{0, 0}, {0, 0}})),
                  DegenerateFeatureError);
}

TEST_CASE("m=1 multi-alignment equals the squared-cosine form to 1e-12") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor f = testutil::random_tensor({7}, rng, -2, 2);
    const Tensor g = testutil::random_tensor({7}, rng, -2, 2);
    Matrix jac(1, 7);
    for (std::size_t j = 0; j < 7; ++j) jac(0, j) = g[j];
    const double s1 = pointwise_alignment_single(f, g).s;
    const double sm = pointwise_alignment_multi(f, jac).s;
    CHECK(std::abs(s1 - sm) <= 1e-12 * std::max({s1, sm, 1e-30}));
  }
}

TEST_CASE("projection matches a brute-force least-squares fit") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.index(3);
    Matrix jac(m, 5);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < 5; ++j) jac(i, j) = rng.uniform(-1, 1);
    }
    const Tensor f = testutil::random_tensor({5}, rng, -1, 1);
    const auto proj = project_gradient(f, jac);
    const Tensor oracle = least_squares_parallel(f, jac);
    CHECK(testutil::max_abs_diff(proj.parallel, oracle) < 1e-10);
  }
}

TEST_CASE("Pythagoras, bounds, idempotence, scale invariance, span growth") {
  Rng rng(41);
  int checked = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 2 + rng.index(63);
    const std::size_t m = 1 + rng.index(5);
    Matrix jac(m, d);
    for (std::size_t i = 0; i < m; ++i) {
      if (i >= 1 && rng.uniform() < 0.25) {
        // rank-deficient instance: scaled copy of an earlier row
        const double c = rng.uniform(-2, 2);
        for (std::size_t j = 0; j < d; ++j) jac(i, j) = c * jac(0, j);
      } else {
        for (std::size_t j = 0; j < d; ++j) jac(i, j) = rng.uniform(-1, 1);
      }
    }
    Tensor f = testutil::random_tensor({d}, rng, -1, 1);
    if (squared_norm(f.values()) == 0.0) continue;

    const auto score = pointwise_alignment_multi(f, jac);
    const auto proj = project_gradient(f, jac);
    const double para = squared_norm(proj.parallel.values());
    const double perp = squared_norm(proj.perpendicular.values());
    CHECK(std::abs(para + perp - score.total_sq) <=
          1e-10 * std::max(score.total_sq, 1e-300));
    CHECK(score.s >= 0.0);
    CHECK(score.s <= 1.0);

    // perpendicular orthogonal to every row
    for (std::size_t i = 0; i < m; ++i) {
      const double dp = dot(proj.perpendicular.values(), jac.row(i));
      const double bound = 1e-10 *
                           std::sqrt(squared_norm(jac.row(i))) *
                           std::sqrt(std::max(perp, 1e-300));
      CHECK(std::abs(dp) <= std::max(bound, 1e-12));
    }

    // idempotence
    const auto proj2 = project_gradient(proj.parallel, jac);
    CHECK(testutil::max_abs_diff(proj2.parallel, proj.parallel) <= 1e-10);

    // scale invariance of s
    Tensor f_scaled = f;
    for (double& v : f_scaled.values()) v *= 37.5;
    const auto scaled_score = pointwise_alignment_multi(f_scaled, jac);
    CHECK(std::abs(scaled_score.s - score.s) <= 1e-10);

    // monotone span growth: appending a row never decreases s
    Matrix bigger(m + 1, d);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < d; ++j) bigger(i, j) = jac(i, j);
    }
    for (std::size_t j = 0; j < d; ++j) {
      bigger(m, j) = rng.uniform(-1, 1);
    }
    const auto grown = pointwise_alignment_multi(f, bigger);
    CHECK(grown.s >= score.s - 1e-10);
    ++checked;
  }
  CHECK(checked >= 990);
}

TEST_CASE("linear flow reaches the boundary in the closed-form step count") {
  const Tensor w = vec({0.6, -0.8});
  const LinearMap map(w);
  const Tensor x0 = vec({2.0, -1.0});  // w.x0 = 2.0 > 0
  FlowConfig cfg;
  cfg.step_size = 0.3;
  const FlowPath path = trace_gradient_flow(map, x0, cfg);
  CHECK(path.termination == FlowTermination::kBoundaryCrossed);
  const double wsq = squared_norm(w.values());
  const std::size_t expected =
      static_cast<std::size_t>(std::ceil(2.0 / (0.3 * wsq)));
  CHECK(path.steps_taken == expected);
  // straight line: every recorded gradient is w
  for (const Tensor& g : path.gradients) {
    CHECK(g[0] == w[0]);
    CHECK(g[1] == w[1]);
  }
  // exact Euler replay through the library's own step function
  for (std::size_t k = 0; k + 1 < path.points.size(); ++k) {
    const Tensor replay = flow_step(path.points[k], path.gradients[k],
                                    path.step_size, path.direction_sign);
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(replay[j] == path.points[k + 1][j]);
    }
  }
  // sign change across the final step
  const double last = path.values.back();
  const double prev = path.values[path.values.size() - 2];
  CHECK(last * prev <= 0.0);
}

TEST_CASE("start exactly on the boundary: zero-length crossed path") {
  const LinearMap map(vec({1.0, 0.0}));
  const FlowPath path = trace_gradient_flow(map, vec({0.0, 3.0}));
  CHECK(path.termination == FlowTermination::kBoundaryCrossed);
  CHECK(path.steps_taken == 0);
  CHECK(path.points.size() == 1);
  CHECK_THROWS_AS(flow_alignment(path, FeatureSet{}), Error);
}

TEST_CASE("vanishing gradient at the start is a critical point error") {
  const LinearMap map(vec({0.0, 0.0}));
  CHECK_THROWS_AS(trace_gradient_flow(map, vec({1.0, 1.0})),
                  CriticalPointError);
}

TEST_CASE("quadratic flow endpoint matches a 100x finer integration") {
  const QuadraticMap map(1.0, 4.0, 2.0);
  const Tensor x0 = vec({1.6, 1.1});
  FlowConfig coarse;
  coarse.step_size = 1e-4;
  coarse.max_steps = 10000000;
  FlowConfig fine = coarse;
  fine.step_size = coarse.step_size / 100.0;
  const FlowPath a = trace_gradient_flow(map, x0, coarse);
  const FlowPath b = trace_gradient_flow(map, x0, fine);
  REQUIRE(a.termination == FlowTermination::kBoundaryCrossed);
  REQUIRE(b.termination == FlowTermination::kBoundaryCrossed);
  const Tensor& ea = a.points.back();
  const Tensor& eb = b.points.back();
  const double dist = std::sqrt((ea[0] - eb[0]) * (ea[0] - eb[0]) +
                                (ea[1] - eb[1]) * (ea[1] - eb[1]));
  CHECK(dist < 1e-3);
}

TEST_CASE("flow alignment with the field's own gradient is exactly one") {
  const QuadraticMap map(1.0, 3.0, 1.5);
  FlowConfig cfg;
  cfg.step_size = 0.05;
  const FlowPath path = trace_gradient_flow(map, vec({1.2, 0.9}), cfg);
  FeatureSet fs{std::make_shared<QuadraticMap>(1.0, 3.0, 1.5)};
  const FlowAlignment fa = flow_alignment(path, fs);
  CHECK(fa.f == 1.0);
}

TEST_CASE("linear flow alignment equals the constant pointwise score") {
  const Tensor w = vec({1.0, 2.0});
  const Tensor wg = vec({1.0, 0.0});
  const LinearMap map(w);
  FlowConfig cfg;
  cfg.step_size = 0.11;
  const FlowPath path = trace_gradient_flow(map, vec({3.0, 1.0}), cfg);
  FeatureSet fs{std::make_shared<LinearMap>(wg)};
  const FlowAlignment fa = flow_alignment(path, fs);
  const double s = pointwise_alignment_single(w, wg).s;
  CHECK(fa.f == doctest::Approx(s).epsilon(1e-12));
}

TEST_CASE("flow alignment F converges as the step is refined") {
  const QuadraticMap map(1.0, 4.0, 2.0);
  FeatureSet fs{std::make_shared<LinearMap>(vec({1.0, 0.5}))};
  auto f_at = [&](double step) {
    FlowConfig cfg;
    cfg.step_size = step;
    cfg.max_steps = 1000000;
    return flow_alignment(trace_gradient_flow(map, vec({1.6, 1.1}), cfg), fs)
        .f;
  };
  const double f1 = f_at(0.002);
  const double f2 = f_at(0.001);
  CHECK(std::abs(f1 - f2) < 1e-3);
}

TEST_CASE("rank report: probability head of a trained-like model has rank 1") {
  ArchConfig arch;
  arch.resolution = 16;
  arch.conv_channels = {2, 4, 4};
  arch.fc_dims = {8, 4, 1};
  const auto params = ClassifierParams::init(arch, 57);
  Rng rng(3);
  const Tensor img = testutil::random_tensor({16, 16}, rng, 0.1, 1.0);
  const RankReport r = rank_report(params, img);
  REQUIRE(r.singular_values.size() == 2);
  CHECK(r.singular_values[0] >= r.singular_values[1]);
  // rows are p and 1-p gradients: sum is zero, rank stays <= 1
  CHECK(r.numerical_rank <= 1);
  CHECK(r.numerical_rank == 1);
  CHECK(r.is_regular);
}

TEST_CASE("rank report: constant model has rank 0 and is not regular") {
  ArchConfig arch;
  arch.resolution = 16;
  arch.conv_channels = {2, 4, 4};
  arch.fc_dims = {8, 4, 1};
  const auto params = ClassifierParams::zeros(arch);
  const Tensor img = Tensor::full({16, 16}, 0.5);
  const RankReport r = rank_report(params, img);
  CHECK(r.numerical_rank == 0);
  CHECK_FALSE(r.is_regular);
}
