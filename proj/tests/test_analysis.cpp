#include <cmath>

#include "doctest.h"
#include "gradflow/analysis.hpp"
#include "gradflow/rng.hpp"

using namespace gradflow;

namespace {

// Brute-force ECDF sweep over the pooled values.
double brute_force_d(const std::vector<double>& a,
                     const std::vector<double>& b) {
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  double d = 0.0;
  for (double x : pooled) {
    std::size_t ca = 0, cb = 0;
    for (double v : a) ca += v <= x;
    for (double v : b) cb += v <= x;
    d = std::max(d, std::abs(static_cast<double>(ca) / a.size() -
                             static_cast<double>(cb) / b.size()));
  }
  return d;
}

// Plain alternating series for the Kolmogorov survival function.
double series_q(double t) {
  if (!(t > 0.0)) return 1.0;
  double q = 0.0;
  for (int j = 1; j <= 100000; ++j) {
    const double term = std::exp(-2.0 * j * j * t * t);
    q += (j % 2 == 1 ? term : -term);
    if (term < 1e-18) break;
  }
  return std::min(1.0, std::max(0.0, 2.0 * q));
}

}  // namespace

TEST_CASE("identical samples: D = 0 and p = 1") {
  const std::vector<double> a{0.3, 0.1, 0.7, 0.5};
  const KSResult r = ks_two_sample(a, a);
  CHECK(r.d == 0.0);
  CHECK(r.p_value == 1.0);
}

TEST_CASE("disjoint supports: D = 1 and a tiny p") {
  std::vector<double> a, b;
  for (int i = 0; i < 40; ++i) {
    a.push_back(0.1 + 0.001 * i);
    b.push_back(0.9 + 0.001 * i);
  }
  const KSResult r = ks_two_sample(a, b);
  CHECK(r.d == 1.0);
  CHECK(r.p_value < 1e-6);
}

TEST_CASE("interleaved example has D = 1/3") {
  const std::vector<double> a{0.1, 0.2, 0.3};
  const std::vector<double> b{0.15, 0.25, 0.35};
  const KSResult r = ks_two_sample(a, b);
  CHECK(r.d == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("empty samples are rejected") {
  const std::vector<double> a{0.1};
  CHECK_THROWS_AS(ks_two_sample(a, {}), Error);
  CHECK_THROWS_AS(ks_two_sample({}, a), Error);
}

TEST_CASE("D matches the brute-force ECDF sweep exactly") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(2 + rng.index(12));
    std::vector<double> b(2 + rng.index(12));
    for (double& v : a) v = rng.uniform(0.0, 1.0);
    for (double& v : b) v = rng.uniform(0.0, 1.0);
    if (trial % 4 == 0 && !b.empty()) b[0] = a[0];  // force a tie
    const KSResult r = ks_two_sample(a, b);
    CHECK(r.d == brute_force_d(a, b));
  }
}

TEST_CASE("ks is symmetric in its arguments") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(3 + rng.index(20)), b(3 + rng.index(20));
    for (double& v : a) v = rng.normal();
    for (double& v : b) v = rng.normal() + 0.3;
    const KSResult r1 = ks_two_sample(a, b);
    const KSResult r2 = ks_two_sample(b, a);
    CHECK(r1.d == r2.d);
    CHECK(r1.p_value == r2.p_value);
  }
}

TEST_CASE("D is invariant under a strictly increasing transform") {
  Rng rng(7);
  std::vector<double> a(25), b(30);
  for (double& v : a) v = rng.uniform(-1, 1);
  for (double& v : b) v = rng.uniform(-0.5, 1.5);
  const KSResult base = ks_two_sample(a, b);
  for (double& v : a) v = std::exp(v);
  for (double& v : b) v = std::exp(v);
  const KSResult mapped = ks_two_sample(a, b);
  CHECK(base.d == mapped.d);
}

TEST_CASE("asymptotic p agrees with the plain series to 1e-10") {
  for (double t = 0.02; t < 4.0; t += 0.037) {
    CHECK(std::abs(kolmogorov_q(t) - series_q(t)) < 1e-10);
  }
  CHECK(kolmogorov_q(0.0) == 1.0);
  CHECK(kolmogorov_q(-1.0) == 1.0);
}

TEST_CASE("balanced accuracy basics") {
  const std::vector<std::uint8_t> labels{0, 0, 1, 1, 1};
  CHECK(balanced_accuracy(std::vector<std::uint8_t>{0, 0, 1, 1, 1}, labels) ==
        1.0);
  CHECK(balanced_accuracy(std::vector<std::uint8_t>{1, 1, 1, 1, 1}, labels) ==
        0.5);
  CHECK_THROWS_AS(
      balanced_accuracy(std::vector<std::uint8_t>{0, 0, 0},
                        std::vector<std::uint8_t>{1, 1, 1}),
      SingleClassError);
}

TEST_CASE("balanced accuracy averages per-class recalls") {
  // 10 positives with TPR 0.8, 10 negatives with TNR 0.6 -> 0.7
  std::vector<std::uint8_t> labels, preds;
  for (int i = 0; i < 10; ++i) {
    labels.push_back(1);
    preds.push_back(i < 8 ? 1 : 0);
  }
  for (int i = 0; i < 10; ++i) {
    labels.push_back(0);
    preds.push_back(i < 6 ? 0 : 1);
  }
  CHECK(balanced_accuracy(preds, labels) == doctest::Approx(0.7));
}

TEST_CASE("summarize reports means, KS p-values and formats tables") {
  ScoreSamples plain;
  plain.add("brightness", {0.1, 0.2, 0.3, 0.4});
  plain.add("combined", {0.5, 0.5, 0.5, 0.5});
  ScoreSamples enhanced;
  enhanced.add("brightness", {0.1, 0.2, 0.3, 0.4});
  enhanced.add("combined", {0.9, 0.8, 0.7, 0.6});

  const auto rows = summarize(plain, &enhanced);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].mean_plain == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(rows[1].mean_enhanced == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(rows[0].p_value == 1.0);  // identical distributions
  CHECK(rows[0].small_sample);

  const std::string csv = render_csv(rows);
  CHECK(csv.rfind("feature,mean_plain,mean_enhanced,p_value\n", 0) == 0);
  CHECK(csv.find("brightness,2.5e-01,2.5e-01,1.0e+00") != std::string::npos);

  const std::string text = render_text(rows);
  CHECK(text.find("fewer than 20 samples") != std::string::npos);

  ScoreSamples missing;
  missing.add("brightness", {0.1});
  CHECK_THROWS_AS(summarize(plain, &missing), ConfigError);

  const auto plain_only = summarize(plain, nullptr);
  CHECK_FALSE(plain_only[0].has_enhanced);
  CHECK(render_csv(plain_only).find("brightness,2.5e-01,,") !=
        std::string::npos);
}
