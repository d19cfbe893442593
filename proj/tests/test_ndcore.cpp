#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "ahc/ndcore.hpp"
#include "doctest.h"

using namespace ahc;

TEST_CASE("linear_forward matches a hand-computed affine map") {
  Mat w(2, 2);
  w(0, 0) = 1.0;
  w(0, 1) = 2.0;
  w(1, 0) = 3.0;
  w(1, 1) = 4.0;
  const Vec x = {5.0, 6.0};
  const Vec b = {0.5, -0.5};
  const Vec y = linear_forward(x, w, b);
  REQUIRE(y.size() == 2);
  CHECK(y[0] == doctest::Approx(17.5).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(38.5).epsilon(1e-15));

  CHECK_THROWS(linear_forward({1.0, 2.0, 3.0}, w, b));
  CHECK_THROWS(linear_forward(x, w, {1.0}));
}

TEST_CASE("mse reproduces hand values and rejects bad input") {
  CHECK(mse({0.0, 0.0}, {2.0, 0.0}) == 2.0);
  CHECK(mse({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0}) == 0.0);
  CHECK(mse({1.0, -1.0}, {-1.0, 1.0}) == 4.0);
  CHECK_THROWS(mse({1.0}, {1.0, 2.0}));
  CHECK_THROWS(mse({}, {}));
}

TEST_CASE("finite_diff_grad recovers the gradient of a quadratic") {
  // Central differences are exact for quadratics up to roundoff.
  const Vec c = {1.5, -2.0, 0.25};
  auto f = [&](const Vec& p) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += c[i] * p[i] * p[i];
    return s;
  };
  const Vec p = {0.3, -1.2, 2.0};
  const Vec g = finite_diff_grad(f, p);
  Vec expected(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) expected[i] = 2.0 * c[i] * p[i];
  CHECK(max_rel_error(g, expected) < 1e-9);
}

TEST_CASE("sgd_step applies p - lr*g without touching its inputs") {
  const Vec p = {1.0};
  const Vec g = {0.5};
  const Vec p2 = sgd_step(p, g, 0.01);
  CHECK(p2[0] == 0.995);
  CHECK(p[0] == 1.0);

  Mat mp(1, 2, 2.0);
  Mat mg(1, 2, 1.0);
  const Mat mp2 = sgd_step(mp, mg, 0.5);
  CHECK(mp2(0, 0) == 1.5);
  CHECK(mp2(0, 1) == 1.5);
  CHECK(mp(0, 0) == 2.0);
}

TEST_CASE("max_rel_error ignores coordinates below the noise floor") {
  CHECK(max_rel_error({1.0, 2.0}, {1.0, 2.0}) == 0.0);
  CHECK(max_rel_error({1.0}, {1.1}) ==
        doctest::Approx((1.1 - 1.0) / 1.1).epsilon(1e-12));
  // Both magnitudes under the floor: the coordinate is skipped entirely.
  CHECK(max_rel_error({1e-12, 1.0}, {-1e-12, 1.0}) == 0.0);
  // One side above the floor still counts.
  CHECK(max_rel_error({1e-12, 1.0}, {1e-2, 1.0}) > 0.9);
}

TEST_CASE("derive_seed separates streams and stays frozen") {
  // Pinned values: every report in the project is reproducible byte-for-byte
  // from a seed, which makes the seed-splitting function part of the file
  // format contract. Do not change these without bumping all formats.
  CHECK(derive_seed(42, "stream") == 7126464186516641662ULL);
  CHECK(derive_seed(42, "stream", 1, 0) == 6691860758334248815ULL);
  CHECK(derive_seed(0, "", 0, 0) == 2558736989570252433ULL);

  CHECK(derive_seed(42, "a") != derive_seed(42, "b"));
  CHECK(derive_seed(42, "a") != derive_seed(43, "a"));
  CHECK(derive_seed(42, "a", 0) != derive_seed(42, "a", 1));
  CHECK(derive_seed(42, "a", 0, 0) != derive_seed(42, "a", 0, 1));
  CHECK(derive_seed(7, "tag", 3, 9) == derive_seed(7, "tag", 3, 9));
}

TEST_CASE("bounded_uniform covers the range without bias artifacts") {
  std::mt19937_64 rng(123);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 10000; ++i) {
    const std::uint64_t v = bounded_uniform(rng, 7);
    REQUIRE(v < 7);
    ++hits[static_cast<std::size_t>(v)];
  }
  for (int h : hits) CHECK(h > 1000);  // fair coin leaves ~1429 per bucket

  for (int i = 0; i < 100; ++i) CHECK(bounded_uniform(rng, 1) == 0);
  CHECK_THROWS(bounded_uniform(rng, 0));
}

TEST_CASE("uniform_unit lands in [0,1) with the right mean") {
  std::mt19937_64 rng(7);
  double sum = 0.0;
  double lo = 1.0;
  double hi = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = uniform_unit(rng);
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  CHECK(std::abs(sum / n - 0.5) < 0.01);
  CHECK(lo < 0.001);
  CHECK(hi > 0.999);
}

TEST_CASE("standard_normal has unit moments") {
  std::mt19937_64 rng(11);
  double sum = 0.0;
  double sq = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double x = standard_normal(rng);
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("shuffle_in_place permutes deterministically") {
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[static_cast<std::size_t>(i)] = i;
  std::vector<int> a = v;
  std::vector<int> b = v;
  std::mt19937_64 r1(99);
  std::mt19937_64 r2(99);
  std::mt19937_64 r3(100);
  shuffle_in_place(a, r1);
  shuffle_in_place(b, r2);
  CHECK(a == b);

  std::vector<int> c = v;
  shuffle_in_place(c, r3);
  CHECK(c != a);  // 50! orderings; collision would indicate a broken driver

  std::vector<int> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == v);
}

TEST_CASE("all_finite flags NaN and infinity") {
  CHECK(all_finite(Vec{1.0, -2.0, 0.0}));
  CHECK_FALSE(all_finite(Vec{1.0, std::numeric_limits<double>::quiet_NaN()}));
  CHECK_FALSE(all_finite(Vec{std::numeric_limits<double>::infinity()}));
  Mat m(2, 2, 1.0);
  CHECK(all_finite(m));
  m(1, 1) = -std::numeric_limits<double>::infinity();
  CHECK_FALSE(all_finite(m));
}
