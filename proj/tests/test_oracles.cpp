#include "doctest.h"

#include <cmath>

#include "whnn/oracles.hpp"
#include "whnn/rng.hpp"

using namespace whnn;

TEST_CASE("w2_1d basic cases") {
  std::vector<double> a{0.4, -1.0, 2.2};
  CHECK(w2_1d(a, a) == 0.0);

  std::vector<double> p{0.0}, q{3.0};
  CHECK(w2_1d(p, q) == doctest::Approx(3.0));

  std::vector<double> u{0, 1}, v{1, 2};
  CHECK(w2_1d(u, v) == doctest::Approx(1.0));
  CHECK(w2_1d_exhaustive(u, v) == doctest::Approx(1.0));

  CHECK_THROWS(w2_1d(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}));
}

TEST_CASE("sorted matching equals the exhaustive assignment minimum") {
  Rng rng(101);
  for (int trial = 0; trial < 1000; ++trial) {
    int n = 1 + static_cast<int>(rng.uniform_int(6));
    std::vector<double> a(n), b(n);
    for (double& x : a) x = rng.uniform(-5, 5);
    for (double& x : b) x = rng.uniform(-5, 5);
    double fast = w2_1d(a, b);
    double slow = w2_1d_exhaustive(a, b);
    CHECK(std::abs(fast - slow) < 1e-12);
  }
}

TEST_CASE("w2_1d satisfies the triangle inequality") {
  Rng rng(103);
  for (int trial = 0; trial < 300; ++trial) {
    int n = 2 + static_cast<int>(rng.uniform_int(7));
    std::vector<double> a(n), b(n), c(n);
    for (double& x : a) x = rng.uniform(-3, 3);
    for (double& x : b) x = rng.uniform(-3, 3);
    for (double& x : c) x = rng.uniform(-3, 3);
    CHECK(w2_1d(a, c) <= w2_1d(a, b) + w2_1d(b, c) + 1e-9);
  }
}

TEST_CASE("sliced oracle: identity, 1D translation, Monte Carlo stability") {
  Rng rng(107);
  SUBCASE("identical sets have distance zero") {
    std::vector<double> pts(20 * 3);
    for (double& x : pts) x = rng.uniform(-2, 2);
    for (int l : {1, 8, 64})
      CHECK(sliced_w2(pts, pts, 20, 3, l, 9) == doctest::Approx(0.0));
  }
  SUBCASE("1D translation reduces to |t|") {
    double t = 1.37;
    std::vector<double> a(12), b(12);
    for (int i = 0; i < 12; ++i) {
      a[i] = rng.uniform(-1, 1);
      b[i] = a[i] + t;
    }
    CHECK(sliced_w2(a, b, 12, 1, 50, 4) == doctest::Approx(t).epsilon(1e-12));
  }
  SUBCASE("estimate stabilises: rerun std below 2% of the mean at l=2000") {
    int n = 32, d = 2;
    std::vector<double> a(n * d), b(n * d);
    for (double& x : a) x = rng.normal();
    for (int i = 0; i < n; ++i) {
      b[i * d] = 1.5 + 0.5 * rng.normal();
      b[i * d + 1] = -0.5 + 2.0 * rng.normal();
    }
    std::vector<double> est;
    for (uint64_t seed = 0; seed < 10; ++seed) est.push_back(sliced_w2(a, b, n, d, 2000, seed));
    double mean = 0;
    for (double e : est) mean += e;
    mean /= est.size();
    double var = 0;
    for (double e : est) var += (e - mean) * (e - mean);
    double sd = std::sqrt(var / (est.size() - 1));
    CHECK(sd / mean < 0.02);
  }
}
