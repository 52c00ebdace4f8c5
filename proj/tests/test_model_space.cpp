#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "bgclab/model_space.hpp"
#include "bgclab/rng.hpp"

using namespace bgclab;

TEST_CASE("hat functions form a partition of unity with compact support") {
  HatBasis b;  // 11 nodes on [0, 0.3]
  Rng rng(11);
  Eigen::VectorXd psi(b.n_nodes);
  for (int it = 0; it < 300; ++it) {
    double z = rng.uniform(b.lo, b.hi);
    std::int64_t clamps = 0;
    basis_eval(b, z, psi, &clamps);
    CHECK(clamps == 0);
    CHECK(std::abs(psi.sum() - 1.0) <= 1e-15);
    CHECK(psi.minCoeff() >= 0.0);
    int nonzero = 0;
    for (int k = 0; k < b.n_nodes; ++k)
      if (psi(k) != 0.0) ++nonzero;
    CHECK(nonzero <= 2);
  }
  // Node evaluation is the Kronecker delta.
  for (int k = 0; k < b.n_nodes; ++k) {
    basis_eval(b, b.node(k), psi, nullptr);
    CHECK(psi(k) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(std::abs(psi.sum() - 1.0) <= 1e-15);
  }
}

TEST_CASE("expansion reproduces piecewise-linear interpolants exactly") {
  HatBasis b;
  Eigen::VectorXd gamma(b.n_nodes);
  for (int k = 0; k < b.n_nodes; ++k) gamma(k) = 0.2 * b.node(k) * b.node(k);

  // Node 5 sits exactly at z = 0.15.
  CHECK(expand_f(b, gamma, 0.15, nullptr, nullptr) == doctest::Approx(0.2 * 0.15 * 0.15));

  // Between nodes the expansion is the linear interpolant of the node values.
  Rng rng(5);
  for (int it = 0; it < 200; ++it) {
    double z = rng.uniform(b.lo, b.hi);
    int k = std::min((int)((z - b.lo) / b.spacing()), b.n_nodes - 2);
    double t = (z - b.node(k)) / b.spacing();
    double want = (1.0 - t) * gamma(k) + t * gamma(k + 1);
    double d = 0.0;
    CHECK(expand_f(b, gamma, z, &d, nullptr) == doctest::Approx(want).epsilon(1e-13));
    CHECK(d == doctest::Approx((gamma(k + 1) - gamma(k)) / b.spacing()).epsilon(1e-12));
  }
}

TEST_CASE("expansion arguments outside the support are clamped and counted") {
  HatBasis b;
  Eigen::VectorXd gamma = Eigen::VectorXd::LinSpaced(b.n_nodes, 0.01, 0.08);
  std::int64_t clamps = 0;
  double d = 99.0;
  CHECK(expand_f(b, gamma, -0.5, &d, &clamps) == doctest::Approx(gamma(0)));
  CHECK(d == 0.0);  // flat continuation outside the support
  CHECK(clamps == 1);
  CHECK(expand_f(b, gamma, 0.7, &d, &clamps) == doctest::Approx(gamma(b.n_nodes - 1)));
  CHECK(d == 0.0);
  CHECK(clamps == 2);
  CHECK(expand_f(b, gamma, 0.165, &d, &clamps) == doctest::Approx((gamma(5) + gamma(6)) / 2.0));
  CHECK(clamps == 2);  // interior evaluations leave the counter alone
}

TEST_CASE("expansion prior: support, pinning, and the smoothness rejection") {
  HatBasis b;
  Rng rng(2024);
  const double lo = 0.0, hi = 0.08, bound = 0.028;
  Eigen::MatrixXd G = sample_expansion_prior(b, lo, hi, bound, true, 300, rng);
  REQUIRE(G.rows() == 300);
  REQUIRE(G.cols() == b.n_nodes);
  CHECK(G.col(0).cwiseAbs().maxCoeff() == 0.0);  // pinned first node
  CHECK(G.minCoeff() >= lo);
  CHECK(G.maxCoeff() <= hi);
  for (int r = 0; r < G.rows(); ++r) {
    double worst = 0.0;
    for (int k = 1; k + 1 < b.n_nodes; ++k)
      worst = std::max(worst, std::abs(G(r, k + 1) - 2.0 * G(r, k) + G(r, k - 1)));
    CHECK(worst <= bound);
  }

  // Without pinning the first node is free.
  Eigen::MatrixXd H = sample_expansion_prior(b, lo, hi, bound, false, 200, rng);
  CHECK(H.col(0).maxCoeff() > 0.0);
}

TEST_CASE("expansion prior marginals are uniform when nothing is rejected") {
  HatBasis b;
  Rng rng(99);
  const int n = 10000;
  // A bound far above the largest possible second difference disables the
  // rejection entirely, so each node is an independent uniform draw.
  Eigen::MatrixXd G = sample_expansion_prior(b, 0.0, 0.08, 1e9, false, n, rng);
  std::vector<double> col((std::size_t)n);
  for (int r = 0; r < n; ++r) col[(std::size_t)r] = G(r, 5);
  std::sort(col.begin(), col.end());
  double dks = 0.0;
  for (int r = 0; r < n; ++r) {
    double F = col[(std::size_t)r] / 0.08;  // uniform CDF
    dks = std::max(dks, std::max(std::abs((r + 1.0) / n - F), std::abs((double)r / n - F)));
  }
  CHECK(dks < 0.0163);  // 1% Kolmogorov-Smirnov critical value at n = 10000
}

TEST_CASE("an unsatisfiable smoothness bound fails loudly instead of spinning") {
  HatBasis b;
  Rng rng(3);
  // Zero tolerated curvature over 11 independent uniform nodes has acceptance
  // probability zero; the sampler must abort with a diagnostic.
  CHECK_THROWS_AS(sample_expansion_prior(b, 0.0, 0.08, 0.0, false, 4, rng),
                  std::runtime_error);
}

TEST_CASE("two-point structural prior") {
  Rng rng(7);
  const int n = 4000;
  Eigen::VectorXd s = sample_binary_prior(n, rng);
  int ones = 0;
  for (int r = 0; r < n; ++r) {
    CHECK((s(r) == 0.0 || s(r) == 1.0));
    ones += s(r) == 1.0;
  }
  // Three-sigma band around the fair-coin mean.
  CHECK(std::abs(ones / (double)n - 0.5) < 3.0 * 0.5 / std::sqrt((double)n));
}
