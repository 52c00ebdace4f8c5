#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "bgclab/rng.hpp"

namespace bgclab {

struct GaussianMixture {
  std::vector<double> weight;          // sums to 1
  std::vector<Eigen::VectorXd> mean;
  std::vector<Eigen::MatrixXd> cov;    // symmetric positive definite
  int k() const { return (int)weight.size(); }
  int dim() const { return weight.empty() ? 0 : (int)mean[0].size(); }
};

struct EmOptions {
  int max_iter = 500;
  double rel_tol = 1e-8;          // relative log-likelihood increase
  double cov_floor_rel = 1e-8;    // eigenvalue floor, relative to trace/dim
  double collapse_weight = 1e-6;  // below this a component is re-seeded/dropped
};

struct EmResult {
  GaussianMixture mix;
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  int reseeded = 0;   // collapsed components restarted at a far sample
  int dropped = 0;    // components removed after a failed re-seed
  int floored = 0;    // covariance eigenvalue floor applications
  std::vector<double> loglik_trace;  // per-iteration log-likelihood
};

// EM fit with greedy farthest-point seeding. Internally the columns are
// centred and scaled by their standard deviations for conditioning; the
// returned mixture lives in the original coordinates. Deterministic for a
// fixed (samples, K, seed).
EmResult fit_em(const Eigen::MatrixXd& samples, int K, std::uint64_t seed,
                const EmOptions& opts = {});

double gmm_loglik(const GaussianMixture& mix, const Eigen::MatrixXd& samples);

// Free parameter count entering the information criterion.
inline double gmm_free_params(int K, int d) {
  return (K - 1) + (double)K * d + (double)K * d * (d + 1) / 2.0;
}

struct BicSelection {
  int k_star = 1;
  double bic = 0.0;
  EmResult fit;                   // winning fit
  std::vector<double> bic_trace;  // BIC per candidate K, in search order
  bool forced_k1 = false;         // too few samples for a mixture
};

// Ascending search over K in [1, k_max]; stops early after three consecutive
// BIC increases; returns the argmin. Fewer than dim+2 samples force K*=1.
BicSelection select_k_bic(const Eigen::MatrixXd& samples, int k_max, std::uint64_t seed,
                          const EmOptions& opts = {});

// n independent draws; rows are samples. Component choice and the Gaussian
// draw consume the generator in a fixed order, so results are reproducible.
Eigen::MatrixXd sample_gmm(const GaussianMixture& mix, int n, Rng& rng);

}  // namespace bgclab
