#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "bgclab/rng.hpp"

namespace bgclab {

// Piecewise-linear hat functions on n_nodes equally spaced nodes over
// [lo, hi]. They form a partition of unity, so an expansion with coefficients
// gamma interpolates the node values linearly.
struct HatBasis {
  double lo = 0.0;
  double hi = 0.3;
  int n_nodes = 11;

  double spacing() const { return (hi - lo) / (n_nodes - 1); }
  double node(int k) const { return lo + k * spacing(); }
};

// Values of all hat functions at z (clamped to [lo, hi]; clamp_count is
// incremented when clamping happened). At most two entries are nonzero.
void basis_eval(const HatBasis& b, double z, Eigen::VectorXd& psi, std::int64_t* clamp_count);

// F(z) = sum_k gamma_k * Psi_k(z), with the argument clamped to the basis
// support. d_out (optional) receives dF/dz (zero outside the support).
double expand_f(const HatBasis& b, const Eigen::VectorXd& gamma, double z,
                double* d_out, std::int64_t* clamp_count);

// Draws n coefficient vectors with nodes iid uniform on [g_lo, g_hi],
// rejecting draws whose largest |second difference| exceeds smooth_bound
// (eliminates highly fluctuating candidate functions). pin_first forces the
// first node to zero. Returns an n x n_nodes matrix.
Eigen::MatrixXd sample_expansion_prior(const HatBasis& b, double g_lo, double g_hi,
                                       double smooth_bound, bool pin_first, int n, Rng& rng);

// n draws from the two-point prior {0, 1} with equal probability.
Eigen::VectorXd sample_binary_prior(int n, Rng& rng);

}  // namespace bgclab
