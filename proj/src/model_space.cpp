#include "bgclab/model_space.hpp"

#include <stdexcept>

namespace bgclab {

namespace {
inline double clamp_arg(const HatBasis& b, double z, std::int64_t* clamp_count) {
  if (z < b.lo) {
    if (clamp_count) ++*clamp_count;
    return b.lo;
  }
  if (z > b.hi) {
    if (clamp_count) ++*clamp_count;
    return b.hi;
  }
  return z;
}

// Index of the interval containing z and the weight of its right node.
inline void locate(const HatBasis& b, double z, int& k, double& w) {
  double s = (z - b.lo) / b.spacing();
  k = (int)s;
  if (k >= b.n_nodes - 1) k = b.n_nodes - 2;
  w = s - k;
}
}  // namespace

void basis_eval(const HatBasis& b, double z, Eigen::VectorXd& psi, std::int64_t* clamp_count) {
  psi.setZero(b.n_nodes);
  double zc = clamp_arg(b, z, clamp_count);
  int k;
  double w;
  locate(b, zc, k, w);
  psi(k) = 1.0 - w;
  psi(k + 1) = w;
}

double expand_f(const HatBasis& b, const Eigen::VectorXd& gamma, double z,
                double* d_out, std::int64_t* clamp_count) {
  if (gamma.size() != b.n_nodes) throw std::invalid_argument("expand_f: coefficient count");
  bool inside = z >= b.lo && z <= b.hi;
  double zc = clamp_arg(b, z, clamp_count);
  int k;
  double w;
  locate(b, zc, k, w);
  if (d_out) *d_out = inside ? (gamma(k + 1) - gamma(k)) / b.spacing() : 0.0;
  return (1.0 - w) * gamma(k) + w * gamma(k + 1);
}

Eigen::MatrixXd sample_expansion_prior(const HatBasis& b, double g_lo, double g_hi,
                                       double smooth_bound, bool pin_first, int n, Rng& rng) {
  Eigen::MatrixXd out(n, b.n_nodes);
  Eigen::VectorXd g(b.n_nodes);
  long long attempts = 0;
  for (int r = 0; r < n; ++r) {
    for (;;) {
      // Declare the bound infeasible once the observed acceptance rate of the
      // smoothness rejection drops below 1e-4.
      if (++attempts > 20000 && (double)(r + 1) / (double)attempts < 1e-4)
        throw std::runtime_error(
            "expansion prior: smoothness bound " + std::to_string(smooth_bound) +
            " rejects more than 99.99% of draws; acceptance " +
            std::to_string((double)(r + 1) / (double)attempts));
      for (int k = 0; k < b.n_nodes; ++k) g(k) = rng.uniform(g_lo, g_hi);
      if (pin_first) g(0) = 0.0;
      double worst = 0.0;
      for (int k = 1; k + 1 < b.n_nodes; ++k)
        worst = std::max(worst, std::abs(g(k - 1) - 2.0 * g(k) + g(k + 1)));
      if (worst <= smooth_bound) break;
    }
    out.row(r) = g.transpose();
  }
  return out;
}

Eigen::VectorXd sample_binary_prior(int n, Rng& rng) {
  Eigen::VectorXd v(n);
  for (int r = 0; r < n; ++r) v(r) = rng.uniform(0.0, 1.0) < 0.5 ? 0.0 : 1.0;
  return v;
}

}  // namespace bgclab
