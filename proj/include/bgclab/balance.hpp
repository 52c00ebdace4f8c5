#pragma once

#include <Eigen/Dense>
#include <vector>

#include "bgclab/bgc.hpp"
#include "bgclab/do_state.hpp"
#include "bgclab/grid.hpp"
#include "bgclab/model_space.hpp"
#include "bgclab/rng.hpp"

namespace bgclab {

// Total-biomass profile: linear in depth, 10 mmol N m^-3 at the surface to
// 30 mmol N m^-3 at the bottom (non-dimensional 1/3 to 1).
struct BiomassProfile {
  double surface_nd = 1.0 / 3.0;
  double bottom_nd = 1.0;
  double eval(double z, double lz) const {
    return bottom_nd + (surface_nd - bottom_nd) * (z / lz);
  }
};

struct EquilibriumOptions {
  double newton_tol = 1e-11;   // infinity-norm of the constrained system
  double accept_tol = 1e-8;    // verification bound on the raw reaction rates
  int max_iter = 80;
  int multistarts = 5;         // random starts beyond warm start and deep branch
  double interior = 1e-6;      // coexistence-branch preference threshold
};

// Solves the zero-rate system at one depth with the first rate equation
// replaced by the constraint sum(phi) = T (the conservation identity makes
// the raw system rank-deficient by one). Damped Newton with a
// Levenberg-Marquardt fallback; multiple starts; among admissible roots
// prefers all-components-interior ones with maximal zooplankton. Returns
// false when no admissible root is found.
bool equilibrium_at(ModelId model, const BioParams& p, const double* alpha,
                    const double* beta, const HatBasis* basis, const Eigen::VectorXd* gamma,
                    double growth, double T, const Eigen::VectorXd* warm, Rng& rng,
                    const EquilibriumOptions& opts, Eigen::VectorXd& out);

// Equilibrium tracer profile over all grid depths, solved bottom-up with warm
// starts. Returns an empty matrix when any depth fails.
Eigen::MatrixXd equilibrium_profile(ModelId model, const BioParams& p, const double* alpha,
                                    const double* beta, const HatBasis* basis,
                                    const Eigen::VectorXd* gamma, const GridSpec& grid,
                                    const BiomassProfile& biomass, Rng& rng,
                                    const EquilibriumOptions& opts = {});

struct InitStats {
  int svd_rank = 0;        // numerical rank actually retained
  bool randomized = false; // sketched decomposition path taken
  int modes_requested = 0;
};

// Compresses an ensemble of realized tracer fields (one vector of per-tracer
// fields per sample) into a DOState: mean = ensemble mean, modes = leading
// left singular vectors of the sigma-normalized mean-removed ensemble under
// the fluid-volume inner product, coefficients = exact projections. The
// coefficient sample covariance is diagonal by construction and the
// coefficient sample mean is recentred to exactly zero.
DOState init_do_from_ensemble(const Domain& dom, ModelId model,
                              const std::vector<std::vector<Eigen::ArrayXXd>>& fields,
                              int n_modes, const Eigen::VectorXd& sigma_nd,
                              InitStats* stats = nullptr);

}  // namespace bgclab
