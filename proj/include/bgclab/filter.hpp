#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "bgclab/do_state.hpp"
#include "bgclab/gmm.hpp"
#include "bgclab/grid.hpp"
#include "bgclab/rng.hpp"

namespace bgclab {

// Bilinear interpolation footprint on cell centres: up to four cells.
struct ObsStencil {
  int cell[4] = {-1, -1, -1, -1};
  double w[4] = {0, 0, 0, 0};
};

struct ObservationBatch {
  double time = 0.0;
  int tracer = 0;  // index of the observed tracer in the general model
  std::vector<ObsStencil> stencil;
  Eigen::VectorXd values;
  Eigen::VectorXd noise_var;  // diag(R), one entry per observation
};

// Builds the interpolation footprint at (x, z). Weights over solid cells are
// dropped and the remainder renormalized to sum to 1. Empty result when the
// point lies outside the domain or its containing cell is solid.
std::optional<ObsStencil> make_stencil(const Domain& dom, double x, double z);

double apply_stencil(const ObsStencil& s, const Eigen::ArrayXXd& field);

struct FilterOptions {
  int k_max = 15;        // BIC search ceiling
  EmOptions em;
  double jitter_rel = 1e-12;  // innovation-covariance jitter on factorization failure
};

struct UpdateReport {
  double time = 0.0;
  int n_obs = 0;
  int k_selected = 0;     // BIC winner
  int k_effective = 0;    // posterior components with weight > 1e-3
  double bic = 0.0;
  int em_iterations = 0;
  double innovation_pre = 0.0;   // ||y - H(mean)|| entering the update
  double innovation_post = 0.0;  // same norm after the mean shift
  double max_weight = 0.0;       // largest posterior component weight
  int jittered = 0;
  int forced_k1 = 0;
  std::vector<double> weights;   // posterior component weights
};

// Joint Bayesian update of parameter deviations and coefficient samples from
// one batch of linear observations of a single tracer: EM+BIC mixture fit on
// the augmented samples, conjugate per-component update in the reduced
// subspace, mean-field shift, posterior resampling, exact recentring.
UpdateReport assimilate(DOState& state, ParamEnsemble& params, const ObservationBatch& obs,
                        const FilterOptions& opts, Rng& rng);

// Conjugate Bayes update of a Gaussian mixture under y = Hx + noise with
// independent noise variances: per-component Kalman means/covariances,
// weights rescaled by each component's marginal likelihood of y.
GaussianMixture gmm_observe(const GaussianMixture& prior, const Eigen::MatrixXd& H,
                            const Eigen::VectorXd& noise_var, const Eigen::VectorXd& y,
                            double jitter_rel = 1e-12, int* jittered = nullptr);

// Fraction of samples above 1/2 — the posterior probability that a gated
// structural term is present (binary parameters are kept continuous).
double presence_probability(const Eigen::VectorXd& samples_column);

}  // namespace bgclab
