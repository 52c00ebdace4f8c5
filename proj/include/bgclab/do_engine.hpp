#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "bgclab/do_state.hpp"
#include "bgclab/flow.hpp"
#include "bgclab/model_space.hpp"
#include "bgclab/rng.hpp"

namespace bgclab {

struct EngineOptions {
  double diffusivity = 0.0;  // tracer eddy diffusivity
  bool tvd = true;           // false: first-order upwind (linear operator)
  bool rk4_coeff = true;     // false: forward-Euler coefficient update
  double cfl_max = 0.9;
  double cov_floor_rel = 1e-10;  // eigenvalue floor of C_YY, relative to trace/n_modes
  double recenter_tol = 1e-3;    // |mean(Y_i)| > tol*std(Y_i) triggers recentring
  double rank_tol = 1e-12;       // relative Gram eigenvalue below which a mode is degenerate
  bool check_extrema = true;     // no-new-extrema guard on mean advection
  double extrema_tol = 1e-10;
  std::uint64_t mode_fill_seed = 0xD0;  // replacement modes for degenerate directions
};

struct StepDiag {
  double cfl = 0.0;
  double orth_drift_entry = 0.0;  // max |<m_i,m_j> - delta_ij| entering the step
  double orth_drift_exit = 0.0;   // after reorthonormalization
  int recentered = 0;             // coefficient-mean recentring events
  int modes_replaced = 0;         // degenerate directions replaced
  std::int64_t clamp_count = 0;   // expansion-argument clamps (Monte-Carlo term)
  double extrema_excess = 0.0;    // worst advection overshoot on the mean
  int negative_cells = 0;         // fluid cells with a negative mean tracer
};

struct ReorthDiag {
  double drift_before = 0.0;
  double drift_after = 0.0;
  int modes_replaced = 0;
};

// Explicit flux-limited advection tendency -div(v*phi) for one cell-centred
// field; fluxes vanish through wall faces, open boundaries are zero-gradient.
void advect_field(const Eigen::ArrayXXd& phi, const FlowState& flow, const Domain& dom,
                  bool tvd, Eigen::ArrayXXd& out);

// Time stepper for the reduced-order uncertain tracer system coupled to a
// prescribed flow: forward-Euler mean/mode updates with a projected mode
// tendency, an RK4 coefficient substep with mean and modes frozen, first-order
// closure of the reaction terms about the means, and a per-sample Monte-Carlo
// treatment of the mortality-expansion term.
class DOEngine {
 public:
  DOEngine(const Domain& dom, ModelId model, const BioParams& base, const HatBasis* basis,
           const EngineOptions& opts, double dt);
  ~DOEngine();
  DOEngine(const DOEngine&) = delete;
  DOEngine& operator=(const DOEngine&) = delete;

  StepDiag advance(DOState& state, const ParamEnsemble& params, const FlowState& flow);

  // Single-realization step sharing the same advection, diffusion, light and
  // reaction code paths; used for truth runs and collapsed-uncertainty checks.
  void deterministic_step(std::vector<Eigen::ArrayXXd>& tracers, const BioParams& p,
                          const double* alpha, const double* beta,
                          const Eigen::VectorXd* gamma, const FlowState& flow,
                          StepDiag* diag = nullptr);

  // Restores mode orthonormality exactly (a linear reparametrization that
  // preserves every reconstructed sample); degenerate directions are replaced
  // by fresh orthonormalized fields with zero coefficients.
  ReorthDiag reorthonormalize(DOState& state) const;

  // Mean and pointwise standard-deviation fields implied by (modes, coeff).
  void moments(const DOState& state, std::vector<Eigen::ArrayXXd>& mean_out,
               std::vector<Eigen::ArrayXXd>& std_out) const;

  InnerProduct inner(const DOState& state) const { return InnerProduct(*dom_, state.sigma_nd); }
  const Domain& domain() const { return *dom_; }
  double dt() const { return dt_; }
  double growth_at(int k) const { return growth_z_[k]; }
  ModelId model() const { return model_; }
  const BioParams& base_params() const { return base_; }
  const HatBasis* basis() const { return basis_; }
  const EngineOptions& options() const { return opts_; }

 private:
  struct Impl;
  const Domain* dom_;
  ModelId model_;
  BioParams base_;
  const HatBasis* basis_;
  EngineOptions opts_;
  double dt_;
  std::vector<double> growth_z_;  // light-limited growth per grid row
  std::unique_ptr<Impl> impl_;
};

}  // namespace bgclab
