#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <memory>

#include "bgclab/grid.hpp"

namespace bgclab {

struct FlowConfig {
  double u_inlet = 17.28;   // non-dimensional inflow speed
  double reynolds = 1.0;    // based on inflow speed and ridge height
  double cfl_max = 0.9;     // advective CFL guard, |u|dt/dx + |w|dt/dz
  double poisson_tol = 1e-10;

  double viscosity() const { return u_inlet / reynolds; }
};

struct FlowState {
  Eigen::ArrayXXd u;  // (nx+1) x nz, vertical faces
  Eigen::ArrayXXd w;  // nx x (nz+1), horizontal faces
  Eigen::ArrayXXd p;  // nx x nz, cell centres
  double t = 0.0;
};

struct FlowDiag {
  double cfl = 0.0;
  double max_divergence = 0.0;
  double poisson_residual = 0.0;
  double kinetic_energy = 0.0;
};

// Incompressible solver on the masked staggered grid: explicit flux-limited
// momentum advection, implicit viscosity, incremental pressure projection.
// Inlet u is prescribed, the outlet is zero-gradient with a fixed pressure
// datum, lids are free-slip and impermeable, and the ridge boundary is no-slip
// through mirrored one-layer ghost values. All linear systems are factored
// once per (domain, dt) pair.
class FlowSolver {
 public:
  FlowSolver(const Domain& dom, const FlowConfig& cfg, double dt);
  ~FlowSolver();
  FlowSolver(const FlowSolver&) = delete;
  FlowSolver& operator=(const FlowSolver&) = delete;

  // Uniform inflow projected to a divergence-free field satisfying all BCs.
  FlowState initial_state() const;

  // Advances by dt. Throws on CFL violation, pressure-solve failure, or a
  // post-projection divergence above the contract threshold.
  FlowDiag step(FlowState& s) const;

  double dt() const { return dt_; }
  const Domain& domain() const { return *dom_; }
  const FlowConfig& config() const { return cfg_; }

  double max_divergence(const FlowState& s) const;
  double kinetic_energy(const FlowState& s) const;
  double cfl_number(const FlowState& s) const;

 private:
  struct Impl;
  const Domain* dom_;
  FlowConfig cfg_;
  double dt_;
  std::unique_ptr<Impl> impl_;

  void project(FlowState& s, FlowDiag* diag) const;
};

}  // namespace bgclab
