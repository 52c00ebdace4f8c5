#pragma once

#include <algorithm>
#include <cmath>

namespace bgclab {

// Monotonized-central flux limiter for second-order upwind-biased fluxes.
inline double limiter_mc(double r) {
  return std::max(0.0, std::min({2.0 * r, 0.5 * (1.0 + r), 2.0}));
}

// Limited face value for flux vel*phi_face through a face between "up" (donor)
// and "down" (receiver), with "upup" one further cell upwind. have_upup=false
// degrades to first-order upwind (boundary / masked stencil).
inline double tvd_face_value(double phi_upup, double phi_up, double phi_down, bool have_upup) {
  double d = phi_down - phi_up;
  if (!have_upup || d == 0.0) return phi_up;
  double r = (phi_up - phi_upup) / d;
  return phi_up + 0.5 * limiter_mc(r) * d;
}

// First-order upwind face value; the linear scheme used where exact
// ensemble/subspace equivalence of advection is required.
inline double upwind_face_value(double phi_up) { return phi_up; }

}  // namespace bgclab
