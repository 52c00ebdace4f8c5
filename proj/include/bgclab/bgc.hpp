#pragma once

#include <Eigen/Dense>
#include <span>
#include <string>
#include <vector>

namespace bgclab {

// Plankton reaction networks of increasing complexity, plus the stochastic
// variants used for structural learning: quadratic zooplankton mortality
// gated by a presence parameter (alpha) and a detritus pathway gated by a
// complexity parameter (beta).
enum class ModelId {
  npz,
  npzd,
  nnpzd,
  npz_quadmort,
  npzd_unified,
  nnpzd_quadmort,
};

// Scalar reaction parameters that may be treated as uncertain. Each entry can
// be requested as a column of the parameter Jacobian.
enum class ParamId {
  ivlev,        // grazing saturation steepness (Lambda)
  p_mort,       // phytoplankton linear mortality (Xi)
  z_mort,       // zooplankton linear mortality (Gamma)
  z_mort_quad,  // zooplankton quadratic mortality coefficient
  graze_max,    // maximum grazing rate (Rm)
  remin,        // detritus remineralization (Phi)
  nitrif,       // ammonium -> nitrate conversion (Omega)
  half_sat,     // nutrient uptake half-saturation (Ku)
  egestion,     // egested fraction of grazing (gamma)
  nh4_inhib,    // ammonium inhibition of nitrate uptake (Psi)
};

// All values non-dimensional: concentrations scaled by 30 mmol N m^-3, time in
// days, length by 50 m.
struct BioParams {
  double vmax = 1.5;           // maximum light-saturated phyto growth rate
  double half_sat = 1.0 / 30.0;
  double p_mort = 0.1;
  double z_mort = 0.145;
  double z_mort_quad = 0.2;
  double graze_max = 0.52;
  double ivlev = 3.6;
  double egestion = 0.3;
  double remin = 1.03;
  double nitrif = 0.25;
  double nh4_inhib = 43.8;
  double pi_slope = 0.025;     // photosynthesis-irradiance slope
  double surf_irrad = 158.075;
  double attenuation = 3.35;   // light decay rate with depth

  double get(ParamId id) const;
  void set(ParamId id, double v);
};

// Light-limited growth rate at signed depth zeta = z - z_surface (<= 0):
// G = vmax * a*I / sqrt(vmax^2 + (a*I)^2), I = surf_irrad * exp(attenuation*zeta).
double light_limited_growth(const BioParams& p, double zeta);

int n_tracers(ModelId m);
const std::vector<std::string>& tracer_names(ModelId m);
int zoo_index(ModelId m);      // zooplankton slot
int recycle_index(ModelId m);  // pool fed by quadratic mortality / mortality expansions
int n_alpha(ModelId m);        // structural presence parameters
int n_beta(ModelId m);         // structural complexity parameters

struct ReactionEval {
  Eigen::VectorXd rate;       // n_tracers
  Eigen::MatrixXd jac_state;  // n_tracers x n_tracers
  Eigen::MatrixXd jac_theta;  // n_tracers x theta_ids.size()
  Eigen::MatrixXd jac_alpha;  // n_tracers x n_alpha
  Eigen::MatrixXd jac_beta;   // n_tracers x n_beta
};

// Net source rates only. growth is the local light-limited growth rate;
// alpha/beta may be null when the model has no such parameters.
void reaction_rates(ModelId m, const double* phi, double growth, const BioParams& p,
                    const double* alpha, const double* beta, double* rate);

// Rates plus analytic Jacobians with respect to the state, the requested theta
// columns, and the structural alpha/beta parameters.
void reaction_eval(ModelId m, const double* phi, double growth, const BioParams& p,
                   const double* alpha, const double* beta,
                   std::span<const ParamId> theta_ids, ReactionEval& out);

// Adds a mortality transfer f (with slope dfdz w.r.t. zooplankton) from the
// zooplankton pool into the model's recycling pool.
void add_zoo_loss(ModelId m, double f, double dfdz, double* rate, Eigen::MatrixXd* jac_state);

}  // namespace bgclab
