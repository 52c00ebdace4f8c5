#include "bgclab/bgc.hpp"

#include <cmath>
#include <stdexcept>

namespace bgclab {

double BioParams::get(ParamId id) const {
  switch (id) {
    case ParamId::ivlev: return ivlev;
    case ParamId::p_mort: return p_mort;
    case ParamId::z_mort: return z_mort;
    case ParamId::z_mort_quad: return z_mort_quad;
    case ParamId::graze_max: return graze_max;
    case ParamId::remin: return remin;
    case ParamId::nitrif: return nitrif;
    case ParamId::half_sat: return half_sat;
    case ParamId::egestion: return egestion;
    case ParamId::nh4_inhib: return nh4_inhib;
  }
  throw std::logic_error("unknown ParamId");
}

void BioParams::set(ParamId id, double v) {
  switch (id) {
    case ParamId::ivlev: ivlev = v; return;
    case ParamId::p_mort: p_mort = v; return;
    case ParamId::z_mort: z_mort = v; return;
    case ParamId::z_mort_quad: z_mort_quad = v; return;
    case ParamId::graze_max: graze_max = v; return;
    case ParamId::remin: remin = v; return;
    case ParamId::nitrif: nitrif = v; return;
    case ParamId::half_sat: half_sat = v; return;
    case ParamId::egestion: egestion = v; return;
    case ParamId::nh4_inhib: nh4_inhib = v; return;
  }
  throw std::logic_error("unknown ParamId");
}

double light_limited_growth(const BioParams& p, double zeta) {
  double irr = p.pi_slope * p.surf_irrad * std::exp(p.attenuation * zeta);
  return p.vmax * irr / std::sqrt(p.vmax * p.vmax + irr * irr);
}

int n_tracers(ModelId m) {
  switch (m) {
    case ModelId::npz:
    case ModelId::npz_quadmort: return 3;
    case ModelId::npzd:
    case ModelId::npzd_unified: return 4;
    case ModelId::nnpzd:
    case ModelId::nnpzd_quadmort: return 5;
  }
  throw std::logic_error("unknown ModelId");
}

const std::vector<std::string>& tracer_names(ModelId m) {
  static const std::vector<std::string> npz3 = {"N", "P", "Z"};
  static const std::vector<std::string> npzd4 = {"N", "P", "Z", "D"};
  static const std::vector<std::string> nnpzd5 = {"NO3", "NH4", "P", "Z", "D"};
  switch (n_tracers(m)) {
    case 3: return npz3;
    case 4: return npzd4;
    default: return nnpzd5;
  }
}

int zoo_index(ModelId m) { return n_tracers(m) == 5 ? 3 : 2; }
int recycle_index(ModelId m) { return n_tracers(m) == 5 ? 1 : 0; }

int n_alpha(ModelId m) {
  return (m == ModelId::npz_quadmort || m == ModelId::nnpzd_quadmort) ? 1 : 0;
}
int n_beta(ModelId m) { return m == ModelId::npzd_unified ? 1 : 0; }

namespace {

// Ivlev grazing term rm*Z*(1-exp(-lambda*P)) and its partials.
struct Grazing {
  double gr, d_p, d_z, d_lambda, d_rm;
};
inline Grazing grazing(const BioParams& p, double P, double Z) {
  double e = std::exp(-p.ivlev * P);
  double iv = 1.0 - e;
  return {p.graze_max * Z * iv, p.graze_max * Z * p.ivlev * e, p.graze_max * iv,
          p.graze_max * Z * P * e, Z * iv};
}

// Michaelis-Menten uptake G*P*N/(N+ku) and its partials.
struct Uptake {
  double u, d_n, d_p, d_ku;
};
inline Uptake uptake(double G, double ku, double N, double P) {
  double den = N + ku;
  return {G * P * N / den, G * P * ku / (den * den), G * N / den,
          -G * P * N / (den * den)};
}

void eval_npz(bool quad, const double* phi, double G, const BioParams& p, const double* alpha,
              std::span<const ParamId> th, ReactionEval& out) {
  const double P = phi[1], Z = phi[2];
  Uptake up = uptake(G, p.half_sat, phi[0], P);
  Grazing gz = grazing(p, P, Z);
  const double a = quad ? alpha[0] : 0.0;
  const double q = a * p.z_mort_quad * Z * Z;
  const double dq_z = 2.0 * a * p.z_mort_quad * Z;
  const double eg = p.egestion;

  out.rate(0) = -up.u + p.p_mort * P + p.z_mort * Z + eg * gz.gr + q;
  out.rate(1) = up.u - p.p_mort * P - gz.gr;
  out.rate(2) = (1.0 - eg) * gz.gr - p.z_mort * Z - q;

  auto& J = out.jac_state;
  J.setZero();
  J(0, 0) = -up.d_n;
  J(0, 1) = -up.d_p + p.p_mort + eg * gz.d_p;
  J(0, 2) = p.z_mort + eg * gz.d_z + dq_z;
  J(1, 0) = up.d_n;
  J(1, 1) = up.d_p - p.p_mort - gz.d_p;
  J(1, 2) = -gz.d_z;
  J(2, 1) = (1.0 - eg) * gz.d_p;
  J(2, 2) = (1.0 - eg) * gz.d_z - p.z_mort - dq_z;

  out.jac_theta.setZero();
  for (int c = 0; c < (int)th.size(); ++c) {
    auto col = out.jac_theta.col(c);
    switch (th[c]) {
      case ParamId::ivlev:
        col << eg * gz.d_lambda, -gz.d_lambda, (1.0 - eg) * gz.d_lambda;
        break;
      case ParamId::p_mort:
        col << P, -P, 0.0;
        break;
      case ParamId::z_mort:
        col << Z, 0.0, -Z;
        break;
      case ParamId::z_mort_quad:
        col << a * Z * Z, 0.0, -a * Z * Z;
        break;
      case ParamId::graze_max:
        col << eg * gz.d_rm, -gz.d_rm, (1.0 - eg) * gz.d_rm;
        break;
      case ParamId::half_sat:
        col << -up.d_ku, up.d_ku, 0.0;
        break;
      case ParamId::egestion:
        col << gz.gr, 0.0, -gz.gr;
        break;
      default:
        break;  // parameter absent from this model
    }
  }

  if (quad) {
    out.jac_alpha(0, 0) = p.z_mort_quad * Z * Z;
    out.jac_alpha(1, 0) = 0.0;
    out.jac_alpha(2, 0) = -p.z_mort_quad * Z * Z;
  }
}

void eval_npzd(bool unified, const double* phi, double G, const BioParams& p, const double* beta,
               std::span<const ParamId> th, ReactionEval& out) {
  const double P = phi[1], Z = phi[2], D = phi[3];
  Uptake up = uptake(G, p.half_sat, phi[0], P);
  Grazing gz = grazing(p, P, Z);
  const double eg = p.egestion;

  auto& J = out.jac_state;
  J.setZero();
  out.jac_theta.setZero();

  if (!unified) {
    out.rate(0) = -up.u + p.remin * D + p.z_mort * Z;
    out.rate(1) = up.u - p.p_mort * P - gz.gr;
    out.rate(2) = (1.0 - eg) * gz.gr - p.z_mort * Z;
    out.rate(3) = eg * gz.gr + p.p_mort * P - p.remin * D;

    J(0, 0) = -up.d_n;
    J(0, 1) = -up.d_p;
    J(0, 2) = p.z_mort;
    J(0, 3) = p.remin;
    J(1, 0) = up.d_n;
    J(1, 1) = up.d_p - p.p_mort - gz.d_p;
    J(1, 2) = -gz.d_z;
    J(2, 1) = (1.0 - eg) * gz.d_p;
    J(2, 2) = (1.0 - eg) * gz.d_z - p.z_mort;
    J(3, 1) = eg * gz.d_p + p.p_mort;
    J(3, 2) = eg * gz.d_z;
    J(3, 3) = -p.remin;

    for (int c = 0; c < (int)th.size(); ++c) {
      auto col = out.jac_theta.col(c);
      switch (th[c]) {
        case ParamId::ivlev:
          col << 0.0, -gz.d_lambda, (1.0 - eg) * gz.d_lambda, eg * gz.d_lambda;
          break;
        case ParamId::p_mort:
          col << 0.0, -P, 0.0, P;
          break;
        case ParamId::z_mort:
          col << Z, 0.0, -Z, 0.0;
          break;
        case ParamId::graze_max:
          col << 0.0, -gz.d_rm, (1.0 - eg) * gz.d_rm, eg * gz.d_rm;
          break;
        case ParamId::remin:
          col << D, 0.0, 0.0, -D;
          break;
        case ParamId::half_sat:
          col << -up.d_ku, up.d_ku, 0.0, 0.0;
          break;
        case ParamId::egestion:
          col << 0.0, 0.0, -gz.gr, gz.gr;
          break;
        default:
          break;
      }
    }
    return;
  }

  // Unified formulation: a convex combination of the direct-recycling chain
  // (b=0) and the full detritus loop (b=1). Dead matter (egested grazing +
  // phytoplankton mortality) always leaves its source pool; b only routes it
  // through detritus versus straight back to the nutrient pool, so each
  // endpoint reproduces the corresponding candidate model exactly.
  const double b = beta[0];
  const double dead = p.p_mort * P + eg * gz.gr;
  out.rate(0) = -up.u + p.remin * D + p.z_mort * Z + (1.0 - b) * dead;
  out.rate(1) = up.u - p.p_mort * P - gz.gr;
  out.rate(2) = (1.0 - eg) * gz.gr - p.z_mort * Z;
  out.rate(3) = b * dead - p.remin * D;

  J(0, 0) = -up.d_n;
  J(0, 1) = -up.d_p + (1.0 - b) * (p.p_mort + eg * gz.d_p);
  J(0, 2) = p.z_mort + (1.0 - b) * eg * gz.d_z;
  J(0, 3) = p.remin;
  J(1, 0) = up.d_n;
  J(1, 1) = up.d_p - p.p_mort - gz.d_p;
  J(1, 2) = -gz.d_z;
  J(2, 1) = (1.0 - eg) * gz.d_p;
  J(2, 2) = (1.0 - eg) * gz.d_z - p.z_mort;
  J(3, 1) = b * (eg * gz.d_p + p.p_mort);
  J(3, 2) = b * eg * gz.d_z;
  J(3, 3) = -p.remin;

  for (int c = 0; c < (int)th.size(); ++c) {
    auto col = out.jac_theta.col(c);
    switch (th[c]) {
      case ParamId::ivlev:
        col << (1.0 - b) * eg * gz.d_lambda, -gz.d_lambda, (1.0 - eg) * gz.d_lambda,
            b * eg * gz.d_lambda;
        break;
      case ParamId::p_mort:
        col << (1.0 - b) * P, -P, 0.0, b * P;
        break;
      case ParamId::z_mort:
        col << Z, 0.0, -Z, 0.0;
        break;
      case ParamId::graze_max:
        col << (1.0 - b) * eg * gz.d_rm, -gz.d_rm, (1.0 - eg) * gz.d_rm, b * eg * gz.d_rm;
        break;
      case ParamId::remin:
        col << D, 0.0, 0.0, -D;
        break;
      case ParamId::half_sat:
        col << -up.d_ku, up.d_ku, 0.0, 0.0;
        break;
      case ParamId::egestion:
        col << (1.0 - b) * gz.gr, 0.0, -gz.gr, b * gz.gr;
        break;
      default:
        break;
    }
  }

  out.jac_beta(0, 0) = -dead;
  out.jac_beta(1, 0) = 0.0;
  out.jac_beta(2, 0) = 0.0;
  out.jac_beta(3, 0) = dead;
}

void eval_nnpzd(bool quad, const double* phi, double G, const BioParams& p, const double* alpha,
                std::span<const ParamId> th, ReactionEval& out) {
  const double NO3 = phi[0], NH4 = phi[1], P = phi[2], Z = phi[3], D = phi[4];
  const double eg = p.egestion;
  Grazing gz = grazing(p, P, Z);

  // Nitrate uptake is inhibited by ammonium; ammonium uptake is plain.
  const double den3 = NO3 + p.half_sat;
  const double den4 = NH4 + p.half_sat;
  const double inh = std::exp(-p.nh4_inhib * NH4);
  const double u3 = G * P * inh * NO3 / den3;
  const double u4 = G * P * NH4 / den4;
  const double u3_dno3 = G * P * inh * p.half_sat / (den3 * den3);
  const double u3_dnh4 = -p.nh4_inhib * u3;
  const double u3_dp = G * inh * NO3 / den3;
  const double u4_dnh4 = G * P * p.half_sat / (den4 * den4);
  const double u4_dp = G * NH4 / den4;
  const double u3_dku = -G * P * inh * NO3 / (den3 * den3);
  const double u4_dku = -G * P * NH4 / (den4 * den4);

  const double a = quad ? alpha[0] : 0.0;
  const double q = a * p.z_mort_quad * Z * Z;
  const double dq_z = 2.0 * a * p.z_mort_quad * Z;

  out.rate(0) = p.nitrif * NH4 - u3;
  out.rate(1) = -p.nitrif * NH4 + p.remin * D + p.z_mort * Z - u4 + q;
  out.rate(2) = u3 + u4 - p.p_mort * P - gz.gr;
  out.rate(3) = (1.0 - eg) * gz.gr - p.z_mort * Z - q;
  out.rate(4) = eg * gz.gr + p.p_mort * P - p.remin * D;

  auto& J = out.jac_state;
  J.setZero();
  J(0, 0) = -u3_dno3;
  J(0, 1) = p.nitrif - u3_dnh4;
  J(0, 2) = -u3_dp;
  J(1, 1) = -p.nitrif - u4_dnh4;
  J(1, 2) = -u4_dp;
  J(1, 3) = p.z_mort + dq_z;
  J(1, 4) = p.remin;
  J(2, 0) = u3_dno3;
  J(2, 1) = u3_dnh4 + u4_dnh4;
  J(2, 2) = u3_dp + u4_dp - p.p_mort - gz.d_p;
  J(2, 3) = -gz.d_z;
  J(3, 2) = (1.0 - eg) * gz.d_p;
  J(3, 3) = (1.0 - eg) * gz.d_z - p.z_mort - dq_z;
  J(4, 2) = eg * gz.d_p + p.p_mort;
  J(4, 3) = eg * gz.d_z;
  J(4, 4) = -p.remin;

  out.jac_theta.setZero();
  for (int c = 0; c < (int)th.size(); ++c) {
    auto col = out.jac_theta.col(c);
    switch (th[c]) {
      case ParamId::ivlev:
        col << 0.0, 0.0, -gz.d_lambda, (1.0 - eg) * gz.d_lambda, eg * gz.d_lambda;
        break;
      case ParamId::p_mort:
        col << 0.0, 0.0, -P, 0.0, P;
        break;
      case ParamId::z_mort:
        col << 0.0, Z, 0.0, -Z, 0.0;
        break;
      case ParamId::z_mort_quad:
        col << 0.0, a * Z * Z, 0.0, -a * Z * Z, 0.0;
        break;
      case ParamId::graze_max:
        col << 0.0, 0.0, -gz.d_rm, (1.0 - eg) * gz.d_rm, eg * gz.d_rm;
        break;
      case ParamId::remin:
        col << 0.0, D, 0.0, 0.0, -D;
        break;
      case ParamId::nitrif:
        col << NH4, -NH4, 0.0, 0.0, 0.0;
        break;
      case ParamId::half_sat:
        col << -u3_dku, -u4_dku, u3_dku + u4_dku, 0.0, 0.0;
        break;
      case ParamId::egestion:
        col << 0.0, 0.0, 0.0, -gz.gr, gz.gr;
        break;
      case ParamId::nh4_inhib:
        col << NH4 * u3, 0.0, -NH4 * u3, 0.0, 0.0;
        break;
    }
  }

  if (quad) {
    out.jac_alpha.setZero();
    out.jac_alpha(1, 0) = p.z_mort_quad * Z * Z;
    out.jac_alpha(3, 0) = -p.z_mort_quad * Z * Z;
  }
}

}  // namespace

void reaction_eval(ModelId m, const double* phi, double growth, const BioParams& p,
                   const double* alpha, const double* beta,
                   std::span<const ParamId> theta_ids, ReactionEval& out) {
  const int n = n_tracers(m);
  out.rate.resize(n);
  out.jac_state.resize(n, n);
  out.jac_theta.resize(n, (int)theta_ids.size());
  out.jac_alpha.resize(n, n_alpha(m));
  out.jac_beta.resize(n, n_beta(m));

  switch (m) {
    case ModelId::npz:
      eval_npz(false, phi, growth, p, nullptr, theta_ids, out);
      break;
    case ModelId::npz_quadmort:
      eval_npz(true, phi, growth, p, alpha, theta_ids, out);
      break;
    case ModelId::npzd:
      eval_npzd(false, phi, growth, p, nullptr, theta_ids, out);
      break;
    case ModelId::npzd_unified:
      eval_npzd(true, phi, growth, p, beta, theta_ids, out);
      break;
    case ModelId::nnpzd:
      eval_nnpzd(false, phi, growth, p, nullptr, theta_ids, out);
      break;
    case ModelId::nnpzd_quadmort:
      eval_nnpzd(true, phi, growth, p, alpha, theta_ids, out);
      break;
  }
}

void reaction_rates(ModelId m, const double* phi, double growth, const BioParams& p,
                    const double* alpha, const double* beta, double* rate) {
  switch (m) {
    case ModelId::npz:
    case ModelId::npz_quadmort: {
      const double P = phi[1], Z = phi[2];
      const double u = growth * P * phi[0] / (phi[0] + p.half_sat);
      const double gr = p.graze_max * Z * (1.0 - std::exp(-p.ivlev * P));
      const double a = (m == ModelId::npz_quadmort) ? alpha[0] : 0.0;
      const double q = a * p.z_mort_quad * Z * Z;
      rate[0] = -u + p.p_mort * P + p.z_mort * Z + p.egestion * gr + q;
      rate[1] = u - p.p_mort * P - gr;
      rate[2] = (1.0 - p.egestion) * gr - p.z_mort * Z - q;
      return;
    }
    case ModelId::npzd:
    case ModelId::npzd_unified: {
      const double P = phi[1], Z = phi[2], D = phi[3];
      const double u = growth * P * phi[0] / (phi[0] + p.half_sat);
      const double gr = p.graze_max * Z * (1.0 - std::exp(-p.ivlev * P));
      const double b = (m == ModelId::npzd_unified) ? beta[0] : 1.0;
      const double dead = p.p_mort * P + p.egestion * gr;
      rate[0] = -u + p.remin * D + p.z_mort * Z + (1.0 - b) * dead;
      rate[1] = u - p.p_mort * P - gr;
      rate[2] = (1.0 - p.egestion) * gr - p.z_mort * Z;
      rate[3] = b * dead - p.remin * D;
      return;
    }
    case ModelId::nnpzd:
    case ModelId::nnpzd_quadmort: {
      const double NO3 = phi[0], NH4 = phi[1], P = phi[2], Z = phi[3], D = phi[4];
      const double u3 =
          growth * P * std::exp(-p.nh4_inhib * NH4) * NO3 / (NO3 + p.half_sat);
      const double u4 = growth * P * NH4 / (NH4 + p.half_sat);
      const double gr = p.graze_max * Z * (1.0 - std::exp(-p.ivlev * P));
      const double a = (m == ModelId::nnpzd_quadmort) ? alpha[0] : 0.0;
      const double q = a * p.z_mort_quad * Z * Z;
      rate[0] = p.nitrif * NH4 - u3;
      rate[1] = -p.nitrif * NH4 + p.remin * D + p.z_mort * Z - u4 + q;
      rate[2] = u3 + u4 - p.p_mort * P - gr;
      rate[3] = (1.0 - p.egestion) * gr - p.z_mort * Z - q;
      rate[4] = p.egestion * gr + p.p_mort * P - p.remin * D;
      return;
    }
  }
}

void add_zoo_loss(ModelId m, double f, double dfdz, double* rate, Eigen::MatrixXd* jac_state) {
  const int zi = zoo_index(m), ri = recycle_index(m);
  rate[ri] += f;
  rate[zi] -= f;
  if (jac_state) {
    (*jac_state)(ri, zi) += dfdz;
    (*jac_state)(zi, zi) -= dfdz;
  }
}

}  // namespace bgclab
