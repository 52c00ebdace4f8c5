#include "bgclab/balance.hpp"

#include <cmath>
#include <stdexcept>

namespace bgclab {

namespace {

// Constrained residual: row 0 is the total-biomass constraint, the remaining
// rows are raw reaction rates (conservation makes the dropped rate redundant).
void constrained_system(ModelId model, const BioParams& p, const double* alpha,
                        const double* beta, const HatBasis* basis,
                        const Eigen::VectorXd* gamma, double growth, double T,
                        std::span<const ParamId> no_theta, const Eigen::VectorXd& x,
                        Eigen::VectorXd& F, Eigen::MatrixXd* J) {
  const int nt = (int)x.size();
  thread_local ReactionEval ev;
  reaction_eval(model, x.data(), growth, p, alpha, beta, no_theta, ev);
  if (basis && gamma) {
    double df = 0.0;
    double f = expand_f(*basis, *gamma, x(zoo_index(model)), &df, nullptr);
    add_zoo_loss(model, f, df, ev.rate.data(), &ev.jac_state);
  }
  F.resize(nt);
  F(0) = x.sum() - T;
  F.tail(nt - 1) = ev.rate.tail(nt - 1);
  if (J) {
    J->resize(nt, nt);
    J->row(0).setOnes();
    J->bottomRows(nt - 1) = ev.jac_state.bottomRows(nt - 1);
  }
}

// Raw reaction-rate residual used for final verification of a candidate root.
double raw_residual(ModelId model, const BioParams& p, const double* alpha,
                    const double* beta, const HatBasis* basis, const Eigen::VectorXd* gamma,
                    double growth, const Eigen::VectorXd& x) {
  const int nt = (int)x.size();
  std::vector<double> rate(nt);
  reaction_rates(model, x.data(), growth, p, alpha, beta, rate.data());
  if (basis && gamma) {
    double f = expand_f(*basis, *gamma, x(zoo_index(model)), nullptr, nullptr);
    add_zoo_loss(model, f, 0.0, rate.data(), nullptr);
  }
  double r = 0.0;
  for (int t = 0; t < nt; ++t) r = std::max(r, std::abs(rate[t]));
  return r;
}

// Damped Newton from one start; true when it lands on an admissible root.
bool newton_from(ModelId model, const BioParams& p, const double* alpha, const double* beta,
                 const HatBasis* basis, const Eigen::VectorXd* gamma, double growth, double T,
                 const EquilibriumOptions& opts, Eigen::VectorXd x, Eigen::VectorXd& out) {
  const int nt = (int)x.size();
  const std::span<const ParamId> no_theta;
  Eigen::VectorXd F, Ft, xt(nt);
  Eigen::MatrixXd J;
  constrained_system(model, p, alpha, beta, basis, gamma, growth, T, no_theta, x, F, &J);
  double fn = F.lpNorm<Eigen::Infinity>();

  for (int it = 0; it < opts.max_iter; ++it) {
    if (fn <= opts.newton_tol) break;
    Eigen::VectorXd step = J.partialPivLu().solve(-F);
    if (!step.allFinite()) {
      // Levenberg-Marquardt fallback for (near-)singular Jacobians.
      double mu = 1e-10 * std::max(1.0, J.cwiseAbs().maxCoeff());
      for (int tries = 0; tries < 8 && !step.allFinite(); ++tries, mu *= 100.0) {
        Eigen::MatrixXd A = J.transpose() * J;
        A.diagonal().array() += mu;
        step = A.ldlt().solve(-J.transpose() * F);
      }
      if (!step.allFinite()) return false;
    }
    double t = 1.0;
    bool accepted = false;
    for (; t >= 1.0 / 16384.0; t *= 0.5) {
      xt = x + t * step;
      // keep the iterate away from the uptake singularity at phi = -Ku
      if (xt.minCoeff() < -0.5 * p.half_sat) continue;
      constrained_system(model, p, alpha, beta, basis, gamma, growth, T, no_theta, xt, Ft,
                         nullptr);
      if (!Ft.allFinite()) continue;
      if (Ft.lpNorm<Eigen::Infinity>() <= (1.0 - 1e-4 * t) * fn) {
        accepted = true;
        break;
      }
    }
    if (!accepted) return false;
    x = xt;
    constrained_system(model, p, alpha, beta, basis, gamma, growth, T, no_theta, x, F, &J);
    fn = F.lpNorm<Eigen::Infinity>();
  }
  if (fn > opts.newton_tol) return false;
  if (x.minCoeff() < -1e-10) return false;
  // Clamp arithmetic-noise negatives, preserving the biomass constraint.
  double deficit = 0.0;
  for (int t = 0; t < nt; ++t)
    if (x(t) < 0.0) {
      deficit += x(t);
      x(t) = 0.0;
    }
  x(0) += deficit;
  if (x(0) < 0.0) return false;
  // Absorb the last rounding of the linear constraint row so the total
  // biomass matches T to the precision of a single summation.
  x(0) += T - x.sum();
  if (x(0) < 0.0) return false;
  if (raw_residual(model, p, alpha, beta, basis, gamma, growth, x) > opts.accept_tol)
    return false;
  out = x;
  return true;
}

}  // namespace

bool equilibrium_at(ModelId model, const BioParams& p, const double* alpha,
                    const double* beta, const HatBasis* basis, const Eigen::VectorXd* gamma,
                    double growth, double T, const Eigen::VectorXd* warm, Rng& rng,
                    const EquilibriumOptions& opts, Eigen::VectorXd& out) {
  const int nt = n_tracers(model);
  const int zi = zoo_index(model);

  std::vector<Eigen::VectorXd> starts;
  if (warm && warm->size() == nt) starts.push_back(*warm);
  Eigen::VectorXd deep = Eigen::VectorXd::Zero(nt);
  deep(0) = T;
  starts.push_back(deep);
  for (int s = 0; s < opts.multistarts; ++s) {
    Eigen::VectorXd w(nt);
    for (int t = 0; t < nt; ++t) w(t) = rng.uniform(0.0, 1.0);
    starts.push_back(T * w / w.sum());
  }

  bool have = false, have_interior = false;
  Eigen::VectorXd best;
  for (const auto& s0 : starts) {
    Eigen::VectorXd root;
    if (!newton_from(model, p, alpha, beta, basis, gamma, growth, T, opts, s0, root))
      continue;
    const bool interior = root.minCoeff() >= opts.interior;
    const bool better =
        !have || (interior && !have_interior) ||
        (interior == have_interior && root(zi) > best(zi));
    if (better) {
      best = root;
      have = true;
      have_interior = interior;
    }
  }
  if (have) out = best;
  return have;
}

Eigen::MatrixXd equilibrium_profile(ModelId model, const BioParams& p, const double* alpha,
                                    const double* beta, const HatBasis* basis,
                                    const Eigen::VectorXd* gamma, const GridSpec& grid,
                                    const BiomassProfile& biomass, Rng& rng,
                                    const EquilibriumOptions& opts) {
  const int nt = n_tracers(model);
  Eigen::MatrixXd profile(grid.nz, nt);
  Eigen::VectorXd warm, root;
  for (int k = 0; k < grid.nz; ++k) {  // bottom-up: light increases smoothly
    const double growth = light_limited_growth(p, grid.zc(k) - grid.lz);
    const double T = biomass.eval(grid.zc(k), grid.lz);
    const bool ok = equilibrium_at(model, p, alpha, beta, basis, gamma, growth, T,
                                   k > 0 ? &warm : nullptr, rng, opts, root);
    if (!ok) return Eigen::MatrixXd();
    profile.row(k) = root.transpose();
    warm = root;
  }
  return profile;
}

DOState init_do_from_ensemble(const Domain& dom, ModelId model,
                              const std::vector<std::vector<Eigen::ArrayXXd>>& fields,
                              int n_modes, const Eigen::VectorXd& sigma_nd,
                              InitStats* stats) {
  const GridSpec& g = dom.grid;
  const int nr = (int)fields.size();
  const int nt = n_tracers(model);
  const int nc = g.ncells();
  const std::ptrdiff_t M = (std::ptrdiff_t)nt * nc;
  if (nr < 2) throw std::invalid_argument("init: need at least two samples");
  if (n_modes >= nr) throw std::invalid_argument("init: n_modes must be below n_samples");

  DOState st;
  st.model = model;
  st.n_samples = nr;
  st.sigma_nd = sigma_nd;

  st.mean.assign(nt, Eigen::ArrayXXd::Zero(g.nx, g.nz));
  for (int r = 0; r < nr; ++r)
    for (int t = 0; t < nt; ++t) st.mean[t] += fields[r][t];
  for (int t = 0; t < nt; ++t) st.mean[t] /= nr;

  InnerProduct ip(dom, sigma_nd);
  Eigen::VectorXd sqw = ip.weights().cwiseSqrt();
  Eigen::MatrixXd B(M, nr);  // sqrt-weighted mean-removed ensemble
  for (int r = 0; r < nr; ++r)
    for (int t = 0; t < nt; ++t) {
      Eigen::Map<const Eigen::VectorXd> f(fields[r][t].data(), nc);
      Eigen::Map<const Eigen::VectorXd> m(st.mean[t].data(), nc);
      B.col(r).segment((std::ptrdiff_t)t * nc, nc) =
          (f - m).cwiseProduct(sqw.segment((std::ptrdiff_t)t * nc, nc));
    }

  Eigen::MatrixXd U;          // M x rank, Euclidean-orthonormal
  Eigen::VectorXd sv;         // singular values
  const bool randomized = nr > 600;
  if (!randomized) {
    Eigen::MatrixXd G = B.transpose() * B;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
    // eigenvalues ascending; take from the top. The relative cut must sit
    // well above the eigensolver noise floor (~eps * lmax) or the trailing
    // "modes" are rounding noise with arbitrary norms; the absolute cut
    // discards spread that is zero in the sigma-normalized metric.
    const int avail = (int)es.eigenvalues().size();
    const double lmax = std::max(es.eigenvalues()(avail - 1), 0.0);
    std::vector<int> take;
    for (int q = avail - 1; q >= 0 && (int)take.size() < n_modes; --q) {
      if (es.eigenvalues()(q) > 1e-13 * lmax && es.eigenvalues()(q) > 1e-24)
        take.push_back(q);
    }
    const int rank = (int)take.size();
    U.resize(M, rank);
    sv.resize(rank);
    for (int j = 0; j < rank; ++j) {
      sv(j) = std::sqrt(es.eigenvalues()(take[j]));
      U.col(j) = B * es.eigenvectors().col(take[j]) / sv(j);
    }
  } else {
    const int p = std::min(n_modes + 20, nr);
    Rng orng = Rng::substream(0xB0B0, (std::uint64_t)nr * 1000003ull + (std::uint64_t)n_modes);
    Eigen::MatrixXd Om(nr, p);
    for (int r = 0; r < nr; ++r)
      for (int c = 0; c < p; ++c) Om(r, c) = orng.normal();
    Eigen::MatrixXd Y = B * Om;
    for (int pw = 0; pw < 2; ++pw) Y = B * (B.transpose() * Y);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(Y);
    Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(M, p);
    Eigen::MatrixXd C = Q.transpose() * B;  // p x nr
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(C, Eigen::ComputeThinU);
    const double smax = svd.singularValues()(0);
    int rank = 0;
    while (rank < n_modes && rank < (int)svd.singularValues().size() &&
           svd.singularValues()(rank) > 1e-7 * smax &&
           svd.singularValues()(rank) > 1e-12)
      ++rank;
    U = Q * svd.matrixU().leftCols(rank);
    sv = svd.singularValues().head(rank);
  }
  const int rank = (int)sv.size();
  if (stats) {
    stats->svd_rank = rank;
    stats->randomized = randomized;
    stats->modes_requested = n_modes;
  }

  st.n_modes = rank;
  st.modes.resize(M, rank);
  for (std::ptrdiff_t e = 0; e < M; ++e) {
    const double s = sqw(e);
    for (int j = 0; j < rank; ++j) st.modes(e, j) = s > 0.0 ? U(e, j) / s : 0.0;
  }
  st.coeff = B.transpose() * U;  // exact projections; covariance diagonal

  // Recentre the residual coefficient mean (roundoff-level) into the mean.
  Eigen::RowVectorXd ybar = st.coeff.colwise().mean();
  st.coeff.rowwise() -= ybar;
  Eigen::VectorXd shift = st.modes * ybar.transpose();
  for (int t = 0; t < nt; ++t)
    st.mean[t] +=
        Eigen::Map<const Eigen::ArrayXXd>(shift.data() + (std::ptrdiff_t)t * nc, g.nx, g.nz);
  return st;
}

}  // namespace bgclab
