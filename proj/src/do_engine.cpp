#include "bgclab/do_engine.hpp"

#include <cmath>
#include <stdexcept>

#include "bgclab/advect.hpp"

namespace bgclab {

InnerProduct::InnerProduct(const Domain& dom, const Eigen::VectorXd& sigma_nd) {
  const GridSpec& g = dom.grid;
  const int nt = (int)sigma_nd.size();
  const int nc = g.ncells();
  w_.setZero((std::ptrdiff_t)nt * nc);
  const double volw = dom.cell_volume() / dom.fluid_volume();
  for (int t = 0; t < nt; ++t) {
    if (!(sigma_nd(t) > 0.0))
      throw std::invalid_argument("inner product: tracer normalization scale must be positive");
    const double s = volw / (sigma_nd(t) * sigma_nd(t));
    for (int c = 0; c < nc; ++c)
      if (dom.cell[c] == Cell::fluid) w_((std::ptrdiff_t)t * nc + c) = s;
  }
}

void advect_field(const Eigen::ArrayXXd& phi, const FlowState& flow, const Domain& dom,
                  bool tvd, Eigen::ArrayXXd& out) {
  const GridSpec& g = dom.grid;
  const int nx = g.nx, nz = g.nz;
  const double dx = g.dx(), dz = g.dz();
  out.setZero(nx, nz);

  auto val = [&](int i, int k) {
    i = std::clamp(i, 0, nx - 1);
    k = std::clamp(k, 0, nz - 1);
    return phi(i, k);
  };
  auto genuine = [&](int i, int k) {
    return i >= 0 && i < nx && k >= 0 && k < nz && dom.is_fluid(i, k);
  };
  auto face_value = [&](double vel, double q_up, double q_dn, double q_uu, bool gen_uu) {
    if (!tvd) return q_up;
    return tvd_face_value(q_uu, q_up, q_dn, gen_uu);
  };

  for (int k = 0; k < nz; ++k)
    for (int i = 0; i <= nx; ++i) {
      if (dom.uface[dom.uidx(i, k)] == Face::wall) continue;
      const double vel = flow.u(i, k);
      if (vel == 0.0) continue;
      double f;
      if (vel >= 0.0)
        f = vel * face_value(vel, val(i - 1, k), val(i, k), val(i - 2, k), genuine(i - 2, k));
      else
        f = vel * face_value(vel, val(i, k), val(i - 1, k), val(i + 1, k), genuine(i + 1, k));
      if (i > 0 && dom.is_fluid(i - 1, k)) out(i - 1, k) -= f / dx;
      if (i < nx && dom.is_fluid(i, k)) out(i, k) += f / dx;
    }

  for (int k = 0; k <= nz; ++k)
    for (int i = 0; i < nx; ++i) {
      if (dom.wface[dom.widx(i, k)] == Face::wall) continue;
      const double vel = flow.w(i, k);
      if (vel == 0.0) continue;
      double f;
      if (vel >= 0.0)
        f = vel * face_value(vel, val(i, k - 1), val(i, k), val(i, k - 2), genuine(i, k - 2));
      else
        f = vel * face_value(vel, val(i, k), val(i, k - 1), val(i, k + 1), genuine(i, k + 1));
      if (k > 0 && dom.is_fluid(i, k - 1)) out(i, k - 1) -= f / dz;
      if (k < nz && dom.is_fluid(i, k)) out(i, k) += f / dz;
    }
}

struct DOEngine::Impl {
  std::vector<int> prow;  // fluid cell -> diffusion system row
  int np = 0;
  Eigen::SparseMatrix<double> Ad;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ld;
  bool has_diffusion = false;
  Rng fill_rng{0};
};

DOEngine::~DOEngine() = default;

DOEngine::DOEngine(const Domain& dom, ModelId model, const BioParams& base, const HatBasis* basis,
                   const EngineOptions& opts, double dt)
    : dom_(&dom), model_(model), base_(base), basis_(basis), opts_(opts), dt_(dt),
      impl_(new Impl) {
  const GridSpec& g = dom.grid;
  growth_z_.resize(g.nz);
  for (int k = 0; k < g.nz; ++k)
    growth_z_[k] = light_limited_growth(base, g.zc(k) - g.lz);

  impl_->fill_rng = Rng(opts.mode_fill_seed);

  if (opts.diffusivity > 0.0) {
    impl_->has_diffusion = true;
    impl_->prow.assign(g.ncells(), -1);
    for (int c = 0; c < g.ncells(); ++c)
      if (dom.cell[c] == Cell::fluid) impl_->prow[c] = impl_->np++;
    const double tx = opts.diffusivity * dt / (g.dx() * g.dx());
    const double tz = opts.diffusivity * dt / (g.dz() * g.dz());
    std::vector<Eigen::Triplet<double>> trip;
    for (int k = 0; k < g.nz; ++k)
      for (int i = 0; i < g.nx; ++i) {
        int r = impl_->prow[g.idx(i, k)];
        if (r < 0) continue;
        double diag = 1.0;
        auto couple = [&](int ii, int kk, double t) {
          if (ii < 0 || ii >= g.nx || kk < 0 || kk >= g.nz) return;  // zero-flux boundary
          int rn = impl_->prow[g.idx(ii, kk)];
          if (rn < 0) return;  // zero-flux at the ridge
          diag += t;
          trip.emplace_back(r, rn, -t);
        };
        couple(i - 1, k, tx);
        couple(i + 1, k, tx);
        couple(i, k - 1, tz);
        couple(i, k + 1, tz);
        trip.emplace_back(r, r, diag);
      }
    impl_->Ad.resize(impl_->np, impl_->np);
    impl_->Ad.setFromTriplets(trip.begin(), trip.end());
    impl_->ld.compute(impl_->Ad);
    if (impl_->ld.info() != Eigen::Success)
      throw std::runtime_error("tracer diffusion factorization failed");
  }
}

namespace {

void apply_diffusion(const Domain& dom, const std::vector<int>& prow,
                     const Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>& ld,
                     Eigen::ArrayXXd& f) {
  const GridSpec& g = dom.grid;
  Eigen::VectorXd b((std::ptrdiff_t)0);
  b.resize(ld.rows());
  for (int k = 0; k < g.nz; ++k)
    for (int i = 0; i < g.nx; ++i) {
      int r = prow[g.idx(i, k)];
      if (r >= 0) b(r) = f(i, k);
    }
  Eigen::VectorXd x = ld.solve(b);
  for (int k = 0; k < g.nz; ++k)
    for (int i = 0; i < g.nx; ++i) {
      int r = prow[g.idx(i, k)];
      if (r >= 0) f(i, k) = x(r);
    }
}

// Piecewise-linear expansion value from one row of node coefficients.
inline double expand_row(const HatBasis& b, const Eigen::MatrixXd& gam, int row, double z,
                         std::int64_t& clamps) {
  if (z < b.lo) {
    ++clamps;
    z = b.lo;
  } else if (z > b.hi) {
    ++clamps;
    z = b.hi;
  }
  double s = (z - b.lo) / b.spacing();
  int k = std::min((int)s, b.n_nodes - 2);
  double w = s - k;
  return (1.0 - w) * gam(row, k) + w * gam(row, k + 1);
}

}  // namespace

StepDiag DOEngine::advance(DOState& st, const ParamEnsemble& pe, const FlowState& flow) {
  const GridSpec& g = dom_->grid;
  const int nx = g.nx, nz = g.nz, nc = g.ncells();
  const int nt = n_tracers(model_);
  const int ns = st.n_modes;
  const int nr = st.n_samples;
  const int nth = pe.n_theta(), nal = pe.n_alpha(), nbe = pe.n_beta(), ng = pe.n_gamma();
  const std::ptrdiff_t M = (std::ptrdiff_t)nt * nc;
  StepDiag diag;

  if (st.modes.rows() != M || st.modes.cols() != ns || st.coeff.rows() != nr)
    throw std::invalid_argument("advance: inconsistent state dimensions");

  diag.cfl = flow.u.abs().maxCoeff() * dt_ / g.dx() + flow.w.abs().maxCoeff() * dt_ / g.dz();
  if (diag.cfl > opts_.cfl_max)
    throw std::runtime_error("tracer advection CFL " + std::to_string(diag.cfl) +
                             " exceeds limit " + std::to_string(opts_.cfl_max));

  InnerProduct ip(*dom_, st.sigma_nd);
  if (st.n_modes > 0) {
    Eigen::MatrixXd G0 = ip.gram(st.modes, st.modes);
    G0.diagonal().array() -= 1.0;
    diag.orth_drift_entry = G0.cwiseAbs().maxCoeff();
  }

  BioParams pm = base_;
  for (int n = 0; n < nth; ++n) pm.set(pe.theta_ids[n], pe.theta_mean(n));

  // Reaction terms linearized about the mean state and mean parameters.
  Eigen::VectorXd S0 = Eigen::VectorXd::Zero(M);
  Eigen::MatrixXd Jth = Eigen::MatrixXd::Zero(M, nth);
  Eigen::MatrixXd Jal = Eigen::MatrixXd::Zero(M, nal);
  Eigen::MatrixXd Jbe = Eigen::MatrixXd::Zero(M, nbe);
  std::vector<double> jstate((std::size_t)nc * nt * nt, 0.0);
  {
    ReactionEval ev;
    std::vector<double> phi_c(nt);
    for (int k = 0; k < nz; ++k)
      for (int i = 0; i < nx; ++i) {
        const int c = g.idx(i, k);
        if (dom_->cell[c] != Cell::fluid) continue;
        bool neg = false;
        for (int t = 0; t < nt; ++t) {
          phi_c[t] = st.mean[t](i, k);
          if (phi_c[t] < 0.0) neg = true;
        }
        if (neg) ++diag.negative_cells;
        reaction_eval(model_, phi_c.data(), growth_z_[k], pm,
                      nal ? pe.alpha_mean.data() : nullptr, nbe ? pe.beta_mean.data() : nullptr,
                      pe.theta_ids, ev);
        for (int t = 0; t < nt; ++t) {
          S0((std::ptrdiff_t)t * nc + c) = ev.rate(t);
          for (int n = 0; n < nth; ++n) Jth((std::ptrdiff_t)t * nc + c, n) = ev.jac_theta(t, n);
          for (int n = 0; n < nal; ++n) Jal((std::ptrdiff_t)t * nc + c, n) = ev.jac_alpha(t, n);
          for (int n = 0; n < nbe; ++n) Jbe((std::ptrdiff_t)t * nc + c, n) = ev.jac_beta(t, n);
          for (int u = 0; u < nt; ++u) jstate[((std::size_t)c * nt + t) * nt + u] = ev.jac_state(t, u);
        }
      }
  }

  // Monte-Carlo statistics of the mortality-expansion term: mean source,
  // coefficient cross-moments for the mode equation, and per-sample
  // projections for the coefficient equation.
  const bool mc = basis_ != nullptr && ng > 0;
  const int zi = zoo_index(model_);
  const int ri = recycle_index(model_);
  Eigen::VectorXd EF;                       // E[F] over samples, per cell
  Eigen::MatrixXd EYF;                      // ns x nc, E[Y_j F]
  Eigen::MatrixXd Dproj;                    // nc x ns: weighted (recycle - zoo) mode rows
  Eigen::MatrixXd gam_all;                  // per-sample node coefficients
  Eigen::VectorXd zmean_flat(nc);
  auto mc_projection = [&](const Eigen::MatrixXd& Y, bool accumulate_means,
                           Eigen::MatrixXd& P) {
    const int B = 512;
    P.resize(nr, ns);
    if (accumulate_means) {
      EF.setZero(nc);
      EYF.setZero(ns, nc);
    }
    Eigen::MatrixXd zrec, fblk;
    for (int r0 = 0; r0 < nr; r0 += B) {
      const int nb = std::min(B, nr - r0);
      zrec.noalias() = Y.middleRows(r0, nb) * st.modes.middleRows((std::ptrdiff_t)zi * nc, nc).transpose();
      zrec.rowwise() += zmean_flat.transpose();
      fblk.resize(nb, nc);
      for (int r = 0; r < nb; ++r)
        for (int c = 0; c < nc; ++c)
          fblk(r, c) = dom_->cell[c] == Cell::fluid
                           ? expand_row(*basis_, gam_all, r0 + r, zrec(r, c), diag.clamp_count)
                           : 0.0;
      if (accumulate_means) {
        EF += fblk.colwise().sum().transpose();
        EYF.noalias() += Y.middleRows(r0, nb).transpose() * fblk;
      }
      P.middleRows(r0, nb).noalias() = fblk * Dproj;
    }
    if (accumulate_means) {
      EF /= nr;
      EYF /= nr;
    }
    P.rowwise() -= P.colwise().mean();  // centre: project S~ - E[S~]
  };
  if (mc) {
    gam_all = pe.dgamma;
    gam_all.rowwise() += pe.gamma_mean.transpose();
    for (int c = 0; c < nc; ++c) zmean_flat(c) = st.mean[zi].data()[c];
    Dproj.resize(nc, ns);
    const auto& wv = ip.weights();
    for (int c = 0; c < nc; ++c)
      for (int m = 0; m < ns; ++m)
        Dproj(c, m) = wv((std::ptrdiff_t)ri * nc + c) * st.modes((std::ptrdiff_t)ri * nc + c, m) -
                      wv((std::ptrdiff_t)zi * nc + c) * st.modes((std::ptrdiff_t)zi * nc + c, m);
  }
  Eigen::MatrixXd Pmc0;
  if (mc) mc_projection(st.coeff, true, Pmc0);

  // Advection tendencies of mean and modes.
  std::vector<Eigen::ArrayXXd> adv_mean(nt);
  for (int t = 0; t < nt; ++t) advect_field(st.mean[t], flow, *dom_, opts_.tvd, adv_mean[t]);
  Eigen::MatrixXd Fmat(M, ns);
  {
    Eigen::ArrayXXd work;
    for (int m = 0; m < ns; ++m) {
      Eigen::VectorXd col = st.modes.col(m);
      for (int t = 0; t < nt; ++t) {
        auto fld = tracer_block(col, t, g);
        advect_field(fld, flow, *dom_, opts_.tvd, work);
        Fmat.col(m).segment((std::ptrdiff_t)t * nc, nc) =
            Eigen::Map<const Eigen::VectorXd>(work.data(), nc);
      }
    }
  }

  // No-new-extrema guard on the advection substep of the mean.
  if (opts_.check_extrema) {
    for (int t = 0; t < nt; ++t) {
      double lo = 1e300, hi = -1e300, lo2 = 1e300, hi2 = -1e300;
      for (int k = 0; k < nz; ++k)
        for (int i = 0; i < nx; ++i) {
          if (!dom_->is_fluid(i, k)) continue;
          double v0 = st.mean[t](i, k);
          double v1 = v0 + dt_ * adv_mean[t](i, k);
          lo = std::min(lo, v0);
          hi = std::max(hi, v0);
          lo2 = std::min(lo2, v1);
          hi2 = std::max(hi2, v1);
        }
      double scale = std::max(1.0, std::max(std::abs(lo), std::abs(hi)));
      double excess = std::max(lo - lo2, hi2 - hi) / scale;
      diag.extrema_excess = std::max(diag.extrema_excess, excess);
    }
    if (diag.extrema_excess > opts_.extrema_tol)
      throw std::runtime_error("advection created new extrema on the mean (excess " +
                               std::to_string(diag.extrema_excess) + ")");
  }

  // F_m := advection + linearized reaction applied to mode m.
  for (int k = 0; k < nz; ++k)
    for (int i = 0; i < nx; ++i) {
      const int c = g.idx(i, k);
      if (dom_->cell[c] != Cell::fluid) continue;
      const double* J = &jstate[(std::size_t)c * nt * nt];
      for (int m = 0; m < ns; ++m) {
        for (int t = 0; t < nt; ++t) {
          double acc = 0.0;
          for (int u = 0; u < nt; ++u)
            acc += J[(std::size_t)t * nt + u] * st.modes((std::ptrdiff_t)u * nc + c, m);
          Fmat((std::ptrdiff_t)t * nc + c, m) += acc;
        }
      }
    }

  const Eigen::MatrixXd Gc = ip.gram(st.modes, Fmat);  // <F_m, mode_i>
  const Eigen::MatrixXd Pth = ip.gram(st.modes, Jth);
  const Eigen::MatrixXd Pal = ip.gram(st.modes, Jal);
  const Eigen::MatrixXd Pbe = ip.gram(st.modes, Jbe);

  // Coefficient covariance with an eigenvalue floor, and its inverse.
  const double denom_n = nr > 1 ? (double)(nr - 1) : 1.0;
  Eigen::MatrixXd Cyy = st.coeff.transpose() * st.coeff / denom_n;
  Eigen::MatrixXd Cinv(ns, ns);
  if (ns > 0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Cyy);
    double floor_v = opts_.cov_floor_rel * std::max(Cyy.trace(), 1e-300) / ns;
    Eigen::VectorXd lam = es.eigenvalues().cwiseMax(floor_v);
    Cinv = es.eigenvectors() * lam.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
  }

  // Mode tendency: F_m plus parameter/expansion couplings, then projected off
  // the mode subspace to preserve the orthogonality condition.
  Eigen::MatrixXd Qmat = Fmat;
  if (nth > 0) {
    Eigen::MatrixXd W = Cinv * (st.coeff.transpose() * pe.dtheta / denom_n);  // ns x nth
    Qmat.noalias() += Jth * W.transpose();
  }
  if (nal > 0) {
    Eigen::MatrixXd W = Cinv * (st.coeff.transpose() * pe.dalpha / denom_n);
    Qmat.noalias() += Jal * W.transpose();
  }
  if (nbe > 0) {
    Eigen::MatrixXd W = Cinv * (st.coeff.transpose() * pe.dbeta / denom_n);
    Qmat.noalias() += Jbe * W.transpose();
  }
  if (mc) {
    Eigen::MatrixXd EYS = Eigen::MatrixXd::Zero(M, ns);
    EYS.middleRows((std::ptrdiff_t)ri * nc, nc) = EYF.transpose();
    EYS.middleRows((std::ptrdiff_t)zi * nc, nc) -= EYF.transpose();
    Qmat.noalias() += EYS * Cinv;
  }
  {
    Eigen::MatrixXd T = ip.gram(st.modes, Qmat);
    Qmat.noalias() -= st.modes * T;
  }

  // Mean source including the expansion's ensemble mean.
  Eigen::VectorXd Stot = S0;
  if (mc) {
    Stot.segment((std::ptrdiff_t)ri * nc, nc) += EF;
    Stot.segment((std::ptrdiff_t)zi * nc, nc) -= EF;
  }

  // Coefficient substep with mean/modes frozen. The linear couplings are
  // fixed matrices; the expansion projection is re-evaluated per stage.
  Eigen::MatrixXd Bconst = Eigen::MatrixXd::Zero(nr, ns);
  if (nth > 0) Bconst.noalias() += pe.dtheta * Pth.transpose();
  if (nal > 0) Bconst.noalias() += pe.dalpha * Pal.transpose();
  if (nbe > 0) Bconst.noalias() += pe.dbeta * Pbe.transpose();
  Eigen::MatrixXd Pstage;
  auto coeff_rhs = [&](const Eigen::MatrixXd& Y, bool first_stage) {
    Eigen::MatrixXd R = Y * Gc.transpose() + Bconst;
    if (mc) {
      if (first_stage)
        R += Pmc0;
      else {
        mc_projection(Y, false, Pstage);
        R += Pstage;
      }
    }
    return R;
  };
  Eigen::MatrixXd Ynew;
  if (opts_.rk4_coeff) {
    Eigen::MatrixXd k1 = coeff_rhs(st.coeff, true);
    Eigen::MatrixXd k2 = coeff_rhs(st.coeff + 0.5 * dt_ * k1, false);
    Eigen::MatrixXd k3 = coeff_rhs(st.coeff + 0.5 * dt_ * k2, false);
    Eigen::MatrixXd k4 = coeff_rhs(st.coeff + dt_ * k3, false);
    Ynew = st.coeff + (dt_ / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  } else {
    Ynew = st.coeff + dt_ * coeff_rhs(st.coeff, true);
  }

  // Apply the forward-Euler field updates.
  for (int t = 0; t < nt; ++t) {
    auto Sblock = Eigen::Map<const Eigen::ArrayXXd>(Stot.data() + (std::ptrdiff_t)t * nc, nx, nz);
    st.mean[t] += dt_ * (adv_mean[t] + Sblock);
  }
  st.modes += dt_ * Qmat;
  st.coeff = std::move(Ynew);

  if (impl_->has_diffusion) {
    for (int t = 0; t < nt; ++t) apply_diffusion(*dom_, impl_->prow, impl_->ld, st.mean[t]);
    for (int m = 0; m < ns; ++m) {
      Eigen::VectorXd col = st.modes.col(m);
      for (int t = 0; t < nt; ++t) {
        auto fld = tracer_block(col, t, g);
        Eigen::ArrayXXd f = fld;
        apply_diffusion(*dom_, impl_->prow, impl_->ld, f);
        fld = f;
      }
      st.modes.col(m) = col;
    }
  }

  ReorthDiag rd = reorthonormalize(st);
  diag.orth_drift_exit = rd.drift_after;
  diag.modes_replaced = rd.modes_replaced;

  // Recentre coefficients into the mean when their sample mean drifts.
  {
    Eigen::RowVectorXd ybar = st.coeff.colwise().mean();
    Eigen::RowVectorXd ystd =
        ((st.coeff.rowwise() - ybar).colwise().squaredNorm() / denom_n).cwiseSqrt();
    bool need = false;
    for (int m = 0; m < ns; ++m)
      if (std::abs(ybar(m)) > opts_.recenter_tol * std::max(ystd(m), 1e-300)) need = true;
    if (need) {
      Eigen::VectorXd shift = st.modes * ybar.transpose();
      for (int t = 0; t < nt; ++t)
        st.mean[t] += Eigen::Map<const Eigen::ArrayXXd>(shift.data() + (std::ptrdiff_t)t * nc,
                                                        nx, nz);
      st.coeff.rowwise() -= ybar;
      diag.recentered = 1;
    }
  }

  bool finite = st.modes.allFinite() && st.coeff.allFinite();
  for (int t = 0; t < nt && finite; ++t) finite = st.mean[t].allFinite();
  if (!finite) throw std::runtime_error("advance produced non-finite values");
  return diag;
}

void DOEngine::deterministic_step(std::vector<Eigen::ArrayXXd>& tracers, const BioParams& p,
                                  const double* alpha, const double* beta,
                                  const Eigen::VectorXd* gamma, const FlowState& flow,
                                  StepDiag* diag) {
  const GridSpec& g = dom_->grid;
  const int nt = n_tracers(model_);
  const int nc = g.ncells();
  if ((int)tracers.size() != nt) throw std::invalid_argument("deterministic_step: tracer count");

  double cfl = flow.u.abs().maxCoeff() * dt_ / g.dx() + flow.w.abs().maxCoeff() * dt_ / g.dz();
  if (cfl > opts_.cfl_max)
    throw std::runtime_error("tracer advection CFL " + std::to_string(cfl) + " exceeds limit");
  if (diag) diag->cfl = cfl;

  std::vector<Eigen::ArrayXXd> adv(nt);
  for (int t = 0; t < nt; ++t) advect_field(tracers[t], flow, *dom_, opts_.tvd, adv[t]);

  Eigen::VectorXd rates((std::ptrdiff_t)nt * nc);
  rates.setZero();
  std::vector<double> phi_c(nt), rate_c(nt);
  std::int64_t clamps = 0;
  int neg = 0;
  for (int k = 0; k < g.nz; ++k)
    for (int i = 0; i < g.nx; ++i) {
      const int c = g.idx(i, k);
      if (dom_->cell[c] != Cell::fluid) continue;
      bool any_neg = false;
      for (int t = 0; t < nt; ++t) {
        phi_c[t] = tracers[t](i, k);
        if (phi_c[t] < 0.0) any_neg = true;
      }
      if (any_neg) ++neg;
      reaction_rates(model_, phi_c.data(), growth_z_[k], p, alpha, beta, rate_c.data());
      if (gamma && basis_) {
        double f = expand_f(*basis_, *gamma, phi_c[zoo_index(model_)], nullptr, &clamps);
        add_zoo_loss(model_, f, 0.0, rate_c.data(), nullptr);
      }
      for (int t = 0; t < nt; ++t) rates((std::ptrdiff_t)t * nc + c) = rate_c[t];
    }
  if (diag) {
    diag->clamp_count += clamps;
    diag->negative_cells = neg;
  }

  for (int t = 0; t < nt; ++t) {
    auto Rblock = Eigen::Map<const Eigen::ArrayXXd>(rates.data() + (std::ptrdiff_t)t * nc,
                                                    g.nx, g.nz);
    tracers[t] += dt_ * (adv[t] + Rblock);
  }
  if (impl_->has_diffusion)
    for (int t = 0; t < nt; ++t) apply_diffusion(*dom_, impl_->prow, impl_->ld, tracers[t]);

  bool finite = true;
  for (int t = 0; t < nt && finite; ++t) finite = tracers[t].allFinite();
  if (!finite) throw std::runtime_error("deterministic step produced non-finite values");
}

ReorthDiag DOEngine::reorthonormalize(DOState& st) const {
  ReorthDiag rd;
  const GridSpec& g = dom_->grid;
  const int nt = n_tracers(model_);
  const int nc = g.ncells();
  const int ns = st.n_modes;
  InnerProduct ip(*dom_, st.sigma_nd);

  Eigen::MatrixXd G = ip.gram(st.modes, st.modes);
  {
    Eigen::MatrixXd D = G;
    D.diagonal().array() -= 1.0;
    rd.drift_before = ns > 0 ? D.cwiseAbs().maxCoeff() : 0.0;
  }
  if (ns == 0) return rd;  // a collapsed representation has nothing to rotate

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
  const Eigen::VectorXd& lam = es.eigenvalues();
  double lmax = std::max(lam.maxCoeff(), 1e-300);
  std::vector<int> keep;
  for (int i = 0; i < ns; ++i)
    if (lam(i) > opts_.rank_tol * lmax) keep.push_back(i);
  const int nk = (int)keep.size();

  Eigen::MatrixXd A(ns, nk), B(ns, nk);
  for (int j = 0; j < nk; ++j) {
    const double l = lam(keep[j]);
    A.col(j) = es.eigenvectors().col(keep[j]) / std::sqrt(l);
    B.col(j) = es.eigenvectors().col(keep[j]) * std::sqrt(l);
  }
  Eigen::MatrixXd kept_modes = st.modes * A;   // orthonormal span, reconstruction-preserving
  Eigen::MatrixXd kept_coeff = st.coeff * B;

  st.modes.leftCols(nk) = kept_modes;
  st.coeff.leftCols(nk) = kept_coeff;

  // Degenerate directions: replace with fresh orthonormal fields carrying no
  // variance so the expansion keeps its width without altering any sample.
  rd.modes_replaced = ns - nk;
  Rng& rng = impl_->fill_rng;
  for (int m = nk; m < ns; ++m) {
    Eigen::VectorXd v((std::ptrdiff_t)nt * nc);
    for (;;) {
      for (std::ptrdiff_t e = 0; e < v.size(); ++e)
        v(e) = ip.weights()(e) > 0.0 ? rng.normal() : 0.0;
      for (int pass = 0; pass < 2; ++pass)
        for (int j = 0; j < m; ++j) v -= ip.dot(st.modes.col(j), v) * st.modes.col(j);
      double nv = ip.norm(v);
      if (nv > 1e-8) {
        v /= nv;
        break;
      }
    }
    st.modes.col(m) = v;
    st.coeff.col(m).setZero();
  }

  Eigen::MatrixXd G2 = ip.gram(st.modes, st.modes);
  G2.diagonal().array() -= 1.0;
  rd.drift_after = ns > 0 ? G2.cwiseAbs().maxCoeff() : 0.0;
  return rd;
}

void DOEngine::moments(const DOState& st, std::vector<Eigen::ArrayXXd>& mean_out,
                       std::vector<Eigen::ArrayXXd>& std_out) const {
  const GridSpec& g = dom_->grid;
  const int nt = n_tracers(model_);
  const int nc = g.ncells();
  const double denom_n = st.n_samples > 1 ? (double)(st.n_samples - 1) : 1.0;
  Eigen::MatrixXd C = st.coeff.transpose() * st.coeff / denom_n;
  Eigen::VectorXd var = ((st.modes * C).cwiseProduct(st.modes)).rowwise().sum();
  mean_out = st.mean;
  std_out.assign(nt, Eigen::ArrayXXd::Zero(g.nx, g.nz));
  for (int t = 0; t < nt; ++t)
    std_out[t] = Eigen::Map<const Eigen::ArrayXXd>(var.data() + (std::ptrdiff_t)t * nc, g.nx,
                                                   g.nz)
                     .max(0.0)
                     .sqrt();
}

}  // namespace bgclab
