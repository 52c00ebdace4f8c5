#include "bgclab/flow.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "bgclab/advect.hpp"

namespace bgclab {

namespace {
constexpr double kDivergenceBound = 1e-8;
}

struct FlowSolver::Impl {
  // System-row maps; -1 marks pinned / excluded entries.
  std::vector<int> urow, wrow, prow;
  int nu = 0, nw = 0, np = 0;

  Eigen::SparseMatrix<double> Au, Aw, Ap;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> lu, lw, lp;
  Eigen::VectorXd bc_u;  // constant inlet Dirichlet contribution to the u RHS
};

FlowSolver::~FlowSolver() = default;

FlowSolver::FlowSolver(const Domain& dom, const FlowConfig& cfg, double dt)
    : dom_(&dom), cfg_(cfg), dt_(dt), impl_(new Impl) {
  const GridSpec& g = dom.grid;
  const int nx = g.nx, nz = g.nz;
  const double tx = 1.0 / (g.dx() * g.dx());
  const double tz = 1.0 / (g.dz() * g.dz());
  const double nu_dt = cfg.viscosity() * dt;
  Impl& im = *impl_;

  im.urow.assign((nx + 1) * nz, -1);
  for (int k = 0; k < nz; ++k)
    for (int i = 1; i < nx; ++i)
      if (dom.uface[dom.uidx(i, k)] == Face::interior) im.urow[dom.uidx(i, k)] = im.nu++;

  im.wrow.assign(nx * (nz + 1), -1);
  for (int k = 1; k < nz; ++k)
    for (int i = 0; i < nx; ++i)
      if (dom.wface[dom.widx(i, k)] == Face::interior) im.wrow[dom.widx(i, k)] = im.nw++;

  im.prow.assign(g.ncells(), -1);
  for (int k = 0; k < nz; ++k)
    for (int i = 0; i < nx; ++i)
      if (dom.is_fluid(i, k)) im.prow[g.idx(i, k)] = im.np++;

  // Implicit viscosity for u: (I + nu*dt*A)u = rhs. Dirichlet neighbours fold
  // into the RHS, zero-gradient (outlet) and free-slip (lids) neighbours drop.
  {
    std::vector<Eigen::Triplet<double>> trip;
    im.bc_u = Eigen::VectorXd::Zero(im.nu);
    for (int k = 0; k < nz; ++k)
      for (int i = 1; i < nx; ++i) {
        int r = im.urow[dom.uidx(i, k)];
        if (r < 0) continue;
        double diag = 1.0;
        auto couple = [&](int ii, int kk, double t) {
          if (kk < 0 || kk >= nz) return;  // free-slip lid: zero normal gradient
          if (ii >= nx) return;            // outlet: zero gradient
          Face f = dom.uface[dom.uidx(ii, kk)];
          if (f == Face::wall) {
            diag += nu_dt * t;  // no-slip value 0 at the interface face
          } else if (f == Face::inlet) {
            diag += nu_dt * t;
            im.bc_u(r) += nu_dt * t * cfg.u_inlet;
          } else {
            diag += nu_dt * t;
            trip.emplace_back(r, im.urow[dom.uidx(ii, kk)], -nu_dt * t);
          }
        };
        couple(i - 1, k, tx);
        couple(i + 1, k, tx);
        couple(i, k - 1, tz);
        couple(i, k + 1, tz);
        trip.emplace_back(r, r, diag);
      }
    im.Au.resize(im.nu, im.nu);
    im.Au.setFromTriplets(trip.begin(), trip.end());
    im.lu.compute(im.Au);
    if (im.lu.info() != Eigen::Success) throw std::runtime_error("flow: u-viscosity factorization failed");
  }

  {
    std::vector<Eigen::Triplet<double>> trip;
    for (int k = 1; k < nz; ++k)
      for (int i = 0; i < nx; ++i) {
        int r = im.wrow[dom.widx(i, k)];
        if (r < 0) continue;
        double diag = 1.0;
        auto couple = [&](int ii, int kk, double t) {
          if (ii >= nx) return;  // outlet: zero gradient
          if (ii < 0 || kk == 0 || kk == nz) {
            diag += nu_dt * t;  // Dirichlet 0 (inflow has no vertical component; lids)
            return;
          }
          Face f = dom.wface[dom.widx(ii, kk)];
          if (f != Face::interior) {
            diag += nu_dt * t;  // wall/lid value 0
          } else {
            diag += nu_dt * t;
            trip.emplace_back(r, im.wrow[dom.widx(ii, kk)], -nu_dt * t);
          }
        };
        couple(i - 1, k, tx);
        couple(i + 1, k, tx);
        couple(i, k - 1, tz);
        couple(i, k + 1, tz);
        trip.emplace_back(r, r, diag);
      }
    im.Aw.resize(im.nw, im.nw);
    im.Aw.setFromTriplets(trip.begin(), trip.end());
    im.lw.compute(im.Aw);
    if (im.lw.info() != Eigen::Success) throw std::runtime_error("flow: w-viscosity factorization failed");
  }

  // Pressure Poisson over fluid cells. Faces with prescribed velocity are
  // Neumann (no entry); the outlet face carries a zero-pressure datum.
  {
    std::vector<Eigen::Triplet<double>> trip;
    for (int k = 0; k < nz; ++k)
      for (int i = 0; i < nx; ++i) {
        int r = im.prow[g.idx(i, k)];
        if (r < 0) continue;
        double diag = 0.0;
        // east / west through u-faces
        auto px = [&](int iface, int inb) {
          Face f = dom.uface[dom.uidx(iface, k)];
          if (f == Face::wall || f == Face::inlet) return;
          if (f == Face::outlet) {
            diag += 2.0 * tx;  // ghost pressure mirrors to put the datum on the face
            return;
          }
          diag += tx;
          trip.emplace_back(r, im.prow[g.idx(inb, k)], -tx);
        };
        px(i, i - 1);
        px(i + 1, i + 1);
        auto pz = [&](int kface, int knb) {
          Face f = dom.wface[dom.widx(i, kface)];
          if (f != Face::interior) return;  // lid or wall: Neumann
          diag += tz;
          trip.emplace_back(r, im.prow[g.idx(i, knb)], -tz);
        };
        pz(k, k - 1);
        pz(k + 1, k + 1);
        trip.emplace_back(r, r, diag);
      }
    im.Ap.resize(im.np, im.np);
    im.Ap.setFromTriplets(trip.begin(), trip.end());
    im.lp.compute(im.Ap);
    if (im.lp.info() != Eigen::Success) throw std::runtime_error("flow: pressure factorization failed");
  }
}

FlowState FlowSolver::initial_state() const {
  const GridSpec& g = dom_->grid;
  FlowState s;
  s.u = Eigen::ArrayXXd::Zero(g.nx + 1, g.nz);
  s.w = Eigen::ArrayXXd::Zero(g.nx, g.nz + 1);
  s.p = Eigen::ArrayXXd::Zero(g.nx, g.nz);
  for (int k = 0; k < g.nz; ++k)
    for (int i = 0; i <= g.nx; ++i)
      if (dom_->uface[dom_->uidx(i, k)] != Face::wall) s.u(i, k) = cfg_.u_inlet;
  project(s, nullptr);
  return s;
}

double FlowSolver::cfl_number(const FlowState& s) const {
  const GridSpec& g = dom_->grid;
  double cu = s.u.abs().maxCoeff() * dt_ / g.dx();
  double cw = s.w.abs().maxCoeff() * dt_ / g.dz();
  return cu + cw;
}

double FlowSolver::max_divergence(const FlowState& s) const {
  const GridSpec& g = dom_->grid;
  double worst = 0.0;
  for (int k = 0; k < g.nz; ++k)
    for (int i = 0; i < g.nx; ++i) {
      if (!dom_->is_fluid(i, k)) continue;
      double d = (s.u(i + 1, k) - s.u(i, k)) / g.dx() + (s.w(i, k + 1) - s.w(i, k)) / g.dz();
      worst = std::max(worst, std::abs(d));
    }
  return worst;
}

double FlowSolver::kinetic_energy(const FlowState& s) const {
  const GridSpec& g = dom_->grid;
  double ke = 0.0;
  for (int k = 0; k < g.nz; ++k)
    for (int i = 0; i < g.nx; ++i) {
      if (!dom_->is_fluid(i, k)) continue;
      double uc = 0.5 * (s.u(i, k) + s.u(i + 1, k));
      double wc = 0.5 * (s.w(i, k) + s.w(i, k + 1));
      ke += 0.5 * (uc * uc + wc * wc);
    }
  return ke * dom_->cell_volume();
}

namespace {

// Stencil accessors with boundary semantics baked in. Pinned faces hold their
// boundary values in the arrays themselves.
struct Sampler {
  const Domain& d;
  const FlowState& s;
  double u_inlet;

  double u(int i, int k) const {
    const int nx = d.grid.nx, nz = d.grid.nz;
    if (k < 0) k = 0;
    if (k >= nz) k = nz - 1;  // free-slip lids
    if (i < 0) return u_inlet;
    if (i > nx) i = nx;  // zero-gradient outlet
    return s.u(i, k);
  }
  double w(int i, int k) const {
    const int nx = d.grid.nx, nz = d.grid.nz;
    if (i < 0) return 0.0;
    if (i >= nx) i = nx - 1;
    if (k < 0 || k > nz) return 0.0;
    return s.w(i, k);
  }
  bool genuine_u(int i, int k) const {
    const int nx = d.grid.nx, nz = d.grid.nz;
    if (i < 0 || i > nx || k < 0 || k >= nz) return false;
    return d.uface[d.uidx(i, k)] != Face::wall;
  }
  bool genuine_w(int i, int k) const {
    const int nx = d.grid.nx, nz = d.grid.nz;
    if (i < 0 || i >= nx || k < 0 || k > nz) return false;
    return d.wface[d.widx(i, k)] != Face::wall;
  }
};

inline double flux1d(double vel, double q_mm, double q_m, double q_p, double q_pp,
                     bool gen_mm, bool gen_pp) {
  // Flux through the face between q_m (left) and q_p (right).
  if (vel >= 0.0) return vel * tvd_face_value(q_mm, q_m, q_p, gen_mm);
  return vel * tvd_face_value(q_pp, q_p, q_m, gen_pp);
}

}  // namespace

FlowDiag FlowSolver::step(FlowState& s) const {
  const GridSpec& g = dom_->grid;
  const int nx = g.nx, nz = g.nz;
  const double dx = g.dx(), dz = g.dz();
  Impl& im = *impl_;
  FlowDiag diag;

  diag.cfl = cfl_number(s);
  if (diag.cfl > cfg_.cfl_max)
    throw std::runtime_error("flow: CFL " + std::to_string(diag.cfl) + " exceeds limit " +
                             std::to_string(cfg_.cfl_max) + " at t=" + std::to_string(s.t));

  Sampler sm{*dom_, s, cfg_.u_inlet};

  // Predictor RHS for u: explicit advection + old pressure gradient.
  Eigen::VectorXd rhs_u(im.nu);
  for (int k = 0; k < nz; ++k)
    for (int i = 1; i < nx; ++i) {
      int r = im.urow[dom_->uidx(i, k)];
      if (r < 0) continue;
      double fe = flux1d(0.5 * (sm.u(i, k) + sm.u(i + 1, k)), sm.u(i - 1, k), sm.u(i, k),
                         sm.u(i + 1, k), sm.u(i + 2, k), sm.genuine_u(i - 1, k),
                         sm.genuine_u(i + 2, k));
      double fw = flux1d(0.5 * (sm.u(i - 1, k) + sm.u(i, k)), sm.u(i - 2, k), sm.u(i - 1, k),
                         sm.u(i, k), sm.u(i + 1, k), sm.genuine_u(i - 2, k),
                         sm.genuine_u(i + 1, k));
      double fn = flux1d(0.5 * (sm.w(i - 1, k + 1) + sm.w(i, k + 1)), sm.u(i, k - 1), sm.u(i, k),
                         sm.u(i, k + 1), sm.u(i, k + 2), sm.genuine_u(i, k - 1),
                         sm.genuine_u(i, k + 2));
      double fs = flux1d(0.5 * (sm.w(i - 1, k) + sm.w(i, k)), sm.u(i, k - 2), sm.u(i, k - 1),
                         sm.u(i, k), sm.u(i, k + 1), sm.genuine_u(i, k - 2),
                         sm.genuine_u(i, k + 1));
      double adv = -(fe - fw) / dx - (fn - fs) / dz;
      double gp = (s.p(i, k) - s.p(i - 1, k)) / dx;
      rhs_u(r) = s.u(i, k) + dt_ * (adv - gp);
    }
  rhs_u += im.bc_u;
  Eigen::VectorXd ustar = im.lu.solve(rhs_u);

  Eigen::VectorXd rhs_w(im.nw);
  for (int k = 1; k < nz; ++k)
    for (int i = 0; i < nx; ++i) {
      int r = im.wrow[dom_->widx(i, k)];
      if (r < 0) continue;
      double fe = flux1d(0.5 * (sm.u(i + 1, k - 1) + sm.u(i + 1, k)), sm.w(i - 1, k), sm.w(i, k),
                         sm.w(i + 1, k), sm.w(i + 2, k), sm.genuine_w(i - 1, k),
                         sm.genuine_w(i + 2, k));
      double fw = flux1d(0.5 * (sm.u(i, k - 1) + sm.u(i, k)), sm.w(i - 2, k), sm.w(i - 1, k),
                         sm.w(i, k), sm.w(i + 1, k), sm.genuine_w(i - 2, k),
                         sm.genuine_w(i + 1, k));
      double fn = flux1d(0.5 * (sm.w(i, k) + sm.w(i, k + 1)), sm.w(i, k - 1), sm.w(i, k),
                         sm.w(i, k + 1), sm.w(i, k + 2), sm.genuine_w(i, k - 1),
                         sm.genuine_w(i, k + 2));
      double fs = flux1d(0.5 * (sm.w(i, k - 1) + sm.w(i, k)), sm.w(i, k - 2), sm.w(i, k - 1),
                         sm.w(i, k), sm.w(i, k + 1), sm.genuine_w(i, k - 2),
                         sm.genuine_w(i, k + 1));
      double adv = -(fe - fw) / dx - (fn - fs) / dz;
      double gp = (s.p(i, k) - s.p(i, k - 1)) / dz;
      rhs_w(r) = s.w(i, k) + dt_ * (adv - gp);
    }
  Eigen::VectorXd wstar = im.lw.solve(rhs_w);

  for (int k = 0; k < nz; ++k)
    for (int i = 1; i < nx; ++i) {
      int r = im.urow[dom_->uidx(i, k)];
      if (r >= 0) s.u(i, k) = ustar(r);
    }
  for (int k = 1; k < nz; ++k)
    for (int i = 0; i < nx; ++i) {
      int r = im.wrow[dom_->widx(i, k)];
      if (r >= 0) s.w(i, k) = wstar(r);
    }
  // Outlet predictor: zero gradient before the projection fixes the flux.
  for (int k = 0; k < nz; ++k)
    if (dom_->uface[dom_->uidx(nx, k)] == Face::outlet) s.u(nx, k) = s.u(nx - 1, k);

  project(s, &diag);
  s.t += dt_;
  diag.max_divergence = max_divergence(s);
  if (diag.max_divergence > kDivergenceBound)
    throw std::runtime_error("flow: post-projection divergence " +
                             std::to_string(diag.max_divergence) + " above bound");
  diag.kinetic_energy = kinetic_energy(s);
  return diag;
}

void FlowSolver::project(FlowState& s, FlowDiag* diag) const {
  const GridSpec& g = dom_->grid;
  const int nx = g.nx, nz = g.nz;
  const double dx = g.dx(), dz = g.dz();
  Impl& im = *impl_;

  Eigen::VectorXd rhs(im.np);
  for (int k = 0; k < nz; ++k)
    for (int i = 0; i < nx; ++i) {
      int r = im.prow[g.idx(i, k)];
      if (r < 0) continue;
      double div = (s.u(i + 1, k) - s.u(i, k)) / dx + (s.w(i, k + 1) - s.w(i, k)) / dz;
      rhs(r) = -div / dt_;
    }
  Eigen::VectorXd pc = im.lp.solve(rhs);
  if (im.lp.info() != Eigen::Success) throw std::runtime_error("flow: pressure solve failed");
  double res = (im.Ap * pc - rhs).norm();
  double rel = res / std::max(rhs.norm(), 1e-300);
  if (diag) diag->poisson_residual = rel;
  if (rhs.norm() > 1e-12 && rel > cfg_.poisson_tol)
    throw std::runtime_error("flow: pressure residual " + std::to_string(rel) + " above tol");

  auto pcell = [&](int i, int k) -> double {
    int r = im.prow[g.idx(i, k)];
    return r < 0 ? 0.0 : pc(r);
  };

  for (int k = 0; k < nz; ++k)
    for (int i = 0; i <= nx; ++i) {
      Face f = dom_->uface[dom_->uidx(i, k)];
      if (f == Face::interior)
        s.u(i, k) -= dt_ * (pcell(i, k) - pcell(i - 1, k)) / dx;
      else if (f == Face::outlet)
        s.u(i, k) += 2.0 * dt_ * pcell(i - 1, k) / dx;
    }
  for (int k = 1; k < nz; ++k)
    for (int i = 0; i < nx; ++i)
      if (dom_->wface[dom_->widx(i, k)] == Face::interior)
        s.w(i, k) -= dt_ * (pcell(i, k) - pcell(i, k - 1)) / dz;

  for (int k = 0; k < nz; ++k)
    for (int i = 0; i < nx; ++i)
      if (dom_->is_fluid(i, k)) s.p(i, k) += pcell(i, k);
}

}  // namespace bgclab
