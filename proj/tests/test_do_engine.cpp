#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "bgclab/balance.hpp"
#include "bgclab/do_engine.hpp"
#include "bgclab/do_state.hpp"
#include "bgclab/rng.hpp"

using namespace bgclab;

namespace {

Domain flat_domain(int nx, int nz, double lx, double lz) {
  GridSpec g;
  g.nx = nx;
  g.nz = nz;
  g.lx = lx;
  g.lz = lz;
  RidgeSpec none;
  none.height = 0.0;
  return build_domain(g, none);
}

BioParams inert() {
  BioParams p;
  p.vmax = 0.0;
  p.p_mort = 0.0;
  p.z_mort = 0.0;
  p.z_mort_quad = 0.0;
  p.graze_max = 0.0;
  p.remin = 0.0;
  p.nitrif = 0.0;
  return p;
}

ParamEnsemble empty_params(int nr) {
  ParamEnsemble pe;
  pe.dtheta.resize(nr, 0);
  pe.dalpha.resize(nr, 0);
  pe.dbeta.resize(nr, 0);
  pe.dgamma.resize(nr, 0);
  return pe;
}

Eigen::MatrixXd smooth_modes(const Domain& dom, int nt, int cols, unsigned seed) {
  const GridSpec& g = dom.grid;
  Eigen::MatrixXd M((std::ptrdiff_t)nt * g.ncells(), cols);
  Rng rng(seed);
  for (int c = 0; c < cols; ++c) {
    double a = rng.uniform(0.2, 1.0), b = rng.uniform(0.2, 1.0);
    for (int t = 0; t < nt; ++t)
      for (int k = 0; k < g.nz; ++k)
        for (int i = 0; i < g.nx; ++i)
          M((std::ptrdiff_t)t * g.ncells() + g.idx(i, k), c) =
              std::sin(a * i + 0.7 * t + c) + 0.3 * std::cos(b * k + c);
  }
  return M;
}

}  // namespace

TEST_CASE("normalized volume-averaged inner product") {
  GridSpec g = GridSpec().scaled(0.2);
  RidgeSpec ridge;
  Domain dom = build_domain(g, ridge);
  const int nt = 3;
  Eigen::VectorXd sigma(nt);
  sigma << 0.5, 2.0, 1.0;
  InnerProduct ip(dom, sigma);

  const std::ptrdiff_t n = (std::ptrdiff_t)nt * g.ncells();
  // Ones in a single tracer slot everywhere, including solid cells: the
  // weights must vanish there, so the square norm is 1/sigma_t^2 exactly.
  for (int t = 0; t < nt; ++t) {
    Eigen::VectorXd a = Eigen::VectorXd::Zero(n);
    a.segment((std::ptrdiff_t)t * g.ncells(), g.ncells()).setOnes();
    CHECK(ip.dot(a, a) == doctest::Approx(1.0 / (sigma(t) * sigma(t))).epsilon(1e-12));
  }
  // Disjoint tracer slots are orthogonal.
  Eigen::VectorXd a = Eigen::VectorXd::Zero(n), b = Eigen::VectorXd::Zero(n);
  a.segment(0, g.ncells()).setOnes();
  b.segment(g.ncells(), g.ncells()).setOnes();
  CHECK(ip.dot(a, b) == 0.0);
  CHECK(ip.norm(a) == doctest::Approx(std::sqrt(ip.dot(a, a))));

  // Gram agrees with pairwise dots; weights are zero exactly on solid cells.
  Eigen::MatrixXd M = smooth_modes(dom, nt, 3, 17);
  Eigen::MatrixXd G = ip.gram(M, M);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(G(i, j) == doctest::Approx(ip.dot(M.col(i), M.col(j))).epsilon(1e-12));
  for (int k = 0; k < g.nz; ++k)
    for (int i = 0; i < g.nx; ++i)
      if (!dom.is_fluid(i, k))
        for (int t = 0; t < nt; ++t)
          CHECK(ip.weights()((std::ptrdiff_t)t * g.ncells() + g.idx(i, k)) == 0.0);
}

TEST_CASE("reorthonormalization is exact and preserves every reconstruction") {
  Domain dom = flat_domain(16, 4, 16.0, 2.0);
  const int nt = 3, ns = 4, nr = 30;
  DOEngine eng(dom, ModelId::npz, BioParams{}, nullptr, EngineOptions{}, 0.01);

  DOState st;
  st.model = ModelId::npz;
  st.n_modes = ns;
  st.n_samples = nr;
  st.sigma_nd = Eigen::VectorXd::Ones(nt);
  st.mean.assign((std::size_t)nt, Eigen::ArrayXXd::Zero(dom.grid.nx, dom.grid.nz));
  st.modes = smooth_modes(dom, nt, ns, 33);
  Rng rng(8);
  st.coeff.resize(nr, ns);
  for (int r = 0; r < nr; ++r)
    for (int c = 0; c < ns; ++c) st.coeff(r, c) = rng.normal();
  st.coeff.rowwise() -= st.coeff.colwise().mean();

  Eigen::MatrixXd recon0 = st.modes * st.coeff.transpose();
  ReorthDiag d = eng.reorthonormalize(st);
  InnerProduct ip = eng.inner(st);
  Eigen::MatrixXd G = ip.gram(st.modes, st.modes);
  CHECK((G - Eigen::MatrixXd::Identity(ns, ns)).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(d.drift_after <= 1e-12);
  CHECK(d.modes_replaced == 0);
  CHECK((st.modes * st.coeff.transpose() - recon0).cwiseAbs().maxCoeff() <= 1e-10);

  // A duplicated column makes one direction degenerate: it must be replaced
  // by a fresh orthonormal field carrying zero coefficients, without touching
  // the reconstructed samples.
  st.modes.col(ns - 1) = st.modes.col(0);
  for (int r = 0; r < nr; ++r)
    for (int c = 0; c < ns; ++c) st.coeff(r, c) = rng.normal();
  st.coeff.rowwise() -= st.coeff.colwise().mean();
  recon0 = st.modes * st.coeff.transpose();
  d = eng.reorthonormalize(st);
  G = ip.gram(st.modes, st.modes);
  CHECK((G - Eigen::MatrixXd::Identity(ns, ns)).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK(d.modes_replaced == 1);
  CHECK((st.modes * st.coeff.transpose() - recon0).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("coefficient variance decays at the analytic linear rate") {
  // Zero flow, no diffusion, and a single remineralization channel make the
  // reduced-order system exactly linear: the lone mode sits in the decaying
  // (nutrient, detritus) eigendirection with eigenvalue -remin, so each
  // coefficient is multiplied per step by the quartic stability polynomial.
  Domain dom = flat_domain(16, 4, 16.0, 2.0);
  const GridSpec& g = dom.grid;
  const int nt = 4, nr = 400;
  const double lambda = 0.8, dt = 0.01;

  BioParams p = inert();
  p.remin = lambda;
  FlowConfig fc;
  fc.u_inlet = 0.0;
  FlowSolver fs(dom, fc, dt);
  FlowState flow = fs.initial_state();
  CHECK(flow.u.abs().maxCoeff() < 1e-14);

  EngineOptions eo;
  DOEngine eng(dom, ModelId::npzd, p, nullptr, eo, dt);

  DOState st;
  st.model = ModelId::npzd;
  st.n_modes = 1;
  st.n_samples = nr;
  st.sigma_nd = Eigen::VectorXd::Ones(nt);
  st.mean.assign((std::size_t)nt, Eigen::ArrayXXd::Zero(g.nx, g.nz));
  st.mean[0].setConstant(0.5);
  st.modes = Eigen::MatrixXd::Zero((std::ptrdiff_t)nt * g.ncells(), 1);
  st.modes.col(0).segment(0, g.ncells()).setConstant(-1.0 / std::sqrt(2.0));
  st.modes.col(0).segment(3 * (std::ptrdiff_t)g.ncells(), g.ncells())
      .setConstant(1.0 / std::sqrt(2.0));
  Rng rng(21);
  st.coeff.resize(nr, 1);
  for (int r = 0; r < nr; ++r) st.coeff(r, 0) = 0.1 * rng.normal();
  st.coeff.array() -= st.coeff.mean();

  Eigen::MatrixXd mode0 = st.modes;
  const double var0 = st.coeff.col(0).squaredNorm();
  ParamEnsemble pe = empty_params(nr);

  const int steps = 50;
  for (int n = 0; n < steps; ++n) {
    StepDiag d = eng.advance(st, pe, flow);
    CHECK(d.recentered == 0);
    CHECK(d.orth_drift_exit <= 1e-12);
  }

  const double x = lambda * dt;
  const double r = 1.0 - x + x * x / 2.0 - x * x * x / 6.0 + x * x * x * x / 24.0;
  const double want = std::pow(r, 2.0 * steps);
  CHECK(st.coeff.col(0).squaredNorm() / var0 == doctest::Approx(want).epsilon(1e-9));

  // Mean fields and the mode direction are untouched by the decay.
  CHECK((st.mean[0] - 0.5).abs().maxCoeff() <= 1e-13);
  for (int t = 1; t < nt; ++t) CHECK(st.mean[(std::size_t)t].abs().maxCoeff() <= 1e-13);
  InnerProduct ip = eng.inner(st);
  CHECK(std::abs(std::abs(ip.dot(st.modes.col(0), mode0.col(0))) - 1.0) <= 1e-10);

  // Pointwise moments: the standard deviation field is proportional to the
  // mode magnitude, so its ratio between tracers matches the mode exactly.
  std::vector<Eigen::ArrayXXd> mom_mean, mom_std;
  eng.moments(st, mom_mean, mom_std);
  CHECK((mom_mean[0] - st.mean[0]).abs().maxCoeff() == 0.0);
  CHECK(mom_std[0](3, 1) == doctest::Approx(mom_std[3](3, 1)).epsilon(1e-12));
  CHECK(mom_std[1](3, 1) == doctest::Approx(0.0));
}

TEST_CASE("flux-limited advection: uniform fields are invariant, pulses stay bounded") {
  Domain dom = flat_domain(40, 6, 40.0, 2.0);
  const GridSpec& g = dom.grid;
  FlowConfig fc;
  fc.u_inlet = 0.3;
  const double dt = 1.0;
  FlowSolver fs(dom, fc, dt);
  FlowState flow = fs.initial_state();

  Eigen::ArrayXXd uni = Eigen::ArrayXXd::Constant(g.nx, g.nz, 0.7), out(g.nx, g.nz);
  advect_field(uni, flow, dom, true, out);
  CHECK(out.abs().maxCoeff() <= 1e-12);
  advect_field(uni, flow, dom, false, out);
  CHECK(out.abs().maxCoeff() <= 1e-12);

  DOEngine eng(dom, ModelId::npz, inert(), nullptr, EngineOptions{}, dt);
  std::vector<Eigen::ArrayXXd> tr(3, Eigen::ArrayXXd::Zero(g.nx, g.nz));
  for (int k = 0; k < g.nz; ++k)
    for (int i = 5; i <= 12; ++i) tr[0](i, k) = 1.0;
  tr[1].setConstant(0.3);

  auto centroid = [&](const Eigen::ArrayXXd& f) {
    double m = 0.0, mx = 0.0;
    for (int k = 0; k < g.nz; ++k)
      for (int i = 0; i < g.nx; ++i) {
        m += f(i, k);
        mx += f(i, k) * g.xc(i);
      }
    return mx / m;
  };
  const double x0 = centroid(tr[0]);

  for (int n = 0; n < 80; ++n) {
    StepDiag d;
    eng.deterministic_step(tr, inert(), nullptr, nullptr, nullptr, flow, &d);
    CHECK(tr[0].minCoeff() >= -1e-10);          // no undershoot
    CHECK(tr[0].maxCoeff() <= 1.0 + 1e-10);     // no overshoot
    CHECK((tr[1] - 0.3).abs().maxCoeff() <= 1e-12);
    CHECK(tr[2].abs().maxCoeff() == 0.0);
    CHECK(d.negative_cells == 0);
  }
  // The pulse advected by u*t = 24 length units.
  CHECK(centroid(tr[0]) == doctest::Approx(x0 + 24.0).epsilon(0.1));
}

TEST_CASE("light table matches the closed-form growth profile") {
  GridSpec g = GridSpec().scaled(0.2);
  RidgeSpec ridge;
  Domain dom = build_domain(g, ridge);
  BioParams p;
  DOEngine eng(dom, ModelId::npz, p, nullptr, EngineOptions{}, 0.01);
  for (int k = 0; k < g.nz; ++k)
    CHECK(eng.growth_at(k) ==
          doctest::Approx(light_limited_growth(p, g.zc(k) - g.lz)).epsilon(1e-14));
}

TEST_CASE("collapsed uncertainty reproduces the single-realization stepper") {
  Domain dom = flat_domain(20, 5, 20.0, 2.0);
  const GridSpec& g = dom.grid;
  FlowConfig fc;
  fc.u_inlet = 0.3;
  const double dt = 0.1;
  FlowSolver fs(dom, fc, dt);
  FlowState flow = fs.initial_state();

  BioParams p;  // full default reaction network
  DOEngine eng(dom, ModelId::npz, p, nullptr, EngineOptions{}, dt);

  std::vector<Eigen::ArrayXXd> det(3, Eigen::ArrayXXd::Zero(g.nx, g.nz));
  for (int k = 0; k < g.nz; ++k)
    for (int i = 0; i < g.nx; ++i) {
      det[0](i, k) = 0.3 + 0.05 * std::sin(0.5 * i) * (k + 1) / g.nz;
      det[1](i, k) = 0.2 + 0.03 * std::cos(0.3 * i + k);
      det[2](i, k) = 0.1 + 0.02 * std::sin(0.2 * i - k);
    }

  const int nr = 6;
  DOState st;
  st.model = ModelId::npz;
  st.n_modes = 0;
  st.n_samples = nr;
  st.sigma_nd = Eigen::VectorXd::Ones(3);
  st.mean = det;
  st.modes.resize((std::ptrdiff_t)3 * g.ncells(), 0);
  st.coeff.resize(nr, 0);
  ParamEnsemble pe = empty_params(nr);

  for (int n = 0; n < 100; ++n) {
    eng.advance(st, pe, flow);
    eng.deterministic_step(det, p, nullptr, nullptr, nullptr, flow);
  }
  for (int t = 0; t < 3; ++t)
    CHECK((st.mean[(std::size_t)t] - det[(std::size_t)t]).abs().maxCoeff() <= 1e-10);
}
