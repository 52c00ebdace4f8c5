#include "bgclab/properties.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "bgclab/balance.hpp"
#include "bgclab/do_engine.hpp"
#include "bgclab/filter.hpp"
#include "bgclab/gmm.hpp"
#include "bgclab/twin.hpp"

namespace bgclab {

namespace {

const ModelId kAllModels[] = {ModelId::npz,          ModelId::npzd,
                              ModelId::nnpzd,        ModelId::npz_quadmort,
                              ModelId::npzd_unified, ModelId::nnpzd_quadmort};

const ParamId kAllParams[] = {ParamId::ivlev,     ParamId::p_mort,   ParamId::z_mort,
                              ParamId::z_mort_quad, ParamId::graze_max, ParamId::remin,
                              ParamId::nitrif,    ParamId::half_sat, ParamId::egestion,
                              ParamId::nh4_inhib};

std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

double rel_err(double a, double f) {
  return std::abs(a - f) / std::max({1.0, std::abs(a), std::abs(f)});
}

// All reaction channels switched off: the dynamics reduce to pure linear
// advection-diffusion of independent tracers.
BioParams inert_params() {
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

PropertyResult conservation_suite() {
  Rng rng(101);
  double worst = 0.0;
  for (ModelId m : kAllModels) {
    const int nt = n_tracers(m), na = n_alpha(m), nb = n_beta(m);
    BioParams p;
    for (int it = 0; it < 1000; ++it) {
      Eigen::VectorXd x(nt);
      for (int j = 0; j < nt; ++j) x(j) = rng.uniform(0.0, 1.2);
      double G = rng.uniform(0.0, p.vmax);
      std::vector<double> a((std::size_t)na), b((std::size_t)nb);
      for (auto& v : a) v = rng.uniform(0.0, 1.0);
      for (auto& v : b) v = rng.uniform(0.0, 1.0);
      Eigen::VectorXd S(nt);
      reaction_rates(m, x.data(), G, p, na ? a.data() : nullptr, nb ? b.data() : nullptr,
                     S.data());
      // exercise the shared mortality-transfer hook too
      add_zoo_loss(m, rng.uniform(0.0, 0.05), 0.0, S.data(), nullptr);
      double scale = S.cwiseAbs().maxCoeff();
      if (scale > 0.0) worst = std::max(worst, std::abs(S.sum()) / scale);
    }
  }
  PropertyResult r{"conservation", worst <= 1e-12,
                   fmt("worst |sum S| / max|S| = %.2e (bound 1e-12)", worst)};
  return r;
}

PropertyResult jacobian_suite() {
  Rng rng(202);
  const std::vector<ParamId> ids(std::begin(kAllParams), std::end(kAllParams));
  double worst = 0.0;
  for (ModelId m : kAllModels) {
    const int nt = n_tracers(m), na = n_alpha(m), nb = n_beta(m);
    ReactionEval ev;
    for (int it = 0; it < 1000; ++it) {
      Eigen::VectorXd x(nt);
      for (int j = 0; j < nt; ++j) x(j) = rng.uniform(0.1, 1.0);
      double G = rng.uniform(0.2, 1.4);
      BioParams p;
      std::vector<double> a((std::size_t)na), b((std::size_t)nb);
      for (auto& v : a) v = rng.uniform(0.0, 1.0);
      for (auto& v : b) v = rng.uniform(0.0, 1.0);
      const double* ap = na ? a.data() : nullptr;
      const double* bp = nb ? b.data() : nullptr;
      reaction_eval(m, x.data(), G, p, ap, bp, ids, ev);

      Eigen::VectorXd sp(nt), sm(nt);
      for (int j = 0; j < nt; ++j) {
        double h = 1e-6 * std::max(1.0, std::abs(x(j)));
        Eigen::VectorXd xx = x;
        xx(j) = x(j) + h;
        reaction_rates(m, xx.data(), G, p, ap, bp, sp.data());
        xx(j) = x(j) - h;
        reaction_rates(m, xx.data(), G, p, ap, bp, sm.data());
        for (int i = 0; i < nt; ++i)
          worst = std::max(worst, rel_err(ev.jac_state(i, j), (sp(i) - sm(i)) / (2 * h)));
      }
      for (std::size_t q = 0; q < ids.size(); ++q) {
        double v = p.get(ids[q]);
        double h = 1e-6 * std::max(1.0, std::abs(v));
        BioParams pp = p, pm = p;
        pp.set(ids[q], v + h);
        pm.set(ids[q], v - h);
        reaction_rates(m, x.data(), G, pp, ap, bp, sp.data());
        reaction_rates(m, x.data(), G, pm, ap, bp, sm.data());
        for (int i = 0; i < nt; ++i)
          worst = std::max(worst,
                           rel_err(ev.jac_theta(i, (int)q), (sp(i) - sm(i)) / (2 * h)));
      }
      for (int j = 0; j < na; ++j) {
        double h = 1e-6;
        std::vector<double> a2 = a;
        a2[(std::size_t)j] = a[(std::size_t)j] + h;
        reaction_rates(m, x.data(), G, p, a2.data(), bp, sp.data());
        a2[(std::size_t)j] = a[(std::size_t)j] - h;
        reaction_rates(m, x.data(), G, p, a2.data(), bp, sm.data());
        for (int i = 0; i < nt; ++i)
          worst = std::max(worst, rel_err(ev.jac_alpha(i, j), (sp(i) - sm(i)) / (2 * h)));
      }
      for (int j = 0; j < nb; ++j) {
        double h = 1e-6;
        std::vector<double> b2 = b;
        b2[(std::size_t)j] = b[(std::size_t)j] + h;
        reaction_rates(m, x.data(), G, p, ap, b2.data(), sp.data());
        b2[(std::size_t)j] = b[(std::size_t)j] - h;
        reaction_rates(m, x.data(), G, p, ap, b2.data(), sm.data());
        for (int i = 0; i < nt; ++i)
          worst = std::max(worst, rel_err(ev.jac_beta(i, j), (sp(i) - sm(i)) / (2 * h)));
      }
    }
  }
  return {"jacobians", worst < 1e-6,
          fmt("worst relative error vs central differences = %.2e (bound 1e-6)", worst)};
}

PropertyResult basis_suite() {
  Rng rng(303);
  double worst_sum = 0.0, worst_rep = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    HatBasis b;
    b.lo = rng.uniform(-1.0, 0.5);
    b.hi = b.lo + rng.uniform(0.5, 2.0);
    b.n_nodes = 3 + (int)rng.index(12);
    Eigen::VectorXd gamma(b.n_nodes);
    for (int j = 0; j < b.n_nodes; ++j) gamma(j) = rng.uniform(-0.1, 0.1);
    Eigen::VectorXd psi;
    for (int it = 0; it < 1000; ++it) {
      double z = rng.uniform(b.lo - 0.2, b.hi + 0.2);
      basis_eval(b, z, psi, nullptr);
      worst_sum = std::max(worst_sum, std::abs(psi.sum() - 1.0));
      double f = expand_f(b, gamma, z, nullptr, nullptr);
      // independent piecewise-linear interpolation
      double zc = std::clamp(z, b.lo, b.hi);
      double s = (zc - b.lo) / b.spacing();
      int k = std::min((int)s, b.n_nodes - 2);
      double frac = s - k;
      double ref = gamma(k) * (1.0 - frac) + gamma(k + 1) * frac;
      worst_rep = std::max(worst_rep, std::abs(f - ref));
    }
  }
  bool pass = worst_sum <= 1e-13 && worst_rep <= 1e-13;
  return {"basis_partition", pass,
          fmt("worst |sum psi - 1| = %.2e, worst reproduction error = %.2e", worst_sum,
              worst_rep)};
}

double gauss_pdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mu,
                 const Eigen::MatrixXd& cov) {
  const int d = (int)x.size();
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  double logdet = 0.0;
  for (int i = 0; i < d; ++i) logdet += std::log(llt.matrixL()(i, i));
  logdet *= 2.0;
  Eigen::VectorXd z = llt.matrixL().solve(x - mu);
  return std::exp(-0.5 * (d * std::log(2.0 * M_PI) + logdet + z.squaredNorm()));
}

double mix_pdf(const GaussianMixture& m, const Eigen::VectorXd& x) {
  double acc = 0.0;
  for (int j = 0; j < m.k(); ++j)
    acc += m.weight[(std::size_t)j] * gauss_pdf(x, m.mean[(std::size_t)j], m.cov[(std::size_t)j]);
  return acc;
}

PropertyResult mixture_oracle_suite() {
  std::ostringstream note;
  bool pass = true;

  // 1-D: two-component prior, scalar observation, against dense-grid Bayes.
  {
    GaussianMixture prior;
    prior.weight = {0.35, 0.65};
    prior.mean = {Eigen::VectorXd::Constant(1, -1.2), Eigen::VectorXd::Constant(1, 1.5)};
    prior.cov = {Eigen::MatrixXd::Constant(1, 1, 0.3), Eigen::MatrixXd::Constant(1, 1, 0.8)};
    Eigen::MatrixXd H(1, 1);
    H << 1.0;
    Eigen::VectorXd nv = Eigen::VectorXd::Constant(1, 0.4);
    Eigen::VectorXd y = Eigen::VectorXd::Constant(1, 0.7);
    GaussianMixture post = gmm_observe(prior, H, nv, y);

    const int N = 4001;
    Eigen::VectorXd xs = Eigen::VectorXd::LinSpaced(N, -10.0, 10.0);
    const double dx = xs(1) - xs(0);
    Eigen::VectorXd pb(N), pm(N);
    for (int i = 0; i < N; ++i) {
      Eigen::VectorXd x = xs.segment(i, 1);
      double lik = std::exp(-0.5 * (y(0) - x(0)) * (y(0) - x(0)) / nv(0));
      pb(i) = mix_pdf(prior, x) * lik;
      pm(i) = mix_pdf(post, x);
    }
    pb /= pb.sum() * dx;
    double tv = 0.5 * (pb - pm).cwiseAbs().sum() * dx;
    pass = pass && tv < 1e-3;
    note << fmt("1-D TV vs grid Bayes = %.2e; ", tv);
  }

  // 2-D: two components, one scalar observation mixing both coordinates.
  {
    GaussianMixture prior;
    prior.weight = {0.4, 0.6};
    Eigen::VectorXd m1(2), m2(2);
    m1 << -2.0, -1.0;
    m2 << 2.0, 1.5;
    Eigen::MatrixXd c1(2, 2), c2(2, 2);
    c1 << 1.0, 0.3, 0.3, 0.8;
    c2 << 0.6, -0.2, -0.2, 1.2;
    prior.mean = {m1, m2};
    prior.cov = {c1, c2};
    Eigen::MatrixXd H(1, 2);
    H << 1.0, 0.5;
    Eigen::VectorXd nv = Eigen::VectorXd::Constant(1, 0.3);
    Eigen::VectorXd y = Eigen::VectorXd::Constant(1, 0.4);
    GaussianMixture post = gmm_observe(prior, H, nv, y);

    const int N = 321;
    Eigen::VectorXd xs = Eigen::VectorXd::LinSpaced(N, -8.0, 8.0);
    const double dx = xs(1) - xs(0);
    double tv = 0.0, mass = 0.0;
    Eigen::MatrixXd pb(N, N), pm(N, N);
    Eigen::VectorXd x(2);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j) {
        x << xs(i), xs(j);
        double hx = H.row(0).dot(x);
        double lik = std::exp(-0.5 * (y(0) - hx) * (y(0) - hx) / nv(0));
        pb(i, j) = mix_pdf(prior, x) * lik;
        pm(i, j) = mix_pdf(post, x);
        mass += pb(i, j);
      }
    pb /= mass * dx * dx;
    tv = 0.5 * (pb - pm).cwiseAbs().sum() * dx * dx;
    pass = pass && tv < 1e-3;
    note << fmt("2-D TV = %.2e; ", tv);
  }

  // Single component equals the Kalman update.
  {
    Rng rng(404);
    const int d = 5, ny = 2;
    Eigen::MatrixXd A(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) A(i, j) = rng.normal();
    GaussianMixture prior;
    prior.weight = {1.0};
    Eigen::VectorXd mu(d);
    for (int i = 0; i < d; ++i) mu(i) = rng.normal();
    prior.mean = {mu};
    prior.cov = {A * A.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d)};
    Eigen::MatrixXd H(ny, d);
    for (int i = 0; i < ny; ++i)
      for (int j = 0; j < d; ++j) H(i, j) = rng.normal();
    Eigen::VectorXd nv(ny), y(ny);
    nv << 0.2, 0.5;
    y << rng.normal(), rng.normal();
    GaussianMixture post = gmm_observe(prior, H, nv, y);

    Eigen::MatrixXd S = H * prior.cov[0] * H.transpose();
    S += Eigen::MatrixXd(nv.asDiagonal());
    Eigen::MatrixXd Kg = prior.cov[0] * H.transpose() * S.inverse();
    Eigen::VectorXd mu_ref = prior.mean[0] + Kg * (y - H * prior.mean[0]);
    Eigen::MatrixXd cov_ref =
        (Eigen::MatrixXd::Identity(d, d) - Kg * H) * prior.cov[0];
    double e1 = (post.mean[0] - mu_ref).cwiseAbs().maxCoeff();
    double e2 = (post.cov[0] - cov_ref).cwiseAbs().maxCoeff();
    double err = std::max(e1, e2);
    pass = pass && err <= 1e-12;
    note << fmt("K=1 vs Kalman max abs deviation = %.2e", err);
  }

  return {"mixture_oracles", pass, note.str()};
}

PropertyResult em_suite() {
  std::ostringstream note;
  int bad_mono = 0, reseeded = 0;
  for (int s = 0; s < 50; ++s) {
    Rng rng(7000 + (std::uint64_t)s);
    const int d = 1 + (int)(s % 3);
    const int m = 80 + 40 * (int)(s % 4);
    Eigen::VectorXd c1(d), c2(d);
    for (int j = 0; j < d; ++j) {
      c1(j) = rng.normal(0.0, 1.0);
      c2(j) = c1(j) + 4.0 + rng.uniform(0.0, 2.0);
    }
    Eigen::MatrixXd X(m, d);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < d; ++j)
        X(i, j) = (i < m / 2 ? c1(j) : c2(j)) + rng.normal();
    EmResult fit = fit_em(X, 2, 0, {});
    reseeded += fit.reseeded + fit.dropped;
    for (std::size_t i = 1; i < fit.loglik_trace.size(); ++i)
      if (fit.loglik_trace[i] <
          fit.loglik_trace[i - 1] - 1e-7 * (std::abs(fit.loglik_trace[i - 1]) + 1.0))
        ++bad_mono;
  }

  int k2_hits = 0, k1_hits = 0;
  for (int s = 0; s < 20; ++s) {
    Rng rng(8000 + (std::uint64_t)s);
    const int m = 400, d = 2;
    Eigen::MatrixXd X2(m, d), X1(m, d);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < d; ++j) {
        X2(i, j) = (i < m / 2 ? -5.0 : 5.0) + rng.normal();
        X1(i, j) = rng.normal();
      }
    if (select_k_bic(X2, 6, 0, {}).k_star == 2) ++k2_hits;
    if (select_k_bic(X1, 6, 0, {}).k_star == 1) ++k1_hits;
  }
  bool pass = bad_mono == 0 && k2_hits >= 18 && k1_hits >= 18;
  note << "monotonicity violations " << bad_mono << "/50 (reseeds " << reseeded
       << "); BIC two-cluster hits " << k2_hits << "/20, single-cluster hits " << k1_hits
       << "/20";
  return {"em_bic", pass, note.str()};
}

PropertyResult do_mc_suite() {
  GridSpec g;
  g.nx = 30;
  g.nz = 10;
  g.lx = 30.0;
  g.lz = 10.0;
  RidgeSpec ridge;
  ridge.height = 0.0;
  Domain dom = build_domain(g, ridge);

  FlowConfig fc;
  fc.u_inlet = 0.2;
  fc.reynolds = 1.0;
  const double dt = 1e-4;
  FlowSolver fs(dom, fc, dt);
  FlowState flow = fs.initial_state();

  BioParams p = inert_params();
  EngineOptions eo;
  eo.tvd = false;  // first-order upwind keeps the operator linear
  eo.diffusivity = 0.01;
  eo.rk4_coeff = false;
  DOEngine eng(dom, ModelId::npz, p, nullptr, eo, dt);

  const int nr = 12, nt = 3;
  Rng rng(505);
  std::vector<std::vector<Eigen::ArrayXXd>> mc((std::size_t)nr);
  for (int r = 0; r < nr; ++r) {
    mc[(std::size_t)r].resize(nt);
    for (int t = 0; t < nt; ++t) {
      Eigen::ArrayXXd f(g.nx, g.nz);
      for (int k = 0; k < g.nz; ++k)
        for (int i = 0; i < g.nx; ++i)
          f(i, k) = 0.5 + 0.1 * std::sin(0.4 * i + t) + 0.05 * rng.normal();
      mc[(std::size_t)r][(std::size_t)t] = f;
    }
  }
  DOState st = init_do_from_ensemble(dom, ModelId::npz, mc, nr - 1, Eigen::VectorXd::Ones(nt));

  ParamEnsemble pe;
  pe.dtheta.resize(nr, 0);
  pe.dalpha.resize(nr, 0);
  pe.dbeta.resize(nr, 0);
  pe.dgamma.resize(nr, 0);

  double worst = 0.0;
  for (int step = 0; step < 100; ++step) {
    eng.advance(st, pe, flow);
    for (int r = 0; r < nr; ++r)
      eng.deterministic_step(mc[(std::size_t)r], p, nullptr, nullptr, nullptr, flow);
    fs.step(flow);
  }
  for (int r = 0; r < nr; ++r) {
    Eigen::VectorXd col = st.modes * st.coeff.row(r).transpose();
    for (int t = 0; t < nt; ++t) {
      Eigen::ArrayXXd rec =
          st.mean[(std::size_t)t] +
          Eigen::Map<const Eigen::ArrayXXd>(col.data() + (std::ptrdiff_t)t * g.ncells(), g.nx,
                                            g.nz);
      worst = std::max(worst,
                       (rec - mc[(std::size_t)r][(std::size_t)t]).abs().maxCoeff());
    }
  }
  return {"do_mc_equivalence", worst <= 1e-8,
          fmt("max |reduced-order - Monte-Carlo| after 100 linear steps = %.2e (bound 1e-8)",
              worst)};
}

// Shared prior sampler for the long-run and initialization suites.
struct PriorDraw {
  Eigen::VectorXd th, al, be, ga;
  Eigen::MatrixXd prof;
};

bool draw_prior_member(const ExperimentConfig& cfg, Rng& pr, Rng& er, PriorDraw& out) {
  const int nth = (int)cfg.prior.theta_ids.size();
  const int na = n_alpha(cfg.model), nb = n_beta(cfg.model);
  out.th.resize(nth);
  for (int j = 0; j < nth; ++j)
    out.th(j) = pr.uniform(cfg.prior.theta_range[(std::size_t)j].first,
                           cfg.prior.theta_range[(std::size_t)j].second);
  out.al = Eigen::VectorXd::Ones(na);
  for (int j = 0; j < na && cfg.prior.stochastic_alpha; ++j)
    out.al(j) = sample_binary_prior(1, pr)(0);
  out.be = Eigen::VectorXd::Ones(nb);
  for (int j = 0; j < nb && cfg.prior.stochastic_beta; ++j)
    out.be(j) = sample_binary_prior(1, pr)(0);
  const bool expansion = cfg.prior.n_gamma > 0;
  if (expansion)
    out.ga = sample_expansion_prior(cfg.prior.basis, cfg.prior.gamma_lo, cfg.prior.gamma_hi,
                                    cfg.prior.gamma_smooth, cfg.prior.gamma_pin_first, 1, pr)
                 .row(0);
  BioParams p = cfg.base;
  for (int j = 0; j < nth; ++j) p.set(cfg.prior.theta_ids[(std::size_t)j], out.th(j));
  out.prof = equilibrium_profile(cfg.model, p, na ? out.al.data() : nullptr,
                                 nb ? out.be.data() : nullptr,
                                 expansion ? &cfg.prior.basis : nullptr,
                                 expansion ? &out.ga : nullptr, cfg.grid, cfg.biomass, er,
                                 cfg.equil);
  return out.prof.size() != 0;
}

PropertyResult longrun_suite() {
  ExperimentConfig cfg = experiment_defaults(1);
  apply_scale(cfg, 0.25);
  cfg.n_samples = 400;
  Domain dom = build_domain(cfg.grid, cfg.ridge);

  Rng pr = Rng::substream(9, 1), er = Rng::substream(9, 2);
  std::vector<std::vector<Eigen::ArrayXXd>> fields;
  std::vector<double> ths, als;
  PriorDraw dr;
  int attempts = 0;
  while ((int)fields.size() < cfg.n_samples) {
    if (++attempts > 2 * cfg.n_samples)
      return {"longrun_invariants", false, "prior rejection rate exceeded one half"};
    if (!draw_prior_member(cfg, pr, er, dr)) continue;
    fields.push_back(extrude_profile(dr.prof, dom));
    ths.push_back(dr.th(0));
    als.push_back(dr.al(0));
  }

  const int nt = n_tracers(cfg.model);
  Eigen::VectorXd sigma(nt);
  for (int t = 0; t < nt; ++t) {
    double s1 = 0.0, s2 = 0.0;
    for (const auto& f : fields) {
      s1 += f[(std::size_t)t].sum();
      s2 += f[(std::size_t)t].square().sum();
    }
    double cnt = (double)fields.size() * dom.n_fluid;
    double mean = s1 / cnt;
    sigma(t) = std::max(std::sqrt(std::max(s2 / cnt - mean * mean, 0.0)), 1e-4);
  }
  DOState st = init_do_from_ensemble(dom, cfg.model, fields, 20, sigma);
  fields.clear();

  ParamEnsemble pe;
  pe.theta_ids = cfg.prior.theta_ids;
  const int nr = st.n_samples;
  Eigen::MatrixXd TH = Eigen::Map<Eigen::MatrixXd>(ths.data(), nr, 1);
  Eigen::MatrixXd AL = Eigen::Map<Eigen::MatrixXd>(als.data(), nr, 1);
  pe.theta_mean = TH.colwise().mean();
  pe.dtheta = TH.rowwise() - pe.theta_mean.transpose();
  pe.alpha_mean = AL.colwise().mean();
  pe.dalpha = AL.rowwise() - pe.alpha_mean.transpose();
  pe.dbeta.resize(nr, 0);
  pe.dgamma.resize(nr, 0);

  DOEngine eng(dom, cfg.model, cfg.base, nullptr, cfg.engine, cfg.dt);
  FlowSolver fs(dom, cfg.flow, cfg.dt);
  FlowState flow = fs.initial_state();

  double worst_orth = 0.0, worst_div = 0.0, worst_ex = 0.0;
  try {
    for (int s = 0; s < 500; ++s) {
      StepDiag d = eng.advance(st, pe, flow);
      FlowDiag fd = fs.step(flow);
      worst_orth = std::max(worst_orth, d.orth_drift_exit);
      worst_div = std::max(worst_div, fd.max_divergence);
      worst_ex = std::max(worst_ex, d.extrema_excess);
    }
  } catch (const std::exception& e) {
    return {"longrun_invariants", false, std::string("step failure: ") + e.what()};
  }
  bool pass = worst_orth <= 1e-8 && worst_div <= 1e-8 && worst_ex <= 1e-10;
  return {"longrun_invariants", pass,
          fmt("500 steps: worst orthonormality drift %.2e, worst divergence %.2e, ", worst_orth,
              worst_div) +
              fmt("worst advection overshoot %.2e", worst_ex)};
}

PropertyResult equilibrium_suite() {
  std::ostringstream note;
  bool pass = true;
  for (int id = 1; id <= 4; ++id) {
    ExperimentConfig cfg = experiment_defaults(id);
    apply_scale(cfg, 0.5);
    Rng pr = Rng::substream(11, (std::uint64_t)id);
    Rng er = Rng::substream(12, (std::uint64_t)id);
    const int want = 200;
    int got = 0, attempts = 0;
    double worst_res = 0.0, worst_sum = 0.0;
    PriorDraw dr;
    while (got < want) {
      if (++attempts > 2 * want + 50) {
        pass = false;
        note << "exp" << id << ": rejection rate exceeded one half; ";
        break;
      }
      if (!draw_prior_member(cfg, pr, er, dr)) continue;
      ++got;
      BioParams p = cfg.base;
      for (int j = 0; j < (int)cfg.prior.theta_ids.size(); ++j)
        p.set(cfg.prior.theta_ids[(std::size_t)j], dr.th(j));
      const int nt = n_tracers(cfg.model);
      const int zi = zoo_index(cfg.model);
      for (int k = 0; k < cfg.grid.nz; ++k) {
        double growth = light_limited_growth(p, cfg.grid.zc(k) - cfg.grid.lz);
        Eigen::VectorXd x = dr.prof.row(k).transpose();
        Eigen::VectorXd rate(nt);
        reaction_rates(cfg.model, x.data(), growth, p,
                       dr.al.size() ? dr.al.data() : nullptr,
                       dr.be.size() ? dr.be.data() : nullptr, rate.data());
        if (cfg.prior.n_gamma > 0) {
          double f = expand_f(cfg.prior.basis, dr.ga, x(zi), nullptr, nullptr);
          add_zoo_loss(cfg.model, f, 0.0, rate.data(), nullptr);
        }
        worst_res = std::max(worst_res, rate.cwiseAbs().maxCoeff());
        double T = cfg.biomass.eval(cfg.grid.zc(k), cfg.grid.lz);
        worst_sum = std::max(worst_sum, std::abs(x.sum() - T) / std::max(1.0, T));
      }
    }
    pass = pass && worst_res <= 1e-8 && worst_sum <= 1e-12;
    note << "exp" << id << ": " << got << " members, worst rate residual "
         << fmt("%.1e", worst_res) << ", worst biomass mismatch " << fmt("%.1e", worst_sum)
         << " (" << attempts - got << " rejected); ";
  }
  return {"balanced_init", pass, note.str()};
}

}  // namespace

std::vector<PropertyResult> run_property_suites() {
  std::vector<PropertyResult> out;
  out.push_back(conservation_suite());
  out.push_back(jacobian_suite());
  out.push_back(basis_suite());
  out.push_back(mixture_oracle_suite());
  out.push_back(em_suite());
  out.push_back(do_mc_suite());
  out.push_back(longrun_suite());
  out.push_back(equilibrium_suite());
  return out;
}

}  // namespace bgclab
