#include "bgclab/filter.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bgclab {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

std::optional<ObsStencil> make_stencil(const Domain& dom, double x, double z) {
  const GridSpec& g = dom.grid;
  if (x < 0.0 || x > g.lx || z < 0.0 || z > g.lz) return std::nullopt;
  const int ci = std::min((int)(x / g.dx()), g.nx - 1);
  const int ck = std::min((int)(z / g.dz()), g.nz - 1);
  if (!dom.is_fluid(ci, ck)) return std::nullopt;

  double gx = std::clamp(x / g.dx() - 0.5, 0.0, (double)(g.nx - 1));
  double gz = std::clamp(z / g.dz() - 0.5, 0.0, (double)(g.nz - 1));
  int i0 = std::min((int)gx, g.nx - 2);
  int k0 = std::min((int)gz, g.nz - 2);
  if (g.nx == 1) i0 = 0;
  if (g.nz == 1) k0 = 0;
  const double fx = gx - i0, fz = gz - k0;
  const int i1 = std::min(i0 + 1, g.nx - 1), k1 = std::min(k0 + 1, g.nz - 1);

  ObsStencil s;
  const int cells[4] = {g.idx(i0, k0), g.idx(i1, k0), g.idx(i0, k1), g.idx(i1, k1)};
  const int is[4] = {i0, i1, i0, i1}, ks[4] = {k0, k0, k1, k1};
  const double ws[4] = {(1 - fx) * (1 - fz), fx * (1 - fz), (1 - fx) * fz, fx * fz};
  double total = 0.0;
  int n = 0;
  for (int q = 0; q < 4; ++q) {
    if (ws[q] <= 0.0 || !dom.is_fluid(is[q], ks[q])) continue;
    s.cell[n] = cells[q];
    s.w[n] = ws[q];
    total += ws[q];
    ++n;
  }
  if (total <= 0.0) return std::nullopt;
  for (int q = 0; q < n; ++q) s.w[q] /= total;
  return s;
}

double apply_stencil(const ObsStencil& s, const Eigen::ArrayXXd& field) {
  double v = 0.0;
  for (int q = 0; q < 4 && s.cell[q] >= 0; ++q) v += s.w[q] * field.data()[s.cell[q]];
  return v;
}

double presence_probability(const Eigen::VectorXd& samples_column) {
  if (samples_column.size() == 0) throw std::invalid_argument("presence: empty column");
  return (double)(samples_column.array() > 0.5).count() / (double)samples_column.size();
}

UpdateReport assimilate(DOState& state, ParamEnsemble& params, const ObservationBatch& obs,
                        const FilterOptions& opts, Rng& rng) {
  const int ns = state.n_modes;
  const int nr = state.n_samples;
  const int nth = params.n_theta(), nal = params.n_alpha(), nbe = params.n_beta(),
            ng = params.n_gamma();
  const int d = params.n_augmented(ns);
  const int ny = (int)obs.stencil.size();
  const int oth = 0, oal = nth, obe = nth + nal, og = nth + nal + nbe, oy = og + ng;
  const int nc = (int)state.mean[0].size();

  UpdateReport rep;
  rep.time = obs.time;
  rep.n_obs = ny;
  if (ny == 0) return rep;
  if ((int)obs.values.size() != ny || (int)obs.noise_var.size() != ny)
    throw std::invalid_argument("assimilate: observation sizes disagree");

  // Augmented prior samples [theta | alpha | beta | gamma | Y] as deviations.
  Eigen::MatrixXd X(nr, d);
  if (nth) X.middleCols(oth, nth) = params.dtheta;
  if (nal) X.middleCols(oal, nal) = params.dalpha;
  if (nbe) X.middleCols(obe, nbe) = params.dbeta;
  if (ng) X.middleCols(og, ng) = params.dgamma;
  if (ns) X.middleCols(oy, ns) = state.coeff;

  // Observation operator restricted to the augmented space: parameters carry
  // zero direct weight; coefficient columns receive the projected stencils.
  Eigen::MatrixXd Haug = Eigen::MatrixXd::Zero(ny, d);
  Eigen::VectorXd ytil(ny);
  for (int o = 0; o < ny; ++o) {
    const ObsStencil& st = obs.stencil[o];
    for (int j = 0; j < ns; ++j) {
      double acc = 0.0;
      for (int q = 0; q < 4 && st.cell[q] >= 0; ++q)
        acc += st.w[q] * state.modes((std::ptrdiff_t)obs.tracer * nc + st.cell[q], j);
      Haug(o, oy + j) = acc;
    }
    ytil(o) = obs.values(o) - apply_stencil(st, state.mean[obs.tracer]);
  }
  rep.innovation_pre = ytil.norm();

  // Prior mixture from the augmented samples.
  const std::uint64_t fit_seed = rng.engine()();
  GaussianMixture mix;
  if (nr < d + 2) {
    EmResult one = fit_em(X, 1, fit_seed, opts.em);
    mix = one.mix;
    rep.k_selected = 1;
    rep.forced_k1 = 1;
    rep.em_iterations = one.iterations;
    rep.bic = -2.0 * one.loglik + gmm_free_params(1, d) * std::log((double)nr);
  } else {
    BicSelection sel = select_k_bic(X, opts.k_max, fit_seed, opts.em);
    mix = sel.fit.mix;
    rep.k_selected = sel.k_star;
    rep.em_iterations = sel.fit.iterations;
    rep.bic = sel.bic;
  }
  const int K = mix.k();

  GaussianMixture post = gmm_observe(mix, Haug, obs.noise_var, ytil, opts.jitter_rel,
                                     &rep.jittered);

  // Analytic posterior mean of the deviations; recentre component means so the
  // resampled deviations stay zero-mean, absorbing the shift into the carried
  // means (parameter means and the mean fields through the modes).
  Eigen::VectorXd xbar = Eigen::VectorXd::Zero(d);
  for (int j = 0; j < K; ++j) xbar += post.weight[(std::size_t)j] * post.mean[(std::size_t)j];
  for (int j = 0; j < K; ++j) post.mean[(std::size_t)j] -= xbar;

  auto absorb_shift = [&](const Eigen::VectorXd& shift) {
    if (nth) params.theta_mean += shift.segment(oth, nth);
    if (nal) params.alpha_mean += shift.segment(oal, nal);
    if (nbe) params.beta_mean += shift.segment(obe, nbe);
    if (ng) params.gamma_mean += shift.segment(og, ng);
    if (ns) {
      Eigen::VectorXd fshift = state.modes * shift.segment(oy, ns);
      const int nx = (int)state.mean[0].rows(), nz = (int)state.mean[0].cols();
      for (int t = 0; t < (int)state.mean.size(); ++t)
        state.mean[t] += Eigen::Map<const Eigen::ArrayXXd>(
            fshift.data() + (std::ptrdiff_t)t * nc, nx, nz);
    }
  };
  absorb_shift(xbar);

  // Resample the recentred posterior mixture and remove the Monte-Carlo
  // residual mean exactly.
  Eigen::MatrixXd Xp = sample_gmm(post, nr, rng);
  Eigen::RowVectorXd resid = Xp.colwise().mean();
  Xp.rowwise() -= resid;
  absorb_shift(resid.transpose());

  if (nth) params.dtheta = Xp.middleCols(oth, nth);
  if (nal) params.dalpha = Xp.middleCols(oal, nal);
  if (nbe) params.dbeta = Xp.middleCols(obe, nbe);
  if (ng) params.dgamma = Xp.middleCols(og, ng);
  if (ns) state.coeff = Xp.middleCols(oy, ns);

  for (int o = 0; o < ny; ++o)
    ytil(o) = obs.values(o) - apply_stencil(obs.stencil[o], state.mean[obs.tracer]);
  rep.innovation_post = ytil.norm();
  rep.max_weight = *std::max_element(post.weight.begin(), post.weight.end());
  rep.k_effective = 0;
  for (double w : post.weight)
    if (w > 1e-3) ++rep.k_effective;
  rep.weights = post.weight;
  return rep;
}

GaussianMixture gmm_observe(const GaussianMixture& prior, const Eigen::MatrixXd& H,
                            const Eigen::VectorXd& noise_var, const Eigen::VectorXd& y,
                            double jitter_rel, int* jittered) {
  const int K = prior.k();
  const int ny = (int)y.size();
  if (H.rows() != ny || H.cols() != prior.dim() || noise_var.size() != ny)
    throw std::invalid_argument("gmm_observe: dimension mismatch");

  GaussianMixture post;
  post.weight.resize((std::size_t)K);
  post.mean.resize((std::size_t)K);
  post.cov.resize((std::size_t)K);
  Eigen::VectorXd logw(K);
  const Eigen::MatrixXd R = noise_var.asDiagonal();
  for (int j = 0; j < K; ++j) {
    Eigen::MatrixXd HS = H * prior.cov[(std::size_t)j];  // ny x d
    Eigen::MatrixXd S = HS * H.transpose() + R;          // innovation covariance
    S = 0.5 * (S + S.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) {
      S.diagonal().array() += jitter_rel * std::max(S.trace() / ny, 1.0);
      llt.compute(S);
      if (jittered) ++*jittered;
      if (llt.info() != Eigen::Success)
        throw std::runtime_error("gmm_observe: innovation covariance not factorizable");
    }
    double logdet = 0.0;
    for (int i = 0; i < ny; ++i) logdet += std::log(llt.matrixL()(i, i));
    logdet *= 2.0;

    Eigen::VectorXd innov = y - H * prior.mean[(std::size_t)j];
    Eigen::MatrixXd Kg = llt.solve(HS).transpose();  // d x ny gain
    post.mean[(std::size_t)j] = prior.mean[(std::size_t)j] + Kg * innov;
    Eigen::MatrixXd C = prior.cov[(std::size_t)j] - Kg * HS;
    post.cov[(std::size_t)j] = 0.5 * (C + C.transpose());

    Eigen::VectorXd z = llt.matrixL().solve(innov);
    logw(j) = std::log(std::max(prior.weight[(std::size_t)j], 1e-300)) -
              0.5 * (ny * kLog2Pi + logdet + z.squaredNorm());
  }
  const double wmax = logw.maxCoeff();
  Eigen::VectorXd w = (logw.array() - wmax).exp();
  w /= w.sum();
  for (int j = 0; j < K; ++j) post.weight[(std::size_t)j] = w(j);
  return post;
}

}  // namespace bgclab
