#include "bgclab/gmm.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace bgclab {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Eigenvalue floor relative to trace/dim; returns the number of floored
// eigenvalues and sets all_floored when the whole spectrum sat at the floor.
int floor_spd(Eigen::MatrixXd& S, double floor_rel, bool* all_floored) {
  const int d = (int)S.rows();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  const double floor_v = floor_rel * std::max(es.eigenvalues().sum(), 1e-12) / d;
  int n_floored = 0;
  Eigen::VectorXd lam = es.eigenvalues();
  for (int i = 0; i < d; ++i)
    if (lam(i) < floor_v) {
      lam(i) = floor_v;
      ++n_floored;
    }
  if (all_floored) *all_floored = (n_floored == d);
  if (n_floored > 0)
    S = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
  return n_floored;
}

// Per-sample log density of one Gaussian, written into one column of `out`.
void log_density_column(const Eigen::MatrixXd& X, const Eigen::VectorXd& mu,
                        const Eigen::MatrixXd& S, Eigen::MatrixXd& out, int col) {
  const int d = (int)X.cols();
  Eigen::LLT<Eigen::MatrixXd> llt(S);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("mixture component covariance not positive definite");
  const Eigen::MatrixXd& L = llt.matrixL();
  double logdet = 0.0;
  for (int i = 0; i < d; ++i) logdet += std::log(L(i, i));
  logdet *= 2.0;
  Eigen::MatrixXd Z =
      llt.matrixL().solve((X.rowwise() - mu.transpose()).transpose());  // d x m
  out.col(col) = ((-0.5 * (d * kLog2Pi + logdet)) -
                  0.5 * Z.colwise().squaredNorm().transpose().array())
                     .matrix();
}

// Greedy farthest-point pick: the sample maximizing the minimum distance to
// the given centres (or the largest-norm sample when there are none).
int farthest_sample(const Eigen::MatrixXd& X, const std::vector<Eigen::VectorXd>& centres) {
  const int m = (int)X.rows();
  int best = 0;
  double best_d = -1.0;
  for (int r = 0; r < m; ++r) {
    double dmin = std::numeric_limits<double>::max();
    if (centres.empty())
      dmin = X.row(r).squaredNorm();
    else
      for (const auto& c : centres)
        dmin = std::min(dmin, (X.row(r).transpose() - c).squaredNorm());
    if (dmin > best_d) {
      best_d = dmin;
      best = r;
    }
  }
  return best;
}

}  // namespace

EmResult fit_em(const Eigen::MatrixXd& samples, int K, std::uint64_t seed,
                const EmOptions& opts) {
  (void)seed;  // the procedure is deterministic; the seed is part of the
               // interface so callers can thread reproducibility through
  const int m = (int)samples.rows();
  const int d = (int)samples.cols();
  if (m < 1 || d < 1) throw std::invalid_argument("fit_em: empty sample matrix");
  if (K < 1) throw std::invalid_argument("fit_em: K must be >= 1");

  // Standardize columns for conditioning; fold back at the end.
  Eigen::RowVectorXd colmean = samples.colwise().mean();
  Eigen::MatrixXd X = samples.rowwise() - colmean;
  Eigen::RowVectorXd colstd =
      (X.colwise().squaredNorm() / std::max(m - 1, 1)).cwiseSqrt();
  for (int c = 0; c < d; ++c)
    if (!(colstd(c) > 1e-300)) colstd(c) = 1.0;
  X.array().rowwise() /= colstd.array();
  const double log_jacobian = (double)m * colstd.array().log().sum();

  EmResult res;
  Eigen::MatrixXd global_cov =
      X.transpose() * X / std::max(m - 1, 1);
  floor_spd(global_cov, opts.cov_floor_rel, nullptr);

  // Greedy farthest-point seeding.
  std::vector<Eigen::VectorXd> mu;
  for (int j = 0; j < K; ++j) mu.push_back(X.row(farthest_sample(X, mu)).transpose());
  std::vector<Eigen::MatrixXd> cov(K, global_cov);
  std::vector<double> w(K, 1.0 / K);
  std::vector<int> reseeds_used(K, 0);

  Eigen::MatrixXd logp(m, K), resp(m, K);
  double ll_prev = -std::numeric_limits<double>::max();
  bool structure_changed = false;

  for (int it = 1; it <= opts.max_iter; ++it) {
    res.iterations = it;
    const int k = (int)w.size();
    logp.resize(m, k);
    for (int j = 0; j < k; ++j) {
      log_density_column(X, mu[j], cov[j], logp, j);
      logp.col(j).array() += std::log(std::max(w[j], 1e-300));
    }
    Eigen::VectorXd rowmax = logp.rowwise().maxCoeff();
    Eigen::VectorXd lse =
        rowmax.array() +
        (logp.colwise() - rowmax).array().exp().rowwise().sum().log();
    const double ll = lse.sum();
    resp = (logp.colwise() - lse).array().exp();

    res.loglik_trace.push_back(ll - log_jacobian);
    if (!structure_changed && ll - ll_prev < opts.rel_tol * (std::abs(ll_prev) + 1.0) &&
        it > 1) {
      res.converged = true;
      res.loglik = ll - log_jacobian;
      break;
    }
    ll_prev = ll;
    res.loglik = ll - log_jacobian;
    structure_changed = false;

    // M-step with the covariance floor.
    std::vector<bool> collapsed(k, false);
    for (int j = 0; j < k; ++j) {
      const double nj = resp.col(j).sum();
      if (nj < opts.collapse_weight * m) {
        collapsed[j] = true;
        continue;
      }
      w[j] = nj / m;
      mu[j] = X.transpose() * resp.col(j) / nj;
      Eigen::MatrixXd Xc = X.rowwise() - mu[j].transpose();
      cov[j] = Xc.transpose() * resp.col(j).asDiagonal() * Xc / nj;
      bool all_floored = false;
      res.floored += floor_spd(cov[j], opts.cov_floor_rel, &all_floored);
      if (all_floored || w[j] < opts.collapse_weight) collapsed[j] = true;
    }

    // Collapsed components: one re-seed at the farthest sample, then removal.
    for (int j = (int)w.size() - 1; j >= 0; --j) {
      if (!collapsed[j]) continue;
      structure_changed = true;
      if (reseeds_used[j] == 0) {
        ++reseeds_used[j];
        ++res.reseeded;
        std::vector<Eigen::VectorXd> others;
        for (int q = 0; q < (int)w.size(); ++q)
          if (q != j) others.push_back(mu[q]);
        mu[j] = X.row(farthest_sample(X, others)).transpose();
        cov[j] = global_cov;
        w[j] = 1.0 / (double)w.size();
      } else {
        ++res.dropped;
        mu.erase(mu.begin() + j);
        cov.erase(cov.begin() + j);
        w.erase(w.begin() + j);
        reseeds_used.erase(reseeds_used.begin() + j);
      }
    }
    if (w.empty()) throw std::runtime_error("fit_em: every component collapsed");
    double wsum = 0.0;
    for (double v : w) wsum += v;
    for (double& v : w) v /= wsum;
  }

  // Fold the standardization back into the mixture parameters.
  const int k = (int)w.size();
  res.mix.weight = w;
  res.mix.mean.resize(k);
  res.mix.cov.resize(k);
  for (int j = 0; j < k; ++j) {
    res.mix.mean[j] = colmean.transpose() + colstd.transpose().cwiseProduct(mu[j]);
    res.mix.cov[j] =
        colstd.transpose().asDiagonal() * cov[j] * colstd.transpose().asDiagonal();
  }
  return res;
}

double gmm_loglik(const GaussianMixture& mix, const Eigen::MatrixXd& samples) {
  const int m = (int)samples.rows();
  const int k = mix.k();
  Eigen::MatrixXd logp(m, k);
  for (int j = 0; j < k; ++j) {
    log_density_column(samples, mix.mean[j], mix.cov[j], logp, j);
    logp.col(j).array() += std::log(std::max(mix.weight[j], 1e-300));
  }
  Eigen::VectorXd rowmax = logp.rowwise().maxCoeff();
  return (rowmax.array() +
          (logp.colwise() - rowmax).array().exp().rowwise().sum().log())
      .sum();
}

BicSelection select_k_bic(const Eigen::MatrixXd& samples, int k_max, std::uint64_t seed,
                          const EmOptions& opts) {
  const int m = (int)samples.rows();
  const int d = (int)samples.cols();
  BicSelection sel;
  if (k_max < 1) throw std::invalid_argument("select_k_bic: k_max must be >= 1");

  if (m < d + 2) {
    sel.forced_k1 = true;
    sel.fit = fit_em(samples, 1, seed, opts);
    sel.k_star = 1;
    sel.bic = -2.0 * sel.fit.loglik + gmm_free_params(1, d) * std::log((double)m);
    sel.bic_trace.push_back(sel.bic);
    return sel;
  }

  double best = std::numeric_limits<double>::max();
  double prev = std::numeric_limits<double>::max();
  int increases = 0;
  for (int K = 1; K <= k_max; ++K) {
    EmResult fit = fit_em(samples, K, seed, opts);
    const double bic = -2.0 * fit.loglik +
                       gmm_free_params(fit.mix.k(), d) * std::log((double)m);
    sel.bic_trace.push_back(bic);
    if (bic < best) {
      best = bic;
      sel.k_star = K;
      sel.bic = bic;
      sel.fit = std::move(fit);
    }
    increases = (K > 1 && bic > prev) ? increases + 1 : 0;
    prev = bic;
    if (increases >= 3) break;
  }
  return sel;
}

Eigen::MatrixXd sample_gmm(const GaussianMixture& mix, int n, Rng& rng) {
  const int k = mix.k();
  const int d = mix.dim();
  std::vector<Eigen::MatrixXd> chol(k);
  for (int j = 0; j < k; ++j) {
    Eigen::LLT<Eigen::MatrixXd> llt(mix.cov[j]);
    if (llt.info() != Eigen::Success) {
      Eigen::MatrixXd S = mix.cov[j];
      floor_spd(S, 1e-12, nullptr);
      llt.compute(S);
      if (llt.info() != Eigen::Success)
        throw std::runtime_error("sample_gmm: covariance factorization failed");
    }
    chol[j] = llt.matrixL();
  }
  Eigen::MatrixXd out(n, d);
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform(0.0, 1.0);
    int j = 0;
    double acc = 0.0;
    for (; j < k - 1; ++j) {
      acc += mix.weight[j];
      if (u <= acc) break;
    }
    Eigen::VectorXd z(d);
    for (int e = 0; e < d; ++e) z(e) = rng.normal();
    out.row(i) = (mix.mean[j] + chol[j] * z).transpose();
  }
  return out;
}

}  // namespace bgclab
