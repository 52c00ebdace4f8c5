#pragma once

#include <Eigen/Dense>
#include <vector>

#include "bgclab/bgc.hpp"
#include "bgclab/grid.hpp"

namespace bgclab {

// Reduced-order uncertain tracer state: mean fields, an orthonormal mode
// basis, and coefficient samples. A mode column concatenates the per-tracer
// fields over the full grid (solid cells zero), tracer t occupying rows
// [t*ncells, (t+1)*ncells) with the grid's column-major cell order.
// Orthonormality is with respect to the sigma-normalized volume-averaged
// inner product over fluid cells.
struct DOState {
  ModelId model = ModelId::npz;
  int n_modes = 0;
  int n_samples = 0;
  std::vector<Eigen::ArrayXXd> mean;  // one (nx, nz) field per tracer
  Eigen::MatrixXd modes;              // (n_tracers*ncells) x n_modes
  Eigen::MatrixXd coeff;              // n_samples x n_modes, zero sample mean
  Eigen::VectorXd sigma_nd;           // per-tracer normalization scales
};

// Uncertain scalar parameters carried alongside the field state, stored as
// means plus zero-mean per-sample deviations (sample r uses mean + dev.row(r)).
// theta are regular reaction parameters, alpha gates presence of structural
// terms, beta gates model complexity, gamma holds mortality-expansion node
// coefficients.
struct ParamEnsemble {
  std::vector<ParamId> theta_ids;
  Eigen::VectorXd theta_mean;
  Eigen::MatrixXd dtheta;  // n_samples x n_theta
  Eigen::VectorXd alpha_mean;
  Eigen::MatrixXd dalpha;
  Eigen::VectorXd beta_mean;
  Eigen::MatrixXd dbeta;
  Eigen::VectorXd gamma_mean;
  Eigen::MatrixXd dgamma;

  int n_theta() const { return (int)theta_mean.size(); }
  int n_alpha() const { return (int)alpha_mean.size(); }
  int n_beta() const { return (int)beta_mean.size(); }
  int n_gamma() const { return (int)gamma_mean.size(); }
  // Size of the augmented parameter-plus-coefficient vector used by the filter.
  int n_augmented(int n_modes) const {
    return n_theta() + n_alpha() + n_beta() + n_gamma() + n_modes;
  }
};

// sigma-normalized volume-averaged inner product:
// <a,b> = (1/|D|) sum_fluid vol * sum_tracers a_t b_t / sigma_t^2.
class InnerProduct {
 public:
  InnerProduct(const Domain& dom, const Eigen::VectorXd& sigma_nd);

  double dot(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const {
    return a.cwiseProduct(w_).dot(b);
  }
  double norm(const Eigen::VectorXd& a) const { return std::sqrt(dot(a, a)); }
  // G(i,j) = <A_i, B_j> for column collections A, B.
  Eigen::MatrixXd gram(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) const {
    return A.transpose() * w_.asDiagonal() * B;
  }
  const Eigen::VectorXd& weights() const { return w_; }

 private:
  Eigen::VectorXd w_;
};

// Map a tracer block of a concatenated column vector as a 2-D field.
inline Eigen::Map<Eigen::ArrayXXd> tracer_block(Eigen::VectorXd& col, int t, const GridSpec& g) {
  return Eigen::Map<Eigen::ArrayXXd>(col.data() + (std::ptrdiff_t)t * g.ncells(), g.nx, g.nz);
}
inline Eigen::Map<const Eigen::ArrayXXd> tracer_block(const Eigen::VectorXd& col, int t,
                                                      const GridSpec& g) {
  return Eigen::Map<const Eigen::ArrayXXd>(col.data() + (std::ptrdiff_t)t * g.ncells(), g.nx,
                                           g.nz);
}

}  // namespace bgclab
