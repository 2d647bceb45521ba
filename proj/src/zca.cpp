#include "nnk/zca.hpp"

#include "nnk/linalg.hpp"

namespace nnk {

Matrix Whitener::matrix() const {
  const Vector scale =
      (eigenvalues.array() + eps * eigenvalues.sum() / static_cast<double>(dim))
          .inverse()
          .sqrt();
  return eigenvectors * scale.asDiagonal() * eigenvectors.transpose();
}

Whitener fit_zca(const Matrix& train_inputs, double eps) {
  if (eps < 0.0) throw ConfigError("fit_zca: eps must be >= 0");
  if (train_inputs.rows() < 2) throw DimensionError("fit_zca: need at least two training inputs");
  const Eigen::Index d = train_inputs.cols();

  Matrix sigma = (train_inputs.transpose() * train_inputs) / static_cast<double>(d);

  Vector evals;
  Matrix evecs;
  sym_eigh(sigma, evals, evecs);  // ascending

  Whitener w;
  w.dim = d;
  w.eps = eps;
  w.eigenvectors.resize(d, d);
  w.eigenvalues.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) {  // store descending
    w.eigenvalues[i] = evals[d - 1 - i];
    w.eigenvectors.col(i) = evecs.col(d - 1 - i);
  }

  const double trace = w.eigenvalues.sum();
  if (trace <= 0.0) throw DimensionError("fit_zca: degenerate data (zero covariance trace)");

  // Rank-deficient covariances have (numerically) zero eigenvalues; floor
  // them so the eps=0 inverse square root stays finite. Inert for eps > 0.
  const double floor = 1e-12 * w.eigenvalues[0];
  for (Eigen::Index i = 0; i < d; ++i)
    w.eigenvalues[i] = std::max(w.eigenvalues[i], floor);
  return w;
}

Matrix apply_whitener(const Whitener& w, const Matrix& inputs) {
  if (inputs.cols() != w.dim)
    throw DimensionError("apply_whitener: input dimension " + std::to_string(inputs.cols()) +
                         " != fitted dimension " + std::to_string(w.dim));
  const Vector scale =
      (w.eigenvalues.array() + w.eps * w.eigenvalues.sum() / static_cast<double>(w.dim))
          .inverse()
          .sqrt();
  // X W^T with W symmetric: (X U) scale U^T
  return ((inputs * w.eigenvectors) * scale.asDiagonal()) * w.eigenvectors.transpose();
}

}  // namespace nnk
