// Regularized ZCA whitening. For row-per-example inputs X (count x d) the
// feature covariance is Sigma = X^T X / d and the whitening map is
//   W = U sqrt((D + eps*tr(D)/d * I)^-1) U^T,
// fit on the training split only. The trace-relative regularizer makes eps
// invariant to the input scale. Inputs are standardized before fitting and
// callers re-standardize after applying.
#pragma once

#include "nnk/common.hpp"

namespace nnk {

struct Whitener {
  Matrix eigenvectors;  // d x d, orthogonal
  Vector eigenvalues;   // descending, >= 0 (clipped)
  double eps = 0.0;
  Eigen::Index dim = 0;

  Matrix matrix() const;  // the dense symmetric W, mostly for tests
};

Whitener fit_zca(const Matrix& train_inputs, double eps);

Matrix apply_whitener(const Whitener& w, const Matrix& inputs);

}  // namespace nnk
