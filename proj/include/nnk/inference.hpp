// Exact GP inference with the trace-normalized diagonal regularizer
//   K_reg = K + eps * tr(K)/m * I,
// analytic gradient-flow prediction on the NTK, regularizer grid search on
// the validation split, and the accuracy/MSE metrics.
#pragma once

#include <optional>
#include <vector>

#include "nnk/common.hpp"

namespace nnk {

enum class KernelKind { NNGP, NTK };

inline const char* kernel_kind_name(KernelKind k) {
  return k == KernelKind::NNGP ? "nngp" : "ntk";
}

struct Posterior {
  Matrix mean;                    // n_test x K
  std::optional<Vector> variance;  // per test point (class-agnostic)
  double eps = 0.0;
  KernelKind kind = KernelKind::NNGP;
};

// Posterior mean (and, optionally, predictive variance) via a Cholesky
// factorization of the regularized train kernel. One jitter retry of
// 1e-10*tr/m separates marginal rounding from genuine PSD violations; a
// persistent failure raises ConditioningError carrying the smallest
// eigenvalue and a suggested eps.
Posterior gp_regress(const Matrix& k_train, const Matrix& k_cross, const Vector& k_test_diag,
                     const Matrix& y_train, double eps, bool want_variance = false,
                     KernelKind kind = KernelKind::NNGP);

// Mean prediction of MSE gradient flow at time t on training kernel `theta`:
//   mu(t) = K_cross Theta^+ (I - exp(-eta Theta t / (m K))) Y.
// Computed by eigendecomposition; eigenvalues below 1e-12*lambda_max use the
// series limit of lambda^+(1 - e^(-a lambda)) -> a. t may be infinity.
Posterior gradient_flow_predict(const Matrix& theta_train, const Matrix& k_cross,
                                const Matrix& y_train, double t, double eta);

struct RegularizerTable {
  std::vector<double> eps;
  std::vector<double> accuracy;
  std::vector<double> mse;
};

// Default grid: {0} plus 14 log-spaced values in [1e-7, 1e2].
std::vector<double> default_eps_grid();

// Returns the eps maximizing validation accuracy (ties toward smaller eps)
// plus the whole table. A single eigendecomposition of k_train serves the
// whole grid; candidates whose regularized spectrum is not positive are
// skipped, and if all fail a ConditioningError is raised.
std::pair<double, RegularizerTable> tune_regularizer(const Matrix& k_train,
                                                     const Matrix& k_cross_valid,
                                                     const Matrix& y_train,
                                                     const Eigen::VectorXi& labels_valid,
                                                     const std::vector<double>& grid);

struct EvalResult {
  double accuracy = 0.0;
  double mse = 0.0;
};

// Accuracy by argmax (ties to the lowest class index) and MSE with the
// 1/(2nK) loss normalization against mean-subtracted one-hot targets.
EvalResult evaluate(const Matrix& mean, const Eigen::VectorXi& labels);

}  // namespace nnk
