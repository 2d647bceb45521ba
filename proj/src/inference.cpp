#include "nnk/inference.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>

#include "nnk/datasets.hpp"
#include "nnk/linalg.hpp"

namespace nnk {

Posterior gp_regress(const Matrix& k_train, const Matrix& k_cross, const Vector& k_test_diag,
                     const Matrix& y_train, double eps, bool want_variance, KernelKind kind) {
  const Eigen::Index m = k_train.rows();
  if (k_train.cols() != m) throw DimensionError("gp_regress: train kernel not square");
  if (k_cross.cols() != m) throw DimensionError("gp_regress: cross kernel has wrong column count");
  if (y_train.rows() != m) throw DimensionError("gp_regress: target rows != kernel size");
  if (eps < 0.0) throw ConfigError("gp_regress: eps must be >= 0");

  const double trace_over_m = k_train.trace() / static_cast<double>(m);
  Matrix k_reg = k_train;
  k_reg.diagonal().array() += eps * trace_over_m;

  Eigen::LLT<Matrix> llt(k_reg);
  if (llt.info() != Eigen::Success) {
    // one jitter retry to separate marginal rounding from real PSD breakage
    k_reg.diagonal().array() += 1e-10 * trace_over_m;
    llt.compute(k_reg);
    if (llt.info() != Eigen::Success) {
      const double min_eig = sym_eigvals(k_train).minCoeff();
      const double suggested = min_eig < 0.0 ? -2.0 * min_eig / trace_over_m : 1e-6;
      throw ConditioningError(
          "gp_regress: factorization failed; training kernel is not positive definite "
          "(min eigenvalue " +
              std::to_string(min_eig) + "); try eps >= " + std::to_string(suggested),
          min_eig, suggested);
    }
  }

  Posterior post;
  post.eps = eps;
  post.kind = kind;
  post.mean = k_cross * llt.solve(y_train);
  if (want_variance) {
    if (k_test_diag.size() != k_cross.rows())
      throw DimensionError("gp_regress: test diagonal size != number of test points");
    Matrix solved = llt.solve(k_cross.transpose());  // m x n
    Vector var(k_cross.rows());
    for (Eigen::Index i = 0; i < k_cross.rows(); ++i)
      var[i] = k_test_diag[i] - k_cross.row(i).dot(solved.col(i));
    post.variance = var.cwiseMax(0.0);
  }
  return post;
}

Posterior gradient_flow_predict(const Matrix& theta_train, const Matrix& k_cross,
                                const Matrix& y_train, double t, double eta) {
  if (t < 0.0) throw ConfigError("gradient_flow_predict: time must be >= 0");
  const Eigen::Index m = theta_train.rows();
  if (theta_train.cols() != m) throw DimensionError("gradient_flow_predict: kernel not square");
  if (y_train.rows() != m) throw DimensionError("gradient_flow_predict: target rows mismatch");
  const double num_classes = static_cast<double>(y_train.cols());

  Vector evals;
  Matrix evecs;
  sym_eigh(theta_train, evals, evecs);
  const double floor = 1e-12 * std::max(evals.maxCoeff(), 0.0);
  // a = eta * t / (m K); the MSE loss carries the 1/(2mK) normalization
  const double a = eta * t / (static_cast<double>(m) * num_classes);

  Vector h(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double lam = evals[i];
    if (std::isinf(t)) {
      h[i] = lam > floor ? 1.0 / lam : 0.0;  // pseudo-inverse on the floored spectrum
    } else if (lam > floor) {
      h[i] = -std::expm1(-a * lam) / lam;
    } else {
      h[i] = a;  // series limit of lambda^+ (1 - e^{-a lambda})
    }
  }

  Posterior post;
  post.kind = KernelKind::NTK;
  post.eps = 0.0;
  Matrix proj = evecs.transpose() * y_train;        // m x K
  proj.array().colwise() *= h.array();
  post.mean = k_cross * (evecs * proj);
  return post;
}

std::vector<double> default_eps_grid() {
  std::vector<double> grid{0.0};
  for (int k = 0; k < 14; ++k)
    grid.push_back(std::pow(10.0, -7.0 + 9.0 * k / 13.0));
  return grid;
}

std::pair<double, RegularizerTable> tune_regularizer(const Matrix& k_train,
                                                     const Matrix& k_cross_valid,
                                                     const Matrix& y_train,
                                                     const Eigen::VectorXi& labels_valid,
                                                     const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("tune_regularizer: empty grid");
  std::vector<double> eps_values = grid;
  std::sort(eps_values.begin(), eps_values.end());
  eps_values.erase(std::unique(eps_values.begin(), eps_values.end()), eps_values.end());

  const Eigen::Index m = k_train.rows();
  const double trace_over_m = k_train.trace() / static_cast<double>(m);

  Vector evals;
  Matrix evecs;
  sym_eigh(k_train, evals, evecs);
  const Matrix proj_y = evecs.transpose() * y_train;      // m x K
  const Matrix cross_u = k_cross_valid * evecs;           // n x m

  RegularizerTable table;
  double best_eps = std::numeric_limits<double>::quiet_NaN();
  double best_acc = -1.0;
  for (double eps : eps_values) {
    const double shift = eps * trace_over_m;
    if (evals.minCoeff() + shift <= 0.0) continue;  // not positive definite; skip
    Matrix scaled = proj_y;
    scaled.array().colwise() /= (evals.array() + shift);
    const Matrix mean = cross_u * scaled;
    const EvalResult r = evaluate(mean, labels_valid);
    table.eps.push_back(eps);
    table.accuracy.push_back(r.accuracy);
    table.mse.push_back(r.mse);
    if (r.accuracy > best_acc) {  // ties keep the earlier (smaller) eps
      best_acc = r.accuracy;
      best_eps = eps;
    }
  }
  if (table.eps.empty()) {
    const double min_eig = evals.minCoeff();
    throw ConditioningError("tune_regularizer: every grid candidate failed factorization",
                            min_eig, -2.0 * min_eig / trace_over_m);
  }
  return {best_eps, table};
}

EvalResult evaluate(const Matrix& mean, const Eigen::VectorXi& labels) {
  if (mean.rows() != labels.size()) throw DimensionError("evaluate: row/label count mismatch");
  const Eigen::Index n = mean.rows();
  const int num_classes = static_cast<int>(mean.cols());
  const Matrix targets = encode_targets(labels, num_classes);

  Eigen::Index correct = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    int arg = 0;
    for (int k = 1; k < num_classes; ++k)
      if (mean(i, k) > mean(i, arg)) arg = k;  // strict: ties keep lowest index
    if (arg == labels[i]) ++correct;
  }
  EvalResult r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  r.mse = (mean - targets).squaredNorm() / (2.0 * static_cast<double>(n) * num_classes);
  return r;
}

}  // namespace nnk
