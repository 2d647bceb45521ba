#include <doctest.h>

#include <cmath>

#include "nnk/inference.hpp"
#include "nnk/kernels.hpp"
#include "test_helpers.hpp"

using namespace nnk;

TEST_CASE("gp_regress hand-solved 2x2 system") {
  Matrix k(2, 2);
  k << 2, 1, 1, 2;
  Matrix cross(1, 2);
  cross << 1, 1;
  Matrix y(2, 1);
  y << 1, -1;
  Posterior p = gp_regress(k, cross, Vector(), y, 0.0);
  CHECK(p.mean(0, 0) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("gp_regress interpolates training targets at eps=0") {
  Dataset ds = nnk_test::standardized_synthetic(61, 64, 4, 4, 3);
  KernelPair k = fcn_kernel(ds.images, ds.images, fcn_base());
  Matrix y = encode_targets(ds.labels, ds.num_classes);
  Posterior p = gp_regress(k.nngp, k.nngp, Vector(), y, 0.0);
  CHECK((p.mean - y).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("gp_regress large-eps limit drives the mean to zero") {
  Dataset ds = nnk_test::standardized_synthetic(62, 32, 4, 4, 2);
  KernelPair k = fcn_kernel(ds.images, ds.images, fcn_base());
  Matrix y = encode_targets(ds.labels, ds.num_classes);
  Posterior p = gp_regress(k.nngp, k.nngp, Vector(), y, 1e12);
  CHECK(p.mean.cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("gp_regress scale invariance of the trace-normalized regularizer") {
  Dataset ds = nnk_test::standardized_synthetic(63, 24, 4, 4, 2);
  KernelPair k = fcn_kernel(ds.images, ds.images, fcn_base());
  Matrix cross = k.nngp.topRows(5);
  Matrix y = encode_targets(ds.labels, ds.num_classes);
  Posterior a = gp_regress(k.nngp, cross, Vector(), y, 0.37);
  Posterior b = gp_regress(Matrix(17.0 * k.nngp), Matrix(17.0 * cross), Vector(), y, 0.37);
  CHECK((a.mean - b.mean).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("gp_regress predictive variance: positive, and shrinks with more data") {
  Dataset ds = nnk_test::standardized_synthetic(64, 40, 4, 4, 2);
  Dataset te = make_synthetic(64, 6, 10, 4, 4, 2, Split::Test);
  standardize(te, {});
  ArchitectureSpec arch = fcn_base();
  Matrix y = encode_targets(ds.labels, ds.num_classes);
  auto diag = fcn_kernel_diag(te.images, arch).first;

  Matrix sub20 = ds.images.topRows(20);
  Matrix y20 = y.topRows(20);
  KernelPair k20 = fcn_kernel(sub20, sub20, arch);
  KernelPair c20 = fcn_kernel(te.images, sub20, arch);
  Posterior p20 = gp_regress(k20.nngp, c20.nngp, diag, y20, 0.0, true);

  KernelPair k40 = fcn_kernel(ds.images, ds.images, arch);
  KernelPair c40 = fcn_kernel(te.images, ds.images, arch);
  Posterior p40 = gp_regress(k40.nngp, c40.nngp, diag, y, 0.0, true);

  REQUIRE(p20.variance.has_value());
  REQUIRE(p40.variance.has_value());
  CHECK(p20.variance->minCoeff() >= 0.0);
  // nested training sets: variance is monotone non-increasing
  for (Eigen::Index i = 0; i < 6; ++i)
    CHECK((*p40.variance)[i] <= (*p20.variance)[i] + 1e-9);
}

TEST_CASE("gp_regress conditioning error reports min eigenvalue and suggests eps") {
  Matrix k(2, 2);
  k << 1.0, 2.0, 2.0, 1.0;  // indefinite
  Matrix y(2, 1);
  y << 1, -1;
  try {
    gp_regress(k, k, Vector(), y, 0.0);
    FAIL("expected ConditioningError");
  } catch (const ConditioningError& e) {
    CHECK(e.min_eigenvalue == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(e.suggested_eps > 0.0);
  }
}

TEST_CASE("gradient_flow_predict scalar closed form and limits") {
  Matrix theta(1, 1);
  theta << 2.0;
  Matrix cross(1, 1);
  cross << 2.0;
  Matrix y(1, 1);
  y << 1.0;
  // t=0: zero function
  CHECK(gradient_flow_predict(theta, cross, y, 0.0, 1.0).mean(0, 0) == doctest::Approx(0.0));
  // eta=1, t=1, m=1, K=1: (2/2)(1 - e^-2)
  CHECK(gradient_flow_predict(theta, cross, y, 1.0, 1.0).mean(0, 0) ==
        doctest::Approx(1.0 - std::exp(-2.0)));
  CHECK_THROWS_AS(gradient_flow_predict(theta, cross, y, -1.0, 1.0), ConfigError);
}

TEST_CASE("gradient flow at t=inf matches eps=0 regression on a well-conditioned kernel") {
  Dataset ds = nnk_test::standardized_synthetic(65, 200, 4, 4, 3);
  Dataset te = make_synthetic(65, 20, 10, 4, 4, 3, Split::Test);
  standardize(te, {});
  KernelPair k = fcn_kernel(ds.images, ds.images, fcn_base());
  KernelPair c = fcn_kernel(te.images, ds.images, fcn_base());
  Matrix y = encode_targets(ds.labels, ds.num_classes);
  Posterior flow = gradient_flow_predict(k.ntk, c.ntk, y, std::numeric_limits<double>::infinity(),
                                         1.0);
  Posterior exact = gp_regress(k.ntk, c.ntk, Vector(), y, 0.0, false, KernelKind::NTK);
  CHECK((flow.mean - exact.mean).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("tune_regularizer basics") {
  Dataset tr = nnk_test::standardized_synthetic(66, 60, 4, 4, 2);
  Dataset va = make_synthetic(66, 30, 10, 4, 4, 2, Split::Valid);
  standardize(va, {});
  KernelPair k = fcn_kernel(tr.images, tr.images, fcn_base());
  KernelPair c = fcn_kernel(va.images, tr.images, fcn_base());
  Matrix y = encode_targets(tr.labels, tr.num_classes);

  auto [best_single, table_single] =
      tune_regularizer(k.nngp, c.nngp, y, va.labels, {0.0});
  CHECK(best_single == 0.0);
  CHECK(table_single.eps.size() == 1);

  // duplicated grid entries collapse
  auto [best_dup, table_dup] =
      tune_regularizer(k.nngp, c.nngp, y, va.labels, {0.0, 1e-3, 1e-3, 0.0});
  auto [best_clean, table_clean] = tune_regularizer(k.nngp, c.nngp, y, va.labels, {0.0, 1e-3});
  CHECK(best_dup == best_clean);
  CHECK(table_dup.eps.size() == table_clean.eps.size());

  CHECK_THROWS_AS(tune_regularizer(k.nngp, c.nngp, y, va.labels, {}), ConfigError);

  // default grid is {0} plus 14 log-spaced points
  const auto grid = default_eps_grid();
  CHECK(grid.size() == 15);
  CHECK(grid.front() == 0.0);
  CHECK(grid[1] == doctest::Approx(1e-7));
  CHECK(grid.back() == doctest::Approx(1e2));
}

TEST_CASE("tune_regularizer prefers eps > 0 on a noise-broken kernel") {
  // synthetic well-decaying kernel plus strong symmetric noise: plain
  // inversion overfits the noise-dominated directions
  Dataset tr = nnk_test::standardized_synthetic(67, 120, 4, 4, 3);
  Dataset va = make_synthetic(67, 60, 10, 4, 4, 3, Split::Valid);
  standardize(va, {});
  ArchitectureSpec arch = fcn_base();
  KernelPair k = fcn_kernel(tr.images, tr.images, arch);
  KernelPair c = fcn_kernel(va.images, tr.images, arch);
  Matrix y = encode_targets(tr.labels, tr.num_classes);
  Matrix noisy = k.nngp;
  const std::uint64_t key = 1234;
  for (Eigen::Index i = 0; i < noisy.rows(); ++i)
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double n = 1e-3 * normal_from_key(key, static_cast<std::uint64_t>(i * 1000 + j));
      noisy(i, j) += n;
      if (i != j) noisy(j, i) += n;
    }
  auto [best, table] = tune_regularizer(noisy, c.nngp, y, va.labels, default_eps_grid());
  CHECK(best > 0.0);
}

TEST_CASE("evaluate: exact targets, zero mean, tie-breaking") {
  Eigen::VectorXi labels(3);
  labels << 1, 0, 2;
  Matrix targets = encode_targets(labels, 10);
  EvalResult exact = evaluate(targets, labels);
  CHECK(exact.accuracy == 1.0);
  CHECK(exact.mse == doctest::Approx(0.0));

  EvalResult zero = evaluate(Matrix::Zero(3, 10), labels);
  CHECK(zero.mse == doctest::Approx(0.045));  // (0.81 + 9*0.01) / 20

  Eigen::VectorXi zeros(2);
  zeros << 0, 0;
  EvalResult ties = evaluate(Matrix::Constant(2, 10, 0.3), zeros);
  CHECK(ties.accuracy == 1.0);  // all-equal rows resolve to class 0
}
