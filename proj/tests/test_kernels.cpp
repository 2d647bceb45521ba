#include <doctest.h>

#include <cmath>

#include "nnk/kernels.hpp"
#include "test_helpers.hpp"

using namespace nnk;

namespace {
constexpr double kPi = 3.14159265358979323846;

// Scalar NNGP/NTK recursion written independently of the library loops;
// returns the readout covariance given k0 and the diagonal tracks.
std::pair<double, double> manual_fcn(double k0, double d0a, double d0b, int depth, double sw,
                                     double sb) {
  double k = k0, th = k0, da = d0a, db = d0b;
  for (int l = 0; l < depth; ++l) {
    const double norm = std::sqrt(da * db);
    const double c = std::clamp(k / norm, -1.0, 1.0);
    const double theta = std::acos(c);
    const double ephi = norm / (2 * kPi) * (std::sin(theta) + (kPi - theta) * c);
    const double edphi = (kPi - theta) / (2 * kPi);
    const double kn = sb + sw * ephi;
    th = kn + sw * edphi * th;
    k = kn;
    da = sb + sw * da / 2;
    db = sb + sw * db / 2;
  }
  return {k, th};
}

}  // namespace

TEST_CASE("relu_moments closed-form values") {
  auto [p1, d1] = relu_moments(1, 1, 1);
  CHECK(p1 == doctest::Approx(0.5));
  CHECK(d1 == doctest::Approx(0.5));
  auto [p2, d2] = relu_moments(1, 0, 1);
  CHECK(p2 == doctest::Approx(1.0 / (2 * kPi)));
  CHECK(d2 == doctest::Approx(0.25));
  auto [p3, d3] = relu_moments(1, -1, 1);
  CHECK(p3 == doctest::Approx(0.0));
  CHECK(d3 == doctest::Approx(0.0));
  CHECK_THROWS_AS(relu_moments(0.0, 0.0, 1.0), DimensionError);
  CHECK_THROWS_AS(relu_moments(1.0, 0.0, -1.0), DimensionError);
}

TEST_CASE("relu_moments invariants: halving, clamp continuity, E_dphi range") {
  for (double q : {0.3, 1.0, 4.2}) {
    auto [p, d] = relu_moments(q, q, q);
    CHECK(p == doctest::Approx(q / 2));
    CHECK(d == doctest::Approx(0.5));
  }
  // continuity across the clamp boundary: acos(1-u) ~ sqrt(2u), so the
  // moments move by O(sqrt(1e-12)) across it
  auto [pa, da] = relu_moments(1.0, 1.0 - 1e-12, 1.0);
  auto [pb, db] = relu_moments(1.0, 1.0 + 1e-12, 1.0);
  CHECK(std::abs(pa - pb) < 1e-5);
  CHECK(std::abs(da - db) < 1e-5);
  for (double c : {-0.9, -0.2, 0.0, 0.7, 0.999}) {
    auto [p, d] = relu_moments(2.0, 2.0 * c, 2.0);
    CHECK(d >= 0.0);
    CHECK(d <= 0.5);
    (void)p;
  }
}

TEST_CASE("fcn_kernel depth 0 is the affine readout kernel") {
  Matrix x(2, 4);
  x << 1, 0, -1, 2, 0.5, 1, 0, -1;
  ArchitectureSpec arch{Family::FCN, 0, 16, 2.0, 0.01, 3};
  KernelPair k = fcn_kernel(x, x, arch);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      const double expect = 0.01 + 2.0 * x.row(i).dot(x.row(j)) / 4.0;
      CHECK(k.nngp(i, j) == doctest::Approx(expect));
      CHECK(k.ntk(i, j) == doctest::Approx(expect));
    }
}

TEST_CASE("critical initialization fixed point: diagonal stays at 2") {
  // |x|^2 = d, sw=2, sb=0: ReLU halving cancels the weight variance
  Matrix x = Matrix::Ones(1, 8);
  ArchitectureSpec arch{Family::FCN, 7, 16, 2.0, 0.0, 3};
  KernelPair k = fcn_kernel(x, x, arch);
  CHECK(k.nngp(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
  auto [dn, dt] = fcn_kernel_diag(x, arch);
  CHECK(dn[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(dt[0] >= dn[0]);
}

TEST_CASE("fcn_kernel matches the scalar recursion and basic invariants") {
  Dataset ds = nnk_test::standardized_synthetic(3, 6, 4, 4, 3);
  ArchitectureSpec arch = fcn_base();
  KernelPair k = fcn_kernel(ds.images, ds.images, arch);
  const Eigen::Index d = ds.images.cols();
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) {
      const double k0 = 0.01 + 2.0 * ds.images.row(i).dot(ds.images.row(j)) / d;
      const double da = 0.01 + 2.0 * ds.images.row(i).squaredNorm() / d;
      const double db = 0.01 + 2.0 * ds.images.row(j).squaredNorm() / d;
      auto [kn, kt] = manual_fcn(k0, da, db, arch.depth, 2.0, 0.01);
      CHECK(k.nngp(i, j) == doctest::Approx(kn).epsilon(1e-8));
      CHECK(k.ntk(i, j) == doctest::Approx(kt).epsilon(1e-8));
    }
  // exact symmetry by construction
  CHECK((k.nngp - k.nngp.transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((k.ntk - k.ntk.transpose()).cwiseAbs().maxCoeff() == 0.0);
  // NTK dominates NNGP on the diagonal
  for (int i = 0; i < 6; ++i) CHECK(k.ntk(i, i) >= k.nngp(i, i) - 1e-10);
  // PSD up to tolerance
  Eigen::SelfAdjointEigenSolver<Matrix> es(k.nngp);
  CHECK(es.eigenvalues().minCoeff() > -1e-10 * k.nngp.trace() / 6);
  // diag helper agrees with the symmetric kernel diagonal
  auto [dn, dt] = fcn_kernel_diag(ds.images, arch);
  CHECK((dn - k.nngp.diagonal()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((dt - k.ntk.diagonal()).cwiseAbs().maxCoeff() < 1e-12);
  // cross block of a subset equals the corresponding rows
  Matrix top = ds.images.topRows(2);
  KernelPair cross = fcn_kernel(top, ds.images, arch);
  CHECK((cross.nngp - k.nngp.topRows(2)).cwiseAbs().maxCoeff() < 1e-14);
  // dimension mismatch
  Matrix bad = Matrix::Zero(1, 3);
  CHECK_THROWS_AS(fcn_kernel(bad, ds.images, arch), DimensionError);
}

TEST_CASE("fcn_kernel single precision tag and rounding") {
  Dataset ds = nnk_test::standardized_synthetic(5, 4, 4, 4, 3);
  KernelPair kd = fcn_kernel(ds.images, ds.images, fcn_base(), Precision::Double);
  KernelPair ks = fcn_kernel(ds.images, ds.images, fcn_base(), Precision::Single);
  CHECK(ks.precision == Precision::Single);
  const double diff = (kd.nngp - ks.nngp).cwiseAbs().maxCoeff();
  CHECK(diff > 0.0);   // single precision rounds
  CHECK(diff < 1e-4);  // but only at the float scale
}

TEST_CASE("fcn NNGP matches finite-width Monte Carlo at width 1024") {
  Dataset ds = nnk_test::standardized_synthetic(17, 6, 8, 8, 3);
  ArchitectureSpec arch{Family::FCN, 3, 1024, 2.0, 0.01, 3};
  KernelPair analytic = fcn_kernel(ds.images, ds.images, arch);
  Matrix mc = nnk_test::mc_nngp(arch, ds.images, ImageShape{8, 8, 3}, 120, 48, 99);
  CHECK(nnk_test::rel_frobenius(mc, analytic.nngp) < 0.05);
}

TEST_CASE("cnn 1x1 images degenerate to the dense recursion") {
  // With SAME zero padding only the center tap of the 3x3 filter is in
  // bounds, so each conv layer applies the dense recursion at sw/9 and the
  // readout applies it at sw.
  Matrix x(2, 3);
  x << 0.9, -0.4, 1.1, -0.3, 0.8, 0.2;
  ArchitectureSpec arch{Family::CNN_GAP, 3, 32, 2.0, 0.01, 3};
  KernelPair k = cnn_kernel(x, x, ImageShape{1, 1, 3}, arch);
  ArchitectureSpec vec = arch;
  vec.family = Family::CNN_VEC;
  KernelPair k2 = cnn_kernel(x, x, ImageShape{1, 1, 3}, vec);
  // GAP and VEC coincide on a single pixel
  CHECK((k.nngp - k2.nngp).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((k.ntk - k2.ntk).cwiseAbs().maxCoeff() < 1e-14);

  const double sw = 2.0, sb = 0.01, swc = 2.0 / 9.0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      double kk = sb + swc * x.row(i).dot(x.row(j)) / 3.0;
      double th = kk;
      double da = sb + swc * x.row(i).squaredNorm() / 3.0;
      double db = sb + swc * x.row(j).squaredNorm() / 3.0;
      for (int l = 0; l + 1 < arch.depth; ++l) {
        auto [ephi, edphi] = relu_moments(da, kk, db);
        const double kn = sb + swc * ephi;
        th = kn + swc * edphi * th;
        kk = kn;
        da = sb + swc * da / 2;
        db = sb + swc * db / 2;
      }
      auto [ephi, edphi] = relu_moments(da, kk, db);
      const double nngp = sb + sw * ephi;
      const double ntk = nngp + sw * edphi * th;
      CHECK(k.nngp(i, j) == doctest::Approx(nngp).epsilon(1e-9));
      CHECK(k.ntk(i, j) == doctest::Approx(ntk).epsilon(1e-9));
    }
}

TEST_CASE("spatially constant images: interior pixels follow the dense recursion") {
  // 9x9 images, depth 3: the center pixel's receptive field never reaches
  // the zero padding, so its pixel covariance equals the FCN track exactly.
  Matrix x(2, 81 * 2);
  for (int ch = 0; ch < 2; ++ch)
    for (int p = 0; p < 81; ++p) {
      x(0, ch * 81 + p) = ch == 0 ? 0.8 : -0.5;
      x(1, ch * 81 + p) = ch == 0 ? -0.2 : 1.1;
    }
  ArchitectureSpec arch{Family::CNN_GAP, 3, 32, 2.0, 0.01, 3};
  PixelTensors t = cnn_pair_tensors(x.row(0).transpose(), x.row(1).transpose(), ImageShape{9, 9, 2}, arch);

  const double s = (0.8 * -0.2 + -0.5 * 1.1) / 2.0;
  const double sa = (0.8 * 0.8 + 0.5 * 0.5) / 2.0;
  const double sbb = (0.2 * 0.2 + 1.1 * 1.1) / 2.0;
  double kk = 0.01 + 2 * s, th = kk, da = 0.01 + 2 * sa, db = 0.01 + 2 * sbb;
  for (int l = 0; l + 1 < arch.depth; ++l) {
    auto [e, ed] = relu_moments(da, kk, db);
    const double knext = 0.01 + 2 * e;
    th = knext + 2 * ed * th;
    kk = knext;
    da = 0.01 + da;  // sb + sw * da / 2 with sw = 2
    db = 0.01 + db;
  }
  auto [e_final, ed_final] = relu_moments(da, kk, db);
  const int center = 4 * 9 + 4;
  CHECK(t.nngp(center, center) == doctest::Approx(e_final).epsilon(1e-12));
  CHECK(t.ntk(center, center) == doctest::Approx(ed_final * th).epsilon(1e-12));
  CHECK(t.var1[center] == doctest::Approx(da).epsilon(1e-12));
  // an edge pixel is shrunk by the padding, so it must differ
  CHECK(t.nngp(0, 0) < e_final);
}

TEST_CASE("cnn readout definitions: GAP averages all pairs, VEC the diagonal") {
  Dataset ds = nnk_test::standardized_synthetic(23, 3, 4, 4, 2);
  ArchitectureSpec gap{Family::CNN_GAP, 2, 16, 2.0, 0.01, 3};
  ArchitectureSpec vec = gap;
  vec.family = Family::CNN_VEC;
  KernelPair kg = cnn_kernel(ds.images, ds.images, ImageShape{4, 4, 2}, gap);
  KernelPair kv = cnn_kernel(ds.images, ds.images, ImageShape{4, 4, 2}, vec);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      PixelTensors t =
          cnn_pair_tensors(ds.images.row(i).transpose(), ds.images.row(j).transpose(), ImageShape{4, 4, 2}, gap);
      const double gap_nngp = 0.01 + 2.0 * t.nngp.mean();
      const double gap_ntk = gap_nngp + 2.0 * t.ntk.mean();
      const double vec_nngp = 0.01 + 2.0 * t.nngp.diagonal().mean();
      const double vec_ntk = vec_nngp + 2.0 * t.ntk.diagonal().mean();
      CHECK(kg.nngp(i, j) == doctest::Approx(gap_nngp).epsilon(1e-12));
      CHECK(kg.ntk(i, j) == doctest::Approx(gap_ntk).epsilon(1e-12));
      CHECK(kv.nngp(i, j) == doctest::Approx(vec_nngp).epsilon(1e-12));
      CHECK(kv.ntk(i, j) == doctest::Approx(vec_ntk).epsilon(1e-12));
    }
  auto [gn, gt] = cnn_kernel_diag(ds.images, ImageShape{4, 4, 2}, gap);
  CHECK((gn - kg.nngp.diagonal()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((gt - kg.ntk.diagonal()).cwiseAbs().maxCoeff() < 1e-12);
  auto [vn, vt] = cnn_kernel_diag(ds.images, ImageShape{4, 4, 2}, vec);
  CHECK((vn - kv.nngp.diagonal()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((vt - kv.ntk.diagonal()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("cnn NNGP matches finite-width Monte Carlo (depth 2, 512 channels, 4x4)") {
  Dataset ds = nnk_test::standardized_synthetic(31, 5, 4, 4, 3);
  ArchitectureSpec arch{Family::CNN_GAP, 2, 512, 2.0, 0.01, 3};
  KernelPair analytic = cnn_kernel(ds.images, ds.images, ImageShape{4, 4, 3}, arch);
  Matrix mc = nnk_test::mc_nngp(arch, ds.images, ImageShape{4, 4, 3}, 200, 64, 7);
  CHECK(nnk_test::rel_frobenius(mc, analytic.nngp) < 0.05);

  ArchitectureSpec vec = arch;
  vec.family = Family::CNN_VEC;
  KernelPair av = cnn_kernel(ds.images, ds.images, ImageShape{4, 4, 3}, vec);
  Matrix mcv = nnk_test::mc_nngp(vec, ds.images, ImageShape{4, 4, 3}, 200, 64, 8);
  CHECK(nnk_test::rel_frobenius(mcv, av.nngp) < 0.05);
}

TEST_CASE("cnn resource guard and shape checks") {
  ArchitectureSpec arch{Family::CNN_GAP, 2, 16, 2.0, 0.01, 3};
  Matrix x = Matrix::Zero(1, 32 * 32 * 3);
  CHECK_THROWS_AS(cnn_kernel(x, x, ImageShape{32, 32, 3}, arch, Precision::Double, 256),
                  ResourceError);
  Matrix bad = Matrix::Zero(1, 10);
  CHECK_THROWS_AS(cnn_kernel(bad, bad, ImageShape{4, 4, 3}, arch), DimensionError);
}

TEST_CASE("cnn-vec fast path equals the full-tensor route") {
  Dataset ds = nnk_test::standardized_synthetic(41, 4, 4, 4, 2);
  ArchitectureSpec vec{Family::CNN_VEC, 3, 16, 2.0, 0.01, 3};
  KernelPair kv = cnn_kernel(ds.images, ds.images, ImageShape{4, 4, 2}, vec);
  for (int i = 0; i < 4; ++i)
    for (int j = i; j < 4; ++j) {
      PixelTensors t =
          cnn_pair_tensors(ds.images.row(i).transpose(), ds.images.row(j).transpose(), ImageShape{4, 4, 2}, vec);
      const double nngp = 0.01 + 2.0 * t.nngp.diagonal().mean();
      const double ntk = nngp + 2.0 * t.ntk.diagonal().mean();
      CHECK(kv.nngp(i, j) == doctest::Approx(nngp).epsilon(1e-9));
      CHECK(kv.ntk(i, j) == doctest::Approx(ntk).epsilon(1e-9));
    }
}
