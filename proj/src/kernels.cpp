#include "nnk/kernels.hpp"

#include <cmath>
#include <vector>

namespace nnk {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kTwoPiInv = 1.0 / (2.0 * kPi);

// Scalar ReLU moment step shared by all kernels. `norm` is sqrt(q11*q22).
template <typename T>
inline void moment_step(T q12, T norm, T& e_phi, T& e_dphi) {
  if (norm <= T(0)) {  // degenerate zero-variance input; limit of q->0+
    e_phi = T(0);
    e_dphi = T(0.25);
    return;
  }
  T c = q12 / norm;
  c = std::min(T(1), std::max(T(-1), c));
  const T theta = std::acos(c);
  e_phi = norm * T(kTwoPiInv) * (std::sin(theta) + (T(kPi) - theta) * c);
  e_dphi = (T(kPi) - theta) * T(kTwoPiInv);
}

// ---------------------------------------------------------------------------
// FCN

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Gram matrix with a per-entry dot product whose reduction order does not
// depend on the block shape, so any tiling of the same inputs produces
// bitwise identical entries. Inputs are transposed first for contiguous
// column access.
template <typename T>
Mat<T> ordered_gram(const Mat<T>& x1, const Mat<T>& x2, bool symmetric) {
  Mat<T> a = x1.transpose();
  Mat<T> b = symmetric ? Mat<T>() : Mat<T>(x2.transpose());
  const Mat<T>& bb = symmetric ? a : b;
  Mat<T> g(x1.rows(), symmetric ? x1.rows() : x2.rows());
#pragma omp parallel for schedule(static)
  for (Eigen::Index j = 0; j < g.cols(); ++j) {
    const Eigen::Index lo = symmetric ? j : 0;
    for (Eigen::Index i = lo; i < g.rows(); ++i) g(i, j) = a.col(i).dot(bb.col(j));
  }
  if (symmetric)
    for (Eigen::Index j = 0; j < g.cols(); ++j)
      for (Eigen::Index i = 0; i < j; ++i) g(i, j) = g(j, i);
  return g;
}

// Self-covariance track sb + scale * <x_i, x_i> with the same dot-product
// reduction the Gram uses, so cross tiles and symmetric tiles see bitwise
// identical variance tracks.
template <typename T>
Vec<T> ordered_self_track(const Mat<T>& x, T scale, T sb) {
  Mat<T> a = x.transpose();
  Vec<T> v(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) v[i] = a.col(i).dot(a.col(i)) * scale + sb;
  return v;
}

// Runs the depth-layer recursion in place over a covariance block given the
// two diagonal (self-covariance) tracks. In the symmetric case diagonal
// entries take the exact correlation-1 branch: acos would otherwise turn
// 1-ulp rounding into ~1e-8 noise.
template <typename T>
void fcn_recursion(Mat<T>& k, Mat<T>& th, Vec<T> d1, Vec<T> d2, const ArchitectureSpec& arch,
                   bool symmetric) {
  const T sw = static_cast<T>(arch.weight_var);
  const T sb = static_cast<T>(arch.bias_var);
  const Eigen::Index m1 = k.rows(), m2 = k.cols();
  for (int layer = 0; layer < arch.depth; ++layer) {
#pragma omp parallel for schedule(static)
    for (Eigen::Index j = 0; j < m2; ++j) {
      const T dj = d2[j];
      for (Eigen::Index i = 0; i < m1; ++i) {
        T e_phi, e_dphi;
        if (symmetric && i == j) {
          e_phi = dj * T(0.5);
          e_dphi = T(0.5);
        } else {
          const T norm = std::sqrt(d1[i] * dj);
          moment_step(k(i, j), norm, e_phi, e_dphi);
        }
        const T k_next = sb + sw * e_phi;
        th(i, j) = k_next + sw * e_dphi * th(i, j);
        k(i, j) = k_next;
      }
    }
    for (Eigen::Index i = 0; i < m1; ++i) d1[i] = sb + sw * (d1[i] * T(0.5));
    for (Eigen::Index j = 0; j < m2; ++j) d2[j] = sb + sw * (d2[j] * T(0.5));
  }
}

template <typename T>
KernelPair fcn_kernel_impl(const Mat<T>& x1, const Mat<T>& x2, const ArchitectureSpec& arch,
                           bool symmetric) {
  const Eigen::Index d = x1.cols();
  const T sw = static_cast<T>(arch.weight_var);
  const T sb = static_cast<T>(arch.bias_var);
  const T invd = T(1) / static_cast<T>(d);

  Mat<T> k = ordered_gram(x1, x2, symmetric);
  k *= sw * invd;
  k.array() += sb;

  Vec<T> d1 = symmetric ? Vec<T>(k.diagonal()) : ordered_self_track(x1, sw * invd, sb);
  Vec<T> d2 = symmetric ? d1 : ordered_self_track(x2, sw * invd, sb);
  Mat<T> th = k;
  fcn_recursion(k, th, d1, d2, arch, symmetric);

  KernelPair out;
  out.nngp = k.template cast<double>();
  out.ntk = th.template cast<double>();
  out.symmetric = symmetric;
  out.arch = arch;
  return out;
}

// ---------------------------------------------------------------------------
// CNN helpers

// out[p,q] += sum over 3x3 aligned offsets of t[p+off, q+off] (zeros outside).
template <typename T>
void conv_pair(const Mat<T>& t, Mat<T>& out, int h, int w) {
  out.setZero();
  for (int oy = -1; oy <= 1; ++oy) {
    const int py0 = std::max(0, -oy), py1 = std::min(h, h - oy);  // [py0, py1)
    for (int ox = -1; ox <= 1; ++ox) {
      const int px0 = std::max(0, -ox), px1 = std::min(w, w - ox);
      const int nx = px1 - px0;
      if (nx <= 0) continue;
      for (int py = py0; py < py1; ++py)
        for (int qy = py0; qy < py1; ++qy)
          out.block(py * w + px0, qy * w + px0, nx, nx) +=
              t.block((py + oy) * w + px0 + ox, (qy + oy) * w + px0 + ox, nx, nx);
    }
  }
}

// 1-D (diagonal pixel track) analog of conv_pair.
template <typename T>
void conv_diag(const Vec<T>& t, Vec<T>& out, int h, int w) {
  out.setZero();
  for (int oy = -1; oy <= 1; ++oy) {
    const int py0 = std::max(0, -oy), py1 = std::min(h, h - oy);
    for (int ox = -1; ox <= 1; ++ox) {
      const int px0 = std::max(0, -ox), px1 = std::min(w, w - ox);
      const int nx = px1 - px0;
      if (nx <= 0) continue;
      for (int py = py0; py < py1; ++py)
        out.segment(py * w + px0, nx) += t.segment((py + oy) * w + px0 + ox, nx);
    }
  }
}

// Per-image preactivation variance maps for every conv layer (P per layer).
// These evolve independently of any other image: the aligned-offset
// convolution maps diagonal entries to diagonal entries.
template <typename T>
struct VarianceMaps {
  std::vector<Mat<T>> var;  // depth maps, each n x P
  std::vector<Mat<T>> ntk;  // matching NTK diagonal maps
};

template <typename T>
VarianceMaps<T> variance_maps(const Mat<T>& x, ImageShape shape, const ArchitectureSpec& arch) {
  const int p = shape.pixels();
  const Eigen::Index n = x.rows();
  const T sw = static_cast<T>(arch.weight_var);
  const T sb = static_cast<T>(arch.bias_var);
  const T scale = sw / T(9);
  VarianceMaps<T> m;
  m.var.assign(arch.depth, Mat<T>(n, p));
  m.ntk.assign(arch.depth, Mat<T>(n, p));

  Vec<T> s(p), buf(p), v(p), t(p);
  for (Eigen::Index i = 0; i < n; ++i) {
    // squared pixel norms over channels / c
    s.setZero();
    for (int ch = 0; ch < shape.c; ++ch)
      s += x.row(i).segment(ch * p, p).transpose().array().square().matrix();
    s /= static_cast<T>(shape.c);

    conv_diag(s, buf, shape.h, shape.w);
    v = (buf * scale).array() + sb;
    t = v;
    m.var[0].row(i) = v.transpose();
    m.ntk[0].row(i) = t.transpose();
    for (int layer = 1; layer < arch.depth; ++layer) {
      Vec<T> half = v / T(2);
      conv_diag(half, buf, shape.h, shape.w);
      Vec<T> v_next = (buf * scale).array() + sb;
      Vec<T> tt = t / T(2);
      conv_diag(tt, buf, shape.h, shape.w);
      t = v_next + buf * scale;
      v = v_next;
      m.var[layer].row(i) = v.transpose();
      m.ntk[layer].row(i) = t.transpose();
    }
  }
  return m;
}

// Full pixel-pair propagation for one image pair; returns readout values.
template <typename T>
struct PairScratch {
  Mat<T> k, th, v, e, buf;
  Mat<T> a1, a2;  // c x P channel views
  void init(int p, int c) {
    k.resize(p, p);
    th.resize(p, p);
    v.resize(p, p);
    e.resize(p, p);
    buf.resize(p, p);
    a1.resize(c, p);
    a2.resize(c, p);
  }
};

template <typename T>
void gap_pair(const Mat<T>& x, Eigen::Index i, const Mat<T>& y, Eigen::Index j,
              const VarianceMaps<T>& vm1, const VarianceMaps<T>& vm2, ImageShape shape,
              const ArchitectureSpec& arch, PairScratch<T>& s, T& out_nngp, T& out_ntk) {
  const int p = shape.pixels();
  const T sw = static_cast<T>(arch.weight_var);
  const T sb = static_cast<T>(arch.bias_var);
  const T scale = sw / T(9);

  for (int ch = 0; ch < shape.c; ++ch) {
    s.a1.row(ch) = x.row(i).segment(ch * p, p);
    s.a2.row(ch) = y.row(j).segment(ch * p, p);
  }
  // input pixel-pair covariance
  s.v.noalias() = s.a1.transpose() * s.a2;
  s.v /= static_cast<T>(shape.c);
  conv_pair(s.v, s.buf, shape.h, shape.w);
  s.k = (s.buf * scale).array() + sb;
  s.th = s.k;

  for (int layer = 0; layer + 1 < arch.depth; ++layer) {
    const auto& d1 = vm1.var[layer];
    const auto& d2 = vm2.var[layer];
    for (int b = 0; b < p; ++b) {
      const T db = d2(j, b);
      for (int a = 0; a < p; ++a) {
        const T norm = std::sqrt(d1(i, a) * db);
        T e_phi, e_dphi;
        moment_step(s.k(a, b), norm, e_phi, e_dphi);
        s.v(a, b) = e_phi;
        s.e(a, b) = e_dphi * s.th(a, b);
      }
    }
    conv_pair(s.v, s.buf, shape.h, shape.w);
    s.k = (s.buf * scale).array() + sb;
    conv_pair(s.e, s.buf, shape.h, shape.w);
    s.th = s.k + s.buf * scale;
  }

  // readout: nonlinearity then average over pixel pairs
  const auto& d1 = vm1.var[arch.depth - 1];
  const auto& d2 = vm2.var[arch.depth - 1];
  T acc_phi = 0, acc_th = 0;
  for (int b = 0; b < p; ++b) {
    const T db = d2(j, b);
    for (int a = 0; a < p; ++a) {
      const T norm = std::sqrt(d1(i, a) * db);
      T e_phi, e_dphi;
      moment_step(s.k(a, b), norm, e_phi, e_dphi);
      acc_phi += e_phi;
      acc_th += e_dphi * s.th(a, b);
    }
  }
  const T pp = static_cast<T>(p) * static_cast<T>(p);
  out_nngp = sb + sw * acc_phi / pp;
  out_ntk = out_nngp + sw * acc_th / pp;
}

// Diagonal-only propagation for one pair (the CNN-VEC path).
template <typename T>
void vec_pair(const Mat<T>& x, Eigen::Index i, const Mat<T>& y, Eigen::Index j,
              const VarianceMaps<T>& vm1, const VarianceMaps<T>& vm2, ImageShape shape,
              const ArchitectureSpec& arch, Vec<T>& kd, Vec<T>& td, Vec<T>& tmp, Vec<T>& buf,
              T& out_nngp, T& out_ntk) {
  const int p = shape.pixels();
  const T sw = static_cast<T>(arch.weight_var);
  const T sb = static_cast<T>(arch.bias_var);
  const T scale = sw / T(9);

  tmp.setZero(p);
  for (int ch = 0; ch < shape.c; ++ch)
    tmp += (x.row(i).segment(ch * p, p).array() * y.row(j).segment(ch * p, p).array())
               .matrix()
               .transpose();
  tmp /= static_cast<T>(shape.c);
  conv_diag(tmp, buf, shape.h, shape.w);
  kd = (buf * scale).array() + sb;
  td = kd;

  Vec<T> ephi(p), edth(p);
  for (int layer = 0; layer + 1 < arch.depth; ++layer) {
    for (int a = 0; a < p; ++a) {
      const T norm = std::sqrt(vm1.var[layer](i, a) * vm2.var[layer](j, a));
      T e_phi, e_dphi;
      moment_step(kd[a], norm, e_phi, e_dphi);
      ephi[a] = e_phi;
      edth[a] = e_dphi * td[a];
    }
    conv_diag(ephi, buf, shape.h, shape.w);
    kd = (buf * scale).array() + sb;
    conv_diag(edth, buf, shape.h, shape.w);
    td = kd + buf * scale;
  }

  T acc_phi = 0, acc_th = 0;
  for (int a = 0; a < p; ++a) {
    const T norm = std::sqrt(vm1.var[arch.depth - 1](i, a) * vm2.var[arch.depth - 1](j, a));
    T e_phi, e_dphi;
    moment_step(kd[a], norm, e_phi, e_dphi);
    acc_phi += e_phi;
    acc_th += e_dphi * td[a];
  }
  out_nngp = sb + sw * acc_phi / static_cast<T>(p);
  out_ntk = out_nngp + sw * acc_th / static_cast<T>(p);
}

template <typename T>
KernelPair cnn_kernel_impl(const Mat<T>& x1, const Mat<T>& x2, ImageShape shape,
                           const ArchitectureSpec& arch, bool symmetric) {
  const Eigen::Index m1 = x1.rows(), m2 = x2.rows();
  const bool gap = arch.family == Family::CNN_GAP;
  const int p = shape.pixels();

  VarianceMaps<T> vm1 = variance_maps(x1, shape, arch);
  VarianceMaps<T> vm2 = symmetric ? vm1 : variance_maps(x2, shape, arch);

  Mat<T> k(m1, m2), th(m1, m2);
  const Eigen::Index total = symmetric ? m1 * (m1 + 1) / 2 : m1 * m2;

#pragma omp parallel
  {
    PairScratch<T> scratch;
    Vec<T> kd, td, tmp, buf;
    if (gap)
      scratch.init(p, shape.c);
    else {
      kd.resize(p);
      td.resize(p);
      tmp.resize(p);
      buf.resize(p);
    }
#pragma omp for schedule(dynamic, 16)
    for (Eigen::Index idx = 0; idx < total; ++idx) {
      Eigen::Index i, j;
      if (symmetric) {
        // unrank the upper-triangle index
        i = static_cast<Eigen::Index>((std::sqrt(8.0 * static_cast<double>(idx) + 1.0) - 1.0) / 2.0);
        while ((i + 1) * (i + 2) / 2 <= idx) ++i;
        while (i * (i + 1) / 2 > idx) --i;
        j = idx - i * (i + 1) / 2;
      } else {
        i = idx / m2;
        j = idx % m2;
      }
      T knngp, kntk;
      if (gap)
        gap_pair(x1, i, symmetric ? x1 : x2, j, vm1, vm2, shape, arch, scratch, knngp, kntk);
      else
        vec_pair(x1, i, symmetric ? x1 : x2, j, vm1, vm2, shape, arch, kd, td, tmp, buf, knngp,
                 kntk);
      if (symmetric) {
        k(i, j) = knngp;
        k(j, i) = knngp;
        th(i, j) = kntk;
        th(j, i) = kntk;
      } else {
        k(i, j) = knngp;
        th(i, j) = kntk;
      }
    }
  }

  KernelPair out;
  out.nngp = k.template cast<double>();
  out.ntk = th.template cast<double>();
  out.symmetric = symmetric;
  out.arch = arch;
  return out;
}

void check_cnn_inputs(const Matrix& x, ImageShape shape, int max_pixels) {
  if (shape.h <= 0 || shape.w <= 0 || shape.c <= 0)
    throw DimensionError("cnn_kernel: invalid image shape");
  if (shape.pixels() > max_pixels)
    throw ResourceError("cnn_kernel: spatial size " + std::to_string(shape.h) + "x" +
                        std::to_string(shape.w) +
                        " exceeds the configured limit; downsample the inputs first");
  if (x.cols() != shape.dim())
    throw DimensionError("cnn_kernel: input dimension does not match image shape");
}

}  // namespace

std::pair<double, double> relu_moments(double q11, double q12, double q22) {
  if (q11 <= 0.0 || q22 <= 0.0)
    throw DimensionError("relu_moments: variances must be positive");
  double e_phi, e_dphi;
  moment_step(q12, std::sqrt(q11 * q22), e_phi, e_dphi);
  return {e_phi, e_dphi};
}

KernelPair fcn_kernel(const Matrix& x1, const Matrix& x2, const ArchitectureSpec& arch,
                      Precision prec) {
  arch.validate();
  if (x1.cols() != x2.cols())
    throw DimensionError("fcn_kernel: input dimensions differ (" + std::to_string(x1.cols()) +
                         " vs " + std::to_string(x2.cols()) + ")");
  const bool symmetric = (&x1 == &x2) || (x1.data() == x2.data() && x1.rows() == x2.rows());
  KernelPair out;
  if (prec == Precision::Single) {
    MatrixF a = x1.cast<float>();
    MatrixF b = symmetric ? MatrixF() : MatrixF(x2.cast<float>());
    out = fcn_kernel_impl<float>(a, symmetric ? a : b, arch, symmetric);
  } else {
    out = fcn_kernel_impl<double>(x1, x2, arch, symmetric);
  }
  out.precision = prec;
  return out;
}

std::pair<Vector, Vector> fcn_kernel_diag(const Matrix& x, const ArchitectureSpec& arch) {
  arch.validate();
  const double sw = arch.weight_var, sb = arch.bias_var;
  const double invd = 1.0 / static_cast<double>(x.cols());
  // same arithmetic per step as the symmetric kernel's diagonal entries
  Vector d = ordered_self_track<double>(x, sw * invd, sb);
  Vector t = d;
  for (int layer = 0; layer < arch.depth; ++layer) {
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      const double e_phi = d[i] * 0.5;
      const double k_next = sb + sw * e_phi;
      t[i] = k_next + sw * 0.5 * t[i];
      d[i] = k_next;
    }
  }
  return {d, t};
}

KernelPair cnn_kernel(const Matrix& x1, const Matrix& x2, ImageShape shape,
                      const ArchitectureSpec& arch, Precision prec, int max_pixels) {
  arch.validate();
  if (arch.depth < 1) throw ConfigError("cnn_kernel: depth must be >= 1");
  check_cnn_inputs(x1, shape, max_pixels);
  check_cnn_inputs(x2, shape, max_pixels);
  const bool symmetric = (&x1 == &x2) || (x1.data() == x2.data() && x1.rows() == x2.rows());
  KernelPair out;
  if (prec == Precision::Single) {
    MatrixF a = x1.cast<float>();
    MatrixF b = symmetric ? MatrixF() : MatrixF(x2.cast<float>());
    out = cnn_kernel_impl<float>(a, symmetric ? a : b, shape, arch, symmetric);
  } else {
    out = cnn_kernel_impl<double>(x1, x2, shape, arch, symmetric);
  }
  out.precision = prec;
  return out;
}

std::pair<Vector, Vector> cnn_kernel_diag(const Matrix& x, ImageShape shape,
                                          const ArchitectureSpec& arch, int max_pixels) {
  arch.validate();
  check_cnn_inputs(x, shape, max_pixels);
  const Eigen::Index n = x.rows();
  Vector nngp(n), ntk(n);
  if (arch.family == Family::CNN_GAP) {
    VarianceMaps<double> vm = variance_maps<double>(x, shape, arch);
    PairScratch<double> scratch;
    scratch.init(shape.pixels(), shape.c);
    for (Eigen::Index i = 0; i < n; ++i) {
      double a, b;
      gap_pair<double>(x, i, x, i, vm, vm, shape, arch, scratch, a, b);
      nngp[i] = a;
      ntk[i] = b;
    }
  } else {
    VarianceMaps<double> vm = variance_maps<double>(x, shape, arch);
    const double sw = arch.weight_var, sb = arch.bias_var;
    const int p = shape.pixels();
    for (Eigen::Index i = 0; i < n; ++i) {
      // VEC self-kernel: diagonal maps are exactly the variance tracks
      double acc_phi = 0, acc_th = 0;
      for (int a = 0; a < p; ++a) {
        acc_phi += vm.var[arch.depth - 1](i, a) / 2.0;
        acc_th += vm.ntk[arch.depth - 1](i, a) / 2.0;
      }
      nngp[i] = sb + sw * acc_phi / p;
      ntk[i] = nngp[i] + sw * acc_th / p;
    }
  }
  return {nngp, ntk};
}

PixelTensors cnn_pair_tensors(const Vector& x1, const Vector& x2, ImageShape shape,
                              const ArchitectureSpec& arch) {
  arch.validate();
  const int p = shape.pixels();
  Matrix a(2, x1.size());
  a.row(0) = x1.transpose();
  a.row(1) = x2.transpose();
  check_cnn_inputs(a, shape, 4096);
  VarianceMaps<double> vm = variance_maps<double>(a, shape, arch);

  PairScratch<double> s;
  s.init(p, shape.c);
  const double sw = arch.weight_var, sb = arch.bias_var;
  const double scale = sw / 9.0;
  for (int ch = 0; ch < shape.c; ++ch) {
    s.a1.row(ch) = a.row(0).segment(ch * p, p);
    s.a2.row(ch) = a.row(1).segment(ch * p, p);
  }
  s.v.noalias() = s.a1.transpose() * s.a2;
  s.v /= static_cast<double>(shape.c);
  conv_pair(s.v, s.buf, shape.h, shape.w);
  s.k = (s.buf * scale).array() + sb;
  s.th = s.k;
  for (int layer = 0; layer + 1 < arch.depth; ++layer) {
    for (int b = 0; b < p; ++b)
      for (int q = 0; q < p; ++q) {
        const double norm = std::sqrt(vm.var[layer](0, q) * vm.var[layer](1, b));
        double e_phi, e_dphi;
        moment_step(s.k(q, b), norm, e_phi, e_dphi);
        s.v(q, b) = e_phi;
        s.e(q, b) = e_dphi * s.th(q, b);
      }
    conv_pair(s.v, s.buf, shape.h, shape.w);
    s.k = (s.buf * scale).array() + sb;
    conv_pair(s.e, s.buf, shape.h, shape.w);
    s.th = s.k + s.buf * scale;
  }
  PixelTensors out;
  out.nngp.resize(p, p);
  out.ntk.resize(p, p);
  for (int b = 0; b < p; ++b)
    for (int q = 0; q < p; ++q) {
      const double norm = std::sqrt(vm.var[arch.depth - 1](0, q) * vm.var[arch.depth - 1](1, b));
      double e_phi, e_dphi;
      moment_step(s.k(q, b), norm, e_phi, e_dphi);
      out.nngp(q, b) = e_phi;
      out.ntk(q, b) = e_dphi * s.th(q, b);
    }
  out.var1 = vm.var[arch.depth - 1].row(0).transpose();
  out.var2 = vm.var[arch.depth - 1].row(1).transpose();
  return out;
}

KernelPair compute_kernel(const Matrix& x1, const Matrix& x2, ImageShape shape,
                          const ArchitectureSpec& arch, Precision prec) {
  if (arch.family == Family::FCN) return fcn_kernel(x1, x2, arch, prec);
  return cnn_kernel(x1, x2, shape, arch, prec);
}

std::pair<Vector, Vector> compute_kernel_diag(const Matrix& x, ImageShape shape,
                                              const ArchitectureSpec& arch) {
  if (arch.family == Family::FCN) return fcn_kernel_diag(x, arch);
  return cnn_kernel_diag(x, shape, arch);
}

}  // namespace nnk
