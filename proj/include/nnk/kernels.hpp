// Analytic infinite-width NNGP and NTK kernels for ReLU architectures.
//
// FCN: layer-0 covariance K0(x,x') = sb + sw*<x,x'>/d, then
//   K_{l+1} = sb + sw*E[phi(u)phi(v)],  Th_{l+1} = K_{l+1} + sw*E[phi'phi']*Th_l
// with the arc-cosine closed forms for the Gaussian ReLU moments. The
// matrices returned are the read-out covariances after `depth` hidden layers.
//
// CNN: propagates the pixel-pixel covariance tensor K[p,q] per layer. A
// convolution step averages the incoming covariance over the 3x3 aligned
// offset pairs (out-of-bounds contributions are zero under SAME padding),
// scales by sw and adds sb. The readout averages the final post-nonlinearity
// tensor over all pixel pairs (GAP) or diagonal pairs only (VEC). Diagonal
// pixel covariances evolve autonomously, which gives VEC kernels a fast
// path that never materializes the P x P tensor.
#pragma once

#include <functional>
#include <utility>

#include "nnk/arch.hpp"
#include "nnk/common.hpp"

namespace nnk {

struct ImageShape {
  int h = 0, w = 0, c = 0;
  int pixels() const { return h * w; }
  Eigen::Index dim() const { return static_cast<Eigen::Index>(h) * w * c; }
};

struct KernelPair {
  Matrix nngp;
  Matrix ntk;
  Precision precision = Precision::Double;
  bool symmetric = false;
  ArchitectureSpec arch;
};

// Gaussian ReLU moments for (u,v) ~ N(0, [[q11,q12],[q12,q22]]):
// returns (E[phi(u)phi(v)], E[phi'(u)phi'(v)]). The correlation is clamped
// to [-1,1]; accumulated rounding can push it marginally past 1.
std::pair<double, double> relu_moments(double q11, double q12, double q22);

KernelPair fcn_kernel(const Matrix& x1, const Matrix& x2, const ArchitectureSpec& arch,
                      Precision prec = Precision::Double);

// Self-covariances (NNGP and NTK diagonal) for each row of x.
std::pair<Vector, Vector> fcn_kernel_diag(const Matrix& x, const ArchitectureSpec& arch);

// Images are rows of x in channel-plane layout. Spatial sizes beyond
// `max_pixels` raise ResourceError (downsample first).
KernelPair cnn_kernel(const Matrix& x1, const Matrix& x2, ImageShape shape,
                      const ArchitectureSpec& arch, Precision prec = Precision::Double,
                      int max_pixels = 256);

std::pair<Vector, Vector> cnn_kernel_diag(const Matrix& x, ImageShape shape,
                                          const ArchitectureSpec& arch, int max_pixels = 256);

// Last-conv-layer pixel-pair tensors for a single image pair, after the
// nonlinearity (what the readout averages). Diagnostic surface used by
// tests and the audit tooling.
struct PixelTensors {
  Matrix nngp;        // E[phi phi] tensor, P x P
  Matrix ntk;         // body NTK tensor weighted for the readout
  Vector var1, var2;  // last-layer preactivation variance maps
};
PixelTensors cnn_pair_tensors(const Vector& x1, const Vector& x2, ImageShape shape,
                              const ArchitectureSpec& arch);

// Family dispatch used by inference and the harness. FCN flattens; CNN
// families need a valid shape.
KernelPair compute_kernel(const Matrix& x1, const Matrix& x2, ImageShape shape,
                          const ArchitectureSpec& arch, Precision prec = Precision::Double);
std::pair<Vector, Vector> compute_kernel_diag(const Matrix& x, ImageShape shape,
                                              const ArchitectureSpec& arch);

}  // namespace nnk
