#include "nnk/linalg.hpp"

#include <lapacke.h>

namespace nnk {

void sym_eigh(const Matrix& a, Vector& eigenvalues, Matrix& eigenvectors) {
  if (a.rows() != a.cols()) throw DimensionError("sym_eigh: matrix not square");
  const lapack_int n = static_cast<lapack_int>(a.rows());
  eigenvectors = a;  // dsyevd overwrites with eigenvectors (column-major)
  eigenvalues.resize(n);
  const lapack_int info = LAPACKE_dsyevd(LAPACK_COL_MAJOR, 'V', 'L', n, eigenvectors.data(),
                                         n, eigenvalues.data());
  if (info != 0)
    throw ConditioningError("sym_eigh: dsyevd failed with info=" + std::to_string(info), 0.0, 0.0);
}

Vector sym_eigvals(const Matrix& a) {
  if (a.rows() != a.cols()) throw DimensionError("sym_eigvals: matrix not square");
  const lapack_int n = static_cast<lapack_int>(a.rows());
  Matrix work = a;
  Vector vals(n);
  const lapack_int info =
      LAPACKE_dsyevd(LAPACK_COL_MAJOR, 'N', 'L', n, work.data(), n, vals.data());
  if (info != 0)
    throw ConditioningError("sym_eigvals: dsyevd failed with info=" + std::to_string(info), 0.0,
                            0.0);
  return vals;
}

double asymmetry(const Matrix& a) {
  if (a.rows() != a.cols()) throw DimensionError("asymmetry: matrix not square");
  return (a - a.transpose()).cwiseAbs().maxCoeff();
}

}  // namespace nnk
