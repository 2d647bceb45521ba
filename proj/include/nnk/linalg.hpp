// Thin wrappers over the symmetric eigensolver used across modules.
#pragma once

#include "nnk/common.hpp"

namespace nnk {

// Full symmetric eigendecomposition, eigenvalues ascending. Uses LAPACK
// divide-and-conquer; always computed in double precision.
void sym_eigh(const Matrix& a, Vector& eigenvalues, Matrix& eigenvectors);

// Eigenvalues only, ascending.
Vector sym_eigvals(const Matrix& a);

// Max |a - a^T| entry, as a symmetry diagnostic.
double asymmetry(const Matrix& a);

}  // namespace nnk
