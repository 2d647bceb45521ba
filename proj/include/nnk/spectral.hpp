// Eigenspectrum analysis of kernel matrices: power-law tail fits, the
// floating-point noise-floor model, the critical dataset size it implies,
// and a PSD audit with Weyl bounds.
//
// The noise model: a symmetric perturbation with entries of scale sigma_n
// has smallest eigenvalue ~ -sqrt(2m) sigma_n (Wigner semicircle edge).
// With tail eigenvalues lambda_i ~ C m / i^alpha, PSD of the perturbed
// kernel can break once
//   m* = (C / (sqrt(2) sigma_n))^(2/(2 alpha - 1))   for alpha > 1/2,
// and never (m* = infinity) otherwise.
#pragma once

#include <optional>
#include <utility>

#include "nnk/common.hpp"

namespace nnk {

struct PowerLawFit {
  double c = 0.0;      // dataset-size independent constant
  double alpha = 0.0;  // decay exponent
  Eigen::Index lo = 0, hi = 0;  // fitted index range [lo, hi), 0-based
};

struct SpectrumReport {
  Vector eigenvalues;  // descending
  PowerLawFit fit;
  double sigma_n = 0.0;
  double noise_floor = 0.0;    // sqrt(2m) sigma_n
  double critical_size = 0.0;  // m*, +inf when alpha <= 1/2
  double condition_number = 0.0;
};

// Full spectrum, descending, double precision. Requires symmetry within
// 1e-8 relative to the largest entry.
Vector eigenspectrum(const Matrix& k);

// Least-squares fit of log lambda_i = log(C m) - alpha log i over 1-based
// indices in [lo, hi). Defaults to the [m/4, m/2) window, clear of both the
// structured head and the noise-dominated extreme tail.
PowerLawFit fit_powerlaw_tail(const Vector& eigenvalues, Eigen::Index m, Eigen::Index lo = -1,
                              Eigen::Index hi = -1);

double noise_floor(Eigen::Index m, double sigma_n);

// Eq-style critical size; +infinity for alpha <= 1/2.
double critical_dataset_size(double c, double alpha, double sigma_n);

// Machine epsilon of the precision tag, the proxy noise scale.
double default_sigma_n(Precision prec);

struct PsdAudit {
  double min_eigenvalue = 0.0;
  double weyl_lo = 0.0, weyl_hi = 0.0;  // min eigenvalue +- sqrt(2m) sigma_n
  bool psd_at_risk = false;
  double recommended_eps = 0.0;  // eps * tr/m clears the noise floor
  bool scale_warning = false;    // mean diagonal far from O(1)
};

PsdAudit psd_audit(const Matrix& k, double sigma_n);

// Report combining the above for one kernel matrix.
SpectrumReport analyze_spectrum(const Matrix& k, double sigma_n, Eigen::Index fit_lo = -1,
                                Eigen::Index fit_hi = -1);

}  // namespace nnk
