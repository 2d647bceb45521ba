#include "nnk/spectral.hpp"

#include <cmath>
#include <limits>

#include "nnk/linalg.hpp"

namespace nnk {

Vector eigenspectrum(const Matrix& k) {
  if (k.rows() != k.cols()) throw DimensionError("eigenspectrum: matrix not square");
  const double scale = std::max(k.cwiseAbs().maxCoeff(), 1e-300);
  if (asymmetry(k) > 1e-8 * scale)
    throw DimensionError("eigenspectrum: matrix is not symmetric within 1e-8 relative");
  Vector v = sym_eigvals(0.5 * (k + k.transpose()));
  return v.reverse();
}

PowerLawFit fit_powerlaw_tail(const Vector& eigenvalues, Eigen::Index m, Eigen::Index lo,
                              Eigen::Index hi) {
  if (lo < 0) lo = m / 4;
  if (hi < 0) hi = m / 2;
  if (lo < 0 || hi > eigenvalues.size() || hi - lo < 2)
    throw ConfigError("fit_powerlaw_tail: bad index range");
  const Eigen::Index n = hi - lo;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (Eigen::Index i = lo; i < hi; ++i) {
    const double lam = eigenvalues[i];
    if (lam <= 0.0)
      throw ConditioningError(
          "fit_powerlaw_tail: nonpositive eigenvalue in fit range (index " + std::to_string(i) +
              "); the tail is on the noise floor",
          lam, 0.0);
    const double x = std::log(static_cast<double>(i + 1));  // 1-based index
    const double y = std::log(lam);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double denom = n * sxx - sx * sx;
  const double slope = (n * sxy - sx * sy) / denom;
  const double intercept = (sy - slope * sx) / n;
  PowerLawFit fit;
  fit.alpha = -slope;
  fit.c = std::exp(intercept) / static_cast<double>(m);  // intercept is log(C m)
  fit.lo = lo;
  fit.hi = hi;
  return fit;
}

double noise_floor(Eigen::Index m, double sigma_n) {
  if (m < 1) throw ConfigError("noise_floor: m must be >= 1");
  if (sigma_n < 0.0) throw ConfigError("noise_floor: sigma_n must be >= 0");
  return std::sqrt(2.0 * static_cast<double>(m)) * sigma_n;
}

double critical_dataset_size(double c, double alpha, double sigma_n) {
  if (c <= 0.0 || sigma_n <= 0.0)
    throw ConfigError("critical_dataset_size: C and sigma_n must be positive");
  if (alpha <= 0.5) return std::numeric_limits<double>::infinity();
  return std::pow(c / (std::sqrt(2.0) * sigma_n), 2.0 / (2.0 * alpha - 1.0));
}

double default_sigma_n(Precision prec) {
  return prec == Precision::Single ? static_cast<double>(std::numeric_limits<float>::epsilon())
                                   : std::numeric_limits<double>::epsilon();
}

PsdAudit psd_audit(const Matrix& k, double sigma_n) {
  const Eigen::Index m = k.rows();
  const Vector evals = eigenspectrum(k);
  PsdAudit audit;
  audit.min_eigenvalue = evals[m - 1];
  const double floor = noise_floor(m, sigma_n);
  audit.weyl_lo = audit.min_eigenvalue - floor;
  audit.weyl_hi = audit.min_eigenvalue + floor;
  audit.psd_at_risk = audit.weyl_lo < 0.0;
  const double trace_over_m = k.trace() / static_cast<double>(m);
  // diagonal addition of twice the floor keeps the perturbed spectrum clear
  audit.recommended_eps = trace_over_m > 0.0 ? 2.0 * floor / trace_over_m : 0.0;
  // the noise scale is calibrated to O(1) kernel entries
  audit.scale_warning = trace_over_m > 10.0 || (trace_over_m > 0.0 && trace_over_m < 0.1);
  return audit;
}

SpectrumReport analyze_spectrum(const Matrix& k, double sigma_n, Eigen::Index fit_lo,
                                Eigen::Index fit_hi) {
  SpectrumReport rep;
  rep.eigenvalues = eigenspectrum(k);
  const Eigen::Index m = rep.eigenvalues.size();
  rep.sigma_n = sigma_n;
  rep.noise_floor = noise_floor(m, sigma_n);
  rep.fit = fit_powerlaw_tail(rep.eigenvalues, m, fit_lo, fit_hi);
  rep.critical_size = critical_dataset_size(rep.fit.c, rep.fit.alpha, sigma_n);
  const double lam_min = rep.eigenvalues[m - 1];
  rep.condition_number = lam_min > 0.0 ? rep.eigenvalues[0] / lam_min
                                       : std::numeric_limits<double>::infinity();
  return rep;
}

}  // namespace nnk
