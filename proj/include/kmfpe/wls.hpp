#pragma once

#include <span>
#include <vector>

namespace kmfpe {

/// Weighted linear least squares result for y ~ sum_k beta_k * x^k.
struct PolyFit {
    std::vector<double> coeffs;      ///< ascending powers
    std::vector<double> covariance;  ///< row-major (degree+1)^2, scaled by 1 (absolute weights)
    double chi2 = 0.0;
    int dof = 0;

    double chi2_per_dof() const { return dof > 0 ? chi2 / dof : 0.0; }
    double stderr_of(std::size_t k) const;
    double eval(double x) const;
};

/// Polynomial fit of given degree with weights w_i (typically 1/se_i^2).
/// Covariance is (X^T W X)^-1, i.e. the weights are taken as absolute.
/// Throws FitError on rank deficiency or too few points.
PolyFit weighted_polyfit(std::span<const double> x, std::span<const double> y,
                         std::span<const double> w, int degree);

} // namespace kmfpe
