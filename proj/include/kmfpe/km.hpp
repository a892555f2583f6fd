#pragma once

#include "kmfpe/density.hpp"
#include "kmfpe/wls.hpp"

#include <array>
#include <span>
#include <string>
#include <vector>

namespace kmfpe {

/// Where conditional moments come from.
enum class MomentSource {
    /// Exact per-row power sums of x2 - x1 at the in-bin mean of x1 (default).
    RowSums,
    /// Bin-centre quadrature sum_j (c2_j - c1_i)^k P(j|i) on the joint counts.
    BinCenters,
};

struct KmOptions {
    MomentSource source = MomentSource::RowSums;
    /// Points with fewer pairs are omitted from the curve.
    std::uint64_t min_count = 5;
    /// Default fit range: central run of bins with at least this many pairs.
    std::uint64_t fit_min_neff = 50;
};

/// Finite-dtau Kramers-Moyal coefficient M^(k) / (dtau k!) sampled per x1 bin.
struct KmCurve {
    int order = 0;
    double tau = 0.0;
    double dtau = 0.0;
    std::vector<double> x_centers;    ///< abscissa used by fits
    std::vector<double> bin_centers;  ///< geometric bin centres, same indexing
    std::vector<double> values;
    std::vector<double> std_errors;
    std::vector<std::uint64_t> n_eff;
};

/// `inflation` >= 1 is the variance inflation of the pair samples (see
/// serial_inflation): n_eff = n / inflation and errors grow by sqrt(inflation).
KmCurve conditional_moment(const ConditionalDensity& cd, int k, const KmOptions& opts = {},
                           double inflation = 1.0);

/// Variance inflation of (x2 - x1)^k over time-ordered pairs that may share
/// overlapping windows: batch means (batch length ~sqrt(n)) of the residuals
/// from each x1 row's mean, relative to the residual variance. Returns >= 1;
/// 1 when there are fewer than 100 admitted pairs.
double serial_inflation(std::span<const double> x1, std::span<const double> x2, const ConditionalDensity& cd,
                        int k);

struct FitRange {
    double lo = 0.0, hi = 0.0;
    bool contains(double x) const { return x >= lo && x <= hi; }
};

/// Central contiguous run of points with n_eff >= min_neff, grown from the
/// most populated point.
FitRange default_fit_range(const KmCurve& curve, std::uint64_t min_neff = 50);

struct DriftFit {
    double a1_tilde = 0.0, a0_tilde = 0.0;
    std::array<double, 4> covariance{};  ///< (a1, a0) row-major
    FitRange fit_range;
    double chi2_per_dof = 0.0;
    int n_points = 0;

    double a1_se() const;
    double a0_se() const;
};

/// Weighted least squares of D1 = -a1 x + a0 with weights 1/se^2.
DriftFit fit_drift(const KmCurve& curve, FitRange range, std::uint64_t min_count = 5);

struct DiffusionFit {
    double b2_tilde = 0.0, b1_tilde = 0.0, b0_tilde = 0.0;
    std::array<double, 9> covariance{};  ///< (b2, b1, b0) row-major
    FitRange fit_range;
    double chi2_per_dof = 0.0;
    int n_points = 0;
    bool valid = true;
    std::string invalid_reason;

    double se(int k) const;  ///< 0 -> b2, 1 -> b1, 2 -> b0
};

/// Weighted least squares of D2 = b2 x^2 + b1 x + b0. A non-positive b0 or
/// a negative curve inside the range marks the fit invalid.
DiffusionFit fit_diffusion(const KmCurve& curve, FitRange range, std::uint64_t min_count = 5);

/// Quartic in x fitted to the fourth-order curve.
struct QuarticFit {
    std::array<double, 5> coeffs{};  ///< ascending powers
    std::array<double, 5> std_errors{};
    FitRange fit_range;
    double chi2_per_dof = 0.0;
    int n_points = 0;

    double eval(double x) const;
};

QuarticFit fit_quartic(const KmCurve& curve, FitRange range, std::uint64_t min_count = 5);

/// Linear regression p(dtau) = limit + slope * dtau. When the linear fit's
/// chi2/dof exceeds 3 a quadratic fit is reported alongside (diagnostic only).
struct Extrapolation {
    double limit = 0.0, limit_se = 0.0;
    double slope = 0.0, slope_se = 0.0;
    double chi2_per_dof = 0.0;
    int n_points = 0;
    bool quadratic_reported = false;
    double quadratic_limit = 0.0, quadratic_limit_se = 0.0;
};

/// Points are sorted by dtau before fitting, so the result does not depend on
/// input order. Zero or missing standard errors fall back to unit weights with
/// residual-scaled covariance.
Extrapolation extrapolate_linear(std::span<const double> dtau, std::span<const double> value,
                                 std::span<const double> se);

struct DtauFits {
    double dtau = 0.0;
    DriftFit drift;
    DiffusionFit diffusion;
};

struct KmLimit {
    double tau = 0.0;
    double a1 = 0.0, a0 = 0.0, b2 = 0.0, b1 = 0.0, b0 = 0.0;
    /// a1, a0, b2, b1, b0 in that order.
    std::array<Extrapolation, 5> diagnostics{};
    int n_dtau = 0;
    bool valid = true;
    std::string note;

    static constexpr std::array<const char*, 5> kNames{"a1", "a0", "b2", "b1", "b0"};
};

/// dtau -> 0 limit of the drift/diffusion parameters at one nominal tau.
KmLimit extrapolate_dtau(std::span<const DtauFits> fits, double tau);

struct DtauQuartic {
    double dtau = 0.0;
    QuarticFit fit;
};

struct PawulaReport {
    std::array<Extrapolation, 5> coeffs{};  ///< extrapolated quartic coefficients
    bool coeffs_within_bound = false;
    double n_se = 2.0;
    double max_abs_d4 = 0.0;
    double max_abs_d2 = 0.0;
    double ratio = 0.0;
    double ratio_limit = 0.05;
    FitRange range;
    int dtau_degree = 1;
    bool passed = false;
};

/// Polynomial of the given degree in dtau; the constant term is the limit.
/// Needs degree + 2 distinct dtau values.
Extrapolation extrapolate_polynomial(std::span<const double> dtau, std::span<const double> value,
                                     std::span<const double> se, int degree);

struct PawulaOptions {
    double ratio_limit = 0.05;
    double n_se = 2.0;
    /// For a diffusion D4(dtau) = D2^2 dtau / 2 + O(dtau^2); the quadratic term
    /// biases a straight-line intercept, so the default is degree 2. Falls
    /// back to 1 with fewer than 4 distinct dtau values.
    int dtau_degree = 2;
};

/// Extrapolates the quartic D4 coefficients to dtau -> 0 and compares them with
/// zero (each within n_se standard errors) and with the D2 limit over `range`.
PawulaReport pawula_check(std::span<const DtauQuartic> fits4, const KmLimit& limit, FitRange range,
                          const PawulaOptions& opts = {});

} // namespace kmfpe
