#pragma once

#include "kmfpe/coefficient_model.hpp"
#include "kmfpe/density.hpp"
#include "kmfpe/fpe.hpp"

#include <json.hpp>

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace kmfpe {

/// Density C (b0 + b2 (x - center)^2)^(-(mu+1)/2). scale_b2 == 0 is the
/// Gaussian limit with variance scale_b0 (mu is then +inf).
struct QGaussianFit {
    double mu = std::numeric_limits<double>::infinity();
    double scale_b0 = 1.0;
    double scale_b2 = 0.0;
    double center = 0.0;
    double normalization = 0.0;
    double fit_loss = 0.0;
    double q_equiv = 1.0;

    // populated by fit_mu
    double mu_ci_lo = std::numeric_limits<double>::quiet_NaN();
    double mu_ci_hi = std::numeric_limits<double>::quiet_NaN();
    bool gaussian_regime = false;
    int n_points = 0;
    int iterations = 0;
    std::vector<std::string> warnings;
};

/// Normalization constant C for the given shape. Throws DomainError unless
/// mu > 0, b0 > 0, b2 >= 0.
double qgaussian_normalization(double mu, double b0, double b2);

/// Fills normalization and q_equiv from (mu, scale_b0, scale_b2).
QGaussianFit make_qgaussian(double mu, double b0, double b2, double center = 0.0);

double qgaussian_pdf(double x, const QGaussianFit& fit);
double qgaussian_log_pdf(double x, const QGaussianFit& fit);

/// 1 + (a1 - B/2) / b2; +inf when b2 == 0.
double mu_from_params(double a1, double B, double b2);
/// a1 / (2 b2), the older literature expression. Comparison reports only.
double mu_alternative(double a1, double b2);

double q_from_mu(double mu);
double mu_from_q(double q);

struct VariancePrediction {
    double value = 0.0;
    bool infinite = false;  ///< denominator a1 - B/2 - b2 <= 0
};

/// b0(tau) / (a1 - B/2 - b2) at tau.
VariancePrediction variance_prediction(const CoefficientModel& model, double tau);
VariancePrediction variance_prediction(double a1, double B, double b0, double b2);

enum class FitSpace { Log, Linear };

struct FitMuOptions {
    FitSpace space = FitSpace::Log;
    /// When set, the center is held at this value.
    std::optional<double> fixed_center = 0.0;
    /// Known b2 used to express the fitted scale; 0 uses the b2 = 1 convention.
    double known_b2 = 0.0;
    int min_points = 15;
    int max_iterations = 300;
    /// Grid nodes below this fraction of the peak are ignored.
    double grid_floor = 1e-10;
    int n_bootstrap = 200;
    std::uint64_t seed = 0x71a5eedULL;
    double gaussian_mu_threshold = 10.0;
    /// Asymmetry warning: |skewness| above this and reduced loss above
    /// asym_loss_threshold.
    double asym_skew_threshold = 0.1;
    double asym_loss_threshold = 3.0;
};

/// Weighted least squares fit over populated bins with count weights in log
/// space. Confidence interval from a Poisson bootstrap over bin counts.
QGaussianFit fit_mu(const Histogram1D& histogram, const FitMuOptions& opts = {});

/// Fit to a solver snapshot in physical units (density weights, no bootstrap;
/// the interval collapses to the point estimate).
QGaussianFit fit_mu(const PdfGrid& snapshot, const FitMuOptions& opts = {});

nlohmann::json to_json(const QGaussianFit& fit);

} // namespace kmfpe
