#pragma once

#include "kmfpe/km.hpp"

#include <json.hpp>

#include <limits>
#include <span>
#include <string>
#include <vector>

namespace kmfpe {

/// Drift/diffusion parameters at one scale.
struct Coefficients {
    double a1 = 0.0, a0 = 0.0, b0 = 0.0, b1 = 0.0, b2 = 0.0;
    bool extrapolated = false;
};

enum class ExtrapolationPolicy { Functional, HoldLast };

/// Smoothed tau-dependence of the Fokker-Planck coefficients.
///
///   a1(tau)  piecewise constant (a1_values.size() == a1_breaks.size() + 1)
///   a0, b1   constant below asym_threshold_tau, zero above
///   b2(tau)  logistic ramp b2_low -> b2_high centred on b2_mid, width b2_width
///   b0(tau)  b0_amplitude * 2^(-gamma_low tau) up to gamma_crossover_tau, then
///            continued with slope gamma_high in log2; continuous at the knot
struct CoefficientModel {
    static constexpr int kSchemaVersion = 1;

    std::vector<double> a1_breaks;
    std::vector<double> a1_values{1.0};
    double a0_low = 0.0;
    double b1_low = 0.0;
    double asym_threshold_tau = -std::numeric_limits<double>::infinity();
    double b2_low = 0.0, b2_high = 0.0, b2_mid = 0.0, b2_width = 1.0;
    double b0_amplitude = 1.0;
    double gamma_low = 1.0, gamma_high = 1.0;
    double gamma_crossover_tau = 0.0;
    double valid_lo = -std::numeric_limits<double>::infinity();
    double valid_hi = std::numeric_limits<double>::infinity();
    ExtrapolationPolicy extrapolation = ExtrapolationPolicy::Functional;
    std::vector<std::string> warnings;
    nlohmann::json diagnostics = nlohmann::json::object();

    /// Constant coefficients for all tau (b0 constant: gammas 0).
    static CoefficientModel constant(const Coefficients& c);
};

Coefficients eval(const CoefficientModel& model, double tau);
double a1_at(const CoefficientModel& model, double tau);
double b2_at(const CoefficientModel& model, double tau);
double log2_b0(const CoefficientModel& model, double tau);
double gamma_at(const CoefficientModel& model, double tau);

/// B = -d ln b0 / d tau = gamma(tau) ln 2 (right derivative at the knot).
double decay_rate_B(const CoefficientModel& model, double tau);

struct ModelFitOptions {
    /// a0 / b1 count as nonzero when |value| > n_se * standard error.
    double significance_n_se = 2.0;
    int max_iterations = 200;
};

/// Smooths >= 4 KmLimit records into a CoefficientModel.
CoefficientModel fit_model(std::span<const KmLimit> limits, const ModelFitOptions& opts = {});

/// Homogeneous model from a single limit (no tau-dependence to fit).
CoefficientModel constant_model(const KmLimit& limit);

nlohmann::json to_json(const CoefficientModel& m);
CoefficientModel model_from_json(const nlohmann::json& j);

} // namespace kmfpe
