#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kmfpe/error.hpp"
#include "kmfpe/qgaussian.hpp"

#include <boost/math/special_functions/beta.hpp>

#include <cmath>
#include <random>

using namespace kmfpe;

namespace {

std::vector<double> linspace_edges(double lo, double hi, int bins) {
    std::vector<double> e(static_cast<std::size_t>(bins) + 1);
    for (int i = 0; i <= bins; ++i) e[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / bins;
    return e;
}

// independent sampler: scaled Student t
std::vector<double> t_draws(double mu, double b0, double b2, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::student_t_distribution<double> t(mu);
    const double s = std::sqrt(b0 / (b2 * mu));
    std::vector<double> x(n);
    for (double& v : x) v = s * t(rng);
    return x;
}

} // namespace

TEST_CASE("normalization against the beta-function integral") {
    CHECK(qgaussian_normalization(3.0, 1.0, 1.0) == doctest::Approx(2.0 / M_PI).epsilon(1e-12));
    for (double mu : {0.5, 2.0, 4.0, 9.5}) {
        for (double b0 : {0.3, 1.0, 2.0}) {
            const double b2 = 0.7;
            const double integral =
                std::pow(b0, -0.5 * (mu + 1.0)) * std::sqrt(b0 / b2) * boost::math::beta(0.5, 0.5 * mu);
            CHECK(qgaussian_normalization(mu, b0, b2) == doctest::Approx(1.0 / integral).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(qgaussian_normalization(0.0, 1.0, 1.0), DomainError);
    CHECK_THROWS_AS(qgaussian_normalization(2.0, 0.0, 1.0), DomainError);
    CHECK_THROWS_AS(qgaussian_normalization(2.0, 1.0, -0.1), DomainError);
}

TEST_CASE("b2 = 0 is the Gaussian with variance b0") {
    const QGaussianFit g = make_qgaussian(INFINITY, 2.0, 0.0);
    for (double x : {0.0, 0.7, -1.3, 4.0}) {
        CHECK(qgaussian_pdf(x, g) ==
              doctest::Approx(std::exp(-x * x / 4.0) / std::sqrt(4.0 * M_PI)).epsilon(1e-13));
    }
    // large mu with b0 scaled by mu approaches the same curve
    const double mu = 1e6;
    const QGaussianFit near = make_qgaussian(mu, 2.0 * mu, 1.0);
    CHECK(qgaussian_pdf(1.0, near) == doctest::Approx(qgaussian_pdf(1.0, g)).epsilon(1e-5));
}

TEST_CASE("pdf is symmetric about the center and has power-law tails") {
    const QGaussianFit f = make_qgaussian(4.0, 0.5, 0.2, 1.5);
    for (double d : {0.1, 1.0, 7.0}) CHECK(qgaussian_pdf(1.5 + d, f) == qgaussian_pdf(1.5 - d, f));
    const QGaussianFit c = make_qgaussian(4.0, 0.5, 0.2);
    const double x = 1e4;
    const double slope = (qgaussian_log_pdf(2 * x, c) - qgaussian_log_pdf(x, c)) / std::log(2.0);
    CHECK(slope == doctest::Approx(-5.0).epsilon(1e-6));
}

TEST_CASE("mu from coefficients") {
    CHECK(mu_from_params(1.0, 0.0, 0.25) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(mu_from_params(0.5, 1.0, 0.3) == 1.0);
    CHECK(std::isinf(mu_from_params(1.0, 0.5, 0.0)));
    CHECK(mu_from_params(1.0, 0.5, 0.25) == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(mu_alternative(1.0, 0.25) == 2.0);
    CHECK_THROWS_AS(mu_from_params(1.0, 0.5, -1.0), DomainError);
    double prev = INFINITY;
    for (double b2 = 0.01; b2 < 1.0; b2 += 0.01) {
        const double mu = mu_from_params(1.0, 0.6931, b2);
        CHECK(mu < prev);
        prev = mu;
    }
}

TEST_CASE("q and mu are dual") {
    CHECK(q_from_mu(3.0) == 1.5);
    CHECK(q_from_mu(INFINITY) == 1.0);
    CHECK(std::isinf(mu_from_q(1.0)));
    for (double mu : {0.5, 1.0, 3.0, 6.0, 40.0}) CHECK(mu_from_q(q_from_mu(mu)) == doctest::Approx(mu).epsilon(1e-13));
}

TEST_CASE("variance prediction") {
    CoefficientModel m = CoefficientModel::constant({1.0, 0.0, 0.5, 0.0, 0.1});
    m.gamma_low = m.gamma_high = 1.0;
    const double B = std::log(2.0);
    for (double tau : {0.0, 1.0, 2.5}) {
        const VariancePrediction v = variance_prediction(m, tau);
        CHECK_FALSE(v.infinite);
        CHECK(v.value == doctest::Approx(0.5 * std::exp2(-tau) / (1.0 - B / 2.0 - 0.1)).epsilon(1e-13));
    }
    CHECK(variance_prediction(m, 3.0).value / variance_prediction(m, 2.0).value == doctest::Approx(0.5));
    CHECK(variance_prediction(1.0, 0.0, 0.5, 0.0).value == 0.5);
    CHECK(variance_prediction(1.0, 1.0, 0.5, 0.5).infinite);
    CHECK(variance_prediction(1.0, 1.0, 0.5, 0.6).infinite);
}

TEST_CASE("fit_mu recovers mu from Student-t draws") {
    const auto x = t_draws(4.0, 1.0, 1.0, 1000000, 5);
    const auto edges = linspace_edges(-6.0, 6.0, 121);
    FitMuOptions opts;
    opts.n_bootstrap = 50;
    const QGaussianFit f = fit_mu(histogram_1d(x, edges), opts);
    CHECK(std::abs(f.mu - 4.0) < 0.2);
    CHECK(f.mu_ci_lo <= f.mu);
    CHECK(f.mu_ci_hi >= f.mu);
    CHECK(f.mu_ci_hi - f.mu_ci_lo < 1.0);
    CHECK_FALSE(f.gaussian_regime);
    CHECK(f.warnings.empty());
}

TEST_CASE("gaussian draws are flagged as the Gaussian regime") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> g;
    std::vector<double> x(1000000);
    for (double& v : x) v = g(rng);
    FitMuOptions opts;
    opts.n_bootstrap = 50;
    const QGaussianFit f = fit_mu(histogram_1d(x, linspace_edges(-5.0, 5.0, 101)), opts);
    CHECK(f.gaussian_regime);
    CHECK(f.mu_ci_lo > 10.0);
}

TEST_CASE("too few populated bins") {
    const std::vector<double> x{-0.5, 0.1, 0.2, 0.7, 1.1};
    CHECK_THROWS_AS(fit_mu(histogram_1d(x, linspace_edges(-2.0, 2.0, 5))), PreconditionError);
}

TEST_CASE("fit_mu on an exact q-Gaussian grid") {
    SolverConfig cfg;
    cfg.L = 20.0;
    cfg.n_points = 801;
    PdfGrid g(cfg.L, cfg.n_points);
    const QGaussianFit truth = make_qgaussian(4.0, 0.6, 0.2);
    for (int i = 0; i < g.size(); ++i) g.density()[static_cast<std::size_t>(i)] = qgaussian_pdf(g.x(i), truth);
    FitMuOptions opts;
    opts.known_b2 = 0.2;
    const QGaussianFit f = fit_mu(g, opts);
    CHECK(f.mu == doctest::Approx(4.0).epsilon(1e-6));
    CHECK(f.scale_b0 == doctest::Approx(0.6).epsilon(1e-6));
    CHECK(f.mu_ci_lo == f.mu);
}
