#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kmfpe/coefficient_model.hpp"
#include "kmfpe/error.hpp"

#include <cmath>

using namespace kmfpe;

namespace {

CoefficientModel shaped() {
    CoefficientModel m;
    m.a1_values = {1.1};
    m.b2_low = 0.01;
    m.b2_high = 0.3;
    m.b2_mid = 5.0;
    m.b2_width = 1.2;
    m.b0_amplitude = 0.8;
    m.gamma_low = 1.0;
    m.gamma_high = 1.17;
    m.gamma_crossover_tau = 7.0;
    m.valid_lo = -2.0;
    m.valid_hi = 11.0;
    return m;
}

KmLimit limit_from(const CoefficientModel& m, double tau) {
    const Coefficients c = eval(m, tau);
    KmLimit l;
    l.tau = tau;
    l.a1 = c.a1;
    l.a0 = c.a0;
    l.b0 = c.b0;
    l.b1 = c.b1;
    l.b2 = c.b2;
    for (auto& d : l.diagnostics) d.limit_se = 0.01;
    l.diagnostics[4].limit_se = 0.01 * c.b0;
    return l;
}

} // namespace

TEST_CASE("b0 at tau 0 and tau 3") {
    CoefficientModel m;
    m.b0_amplitude = 1.0;
    m.gamma_low = m.gamma_high = 1.0;
    CHECK(eval(m, 0.0).b0 == 1.0);
    m.b0_amplitude = 0.6;
    CHECK(eval(m, 3.0).b0 == doctest::Approx(0.6 / 8.0).epsilon(1e-15));
}

TEST_CASE("slope of log2 b0 is -gamma_high past the crossover") {
    const CoefficientModel m = shaped();
    CHECK(log2_b0(m, 20.0) - log2_b0(m, 19.0) == doctest::Approx(-1.17).epsilon(1e-12));
    CHECK(log2_b0(m, 2.0) - log2_b0(m, 1.0) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("decay rate B") {
    CoefficientModel m;
    m.gamma_low = m.gamma_high = 1.0;
    CHECK(decay_rate_B(m, 0.0) == doctest::Approx(0.6931471805599453).epsilon(1e-15));
    m.gamma_low = m.gamma_high = 1.17;
    CHECK(decay_rate_B(m, 0.0) == doctest::Approx(0.8110).epsilon(1e-4));
    const CoefficientModel c = CoefficientModel::constant({1.0, 0.0, 0.5, 0.0, 0.2});
    CHECK(decay_rate_B(c, 3.0) == 0.0);
    CHECK(eval(c, -7.0).b0 == 0.5);
    CHECK(eval(c, 9.0).b2 == 0.2);
}

TEST_CASE("b0 is continuous across the crossover") {
    const CoefficientModel m = shaped();
    const double k = m.gamma_crossover_tau;
    CHECK(eval(m, k - 1e-9).b0 == doctest::Approx(eval(m, k + 1e-9).b0).epsilon(1e-8));
    CHECK(eval(m, k).b0 == doctest::Approx(0.8 * std::exp2(-7.0)).epsilon(1e-14));
}

TEST_CASE("numerical derivative of ln b0 gives -B away from the knot") {
    const CoefficientModel m = shaped();
    const double h = 1e-4;
    for (double tau : {-2.0, 0.0, 3.3, 6.5, 7.5, 10.0, 14.75}) {
        const double d = (std::log(eval(m, tau + h).b0) - std::log(eval(m, tau - h).b0)) / (2 * h);
        CHECK(-d == doctest::Approx(decay_rate_B(m, tau)).epsilon(1e-6));
    }
}

TEST_CASE("b2 is non-negative and non-decreasing; b0 positive everywhere") {
    const CoefficientModel m = shaped();
    double prev = -1.0;
    for (double tau = -10.0; tau <= 30.0; tau += 0.05) {
        const Coefficients c = eval(m, tau);
        CHECK(c.b2 >= 0.0);
        CHECK(c.b2 >= prev);
        CHECK(c.b0 > 0.0);
        prev = c.b2;
    }
}

TEST_CASE("extrapolation flag and hold-last policy") {
    CoefficientModel m = shaped();
    CHECK_FALSE(eval(m, 3.0).extrapolated);
    CHECK(eval(m, 14.75).extrapolated);
    CHECK(eval(m, -3.0).extrapolated);
    m.extrapolation = ExtrapolationPolicy::HoldLast;
    const Coefficients edge = eval(m, 11.0), beyond = eval(m, 14.75);
    CHECK(beyond.b0 == edge.b0);
    CHECK(beyond.b2 == edge.b2);
    CHECK(beyond.extrapolated);
}

TEST_CASE("a0 and b1 vanish above the asymmetry threshold") {
    CoefficientModel m = shaped();
    m.a0_low = 0.05;
    m.b1_low = -0.02;
    m.asym_threshold_tau = 1.0;
    CHECK(eval(m, 0.5).a0 == 0.05);
    CHECK(eval(m, 0.5).b1 == -0.02);
    CHECK(eval(m, 1.5).a0 == 0.0);
    CHECK(eval(m, 1.5).b1 == 0.0);
}

TEST_CASE("piecewise constant a1") {
    CoefficientModel m;
    m.a1_breaks = {2.0, 5.0};
    m.a1_values = {1.0, 1.5, 0.7};
    CHECK(a1_at(m, 0.0) == 1.0);
    CHECK(a1_at(m, 3.0) == 1.5);
    CHECK(a1_at(m, 9.0) == 0.7);
}

TEST_CASE("fit_model round trip on noiseless limits") {
    const CoefficientModel truth = shaped();
    std::vector<KmLimit> limits;
    for (double tau = -2.0; tau <= 11.0; tau += 0.5) limits.push_back(limit_from(truth, tau));
    const CoefficientModel m = fit_model(limits);
    CHECK(m.a1_values.at(0) == doctest::Approx(1.1).epsilon(1e-6));
    CHECK(m.b0_amplitude == doctest::Approx(0.8).epsilon(1e-6));
    CHECK(m.gamma_low == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(m.gamma_high == doctest::Approx(1.17).epsilon(1e-6));
    CHECK(m.gamma_crossover_tau == doctest::Approx(7.0).epsilon(1e-6));
    CHECK(m.b2_low == doctest::Approx(0.01).epsilon(1e-6));
    CHECK(m.b2_high == doctest::Approx(0.3).epsilon(1e-6));
    CHECK(m.b2_mid == doctest::Approx(5.0).epsilon(1e-6));
    CHECK(m.b2_width == doctest::Approx(1.2).epsilon(1e-6));
    CHECK(m.valid_lo == -2.0);
    CHECK(m.valid_hi == 11.0);
    CHECK_FALSE(std::isfinite(m.asym_threshold_tau));
}

TEST_CASE("fit_model: flat b0 warns, constant b2 gives the plateau") {
    std::vector<KmLimit> limits;
    for (double tau : {0.0, 1.0, 2.0, 3.0, 4.0}) {
        KmLimit l = limit_from(CoefficientModel::constant({1.0, 0.0, 0.5, 0.0, 0.2}), tau);
        limits.push_back(l);
    }
    const CoefficientModel m = fit_model(limits);
    CHECK(m.b2_low == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(m.b2_high == doctest::Approx(0.2).epsilon(1e-12));
    bool warned = false;
    for (const auto& w : m.warnings) warned = warned || w.find("not decaying") != std::string::npos;
    CHECK(warned);
}

TEST_CASE("fit_model: significant a0 below a threshold") {
    const CoefficientModel truth = shaped();
    std::vector<KmLimit> limits;
    for (double tau = 0.0; tau <= 6.0; tau += 1.0) {
        KmLimit l = limit_from(truth, tau);
        if (tau <= 2.0) l.a0 = 0.1;
        limits.push_back(l);
    }
    const CoefficientModel m = fit_model(limits);
    CHECK(m.asym_threshold_tau == 2.0);
    CHECK(m.a0_low == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(eval(m, 4.0).a0 == 0.0);
}

TEST_CASE("fit_model needs four scales") {
    const std::vector<KmLimit> one{limit_from(shaped(), 0.0)};
    CHECK_THROWS_AS(fit_model(one), FitError);
}

TEST_CASE("json round trip") {
    CoefficientModel m = shaped();
    m.a1_breaks = {3.0};
    m.a1_values = {1.0, 1.2};
    m.warnings = {"note"};
    const CoefficientModel back = model_from_json(nlohmann::json::parse(to_json(m).dump()));
    for (double tau : {-3.0, 0.0, 2.5, 7.0, 9.0, 15.0}) {
        const Coefficients a = eval(m, tau), b = eval(back, tau);
        CHECK(a.a1 == b.a1);
        CHECK(a.b0 == b.b0);
        CHECK(a.b2 == b.b2);
        CHECK(a.extrapolated == b.extrapolated);
    }
    CHECK(back.warnings == m.warnings);
    nlohmann::json bad = to_json(m);
    bad["schema_version"] = 99;
    CHECK_THROWS_AS(model_from_json(bad), ConfigError);
}
