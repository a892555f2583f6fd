#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kmfpe/error.hpp"
#include "kmfpe/fpe.hpp"

#include <cmath>
#include <filesystem>

using namespace kmfpe;

namespace {

SolverConfig small(int n = 401, double L = 10.0) {
    SolverConfig c;
    c.L = L;
    c.n_points = n;
    return c;
}

double max_error_vs_normal(const PdfGrid& g, double var) {
    double err = 0.0;
    for (int i = 0; i < g.size(); ++i) {
        const double x = g.x(i);
        const double exact = std::exp(-0.5 * x * x / var) / std::sqrt(2.0 * M_PI * var);
        err = std::max(err, std::abs(g.physical_density(i) - exact));
    }
    return err;
}

} // namespace

TEST_CASE("zero coefficients leave the density unchanged") {
    CoefficientModel m;
    m.a1_values = {0.0};
    m.b0_amplitude = 0.0;
    const SolverConfig cfg = small();
    const PdfGrid g0 = gaussian_initial_condition(1.0, 0.5, cfg);
    const PdfGrid g = evolve(g0, m, 1.0, {}, cfg).back();
    CHECK(g.density() == g0.density());
    CHECK(g.tau == 1.0);
}

TEST_CASE("initial condition: peak, mean and mass") {
    const SolverConfig cfg = small();
    const PdfGrid g = gaussian_initial_condition(1.0, 0.0, cfg);
    CHECK(g.density()[200] == doctest::Approx(1.0 / std::sqrt(2.0 * M_PI)).epsilon(1e-6));
    CHECK(g.mass() == doctest::Approx(1.0).epsilon(1e-12));
    const PdfGrid h = gaussian_initial_condition(1.0, 2.0, cfg);
    const auto& p = h.density();
    CHECK(std::max_element(p.begin(), p.end()) - p.begin() == 240);
    CHECK(h.mean() == doctest::Approx(2.0).epsilon(1e-9));
    CHECK_THROWS_AS(gaussian_initial_condition(0.4, 0.0, cfg), ConfigError);
    CHECK_THROWS_AS(gaussian_initial_condition(0.0, 0.0, cfg), DomainError);
    CHECK_THROWS_AS(PdfGrid(10.0, 400), ConfigError);
}

TEST_CASE("tau_end equal to the start returns the input") {
    const SolverConfig cfg = small();
    const CoefficientModel m = CoefficientModel::constant({1.0, 0.0, 0.5, 0.0, 0.2});
    const PdfGrid g0 = gaussian_initial_condition(1.0, 0.0, cfg);
    const auto snaps = evolve(g0, m, 0.0, {}, cfg);
    REQUIRE(snaps.size() == 1);
    CHECK(snaps[0].density() == g0.density());
    CHECK_THROWS_AS(evolve(g0, m, -1.0, {}, cfg), PreconditionError);
}

TEST_CASE("OU relaxes to the closed-form Gaussian") {
    const SolverConfig cfg = small();
    const CoefficientModel m = CoefficientModel::constant({1.0, 0.0, 0.5, 0.0, 0.0});
    const PdfGrid g = evolve(gaussian_initial_condition(1.5, 0.0, cfg), m, 1.0, {}, cfg).back();
    const double var = 0.5 + (2.25 - 0.5) * std::exp(-2.0);
    CHECK(g.variance() == doctest::Approx(var).epsilon(1e-3));
    CHECK(max_error_vs_normal(g, var) < 1e-3);
}

TEST_CASE("second moment follows its ODE with multiplicative noise") {
    // dv/dtau = 2 b0 - 2 (a1 - b2) v
    const SolverConfig cfg = small(801, 20.0);
    const CoefficientModel m = CoefficientModel::constant({1.0, 0.0, 0.5, 0.0, 0.2});
    const std::vector<double> marks{0.5, 1.0};
    const auto snaps = evolve(gaussian_initial_condition(1.0, 0.0, cfg), m, 2.0, marks, cfg);
    REQUIRE(snaps.size() == 3);
    const double vinf = 0.5 / 0.8;
    const double taus[] = {0.5, 1.0, 2.0};
    for (std::size_t k = 0; k < 3; ++k) {
        CHECK(snaps[k].tau == taus[k]);
        const double v = vinf + (1.0 - vinf) * std::exp(-1.6 * taus[k]);
        CHECK(snaps[k].variance() == doctest::Approx(v).epsilon(2e-3));
    }
}

TEST_CASE("symmetric data stays symmetric and mass is conserved") {
    const SolverConfig cfg = small();
    const CoefficientModel m = CoefficientModel::constant({1.3, 0.0, 0.4, 0.0, 0.25});
    const PdfGrid g0 = gaussian_initial_condition(1.0, 0.0, cfg);
    EvolveStats st;
    const PdfGrid g = evolve(g0, m, 3.0, {}, cfg, &st).back();
    const auto& p = g.density();
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p[i] - p[p.size() - 1 - i]) < 1e-10);
    CHECK(std::abs(g.mass() - g0.mass()) < 1e-12);
    CHECK(st.steps > 0);
    CHECK(st.clip_events == 0);
    CHECK(std::abs(g.mean()) < 1e-12);
}

TEST_CASE("asymmetric coefficients move the mean as the drift says") {
    // d<x>/dtau = -a1 <x> + a0 with D1 = -a1 x + a0
    const SolverConfig cfg = small();
    const CoefficientModel m = CoefficientModel::constant({1.0, 0.3, 0.5, 0.0, 0.0});
    const PdfGrid g = evolve(gaussian_initial_condition(1.0, 1.0, cfg), m, 1.0, {}, cfg).back();
    const double mean = 0.3 + 0.7 * std::exp(-1.0);
    CHECK(g.mean() == doctest::Approx(mean).epsilon(1e-3));
}

TEST_CASE("error falls with grid refinement") {
    const CoefficientModel m = CoefficientModel::constant({1.0, 0.0, 0.5, 0.0, 0.0});
    const double var = 0.5 + 0.5 * std::exp(-2.0);
    double prev = INFINITY;
    for (int n : {161, 321, 641}) {
        const SolverConfig cfg = small(n, 8.0);
        const double err = max_error_vs_normal(
            evolve(gaussian_initial_condition(1.0, 0.0, cfg), m, 1.0, {}, cfg).back(), var);
        CHECK(err < prev / 3.0);
        prev = err;
    }
}

TEST_CASE("steps beyond the stability limit are rejected") {
    const SolverConfig cfg = small();
    const CoefficientModel m = CoefficientModel::constant({1.0, 0.0, 0.5, 0.0, 0.2});
    const PdfGrid g = gaussian_initial_condition(1.0, 0.0, cfg);
    const double lim = stable_dtau(g, m, 0.0, 0.0, cfg);
    CHECK(lim > 0.0);
    CHECK_NOTHROW(step(g, m, lim, cfg));
    CHECK_THROWS_AS(step(g, m, 2.0 * lim, cfg), NumericalError);
}

TEST_CASE("comoving grid matches the fixed grid on a decaying b0") {
    CoefficientModel m = CoefficientModel::constant({1.0, 0.0, 0.5, 0.0, 0.1});
    m.gamma_low = m.gamma_high = 0.5;
    SolverConfig fixed = small(801, 20.0);
    SolverConfig moving = fixed;
    moving.comoving = true;
    const PdfGrid a = evolve(gaussian_initial_condition(1.0, 0.0, fixed), m, 2.0, {}, fixed).back();
    const PdfGrid b = evolve(gaussian_initial_condition(1.0, 0.0, moving), m, 2.0, {}, moving).back();
    CHECK(b.scale == doctest::Approx(std::exp2(-0.5)).epsilon(1e-12));
    CHECK(b.variance() == doctest::Approx(a.variance()).epsilon(2e-3));
    CHECK(b.excess_kurtosis() == doctest::Approx(a.excess_kurtosis()).epsilon(2e-2));
}

TEST_CASE("snapshot csv round trip") {
    const SolverConfig cfg = small();
    const PdfGrid g = gaussian_initial_condition(1.0, 0.25, cfg);
    const auto path = std::filesystem::temp_directory_path() / "kmfpe_test_snapshot.csv";
    write_snapshot_csv(path, g);
    const PdfGrid back = read_snapshot_csv(path, 3.0);
    CHECK(back.tau == 3.0);
    REQUIRE(back.size() == g.size());
    for (int i = 0; i < g.size(); ++i) {
        CHECK(back.x(i) == doctest::Approx(g.x(i)).epsilon(1e-15));
        CHECK(back.physical_density(i) == g.physical_density(i));
    }
    std::filesystem::remove(path);
}
