#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kmfpe/error.hpp"
#include "kmfpe/langevin.hpp"
#include "kmfpe/qgaussian.hpp"
#include "kmfpe/series.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

using namespace kmfpe;

namespace {

double variance_of(const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / (n - 1.0);
}

std::vector<double> terminal(const Ensemble& e) {
    std::vector<double> out(e.n_paths);
    for (std::size_t p = 0; p < e.n_paths; ++p) out[p] = e.at(p, e.n_records - 1);
    return out;
}

} // namespace

TEST_CASE("no noise: the Euler recurrence of the drift") {
    SimSpec s;
    s.constants = {0.5, 0.1, 0.0, 0.0, 0.0};
    s.initial.x0 = 2.0;
    s.n_steps = 200;
    s.dtau_sim = 0.01;
    const Ensemble e = simulate(s);
    REQUIRE(e.n_records == 201);
    CHECK(e.at(0, 0) == 2.0);
    double x = 2.0;
    for (int i = 0; i < 200; ++i) x += (-0.5 * x + 0.1) * 0.01;
    CHECK(e.at(0, 200) == doctest::Approx(x).epsilon(1e-13));
    // and close to the continuous solution
    CHECK(e.at(0, 200) == doctest::Approx(0.2 + 1.8 * std::exp(-1.0)).epsilon(2e-3));
}

TEST_CASE("OU ensemble reaches the discrete stationary variance") {
    SimSpec s;
    s.constants = {1.0, 0.0, 0.5, 0.0, 0.0};
    s.n_paths = 4000;
    s.n_steps = 1000;
    s.record_every = 1000;
    const Ensemble e = simulate(s);
    CHECK(e.n_records == 2);
    CHECK(e.dtau_record == doctest::Approx(10.0));
    // Euler-Maruyama OU: b0 / (a1 (1 - a1 dt / 2))
    const double v = 0.5 / (1.0 - 0.005);
    const double se = v * std::sqrt(2.0 / 4000.0);
    CHECK(std::abs(variance_of(terminal(e)) - v) < 4.0 * se);
    CHECK(e.barrier_hits == 0);
}

TEST_CASE("multiplicative noise gives power-law tails near mu = 1 + a1 / b2") {
    SimSpec s;
    s.constants = {1.0, 0.0, 0.5, 0.0, 0.2};
    s.n_steps = 2000000;
    s.record_every = 2;
    s.seed = 41;
    const Ensemble e = simulate(s);
    std::vector<double> edges;
    for (int i = 0; i <= 120; ++i) edges.push_back(-6.0 + 0.1 * i);
    FitMuOptions opts;
    opts.n_bootstrap = 0;
    const QGaussianFit f = fit_mu(histogram_1d(e.states, edges), opts);
    CHECK(f.mu == doctest::Approx(6.0).epsilon(0.15));
}

TEST_CASE("same seed, same paths; parallel equals serial") {
    SimSpec s;
    s.n_paths = 7;
    s.n_steps = 300;
    s.initial = {InitialKind::Gaussian, 0.0, 0.3};
    const Ensemble a = simulate(s);
    const Ensemble b = simulate(s);
    CHECK(a.states == b.states);
    s.parallel = false;
    CHECK(simulate(s).states == a.states);
    s.seed = 2;
    CHECK(simulate(s).states != a.states);
}

TEST_CASE("invalid specs") {
    SimSpec s;
    s.dtau_sim = 0.0;
    CHECK_THROWS_AS(simulate(s), ConfigError);
    s = {};
    s.record_every = 0;
    CHECK_THROWS_AS(simulate(s), ConfigError);
    s = {};
    s.initial = {InitialKind::Gaussian, 0.0, 0.0};
    CHECK_THROWS_AS(simulate(s), ConfigError);
}

TEST_CASE("tight barrier reflects and counts") {
    SimSpec s;
    s.constants = {1.0, 0.0, 0.5, 0.0, 0.0};
    s.n_steps = 5000;
    s.barrier_sigmas = 0.5;
    const Ensemble e = simulate(s);
    CHECK(e.barrier_hits > 0);
    const double bound = 0.5 * std::sqrt(0.5);
    for (double x : e.states) CHECK(std::abs(x) <= bound);
}

TEST_CASE("sample_qgaussian matches the Student t distribution") {
    const std::size_t n = 200000;
    const auto x = sample_qgaussian(3.0, 2.0, 0.5, n, 8);
    std::vector<double> z(x);
    const double scale = std::sqrt(2.0 / (0.5 * 3.0));
    for (double& v : z) v /= scale;
    std::sort(z.begin(), z.end());
    const boost::math::students_t_distribution<double> t(3.0);
    double ks = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double c = boost::math::cdf(t, z[i]);
        ks = std::max({ks, std::abs(c - static_cast<double>(i) / n), std::abs(c - static_cast<double>(i + 1) / n)});
    }
    // 0.1% critical value
    CHECK(ks < 1.95 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("sample_qgaussian moments and edge cases") {
    // Var = b0 / (b2 (mu - 2))
    const auto x = sample_qgaussian(6.0, 1.0, 1.0, 400000, 3);
    CHECK(variance_of(x) == doctest::Approx(0.25).epsilon(0.02));
    const auto g = sample_qgaussian(5.0, 0.7, 0.0, 400000, 3);
    CHECK(variance_of(g) == doctest::Approx(0.7).epsilon(0.01));
    CHECK(sample_qgaussian(3.0, 1.0, 1.0, 0, 1).empty());
    CHECK_THROWS_AS(sample_qgaussian(0.0, 1.0, 1.0, 10, 1), DomainError);
    CHECK_THROWS_AS(sample_qgaussian(3.0, 0.0, 1.0, 10, 1), DomainError);
    CHECK(sample_qgaussian(3.0, 1.0, 1.0, 100, 5) == sample_qgaussian(3.0, 1.0, 1.0, 100, 5));
}

TEST_CASE("ensemble csv separates paths by a gap") {
    SimSpec s;
    s.n_paths = 2;
    s.n_steps = 9;
    const Ensemble e = simulate(s);
    const auto path = std::filesystem::temp_directory_path() / "kmfpe_test_ensemble.csv";
    write_ensemble_csv(path, e, EnsembleValue::ExpState);
    const PriceSeries ps = read_price_csv(path);
    REQUIRE(ps.values().size() == 20);
    CHECK(ps.timestamps()[10] == 20);
    CHECK(ps.values()[3] == doctest::Approx(std::exp(e.at(0, 3))).epsilon(1e-15));
    // one-step returns never straddle the two paths
    CHECK(compute_log_returns(ps, 1).returns.size() == 18);
    std::filesystem::remove(path);
}
