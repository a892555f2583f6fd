#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kmfpe/density.hpp"
#include "kmfpe/error.hpp"

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

using namespace kmfpe;

namespace {

std::vector<double> gaussian(std::size_t n, std::uint64_t seed, double sd = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, sd);
    std::vector<double> v(n);
    for (double& x : v) x = g(rng);
    return v;
}

std::vector<double> ar1(std::size_t n, double phi, std::uint64_t seed) {
    const auto e = gaussian(n, seed);
    std::vector<double> x(n);
    x[0] = e[0];
    for (std::size_t i = 1; i < n; ++i) x[i] = phi * x[i - 1] + std::sqrt(1.0 - phi * phi) * e[i];
    return x;
}

ConditionalDensity four_by_four() { return ConditionalDensity({0, 1, 2, 3, 4}, {0, 1, 2, 3, 4}, 0.0, 1.0); }

} // namespace

TEST_CASE("symmetric edges reflect exactly") {
    const auto e = symmetric_edges(41, 8.0);
    REQUIRE(e.size() == 42);
    for (std::size_t i = 0; i < e.size(); ++i) CHECK(e[i] == -e[e.size() - 1 - i]);
    CHECK(bin_index(e, -8.0) == 0);
    CHECK(bin_index(e, 8.0) == -1);
    CHECK(bin_index(e, 0.0) == 20);
    for (double x : {0.1, 1.3, 2.71, 7.9}) CHECK(bin_index(e, -x) == 40 - bin_index(e, x));
}

TEST_CASE("histogram total and density normalization") {
    const auto v = gaussian(20000, 1);
    const Histogram1D h = histogram_1d(v, Binning{});
    CHECK(h.total == std::accumulate(h.counts.begin(), h.counts.end(), std::uint64_t{0}));
    CHECK(h.total == v.size());  // +-8 sd holds everything here
    const auto d = h.density();
    double integral = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) integral += d[i] * (h.edges[i + 1] - h.edges[i]);
    CHECK(integral == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("identical pairs stay on the diagonal") {
    const auto x = gaussian(20000, 2);
    const std::vector<double> e = symmetric_edges(41, 5.0);
    const ConditionalDensity cd = joint_histogram(x, x, e, e, 0.0, 1.0, 1);
    std::uint64_t off = 0;
    for (int i = 0; i < cd.n1(); ++i)
        for (int j = 0; j < cd.n2(); ++j)
            if (i != j) off += cd.count(i, j);
    CHECK(off == 0);
    CHECK(cd.total() == x.size());
}

TEST_CASE("independent pairs pass the G-test") {
    const auto a = gaussian(1000000, 3), b = gaussian(1000000, 4);
    const ConditionalDensity cd = joint_histogram(a, b, 0.0, 1.0, Binning{});
    const GTestResult g = g_test_independence(cd);
    CHECK(g.dof > 100);
    CHECK(g.p_value > 0.01);

    // and a coupled pair fails it
    std::vector<double> c(b.size());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.1 * a[i] + b[i];
    CHECK(g_test_independence(joint_histogram(a, c, 0.0, 1.0, Binning{})).p_value < 1e-6);
}

TEST_CASE("too few pairs is insufficient data") {
    const auto a = gaussian(10, 5);
    CHECK_THROWS_AS(joint_histogram(a, a, 0.0, 1.0, Binning{}), InsufficientDataError);
}

TEST_CASE("uniform joint gives uniform conditionals") {
    ConditionalDensity cd = four_by_four();
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) cd.add(i + 0.5, j + 0.5);
    const ConditionalKernel k = conditional_from_joint(cd);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) CHECK(k(i, j) == 0.25);
}

TEST_CASE("row {2,2,0,0} conditions to {0.5,0.5,0,0}; empty rows are flagged") {
    ConditionalDensity cd = four_by_four();
    cd.add(0.5, 0.5);
    cd.add(0.5, 0.5);
    cd.add(0.5, 1.5);
    cd.add(0.5, 1.5);
    const ConditionalKernel k = conditional_from_joint(cd);
    CHECK(k(0, 0) == 0.5);
    CHECK(k(0, 1) == 0.5);
    CHECK(k(0, 2) == 0.0);
    CHECK(k(0, 3) == 0.0);
    CHECK_FALSE(k.empty[0]);
    for (int i = 1; i < 4; ++i) {
        CHECK(k.empty[static_cast<std::size_t>(i)]);
        for (int j = 0; j < 4; ++j) CHECK(k(i, j) == 0.0);
    }
}

TEST_CASE("conditionals recover a known Markov kernel") {
    const double T[3][3] = {{0.7, 0.2, 0.1}, {0.3, 0.4, 0.3}, {0.05, 0.15, 0.8}};
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t n = 300000;
    std::vector<double> a(n), b(n);
    int s = 0;
    for (std::size_t t = 0; t < n; ++t) {
        const double r = u(rng);
        const int next = r < T[s][0] ? 0 : (r < T[s][0] + T[s][1] ? 1 : 2);
        a[t] = s + 0.5;
        b[t] = next + 0.5;
        s = next;
    }
    const ConditionalDensity cd = joint_histogram(a, b, {0, 1, 2, 3}, {0, 1, 2, 3}, 0.0, 1.0, 1);
    const ConditionalKernel k = conditional_from_joint(cd);
    for (int i = 0; i < 3; ++i) {
        const auto m = static_cast<double>(k.row_counts[static_cast<std::size_t>(i)]);
        for (int j = 0; j < 3; ++j) {
            const double se = std::sqrt(T[i][j] * (1.0 - T[i][j]) / m);
            CHECK(std::abs(k(i, j) - T[i][j]) < 4.0 * se);
        }
    }
}

TEST_CASE("every conditional row sums to one or is empty") {
    const auto a = gaussian(50000, 7), b = gaussian(50000, 8, 2.0);
    const ConditionalDensity cd = joint_histogram(a, b, 0.0, 1.0, Binning{});
    const ConditionalKernel k = conditional_from_joint(cd);
    std::uint64_t admitted = 0;
    for (int i = 0; i < k.n1; ++i) {
        admitted += k.row_counts[static_cast<std::size_t>(i)];
        if (k.empty[static_cast<std::size_t>(i)]) continue;
        double s = 0.0;
        for (int j = 0; j < k.n2; ++j) s += k(i, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(admitted == cd.total());
}

TEST_CASE("sharded accumulation merges to the same table") {
    const auto a = gaussian(30000, 9), b = gaussian(30000, 10);
    const auto e = symmetric_edges(21, 4.0);
    const ConditionalDensity whole = joint_histogram(a, b, e, e, 0.0, 1.0, 1);
    auto shard = [&](std::size_t lo, std::size_t hi) {
        return joint_histogram(std::span(a).subspan(lo, hi - lo), std::span(b).subspan(lo, hi - lo), e, e, 0.0,
                               1.0, 1);
    };
    ConditionalDensity left = shard(0, 10000), mid = shard(10000, 20000), right = shard(20000, 30000);
    ConditionalDensity ab = left;
    ab.merge(mid);
    ab.merge(right);
    ConditionalDensity ba = right;
    ba.merge(left);
    ba.merge(mid);
    CHECK(ab.raw_counts() == whole.raw_counts());
    CHECK(ba.raw_counts() == whole.raw_counts());
    for (int i = 0; i < whole.n1(); ++i) {
        CHECK(ab.row_moments(i).n == whole.row_moments(i).n);
        CHECK(ba.row_moments(i).sum_pow[1] == doctest::Approx(whole.row_moments(i).sum_pow[1]).epsilon(1e-12));
    }
}

TEST_CASE("return series are paired by start time") {
    ReturnSeries coarse, fine;
    coarse.lag_dt = 240;
    fine.lag_dt = 120;
    for (int i = 0; i < 30000; ++i) {
        coarse.start_times.push_back(i * 60);
        coarse.returns.push_back(std::sin(i * 0.37));
    }
    for (int i = 0; i < 30000; i += 2) {
        fine.start_times.push_back(i * 60);
        fine.returns.push_back(std::cos(i * 0.37));
    }
    ScaleMap m;
    m.dt0 = 240;
    const ConditionalDensity cd = joint_histogram(coarse, fine, m, Binning{});
    CHECK(cd.total() == 15000);
    CHECK(cd.tau1() == 0.0);
    CHECK(cd.tau2() == 1.0);
}

TEST_CASE("serial inflation: white noise ~1, AR(1) ~ (1+phi)/(1-phi)") {
    CHECK(serial_inflation(gaussian(400000, 11)) < 1.2);
    CHECK(serial_inflation(ar1(400000, 0.9, 12)) == doctest::Approx(19.0).epsilon(0.2));
    CHECK(serial_inflation(std::vector<double>(50, 1.0)) == 1.0);
}

TEST_CASE("CK test: degenerate scales are a precondition error") {
    const auto x = gaussian(20000, 13);
    CHECK_THROWS_AS(chapman_kolmogorov_test(x, x, x, 0.0, 0.0, 1.0), PreconditionError);
    CHECK_THROWS_AS(chapman_kolmogorov_test(x, x, x, 0.0, 1.0, 1.0), PreconditionError);
}

TEST_CASE("CK test passes on a Markov chain and fails with lag-2 memory") {
    const auto x = ar1(600002, 0.8, 14);
    const std::span<const double> s(x);
    const std::size_t n = x.size() - 2;
    const CkTestReport markov = chapman_kolmogorov_test(s.first(n), s.subspan(1, n), s.subspan(2, n), 0, 1, 2);
    CHECK(markov.passed);
    CHECK(markov.distance >= 0.0);
    CHECK(markov.stride > 1);

    std::mt19937_64 rng(15);
    std::normal_distribution<double> g;
    std::vector<double> y(600002);
    y[0] = g(rng);
    y[1] = g(rng);
    for (std::size_t t = 2; t < y.size(); ++t) y[t] = 0.9 * y[t - 2] + std::sqrt(1.0 - 0.81) * g(rng);
    const std::span<const double> w(y);
    const CkTestReport memory = chapman_kolmogorov_test(w.first(n), w.subspan(1, n), w.subspan(2, n), 0, 1, 2);
    CHECK_FALSE(memory.passed);
    CHECK(memory.passed == (memory.distance <= memory.threshold));
}

TEST_CASE("CK distance is invariant under rescaling all axes") {
    const auto x = ar1(200002, 0.7, 16);
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = 4.0 * x[i];
    const std::size_t n = x.size() - 2;
    const std::span<const double> a(x), b(y);
    CkOptions fixed;
    fixed.threshold = CkOptions::Threshold::Fixed;
    const auto r1 = chapman_kolmogorov_test(a.first(n), a.subspan(1, n), a.subspan(2, n), 0, 1, 2, fixed);
    const auto r2 = chapman_kolmogorov_test(b.first(n), b.subspan(1, n), b.subspan(2, n), 0, 1, 2, fixed);
    CHECK(r1.distance == r2.distance);
    CHECK(r1.threshold == 0.05);
}

TEST_CASE("histogram csv round trip") {
    Histogram1D h = histogram_1d(gaussian(5000, 17), Binning{});
    const auto p = std::filesystem::temp_directory_path() / "kmfpe_test_hist.csv";
    write_histogram_csv(p, h);
    const Histogram1D back = read_histogram_csv(p);
    CHECK(back.edges == h.edges);
    CHECK(back.counts == h.counts);
    CHECK(back.total == h.total);
    std::filesystem::remove(p);
}
