#include "kmfpe/km.hpp"

#include "kmfpe/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kmfpe {

namespace {

double factorial(int k) {
    double f = 1.0;
    for (int i = 2; i <= k; ++i) f *= i;
    return f;
}

struct Selected {
    std::vector<double> x, y, w;
    bool unit_weights = false;
};

// Points inside the range with enough pairs. If any standard error is zero
// (deterministic rows) every point gets unit weight.
Selected select(const KmCurve& c, FitRange range, std::uint64_t min_count) {
    Selected s;
    std::vector<double> se;
    for (std::size_t i = 0; i < c.values.size(); ++i) {
        if (c.n_eff[i] < min_count || !range.contains(c.x_centers[i])) continue;
        s.x.push_back(c.x_centers[i]);
        s.y.push_back(c.values[i]);
        se.push_back(c.std_errors[i]);
    }
    s.unit_weights = std::any_of(se.begin(), se.end(), [](double v) { return !(v > 0.0); });
    for (double v : se) s.w.push_back(s.unit_weights ? 1.0 : 1.0 / (v * v));
    return s;
}

// Unit weights carry no absolute scale: rescale the covariance by chi2/dof.
void rescale(PolyFit& f, bool unit_weights) {
    if (!unit_weights || f.dof <= 0) return;
    const double s = f.chi2 / f.dof;
    for (double& v : f.covariance) v *= s;
}

} // namespace

KmCurve conditional_moment(const ConditionalDensity& cd, int k, const KmOptions& opts, double inflation) {
    if (k != 1 && k != 2 && k != 4) throw PreconditionError("conditional_moment: order must be 1, 2 or 4");
    if (!(inflation >= 1.0)) throw PreconditionError("conditional_moment: inflation must be >= 1");
    const double scale = 1.0 / (cd.dtau() * factorial(k));
    KmCurve c;
    c.order = k;
    c.tau = 0.5 * (cd.tau1() + cd.tau2());
    c.dtau = cd.dtau();
    const auto c1 = cd.x1_centers();
    const auto c2 = cd.x2_centers();
    for (int i = 0; i < cd.n1(); ++i) {
        double n = 0.0, m = 0.0, m2 = 0.0, x = c1[static_cast<std::size_t>(i)];
        if (opts.source == MomentSource::RowSums) {
            const RowMoments& r = cd.row_moments(i);
            if (r.n < opts.min_count) continue;
            n = static_cast<double>(r.n);
            m = r.sum_pow[static_cast<std::size_t>(k - 1)] / n;
            m2 = r.sum_pow[static_cast<std::size_t>(2 * k - 1)] / n;
            x = r.sum_x1 / n;
        } else {
            const std::uint64_t t = cd.row_total(i);
            if (t < opts.min_count) continue;
            n = static_cast<double>(t);
            for (int j = 0; j < cd.n2(); ++j) {
                const auto cnt = cd.count(i, j);
                if (cnt == 0) continue;
                const double p = static_cast<double>(cnt) / n;
                const double yk = std::pow(c2[static_cast<std::size_t>(j)] - x, k);
                m += p * yk;
                m2 += p * yk * yk;
            }
        }
        const double var = std::max(0.0, m2 - m * m);
        const double neff = n / inflation;
        if (neff < static_cast<double>(opts.min_count)) continue;
        c.x_centers.push_back(x);
        c.bin_centers.push_back(c1[static_cast<std::size_t>(i)]);
        c.values.push_back(m * scale);
        c.std_errors.push_back(std::sqrt(var / neff) * scale);
        c.n_eff.push_back(static_cast<std::uint64_t>(neff));
    }
    return c;
}

double serial_inflation(std::span<const double> x1, std::span<const double> x2, const ConditionalDensity& cd,
                        int k) {
    if (x1.size() != x2.size()) throw PreconditionError("serial_inflation: column sizes differ");
    const auto& edges = cd.x1_edges();
    std::vector<double> mean(static_cast<std::size_t>(cd.n1()), 0.0);
    for (int i = 0; i < cd.n1(); ++i) {
        const RowMoments& r = cd.row_moments(i);
        if (r.n > 0) mean[static_cast<std::size_t>(i)] = r.sum_pow[static_cast<std::size_t>(k - 1)] / static_cast<double>(r.n);
    }
    std::vector<double> z;
    z.reserve(x1.size());
    for (std::size_t i = 0; i < x1.size(); ++i) {
        const int b = bin_index(edges, x1[i]);
        if (b < 0) continue;
        z.push_back(std::pow(x2[i] - x1[i], k) - mean[static_cast<std::size_t>(b)]);
    }
    const std::size_t n = z.size();
    if (n < 100) return 1.0;
    const auto len = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
    const std::size_t batches = n / len;
    double var = 0.0;
    for (std::size_t i = 0; i < batches * len; ++i) var += z[i] * z[i];
    var /= static_cast<double>(batches * len);
    if (!(var > 0.0)) return 1.0;
    double between = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
        double m = 0.0;
        for (std::size_t i = b * len; i < (b + 1) * len; ++i) m += z[i];
        m /= static_cast<double>(len);
        between += m * m;
    }
    between /= static_cast<double>(batches);
    return std::max(1.0, static_cast<double>(len) * between / var);
}

FitRange default_fit_range(const KmCurve& curve, std::uint64_t min_neff) {
    const auto& n = curve.n_eff;
    if (n.empty()) throw InsufficientDataError("default_fit_range: empty curve");
    const auto peak = static_cast<std::size_t>(std::max_element(n.begin(), n.end()) - n.begin());
    if (n[peak] < min_neff) throw InsufficientDataError("default_fit_range: no bin reaches the occupancy threshold");
    std::size_t lo = peak, hi = peak;
    while (lo > 0 && n[lo - 1] >= min_neff) --lo;
    while (hi + 1 < n.size() && n[hi + 1] >= min_neff) ++hi;
    return {curve.x_centers[lo], curve.x_centers[hi]};
}

double DriftFit::a1_se() const { return std::sqrt(std::max(0.0, covariance[0])); }
double DriftFit::a0_se() const { return std::sqrt(std::max(0.0, covariance[3])); }

DriftFit fit_drift(const KmCurve& curve, FitRange range, std::uint64_t min_count) {
    if (curve.order != 1) throw PreconditionError("fit_drift: curve must be first order");
    const Selected s = select(curve, range, min_count);
    if (s.x.size() < 5) throw InsufficientDataError("fit_drift: fewer than 5 admissible points in range");
    PolyFit f = weighted_polyfit(s.x, s.y, s.w, 1);
    rescale(f, s.unit_weights);
    DriftFit d;
    d.a1_tilde = -f.coeffs[1];
    d.a0_tilde = f.coeffs[0];
    // (a1, a0) = (-c1, c0)
    d.covariance = {f.covariance[3], -f.covariance[2], -f.covariance[1], f.covariance[0]};
    d.fit_range = range;
    d.chi2_per_dof = f.chi2_per_dof();
    d.n_points = static_cast<int>(s.x.size());
    return d;
}

double DiffusionFit::se(int k) const {
    return std::sqrt(std::max(0.0, covariance[static_cast<std::size_t>(4 * k)]));
}

DiffusionFit fit_diffusion(const KmCurve& curve, FitRange range, std::uint64_t min_count) {
    if (curve.order != 2) throw PreconditionError("fit_diffusion: curve must be second order");
    const Selected s = select(curve, range, min_count);
    if (s.x.size() < 6) throw InsufficientDataError("fit_diffusion: fewer than 6 admissible points in range");
    PolyFit f = weighted_polyfit(s.x, s.y, s.w, 2);
    rescale(f, s.unit_weights);
    DiffusionFit d;
    d.b0_tilde = f.coeffs[0];
    d.b1_tilde = f.coeffs[1];
    d.b2_tilde = f.coeffs[2];
    // reorder (c0, c1, c2) -> (b2, b1, b0)
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            d.covariance[static_cast<std::size_t>(3 * r + c)] = f.covariance[static_cast<std::size_t>(3 * (2 - r) + (2 - c))];
    d.fit_range = range;
    d.chi2_per_dof = f.chi2_per_dof();
    d.n_points = static_cast<int>(s.x.size());
    if (!(d.b0_tilde > 0.0)) {
        d.valid = false;
        d.invalid_reason = "b0 <= 0: diffusion must be positive at the origin";
    } else {
        const double lo = *std::min_element(s.x.begin(), s.x.end());
        const double hi = *std::max_element(s.x.begin(), s.x.end());
        double vmin = std::min(f.eval(lo), f.eval(hi));
        if (d.b2_tilde > 0.0) {
            const double xv = -d.b1_tilde / (2.0 * d.b2_tilde);
            if (xv > lo && xv < hi) vmin = std::min(vmin, f.eval(xv));
        }
        if (vmin < 0.0) {
            d.valid = false;
            d.invalid_reason = "fitted diffusion negative inside the fit range";
        }
    }
    return d;
}

double QuarticFit::eval(double x) const {
    double acc = 0.0;
    for (std::size_t k = coeffs.size(); k-- > 0;) acc = acc * x + coeffs[k];
    return acc;
}

QuarticFit fit_quartic(const KmCurve& curve, FitRange range, std::uint64_t min_count) {
    if (curve.order != 4) throw PreconditionError("fit_quartic: curve must be fourth order");
    const Selected s = select(curve, range, min_count);
    if (s.x.size() < 7) throw InsufficientDataError("fit_quartic: fewer than 7 admissible points in range");
    PolyFit f = weighted_polyfit(s.x, s.y, s.w, 4);
    rescale(f, s.unit_weights);
    QuarticFit q;
    for (std::size_t k = 0; k < 5; ++k) {
        q.coeffs[k] = f.coeffs[k];
        q.std_errors[k] = f.stderr_of(k);
    }
    q.fit_range = range;
    q.chi2_per_dof = f.chi2_per_dof();
    q.n_points = static_cast<int>(s.x.size());
    return q;
}

namespace {

struct SortedSeries {
    std::vector<double> x, y, w;
    bool unit = false;
    std::size_t distinct = 0;
};

SortedSeries sorted_series(std::span<const double> dtau, std::span<const double> value,
                           std::span<const double> se) {
    const std::size_t n = dtau.size();
    if (value.size() != n || (!se.empty() && se.size() != n))
        throw PreconditionError("extrapolate: mismatched inputs");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dtau[a] < dtau[b] || (dtau[a] == dtau[b] && value[a] < value[b]);
    });
    SortedSeries s;
    s.unit = se.empty();
    for (std::size_t i : order) {
        s.x.push_back(dtau[i]);
        s.y.push_back(value[i]);
        if (!se.empty() && !(se[i] > 0.0)) s.unit = true;
    }
    for (std::size_t i : order) s.w.push_back(s.unit ? 1.0 : 1.0 / (se[i] * se[i]));
    std::vector<double> d = s.x;
    d.erase(std::unique(d.begin(), d.end()), d.end());
    s.distinct = d.size();
    return s;
}

} // namespace

Extrapolation extrapolate_linear(std::span<const double> dtau, std::span<const double> value,
                                 std::span<const double> se) {
    const SortedSeries s = sorted_series(dtau, value, se);
    if (s.distinct < 3) throw FitError("extrapolate_dtau: need at least 3 distinct dtau values");
    PolyFit lin = weighted_polyfit(s.x, s.y, s.w, 1);
    rescale(lin, s.unit);
    Extrapolation e;
    e.limit = lin.coeffs[0];
    e.slope = lin.coeffs[1];
    e.limit_se = lin.stderr_of(0);
    e.slope_se = lin.stderr_of(1);
    e.chi2_per_dof = lin.chi2_per_dof();
    e.n_points = static_cast<int>(s.x.size());
    if (!s.unit && e.chi2_per_dof > 3.0 && s.distinct >= 4) {
        PolyFit quad = weighted_polyfit(s.x, s.y, s.w, 2);
        e.quadratic_reported = true;
        e.quadratic_limit = quad.coeffs[0];
        e.quadratic_limit_se = quad.stderr_of(0);
    }
    return e;
}

Extrapolation extrapolate_polynomial(std::span<const double> dtau, std::span<const double> value,
                                     std::span<const double> se, int degree) {
    if (degree == 1) return extrapolate_linear(dtau, value, se);
    const SortedSeries s = sorted_series(dtau, value, se);
    if (degree < 1 || s.distinct < static_cast<std::size_t>(degree) + 2)
        throw FitError("extrapolate: degree " + std::to_string(degree) + " needs " + std::to_string(degree + 2) +
                       " distinct dtau values");
    PolyFit f = weighted_polyfit(s.x, s.y, s.w, degree);
    rescale(f, s.unit);
    Extrapolation e;
    e.limit = f.coeffs[0];
    e.slope = f.coeffs[1];
    e.limit_se = f.stderr_of(0);
    e.slope_se = f.stderr_of(1);
    e.chi2_per_dof = f.chi2_per_dof();
    e.n_points = static_cast<int>(s.x.size());
    return e;
}

KmLimit extrapolate_dtau(std::span<const DtauFits> fits, double tau) {
    std::vector<double> dt;
    std::array<std::vector<double>, 5> val, se;
    for (const auto& f : fits) {
        dt.push_back(f.dtau);
        const double v[5] = {f.drift.a1_tilde, f.drift.a0_tilde, f.diffusion.b2_tilde,
                             f.diffusion.b1_tilde, f.diffusion.b0_tilde};
        const double s[5] = {f.drift.a1_se(), f.drift.a0_se(), f.diffusion.se(0), f.diffusion.se(1),
                             f.diffusion.se(2)};
        for (std::size_t k = 0; k < 5; ++k) {
            val[k].push_back(v[k]);
            se[k].push_back(s[k]);
        }
    }
    KmLimit lim;
    lim.tau = tau;
    for (std::size_t k = 0; k < 5; ++k) lim.diagnostics[k] = extrapolate_linear(dt, val[k], se[k]);
    lim.a1 = lim.diagnostics[0].limit;
    lim.a0 = lim.diagnostics[1].limit;
    lim.b2 = lim.diagnostics[2].limit;
    lim.b1 = lim.diagnostics[3].limit;
    lim.b0 = lim.diagnostics[4].limit;
    lim.n_dtau = static_cast<int>(fits.size());
    if (!(lim.b0 > 0.0)) {
        lim.valid = false;
        lim.note = "extrapolated b0 <= 0";
    }
    return lim;
}

PawulaReport pawula_check(std::span<const DtauQuartic> fits4, const KmLimit& limit, FitRange range,
                          const PawulaOptions& opts) {
    const double ratio_limit = opts.ratio_limit, n_se = opts.n_se;
    PawulaReport rep;
    rep.ratio_limit = ratio_limit;
    rep.n_se = n_se;
    rep.range = range;
    std::vector<double> dt;
    std::array<std::vector<double>, 5> val, se;
    for (const auto& f : fits4) {
        dt.push_back(f.dtau);
        for (std::size_t k = 0; k < 5; ++k) {
            val[k].push_back(f.fit.coeffs[k]);
            se[k].push_back(f.fit.std_errors[k]);
        }
    }
    std::vector<double> distinct = dt;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    rep.dtau_degree = distinct.size() >= static_cast<std::size_t>(opts.dtau_degree) + 2 ? opts.dtau_degree : 1;
    rep.coeffs_within_bound = true;
    for (std::size_t k = 0; k < 5; ++k) {
        rep.coeffs[k] = extrapolate_polynomial(dt, val[k], se[k], rep.dtau_degree);
        if (!(std::abs(rep.coeffs[k].limit) <= n_se * rep.coeffs[k].limit_se)) rep.coeffs_within_bound = false;
    }
    constexpr int kSamples = 201;
    for (int i = 0; i < kSamples; ++i) {
        const double x = range.lo + (range.hi - range.lo) * i / (kSamples - 1);
        double d4 = 0.0;
        for (std::size_t k = 5; k-- > 0;) d4 = d4 * x + rep.coeffs[k].limit;
        const double d2 = limit.b0 + x * (limit.b1 + limit.b2 * x);
        rep.max_abs_d4 = std::max(rep.max_abs_d4, std::abs(d4));
        rep.max_abs_d2 = std::max(rep.max_abs_d2, std::abs(d2));
    }
    rep.ratio = rep.max_abs_d2 > 0.0 ? rep.max_abs_d4 / rep.max_abs_d2 : INFINITY;
    rep.passed = rep.coeffs_within_bound && rep.ratio < ratio_limit;
    return rep;
}

} // namespace kmfpe
