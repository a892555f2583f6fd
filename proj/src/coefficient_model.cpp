#include "kmfpe/coefficient_model.hpp"

#include "kmfpe/error.hpp"
#include "kmfpe/wls.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kmfpe {

CoefficientModel CoefficientModel::constant(const Coefficients& c) {
    if (!(c.b0 > 0.0)) throw DomainError("CoefficientModel::constant: b0 must be > 0");
    if (c.b2 < 0.0) throw DomainError("CoefficientModel::constant: b2 must be >= 0");
    CoefficientModel m;
    m.a1_values = {c.a1};
    m.a0_low = c.a0;
    m.b1_low = c.b1;
    m.asym_threshold_tau = std::numeric_limits<double>::infinity();
    m.b2_low = m.b2_high = c.b2;
    m.b0_amplitude = c.b0;
    m.gamma_low = m.gamma_high = 0.0;
    return m;
}

namespace {

double clamp_tau(const CoefficientModel& m, double tau) {
    if (m.extrapolation == ExtrapolationPolicy::HoldLast) return std::clamp(tau, m.valid_lo, m.valid_hi);
    return tau;
}

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

} // namespace

double a1_at(const CoefficientModel& m, double tau) {
    tau = clamp_tau(m, tau);
    const auto it = std::upper_bound(m.a1_breaks.begin(), m.a1_breaks.end(), tau);
    return m.a1_values[static_cast<std::size_t>(it - m.a1_breaks.begin())];
}

double b2_at(const CoefficientModel& m, double tau) {
    tau = clamp_tau(m, tau);
    if (m.b2_high == m.b2_low) return m.b2_low;
    return m.b2_low + (m.b2_high - m.b2_low) * logistic((tau - m.b2_mid) / m.b2_width);
}

double log2_b0(const CoefficientModel& m, double tau) {
    tau = clamp_tau(m, tau);
    const double base = std::log2(m.b0_amplitude);
    if (tau <= m.gamma_crossover_tau) return base - m.gamma_low * tau;
    return base - m.gamma_low * m.gamma_crossover_tau - m.gamma_high * (tau - m.gamma_crossover_tau);
}

double gamma_at(const CoefficientModel& m, double tau) {
    if (m.extrapolation == ExtrapolationPolicy::HoldLast && (tau < m.valid_lo || tau >= m.valid_hi)) return 0.0;
    return tau < m.gamma_crossover_tau ? m.gamma_low : m.gamma_high;
}

double decay_rate_B(const CoefficientModel& m, double tau) { return gamma_at(m, tau) * std::log(2.0); }

Coefficients eval(const CoefficientModel& m, double tau) {
    Coefficients c;
    c.a1 = a1_at(m, tau);
    const double t = clamp_tau(m, tau);
    const bool asym = t <= m.asym_threshold_tau;
    c.a0 = asym ? m.a0_low : 0.0;
    c.b1 = asym ? m.b1_low : 0.0;
    c.b2 = b2_at(m, tau);
    c.b0 = std::exp2(log2_b0(m, tau));
    c.extrapolated = tau < m.valid_lo || tau > m.valid_hi;
    return c;
}

namespace {

struct HingeFit {
    double intercept = 0.0, g_low = 0.0, g_high = 0.0, knot = 0.0, sse = INFINITY;
};

// y = c - g1 * t for t <= knot, continuous with slope -g2 after.
HingeFit hinge_with_knot(std::span<const double> t, std::span<const double> y, std::span<const double> w,
                         double knot) {
    const auto n = static_cast<Eigen::Index>(t.size());
    Eigen::MatrixXd a(n, 3);
    Eigen::VectorXd b(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto u = static_cast<std::size_t>(i);
        const double sw = std::sqrt(w[u]);
        a(i, 0) = sw;
        a(i, 1) = -sw * std::min(t[u], knot);
        a(i, 2) = -sw * std::max(0.0, t[u] - knot);
        b(i) = sw * y[u];
    }
    const Eigen::VectorXd beta = a.colPivHouseholderQr().solve(b);
    HingeFit h;
    h.intercept = beta(0);
    h.g_low = beta(1);
    h.g_high = beta(2);
    h.knot = knot;
    h.sse = (a * beta - b).squaredNorm();
    return h;
}

HingeFit fit_log2_b0(std::span<const double> t, std::span<const double> y, std::span<const double> w) {
    const std::size_t n = t.size();
    HingeFit best;
    {
        // single slope, knot past the data
        PolyFit f = weighted_polyfit(t, y, w, 1);
        best.intercept = f.coeffs[0];
        best.g_low = best.g_high = -f.coeffs[1];
        best.knot = t.back();
        best.sse = f.chi2;
    }
    if (n < 5) return best;
    // split after index k: two lines on [0..k] and [k+1..n-1], each >= 2 points
    for (std::size_t k = 1; k + 2 < n; ++k) {
        const std::span<const double> t1 = t.subspan(0, k + 1), y1 = y.subspan(0, k + 1), w1 = w.subspan(0, k + 1);
        const std::span<const double> t2 = t.subspan(k + 1), y2 = y.subspan(k + 1), w2 = w.subspan(k + 1);
        const PolyFit l1 = weighted_polyfit(t1, y1, w1, 1);
        const PolyFit l2 = weighted_polyfit(t2, y2, w2, 1);
        double knot = t[k];
        const double ds = l1.coeffs[1] - l2.coeffs[1];
        if (ds != 0.0) knot = (l2.coeffs[0] - l1.coeffs[0]) / ds;
        knot = std::clamp(knot, t[k], t[k + 1]);
        const HingeFit h = hinge_with_knot(t, y, w, knot);
        if (h.sse < best.sse * (1.0 - 1e-12)) best = h;
    }
    return best;
}

struct LogisticFit {
    double low = 0.0, high = 0.0, mid = 0.0, width = 1.0;
    bool ok = false;
};

double logistic_model(const LogisticFit& p, double t) {
    return p.low + (p.high - p.low) * logistic((t - p.mid) / p.width);
}

// Levenberg-Marquardt on (low, high, mid, log width).
LogisticFit fit_logistic(std::span<const double> t, std::span<const double> y, std::span<const double> w,
                         int max_iter) {
    const std::size_t n = t.size();
    LogisticFit p;
    p.low = *std::min_element(y.begin(), y.end());
    p.high = *std::max_element(y.begin(), y.end());
    const double half = 0.5 * (p.low + p.high);
    p.mid = t[n / 2];
    for (std::size_t i = 0; i + 1 < n; ++i)
        if ((y[i] - half) * (y[i + 1] - half) <= 0.0) {
            p.mid = 0.5 * (t[i] + t[i + 1]);
            break;
        }
    p.width = std::max(1e-3, (t.back() - t.front()) / 8.0);

    auto residuals = [&](const LogisticFit& q, Eigen::VectorXd& r) {
        for (std::size_t i = 0; i < n; ++i)
            r(static_cast<Eigen::Index>(i)) = std::sqrt(w[i]) * (logistic_model(q, t[i]) - y[i]);
    };
    Eigen::VectorXd r(static_cast<Eigen::Index>(n));
    residuals(p, r);
    double cost = r.squaredNorm();
    double lambda = 1e-3;
    double scale2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) scale2 += w[i] * y[i] * y[i];
    for (int it = 0; it < max_iter; ++it) {
        Eigen::MatrixXd jac(static_cast<Eigen::Index>(n), 4);
        for (std::size_t i = 0; i < n; ++i) {
            const double z = (t[i] - p.mid) / p.width;
            const double s = logistic(z);
            const double ds = s * (1.0 - s);
            const double sw = std::sqrt(w[i]);
            const auto r_i = static_cast<Eigen::Index>(i);
            jac(r_i, 0) = sw * (1.0 - s);
            jac(r_i, 1) = sw * s;
            jac(r_i, 2) = -sw * (p.high - p.low) * ds / p.width;
            jac(r_i, 3) = -sw * (p.high - p.low) * ds * z;  // d/d log(width)
        }
        const Eigen::MatrixXd jtj = jac.transpose() * jac;
        const Eigen::VectorXd g = jac.transpose() * r;
        bool improved = false;
        for (int inner = 0; inner < 30 && !improved; ++inner) {
            Eigen::MatrixXd aug = jtj;
            for (int k = 0; k < 4; ++k) aug(k, k) += lambda * (jtj(k, k) + 1e-30);
            const Eigen::VectorXd step = aug.ldlt().solve(-g);
            LogisticFit q = p;
            q.low += step(0);
            q.high += step(1);
            q.mid += step(2);
            q.width *= std::exp(std::clamp(step(3), -2.0, 2.0));
            Eigen::VectorXd rq(static_cast<Eigen::Index>(n));
            residuals(q, rq);
            const double cq = rq.squaredNorm();
            if (std::isfinite(cq) && cq <= cost) {
                const double rel = cost - cq;
                p = q;
                r = rq;
                cost = cq;
                lambda = std::max(1e-12, lambda * 0.3);
                improved = true;
                if (rel <= 1e-30 * std::max(1.0, scale2) || step.norm() < 1e-14) {
                    p.ok = true;
                    return p;
                }
            } else {
                lambda *= 10.0;
            }
        }
        if (!improved) break;
    }
    p.ok = std::isfinite(cost);
    return p;
}

double weighted_mean(std::span<const double> v, std::span<const double> se) {
    double sw = 0.0, s = 0.0;
    bool unit = std::any_of(se.begin(), se.end(), [](double e) { return !(e > 0.0); });
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double w = unit ? 1.0 : 1.0 / (se[i] * se[i]);
        sw += w;
        s += w * v[i];
    }
    return s / sw;
}

} // namespace

CoefficientModel constant_model(const KmLimit& limit) {
    Coefficients c{limit.a1, limit.a0, limit.b0, limit.b1, std::max(0.0, limit.b2), false};
    CoefficientModel m = CoefficientModel::constant(c);
    m.valid_lo = m.valid_hi = limit.tau;
    m.diagnostics["source"] = "single KmLimit";
    if (limit.b2 < 0.0) m.warnings.push_back("negative b2 limit clipped to 0");
    return m;
}

CoefficientModel fit_model(std::span<const KmLimit> limits_in, const ModelFitOptions& opts) {
    std::vector<KmLimit> limits(limits_in.begin(), limits_in.end());
    std::sort(limits.begin(), limits.end(), [](const KmLimit& a, const KmLimit& b) { return a.tau < b.tau; });
    const std::size_t n = limits.size();
    if (n < 4) throw FitError("fit_model: need at least 4 KmLimit records");
    if (limits.front().tau == limits.back().tau) throw FitError("fit_model: degenerate tau range");

    std::vector<double> t, a1, a1_se, a0, a0_se, b1, b1_se, b2, b2_se, lb0, lb0_w;
    for (const auto& l : limits) {
        if (!(l.b0 > 0.0)) throw FitError("fit_model: non-positive b0 at tau=" + std::to_string(l.tau));
        t.push_back(l.tau);
        a1.push_back(l.a1);
        a1_se.push_back(l.diagnostics[0].limit_se);
        a0.push_back(l.a0);
        a0_se.push_back(l.diagnostics[1].limit_se);
        b2.push_back(l.b2);
        b2_se.push_back(l.diagnostics[2].limit_se);
        b1.push_back(l.b1);
        b1_se.push_back(l.diagnostics[3].limit_se);
        lb0.push_back(std::log2(l.b0));
        const double se = l.diagnostics[4].limit_se / (l.b0 * std::log(2.0));
        lb0_w.push_back(se);
    }
    const bool unit_b0 = std::any_of(lb0_w.begin(), lb0_w.end(), [](double e) { return !(e > 0.0); });
    for (double& e : lb0_w) e = unit_b0 ? 1.0 : 1.0 / (e * e);

    CoefficientModel m;
    m.valid_lo = t.front();
    m.valid_hi = t.back();
    m.a1_values = {weighted_mean(a1, a1_se)};

    const HingeFit h = fit_log2_b0(t, lb0, lb0_w);
    m.b0_amplitude = std::exp2(h.intercept);
    m.gamma_low = h.g_low;
    m.gamma_high = h.g_high;
    m.gamma_crossover_tau = h.knot;
    if (std::abs(h.g_low) < 1e-12 && std::abs(h.g_high) < 1e-12)
        m.warnings.push_back("b0 is not decaying in tau (gamma = 0)");

    const bool unit_b2 = std::any_of(b2_se.begin(), b2_se.end(), [](double e) { return !(e > 0.0); });
    std::vector<double> b2_w;
    for (double e : b2_se) b2_w.push_back(unit_b2 ? 1.0 : 1.0 / (e * e));
    const double b2_min = *std::min_element(b2.begin(), b2.end());
    const double b2_max = *std::max_element(b2.begin(), b2.end());
    const double b2_mean = std::max(0.0, weighted_mean(b2, b2_se));
    m.b2_mid = 0.5 * (t.front() + t.back());
    if (b2_max - b2_min <= 1e-12 * std::max(1.0, std::abs(b2_max))) {
        m.b2_low = m.b2_high = b2_mean;
    } else {
        const LogisticFit lf = fit_logistic(t, b2, b2_w, opts.max_iterations);
        if (lf.ok && lf.high >= lf.low && lf.low >= 0.0 && lf.width > 0.0) {
            m.b2_low = lf.low;
            m.b2_high = lf.high;
            m.b2_mid = lf.mid;
            m.b2_width = lf.width;
        } else {
            m.b2_low = m.b2_high = b2_mean;
            m.warnings.push_back("b2 logistic ramp not identifiable; using constant b2");
        }
    }

    // a0 and b1: free below the last tau where either is significant.
    double thresh = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        const bool sig_a0 = a0_se[i] > 0.0 ? std::abs(a0[i]) > opts.significance_n_se * a0_se[i] : a0[i] != 0.0;
        const bool sig_b1 = b1_se[i] > 0.0 ? std::abs(b1[i]) > opts.significance_n_se * b1_se[i] : b1[i] != 0.0;
        if (sig_a0 || sig_b1) thresh = t[i];
    }
    m.asym_threshold_tau = thresh;
    if (std::isfinite(thresh)) {
        std::vector<double> v0, s0, v1, s1;
        for (std::size_t i = 0; i < n && t[i] <= thresh; ++i) {
            v0.push_back(a0[i]);
            s0.push_back(a0_se[i]);
            v1.push_back(b1[i]);
            s1.push_back(b1_se[i]);
        }
        m.a0_low = weighted_mean(v0, s0);
        m.b1_low = weighted_mean(v1, s1);
    }

    nlohmann::json res = nlohmann::json::array();
    for (std::size_t i = 0; i < n; ++i) {
        const Coefficients c = eval(m, t[i]);
        res.push_back({{"tau", t[i]},
                       {"a1", a1[i] - c.a1},
                       {"log2_b0", lb0[i] - std::log2(c.b0)},
                       {"b2", b2[i] - c.b2}});
    }
    m.diagnostics["residuals"] = res;
    m.diagnostics["log2_b0_sse"] = h.sse;
    return m;
}

nlohmann::json to_json(const CoefficientModel& m) {
    auto num = [](double v) -> nlohmann::json {
        if (std::isfinite(v)) return v;
        return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
    };
    return {{"schema", "kmfpe.coefficient_model"},
            {"schema_version", CoefficientModel::kSchemaVersion},
            {"a1", {{"breaks", m.a1_breaks}, {"values", m.a1_values}}},
            {"a0_low", m.a0_low},
            {"b1_low", m.b1_low},
            {"asym_threshold_tau", num(m.asym_threshold_tau)},
            {"b2", {{"low", m.b2_low}, {"high", m.b2_high}, {"mid", m.b2_mid}, {"width", m.b2_width}}},
            {"b0", {{"amplitude", m.b0_amplitude},
                    {"gamma_low", m.gamma_low},
                    {"gamma_high", m.gamma_high},
                    {"gamma_crossover_tau", m.gamma_crossover_tau}}},
            {"valid_range", {num(m.valid_lo), num(m.valid_hi)}},
            {"extrapolation", m.extrapolation == ExtrapolationPolicy::Functional ? "functional" : "hold_last"},
            {"warnings", m.warnings},
            {"diagnostics", m.diagnostics}};
}

CoefficientModel model_from_json(const nlohmann::json& j) {
    auto num = [](const nlohmann::json& v) -> double {
        if (v.is_number()) return v.get<double>();
        const std::string s = v.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        return std::numeric_limits<double>::quiet_NaN();
    };
    try {
        if (j.at("schema_version").get<int>() != CoefficientModel::kSchemaVersion)
            throw ConfigError("coefficient model: unsupported schema_version");
        CoefficientModel m;
        m.a1_breaks = j.at("a1").at("breaks").get<std::vector<double>>();
        m.a1_values = j.at("a1").at("values").get<std::vector<double>>();
        if (m.a1_values.size() != m.a1_breaks.size() + 1)
            throw ConfigError("coefficient model: a1 needs one more value than breaks");
        m.a0_low = j.at("a0_low").get<double>();
        m.b1_low = j.at("b1_low").get<double>();
        m.asym_threshold_tau = num(j.at("asym_threshold_tau"));
        const auto& b2 = j.at("b2");
        m.b2_low = b2.at("low").get<double>();
        m.b2_high = b2.at("high").get<double>();
        m.b2_mid = b2.at("mid").get<double>();
        m.b2_width = b2.at("width").get<double>();
        const auto& b0 = j.at("b0");
        m.b0_amplitude = b0.at("amplitude").get<double>();
        m.gamma_low = b0.at("gamma_low").get<double>();
        m.gamma_high = b0.at("gamma_high").get<double>();
        m.gamma_crossover_tau = b0.at("gamma_crossover_tau").get<double>();
        m.valid_lo = num(j.at("valid_range").at(0));
        m.valid_hi = num(j.at("valid_range").at(1));
        m.extrapolation = j.value("extrapolation", "functional") == "hold_last" ? ExtrapolationPolicy::HoldLast
                                                                                 : ExtrapolationPolicy::Functional;
        if (j.contains("warnings")) m.warnings = j.at("warnings").get<std::vector<std::string>>();
        if (j.contains("diagnostics")) m.diagnostics = j.at("diagnostics");
        if (!(m.b0_amplitude > 0.0)) throw ConfigError("coefficient model: b0 amplitude must be > 0");
        if (m.b2_low < 0.0 || m.b2_high < m.b2_low || !(m.b2_width > 0.0))
            throw ConfigError("coefficient model: b2 ramp must be non-negative and non-decreasing");
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("coefficient model: ") + e.what());
    }
}

} // namespace kmfpe
