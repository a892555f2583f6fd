#include "kmfpe/qgaussian.hpp"

#include "kmfpe/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <sstream>

namespace kmfpe {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kLogSqrtPi = 0.57236494292470008707;  // ln(sqrt(pi))
} // namespace

double qgaussian_normalization(double mu, double b0, double b2) {
    if (!(b0 > 0.0) || !(b2 >= 0.0) || !(mu > 0.0))
        throw DomainError("q-Gaussian needs mu > 0, b0 > 0, b2 >= 0");
    if (b2 == 0.0 || std::isinf(mu)) return 1.0 / std::sqrt(2.0 * M_PI * b0);
    // C = b0^(mu/2) sqrt(b2) Gamma((mu+1)/2) / (sqrt(pi) Gamma(mu/2))
    const double logc = 0.5 * mu * std::log(b0) + 0.5 * std::log(b2) + std::lgamma(0.5 * (mu + 1.0)) -
                        kLogSqrtPi - std::lgamma(0.5 * mu);
    return std::exp(logc);
}

QGaussianFit make_qgaussian(double mu, double b0, double b2, double center) {
    QGaussianFit f;
    f.mu = b2 == 0.0 ? kInf : mu;
    f.scale_b0 = b0;
    f.scale_b2 = b2;
    f.center = center;
    f.normalization = qgaussian_normalization(f.mu, b0, b2);
    f.q_equiv = q_from_mu(f.mu);
    return f;
}

double qgaussian_log_pdf(double x, const QGaussianFit& fit) {
    const double mu = fit.mu, b0 = fit.scale_b0, b2 = fit.scale_b2;
    if (!(b0 > 0.0) || !(b2 >= 0.0) || !(mu > 0.0))
        throw DomainError("q-Gaussian needs mu > 0, b0 > 0, b2 >= 0");
    const double d = x - fit.center;
    if (b2 == 0.0 || std::isinf(mu)) return -0.5 * d * d / b0 - 0.5 * std::log(2.0 * M_PI * b0);
    // b0^(mu/2) (b0 + b2 d^2)^(-(mu+1)/2) = b0^(-1/2) (1 + b2 d^2 / b0)^(-(mu+1)/2)
    const double log_shape = 0.5 * std::log(b2 / b0) + std::lgamma(0.5 * (mu + 1.0)) - kLogSqrtPi -
                             std::lgamma(0.5 * mu);
    return log_shape - 0.5 * (mu + 1.0) * std::log1p(b2 * d * d / b0);
}

double qgaussian_pdf(double x, const QGaussianFit& fit) { return std::exp(qgaussian_log_pdf(x, fit)); }

double mu_from_params(double a1, double B, double b2) {
    if (b2 < 0.0) throw DomainError("mu_from_params: b2 must be >= 0");
    if (b2 == 0.0) return kInf;
    return 1.0 + (a1 - 0.5 * B) / b2;
}

double mu_alternative(double a1, double b2) {
    if (b2 < 0.0) throw DomainError("mu_alternative: b2 must be >= 0");
    return b2 == 0.0 ? kInf : a1 / (2.0 * b2);
}

double q_from_mu(double mu) { return std::isinf(mu) ? 1.0 : 1.0 + 2.0 / (mu + 1.0); }
double mu_from_q(double q) { return q == 1.0 ? kInf : 2.0 / (q - 1.0) - 1.0; }

VariancePrediction variance_prediction(double a1, double B, double b0, double b2) {
    const double den = a1 - 0.5 * B - b2;
    if (!(den > 0.0)) return {kInf, true};
    return {b0 / den, false};
}

VariancePrediction variance_prediction(const CoefficientModel& model, double tau) {
    const Coefficients c = eval(model, tau);
    return variance_prediction(c.a1, decay_rate_B(model, tau), c.b0, c.b2);
}

namespace {

// Shape parametrization used by the fitter:
//   f(x) = c - log1p(kappa u) / (2 kappa),  u = ((x - m) / s)^2
// kappa = 1/(mu+1) in [0, kKappaMax]; kappa = 0 is the Gaussian with variance s^2.
constexpr double kKappaMax = 0.99;

struct Params {
    double c = 0.0, m = 0.0, log_s = 0.0, kappa = 0.2;
};

struct Point {
    double x, y, w;
};

struct Eval {
    double f;
    std::array<double, 4> grad;  // d/d(c, m, log_s, kappa)
};

Eval shape(const Params& p, double x) {
    const double s = std::exp(p.log_s);
    const double z = (x - p.m) / s;
    const double u = z * z;
    const double k = p.kappa;
    const double a = k * u;
    double g, dg_dk;
    if (std::abs(a) < 1e-3) {
        // series in a = kappa u
        g = 0.5 * u * (1.0 - a / 2.0 + a * a / 3.0 - a * a * a / 4.0);
        dg_dk = u * u * (-0.25 + a / 3.0 - 0.375 * a * a + 0.4 * a * a * a);
    } else {
        const double l = std::log1p(a);
        g = l / (2.0 * k);
        dg_dk = (a / (1.0 + a) - l) / (2.0 * k * k);
    }
    const double dg_du = 0.5 / (1.0 + a);
    Eval e;
    e.f = p.c - g;
    e.grad = {1.0, dg_du * 2.0 * z / s, dg_du * 2.0 * u, -dg_dk};
    return e;
}

struct LmResult {
    Params p;
    double loss = kInf;
    int iterations = 0;
    bool converged = false;
};

double residuals(const Params& p, const std::vector<Point>& pts, FitSpace space, Eigen::VectorXd* r,
                 Eigen::MatrixXd* J, bool fix_center) {
    const int n = static_cast<int>(pts.size());
    const int np = fix_center ? 3 : 4;
    if (r) r->resize(n);
    if (J) J->resize(n, np);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const Point& pt = pts[static_cast<std::size_t>(i)];
        const Eval e = shape(p, pt.x);
        const double sw = std::sqrt(pt.w);
        double model = e.f, scale = 1.0;
        if (space == FitSpace::Linear) {
            model = std::exp(e.f);
            scale = model;
        }
        const double ri = sw * (pt.y - model);
        loss += ri * ri;
        if (r) (*r)(i) = ri;
        if (J) {
            int col = 0;
            for (int k = 0; k < 4; ++k) {
                if (fix_center && k == 1) continue;
                (*J)(i, col++) = sw * scale * e.grad[static_cast<std::size_t>(k)];
            }
        }
    }
    return loss;
}

LmResult levenberg_marquardt(Params p, const std::vector<Point>& pts, FitSpace space, bool fix_center,
                             int max_iterations) {
    const int np = fix_center ? 3 : 4;
    Eigen::VectorXd r;
    Eigen::MatrixXd J;
    double loss = residuals(p, pts, space, &r, &J, fix_center);
    double lambda = 1e-3;
    LmResult out;
    for (int it = 1; it <= max_iterations; ++it) {
        out.iterations = it;
        const Eigen::MatrixXd A = J.transpose() * J;
        const Eigen::VectorXd g = J.transpose() * r;
        bool accepted = false;
        while (lambda < 1e14) {
            Eigen::MatrixXd M = A;
            for (int k = 0; k < np; ++k) M(k, k) += lambda * std::max(A(k, k), 1e-12);
            const Eigen::VectorXd d = M.ldlt().solve(g);
            Params q = p;
            int col = 0;
            q.c += d(col++);
            if (!fix_center) q.m += d(col++);
            q.log_s += std::clamp(d(col++), -2.0, 2.0);
            q.kappa = std::clamp(q.kappa + d(col), 0.0, kKappaMax);
            const double ql = residuals(q, pts, space, nullptr, nullptr, fix_center);
            if (std::isfinite(ql) && ql <= loss) {
                const double rel = (loss - ql) / std::max(loss, 1e-300);
                const double step = std::abs(q.c - p.c) + std::abs(q.m - p.m) + std::abs(q.log_s - p.log_s) +
                                    std::abs(q.kappa - p.kappa);
                p = q;
                loss = residuals(p, pts, space, &r, &J, fix_center);
                lambda = std::max(lambda / 3.0, 1e-12);
                accepted = true;
                if (rel < 1e-13 || step < 1e-12) {
                    out.converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if (!accepted) out.converged = true;  // no downhill step left: at a (projected) minimum
        if (out.converged) break;
    }
    out.p = p;
    out.loss = loss;
    return out;
}


Params initial_guess(const std::vector<Point>& pts, std::optional<double> center) {
    Params p;
    double ymax = -kInf;
    std::size_t imax = 0;
    for (std::size_t i = 0; i < pts.size(); ++i)
        if (pts[i].y > ymax) {
            ymax = pts[i].y;
            imax = i;
        }
    p.c = ymax;
    p.m = center ? *center : pts[imax].x;
    // width at exp(-1/2) of the peak
    double lo = pts[imax].x, hi = pts[imax].x;
    for (const Point& pt : pts)
        if (pt.y >= ymax - 0.5) {
            lo = std::min(lo, pt.x);
            hi = std::max(hi, pt.x);
        }
    double spacing = kInf;
    for (std::size_t i = 1; i < pts.size(); ++i) spacing = std::min(spacing, std::abs(pts[i].x - pts[i - 1].x));
    p.log_s = std::log(std::max(0.5 * (hi - lo), spacing));
    return p;
}

LmResult best_fit(const std::vector<Point>& pts, FitSpace space, std::optional<double> center,
                  int max_iterations) {
    Params base = initial_guess(pts, center);
    LmResult best;
    bool any = false;
    for (double k0 : {0.05, 0.25, 0.5}) {
        Params p = base;
        p.kappa = k0;
        LmResult r = levenberg_marquardt(p, pts, space, center.has_value(), max_iterations);
        if (!r.converged) continue;
        if (!any || r.loss < best.loss) best = r;
        any = true;
    }
    if (!any) {
        std::ostringstream msg;
        msg << "fit_mu: no start converged within " << max_iterations << " iterations on " << pts.size()
            << " points";
        throw FitError(msg.str());
    }
    return best;
}

QGaussianFit to_fit(const LmResult& r, std::size_t n_points, const FitMuOptions& opts) {
    const double s = std::exp(r.p.log_s);
    QGaussianFit f;
    if (r.p.kappa == 0.0) {
        f = make_qgaussian(kInf, s * s, 0.0, r.p.m);
    } else {
        const double mu = 1.0 / r.p.kappa - 1.0;
        const double b2 = opts.known_b2 > 0.0 ? opts.known_b2 : 1.0;
        f = make_qgaussian(mu, b2 * s * s / r.p.kappa, b2, r.p.m);
    }
    f.fit_loss = r.loss;
    f.n_points = static_cast<int>(n_points);
    f.iterations = r.iterations;
    return f;
}

void check_points(std::size_t n, const FitMuOptions& opts) {
    if (static_cast<int>(n) < opts.min_points) {
        std::ostringstream msg;
        msg << "fit_mu: " << n << " populated bins, need >= " << opts.min_points;
        throw PreconditionError(msg.str());
    }
}

double skewness(std::span<const double> x, std::span<const double> w) {
    double sw = 0.0, m = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sw += w[i];
        m += w[i] * x[i];
    }
    m /= sw;
    double m2 = 0.0, m3 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - m;
        m2 += w[i] * d * d;
        m3 += w[i] * d * d * d;
    }
    m2 /= sw;
    m3 /= sw;
    return m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
}

void asymmetry_check(QGaussianFit& f, double skew, const FitMuOptions& opts) {
    const int dof = std::max(1, f.n_points - (opts.fixed_center ? 3 : 4));
    const double reduced = f.fit_loss / dof;
    if (std::abs(skew) > opts.asym_skew_threshold && reduced > opts.asym_loss_threshold) {
        std::ostringstream msg;
        msg << "asymmetric density (skewness " << skew << ", reduced loss " << reduced
            << "): symmetric q-Gaussian fit is poor";
        f.warnings.push_back(msg.str());
    }
}

std::vector<Point> histogram_points(const Histogram1D& h, std::span<const std::uint64_t> counts,
                                    std::uint64_t total, FitSpace space) {
    std::vector<Point> pts;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        if (counts[i] == 0) continue;
        const double width = h.edges[i + 1] - h.edges[i];
        const double x = 0.5 * (h.edges[i] + h.edges[i + 1]);
        const double n = static_cast<double>(counts[i]);
        const double dens = n / (static_cast<double>(total) * width);
        if (space == FitSpace::Log) {
            pts.push_back({x, std::log(dens), n});  // var(log n) ~ 1/n
        } else {
            const double sd = dens / std::sqrt(n);
            pts.push_back({x, dens, 1.0 / (sd * sd)});
        }
    }
    return pts;
}

double mu_of_kappa(double k) { return k == 0.0 ? kInf : 1.0 / k - 1.0; }

} // namespace

QGaussianFit fit_mu(const Histogram1D& h, const FitMuOptions& opts) {
    if (h.counts.size() + 1 != h.edges.size()) throw PreconditionError("fit_mu: malformed histogram");
    const auto pts = histogram_points(h, h.counts, h.total, opts.space);
    check_points(pts.size(), opts);
    const LmResult main = best_fit(pts, opts.space, opts.fixed_center, opts.max_iterations);
    QGaussianFit f = to_fit(main, pts.size(), opts);

    // Poisson bootstrap over bin counts, warm-started at the point estimate.
    std::vector<double> kappas;
    std::mt19937_64 rng(opts.seed);
    std::vector<std::uint64_t> counts(h.counts.size());
    const std::uint64_t in_range = [&] {
        std::uint64_t s = 0;
        for (auto c : h.counts) s += c;
        return s;
    }();
    for (int b = 0; b < opts.n_bootstrap; ++b) {
        std::uint64_t resampled = 0;
        for (std::size_t i = 0; i < counts.size(); ++i) {
            counts[i] = h.counts[i] == 0
                            ? 0
                            : std::poisson_distribution<std::uint64_t>(static_cast<double>(h.counts[i]))(rng);
            resampled += counts[i];
        }
        const std::uint64_t total = h.total - in_range + resampled;
        const auto bp = histogram_points(h, counts, total, opts.space);
        if (static_cast<int>(bp.size()) < opts.min_points) continue;
        const LmResult r = levenberg_marquardt(main.p, bp, opts.space, opts.fixed_center.has_value(),
                                               opts.max_iterations);
        if (r.converged) kappas.push_back(r.p.kappa);
    }
    if (kappas.size() >= 10) {
        std::sort(kappas.begin(), kappas.end());
        auto at = [&](double q) {
            const double pos = q * static_cast<double>(kappas.size() - 1);
            const std::size_t i = static_cast<std::size_t>(pos);
            const double t = pos - static_cast<double>(i);
            return i + 1 < kappas.size() ? kappas[i] * (1.0 - t) + kappas[i + 1] * t : kappas[i];
        };
        f.mu_ci_lo = mu_of_kappa(at(0.975));
        f.mu_ci_hi = mu_of_kappa(at(0.025));
    } else {
        f.warnings.push_back("bootstrap produced too few converged replicates for an interval");
    }
    f.gaussian_regime = std::isnan(f.mu_ci_lo) ? f.mu > opts.gaussian_mu_threshold
                                               : f.mu_ci_lo > opts.gaussian_mu_threshold;

    std::vector<double> xs, ws;
    for (const Point& p : pts) {
        xs.push_back(p.x);
        ws.push_back(opts.space == FitSpace::Log ? p.w : p.y);
    }
    asymmetry_check(f, skewness(xs, ws), opts);
    return f;
}

QGaussianFit fit_mu(const PdfGrid& g, const FitMuOptions& opts) {
    double peak = 0.0;
    for (int i = 0; i < g.size(); ++i) peak = std::max(peak, g.physical_density(i));
    if (!(peak > 0.0)) throw PreconditionError("fit_mu: snapshot has no mass");
    std::vector<Point> pts;
    std::vector<double> xs, ws;
    for (int i = 0; i < g.size(); ++i) {
        const double d = g.physical_density(i);
        if (d <= opts.grid_floor * peak) continue;
        const double w = d / peak;
        if (opts.space == FitSpace::Log)
            pts.push_back({g.x(i), std::log(d), w});
        else
            pts.push_back({g.x(i), d, 1.0});
        xs.push_back(g.x(i));
        ws.push_back(d);
    }
    check_points(pts.size(), opts);
    const LmResult main = best_fit(pts, opts.space, opts.fixed_center, opts.max_iterations);
    QGaussianFit f = to_fit(main, pts.size(), opts);
    f.mu_ci_lo = f.mu;
    f.mu_ci_hi = f.mu;
    f.gaussian_regime = f.mu > opts.gaussian_mu_threshold;
    asymmetry_check(f, skewness(xs, ws), opts);
    return f;
}

nlohmann::json to_json(const QGaussianFit& f) {
    auto num = [](double v) -> nlohmann::json {
        if (std::isnan(v)) return nullptr;
        if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
        return v;
    };
    return {{"mu", num(f.mu)},
            {"mu_ci", {num(f.mu_ci_lo), num(f.mu_ci_hi)}},
            {"q", num(f.q_equiv)},
            {"b0", num(f.scale_b0)},
            {"b2", num(f.scale_b2)},
            {"center", num(f.center)},
            {"normalization", num(f.normalization)},
            {"loss", num(f.fit_loss)},
            {"points", f.n_points},
            {"gaussian_regime", f.gaussian_regime},
            {"warnings", f.warnings}};
}

} // namespace kmfpe
