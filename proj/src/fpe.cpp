#include "kmfpe/fpe.hpp"

#include "kmfpe/error.hpp"
#include "kmfpe/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace kmfpe {

PdfGrid::PdfGrid(double L, int n_points) : L_(L) {
    if (!(L > 0.0) || n_points < 3 || n_points % 2 == 0)
        throw ConfigError("PdfGrid: need L > 0 and an odd n_points >= 3");
    const int m = n_points - 1;
    dy_ = 2.0 * L / m;
    y_.resize(static_cast<std::size_t>(n_points));
    // exactly antisymmetric node coordinates
    for (int i = 0; i <= m; ++i) y_[static_cast<std::size_t>(i)] = static_cast<double>(2 * i - m) / m * L;
    p_.assign(static_cast<std::size_t>(n_points), 0.0);
}

double PdfGrid::mass() const {
    const std::size_t n = p_.size();
    // the flux-form update conserves exactly this sum
    return dy_ * chunked_sum(n, [&](std::size_t i) { return p_[i]; });
}

namespace {

double moment(const PdfGrid& g, int k, double about) {
    const auto& p = g.density();
    const auto& y = g.nodes();
    const double m = chunked_sum(p.size(), [&](std::size_t i) {
        return p[i] * std::pow(g.scale * y[i] - about, k);
    });
    return m * g.spacing() / g.mass();
}

} // namespace

double PdfGrid::mean() const { return moment(*this, 1, 0.0); }
double PdfGrid::variance() const { return moment(*this, 2, mean()); }
double PdfGrid::excess_kurtosis() const {
    const double mu = mean();
    const double v = moment(*this, 2, mu);
    return moment(*this, 4, mu) / (v * v) - 3.0;
}

PdfGrid gaussian_initial_condition(double sigma, double mean, const SolverConfig& config) {
    if (!(sigma > 0.0)) throw DomainError("gaussian_initial_condition: sigma must be > 0");
    PdfGrid g(config.L, config.n_points);
    if (sigma / g.spacing() < 10.0)
        throw ConfigError("gaussian_initial_condition: sigma is resolved by fewer than 10 grid nodes");
    auto& p = g.density();
    const double norm = 1.0 / (sigma * std::sqrt(2.0 * M_PI));
    for (int i = 0; i < g.size(); ++i) {
        const double z = (g.nodes()[static_cast<std::size_t>(i)] - mean) / sigma;
        p[static_cast<std::size_t>(i)] = norm * std::exp(-0.5 * z * z);
    }
    const double m = g.mass();
    for (double& v : p) v /= m;
    g.mass_history.emplace_back(g.tau, g.mass());
    return g;
}

namespace {

double comoving_scale(const CoefficientModel& model, double tau_ref, double tau) {
    return std::exp2(0.5 * (log2_b0(model, tau) - log2_b0(model, tau_ref)));
}

kernels::StencilCoefficients stencil_at(const CoefficientModel& model, double tau_ref, double tau,
                                        const SolverConfig& config, double* scale_out) {
    const Coefficients c = eval(model, tau);
    kernels::StencilCoefficients s;
    double scale = 1.0;
    if (config.comoving) {
        // y = x / s, s'/s = -B/2: D1_y = -(a1 - B/2) y + a0/s, D2_y = b0/s^2 + b1 y/s + b2 y^2
        scale = comoving_scale(model, tau_ref, tau);
        const double B = decay_rate_B(model, tau);
        s.drift_slope = c.a1 - 0.5 * B;
        s.drift_intercept = c.a0 / scale;
        s.d0 = c.b0 / (scale * scale);
        s.d1 = c.b1 / scale;
        s.d2 = c.b2;
    } else {
        s.drift_slope = c.a1;
        s.drift_intercept = c.a0;
        s.d0 = c.b0;
        s.d1 = c.b1;
        s.d2 = c.b2;
    }
    if (scale_out) *scale_out = scale;
    return s;
}

double max_diffusion(const kernels::StencilCoefficients& s, double L) {
    // quadratic on [-L, L]: extremes at the ends or the vertex
    double m = std::max(std::abs(s.diffusion(-L)), std::abs(s.diffusion(L)));
    if (s.d2 != 0.0) {
        const double v = -s.d1 / (2.0 * s.d2);
        if (std::abs(v) < L) m = std::max(m, std::abs(s.diffusion(v)));
    }
    return m;
}

} // namespace

double stable_dtau(const PdfGrid& grid, const CoefficientModel& model, double tau_ref, double tau,
                   const SolverConfig& config) {
    const auto s = stencil_at(model, tau_ref, tau, config, nullptr);
    const double d = max_diffusion(s, grid.half_width());
    const double dy = grid.spacing();
    double dt = config.dtau_max;
    if (d > 0.0) dt = std::min(dt, config.stability_safety * dy * dy / (2.0 * d));
    // drift: keep the Courant number below one as well
    const double v = std::max(std::abs(s.drift(-grid.half_width())), std::abs(s.drift(grid.half_width())));
    if (v > 0.0) dt = std::min(dt, dy / v);
    return dt;
}

namespace {

// Clip negatives and check for NaN; returns clipped mass (positive).
double clip_negatives(PdfGrid& g, int* nodes) {
    auto& p = g.density();
    double clipped = 0.0;
    int count = 0;
    for (double& v : p) {
        if (std::isnan(v)) throw NumericalError("fpe step produced NaN at tau=" + std::to_string(g.tau));
        if (v < 0.0) {
            clipped -= v;
            v = 0.0;
            ++count;
        }
    }
    *nodes = count;
    return clipped * g.spacing();
}

void renormalize(PdfGrid& g) {
    const double m = g.mass();
    if (!(m > 0.0)) throw NumericalError("fpe: density lost all mass at tau=" + std::to_string(g.tau));
    for (double& v : g.density()) v /= m;
}

void step_into(const PdfGrid& in, PdfGrid& out, const CoefficientModel& model, double dtau,
               const SolverConfig& config, double tau_ref) {
    const double limit = stable_dtau(in, model, tau_ref, in.tau, config);
    if (dtau > limit * (1.0 + 1e-12))
        throw NumericalError("fpe step: dtau " + std::to_string(dtau) + " exceeds stability limit " +
                             std::to_string(limit));
    const auto coeffs = stencil_at(model, tau_ref, in.tau, config, nullptr);
    kernels::FpeStepArgs a{in.nodes(), in.density(), out.density(), coeffs, dtau, in.spacing(), config.boundary};
    if (config.parallel)
        kernels::omp::fpe_step(a);
    else
        kernels::serial::fpe_step(a);
    out.tau = in.tau + dtau;
    out.scale = config.comoving ? comoving_scale(model, tau_ref, out.tau) : 1.0;
}

} // namespace

PdfGrid step(const PdfGrid& grid, const CoefficientModel& model, double dtau, const SolverConfig& config,
             double tau_ref) {
    PdfGrid out = grid;
    step_into(grid, out, model, dtau, config, tau_ref);
    int nodes = 0;
    const double clipped = clip_negatives(out, &nodes);
    if (nodes > 0) {
        out.clip_log.push_back({out.tau, nodes, clipped});
        renormalize(out);
    }
    return out;
}

std::vector<PdfGrid> evolve(const PdfGrid& initial, const CoefficientModel& model, double tau_end,
                            std::span<const double> checkpoints, const SolverConfig& config,
                            EvolveStats* stats) {
    const double tau_start = initial.tau;
    if (tau_end < tau_start) throw PreconditionError("evolve: tau_end must be >= the grid's tau");
    std::vector<double> marks;
    for (double c : checkpoints)
        if (c > tau_start && c < tau_end) marks.push_back(c);
    marks.push_back(tau_end);
    std::sort(marks.begin(), marks.end());
    marks.erase(std::unique(marks.begin(), marks.end()), marks.end());

    std::vector<PdfGrid> snaps;
    if (tau_end == tau_start) {
        snaps.push_back(initial);
        return snaps;
    }
    PdfGrid cur = initial;
    PdfGrid next = initial;
    // logs live outside the ping-pong buffers
    std::vector<ClipEvent> clip_log = initial.clip_log;
    std::vector<std::pair<double, double>> mass_history = initial.mass_history;
    cur.clip_log.clear();
    cur.mass_history.clear();
    next.clip_log.clear();
    next.mass_history.clear();
    EvolveStats st;
    // scale anchored at the start so the initial grid is the physical one
    const double tau_ref = tau_start;
    std::size_t since_norm = 0;
    for (double mark : marks) {
        while (cur.tau < mark) {
            double dt = stable_dtau(cur, model, tau_ref, cur.tau, config);
            bool last = false;
            if (cur.tau + dt >= mark) {
                dt = mark - cur.tau;
                last = true;
            }
            step_into(cur, next, model, dt, config, tau_ref);
            if (last) next.tau = mark;
            ++st.steps;
            int nodes = 0;
            const double clipped = clip_negatives(next, &nodes);
            bool renorm = false;
            if (nodes > 0) {
                clip_log.push_back({next.tau, nodes, clipped});
                st.clipped_mass += clipped;
                ++st.clip_events;
                renorm = true;
                if (st.clipped_mass > config.max_clipped_mass_rate * std::max(1.0, next.tau - tau_start)) {
                    std::ostringstream msg;
                    msg << "fpe: clipped mass " << st.clipped_mass << " exceeds "
                        << config.max_clipped_mass_rate << " per unit tau at tau=" << next.tau;
                    throw NumericalError(msg.str());
                }
            }
            if (config.renormalize_every > 0 && ++since_norm >= static_cast<std::size_t>(config.renormalize_every)) {
                renorm = true;
                since_norm = 0;
            }
            if (renorm) renormalize(next);
            std::swap(cur, next);
        }
        mass_history.emplace_back(cur.tau, cur.mass());
        snaps.push_back(cur);
        snaps.back().clip_log = clip_log;
        snaps.back().mass_history = mass_history;
    }
    if (stats) *stats = st;
    return snaps;
}

void write_snapshot_csv(const std::filesystem::path& path, const PdfGrid& grid) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << "x,density\n";
    for (int i = 0; i < grid.size(); ++i)
        f << format_real(grid.x(i)) << ',' << format_real(grid.physical_density(i)) << '\n';
}

PdfGrid read_snapshot_csv(const std::filesystem::path& path, double tau) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open " + path.string());
    std::vector<double> xs, ds;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#' || line.rfind("x,", 0) == 0) continue;
        double x = 0.0, d = 0.0;
        if (std::sscanf(line.c_str(), "%lf,%lf", &x, &d) != 2)
            throw ConfigError(path.string() + ": malformed snapshot row '" + line + "'");
        xs.push_back(x);
        ds.push_back(d);
    }
    if (xs.size() < 3) throw InsufficientDataError(path.string() + ": snapshot has fewer than 3 nodes");
    PdfGrid g(xs.back(), static_cast<int>(xs.size()));
    const double tol = 1e-9 * g.spacing();
    for (std::size_t i = 0; i < xs.size(); ++i)
        if (std::abs(xs[i] - g.nodes()[i]) > tol)
            throw ConfigError(path.string() + ": snapshot nodes are not a symmetric uniform grid");
    g.density() = std::move(ds);
    g.tau = tau;
    return g;
}

} // namespace kmfpe
