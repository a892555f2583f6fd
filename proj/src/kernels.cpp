#include "kmfpe/kernels.hpp"

#include "kmfpe/error.hpp"
#include "kmfpe/numeric.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace kmfpe::kernels {

std::uint64_t path_seed(std::uint64_t seed, std::uint64_t path) {
    std::uint64_t z = seed + (path + 1) * 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

namespace {

inline double flux(const FpeStepArgs& a, std::size_t i) {
    // J(i+1/2); callers guarantee i + 1 < n
    const double f0 = a.coeffs.drift(a.y[i]) * a.p[i];
    const double f1 = a.coeffs.drift(a.y[i + 1]) * a.p[i + 1];
    const double g0 = a.coeffs.diffusion(a.y[i]) * a.p[i];
    const double g1 = a.coeffs.diffusion(a.y[i + 1]) * a.p[i + 1];
    return 0.5 * f0 + 0.5 * f1 - (g1 - g0) / a.dy;
}

void check_step(const FpeStepArgs& a) {
    if (a.y.size() != a.p.size() || a.out.size() != a.p.size() || a.p.size() < 3)
        throw PreconditionError("fpe_step: grid arrays differ in size or are too small");
}

// One path; returns barrier hits.
std::uint64_t run_path(const EnsembleArgs& a, std::size_t path, std::size_t n_records,
                       double* rec) {
    std::mt19937_64 rng(path_seed(a.seed, path));
    std::normal_distribution<double> normal(0.0, 1.0);
    const double sqdt = std::sqrt(a.dt);
    double x = a.x0[path];
    rec[0] = x;
    std::uint64_t hits = 0;
    std::size_t r = 1;
    for (std::size_t s = 0; s < a.coeffs.size(); ++s) {
        const auto& c = a.coeffs[s];
        const double diff = c[2] + x * (c[3] + c[4] * x);
        if (!(diff >= 0.0)) {
            std::ostringstream msg;
            msg << "euler_maruyama: diffusion " << diff << " < 0 at x=" << x << " (path " << path
                << ", step " << s << ")";
            throw NumericalError(msg.str());
        }
        x += (-c[0] * x + c[1]) * a.dt + std::sqrt(2.0 * diff) * sqdt * normal(rng);
        if (std::abs(x) > a.barrier) {
            x = std::copysign(2.0 * a.barrier - std::abs(x), x);
            ++hits;
        }
        if ((s + 1) % a.record_every == 0 && r < n_records) rec[r++] = x;
    }
    return hits;
}

EnsembleResult prepare(const EnsembleArgs& a) {
    if (!(a.dt > 0.0) || a.record_every == 0)
        throw PreconditionError("euler_maruyama: dt > 0 and record_every >= 1 required");
    EnsembleResult res;
    res.n_paths = a.x0.size();
    res.n_records = 1 + a.coeffs.size() / a.record_every;
    res.states.assign(res.n_paths * res.n_records, 0.0);
    return res;
}

} // namespace

namespace serial {

void fpe_step(const FpeStepArgs& a) {
    check_step(a);
    const std::size_t n = a.p.size();
    std::vector<double> j(n + 1, 0.0);  // j[i] = J(i - 1/2)
    for (std::size_t i = 0; i + 1 < n; ++i) j[i + 1] = flux(a, i);
    const double r = a.dt / a.dy;
    for (std::size_t i = 0; i < n; ++i) a.out[i] = a.p[i] - r * (j[i + 1] - j[i]);
    if (a.boundary == Boundary::Absorbing) {
        a.out[0] = 0.0;
        a.out[n - 1] = 0.0;
    }
}

void accumulate_joint(std::span<const double> x1, std::span<const double> x2, ConditionalDensity& cd) {
    for (std::size_t k = 0; k < x1.size(); ++k) cd.add(x1[k], x2[k]);
}

EnsembleResult euler_maruyama(const EnsembleArgs& a) {
    EnsembleResult res = prepare(a);
    for (std::size_t p = 0; p < res.n_paths; ++p)
        res.barrier_hits += run_path(a, p, res.n_records, res.states.data() + p * res.n_records);
    return res;
}

} // namespace serial

namespace omp {

void fpe_step(const FpeStepArgs& a) {
    check_step(a);
    const auto n = static_cast<std::ptrdiff_t>(a.p.size());
    const double r = a.dt / a.dy;
    std::vector<double> j(a.p.size() + 1, 0.0);  // j[i] = J(i - 1/2)
#pragma omp parallel
    {
#pragma omp for schedule(static)
        for (std::ptrdiff_t i = 0; i < n - 1; ++i) {
            const auto u = static_cast<std::size_t>(i);
            j[u + 1] = flux(a, u);
        }
#pragma omp for schedule(static)
        for (std::ptrdiff_t i = 0; i < n; ++i) {
            const auto u = static_cast<std::size_t>(i);
            a.out[u] = a.p[u] - r * (j[u + 1] - j[u]);
        }
    }
    if (a.boundary == Boundary::Absorbing) {
        a.out[0] = 0.0;
        a.out[static_cast<std::size_t>(n - 1)] = 0.0;
    }
}

void accumulate_joint(std::span<const double> x1, std::span<const double> x2, ConditionalDensity& cd) {
    const std::size_t n = x1.size();
    std::vector<ConditionalDensity> shards(kReductionShards,
                                           ConditionalDensity(cd.x1_edges(), cd.x2_edges(), cd.tau1(), cd.tau2()));
#pragma omp parallel for schedule(static)
    for (std::size_t s = 0; s < kReductionShards; ++s) {
        const std::size_t e = shard_begin(n, s + 1);
        for (std::size_t k = shard_begin(n, s); k < e; ++k) shards[s].add(x1[k], x2[k]);
    }
    for (const auto& s : shards) cd.merge(s);
}

EnsembleResult euler_maruyama(const EnsembleArgs& a) {
    EnsembleResult res = prepare(a);
    const auto np = static_cast<std::ptrdiff_t>(res.n_paths);
    std::uint64_t hits = 0;
    bool failed = false;
    std::string failure;
#pragma omp parallel for schedule(dynamic) reduction(+ : hits)
    for (std::ptrdiff_t p = 0; p < np; ++p) {
        const auto u = static_cast<std::size_t>(p);
        try {
            hits += run_path(a, u, res.n_records, res.states.data() + u * res.n_records);
        } catch (const NumericalError& e) {
#pragma omp critical(kmfpe_em_failure)
            {
                if (!failed) failure = e.what();
                failed = true;
            }
        }
    }
    if (failed) throw NumericalError(failure);
    res.barrier_hits = hits;
    return res;
}

} // namespace omp

} // namespace kmfpe::kernels
