#pragma once

// Data-parallel inner loops. Every kernel has a serial reference in
// kernels::serial and an OpenMP version in kernels::omp; tests compare the
// two and bench/ times them.

#include "kmfpe/density.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace kmfpe::kernels {

enum class Boundary { ZeroFlux, Absorbing };

/// Drift -slope*y + intercept and diffusion d0 + d1*y + d2*y^2 on the
/// computational coordinate y.
struct StencilCoefficients {
    double drift_slope = 0.0;
    double drift_intercept = 0.0;
    double d0 = 0.0, d1 = 0.0, d2 = 0.0;

    double drift(double y) const { return -drift_slope * y + drift_intercept; }
    double diffusion(double y) const { return d0 + y * (d1 + d2 * y); }
};

/// One forward-time centered-space step of dP/dt = -d/dy(D1 P) + d2/dy2(D2 P)
/// in conservative flux form:
///   J(i+1/2) = (D1 P)_i/2 + (D1 P)_{i+1}/2 - ((D2 P)_{i+1} - (D2 P)_i)/dy
///   out_i    = p_i - dt/dy * (J(i+1/2) - J(i-1/2)).
/// Zero-flux closes both ends; absorbing pins the end nodes to 0.
/// `out` must not alias `p`.
struct FpeStepArgs {
    std::span<const double> y;
    std::span<const double> p;
    std::span<double> out;
    StencilCoefficients coeffs;
    double dt = 0.0;
    double dy = 0.0;
    Boundary boundary = Boundary::ZeroFlux;
};

struct EnsembleArgs {
    /// Per-step coefficients (a1, a0, b0, b1, b2), size n_steps.
    std::span<const std::array<double, 5>> coeffs;
    std::span<const double> x0;  ///< initial state per path
    double dt = 0.01;
    std::size_t record_every = 1;
    double barrier = 100.0;
    std::uint64_t seed = 0;
};

struct EnsembleResult {
    std::size_t n_paths = 0;
    std::size_t n_records = 0;  ///< including the initial state
    std::vector<double> states; ///< path-major: states[p * n_records + r]
    std::uint64_t barrier_hits = 0;
};

/// Stream seed for one path: splitmix64 of seed + (path + 1) * golden gamma.
/// The map path -> seed is injective for a fixed base seed.
std::uint64_t path_seed(std::uint64_t seed, std::uint64_t path);

namespace serial {
void fpe_step(const FpeStepArgs& a);
void accumulate_joint(std::span<const double> x1, std::span<const double> x2, ConditionalDensity& cd);
EnsembleResult euler_maruyama(const EnsembleArgs& a);
} // namespace serial

namespace omp {
void fpe_step(const FpeStepArgs& a);
/// Accumulates into kReductionShards private tables merged in shard order.
void accumulate_joint(std::span<const double> x1, std::span<const double> x2, ConditionalDensity& cd);
EnsembleResult euler_maruyama(const EnsembleArgs& a);
} // namespace omp

} // namespace kmfpe::kernels
