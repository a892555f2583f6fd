#pragma once

#include "kmfpe/coefficient_model.hpp"
#include "kmfpe/kernels.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace kmfpe {

using kernels::Boundary;

struct SolverConfig {
    double L = 40.0;            ///< domain half-width (sigma_32 units, or y units when co-moving)
    int n_points = 4001;
    double dtau_max = 1e-2;
    double stability_safety = 0.4;
    Boundary boundary = Boundary::ZeroFlux;
    /// Renormalize every N steps; 0 renormalizes only after clipping.
    int renormalize_every = 0;
    /// Evolve on y = x / s(tau), s = sqrt(b0(tau) / b0(tau_start)). Keeps the
    /// density resolved while b0 decays by orders of magnitude.
    bool comoving = false;
    /// Abort when the clipped mass exceeds this per unit tau.
    double max_clipped_mass_rate = 1e-4;
    bool parallel = true;
};

struct ClipEvent {
    double tau = 0.0;
    int nodes = 0;
    double mass_delta = 0.0;
};

/// Density on a uniform symmetric grid. Node coordinates y_i span [-L, L];
/// the physical abscissa is x = scale * y and the physical density is
/// density / scale.
class PdfGrid {
public:
    PdfGrid(double L, int n_points);

    int size() const { return static_cast<int>(y_.size()); }
    double half_width() const { return L_; }
    double spacing() const { return dy_; }
    const std::vector<double>& nodes() const { return y_; }
    std::vector<double>& density() { return p_; }
    const std::vector<double>& density() const { return p_; }

    double tau = 0.0;
    double scale = 1.0;
    std::vector<std::pair<double, double>> mass_history;
    std::vector<ClipEvent> clip_log;

    double x(int i) const { return scale * y_[static_cast<std::size_t>(i)]; }
    double physical_density(int i) const { return p_[static_cast<std::size_t>(i)] / scale; }

    /// dy * sum(density); the quantity the zero-flux update conserves.
    double mass() const;
    double mean() const;
    double variance() const;
    double excess_kurtosis() const;

private:
    double L_, dy_;
    std::vector<double> y_;
    std::vector<double> p_;
};

/// Normal density on the grid, renormalized to unit mass.
/// Throws ConfigError when sigma spans fewer than 10 grid nodes.
PdfGrid gaussian_initial_condition(double sigma, double mean, const SolverConfig& config);

/// Largest stable step for the coefficients at `tau` on this grid.
double stable_dtau(const PdfGrid& grid, const CoefficientModel& model, double tau_ref, double tau,
                   const SolverConfig& config);

/// One FTCS step. `tau_ref` anchors the co-moving scale (ignored otherwise).
/// Throws NumericalError when dtau exceeds the stability limit or a NaN appears.
PdfGrid step(const PdfGrid& grid, const CoefficientModel& model, double dtau, const SolverConfig& config,
             double tau_ref = 0.0);

struct EvolveStats {
    std::size_t steps = 0;
    std::size_t clip_events = 0;
    double clipped_mass = 0.0;
};

/// Evolves from grid.tau to tau_end, emitting snapshots at each checkpoint in
/// (grid.tau, tau_end] plus tau_end itself. tau_end == grid.tau returns one
/// identical snapshot.
std::vector<PdfGrid> evolve(const PdfGrid& initial, const CoefficientModel& model, double tau_end,
                            std::span<const double> checkpoints, const SolverConfig& config,
                            EvolveStats* stats = nullptr);

/// x, density columns in physical units.
void write_snapshot_csv(const std::filesystem::path& path, const PdfGrid& grid);
/// Reads a snapshot back as a physical-unit grid (scale 1). Requires the
/// symmetric uniform layout write_snapshot_csv produces.
PdfGrid read_snapshot_csv(const std::filesystem::path& path, double tau);

} // namespace kmfpe
