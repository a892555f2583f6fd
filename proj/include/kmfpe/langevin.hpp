#pragma once

#include "kmfpe/coefficient_model.hpp"
#include "kmfpe/kernels.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace kmfpe {

enum class InitialKind { Delta, Gaussian };

struct InitialDistribution {
    InitialKind kind = InitialKind::Delta;
    double x0 = 0.0;      ///< delta location, or Gaussian mean
    double sigma0 = 1.0;  ///< Gaussian width
};

/// Ito Euler-Maruyama simulation spec. When `model` is set the coefficients
/// follow it in tau (starting at tau0); otherwise `constants` apply throughout.
struct SimSpec {
    Coefficients constants{1.0, 0.0, 0.5, 0.0, 0.2};
    std::optional<CoefficientModel> model;
    double tau0 = 0.0;
    double dtau_sim = 0.01;
    std::size_t n_paths = 1;
    std::size_t n_steps = 1000;
    std::size_t record_every = 1;
    std::uint64_t seed = 1;
    InitialDistribution initial;
    /// Reflecting barrier in units of the reference width sqrt(b0 / a1) at tau0.
    double barrier_sigmas = 100.0;
    bool parallel = true;
};

struct Ensemble {
    std::size_t n_paths = 0;
    std::size_t n_records = 0;
    double dtau_record = 0.0;
    double tau0 = 0.0;
    std::vector<double> states;  ///< path-major
    std::uint64_t barrier_hits = 0;

    double at(std::size_t path, std::size_t record) const { return states[path * n_records + record]; }
};

/// Throws ConfigError for an invalid spec and NumericalError when the
/// diffusion turns negative along a path.
Ensemble simulate(const SimSpec& spec);

/// n draws from the density proportional to (b0 + b2 x^2)^(-(mu+1)/2)
/// (Gaussian with variance b0 when b2 == 0). Inverse-CDF sampling through the
/// Student t quantile: x = sqrt(b0 / (b2 mu)) t_mu. Throws DomainError for mu <= 0.
std::vector<double> sample_qgaussian(double mu, double b0, double b2, std::size_t n, std::uint64_t seed);

enum class EnsembleValue { State, ExpState };

/// Price-series CSV (timestamp,value). Path p record r gets timestamp
/// p * 2 * n_records + r, so consecutive paths are separated by a gap that
/// ingestion drops.
void write_ensemble_csv(const std::filesystem::path& path, const Ensemble& ensemble, EnsembleValue value);

} // namespace kmfpe
