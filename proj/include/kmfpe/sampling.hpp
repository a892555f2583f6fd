#pragma once

#include "kmfpe/series.hpp"

#include <span>
#include <string>
#include <vector>

namespace kmfpe {

/// How a series is turned into the scale-indexed variable whose Markov
/// dynamics are estimated.
enum class SamplingMode {
    /// Variable at scale tau is the normalized log-return over lag_of_tau(tau);
    /// all scales share the same initial timestamp.
    Cascade,
    /// Variable is ln(value) itself; tau advances state_dtau_per_sample per
    /// sample. Used for directly simulated Langevin states.
    State,
};

SamplingMode parse_sampling_mode(const std::string& s);
std::string to_string(SamplingMode m);

struct SamplingSpec {
    SamplingMode mode = SamplingMode::Cascade;
    ScaleMap scale_map = ScaleMap::from_days(32.0);
    ReturnOptions returns{};
    /// Cascade only: divisor for returns; <= 0 means use the sample standard
    /// deviation of returns at the reference lag dt0.
    double sigma_ref = 0.0;
    /// State only.
    double state_dtau_per_sample = 0.01;
};

/// Columns of the variable at several scales, row-aligned (row r of every
/// column comes from the same initial instant).
struct AlignedSample {
    std::vector<double> taus;  ///< realized scales after lag rounding
    std::vector<std::vector<double>> columns;
    double sigma_ref = 1.0;

    std::size_t rows() const { return columns.empty() ? 0 : columns.front().size(); }
};

/// Reference-scale standard deviation used for normalization in Cascade mode.
double reference_sigma(const PriceSeries& series, const SamplingSpec& spec);

AlignedSample aligned_variables(const PriceSeries& series, const SamplingSpec& spec,
                                std::span<const double> taus);

/// Row-aligns already computed return series by identical start time.
AlignedSample align_returns(std::span<const ReturnSeries> series, std::span<const double> taus);

} // namespace kmfpe
