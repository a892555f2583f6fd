#pragma once

#include "kmfpe/coefficient_model.hpp"
#include "kmfpe/density.hpp"
#include "kmfpe/fpe.hpp"
#include "kmfpe/km.hpp"
#include "kmfpe/langevin.hpp"
#include "kmfpe/qgaussian.hpp"
#include "kmfpe/sampling.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace kmfpe {

// ---- estimation core ------------------------------------------------------

struct DtauCurves {
    double dtau = 0.0;
    double tau1 = 0.0, tau2 = 0.0;  ///< realized scales
    std::uint64_t pairs = 0;
    std::array<double, 3> inflation{1.0, 1.0, 1.0};  ///< orders 1, 2, 4
    KmCurve d1, d2, d4;
    DtauFits fits;
    QuarticFit quartic;
};

struct ScaleEstimate {
    double tau = 0.0;
    std::vector<DtauCurves> per_dtau;
    KmLimit limit;
    PawulaReport pawula;
    std::vector<std::string> skipped;  ///< dtau values dropped, with reasons
};

struct EstimateOptions {
    std::vector<double> dtau_grid{0.1, 0.15, 0.2, 0.3, 0.4};
    Binning binning{};
    KmOptions km{};
    /// Rows are time-ordered and may overlap; scale n_eff and errors by the
    /// measured serial variance inflation.
    bool serial_correction = true;
    PawulaOptions pawula{};
};

using Sampler = std::function<AlignedSample(double tau1, double tau2)>;

/// Estimation from one (x at tau1, x at tau2) column pair.
DtauCurves estimate_dtau(std::span<const double> x1, std::span<const double> x2, double tau1, double tau2,
                         double dtau_nominal, const EstimateOptions& opts);

/// Drift/diffusion at one nominal tau: one joint histogram per dtau, fits,
/// dtau -> 0 extrapolation and the Pawula check. dtau values without enough
/// data are skipped and listed.
ScaleEstimate estimate_scale(const Sampler& sample_at, double tau, const EstimateOptions& opts);

// ---- run configuration -----------------------------------------------------

struct SolveSpec {
    double tau_start = 0.0;
    double tau_end = 1.0;
    /// <= 0: sqrt of the predicted variance at tau_start.
    double initial_sigma = 0.0;
    std::vector<double> checkpoints;  ///< empty: the tau ladder
    std::filesystem::path model_path;  ///< empty: model.json in the output directory
};

struct HistogramInput {
    double tau = 0.0;
    std::filesystem::path path;
};

struct FitTailsSpec {
    enum class Source { Snapshots, Returns, Histograms };
    Source source = Source::Snapshots;
    std::vector<HistogramInput> histograms;
};

struct SimulateSpec {
    SimSpec sim;
    std::filesystem::path model_path;  ///< optional coefficient model JSON
    EnsembleValue value = EnsembleValue::ExpState;
    std::string output = "simulated.csv";
};

struct RunConfig {
    std::vector<std::filesystem::path> inputs;
    SamplingSpec sampling;
    Seconds sampling_interval = 0;  ///< 0: inferred from the data
    std::vector<double> taus;
    EstimateOptions estimate;
    std::vector<std::array<double, 3>> ck_triples;
    CkOptions ck;
    ModelFitOptions model_fit;
    SolverConfig solver;
    SolveSpec solve;
    FitMuOptions fit;
    FitTailsSpec fit_tails;
    SimulateSpec simulate;
    std::filesystem::path output_dir = "out";
    std::uint64_t seed = 1;

    /// Effective configuration document (after CLI overrides).
    nlohmann::json document;
    std::string hash;
};

/// Parses a config document; relative paths resolve against `base_dir`.
/// Unknown keys are rejected. Throws ConfigError.
RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override = {},
                          std::optional<std::filesystem::path> out_override = {});

/// FNV-1a 64 of the canonical dump, excluding output_dir; 16 hex digits.
std::string config_hash(const nlohmann::json& doc);

// ---- stages ------------------------------------------------------------------

void cmd_ingest(const RunConfig& cfg);
void cmd_ck_test(const RunConfig& cfg);
void cmd_estimate(const RunConfig& cfg);
void cmd_solve(const RunConfig& cfg);
/// Returns the number of tabulated mu rows.
std::size_t cmd_fit_tails(const RunConfig& cfg);
void cmd_simulate(const RunConfig& cfg);

/// Maps an exception from a stage to the CLI exit code: 2 bad config,
/// 3 insufficient data, 4 numerical failure, 1 anything else.
int exit_code_for(const std::exception& e);

} // namespace kmfpe
