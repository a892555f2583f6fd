#pragma once

#include "kmfpe/sampling.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace kmfpe {

struct Binning {
    int n_bins = 41;
    /// Edges span +-half_width_sigmas sample standard deviations around 0.
    double half_width_sigmas = 8.0;
    /// Bins with fewer counts are ignored by downstream fits.
    std::uint64_t min_count = 5;
    std::uint64_t min_pairs = 10000;
};

/// n equal-width bins on [-half_width, half_width]; exactly antisymmetric so
/// that negating the data reflects bin indices.
std::vector<double> symmetric_edges(int n_bins, double half_width);
std::vector<double> edges_for(std::span<const double> values, const Binning& binning);

/// Index of the bin containing x, or -1 when outside [edges.front(), edges.back()).
int bin_index(std::span<const double> edges, double x);

struct Histogram1D {
    std::vector<double> edges;
    std::vector<std::uint64_t> counts;
    std::uint64_t total = 0;

    std::vector<double> centers() const;
    /// counts / (total * width); integrates to 1.
    std::vector<double> density() const;
};

Histogram1D histogram_1d(std::span<const double> values, std::span<const double> edges);
Histogram1D histogram_1d(std::span<const double> values, const Binning& binning);

/// Power sums of the increment y = x2 - x1 over one x1 bin. Every pair whose
/// x1 falls in the row is accumulated, even if x2 is outside the x2 edges.
struct RowMoments {
    static constexpr int kMaxPower = 8;
    std::uint64_t n = 0;
    double sum_x1 = 0.0;
    double sum_x1_sq = 0.0;
    std::array<double, kMaxPower> sum_pow{};  ///< sum_pow[p-1] = sum y^p

    void add(double x1, double y);
    void merge(const RowMoments& o);
};

/// Joint histogram of (x1 at tau1, x2 at tau2) plus per-row increment moments.
class ConditionalDensity {
public:
    ConditionalDensity(std::vector<double> x1_edges, std::vector<double> x2_edges, double tau1,
                       double tau2);

    int n1() const { return static_cast<int>(x1_edges_.size()) - 1; }
    int n2() const { return static_cast<int>(x2_edges_.size()) - 1; }
    const std::vector<double>& x1_edges() const { return x1_edges_; }
    const std::vector<double>& x2_edges() const { return x2_edges_; }
    double tau1() const { return tau1_; }
    double tau2() const { return tau2_; }
    double dtau() const { return tau2_ - tau1_; }

    std::uint64_t count(int i, int j) const { return counts_[idx(i, j)]; }
    std::uint64_t row_total(int i) const;
    std::uint64_t total() const;
    const RowMoments& row_moments(int i) const { return rows_[static_cast<std::size_t>(i)]; }
    std::vector<double> x1_centers() const;
    std::vector<double> x2_centers() const;

    void add(double x1, double x2);
    /// Counts and sums are additive; merge is associative and commutative.
    void merge(const ConditionalDensity& other);

    std::vector<std::uint64_t>& raw_counts() { return counts_; }
    std::vector<RowMoments>& raw_rows() { return rows_; }
    const std::vector<std::uint64_t>& raw_counts() const { return counts_; }

private:
    std::size_t idx(int i, int j) const {
        return static_cast<std::size_t>(i) * static_cast<std::size_t>(n2()) + static_cast<std::size_t>(j);
    }

    std::vector<double> x1_edges_, x2_edges_;
    double tau1_, tau2_;
    std::vector<std::uint64_t> counts_;
    std::vector<RowMoments> rows_;
};

/// Builds the joint histogram from row-aligned samples. Throws
/// InsufficientDataError when fewer than binning.min_pairs pairs are admitted.
ConditionalDensity joint_histogram(std::span<const double> x1, std::span<const double> x2,
                                   double tau1, double tau2, const Binning& binning);
ConditionalDensity joint_histogram(std::span<const double> x1, std::span<const double> x2,
                                   std::vector<double> x1_edges, std::vector<double> x2_edges,
                                   double tau1, double tau2, std::uint64_t min_pairs);
/// Pairs coarse/fine returns sharing an initial timestamp; tau from the scale map.
ConditionalDensity joint_histogram(const ReturnSeries& coarse, const ReturnSeries& fine,
                                   const ScaleMap& map, const Binning& binning);

/// Row-normalized P(x2 bin | x1 bin). Rows without counts are flagged empty
/// and hold zeros.
struct ConditionalKernel {
    int n1 = 0, n2 = 0;
    std::vector<double> prob;
    std::vector<bool> empty;
    std::vector<std::uint64_t> row_counts;

    double operator()(int i, int j) const {
        return prob[static_cast<std::size_t>(i) * static_cast<std::size_t>(n2) + static_cast<std::size_t>(j)];
    }
};

ConditionalKernel conditional_from_joint(const ConditionalDensity& cd);

struct GTestResult {
    double g = 0.0;
    int dof = 0;
    double p_value = 1.0;
};

/// Likelihood-ratio test of independence on the populated part of the joint table.
GTestResult g_test_independence(const ConditionalDensity& cd);

struct CkOptions {
    enum class Threshold { Fixed, Bootstrap };
    Binning binning{};
    Threshold threshold = Threshold::Bootstrap;
    double fixed_threshold = 0.05;
    int n_bootstrap = 100;
    double quantile = 0.95;
    std::uint64_t seed = 0x5eedc0ffeeULL;
    /// Keep every k-th triple, k = measured serial inflation, before testing.
    /// Surrogates redraw x3 row by row, so they only calibrate for near-independent rows.
    bool thin = true;
};

/// Batch-means estimate of n/n_eff for a time-ordered sample (1 when n < 100).
double serial_inflation(std::span<const double> x);

struct CkTestReport {
    double tau1 = 0.0, tau_mid = 0.0, tau2 = 0.0;
    double distance = 0.0;
    double threshold = 0.0;
    double fixed_threshold = 0.0;
    double calibrated_threshold = 0.0;  ///< NaN when not computed
    bool passed = false;
    std::uint64_t effective_samples = 0;
    std::size_t stride = 1;
    std::string threshold_mode;
};

/// Marginal-weighted L1 distance between the direct P(x3|x1) and the
/// composition sum_b P(x3|x2=b) P(x2=b|x1), on one common binning per variable.
double ck_distance(std::span<const double> x1, std::span<const double> x2,
                   std::span<const double> x3, const Binning& binning,
                   std::uint64_t* admitted = nullptr);

/// Chapman-Kolmogorov test on row-aligned triples. The bootstrap threshold is
/// the `quantile` of the distance under Markov surrogates in which every x3 is
/// replaced by the x3 of a random near neighbour in x2.
CkTestReport chapman_kolmogorov_test(std::span<const double> x1, std::span<const double> x2,
                                     std::span<const double> x3, double tau1, double tau_mid,
                                     double tau2, const CkOptions& options = {});

CkTestReport chapman_kolmogorov_test(const PriceSeries& series, const SamplingSpec& sampling,
                                     double tau1, double tau_mid, double tau2,
                                     const CkOptions& options = {});

void write_histogram_csv(const std::filesystem::path& path, const Histogram1D& h);
/// Reads the write_histogram_csv layout; '#' lines are skipped.
Histogram1D read_histogram_csv(const std::filesystem::path& path);
void write_joint_csv(const std::filesystem::path& path, const ConditionalDensity& cd);

} // namespace kmfpe
