#include "kmfpe/density.hpp"

#include "kmfpe/error.hpp"
#include "kmfpe/kernels.hpp"
#include "kmfpe/numeric.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

namespace kmfpe {

std::vector<double> symmetric_edges(int n_bins, double half_width) {
    if (n_bins < 1 || !(half_width > 0.0) || !std::isfinite(half_width))
        throw PreconditionError("symmetric_edges: need n_bins >= 1 and finite half_width > 0");
    std::vector<double> e(static_cast<std::size_t>(n_bins) + 1);
    for (int i = 0; i <= n_bins; ++i)
        e[static_cast<std::size_t>(i)] = static_cast<double>(2 * i - n_bins) / n_bins * half_width;
    return e;
}

std::vector<double> edges_for(std::span<const double> values, const Binning& binning) {
    return symmetric_edges(binning.n_bins, binning.half_width_sigmas * sample_stddev(values));
}

int bin_index(std::span<const double> edges, double x) {
    const double lo = edges.front(), hi = edges.back();
    if (!(x >= lo) || !(x < hi)) return -1;
    const auto n = static_cast<int>(edges.size()) - 1;
    int i = static_cast<int>((x - lo) / (hi - lo) * n);
    i = std::clamp(i, 0, n - 1);
    // resolve rounding against the stored edges
    while (i > 0 && x < edges[static_cast<std::size_t>(i)]) --i;
    while (i + 1 < n && x >= edges[static_cast<std::size_t>(i) + 1]) ++i;
    return i;
}

std::vector<double> Histogram1D::centers() const {
    std::vector<double> c(counts.size());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.5 * (edges[i] + edges[i + 1]);
    return c;
}

std::vector<double> Histogram1D::density() const {
    std::vector<double> d(counts.size(), 0.0);
    if (total == 0) return d;
    for (std::size_t i = 0; i < d.size(); ++i)
        d[i] = static_cast<double>(counts[i]) / (static_cast<double>(total) * (edges[i + 1] - edges[i]));
    return d;
}

Histogram1D histogram_1d(std::span<const double> values, std::span<const double> edges) {
    Histogram1D h;
    h.edges.assign(edges.begin(), edges.end());
    h.counts.assign(edges.size() - 1, 0);
    for (double v : values) {
        const int b = bin_index(edges, v);
        if (b < 0) continue;
        ++h.counts[static_cast<std::size_t>(b)];
        ++h.total;
    }
    return h;
}

Histogram1D histogram_1d(std::span<const double> values, const Binning& binning) {
    return histogram_1d(values, edges_for(values, binning));
}

void RowMoments::add(double x1, double y) {
    ++n;
    sum_x1 += x1;
    sum_x1_sq += x1 * x1;
    double p = y;
    for (int k = 0; k < kMaxPower; ++k) {
        sum_pow[static_cast<std::size_t>(k)] += p;
        p *= y;
    }
}

void RowMoments::merge(const RowMoments& o) {
    n += o.n;
    sum_x1 += o.sum_x1;
    sum_x1_sq += o.sum_x1_sq;
    for (std::size_t k = 0; k < sum_pow.size(); ++k) sum_pow[k] += o.sum_pow[k];
}

ConditionalDensity::ConditionalDensity(std::vector<double> x1_edges, std::vector<double> x2_edges,
                                       double tau1, double tau2)
    : x1_edges_(std::move(x1_edges)), x2_edges_(std::move(x2_edges)), tau1_(tau1), tau2_(tau2) {
    if (x1_edges_.size() < 2 || x2_edges_.size() < 2)
        throw PreconditionError("ConditionalDensity: need at least one bin per axis");
    if (!(tau2_ > tau1_))
        throw PreconditionError("ConditionalDensity: tau2 must exceed tau1");
    counts_.assign(static_cast<std::size_t>(n1()) * static_cast<std::size_t>(n2()), 0);
    rows_.assign(static_cast<std::size_t>(n1()), RowMoments{});
}

std::uint64_t ConditionalDensity::row_total(int i) const {
    std::uint64_t t = 0;
    for (int j = 0; j < n2(); ++j) t += count(i, j);
    return t;
}

std::uint64_t ConditionalDensity::total() const {
    return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::vector<double> ConditionalDensity::x1_centers() const {
    std::vector<double> c(static_cast<std::size_t>(n1()));
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.5 * (x1_edges_[i] + x1_edges_[i + 1]);
    return c;
}

std::vector<double> ConditionalDensity::x2_centers() const {
    std::vector<double> c(static_cast<std::size_t>(n2()));
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.5 * (x2_edges_[i] + x2_edges_[i + 1]);
    return c;
}

void ConditionalDensity::add(double x1, double x2) {
    const int i = bin_index(x1_edges_, x1);
    if (i < 0) return;
    rows_[static_cast<std::size_t>(i)].add(x1, x2 - x1);
    const int j = bin_index(x2_edges_, x2);
    if (j >= 0) ++counts_[idx(i, j)];
}

void ConditionalDensity::merge(const ConditionalDensity& other) {
    if (other.x1_edges_ != x1_edges_ || other.x2_edges_ != x2_edges_)
        throw PreconditionError("ConditionalDensity::merge: binning mismatch");
    for (std::size_t k = 0; k < counts_.size(); ++k) counts_[k] += other.counts_[k];
    for (std::size_t k = 0; k < rows_.size(); ++k) rows_[k].merge(other.rows_[k]);
}

ConditionalDensity joint_histogram(std::span<const double> x1, std::span<const double> x2,
                                   std::vector<double> x1_edges, std::vector<double> x2_edges,
                                   double tau1, double tau2, std::uint64_t min_pairs) {
    if (x1.size() != x2.size()) throw PreconditionError("joint_histogram: unaligned samples");
    ConditionalDensity cd(std::move(x1_edges), std::move(x2_edges), tau1, tau2);
    kernels::omp::accumulate_joint(x1, x2, cd);
    if (cd.total() < min_pairs)
        throw InsufficientDataError("joint_histogram: " + std::to_string(cd.total()) +
                                    " pairs admitted, need " + std::to_string(min_pairs));
    return cd;
}

ConditionalDensity joint_histogram(std::span<const double> x1, std::span<const double> x2,
                                   double tau1, double tau2, const Binning& binning) {
    if (x1.size() != x2.size()) throw PreconditionError("joint_histogram: unaligned samples");
    if (x1.size() < std::max<std::uint64_t>(binning.min_pairs, 2))
        throw InsufficientDataError("joint_histogram: " + std::to_string(x1.size()) +
                                    " pairs, need " + std::to_string(binning.min_pairs));
    return joint_histogram(x1, x2, edges_for(x1, binning), edges_for(x2, binning), tau1, tau2,
                           binning.min_pairs);
}

ConditionalDensity joint_histogram(const ReturnSeries& coarse, const ReturnSeries& fine,
                                   const ScaleMap& map, const Binning& binning) {
    const double t1 = tau_of_lag(map, static_cast<double>(coarse.lag_dt));
    const double t2 = tau_of_lag(map, static_cast<double>(fine.lag_dt));
    const ReturnSeries both[] = {coarse, fine};
    const double taus[] = {t1, t2};
    const AlignedSample a = align_returns(both, taus);
    return joint_histogram(a.columns[0], a.columns[1], t1, t2, binning);
}

ConditionalKernel conditional_from_joint(const ConditionalDensity& cd) {
    ConditionalKernel k;
    k.n1 = cd.n1();
    k.n2 = cd.n2();
    k.prob.assign(static_cast<std::size_t>(k.n1) * static_cast<std::size_t>(k.n2), 0.0);
    k.empty.assign(static_cast<std::size_t>(k.n1), true);
    k.row_counts.assign(static_cast<std::size_t>(k.n1), 0);
    for (int i = 0; i < k.n1; ++i) {
        const std::uint64_t t = cd.row_total(i);
        k.row_counts[static_cast<std::size_t>(i)] = t;
        if (t == 0) continue;
        k.empty[static_cast<std::size_t>(i)] = false;
        const double inv = 1.0 / static_cast<double>(t);
        for (int j = 0; j < k.n2; ++j)
            k.prob[static_cast<std::size_t>(i) * static_cast<std::size_t>(k.n2) + static_cast<std::size_t>(j)] =
                static_cast<double>(cd.count(i, j)) * inv;
    }
    return k;
}

GTestResult g_test_independence(const ConditionalDensity& cd) {
    const int n1 = cd.n1(), n2 = cd.n2();
    std::vector<double> r(static_cast<std::size_t>(n1), 0.0), c(static_cast<std::size_t>(n2), 0.0);
    double total = 0.0;
    for (int i = 0; i < n1; ++i)
        for (int j = 0; j < n2; ++j) {
            const auto v = static_cast<double>(cd.count(i, j));
            r[static_cast<std::size_t>(i)] += v;
            c[static_cast<std::size_t>(j)] += v;
            total += v;
        }
    GTestResult res;
    if (total == 0.0) return res;
    int rows = 0, cols = 0;
    for (double v : r) rows += v > 0.0;
    for (double v : c) cols += v > 0.0;
    for (int i = 0; i < n1; ++i)
        for (int j = 0; j < n2; ++j) {
            const auto o = static_cast<double>(cd.count(i, j));
            if (o == 0.0) continue;
            const double e = r[static_cast<std::size_t>(i)] * c[static_cast<std::size_t>(j)] / total;
            res.g += 2.0 * o * std::log(o / e);
        }
    res.dof = std::max(1, (rows - 1) * (cols - 1));
    boost::math::chi_squared dist(res.dof);
    res.p_value = boost::math::cdf(boost::math::complement(dist, std::max(0.0, res.g)));
    return res;
}

double ck_distance(std::span<const double> x1, std::span<const double> x2,
                   std::span<const double> x3, const Binning& binning, std::uint64_t* admitted) {
    const auto e1 = edges_for(x1, binning);
    const auto e2 = edges_for(x2, binning);
    const auto e3 = edges_for(x3, binning);
    // any tau labels with tau2 > tau1 work; only counts are used here
    const ConditionalDensity c12 = joint_histogram(x1, x2, e1, e2, 0.0, 1.0, binning.min_pairs);
    const ConditionalDensity c23 = joint_histogram(x2, x3, e2, e3, 1.0, 2.0, binning.min_pairs);
    const ConditionalDensity c13 = joint_histogram(x1, x3, e1, e3, 0.0, 2.0, binning.min_pairs);
    const ConditionalKernel k12 = conditional_from_joint(c12);
    const ConditionalKernel k23 = conditional_from_joint(c23);
    const ConditionalKernel k13 = conditional_from_joint(c13);

    const int n1 = k13.n1, n2 = k12.n2, n3 = k13.n2;
    double weight = 0.0, dist = 0.0;
    std::vector<double> composed(static_cast<std::size_t>(n3));
    for (int i = 0; i < n1; ++i) {
        const auto w = static_cast<double>(k13.row_counts[static_cast<std::size_t>(i)]);
        if (w < static_cast<double>(binning.min_count)) continue;
        std::fill(composed.begin(), composed.end(), 0.0);
        for (int b = 0; b < n2; ++b) {
            const double pb = k12(i, b);
            if (pb == 0.0 || k23.empty[static_cast<std::size_t>(b)]) continue;
            for (int j = 0; j < n3; ++j) composed[static_cast<std::size_t>(j)] += pb * k23(b, j);
        }
        double l1 = 0.0;
        for (int j = 0; j < n3; ++j) l1 += std::abs(k13(i, j) - composed[static_cast<std::size_t>(j)]);
        dist += w * l1;
        weight += w;
    }
    if (admitted) *admitted = c13.total();
    if (weight == 0.0) throw InsufficientDataError("ck_distance: no populated rows");
    return dist / weight;
}

double serial_inflation(std::span<const double> x) {
    const std::size_t n = x.size();
    if (n < 100) return 1.0;
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    if (var <= 0.0) return 1.0;
    const auto len = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
    const std::size_t nb = n / len;
    double ms = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
        double s = 0.0;
        for (std::size_t i = b * len; i < (b + 1) * len; ++i) s += x[i] - mean;
        s /= static_cast<double>(len);
        ms += s * s;
    }
    return std::max(1.0, static_cast<double>(len) * ms / static_cast<double>(nb) / var);
}

CkTestReport chapman_kolmogorov_test(std::span<const double> x1, std::span<const double> x2,
                                     std::span<const double> x3, double tau1, double tau_mid,
                                     double tau2, const CkOptions& options) {
    if (!(tau1 < tau_mid && tau_mid < tau2))
        throw PreconditionError("chapman_kolmogorov_test: need tau1 < tau_mid < tau2");
    if (x1.size() != x2.size() || x2.size() != x3.size())
        throw PreconditionError("chapman_kolmogorov_test: unaligned samples");
    if (x1.size() < options.binning.min_pairs)
        throw InsufficientDataError("chapman_kolmogorov_test: " + std::to_string(x1.size()) +
                                    " triples, need " + std::to_string(options.binning.min_pairs));

    if (options.thin) {
        const double nu = std::max({serial_inflation(x1), serial_inflation(x2), serial_inflation(x3)});
        const auto stride = static_cast<std::size_t>(std::ceil(nu));
        if (stride > 1) {
            std::vector<double> a, b, c;
            for (std::size_t i = 0; i < x1.size(); i += stride) {
                a.push_back(x1[i]);
                b.push_back(x2[i]);
                c.push_back(x3[i]);
            }
            CkOptions inner = options;
            inner.thin = false;
            // the raw sample already met min_pairs
            inner.binning.min_pairs = 2;
            CkTestReport rep = chapman_kolmogorov_test(a, b, c, tau1, tau_mid, tau2, inner);
            rep.stride = stride;
            return rep;
        }
    }

    CkTestReport rep;
    rep.tau1 = tau1;
    rep.tau_mid = tau_mid;
    rep.tau2 = tau2;
    rep.fixed_threshold = options.fixed_threshold;
    rep.calibrated_threshold = std::numeric_limits<double>::quiet_NaN();
    rep.distance = ck_distance(x1, x2, x3, options.binning, &rep.effective_samples);

    if (options.threshold == CkOptions::Threshold::Bootstrap) {
        const std::size_t n = x1.size();
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x2[a] < x2[b]; });
        // neighbourhood in x2-rank; narrow compared to a bin at any realistic n
        const std::size_t w = std::max<std::size_t>(2, n / 4000);
        std::vector<double> surrogate(n);
        std::vector<double> null_dist;
        for (int b = 0; b < options.n_bootstrap; ++b) {
            std::mt19937_64 rng(kernels::path_seed(options.seed, static_cast<std::uint64_t>(b)));
            for (std::size_t r = 0; r < n; ++r) {
                const std::size_t lo = r > w ? r - w : 0;
                const std::size_t hi = std::min(n - 1, r + w);
                std::uniform_int_distribution<std::size_t> pick(lo, hi);
                surrogate[order[r]] = x3[order[pick(rng)]];
            }
            null_dist.push_back(ck_distance(x1, x2, surrogate, options.binning));
        }
        std::sort(null_dist.begin(), null_dist.end());
        const auto q = static_cast<std::size_t>(
            std::ceil(options.quantile * static_cast<double>(null_dist.size()))) ;
        rep.calibrated_threshold = null_dist[std::min(null_dist.size() - 1, q == 0 ? 0 : q - 1)];
        rep.threshold = rep.calibrated_threshold;
        rep.threshold_mode = "bootstrap";
    } else {
        rep.threshold = options.fixed_threshold;
        rep.threshold_mode = "fixed";
    }
    rep.passed = rep.distance <= rep.threshold;
    return rep;
}

CkTestReport chapman_kolmogorov_test(const PriceSeries& series, const SamplingSpec& sampling,
                                     double tau1, double tau_mid, double tau2,
                                     const CkOptions& options) {
    if (!(tau1 < tau_mid && tau_mid < tau2))
        throw PreconditionError("chapman_kolmogorov_test: need tau1 < tau_mid < tau2");
    const double taus[] = {tau1, tau_mid, tau2};
    const AlignedSample a = aligned_variables(series, sampling, taus);
    if (!(a.taus[0] < a.taus[1] && a.taus[1] < a.taus[2]))
        throw PreconditionError("chapman_kolmogorov_test: scales collapse after lag rounding");
    return chapman_kolmogorov_test(a.columns[0], a.columns[1], a.columns[2], a.taus[0], a.taus[1],
                                   a.taus[2], options);
}

void write_histogram_csv(const std::filesystem::path& path, const Histogram1D& h) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << "left_edge,right_edge,count,density\n";
    const auto d = h.density();
    for (std::size_t i = 0; i < h.counts.size(); ++i)
        f << format_real(h.edges[i]) << ',' << format_real(h.edges[i + 1]) << ',' << h.counts[i] << ','
          << format_real(d[i]) << '\n';
}

Histogram1D read_histogram_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open " + path.string());
    Histogram1D h;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#' || line.rfind("left_edge", 0) == 0) continue;
        double lo = 0.0, hi = 0.0;
        unsigned long long c = 0;
        if (std::sscanf(line.c_str(), "%lf,%lf,%llu", &lo, &hi, &c) != 3)
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": malformed histogram row");
        if (h.edges.empty()) h.edges.push_back(lo);
        else if (lo != h.edges.back())
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": bins are not contiguous");
        h.edges.push_back(hi);
        h.counts.push_back(c);
        h.total += c;
    }
    if (h.counts.empty()) throw InsufficientDataError(path.string() + ": empty histogram");
    return h;
}

void write_joint_csv(const std::filesystem::path& path, const ConditionalDensity& cd) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << "x1_left,x1_right,x2_left,x2_right,count\n";
    for (int i = 0; i < cd.n1(); ++i)
        for (int j = 0; j < cd.n2(); ++j) {
            if (cd.count(i, j) == 0) continue;
            f << format_real(cd.x1_edges()[static_cast<std::size_t>(i)]) << ','
              << format_real(cd.x1_edges()[static_cast<std::size_t>(i) + 1]) << ','
              << format_real(cd.x2_edges()[static_cast<std::size_t>(j)]) << ','
              << format_real(cd.x2_edges()[static_cast<std::size_t>(j) + 1]) << ',' << cd.count(i, j) << '\n';
        }
}

} // namespace kmfpe
