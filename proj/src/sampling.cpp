#include "kmfpe/sampling.hpp"

#include "kmfpe/error.hpp"

#include <algorithm>
#include <cmath>

namespace kmfpe {

SamplingMode parse_sampling_mode(const std::string& s) {
    if (s == "cascade") return SamplingMode::Cascade;
    if (s == "state") return SamplingMode::State;
    throw ConfigError("unknown sampling mode '" + s + "' (expected cascade|state)");
}

std::string to_string(SamplingMode m) {
    return m == SamplingMode::Cascade ? "cascade" : "state";
}

double reference_sigma(const PriceSeries& series, const SamplingSpec& spec) {
    if (spec.sigma_ref > 0.0) return spec.sigma_ref;
    if (spec.mode == SamplingMode::State) return 1.0;
    const Seconds lag = lag_for_tau(spec.scale_map, 0.0, series.sampling_interval());
    const ReturnSeries rs = compute_log_returns(series, lag, spec.returns);
    return sample_stddev(rs.returns);
}

AlignedSample align_returns(std::span<const ReturnSeries> series, std::span<const double> taus) {
    if (series.empty() || series.size() != taus.size())
        throw PreconditionError("align_returns: one tau per return series required");
    AlignedSample out;
    out.taus.assign(taus.begin(), taus.end());
    out.columns.resize(series.size());
    out.sigma_ref = series.front().sigma_ref;
    // k-way merge join on start time; every series is sorted by construction
    std::vector<std::size_t> pos(series.size(), 0);
    while (true) {
        Seconds t = 0;
        bool done = false;
        for (std::size_t s = 0; s < series.size(); ++s) {
            if (pos[s] >= series[s].start_times.size()) {
                done = true;
                break;
            }
            t = std::max(t, series[s].start_times[pos[s]]);
        }
        if (done) break;
        bool all = true;
        for (std::size_t s = 0; s < series.size(); ++s) {
            const auto& st = series[s].start_times;
            while (pos[s] < st.size() && st[pos[s]] < t) ++pos[s];
            if (pos[s] >= st.size() || st[pos[s]] != t) all = false;
        }
        if (!all) continue;
        for (std::size_t s = 0; s < series.size(); ++s) out.columns[s].push_back(series[s].returns[pos[s]++]);
    }
    return out;
}

AlignedSample aligned_variables(const PriceSeries& series, const SamplingSpec& spec,
                                std::span<const double> taus) {
    if (taus.empty()) throw PreconditionError("aligned_variables: no scales requested");
    if (spec.mode == SamplingMode::Cascade) {
        const double sigma = reference_sigma(series, spec);
        std::vector<ReturnSeries> rs;
        std::vector<double> realized;
        for (double tau : taus) {
            const Seconds lag = lag_for_tau(spec.scale_map, tau, series.sampling_interval());
            rs.push_back(normalize_returns(compute_log_returns(series, lag, spec.returns), sigma));
            realized.push_back(tau_of_lag(spec.scale_map, static_cast<double>(lag)));
        }
        AlignedSample out = align_returns(rs, realized);
        out.sigma_ref = sigma;
        return out;
    }

    if (!(spec.state_dtau_per_sample > 0.0))
        throw ConfigError("aligned_variables: state_dtau_per_sample must be > 0");
    const double tau0 = *std::min_element(taus.begin(), taus.end());
    std::vector<std::size_t> offs;
    AlignedSample out;
    for (double tau : taus) {
        const auto k = static_cast<std::size_t>(std::llround((tau - tau0) / spec.state_dtau_per_sample));
        offs.push_back(k);
        out.taus.push_back(tau0 + static_cast<double>(k) * spec.state_dtau_per_sample);
    }
    const std::size_t kmax = *std::max_element(offs.begin(), offs.end());
    const auto& ts = series.timestamps();
    const auto& vs = series.values();
    if (kmax >= series.size()) throw InsufficientDataError("aligned_variables: scale span exceeds series");
    const Seconds dt = series.sampling_interval();
    out.columns.resize(taus.size());
    const double sigma = spec.sigma_ref > 0.0 ? spec.sigma_ref : 1.0;
    out.sigma_ref = sigma;
    for (std::size_t i = 0; i + kmax < series.size(); ++i) {
        if (ts[i + kmax] - ts[i] != static_cast<Seconds>(kmax) * dt) continue;
        for (std::size_t c = 0; c < offs.size(); ++c)
            out.columns[c].push_back(std::log(vs[i + offs[c]]) / sigma);
    }
    return out;
}

} // namespace kmfpe
