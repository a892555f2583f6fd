#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace kmfpe {

/// Durations and instants are integer seconds. On intraday data a "day" is a
/// trading day of ScaleMap::minutes_per_day minutes.
using Seconds = std::int64_t;

/// Raw observations of a strictly positive quantity.
class PriceSeries {
public:
    PriceSeries(std::vector<Seconds> timestamps, std::vector<double> values,
                Seconds sampling_interval, std::string metadata = {});

    const std::vector<Seconds>& timestamps() const { return timestamps_; }
    const std::vector<double>& values() const { return values_; }
    Seconds sampling_interval() const { return sampling_interval_; }
    const std::string& metadata() const { return metadata_; }
    std::size_t size() const { return values_.size(); }

private:
    std::vector<Seconds> timestamps_;
    std::vector<double> values_;
    Seconds sampling_interval_;
    std::string metadata_;
};

/// Log-returns at one lag, keyed by the initial timestamp of each pair.
struct ReturnSeries {
    Seconds lag_dt = 0;
    std::vector<Seconds> start_times;
    std::vector<double> returns;
    double sigma_ref = 1.0;
    bool normalized = false;
};

/// Maps lags onto the logarithmic cascade scale tau = log2(dt0 / dt).
struct ScaleMap {
    /// Trading minutes per day recovered from the reference timescale ladder:
    /// tau(1 min) = 14.75 with dt0 = 32 days gives 2^14.75 / 32 minutes.
    static constexpr double kDefaultMinutesPerDay = 861.0779292198037;

    Seconds dt0 = 0;
    double minutes_per_day = kDefaultMinutesPerDay;

    /// dt0 = `days` trading days expressed in seconds.
    static ScaleMap from_days(double days, double minutes_per_day = kDefaultMinutesPerDay);

    Seconds seconds_per_day() const;
};

double tau_of_lag(const ScaleMap& map, double lag_dt);
double lag_of_tau(const ScaleMap& map, double tau);

/// Nearest positive multiple of `sampling_interval` to lag_of_tau(tau).
Seconds lag_for_tau(const ScaleMap& map, double tau, Seconds sampling_interval);

struct ReturnOptions {
    /// Pairs whose time span exceeds gap_factor * lag_dt straddle a data gap
    /// and are dropped.
    double gap_factor = 2.0;
};

/// returns[i] = ln v(t_i + lag) - ln v(t_i). Pairing is by sample offset
/// lag_dt / sampling_interval; the time span check implements the gap policy.
ReturnSeries compute_log_returns(const PriceSeries& series, Seconds lag_dt,
                                 const ReturnOptions& opts = {});

ReturnSeries normalize_returns(const ReturnSeries& rs, double sigma_ref);

/// Sample standard deviation (n - 1 denominator).
double sample_stddev(std::span<const double> xs);
double sample_mean(std::span<const double> xs);

/// Accepts `timestamp,value` rows, timestamps as ISO-8601 or integer epoch
/// seconds, optional header. Rejects malformed rows with their line number.
/// sampling_interval <= 0 means "infer from the smallest positive spacing".
PriceSeries read_price_csv(const std::filesystem::path& path, Seconds sampling_interval = 0);
PriceSeries parse_price_csv(const std::string& text, Seconds sampling_interval = 0,
                            const std::string& source = "<memory>");

/// Parses "2004-03-01T10:15:00Z" style instants (Z or +hh:mm offsets, optional
/// time part) into epoch seconds.
Seconds parse_iso8601(const std::string& s);

void write_returns_csv(const std::filesystem::path& path, const ReturnSeries& rs);
ReturnSeries read_returns_csv(const std::filesystem::path& path);

} // namespace kmfpe
