#include "kmfpe/series.hpp"

#include "kmfpe/error.hpp"
#include "kmfpe/numeric.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace kmfpe {

PriceSeries::PriceSeries(std::vector<Seconds> timestamps, std::vector<double> values,
                         Seconds sampling_interval, std::string metadata)
    : timestamps_(std::move(timestamps)),
      values_(std::move(values)),
      sampling_interval_(sampling_interval),
      metadata_(std::move(metadata)) {
    if (timestamps_.size() != values_.size())
        throw PreconditionError("PriceSeries: timestamps and values differ in length");
    if (sampling_interval_ <= 0)
        throw DomainError("PriceSeries: sampling_interval must be > 0");
    for (std::size_t i = 1; i < timestamps_.size(); ++i) {
        if (timestamps_[i] <= timestamps_[i - 1])
            throw PreconditionError("PriceSeries: timestamps not strictly increasing at index " +
                                    std::to_string(i));
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
        if (!(values_[i] > 0.0) || !std::isfinite(values_[i]))
            throw DomainError("PriceSeries: non-positive value at index " + std::to_string(i));
    }
}

ScaleMap ScaleMap::from_days(double days, double minutes_per_day) {
    if (!(days > 0.0) || !(minutes_per_day > 0.0))
        throw DomainError("ScaleMap: days and minutes_per_day must be > 0");
    ScaleMap m;
    m.minutes_per_day = minutes_per_day;
    m.dt0 = static_cast<Seconds>(std::llround(days * static_cast<double>(m.seconds_per_day())));
    return m;
}

Seconds ScaleMap::seconds_per_day() const {
    return static_cast<Seconds>(std::llround(minutes_per_day * 60.0));
}

double tau_of_lag(const ScaleMap& map, double lag_dt) {
    if (!(lag_dt > 0.0)) throw PreconditionError("tau_of_lag: lag must be > 0");
    if (map.dt0 <= 0) throw DomainError("tau_of_lag: dt0 must be > 0");
    return std::log2(static_cast<double>(map.dt0) / lag_dt);
}

double lag_of_tau(const ScaleMap& map, double tau) {
    if (map.dt0 <= 0) throw DomainError("lag_of_tau: dt0 must be > 0");
    return static_cast<double>(map.dt0) * std::exp2(-tau);
}

Seconds lag_for_tau(const ScaleMap& map, double tau, Seconds sampling_interval) {
    if (sampling_interval <= 0) throw DomainError("lag_for_tau: sampling_interval must be > 0");
    const double samples = lag_of_tau(map, tau) / static_cast<double>(sampling_interval);
    const auto k = std::max<Seconds>(1, static_cast<Seconds>(std::llround(samples)));
    return k * sampling_interval;
}

ReturnSeries compute_log_returns(const PriceSeries& series, Seconds lag_dt,
                                 const ReturnOptions& opts) {
    const Seconds dt = series.sampling_interval();
    if (lag_dt <= 0 || lag_dt % dt != 0)
        throw PreconditionError("compute_log_returns: lag must be a positive multiple of "
                                "the sampling interval");
    const auto k = static_cast<std::size_t>(lag_dt / dt);
    const auto& ts = series.timestamps();
    const auto& vs = series.values();
    if (series.size() < 2 || k >= series.size() || ts.back() - ts.front() < lag_dt)
        throw InsufficientDataError("compute_log_returns: lag exceeds series span");

    const double max_span = opts.gap_factor * static_cast<double>(lag_dt);
    ReturnSeries out;
    out.lag_dt = lag_dt;
    out.start_times.reserve(series.size() - k);
    out.returns.reserve(series.size() - k);
    for (std::size_t i = 0; i + k < series.size(); ++i) {
        if (static_cast<double>(ts[i + k] - ts[i]) > max_span) continue;
        out.start_times.push_back(ts[i]);
        out.returns.push_back(std::log(vs[i + k] / vs[i]));
    }
    if (out.returns.empty())
        throw InsufficientDataError("compute_log_returns: every pair straddles a data gap");
    return out;
}

ReturnSeries normalize_returns(const ReturnSeries& rs, double sigma_ref) {
    if (!(sigma_ref > 0.0) || !std::isfinite(sigma_ref))
        throw DomainError("normalize_returns: sigma_ref must be > 0");
    ReturnSeries out = rs;
    for (double& r : out.returns) r /= sigma_ref;
    out.sigma_ref = sigma_ref;
    out.normalized = true;
    return out;
}

double sample_mean(std::span<const double> xs) {
    if (xs.empty()) throw InsufficientDataError("sample_mean: empty sample");
    return chunked_sum(xs.size(), [&](std::size_t i) { return xs[i]; }) /
           static_cast<double>(xs.size());
}

double sample_stddev(std::span<const double> xs) {
    if (xs.size() < 2) throw InsufficientDataError("sample_stddev: need at least 2 samples");
    const double m = sample_mean(xs);
    const double ss = chunked_sum(xs.size(), [&](std::size_t i) {
        const double d = xs[i] - m;
        return d * d;
    });
    return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

namespace {

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

bool parse_int(std::string_view s, Seconds& out) {
    if (s.empty()) return false;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end == s.c_str() + s.size();
}

// Days since 1970-01-01 for a proleptic Gregorian date.
Seconds days_from_civil(Seconds y, unsigned m, unsigned d) {
    y -= m <= 2;
    const Seconds era = (y >= 0 ? y : y - 399) / 400;
    const auto yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<Seconds>(doe) - 719468;
}

} // namespace

Seconds parse_iso8601(const std::string& text) {
    const std::string s = trim(text);
    auto fail = [&]() -> Seconds { throw ConfigError("invalid ISO-8601 timestamp '" + s + "'"); };
    auto num = [&](std::size_t pos, std::size_t len) -> Seconds {
        if (pos + len > s.size()) fail();
        Seconds v = 0;
        if (!parse_int(std::string_view(s).substr(pos, len), v)) fail();
        return v;
    };
    if (s.size() < 10 || s[4] != '-' || s[7] != '-') fail();
    const Seconds year = num(0, 4);
    const Seconds month = num(5, 2);
    const Seconds day = num(8, 2);
    if (month < 1 || month > 12 || day < 1 || day > 31) fail();
    Seconds hh = 0, mm = 0, ss = 0, offset = 0;
    std::size_t pos = 10;
    if (pos < s.size() && (s[pos] == 'T' || s[pos] == ' ')) {
        hh = num(pos + 1, 2);
        if (pos + 3 >= s.size() || s[pos + 3] != ':') fail();
        mm = num(pos + 4, 2);
        pos += 6;
        if (pos < s.size() && s[pos] == ':') {
            ss = num(pos + 1, 2);
            pos += 3;
            // fractional seconds are truncated
            if (pos < s.size() && s[pos] == '.') {
                ++pos;
                while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
            }
        }
        if (hh > 23 || mm > 59 || ss > 60) fail();
    }
    if (pos < s.size()) {
        if (s[pos] == 'Z' && pos + 1 == s.size()) {
            pos = s.size();
        } else if ((s[pos] == '+' || s[pos] == '-') && pos + 6 == s.size() && s[pos + 3] == ':') {
            const Seconds oh = num(pos + 1, 2), om = num(pos + 4, 2);
            offset = (s[pos] == '+' ? 1 : -1) * (oh * 3600 + om * 60);
            pos = s.size();
        } else {
            fail();
        }
    }
    const Seconds days = days_from_civil(year, static_cast<unsigned>(month), static_cast<unsigned>(day));
    return days * 86400 + hh * 3600 + mm * 60 + ss - offset;
}

PriceSeries parse_price_csv(const std::string& text, Seconds sampling_interval,
                            const std::string& source) {
    std::vector<Seconds> ts;
    std::vector<double> vs;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    bool first_content = true;
    auto reject = [&](const std::string& why) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(in, line)) {
        ++lineno;
        const std::string row = trim(line);
        if (row.empty() || row[0] == '#') continue;
        const auto comma = row.find(',');
        if (comma == std::string::npos || row.find(',', comma + 1) != std::string::npos)
            reject("expected two columns 'timestamp,value'");
        const std::string tcol = trim(std::string_view(row).substr(0, comma));
        const std::string vcol = trim(std::string_view(row).substr(comma + 1));
        Seconds t = 0;
        double v = 0.0;
        bool t_ok = parse_int(tcol, t);
        if (!t_ok) {
            try {
                t = parse_iso8601(tcol);
                t_ok = true;
            } catch (const ConfigError&) {
            }
        }
        const bool v_ok = parse_double(vcol, v);
        if (first_content && !t_ok && !v_ok) {
            first_content = false; // header row
            continue;
        }
        first_content = false;
        if (!t_ok) reject("malformed timestamp '" + tcol + "'");
        if (!v_ok || !std::isfinite(v)) reject("malformed value '" + vcol + "'");
        if (!(v > 0.0)) reject("non-positive value " + vcol);
        if (!ts.empty() && t <= ts.back()) reject("timestamp not strictly increasing");
        ts.push_back(t);
        vs.push_back(v);
    }
    if (ts.size() < 2) throw InsufficientDataError(source + ": fewer than 2 samples");
    if (sampling_interval <= 0) {
        Seconds best = 0;
        for (std::size_t i = 1; i < ts.size(); ++i) {
            const Seconds d = ts[i] - ts[i - 1];
            if (best == 0 || d < best) best = d;
        }
        sampling_interval = best;
    }
    return PriceSeries(std::move(ts), std::move(vs), sampling_interval, source);
}

PriceSeries read_price_csv(const std::filesystem::path& path, Seconds sampling_interval) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open " + path.string());
    std::stringstream buf;
    buf << f.rdbuf();
    return parse_price_csv(buf.str(), sampling_interval, path.string());
}

void write_returns_csv(const std::filesystem::path& path, const ReturnSeries& rs) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << "# lag_dt=" << rs.lag_dt << " sigma_ref=" << format_real(rs.sigma_ref)
      << " normalized=" << (rs.normalized ? 1 : 0) << "\n";
    f << "start_time,return\n";
    for (std::size_t i = 0; i < rs.returns.size(); ++i)
        f << rs.start_times[i] << ',' << format_real(rs.returns[i]) << '\n';
}

ReturnSeries read_returns_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open " + path.string());
    ReturnSeries rs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream meta(line.substr(1));
            std::string kv;
            while (meta >> kv) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) continue;
                const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
                if (key == "lag_dt") rs.lag_dt = std::stoll(val);
                else if (key == "sigma_ref") rs.sigma_ref = std::stod(val);
                else if (key == "normalized") rs.normalized = val == "1";
            }
            continue;
        }
        if (line.rfind("start_time", 0) == 0) continue;
        const auto comma = line.find(',');
        Seconds t = 0;
        double r = 0.0;
        if (comma == std::string::npos || !parse_int(std::string_view(line).substr(0, comma), t) ||
            !parse_double(line.substr(comma + 1), r))
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
        rs.start_times.push_back(t);
        rs.returns.push_back(r);
    }
    return rs;
}

} // namespace kmfpe
