#include "kmfpe/pipeline.hpp"

#include "kmfpe/error.hpp"
#include "kmfpe/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace kmfpe {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- estimation core ---------------------------------------------------------

DtauCurves estimate_dtau(std::span<const double> x1, std::span<const double> x2, double tau1, double tau2,
                         double dtau_nominal, const EstimateOptions& opts) {
    DtauCurves out;
    out.dtau = dtau_nominal;
    out.tau1 = tau1;
    out.tau2 = tau2;
    const ConditionalDensity cd = joint_histogram(x1, x2, tau1, tau2, opts.binning);
    out.pairs = cd.total();
    if (opts.serial_correction) {
        out.inflation = {serial_inflation(x1, x2, cd, 1), serial_inflation(x1, x2, cd, 2),
                         serial_inflation(x1, x2, cd, 4)};
    }
    out.d1 = conditional_moment(cd, 1, opts.km, out.inflation[0]);
    out.d2 = conditional_moment(cd, 2, opts.km, out.inflation[1]);
    out.d4 = conditional_moment(cd, 4, opts.km, out.inflation[2]);
    const FitRange range = default_fit_range(out.d1, opts.km.fit_min_neff);
    out.fits.dtau = cd.dtau();
    out.fits.drift = fit_drift(out.d1, range, opts.km.min_count);
    out.fits.diffusion = fit_diffusion(out.d2, range, opts.km.min_count);
    out.quartic = fit_quartic(out.d4, range, opts.km.min_count);
    return out;
}

ScaleEstimate estimate_scale(const Sampler& sample_at, double tau, const EstimateOptions& opts) {
    ScaleEstimate est;
    est.tau = tau;
    for (double dtau : opts.dtau_grid) {
        try {
            const AlignedSample s = sample_at(tau, tau + dtau);
            est.per_dtau.push_back(estimate_dtau(s.columns[0], s.columns[1], s.taus[0], s.taus[1], dtau, opts));
        } catch (const InsufficientDataError& e) {
            est.skipped.push_back("dtau=" + format_real(dtau) + ": " + e.what());
        } catch (const FitError& e) {
            est.skipped.push_back("dtau=" + format_real(dtau) + ": " + e.what());
        }
    }
    if (est.per_dtau.size() < 3) {
        std::ostringstream msg;
        msg << "tau=" << tau << ": only " << est.per_dtau.size() << " usable dtau values (need 3)";
        for (const auto& s : est.skipped) msg << "; " << s;
        throw InsufficientDataError(msg.str());
    }
    std::sort(est.per_dtau.begin(), est.per_dtau.end(),
              [](const DtauCurves& a, const DtauCurves& b) { return a.fits.dtau < b.fits.dtau; });
    std::vector<DtauFits> fits;
    std::vector<DtauQuartic> quartics;
    for (const auto& d : est.per_dtau) {
        fits.push_back(d.fits);
        quartics.push_back({d.fits.dtau, d.quartic});
    }
    est.limit = extrapolate_dtau(fits, tau);
    // compare D4 with D2 where the finest-dtau fit had data
    est.pawula = pawula_check(quartics, est.limit, est.per_dtau.front().fits.drift.fit_range, opts.pawula);
    return est;
}

// ---- configuration -------------------------------------------------------------

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (k == a) ok = true;
        if (!ok) throw ConfigError(where + ": unknown key '" + k + "'");
    }
}

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

std::vector<double> number_list(const json& j, const char* key, std::vector<double> fallback,
                                const std::string& where) {
    return get_or<std::vector<double>>(j, key, std::move(fallback), where);
}

fs::path resolve(const fs::path& base, const fs::path& p) { return p.is_absolute() ? p : base / p; }

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) { return kernels::path_seed(seed, stream); }

} // namespace

std::string config_hash(const json& doc) {
    json copy = doc;
    if (copy.is_object()) copy.erase("output_dir");
    const std::string s = copy.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

RunConfig parse_run_config(const json& doc, const fs::path& base_dir) {
    check_keys(doc,
               {"inputs", "sampling", "taus", "estimate", "binning", "ck", "model_fit", "solver", "solve", "fit",
                "fit_tails", "simulate", "output_dir", "seed"},
               "config");
    RunConfig c;
    c.document = doc;
    c.hash = config_hash(doc);
    c.seed = get_or<std::uint64_t>(doc, "seed", 1, "config");
    c.output_dir = resolve(base_dir, get_or<std::string>(doc, "output_dir", "out", "config"));
    for (const auto& p : get_or<std::vector<std::string>>(doc, "inputs", {}, "config"))
        c.inputs.push_back(resolve(base_dir, p));
    c.taus = number_list(doc, "taus", {}, "config");

    if (doc.contains("sampling")) {
        const json& s = doc["sampling"];
        const std::string w = "sampling";
        check_keys(s,
                   {"mode", "dt0_days", "minutes_per_day", "sampling_interval", "gap_factor", "sigma_ref",
                    "state_dtau_per_sample"},
                   w);
        try {
            c.sampling.mode = parse_sampling_mode(get_or<std::string>(s, "mode", "cascade", w));
        } catch (const std::exception& e) {
            throw ConfigError(w + ".mode: " + e.what());
        }
        const double mpd = get_or<double>(s, "minutes_per_day", ScaleMap::kDefaultMinutesPerDay, w);
        c.sampling.scale_map = ScaleMap::from_days(get_or<double>(s, "dt0_days", 32.0, w), mpd);
        c.sampling.returns.gap_factor = get_or<double>(s, "gap_factor", c.sampling.returns.gap_factor, w);
        c.sampling.sigma_ref = get_or<double>(s, "sigma_ref", 0.0, w);
        c.sampling.state_dtau_per_sample = get_or<double>(s, "state_dtau_per_sample", 0.01, w);
        c.sampling_interval = get_or<Seconds>(s, "sampling_interval", 0, w);
    }

    if (doc.contains("estimate")) {
        const json& e = doc["estimate"];
        const std::string w = "estimate";
        check_keys(e, {"dtau_grid", "moment_source", "min_count", "fit_min_neff"}, w);
        c.estimate.dtau_grid = number_list(e, "dtau_grid", c.estimate.dtau_grid, w);
        const std::string src = get_or<std::string>(e, "moment_source", "row_sums", w);
        if (src == "row_sums") c.estimate.km.source = MomentSource::RowSums;
        else if (src == "bin_centers") c.estimate.km.source = MomentSource::BinCenters;
        else throw ConfigError(w + ".moment_source: expected row_sums or bin_centers");
        c.estimate.km.min_count = get_or<std::uint64_t>(e, "min_count", 5, w);
        c.estimate.km.fit_min_neff = get_or<std::uint64_t>(e, "fit_min_neff", 50, w);
    }
    for (double d : c.estimate.dtau_grid)
        if (!(d > 0.0)) throw ConfigError("estimate.dtau_grid: entries must be > 0");

    if (doc.contains("binning")) {
        const json& b = doc["binning"];
        const std::string w = "binning";
        check_keys(b, {"n_bins", "half_width_sigmas", "min_count", "min_pairs"}, w);
        c.estimate.binning.n_bins = get_or<int>(b, "n_bins", 41, w);
        c.estimate.binning.half_width_sigmas = get_or<double>(b, "half_width_sigmas", 8.0, w);
        c.estimate.binning.min_count = get_or<std::uint64_t>(b, "min_count", 5, w);
        c.estimate.binning.min_pairs = get_or<std::uint64_t>(b, "min_pairs", 10000, w);
        if (c.estimate.binning.n_bins < 2 || !(c.estimate.binning.half_width_sigmas > 0.0))
            throw ConfigError("binning: need n_bins >= 2 and half_width_sigmas > 0");
    }
    c.ck.binning = c.estimate.binning;
    c.ck.seed = stream_seed(c.seed, 1);

    if (doc.contains("ck")) {
        const json& k = doc["ck"];
        const std::string w = "ck";
        check_keys(k, {"triples", "threshold", "fixed_threshold", "n_bootstrap", "quantile"}, w);
        for (const auto& t : get_or<std::vector<std::vector<double>>>(k, "triples", {}, w)) {
            if (t.size() != 3 || !(t[0] < t[1] && t[1] < t[2]))
                throw ConfigError("ck.triples: each triple must be increasing [tau1, tau_mid, tau2]");
            c.ck_triples.push_back({t[0], t[1], t[2]});
        }
        const std::string mode = get_or<std::string>(k, "threshold", "bootstrap", w);
        if (mode == "bootstrap") c.ck.threshold = CkOptions::Threshold::Bootstrap;
        else if (mode == "fixed") c.ck.threshold = CkOptions::Threshold::Fixed;
        else throw ConfigError("ck.threshold: expected bootstrap or fixed");
        c.ck.fixed_threshold = get_or<double>(k, "fixed_threshold", 0.05, w);
        c.ck.n_bootstrap = get_or<int>(k, "n_bootstrap", 100, w);
        c.ck.quantile = get_or<double>(k, "quantile", 0.95, w);
    }

    if (doc.contains("model_fit")) {
        const json& m = doc["model_fit"];
        check_keys(m, {"significance_n_se", "max_iterations"}, "model_fit");
        c.model_fit.significance_n_se = get_or<double>(m, "significance_n_se", 2.0, "model_fit");
        c.model_fit.max_iterations = get_or<int>(m, "max_iterations", 200, "model_fit");
    }

    if (doc.contains("solver")) {
        const json& s = doc["solver"];
        const std::string w = "solver";
        check_keys(s,
                   {"L", "n_points", "dtau_max", "stability_safety", "boundary", "renormalize_every", "comoving",
                    "max_clipped_mass_rate"},
                   w);
        c.solver.L = get_or<double>(s, "L", 40.0, w);
        c.solver.n_points = get_or<int>(s, "n_points", 4001, w);
        c.solver.dtau_max = get_or<double>(s, "dtau_max", 1e-2, w);
        c.solver.stability_safety = get_or<double>(s, "stability_safety", 0.4, w);
        const std::string b = get_or<std::string>(s, "boundary", "zero_flux", w);
        if (b == "zero_flux") c.solver.boundary = Boundary::ZeroFlux;
        else if (b == "absorbing") c.solver.boundary = Boundary::Absorbing;
        else throw ConfigError("solver.boundary: expected zero_flux or absorbing");
        c.solver.renormalize_every = get_or<int>(s, "renormalize_every", 0, w);
        c.solver.comoving = get_or<bool>(s, "comoving", false, w);
        c.solver.max_clipped_mass_rate = get_or<double>(s, "max_clipped_mass_rate", 1e-4, w);
        if (!(c.solver.stability_safety > 0.0 && c.solver.stability_safety < 1.0))
            throw ConfigError("solver.stability_safety must lie in (0, 1)");
        if (!(c.solver.dtau_max > 0.0)) throw ConfigError("solver.dtau_max must be > 0");
    }

    if (doc.contains("solve")) {
        const json& s = doc["solve"];
        const std::string w = "solve";
        check_keys(s, {"tau_start", "tau_end", "initial_sigma", "checkpoints", "model"}, w);
        c.solve.tau_start = get_or<double>(s, "tau_start", 0.0, w);
        c.solve.tau_end = get_or<double>(s, "tau_end", 1.0, w);
        c.solve.initial_sigma = get_or<double>(s, "initial_sigma", 0.0, w);
        c.solve.checkpoints = number_list(s, "checkpoints", {}, w);
        if (s.contains("model")) c.solve.model_path = resolve(base_dir, get_or<std::string>(s, "model", "", w));
        if (c.solve.tau_end < c.solve.tau_start) throw ConfigError("solve: tau_end must be >= tau_start");
    }

    c.fit.seed = stream_seed(c.seed, 2);
    if (doc.contains("fit")) {
        const json& f = doc["fit"];
        const std::string w = "fit";
        check_keys(f, {"space", "fixed_center", "known_b2", "min_points", "n_bootstrap", "grid_floor"}, w);
        const std::string sp = get_or<std::string>(f, "space", "log", w);
        if (sp == "log") c.fit.space = FitSpace::Log;
        else if (sp == "linear") c.fit.space = FitSpace::Linear;
        else throw ConfigError("fit.space: expected log or linear");
        if (f.contains("fixed_center")) {
            if (f["fixed_center"].is_null()) c.fit.fixed_center.reset();
            else c.fit.fixed_center = get_or<double>(f, "fixed_center", 0.0, w);
        }
        c.fit.known_b2 = get_or<double>(f, "known_b2", 0.0, w);
        c.fit.min_points = get_or<int>(f, "min_points", 15, w);
        c.fit.n_bootstrap = get_or<int>(f, "n_bootstrap", 200, w);
        c.fit.grid_floor = get_or<double>(f, "grid_floor", 1e-10, w);
    }

    if (doc.contains("fit_tails")) {
        const json& f = doc["fit_tails"];
        const std::string w = "fit_tails";
        check_keys(f, {"source", "histograms"}, w);
        const std::string src = get_or<std::string>(f, "source", "snapshots", w);
        if (src == "snapshots") c.fit_tails.source = FitTailsSpec::Source::Snapshots;
        else if (src == "returns") c.fit_tails.source = FitTailsSpec::Source::Returns;
        else if (src == "histograms") c.fit_tails.source = FitTailsSpec::Source::Histograms;
        else throw ConfigError("fit_tails.source: expected snapshots, returns or histograms");
        if (f.contains("histograms")) {
            if (!f["histograms"].is_array()) throw ConfigError("fit_tails.histograms: expected an array");
            for (const auto& h : f["histograms"]) {
                check_keys(h, {"tau", "path"}, "fit_tails.histograms[]");
                c.fit_tails.histograms.push_back(
                    {get_or<double>(h, "tau", 0.0, w), resolve(base_dir, get_or<std::string>(h, "path", "", w))});
            }
        }
    }

    c.simulate.sim.seed = stream_seed(c.seed, 3);
    if (doc.contains("simulate")) {
        const json& s = doc["simulate"];
        const std::string w = "simulate";
        check_keys(s,
                   {"a1", "a0", "b0", "b1", "b2", "model", "tau0", "dtau_sim", "n_paths", "n_steps",
                    "record_every", "initial", "barrier_sigmas", "value", "output"},
                   w);
        auto& sim = c.simulate.sim;
        sim.constants.a1 = get_or<double>(s, "a1", sim.constants.a1, w);
        sim.constants.a0 = get_or<double>(s, "a0", sim.constants.a0, w);
        sim.constants.b0 = get_or<double>(s, "b0", sim.constants.b0, w);
        sim.constants.b1 = get_or<double>(s, "b1", sim.constants.b1, w);
        sim.constants.b2 = get_or<double>(s, "b2", sim.constants.b2, w);
        if (s.contains("model")) c.simulate.model_path = resolve(base_dir, get_or<std::string>(s, "model", "", w));
        sim.tau0 = get_or<double>(s, "tau0", 0.0, w);
        sim.dtau_sim = get_or<double>(s, "dtau_sim", 0.01, w);
        sim.n_paths = get_or<std::size_t>(s, "n_paths", 1, w);
        sim.n_steps = get_or<std::size_t>(s, "n_steps", 1000, w);
        sim.record_every = get_or<std::size_t>(s, "record_every", 1, w);
        sim.barrier_sigmas = get_or<double>(s, "barrier_sigmas", 100.0, w);
        if (s.contains("initial")) {
            const json& i = s["initial"];
            check_keys(i, {"kind", "x0", "sigma0"}, "simulate.initial");
            const std::string kind = get_or<std::string>(i, "kind", "delta", w);
            if (kind == "delta") sim.initial.kind = InitialKind::Delta;
            else if (kind == "gaussian") sim.initial.kind = InitialKind::Gaussian;
            else throw ConfigError("simulate.initial.kind: expected delta or gaussian");
            sim.initial.x0 = get_or<double>(i, "x0", 0.0, w);
            sim.initial.sigma0 = get_or<double>(i, "sigma0", 1.0, w);
        }
        const std::string v = get_or<std::string>(s, "value", "exp", w);
        if (v == "exp") c.simulate.value = EnsembleValue::ExpState;
        else if (v == "state") c.simulate.value = EnsembleValue::State;
        else throw ConfigError("simulate.value: expected exp or state");
        c.simulate.output = get_or<std::string>(s, "output", "simulated.csv", w);
        if (!(sim.dtau_sim > 0.0)) throw ConfigError("simulate.dtau_sim must be > 0");
    }
    return c;
}

RunConfig load_run_config(const fs::path& path, std::optional<std::uint64_t> seed_override,
                          std::optional<fs::path> out_override) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path.string());
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    if (seed_override) doc["seed"] = *seed_override;
    fs::path base = path.parent_path();
    if (base.empty()) base = ".";
    RunConfig c = parse_run_config(doc, base);
    if (out_override) c.output_dir = *out_override;
    return c;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const InsufficientDataError*>(&e)) return 3;
    if (dynamic_cast<const NumericalError*>(&e) || dynamic_cast<const FitError*>(&e)) return 4;
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const PreconditionError*>(&e) ||
        dynamic_cast<const DomainError*>(&e))
        return 2;
    return 1;
}

// ---- stages --------------------------------------------------------------------

namespace {

json num(double v) {
    if (std::isnan(v)) return nullptr;
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << j.dump(2) << '\n';
}

json read_json(const fs::path& path, const std::string& hint) {
    std::ifstream f(path);
    if (!f) throw PreconditionError("missing " + path.string() + " (" + hint + ")");
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

/// Prefixes a CSV with its config hash comment.
void stamp_csv(const fs::path& path, const std::string& hash) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream body;
    body << in.rdbuf();
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "# config_hash=" << hash << '\n' << body.rdbuf();
}

std::string tau_label(double tau) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", tau);
    return buf;
}

/// Creates the output directory and pins it to this config.
fs::path prepare_output(const RunConfig& cfg) {
    fs::create_directories(cfg.output_dir);
    const fs::path stored = cfg.output_dir / "config.json";
    if (fs::exists(stored)) {
        const json prev = read_json(stored, "config copy");
        const std::string h = config_hash(prev);
        if (h != cfg.hash)
            throw ConfigError("output directory " + cfg.output_dir.string() + " holds artifacts of config " + h +
                              ", this run is " + cfg.hash);
    } else {
        write_json(stored, cfg.document);
    }
    return cfg.output_dir;
}

void write_manifest(const RunConfig& cfg, const std::string& stage, const std::vector<std::string>& files,
                    json extra = json::object()) {
    extra["config_hash"] = cfg.hash;
    extra["stage"] = stage;
    extra["files"] = files;
    write_json(cfg.output_dir / (stage + ".manifest.json"), extra);
}

json read_manifest(const RunConfig& cfg, const std::string& stage) {
    json m = read_json(cfg.output_dir / (stage + ".manifest.json"), "run '" + stage + "' first");
    if (m.value("config_hash", "") != cfg.hash)
        throw ConfigError(stage + ".manifest.json was produced by a different config");
    return m;
}

PriceSeries load_inputs(const RunConfig& cfg) {
    if (cfg.inputs.empty()) throw ConfigError("config.inputs is empty");
    std::vector<Seconds> ts;
    std::vector<double> vs;
    Seconds interval = cfg.sampling_interval;
    for (const auto& p : cfg.inputs) {
        const PriceSeries s = read_price_csv(p, cfg.sampling_interval);
        if (!ts.empty() && s.timestamps().front() <= ts.back())
            throw ConfigError(p.string() + ": timestamps overlap the previous input file");
        ts.insert(ts.end(), s.timestamps().begin(), s.timestamps().end());
        vs.insert(vs.end(), s.values().begin(), s.values().end());
        if (cfg.sampling_interval <= 0) interval = interval == 0 ? s.sampling_interval()
                                                                : std::min(interval, s.sampling_interval());
    }
    return PriceSeries(std::move(ts), std::move(vs), interval, cfg.inputs.front().string());
}

std::string lag_file(Seconds lag) { return "returns/lag_" + std::to_string(lag) + ".csv"; }

/// Scales every cascade stage may request.
std::set<double> requested_taus(const RunConfig& cfg) {
    std::set<double> out;
    for (double t : cfg.taus) {
        out.insert(t);
        for (double d : cfg.estimate.dtau_grid) out.insert(t + d);
    }
    for (const auto& t : cfg.ck_triples) out.insert(t.begin(), t.end());
    if (cfg.solve.checkpoints.empty() == false)
        for (double t : cfg.solve.checkpoints) out.insert(t);
    return out;
}

/// Stage input built from ingest artifacts only.
class DataSource {
public:
    explicit DataSource(const RunConfig& cfg) : cfg_(cfg) {
        const json m = read_manifest(cfg, "ingest");
        interval_ = m.at("sampling_interval").get<Seconds>();
        if (cfg.sampling.mode == SamplingMode::State)
            series_.emplace(read_price_csv(cfg.output_dir / "series.csv", interval_));
    }

    Seconds interval() const { return interval_; }

    AlignedSample at(std::span<const double> taus) {
        if (series_) return aligned_variables(*series_, cfg_.sampling, taus);
        std::vector<ReturnSeries> rs;
        std::vector<double> realized;
        for (double tau : taus) {
            const Seconds lag = lag_for_tau(cfg_.sampling.scale_map, tau, interval_);
            rs.push_back(returns(lag));
            realized.push_back(tau_of_lag(cfg_.sampling.scale_map, static_cast<double>(lag)));
        }
        return align_returns(rs, realized);
    }

    /// Normalized returns at tau (cascade only); nullopt when not ingested.
    std::optional<ReturnSeries> returns_at(double tau) {
        if (series_) return std::nullopt;
        const Seconds lag = lag_for_tau(cfg_.sampling.scale_map, tau, interval_);
        if (!fs::exists(cfg_.output_dir / lag_file(lag))) return std::nullopt;
        return returns(lag);
    }

private:
    const ReturnSeries& returns(Seconds lag) {
        auto it = cache_.find(lag);
        if (it != cache_.end()) return it->second;
        const fs::path p = cfg_.output_dir / lag_file(lag);
        if (!fs::exists(p))
            throw InsufficientDataError("no returns ingested for lag " + std::to_string(lag) + " s (" +
                                        p.string() + ")");
        return cache_.emplace(lag, read_returns_csv(p)).first->second;
    }

    const RunConfig& cfg_;
    Seconds interval_ = 0;
    std::optional<PriceSeries> series_;
    std::map<Seconds, ReturnSeries> cache_;
};

json extrapolation_json(const Extrapolation& e) {
    json j = {{"limit", num(e.limit)},         {"limit_se", num(e.limit_se)}, {"slope", num(e.slope)},
              {"slope_se", num(e.slope_se)},   {"chi2_per_dof", num(e.chi2_per_dof)},
              {"n_points", e.n_points}};
    if (e.quadratic_reported) {
        j["quadratic_limit"] = num(e.quadratic_limit);
        j["quadratic_limit_se"] = num(e.quadratic_limit_se);
    }
    return j;
}

json scale_json(const ScaleEstimate& est) {
    json limit = {{"tau", est.tau}, {"valid", est.limit.valid}, {"n_dtau", est.limit.n_dtau}};
    if (!est.limit.note.empty()) limit["note"] = est.limit.note;
    const std::array<double, 5> vals{est.limit.a1, est.limit.a0, est.limit.b2, est.limit.b1, est.limit.b0};
    for (std::size_t k = 0; k < 5; ++k) {
        limit[KmLimit::kNames[k]] = num(vals[k]);
        limit["extrapolation"][KmLimit::kNames[k]] = extrapolation_json(est.limit.diagnostics[k]);
    }
    json per = json::array();
    for (const auto& d : est.per_dtau) {
        const auto& dr = d.fits.drift;
        const auto& df = d.fits.diffusion;
        json q = json::array();
        for (std::size_t k = 0; k < 5; ++k) q.push_back({num(d.quartic.coeffs[k]), num(d.quartic.std_errors[k])});
        per.push_back({{"dtau_nominal", d.dtau},
                       {"dtau", d.fits.dtau},
                       {"tau1", d.tau1},
                       {"tau2", d.tau2},
                       {"pairs", d.pairs},
                       {"fit_range", {dr.fit_range.lo, dr.fit_range.hi}},
                       {"drift", {{"a1", num(dr.a1_tilde)}, {"a1_se", num(dr.a1_se())},
                                  {"a0", num(dr.a0_tilde)}, {"a0_se", num(dr.a0_se())},
                                  {"chi2_per_dof", num(dr.chi2_per_dof)}, {"n_points", dr.n_points}}},
                       {"diffusion", {{"b2", num(df.b2_tilde)}, {"b2_se", num(df.se(0))},
                                      {"b1", num(df.b1_tilde)}, {"b1_se", num(df.se(1))},
                                      {"b0", num(df.b0_tilde)}, {"b0_se", num(df.se(2))},
                                      {"chi2_per_dof", num(df.chi2_per_dof)}, {"n_points", df.n_points},
                                      {"valid", df.valid}}},
                       {"quartic", q}});
    }
    const PawulaReport& pw = est.pawula;
    json pc = json::array();
    for (const auto& e : pw.coeffs) pc.push_back(extrapolation_json(e));
    json pawula = {{"passed", pw.passed},
                   {"coeffs_within_bound", pw.coeffs_within_bound},
                   {"n_se", pw.n_se},
                   {"max_abs_d4", num(pw.max_abs_d4)},
                   {"max_abs_d2", num(pw.max_abs_d2)},
                   {"ratio", num(pw.ratio)},
                   {"ratio_limit", pw.ratio_limit},
                   {"range", {pw.range.lo, pw.range.hi}},
                   {"dtau_degree", pw.dtau_degree},
                   {"coefficients", pc}};
    return {{"tau", est.tau}, {"limit", limit}, {"per_dtau", per}, {"pawula", pawula}, {"skipped", est.skipped}};
}

CoefficientModel load_model(const fs::path& path) {
    return model_from_json(read_json(path, "run 'estimate' first or set solve.model"));
}

double interpolate(const PdfGrid& g, double x) {
    const double y = x / g.scale;
    const double pos = (y + g.half_width()) / g.spacing();
    if (pos < 0.0 || pos > g.size() - 1) return 0.0;
    const int i = std::min(static_cast<int>(pos), g.size() - 2);
    const double t = pos - i;
    return (1.0 - t) * g.physical_density(i) + t * g.physical_density(i + 1);
}

} // namespace

void cmd_ingest(const RunConfig& cfg) {
    prepare_output(cfg);
    const PriceSeries series = load_inputs(cfg);
    std::vector<std::string> files;
    {
        std::ofstream f(cfg.output_dir / "series.csv");
        f << "timestamp,value\n";
        for (std::size_t i = 0; i < series.size(); ++i)
            f << series.timestamps()[i] << ',' << format_real(series.values()[i]) << '\n';
    }
    stamp_csv(cfg.output_dir / "series.csv", cfg.hash);
    files.push_back("series.csv");

    json lags = json::array();
    double sigma = 1.0;
    if (cfg.sampling.mode == SamplingMode::Cascade) {
        sigma = reference_sigma(series, cfg.sampling);
        fs::create_directories(cfg.output_dir / "returns");
        std::set<Seconds> done;
        for (double tau : requested_taus(cfg)) {
            const Seconds lag = lag_for_tau(cfg.sampling.scale_map, tau, series.sampling_interval());
            if (!done.insert(lag).second) continue;
            ReturnSeries rs;
            try {
                rs = normalize_returns(compute_log_returns(series, lag, cfg.sampling.returns), sigma);
            } catch (const InsufficientDataError& e) {
                lags.push_back({{"lag", lag}, {"skipped", e.what()}});
                continue;
            }
            write_returns_csv(cfg.output_dir / lag_file(lag), rs);
            stamp_csv(cfg.output_dir / lag_file(lag), cfg.hash);
            files.push_back(lag_file(lag));
            lags.push_back({{"lag", lag},
                            {"tau", tau_of_lag(cfg.sampling.scale_map, static_cast<double>(lag))},
                            {"returns", rs.returns.size()},
                            {"file", lag_file(lag)}});
        }
    } else if (cfg.sampling.sigma_ref > 0.0) {
        sigma = cfg.sampling.sigma_ref;
    }
    write_manifest(cfg, "ingest", files,
                   {{"mode", to_string(cfg.sampling.mode)},
                    {"samples", series.size()},
                    {"sampling_interval", series.sampling_interval()},
                    {"sigma_ref", sigma},
                    {"dt0", cfg.sampling.scale_map.dt0},
                    {"minutes_per_day", cfg.sampling.scale_map.minutes_per_day},
                    {"lags", lags}});
}

void cmd_ck_test(const RunConfig& cfg) {
    prepare_output(cfg);
    if (cfg.ck_triples.empty()) throw ConfigError("ck.triples is required for ck-test");
    DataSource data(cfg);
    json reports = json::array();
    std::ofstream csv(cfg.output_dir / "ck.csv");
    csv << "# config_hash=" << cfg.hash << "\ntau1,tau_mid,tau2,distance,threshold,passed,samples\n";
    for (const auto& t : cfg.ck_triples) {
        const AlignedSample s = data.at(t);
        const CkTestReport r = chapman_kolmogorov_test(s.columns[0], s.columns[1], s.columns[2], s.taus[0],
                                                       s.taus[1], s.taus[2], cfg.ck);
        csv << format_real(r.tau1) << ',' << format_real(r.tau_mid) << ',' << format_real(r.tau2) << ','
            << format_real(r.distance) << ',' << format_real(r.threshold) << ',' << (r.passed ? 1 : 0) << ','
            << r.effective_samples << '\n';
        reports.push_back({{"tau1", r.tau1}, {"tau_mid", r.tau_mid}, {"tau2", r.tau2},
                           {"distance", num(r.distance)}, {"threshold", num(r.threshold)},
                           {"threshold_mode", r.threshold_mode}, {"fixed_threshold", num(r.fixed_threshold)},
                           {"calibrated_threshold", num(r.calibrated_threshold)}, {"passed", r.passed},
                           {"samples", r.effective_samples}, {"stride", r.stride}});
    }
    write_json(cfg.output_dir / "ck_report.json", {{"config_hash", cfg.hash}, {"triples", reports}});
    write_manifest(cfg, "ck-test", {"ck.csv", "ck_report.json"});
}

void cmd_estimate(const RunConfig& cfg) {
    prepare_output(cfg);
    if (cfg.taus.empty()) throw ConfigError("config.taus is empty");
    DataSource data(cfg);
    const Sampler sampler = [&](double t1, double t2) {
        const std::array<double, 2> ts{t1, t2};
        return data.at(ts);
    };
    std::vector<ScaleEstimate> scales;
    for (double tau : cfg.taus) scales.push_back(estimate_scale(sampler, tau, cfg.estimate));

    std::vector<KmLimit> limits;
    for (const auto& s : scales) limits.push_back(s.limit);
    CoefficientModel model = limits.size() >= 4 ? fit_model(limits, cfg.model_fit) : constant_model(limits.front());
    if (limits.size() > 1 && limits.size() < 4)
        model.warnings.push_back("fewer than 4 scales: constant model from tau=" + format_real(limits.front().tau));

    {
        std::ofstream f(cfg.output_dir / "km_limits.csv");
        f << "# config_hash=" << cfg.hash << '\n' << "tau,a1,a1_se,a0,a0_se,b2,b2_se,b1,b1_se,b0,b0_se,valid,pawula\n";
        for (const auto& s : scales) {
            const auto& l = s.limit;
            const std::array<double, 5> v{l.a1, l.a0, l.b2, l.b1, l.b0};
            f << format_real(l.tau);
            for (std::size_t k = 0; k < 5; ++k)
                f << ',' << format_real(v[k]) << ',' << format_real(l.diagnostics[k].limit_se);
            f << ',' << (l.valid ? 1 : 0) << ',' << (s.pawula.passed ? 1 : 0) << '\n';
        }
    }
    {
        std::ofstream f(cfg.output_dir / "km_curves.csv");
        f << "# config_hash=" << cfg.hash << '\n' << "tau,dtau,order,x,value,std_error,n_eff\n";
        for (const auto& s : scales)
            for (const auto& d : s.per_dtau)
                for (const KmCurve* c : {&d.d1, &d.d2, &d.d4})
                    for (std::size_t i = 0; i < c->values.size(); ++i)
                        f << format_real(s.tau) << ',' << format_real(d.fits.dtau) << ',' << c->order << ','
                          << format_real(c->x_centers[i]) << ',' << format_real(c->values[i]) << ','
                          << format_real(c->std_errors[i]) << ',' << c->n_eff[i] << '\n';
    }
    json mj = to_json(model);
    mj["config_hash"] = cfg.hash;
    write_json(cfg.output_dir / "model.json", mj);
    json report = {{"config_hash", cfg.hash}, {"scales", json::array()}, {"model_warnings", model.warnings}};
    bool all_pawula = true;
    for (const auto& s : scales) {
        report["scales"].push_back(scale_json(s));
        all_pawula = all_pawula && s.pawula.passed;
    }
    report["pawula_all_passed"] = all_pawula;
    write_json(cfg.output_dir / "estimate_report.json", report);
    write_manifest(cfg, "estimate", {"km_limits.csv", "km_curves.csv", "model.json", "estimate_report.json"});
}

void cmd_solve(const RunConfig& cfg) {
    prepare_output(cfg);
    const fs::path model_path = cfg.solve.model_path.empty() ? cfg.output_dir / "model.json" : cfg.solve.model_path;
    const CoefficientModel model = load_model(model_path);
    std::optional<DataSource> data;
    if (fs::exists(cfg.output_dir / "ingest.manifest.json")) data.emplace(cfg);

    double sigma0 = cfg.solve.initial_sigma;
    std::string sigma_source = "config";
    if (!(sigma0 > 0.0) && data) {
        if (auto rs = data->returns_at(cfg.solve.tau_start)) {
            sigma0 = sample_stddev(rs->returns);
            sigma_source = "empirical";
        }
    }
    if (!(sigma0 > 0.0)) {
        const VariancePrediction v = variance_prediction(model, cfg.solve.tau_start);
        if (v.infinite)
            throw ConfigError("solve: initial_sigma not set and the predicted variance at tau_start is infinite");
        sigma0 = std::sqrt(v.value);
        sigma_source = "predicted";
    }
    PdfGrid grid = gaussian_initial_condition(sigma0, 0.0, cfg.solver);
    grid.tau = cfg.solve.tau_start;
    const std::vector<double>& marks = cfg.solve.checkpoints.empty() ? cfg.taus : cfg.solve.checkpoints;
    EvolveStats stats;
    const auto snaps = evolve(grid, model, cfg.solve.tau_end, marks, cfg.solver, &stats);

    fs::create_directories(cfg.output_dir / "snapshots");
    std::vector<std::string> files;
    json table = json::array();
    for (const auto& s : snaps) {
        const std::string name = "snapshots/tau_" + tau_label(s.tau) + ".csv";
        write_snapshot_csv(cfg.output_dir / name, s);
        stamp_csv(cfg.output_dir / name, cfg.hash);
        files.push_back(name);
        const Coefficients c = eval(model, s.tau);
        const double B = decay_rate_B(model, s.tau);
        const VariancePrediction vp = variance_prediction(model, s.tau);
        json row = {{"tau", s.tau},
                    {"file", name},
                    {"mass", s.mass()},
                    {"mean", num(s.mean())},
                    {"variance", num(s.variance())},
                    {"excess_kurtosis", num(s.excess_kurtosis())},
                    {"variance_predicted", vp.infinite ? json(nullptr) : json(vp.value)},
                    {"variance_predicted_infinite", vp.infinite},
                    {"mu_predicted", num(c.b2 > 0.0 ? mu_from_params(c.a1, B, c.b2) : INFINITY)},
                    {"mu_alternative", num(mu_alternative(c.a1, c.b2))}};
        if (data) {
            if (auto rs = data->returns_at(s.tau)) {
                const double sd = sample_stddev(rs->returns);
                const Histogram1D h = histogram_1d(rs->returns, cfg.estimate.binning);
                const auto centers = h.centers();
                const auto dens = h.density();
                const std::string cname = "snapshots/compare_tau_" + tau_label(s.tau) + ".csv";
                std::ofstream f(cfg.output_dir / cname);
                f << "# config_hash=" << cfg.hash << "\nx_over_sigma,empirical,solved\n";
                for (std::size_t i = 0; i < centers.size(); ++i)
                    f << format_real(centers[i] / sd) << ',' << format_real(dens[i] * sd) << ','
                      << format_real(interpolate(s, centers[i]) * sd) << '\n';
                files.push_back(cname);
                row["comparison"] = cname;
                row["empirical_sigma"] = sd;
            }
        }
        table.push_back(row);
    }
    json report = {{"config_hash", cfg.hash},
                   {"initial_sigma", sigma0},
                   {"initial_sigma_source", sigma_source},
                   {"steps", stats.steps},
                   {"clip_events", stats.clip_events},
                   {"clipped_mass", stats.clipped_mass},
                   {"comoving", cfg.solver.comoving},
                   {"snapshots", table}};
    write_json(cfg.output_dir / "solve_report.json", report);
    files.push_back("solve_report.json");
    write_manifest(cfg, "solve", files, {{"snapshots", table}});
}

std::size_t cmd_fit_tails(const RunConfig& cfg) {
    prepare_output(cfg);
    struct Input {
        double tau;
        std::function<QGaussianFit()> fit;
    };
    std::vector<Input> inputs;
    std::optional<DataSource> data;
    switch (cfg.fit_tails.source) {
    case FitTailsSpec::Source::Snapshots: {
        const json m = read_manifest(cfg, "solve");
        for (const auto& row : m.at("snapshots")) {
            const double tau = row.at("tau").get<double>();
            const fs::path p = cfg.output_dir / row.at("file").get<std::string>();
            inputs.push_back({tau, [p, tau, &cfg] { return fit_mu(read_snapshot_csv(p, tau), cfg.fit); }});
        }
        break;
    }
    case FitTailsSpec::Source::Returns:
        data.emplace(cfg);
        for (double tau : cfg.taus)
            inputs.push_back({tau, [tau, &data, &cfg] {
                                  auto rs = data->returns_at(tau);
                                  if (!rs) throw InsufficientDataError("no returns ingested at tau=" + format_real(tau));
                                  return fit_mu(histogram_1d(rs->returns, cfg.estimate.binning), cfg.fit);
                              }});
        break;
    case FitTailsSpec::Source::Histograms:
        for (const auto& h : cfg.fit_tails.histograms)
            inputs.push_back({h.tau, [p = h.path, &cfg] { return fit_mu(read_histogram_csv(p), cfg.fit); }});
        break;
    }

    std::optional<CoefficientModel> model;
    const fs::path model_path = cfg.solve.model_path.empty() ? cfg.output_dir / "model.json" : cfg.solve.model_path;
    if (fs::exists(model_path)) model = load_model(model_path);

    json fits = json::array();
    std::size_t rows = 0;
    std::ofstream csv(cfg.output_dir / "mu_table.csv");
    csv << "# config_hash=" << cfg.hash << "\ntau,mu,mu_ci_lo,mu_ci_hi,q\n";
    for (const auto& in : inputs) {
        json entry = {{"tau", in.tau}};
        try {
            const QGaussianFit f = in.fit();
            entry["fit"] = to_json(f);
            if (!f.gaussian_regime) {
                csv << format_real(in.tau) << ',' << format_real(f.mu) << ',' << format_real(f.mu_ci_lo) << ','
                    << format_real(f.mu_ci_hi) << ',' << format_real(f.q_equiv) << '\n';
                ++rows;
            }
        } catch (const Error& e) {
            entry["error"] = e.what();
        }
        if (model) {
            const VariancePrediction vp = variance_prediction(*model, in.tau);
            entry["variance_predicted"] = vp.infinite ? json(nullptr) : json(vp.value);
        }
        fits.push_back(entry);
    }
    csv.close();
    json report = {{"config_hash", cfg.hash}, {"fits", fits}, {"rows", rows}};
    if (model) {
        // tau -> infinity limit of the model's coefficients
        const double a1 = model->a1_values.back();
        const double B = model->gamma_high * std::log(2.0);
        report["mu_asymptote"] = num(mu_from_params(a1, B, model->b2_high));
        report["mu_asymptote_alternative"] = num(mu_alternative(a1, model->b2_high));
    }
    write_json(cfg.output_dir / "fit_tails_report.json", report);
    write_manifest(cfg, "fit-tails", {"mu_table.csv", "fit_tails_report.json"});
    if (inputs.empty()) throw InsufficientDataError("fit-tails: no histograms or snapshots to fit");
    return rows;
}

void cmd_simulate(const RunConfig& cfg) {
    prepare_output(cfg);
    SimSpec spec = cfg.simulate.sim;
    if (!cfg.simulate.model_path.empty()) spec.model = load_model(cfg.simulate.model_path);
    const Ensemble e = simulate(spec);
    const fs::path out = cfg.output_dir / cfg.simulate.output;
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_ensemble_csv(out, e, cfg.simulate.value);
    stamp_csv(out, cfg.hash);
    write_manifest(cfg, "simulate", {cfg.simulate.output},
                   {{"n_paths", e.n_paths},
                    {"n_records", e.n_records},
                    {"dtau_record", e.dtau_record},
                    {"barrier_hits", e.barrier_hits},
                    {"value", cfg.simulate.value == EnsembleValue::ExpState ? "exp" : "state"}});
}

} // namespace kmfpe
