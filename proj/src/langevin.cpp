#include "kmfpe/langevin.hpp"

#include "kmfpe/error.hpp"
#include "kmfpe/numeric.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <fstream>
#include <random>

namespace kmfpe {

namespace {

std::array<double, 5> pack(const Coefficients& c) { return {c.a1, c.a0, c.b0, c.b1, c.b2}; }

void validate(const SimSpec& s) {
    if (!(s.dtau_sim > 0.0)) throw ConfigError("simulate: dtau_sim must be > 0");
    if (s.record_every == 0) throw ConfigError("simulate: record_every must be >= 1");
    if (s.initial.kind == InitialKind::Gaussian && !(s.initial.sigma0 > 0.0))
        throw ConfigError("simulate: Gaussian initial distribution needs sigma0 > 0");
    if (!(s.barrier_sigmas > 0.0)) throw ConfigError("simulate: barrier_sigmas must be > 0");
}

} // namespace

Ensemble simulate(const SimSpec& spec) {
    validate(spec);
    std::vector<std::array<double, 5>> coeffs(spec.n_steps);
    if (spec.model) {
        for (std::size_t s = 0; s < spec.n_steps; ++s)
            coeffs[s] = pack(eval(*spec.model, spec.tau0 + static_cast<double>(s) * spec.dtau_sim));
    } else {
        std::fill(coeffs.begin(), coeffs.end(), pack(spec.constants));
    }
    const Coefficients c0 = spec.model ? eval(*spec.model, spec.tau0) : spec.constants;
    double width = 1.0;
    if (c0.b0 > 0.0 && c0.a1 > 0.0) width = std::sqrt(c0.b0 / c0.a1);

    std::vector<double> x0(spec.n_paths, spec.initial.x0);
    if (spec.initial.kind == InitialKind::Gaussian) {
        // separate stream from the path noise
        std::mt19937_64 rng(kernels::path_seed(~spec.seed, 0));
        std::normal_distribution<double> normal;
        for (double& v : x0) v = spec.initial.x0 + spec.initial.sigma0 * normal(rng);
    }

    kernels::EnsembleArgs args;
    args.coeffs = coeffs;
    args.x0 = x0;
    args.dt = spec.dtau_sim;
    args.record_every = spec.record_every;
    args.barrier = spec.barrier_sigmas * width;
    args.seed = spec.seed;
    kernels::EnsembleResult r =
        spec.parallel ? kernels::omp::euler_maruyama(args) : kernels::serial::euler_maruyama(args);

    Ensemble e;
    e.n_paths = r.n_paths;
    e.n_records = r.n_records;
    e.dtau_record = spec.dtau_sim * static_cast<double>(spec.record_every);
    e.tau0 = spec.tau0;
    e.states = std::move(r.states);
    e.barrier_hits = r.barrier_hits;
    return e;
}

std::vector<double> sample_qgaussian(double mu, double b0, double b2, std::size_t n, std::uint64_t seed) {
    if (!(mu > 0.0)) throw DomainError("sample_qgaussian: mu must be > 0");
    if (!(b0 > 0.0) || !(b2 >= 0.0)) throw DomainError("sample_qgaussian: need b0 > 0 and b2 >= 0");
    std::vector<double> out(n);
    std::mt19937_64 rng(seed);
    // uniform in the open interval (0, 1)
    auto uniform = [&] { return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53; };
    if (b2 == 0.0 || std::isinf(mu)) {
        const double sd = std::sqrt(b0);
        for (double& v : out) v = sd * M_SQRT2 * boost::math::erf_inv(2.0 * uniform() - 1.0);
        return out;
    }
    // (b0 + b2 x^2)^(-(mu+1)/2) is a Student t with nu = mu scaled by sqrt(b0 / (b2 mu))
    const boost::math::students_t_distribution<double> t(mu);
    const double scale = std::sqrt(b0 / (b2 * mu));
    for (double& v : out) v = scale * boost::math::quantile(t, uniform());
    return out;
}

void write_ensemble_csv(const std::filesystem::path& path, const Ensemble& e, EnsembleValue value) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << "timestamp,value\n";
    const std::size_t stride = 2 * e.n_records;
    std::string line;
    for (std::size_t p = 0; p < e.n_paths; ++p)
        for (std::size_t r = 0; r < e.n_records; ++r) {
            const double x = e.at(p, r);
            line = std::to_string(p * stride + r);
            line += ',';
            line += format_real(value == EnsembleValue::ExpState ? std::exp(x) : x);
            line += '\n';
            f << line;
        }
}

} // namespace kmfpe
