// kmfpe ingest|ck-test|estimate|solve|fit-tails|simulate --config <file> [--seed N] [--out DIR]

#include "kmfpe/error.hpp"
#include "kmfpe/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>

int main(int argc, char** argv) {
    CLI::App app{"Kramers-Moyal / Fokker-Planck analysis of scale-dependent return statistics"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;

    const std::map<std::string, std::function<void(const kmfpe::RunConfig&)>> stages{
        {"ingest", kmfpe::cmd_ingest},
        {"ck-test", kmfpe::cmd_ck_test},
        {"estimate", kmfpe::cmd_estimate},
        {"solve", kmfpe::cmd_solve},
        {"fit-tails", [](const kmfpe::RunConfig& c) { kmfpe::cmd_fit_tails(c); }},
        {"simulate", kmfpe::cmd_simulate},
    };
    const std::map<std::string, std::string> help{
        {"ingest", "read price CSVs and write per-lag normalized returns"},
        {"ck-test", "Chapman-Kolmogorov test on the configured scale triples"},
        {"estimate", "Kramers-Moyal coefficients, dtau extrapolation, coefficient model"},
        {"solve", "evolve the Fokker-Planck equation across the tau ladder"},
        {"fit-tails", "q-Gaussian tail exponent fits per tau"},
        {"simulate", "Euler-Maruyama Langevin ensemble written as a price CSV"},
    };
    for (const auto& [name, fn] : stages) {
        CLI::App* sub = app.add_subcommand(name, help.at(name));
        sub->add_option("--config", config_path, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "override the config seed");
        sub->add_option("--out", out, "override the output directory");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    const std::string name = app.get_subcommands().front()->get_name();
    try {
        std::optional<std::filesystem::path> out_dir;
        if (out) out_dir = *out;
        const kmfpe::RunConfig cfg = kmfpe::load_run_config(config_path, seed, out_dir);
        stages.at(name)(cfg);
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "kmfpe " << name << ": " << e.what() << '\n';
        return kmfpe::exit_code_for(e);
    }
}
