#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kmfpe/error.hpp"
#include "kmfpe/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kmfpe;

namespace {

json small_config() {
    return {
        {"inputs", {"out/simulated.csv"}},
        {"sampling", {{"mode", "state"}, {"state_dtau_per_sample", 0.01}}},
        {"taus", {0.0}},
        {"simulate",
         {{"a1", 1.0}, {"b0", 0.5}, {"b2", 0.2}, {"dtau_sim", 0.01}, {"n_steps", 300000}, {"value", "exp"}}},
        {"solver", {{"L", 10.0}, {"n_points", 401}}},
        {"solve", {{"tau_start", 0.0}, {"tau_end", 0.5}, {"checkpoints", {0.25}}}},
        {"fit", {{"n_bootstrap", 20}}},
        {"seed", 3},
    };
}

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("kmfpe_test_pipeline_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

json read_json(const fs::path& p) {
    std::ifstream f(p);
    return json::parse(f);
}

int code_of(const auto& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        return exit_code_for(e);
    }
    return 0;
}

} // namespace

TEST_CASE("unknown keys are rejected at every level") {
    json doc = small_config();
    CHECK_NOTHROW(parse_run_config(doc, "."));
    doc["colour"] = 1;
    CHECK_THROWS_AS(parse_run_config(doc, "."), ConfigError);
    doc = small_config();
    doc["solver"]["L_max"] = 3;
    CHECK_THROWS_AS(parse_run_config(doc, "."), ConfigError);
    doc = small_config();
    doc["solver"]["boundary"] = "periodic";
    CHECK_THROWS_AS(parse_run_config(doc, "."), ConfigError);
    doc = small_config();
    doc["ck"] = {{"triples", {{0.0, 0.3, 0.2}}}};
    CHECK_THROWS_AS(parse_run_config(doc, "."), ConfigError);
    doc = small_config();
    doc["taus"] = "zero";
    CHECK_THROWS_AS(parse_run_config(doc, "."), ConfigError);
}

TEST_CASE("relative paths resolve against the config directory") {
    const RunConfig c = parse_run_config(small_config(), "/data/run");
    REQUIRE(c.inputs.size() == 1);
    CHECK(c.inputs[0] == fs::path("/data/run/out/simulated.csv"));
    CHECK(c.output_dir == fs::path("/data/run/out"));
    CHECK(c.simulate.sim.constants.b2 == 0.2);
    CHECK(c.solver.n_points == 401);
}

TEST_CASE("config hash ignores the output directory only") {
    json a = small_config();
    const std::string h = config_hash(a);
    CHECK(h.size() == 16);
    CHECK(h.find_first_not_of("0123456789abcdef") == std::string::npos);
    a["output_dir"] = "elsewhere";
    CHECK(config_hash(a) == h);
    a["seed"] = 4;
    CHECK(config_hash(a) != h);
}

TEST_CASE("exit codes") {
    CHECK(code_of([] { throw ConfigError("x"); }) == 2);
    CHECK(code_of([] { throw PreconditionError("x"); }) == 2);
    CHECK(code_of([] { throw DomainError("x"); }) == 2);
    CHECK(code_of([] { throw InsufficientDataError("x"); }) == 3);
    CHECK(code_of([] { throw NumericalError("x"); }) == 4);
    CHECK(code_of([] { throw FitError("x"); }) == 4);
    CHECK(code_of([] { throw std::runtime_error("x"); }) == 1);
}

TEST_CASE("stages run end to end on a small simulated series") {
    const fs::path dir = fresh_dir("stages");
    {
        std::ofstream f(dir / "config.json");
        f << small_config().dump(2);
    }
    const RunConfig cfg = load_run_config(dir / "config.json");
    CHECK_THROWS_AS(cmd_estimate(cfg), PreconditionError);  // nothing ingested yet
    cmd_simulate(cfg);
    cmd_ingest(cfg);
    cmd_estimate(cfg);
    const json est = read_json(dir / "out" / "estimate_report.json");
    CHECK(est.at("config_hash") == cfg.hash);
    const json& lim = est.at("scales").at(0).at("limit");
    CHECK(lim.at("a1").get<double>() == doctest::Approx(1.0).epsilon(0.25));
    CHECK(lim.at("b0").get<double>() == doctest::Approx(0.5).epsilon(0.25));
    CHECK(fs::exists(dir / "out" / "model.json"));

    cmd_solve(cfg);
    const json solve = read_json(dir / "out" / "solve_report.json");
    // state-sampled input has no return series, so the width comes from the model
    CHECK(solve.at("initial_sigma_source") == "predicted");
    REQUIRE(solve.at("snapshots").size() == 2);
    CHECK(solve.at("snapshots").at(1).at("tau").get<double>() == 0.5);
    CHECK(solve.at("snapshots").at(1).at("mass").get<double>() == doctest::Approx(1.0).epsilon(1e-12));

    CHECK(cmd_fit_tails(cfg) <= 2);
    const json tails = read_json(dir / "out" / "fit_tails_report.json");
    CHECK(tails.at("fits").size() == 2);
    CHECK(tails.contains("mu_asymptote"));

    // same output directory, different config
    json other = small_config();
    other["seed"] = 5;
    const RunConfig cfg2 = parse_run_config(other, dir);
    CHECK_THROWS_AS(cmd_ingest(cfg2), ConfigError);

    // the stamped config hash heads every csv
    std::ifstream lim_csv(dir / "out" / "km_limits.csv");
    std::string first;
    std::getline(lim_csv, first);
    CHECK(first == "# config_hash=" + cfg.hash);
    fs::remove_all(dir);
}

TEST_CASE("fit-tails with nothing to fit is an insufficient-data error") {
    const fs::path dir = fresh_dir("empty");
    json doc = small_config();
    doc["fit_tails"] = {{"source", "histograms"}, {"histograms", json::array()}};
    const RunConfig cfg = parse_run_config(doc, dir);
    CHECK_THROWS_AS(cmd_fit_tails(cfg), InsufficientDataError);
    fs::remove_all(dir);
}
