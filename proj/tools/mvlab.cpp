#include <omp.h>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "mvlab/experiment.hpp"
#include "mvlab/simulate.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kRuntimeAbort = 3;

struct Options {
    std::string config;
    std::string out = "out";
    int threads = 0;
    std::optional<std::uint64_t> seed;
};

int run(const std::string& kind, const Options& opt) {
    nlohmann::json resolved;
    try {
        std::ifstream in(opt.config, std::ios::binary);
        if (!in) throw mvlab::ConfigError("cannot read config file " + opt.config);
        std::stringstream buf;
        buf << in.rdbuf();
        resolved = mvlab::resolve_config(mvlab::parse_config_text(buf.str()), kind, opt.seed);
    } catch (const mvlab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    }
    if (opt.threads > 0) omp_set_num_threads(opt.threads);
    try {
        mvlab::run_experiment(resolved, opt.out, std::cout);
    } catch (const mvlab::SimulationAbort& e) {
        std::cerr << "runtime abort: " << e.what() << "\n";
        return kRuntimeAbort;
    } catch (const mvlab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "runtime abort: " << e.what() << "\n";
        return kRuntimeAbort;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Particle experiments for path-distribution dependent SDEs"};
    app.require_subcommand(1);
    Options opt;
    std::uint64_t seed = 0;
    std::string chosen;
    for (const auto& kind : mvlab::experiment_kinds()) {
        auto* sub = app.add_subcommand(kind, "run the " + kind + " experiment");
        sub->add_option("--config", opt.config, "experiment JSON file")->required();
        sub->add_option("--out", opt.out, "output directory")->capture_default_str();
        sub->add_option("--threads", opt.threads, "worker threads (speed only)")->check(CLI::NonNegativeNumber);
        sub->add_option("--seed", seed, "override the config seed");
        sub->callback([&chosen, kind] { chosen = kind; });
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kConfigError;
    }
    for (auto* sub : app.get_subcommands()) {
        if (sub->count("--seed") > 0) opt.seed = seed;
    }
    return run(chosen, opt);
}
