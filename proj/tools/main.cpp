#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "equilibrage/pipeline.hpp"

namespace {

// EQUILIBRAGE_THREADS caps worker parallelism. The numeric layers are
// sequential and deterministic, so any positive cap is honored as-is; the
// variable is validated here so typos fail loudly.
int thread_cap_from_env() {
    const char* raw = std::getenv("EQUILIBRAGE_THREADS");
    if (!raw) return 1;
    char* end = nullptr;
    const long v = std::strtol(raw, &end, 10);
    if (end == raw || *end != '\0' || v < 1) return -1;
    return static_cast<int>(v);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"equilibrage: financial equilibria on finite event trees"};
    app.require_subcommand(1);

    equilibrage::RunRequest req;
    std::string scenario, out = "out";
    unsigned long long seed = 0;
    double tol = 0.0;
    int max_iters = 0, deviations = -1;
    bool cross_check = false;

    auto add_common = [&](CLI::App* cmd, bool needs_scenario) {
        auto* opt = cmd->add_option("--scenario", scenario, "scenario JSON file");
        if (needs_scenario) opt->required();
        cmd->add_option("--out", out, "output directory");
        cmd->add_option("--seed", seed, "master seed mixed into every generator stream")
            ->each([&](const std::string&) { req.seed_set = true; });
        cmd->add_option("--tol", tol, "solver tolerance override")
            ->each([&](const std::string&) { req.tol_set = true; });
        cmd->add_option("--max-iters", max_iters, "solver iteration cap override")
            ->each([&](const std::string&) { req.max_iters_set = true; });
        cmd->add_flag("--cross-check", cross_check,
                      "force the coalition cross-check into the certificate");
        cmd->add_option("--deviations", deviations,
                        "number of random affordable deviations per agent");
    };

    add_common(app.add_subcommand("regularity", "verify the standing assumptions"), true);
    add_common(app.add_subcommand("solve", "compute the equilibrium weights and density"),
               true);
    add_common(app.add_subcommand("certify",
                                  "re-verify previously emitted artifacts in --out"),
               true);
    add_common(app.add_subcommand("all", "regularity, solve, marketize, certify, emit"),
               true);
    add_common(app.add_subcommand("demo", "write the three canned cap scenarios"), false);

    CLI11_PARSE(app, argc, argv);

    const int threads = thread_cap_from_env();
    if (threads < 0) {
        std::cerr << "EQUILIBRAGE_THREADS must be a positive integer\n";
        return equilibrage::kExitInputError;
    }

    req.command = app.get_subcommands().front()->get_name();
    req.scenario_path = scenario;
    req.out_dir = out;
    req.seed = seed;
    req.tol = tol;
    req.max_iters = max_iters;
    req.cross_check = cross_check;
    req.deviations = deviations;
    return equilibrage::run(req);
}
