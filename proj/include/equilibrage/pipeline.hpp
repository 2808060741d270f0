#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "equilibrage/marketize.hpp"
#include "equilibrage/scenario.hpp"
#include "equilibrage/verify.hpp"

namespace equilibrage {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCertificateFailure = 1;
inline constexpr int kExitNoConvergence = 2;
inline constexpr int kExitInputError = 3;

// ---------------------------------------------------------------------------
// Artifact serialization
// ---------------------------------------------------------------------------

inline nlohmann::json equilibrium_to_json(const EquilibriumSolution& sol) {
    nlohmann::json j;
    j["normalization"] = sol.normalization;
    j["weights"] = sol.weights;
    j["q"] = sol.q.values;
    j["q_min"] = sol.q_min;
    j["q_max"] = sol.q_max;
    auto& alloc = j["allocations"] = nlohmann::json::array();
    for (const auto& c : sol.allocations) alloc.push_back(c.values);
    j["residuals"] = sol.residuals;
    j["residual_trace"] = sol.residual_trace;
    j["iterations"] = sol.iterations;
    return j;
}

inline EquilibriumSolution equilibrium_from_json(const EventTree& tree,
                                                 const nlohmann::json& j) {
    EquilibriumSolution sol;
    sol.normalization = j.at("normalization").get<std::string>();
    sol.weights = j.at("weights").get<std::vector<double>>();
    sol.q = TreeProcess{Flavor::Adapted, j.at("q").get<std::vector<double>>()};
    if (sol.q.values.size() != tree.size())
        throw std::runtime_error("equilibrium artifact does not match the scenario tree");
    for (const auto& row : j.at("allocations"))
        sol.allocations.push_back(TreeProcess{Flavor::Adapted, row.get<std::vector<double>>()});
    sol.residuals = j.at("residuals").get<std::vector<double>>();
    sol.residual_trace = j.at("residual_trace").get<std::vector<double>>();
    sol.iterations = j.at("iterations").get<int>();
    sol.q_min = j.at("q_min").get<double>();
    sol.q_max = j.at("q_max").get<double>();
    return sol;
}

/// One row per node, stable ids: bond, assets, reweighted conditional
/// probabilities, every agent's portfolio vector and wealth.
inline std::string market_csv(const EventTree& tree, const MarketRealization& mr) {
    const std::size_t n = mr.market.assets.size();
    const std::size_t d = mr.portfolios.size();
    std::ostringstream os;
    os << "id,level,parent,p_cond_qhat,B";
    for (std::size_t j = 0; j < n; ++j) os << ",S_" << (j + 1);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < n; ++j) os << ",H_" << (i + 1) << '_' << (j + 1);
    for (std::size_t i = 0; i < d; ++i) os << ",X_" << (i + 1);
    os << '\n';
    for (const auto& lvl : tree.levels)
        for (int id : lvl) {
            const auto& node = tree.nodes[id];
            os << id << ',' << node.level << ',' << node.parent << ','
               << format_double(mr.qhat.nodes[id].p_cond) << ','
               << format_double(mr.market.bond.values[id]);
            for (std::size_t j = 0; j < n; ++j)
                os << ',' << format_double(mr.market.assets[j].values[id]);
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    os << ',' << format_double(mr.portfolios[i][j].values[id]);
            for (std::size_t i = 0; i < d; ++i)
                os << ',' << format_double(mr.wealth[i].values[id]);
            os << '\n';
        }
    return os.str();
}

/// JSON form of the market dump, same content as the CSV.
inline nlohmann::json market_to_json(const EventTree& tree, const MarketRealization& mr) {
    nlohmann::json j;
    j["qhat0"] = mr.qhat0;
    auto& nodes = j["nodes"] = nlohmann::json::array();
    for (const auto& lvl : tree.levels)
        for (int id : lvl) {
            nlohmann::json row = {{"id", id},
                                  {"p_cond_qhat", mr.qhat.nodes[id].p_cond},
                                  {"bond", mr.market.bond.values[id]}};
            auto& s = row["assets"] = nlohmann::json::array();
            for (const auto& asset : mr.market.assets) s.push_back(asset.values[id]);
            auto& h = row["portfolios"] = nlohmann::json::array();
            for (const auto& hp : mr.portfolios) {
                nlohmann::json comps = nlohmann::json::array();
                for (const auto& comp : hp) comps.push_back(comp.values[id]);
                h.push_back(std::move(comps));
            }
            auto& x = row["wealth"] = nlohmann::json::array();
            for (const auto& w : mr.wealth) x.push_back(w.values[id]);
            nodes.push_back(std::move(row));
        }
    return j;
}

inline nlohmann::json regularity_to_json(const RegularityReport& rep) {
    nlohmann::json j;
    j["all_pass"] = rep.all_pass();
    auto& agents = j["agents"] = nlohmann::json::array();
    for (const auto& items : rep.per_agent) {
        nlohmann::json row = nlohmann::json::array();
        for (const auto& it : items)
            row.push_back({{"check", it.check},
                           {"measured", it.measured},
                           {"threshold", it.threshold},
                           {"pass", it.pass},
                           {"note", it.note}});
        agents.push_back(std::move(row));
    }
    return j;
}

/// Two-column plot series, one block per path from root to leaf.
inline std::string plot_series(const EventTree& tree, const TreeProcess& proc) {
    std::ostringstream os;
    for (int leaf : tree.leaves()) {
        std::vector<int> path;
        for (int v = leaf; v >= 0; v = tree.nodes[v].parent) path.push_back(v);
        for (auto it = path.rbegin(); it != path.rend(); ++it)
            os << format_double(tree.grid.times[tree.nodes[*it].level]) << ' '
               << format_double(proc.values[*it]) << '\n';
        os << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Output emission
// ---------------------------------------------------------------------------

struct Emitted {
    std::vector<std::pair<std::string, std::string>> files;  // name, content

    void add(std::string name, std::string content) {
        files.emplace_back(std::move(name), std::move(content));
    }
};

inline nlohmann::json manifest_of(const Emitted& em) {
    nlohmann::json files = nlohmann::json::array();
    for (const auto& [name, content] : em.files) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%016llx",
                      static_cast<unsigned long long>(fnv1a64(content)));
        files.push_back({{"name", name}, {"hash", std::string("fnv1a64:") + buf}});
    }
    return {{"files", files}};
}

inline Emitted collect_outputs(const EventTree& tree, const EquilibriumSolution& sol,
                               const MarketRealization& mr, const Certificate& cert,
                               const RegularityReport& reg) {
    Emitted em;
    em.add("equilibrium.json", equilibrium_to_json(sol).dump(2) + "\n");
    em.add("market.csv", market_csv(tree, mr));
    em.add("certificate.json", certificate_to_json(cert).dump(2) + "\n");
    em.add("regularity.json", regularity_to_json(reg).dump(2) + "\n");
    em.add("q.txt", plot_series(tree, sol.q));
    em.add("bond.txt", plot_series(tree, mr.market.bond));
    for (std::size_t j = 0; j < mr.market.assets.size(); ++j)
        em.add("s_" + std::to_string(j + 1) + ".txt",
               plot_series(tree, mr.market.assets[j]));
    for (std::size_t i = 0; i < sol.allocations.size(); ++i)
        em.add("c_" + std::to_string(i + 1) + ".txt",
               plot_series(tree, sol.allocations[i]));
    for (std::size_t i = 0; i < mr.wealth.size(); ++i)
        em.add("x_" + std::to_string(i + 1) + ".txt", plot_series(tree, mr.wealth[i]));
    return em;
}

inline void write_outputs(const Emitted& em, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    auto write = [&](const std::string& name, const std::string& content) {
        std::ofstream os(fs::path(out_dir) / name, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write to " + out_dir + "/" + name);
        os << content;
    };
    for (const auto& [name, content] : em.files) write(name, content);
    write("manifest.json", manifest_of(em).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct RunRequest {
    std::string command;  // regularity | solve | certify | demo | all
    std::string scenario_path;
    std::string out_dir = ".";
    bool seed_set = false;
    std::uint64_t seed = 0;
    bool tol_set = false;
    double tol = 0.0;
    bool max_iters_set = false;
    int max_iters = 0;
    bool cross_check = false;   // force the coalition cross-check on
    int deviations = -1;        // override when >= 0
    std::ostream* log = &std::cerr;
};

namespace detail {

inline void apply_overrides(const RunRequest& req, Scenario& sc) {
    if (req.seed_set) sc.seed = req.seed;
    if (req.tol_set) sc.solver.tol = req.tol;
    if (req.max_iters_set) sc.solver.max_iters = req.max_iters;
    if (req.cross_check) sc.cross_check = true;
    if (req.deviations >= 0) sc.output.deviations = req.deviations;
}

inline Certificate certify_with_extras(const Scenario& sc, const Materialized& m,
                                       const EquilibriumSolution& sol,
                                       const MarketRealization& mr) {
    Certificate cert = certify(m.tree, m.agents, sol, mr);
    if (sc.cross_check) {
        if (m.agents.size() <= 12) {
            const double gap = coalition_cross_check(m.tree, m.agents, sol.weights, sol.q);
            cert.add("coalition formula",
                     "density equals the minimum over coalitions of inverted group demand",
                     gap, 1e-8);
        } else {
            cert.notes.push_back("coalition cross-check skipped: more than 12 agents");
        }
    }
    if (sc.output.deviations > 0) {
        double worst = -kInf;
        for (std::size_t i = 0; i < m.agents.size(); ++i) {
            const auto rep = deviation_test(m.tree, mr, m.agents[i], sol.q,
                                            sol.allocations[i], sc.output.deviations,
                                            mix_seed(sc.output.deviation_seed, i));
            worst = std::max(worst, rep.max_gap);
        }
        cert.add("no profitable deviation",
                 "equilibrium consumption maximizes utility over affordable strategies",
                 std::max(0.0, worst), 1e-9);
    }
    {
        double worst = 0.0;
        for (std::size_t i = 0; i < m.agents.size(); ++i) {
            const TreeProcess best = oracle_best_response(m.tree, m.agents[i], sol.q);
            for (std::size_t v = 0; v < m.tree.size(); ++v)
                worst = std::max(worst,
                                 std::abs(best.values[v] - sol.allocations[i].values[v]));
        }
        cert.add("best-response agreement",
                 "independent multiplier search reproduces the allocations", worst, 1e-6);
    }
    return cert;
}

}  // namespace detail

/// Writes the three canned withdrawal-cap demos: complete markets,
/// proportional constraints, and a constant overdraft limit.
inline int run_demo(const std::string& out_dir) {
    auto base = [](std::uint64_t seed_a, std::uint64_t seed_b) {
        Scenario sc;
        sc.tree.kind = TreeSpec::Kind::Uniform;
        sc.tree.depth = 4;
        sc.tree.branching = 2;
        sc.tree.random_probs = true;
        sc.tree.seed = 9001;
        AgentScenario a1, a2;
        a1.utility.family = UtilitySpec::Family::Log;
        a1.utility.beta = 0.0;
        a1.endowment.kind = EndowmentSpec::Kind::Multiplicative;
        a1.endowment.seed = seed_a;
        a2.utility.family = UtilitySpec::Family::Log;
        a2.utility.beta = 0.1;
        a2.endowment.kind = EndowmentSpec::Kind::Multiplicative;
        a2.endowment.seed = seed_b;
        sc.agents = {a1, a2};
        sc.output.deviations = 25;
        return sc;
    };
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    auto write = [&](const std::string& name, const Scenario& sc) {
        std::ofstream os(fs::path(out_dir) / name, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write to " + out_dir + "/" + name);
        os << scenario_to_json(sc).dump(2) << "\n";
    };
    Scenario complete = base(11, 12);
    write("complete.json", complete);
    Scenario proportional = base(21, 22);
    for (auto& a : proportional.agents) {
        a.cap.kind = CapSpec::Kind::Proportional;
        a.cap.gamma = 1.6;
    }
    write("proportional.json", proportional);
    Scenario overdraft = base(31, 32);
    for (auto& a : overdraft.agents) {
        a.cap.kind = CapSpec::Kind::Overdraft;
        a.cap.delta = 0.6;
    }
    write("overdraft.json", overdraft);
    return kExitOk;
}

inline int run(const RunRequest& req) {
    std::ostream& log = *req.log;
    try {
        if (req.command == "demo") return run_demo(req.out_dir);

        Scenario sc = parse_scenario_file(req.scenario_path);
        detail::apply_overrides(req, sc);
        const Materialized m = materialize(sc);
        const RegularityReport reg = regularity_report(m.tree, m.agents);

        if (req.command == "regularity") {
            Emitted em;
            em.add("regularity.json", regularity_to_json(reg).dump(2) + "\n");
            write_outputs(em, req.out_dir);
            return reg.all_pass() ? kExitOk : kExitCertificateFailure;
        }

        if (req.command == "solve") {
            try {
                const EquilibriumSolution sol = solve(m.tree, m.agents, sc.solver);
                Emitted em;
                em.add("equilibrium.json", equilibrium_to_json(sol).dump(2) + "\n");
                write_outputs(em, req.out_dir);
                return kExitOk;
            } catch (const SolveError& e) {
                log << e.what() << "\nresidual trace:";
                for (double r : e.residual_trace) log << ' ' << format_double(r);
                log << '\n';
                return kExitNoConvergence;
            }
        }

        if (req.command == "certify") {
            namespace fs = std::filesystem;
            const fs::path dir(req.out_dir);
            std::ifstream eq(dir / "equilibrium.json");
            if (!eq) {
                log << "certify: " << (dir / "equilibrium.json").string() << " not found\n";
                return kExitInputError;
            }
            nlohmann::json jeq;
            try {
                eq >> jeq;
            } catch (const nlohmann::json::parse_error& e) {
                log << "certify: equilibrium.json is not valid JSON: " << e.what() << '\n';
                return kExitInputError;
            }
            const EquilibriumSolution sol = equilibrium_from_json(m.tree, jeq);
            const MarketRealization mr = marketize(m.tree, m.agents, sol);
            Certificate cert = detail::certify_with_extras(sc, m, sol, mr);
            {
                std::ifstream mk(dir / "market.csv", std::ios::binary);
                if (!mk) {
                    log << "certify: " << (dir / "market.csv").string() << " not found\n";
                    return kExitInputError;
                }
                std::stringstream buf;
                buf << mk.rdbuf();
                const bool same = buf.str() == market_csv(m.tree, mr);
                cert.add("artifact integrity",
                         "the emitted market dump matches its recomputation",
                         same ? 0.0 : kInf, 0.0);
            }
            Emitted em;
            em.add("certificate.json", certificate_to_json(cert).dump(2) + "\n");
            write_outputs(em, req.out_dir);
            return cert.overall ? kExitOk : kExitCertificateFailure;
        }

        if (req.command == "all") {
            EquilibriumSolution sol;
            try {
                sol = solve(m.tree, m.agents, sc.solver);
            } catch (const SolveError& e) {
                log << e.what() << "\nresidual trace:";
                for (double r : e.residual_trace) log << ' ' << format_double(r);
                log << '\n';
                return kExitNoConvergence;
            }
            const MarketRealization mr = marketize(m.tree, m.agents, sol);
            const Certificate cert = detail::certify_with_extras(sc, m, sol, mr);
            write_outputs(collect_outputs(m.tree, sol, mr, cert, reg), req.out_dir);
            return (cert.overall && reg.all_pass()) ? kExitOk : kExitCertificateFailure;
        }

        log << "unknown command: " << req.command << '\n';
        return kExitInputError;
    } catch (const ScenarioError& e) {
        log << e.what() << '\n';
        return kExitInputError;
    } catch (const std::exception& e) {
        log << e.what() << '\n';
        return kExitInputError;
    }
}

}  // namespace equilibrage
