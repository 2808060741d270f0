#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "equilibrage/lattice.hpp"
#include "equilibrage/negishi.hpp"
#include "equilibrage/preferences.hpp"

namespace equilibrage {

/// Schema violations, each with the path of the offending field.
class ScenarioError : public std::runtime_error {
public:
    explicit ScenarioError(std::vector<std::string> errs)
        : std::runtime_error(join(errs)), errors(std::move(errs)) {}
    std::vector<std::string> errors;

private:
    static std::string join(const std::vector<std::string>& errs) {
        std::string out = "scenario schema errors:";
        for (const auto& e : errs) out += "\n  " + e;
        return out;
    }
};

struct EndowmentSpec {
    enum class Kind { Explicit, Multiplicative, StateMap };
    Kind kind = Kind::Multiplicative;
    std::vector<double> values;  // explicit per node, or one entry per chain state
    double base = 1.0;
    double lo = 0.5, hi = 2.0;
    std::uint64_t seed = 0;
};

struct CapSpec {
    enum class Kind { None, Proportional, Overdraft, Explicit };
    Kind kind = Kind::None;
    double gamma = 0.0;  // proportional: cap = gamma * endowment, gamma > 1
    double delta = 0.0;  // overdraft: cap = endowment + delta, delta > 0
    std::vector<double> values;
};

struct AgentScenario {
    UtilitySpec utility;
    EndowmentSpec endowment;
    CapSpec cap;
    double epsilon = 0.0;
};

struct OutputOptions {
    int deviations = 0;
    std::uint64_t deviation_seed = 4242;
};

struct Scenario {
    int schema = 1;
    std::uint64_t seed = 0;  // master seed; mixed into every generator stream
    TreeSpec tree;
    std::vector<AgentScenario> agents;
    SolveOptions solver;
    bool cross_check = true;
    OutputOptions output;
};

// ---------------------------------------------------------------------------
// Endowment generators
// ---------------------------------------------------------------------------

/// Seeded bounded multiplicative-shock endowment, clamped to [lo, hi].
inline TreeProcess multiplicative_endowment(const EventTree& tree, std::uint64_t seed,
                                            double lo, double hi, double base) {
    Rng rng(seed);
    TreeProcess e{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
    e.values[0] = std::min(hi, std::max(lo, base));
    for (const auto& n : tree.nodes)
        for (int c : n.children) {
            const double shock = rng.uniform(0.8, 1.25);
            e.values[c] = std::min(hi, std::max(lo, e.values[n.id] * shock));
        }
    return e;
}

// ---------------------------------------------------------------------------
// JSON parsing with field-path diagnostics
// ---------------------------------------------------------------------------

namespace detail {

inline const nlohmann::json* field(const nlohmann::json& j, const char* key) {
    auto it = j.find(key);
    return it == j.end() ? nullptr : &*it;
}

inline double num_or(const nlohmann::json& j, const char* key, double fallback,
                     const std::string& path, std::vector<std::string>& errs) {
    const auto* f = field(j, key);
    if (!f) return fallback;
    if (!f->is_number()) {
        errs.push_back(path + "." + key + ": expected a number");
        return fallback;
    }
    return f->get<double>();
}

/// Seeds are kept integral so 64-bit values survive the round trip.
inline std::uint64_t seed_or(const nlohmann::json& j, const char* key,
                             std::uint64_t fallback, const std::string& path,
                             std::vector<std::string>& errs) {
    const auto* f = field(j, key);
    if (!f) return fallback;
    if (!f->is_number_integer() && !f->is_number_unsigned()) {
        errs.push_back(path + "." + key + ": expected an integer seed");
        return fallback;
    }
    return f->get<std::uint64_t>();
}

inline UtilitySpec parse_utility(const nlohmann::json& j, const std::string& path,
                                 std::vector<std::string>& errs) {
    UtilitySpec u;
    const auto* fam = field(j, "family");
    if (!fam || !fam->is_string()) {
        errs.push_back(path + ".family: required string (log | power | tabulated)");
        return u;
    }
    const std::string name = fam->get<std::string>();
    u.beta = num_or(j, "beta", 0.0, path, errs);
    if (u.beta < 0.0) errs.push_back(path + ".beta: must be >= 0");
    if (name == "log") {
        u.family = UtilitySpec::Family::Log;
    } else if (name == "power") {
        u.family = UtilitySpec::Family::Power;
        u.p = num_or(j, "p", 0.0, path, errs);
        if (!(u.p < 1.0) || u.p == 0.0)
            errs.push_back(path + ".p: must lie in (-inf, 1) and differ from 0");
    } else if (name == "tabulated") {
        u.family = UtilitySpec::Family::Tabulated;
        const auto* table = field(j, "table");
        if (!table || !table->is_object() || !table->contains("y") || !table->contains("i")) {
            errs.push_back(path + ".table: required object with arrays y and i");
            return u;
        }
        u.table_y = table->at("y").get<std::vector<double>>();
        u.table_i = table->at("i").get<std::vector<double>>();
        u.x_min = num_or(j, "x_min", 1e-10, path, errs);
    } else {
        errs.push_back(path + ".family: unknown family '" + name + "'");
    }
    return u;
}

inline EndowmentSpec parse_endowment(const nlohmann::json& j, const std::string& path,
                                     std::vector<std::string>& errs) {
    EndowmentSpec e;
    const auto* kind = field(j, "kind");
    if (!kind || !kind->is_string()) {
        errs.push_back(path + ".kind: required string (multiplicative | explicit | state_map)");
        return e;
    }
    const std::string name = kind->get<std::string>();
    if (name == "multiplicative") {
        e.kind = EndowmentSpec::Kind::Multiplicative;
        e.base = num_or(j, "base", 1.0, path, errs);
        e.lo = num_or(j, "lo", 0.5, path, errs);
        e.hi = num_or(j, "hi", 2.0, path, errs);
        e.seed = seed_or(j, "seed", 0, path, errs);
        if (!(e.lo > 0.0) || !(e.hi > e.lo))
            errs.push_back(path + ": needs 0 < lo < hi");
    } else if (name == "explicit") {
        e.kind = EndowmentSpec::Kind::Explicit;
        if (const auto* v = field(j, "values"))
            e.values = v->get<std::vector<double>>();
        else
            errs.push_back(path + ".values: required array");
    } else if (name == "state_map") {
        e.kind = EndowmentSpec::Kind::StateMap;
        if (const auto* v = field(j, "values"))
            e.values = v->get<std::vector<double>>();
        else
            errs.push_back(path + ".values: required array (one entry per chain state)");
    } else {
        errs.push_back(path + ".kind: unknown endowment kind '" + name + "'");
    }
    return e;
}

inline CapSpec parse_cap(const nlohmann::json& j, const std::string& path,
                         std::vector<std::string>& errs) {
    CapSpec c;
    const auto* kind = field(j, "kind");
    if (!kind || !kind->is_string()) {
        errs.push_back(path + ".kind: required string (none | proportional | overdraft | explicit)");
        return c;
    }
    const std::string name = kind->get<std::string>();
    if (name == "none") {
        c.kind = CapSpec::Kind::None;
    } else if (name == "proportional") {
        c.kind = CapSpec::Kind::Proportional;
        c.gamma = num_or(j, "gamma", 0.0, path, errs);
        if (!(c.gamma > 1.0))
            errs.push_back(path + ".gamma: must be > 1 so the cap exceeds the endowment");
    } else if (name == "overdraft") {
        c.kind = CapSpec::Kind::Overdraft;
        c.delta = num_or(j, "delta", 0.0, path, errs);
        if (!(c.delta > 0.0)) errs.push_back(path + ".delta: must be > 0");
    } else if (name == "explicit") {
        c.kind = CapSpec::Kind::Explicit;
        if (const auto* v = field(j, "values"))
            c.values = v->get<std::vector<double>>();
        else
            errs.push_back(path + ".values: required array");
    } else {
        errs.push_back(path + ".kind: unknown cap kind '" + name + "'");
    }
    return c;
}

inline TreeSpec parse_tree(const nlohmann::json& j, const std::string& path,
                           std::vector<std::string>& errs) {
    TreeSpec t;
    const auto* gen = field(j, "generator");
    if (!gen || !gen->is_string()) {
        errs.push_back(path + ".generator: required string (uniform | markov | explicit)");
        return t;
    }
    if (const auto* times = field(j, "times")) t.times = times->get<std::vector<double>>();
    const std::string name = gen->get<std::string>();
    if (name == "uniform") {
        t.kind = TreeSpec::Kind::Uniform;
        t.depth = static_cast<int>(num_or(j, "K", 0.0, path, errs));
        t.branching = static_cast<int>(num_or(j, "branching", 0.0, path, errs));
        t.seed = seed_or(j, "seed", 0, path, errs);
        if (const auto* probs = field(j, "probs")) {
            if (probs->is_string() && probs->get<std::string>() == "random")
                t.random_probs = true;
            else if (probs->is_array())
                t.probs = probs->get<std::vector<double>>();
            else
                errs.push_back(path + ".probs: expected an array or \"random\"");
        }
    } else if (name == "markov") {
        t.kind = TreeSpec::Kind::Markov;
        t.depth = static_cast<int>(num_or(j, "K", 0.0, path, errs));
        t.initial_state = static_cast<int>(num_or(j, "initial_state", 0.0, path, errs));
        if (const auto* tr = field(j, "transition"))
            t.transition = tr->get<std::vector<std::vector<double>>>();
        else
            errs.push_back(path + ".transition: required matrix");
    } else if (name == "explicit") {
        t.kind = TreeSpec::Kind::Explicit;
        const auto* nodes = field(j, "nodes");
        if (!nodes || !nodes->is_array()) {
            errs.push_back(path + ".nodes: required array");
            return t;
        }
        for (const auto& jn : *nodes) {
            TreeSpec::ExplicitNode en;
            en.id = static_cast<int>(jn.at("id").get<double>());
            en.level = static_cast<int>(jn.at("level").get<double>());
            en.parent = static_cast<int>(jn.at("parent").get<double>());
            en.p_cond = jn.at("p_cond").get<double>();
            t.explicit_nodes.push_back(en);
        }
        if (t.times.empty()) errs.push_back(path + ".times: required for explicit trees");
    } else {
        errs.push_back(path + ".generator: unknown generator '" + name + "'");
    }
    return t;
}

}  // namespace detail

inline Scenario parse_scenario(const nlohmann::json& j) {
    std::vector<std::string> errs;
    Scenario sc;
    if (!j.is_object()) throw ScenarioError({"top level: expected an object"});
    if (const auto* schema = detail::field(j, "schema")) {
        if (!schema->is_number_integer() || schema->get<int>() != 1)
            errs.push_back("schema: this reader understands schema 1 only");
    } else {
        errs.push_back("schema: required field (set it to 1)");
    }
    sc.seed = detail::seed_or(j, "seed", 0, "", errs);
    if (const auto* tree = detail::field(j, "tree"))
        sc.tree = detail::parse_tree(*tree, "tree", errs);
    else
        errs.push_back("tree: required object");
    const auto* agents = detail::field(j, "agents");
    if (!agents || !agents->is_array() || agents->empty()) {
        errs.push_back("agents: required non-empty array");
    } else {
        for (std::size_t i = 0; i < agents->size(); ++i) {
            const std::string path = "agents[" + std::to_string(i) + "]";
            const auto& ja = (*agents)[i];
            AgentScenario a;
            if (const auto* u = detail::field(ja, "utility"))
                a.utility = detail::parse_utility(*u, path + ".utility", errs);
            else
                errs.push_back(path + ".utility: required object");
            if (const auto* e = detail::field(ja, "endowment"))
                a.endowment = detail::parse_endowment(*e, path + ".endowment", errs);
            else
                errs.push_back(path + ".endowment: required object");
            if (const auto* c = detail::field(ja, "cap"))
                a.cap = detail::parse_cap(*c, path + ".cap", errs);
            a.epsilon = detail::num_or(ja, "epsilon", 0.0, path, errs);
            sc.agents.push_back(std::move(a));
        }
    }
    if (const auto* solver = detail::field(j, "solver")) {
        sc.solver.tol = detail::num_or(*solver, "tol", sc.solver.tol, "solver", errs);
        sc.solver.max_iters = static_cast<int>(
            detail::num_or(*solver, "max_iters", sc.solver.max_iters, "solver", errs));
        sc.solver.step0 = detail::num_or(*solver, "step0", sc.solver.step0, "solver", errs);
        if (const auto* acc = detail::field(*solver, "accelerate"))
            sc.solver.accelerate = acc->get<bool>();
        if (const auto* cc = detail::field(*solver, "cross_check"))
            sc.cross_check = cc->get<bool>();
    }
    if (const auto* out = detail::field(j, "output")) {
        sc.output.deviations =
            static_cast<int>(detail::num_or(*out, "deviations", 0.0, "output", errs));
        sc.output.deviation_seed =
            detail::seed_or(*out, "deviation_seed", 4242, "output", errs);
    }
    if (!errs.empty()) throw ScenarioError(std::move(errs));
    return sc;
}

inline Scenario parse_scenario_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("scenario file not found: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("scenario file is not valid JSON: " + std::string(e.what()));
    }
    return parse_scenario(j);
}

inline nlohmann::json scenario_to_json(const Scenario& sc) {
    nlohmann::json j;
    j["schema"] = sc.schema;
    j["seed"] = sc.seed;
    nlohmann::json jt;
    switch (sc.tree.kind) {
        case TreeSpec::Kind::Uniform:
            jt["generator"] = "uniform";
            jt["K"] = sc.tree.depth;
            jt["branching"] = sc.tree.branching;
            if (sc.tree.random_probs)
                jt["probs"] = "random";
            else if (!sc.tree.probs.empty())
                jt["probs"] = sc.tree.probs;
            jt["seed"] = sc.tree.seed;
            break;
        case TreeSpec::Kind::Markov:
            jt["generator"] = "markov";
            jt["K"] = sc.tree.depth;
            jt["transition"] = sc.tree.transition;
            jt["initial_state"] = sc.tree.initial_state;
            break;
        case TreeSpec::Kind::Explicit: {
            jt["generator"] = "explicit";
            auto& nodes = jt["nodes"] = nlohmann::json::array();
            for (const auto& en : sc.tree.explicit_nodes)
                nodes.push_back({{"id", en.id},
                                 {"level", en.level},
                                 {"parent", en.parent},
                                 {"p_cond", en.p_cond}});
            break;
        }
    }
    if (!sc.tree.times.empty()) jt["times"] = sc.tree.times;
    j["tree"] = std::move(jt);
    auto& ja = j["agents"] = nlohmann::json::array();
    for (const auto& a : sc.agents) {
        nlohmann::json u;
        switch (a.utility.family) {
            case UtilitySpec::Family::Log:
                u["family"] = "log";
                break;
            case UtilitySpec::Family::Power:
                u["family"] = "power";
                u["p"] = a.utility.p;
                break;
            case UtilitySpec::Family::Tabulated:
                u["family"] = "tabulated";
                u["table"] = {{"y", a.utility.table_y}, {"i", a.utility.table_i}};
                break;
        }
        u["beta"] = a.utility.beta;
        nlohmann::json e;
        switch (a.endowment.kind) {
            case EndowmentSpec::Kind::Multiplicative:
                e = {{"kind", "multiplicative"}, {"base", a.endowment.base},
                     {"lo", a.endowment.lo},     {"hi", a.endowment.hi},
                     {"seed", a.endowment.seed}};
                break;
            case EndowmentSpec::Kind::Explicit:
                e = {{"kind", "explicit"}, {"values", a.endowment.values}};
                break;
            case EndowmentSpec::Kind::StateMap:
                e = {{"kind", "state_map"}, {"values", a.endowment.values}};
                break;
        }
        nlohmann::json c;
        switch (a.cap.kind) {
            case CapSpec::Kind::None:
                c = {{"kind", "none"}};
                break;
            case CapSpec::Kind::Proportional:
                c = {{"kind", "proportional"}, {"gamma", a.cap.gamma}};
                break;
            case CapSpec::Kind::Overdraft:
                c = {{"kind", "overdraft"}, {"delta", a.cap.delta}};
                break;
            case CapSpec::Kind::Explicit:
                c = {{"kind", "explicit"}, {"values", a.cap.values}};
                break;
        }
        nlohmann::json row = {{"utility", u}, {"endowment", e}, {"cap", c}};
        if (a.epsilon != 0.0) row["epsilon"] = a.epsilon;
        ja.push_back(std::move(row));
    }
    j["solver"] = {{"tol", sc.solver.tol},
                   {"max_iters", sc.solver.max_iters},
                   {"step0", sc.solver.step0},
                   {"accelerate", sc.solver.accelerate},
                   {"cross_check", sc.cross_check}};
    j["output"] = {{"deviations", sc.output.deviations},
                   {"deviation_seed", sc.output.deviation_seed}};
    return j;
}

// ---------------------------------------------------------------------------
// Materialization
// ---------------------------------------------------------------------------

struct Materialized {
    EventTree tree;
    std::vector<AgentSpec> agents;
};

/// Builds the tree and the agents, mixing the master seed into every
/// generator stream so that one --seed flag reshuffles the whole scenario.
inline Materialized materialize(const Scenario& sc) {
    Materialized m;
    TreeSpec ts = sc.tree;
    if (sc.seed != 0) ts.seed = mix_seed(sc.seed, ts.seed + 1);
    m.tree = build_tree(ts);
    for (std::size_t i = 0; i < sc.agents.size(); ++i) {
        const auto& a = sc.agents[i];
        AgentSpec spec;
        spec.utility = a.utility;
        spec.epsilon = a.epsilon;
        switch (a.endowment.kind) {
            case EndowmentSpec::Kind::Multiplicative: {
                std::uint64_t seed = a.endowment.seed;
                if (sc.seed != 0) seed = mix_seed(sc.seed, 1000 + i + seed);
                spec.endowment = multiplicative_endowment(m.tree, seed, a.endowment.lo,
                                                          a.endowment.hi, a.endowment.base);
                break;
            }
            case EndowmentSpec::Kind::Explicit:
                if (a.endowment.values.size() != m.tree.size())
                    throw ScenarioError({"agents[" + std::to_string(i) +
                                         "].endowment.values: expected " +
                                         std::to_string(m.tree.size()) + " entries"});
                spec.endowment = TreeProcess{Flavor::Adapted, a.endowment.values};
                break;
            case EndowmentSpec::Kind::StateMap: {
                if (m.tree.state.empty())
                    throw ScenarioError({"agents[" + std::to_string(i) +
                                         "].endowment: state_map needs a markov tree"});
                spec.endowment =
                    TreeProcess{Flavor::Adapted, std::vector<double>(m.tree.size(), 0.0)};
                for (std::size_t v = 0; v < m.tree.size(); ++v) {
                    const int s = m.tree.state[v];
                    if (s < 0 || s >= static_cast<int>(a.endowment.values.size()))
                        throw ScenarioError({"agents[" + std::to_string(i) +
                                             "].endowment.values: missing entry for state " +
                                             std::to_string(s)});
                    spec.endowment.values[v] = a.endowment.values[s];
                }
                break;
            }
        }
        const int last = m.tree.max_level();
        switch (a.cap.kind) {
            case CapSpec::Kind::None:
                spec.cap = constant_process(m.tree, kInf);
                break;
            case CapSpec::Kind::Proportional:
                spec.cap = make_process(m.tree, Flavor::Adapted, [&](const EventTree::Node& n) {
                    return n.level == last ? kInf : a.cap.gamma * spec.endowment.values[n.id];
                });
                break;
            case CapSpec::Kind::Overdraft:
                spec.cap = make_process(m.tree, Flavor::Adapted, [&](const EventTree::Node& n) {
                    return n.level == last ? kInf : spec.endowment.values[n.id] + a.cap.delta;
                });
                break;
            case CapSpec::Kind::Explicit:
                if (a.cap.values.size() != m.tree.size())
                    throw ScenarioError({"agents[" + std::to_string(i) +
                                         "].cap.values: expected " +
                                         std::to_string(m.tree.size()) + " entries"});
                spec.cap = TreeProcess{Flavor::Adapted, a.cap.values};
                break;
        }
        try {
            validate_agent(m.tree, spec);
        } catch (const std::invalid_argument& e) {
            throw ScenarioError({"agents[" + std::to_string(i) + "]: " + e.what()});
        }
        m.agents.push_back(std::move(spec));
    }
    return m;
}

}  // namespace equilibrage
