#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "equilibrage/util.hpp"

namespace equilibrage {

// Residual tolerances used when constructing processes vs. when verifying
// third-party input; see the certificate checks for the verification side.
inline constexpr double kConstructTol = 1e-13;
inline constexpr double kVerifyTol = 1e-12;

// ---------------------------------------------------------------------------
// Time grid and the consumption measure
// ---------------------------------------------------------------------------

/// Weights of the consumption measure on a strictly increasing grid
/// t_0 = 0 < ... < t_K = T: Lebesgue on [0,T) sampled left-endpoint
/// (w_k = t_{k+1} - t_k) plus a unit atom at T (w_K = 1).
inline std::vector<double> kappa_weights(const std::vector<double>& times) {
    if (times.size() < 2)
        throw std::invalid_argument("time grid needs at least two points");
    if (times.front() != 0.0)
        throw std::invalid_argument("time grid must start at t = 0");
    for (std::size_t k = 0; k + 1 < times.size(); ++k)
        if (!(times[k] < times[k + 1]))
            throw std::invalid_argument("time grid must be strictly increasing at index " +
                                        std::to_string(k));
    std::vector<double> w(times.size());
    for (std::size_t k = 0; k + 1 < times.size(); ++k) w[k] = times[k + 1] - times[k];
    w.back() = 1.0;
    return w;
}

struct TimeGrid {
    std::vector<double> times;
    std::vector<double> kappa;

    int max_level() const { return static_cast<int>(times.size()) - 1; }
    double horizon() const { return times.back(); }
};

inline TimeGrid make_time_grid(std::vector<double> times) {
    TimeGrid g;
    g.kappa = kappa_weights(times);
    g.times = std::move(times);
    return g;
}

inline TimeGrid uniform_time_grid(int levels, double horizon = 1.0) {
    if (levels < 1) throw std::invalid_argument("levels must be >= 1");
    std::vector<double> t(levels + 1);
    for (int k = 0; k <= levels; ++k) t[k] = horizon * k / levels;
    t[levels] = horizon;
    return make_time_grid(std::move(t));
}

// ---------------------------------------------------------------------------
// Event trees
// ---------------------------------------------------------------------------

/// A finite filtration: one root, all leaves at the final level, strictly
/// positive one-step conditional probabilities. Nodes are stored level-major
/// in a stable order; ids equal vector positions.
struct EventTree {
    struct Node {
        int id = 0;
        int level = 0;
        int parent = -1;
        double p_cond = 1.0;  // conditional probability given the parent
        double p_path = 1.0;  // unconditional probability of reaching the node
        std::vector<int> children;
    };

    TimeGrid grid;
    std::vector<Node> nodes;
    std::vector<std::vector<int>> levels;
    std::vector<int> state;  // chain state per node; empty unless Markov-generated

    int max_level() const { return grid.max_level(); }
    std::size_t size() const { return nodes.size(); }
    const std::vector<int>& leaves() const { return levels.back(); }
    double time_of(int id) const { return grid.times[nodes[id].level]; }
    double weight_of(int id) const { return grid.kappa[nodes[id].level]; }
};

inline void validate_event_tree(const EventTree& tree) {
    const int last = tree.max_level();
    if (static_cast<int>(tree.levels.size()) != last + 1)
        throw std::invalid_argument("tree/grid level count mismatch");
    if (tree.levels[0].size() != 1)
        throw std::invalid_argument("tree must have a unique root");
    for (const auto& n : tree.nodes) {
        if (n.level < last && n.children.empty())
            throw std::invalid_argument("node " + std::to_string(n.id) +
                                        " at level " + std::to_string(n.level) +
                                        " is a leaf before the final level");
        if (n.level == last && !n.children.empty())
            throw std::invalid_argument("node " + std::to_string(n.id) +
                                        " has children past the final level");
        if (!(n.p_cond > 0.0))
            throw std::invalid_argument("node " + std::to_string(n.id) +
                                        " has non-positive conditional probability");
        if (!(n.p_path > 0.0))
            throw std::invalid_argument("node " + std::to_string(n.id) +
                                        " has non-positive path probability");
        if (!n.children.empty()) {
            double s = 0.0;
            for (int c : n.children) s += tree.nodes[c].p_cond;
            if (std::abs(s - 1.0) > 1e-14 * n.children.size())
                throw std::invalid_argument("conditional probabilities of node " +
                                            std::to_string(n.id) + " sum to " +
                                            format_double(s));
        }
    }
}

// ---------------------------------------------------------------------------
// Tree generators
// ---------------------------------------------------------------------------

struct TreeSpec {
    enum class Kind { Uniform, Markov, Explicit };

    Kind kind = Kind::Uniform;
    std::vector<double> times;  // empty: uniform grid on [0, 1]

    // uniform-branching generator
    int depth = 0;
    int branching = 0;
    std::vector<double> probs;  // per-child conditional probabilities; empty = equal
    bool random_probs = false;  // draw per-node probabilities from `seed`
    std::uint64_t seed = 0;

    // finite-Markov-chain generator: children of a state are the states
    // reachable with positive probability
    std::vector<std::vector<double>> transition;
    int initial_state = 0;

    // explicit node list
    struct ExplicitNode {
        int id = 0, level = 0, parent = -1;
        double p_cond = 1.0;
    };
    std::vector<ExplicitNode> explicit_nodes;
};

namespace detail {

inline EventTree assemble(TimeGrid grid, int depth,
                          const std::function<std::vector<double>(int node_id, int level)>&
                              child_probs) {
    EventTree tree;
    tree.grid = std::move(grid);
    tree.levels.resize(depth + 1);
    tree.nodes.push_back({0, 0, -1, 1.0, 1.0, {}});
    tree.levels[0] = {0};

    for (int level = 0; level < depth; ++level) {
        for (int u : tree.levels[level]) {
            const std::vector<double> probs = child_probs(u, level);
            for (double p : probs) {
                EventTree::Node c;
                c.id = static_cast<int>(tree.nodes.size());
                c.level = level + 1;
                c.parent = u;
                c.p_cond = p;
                c.p_path = tree.nodes[u].p_path * p;
                tree.nodes[u].children.push_back(c.id);
                tree.levels[level + 1].push_back(c.id);
                tree.nodes.push_back(std::move(c));
            }
        }
    }
    validate_event_tree(tree);
    return tree;
}

}  // namespace detail

/// Builds a tree from a generator description. Identical spec and seed give
/// a bit-identical tree.
inline EventTree build_tree(const TreeSpec& spec) {
    TimeGrid grid;
    int depth = 0;
    switch (spec.kind) {
        case TreeSpec::Kind::Uniform:
        case TreeSpec::Kind::Markov:
            depth = spec.depth;
            if (depth < 1) throw std::invalid_argument("tree spec: K must be >= 1");
            grid = spec.times.empty() ? uniform_time_grid(depth)
                                      : make_time_grid(spec.times);
            if (grid.max_level() != depth)
                throw std::invalid_argument("tree spec: times must have K+1 entries");
            break;
        case TreeSpec::Kind::Explicit:
            if (spec.times.empty())
                throw std::invalid_argument("tree spec: explicit trees need times");
            grid = make_time_grid(spec.times);
            depth = grid.max_level();
            break;
    }

    if (spec.kind == TreeSpec::Kind::Uniform) {
        if (spec.branching < 1)
            throw std::invalid_argument("tree spec: branching must be >= 1");
        std::vector<double> base;
        if (!spec.probs.empty()) {
            if (static_cast<int>(spec.probs.size()) != spec.branching)
                throw std::invalid_argument("tree spec: probs must have `branching` entries");
            double s = 0.0;
            for (double p : spec.probs) {
                if (!(p > 0.0))
                    throw std::invalid_argument("tree spec: probs must be strictly positive");
                s += p;
            }
            if (std::abs(s - 1.0) > 1e-12)
                throw std::invalid_argument("tree spec: probs sum to " + format_double(s));
            base = spec.probs;
        } else {
            base.assign(spec.branching, 1.0 / spec.branching);
        }
        auto rng = std::make_shared<Rng>(mix_seed(spec.seed, 0x7265e5));
        const bool random = spec.random_probs;
        return detail::assemble(std::move(grid), depth, [base, rng, random](int, int) {
            if (!random) return base;
            std::vector<double> p(base.size());
            double s = 0.0;
            for (double& v : p) {
                v = rng->uniform(0.5, 1.5);
                s += v;
            }
            for (double& v : p) v /= s;
            return p;
        });
    }

    if (spec.kind == TreeSpec::Kind::Markov) {
        const std::size_t m = spec.transition.size();
        if (m == 0) throw std::invalid_argument("tree spec: empty transition matrix");
        for (std::size_t i = 0; i < m; ++i) {
            if (spec.transition[i].size() != m)
                throw std::invalid_argument("tree spec: transition matrix must be square");
            double s = 0.0;
            bool any = false;
            for (double p : spec.transition[i]) {
                if (p < 0.0)
                    throw std::invalid_argument("tree spec: negative transition probability");
                if (p > 0.0) any = true;
                s += p;
            }
            if (!any)
                throw std::invalid_argument("tree spec: transition row " +
                                            std::to_string(i) + " is empty");
            if (std::abs(s - 1.0) > 1e-12)
                throw std::invalid_argument("tree spec: transition row " +
                                            std::to_string(i) + " sums to " +
                                            format_double(s));
        }
        if (spec.initial_state < 0 || spec.initial_state >= static_cast<int>(m))
            throw std::invalid_argument("tree spec: initial state out of range");

        // reachable states per row, in state order
        std::vector<std::vector<int>> succ(m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j)
                if (spec.transition[i][j] > 0.0) succ[i].push_back(static_cast<int>(j));

        EventTree tree;
        tree.grid = std::move(grid);
        tree.levels.resize(depth + 1);
        tree.nodes.push_back({0, 0, -1, 1.0, 1.0, {}});
        tree.levels[0] = {0};
        tree.state.push_back(spec.initial_state);
        for (int level = 0; level < depth; ++level)
            for (int u : tree.levels[level]) {
                const int s = tree.state[u];
                for (int next : succ[s]) {
                    EventTree::Node c;
                    c.id = static_cast<int>(tree.nodes.size());
                    c.level = level + 1;
                    c.parent = u;
                    c.p_cond = spec.transition[s][next];
                    c.p_path = tree.nodes[u].p_path * c.p_cond;
                    tree.nodes[u].children.push_back(c.id);
                    tree.levels[level + 1].push_back(c.id);
                    tree.state.push_back(next);
                    tree.nodes.push_back(std::move(c));
                }
            }
        validate_event_tree(tree);
        return tree;
    }

    // explicit node list
    EventTree tree;
    tree.grid = std::move(grid);
    tree.levels.resize(depth + 1);
    tree.nodes.resize(spec.explicit_nodes.size());
    for (const auto& en : spec.explicit_nodes) {
        if (en.id < 0 || en.id >= static_cast<int>(spec.explicit_nodes.size()))
            throw std::invalid_argument("explicit tree: node id " + std::to_string(en.id) +
                                        " out of range");
        EventTree::Node n;
        n.id = en.id;
        n.level = en.level;
        n.parent = en.parent;
        n.p_cond = en.p_cond;
        tree.nodes[en.id] = std::move(n);
    }
    for (auto& n : tree.nodes) {
        if (n.level < 0 || n.level > depth)
            throw std::invalid_argument("explicit tree: node " + std::to_string(n.id) +
                                        " has level outside the grid");
        tree.levels[n.level].push_back(n.id);
        if (n.level == 0) {
            if (n.parent != -1)
                throw std::invalid_argument("explicit tree: root must have no parent");
            n.p_path = n.p_cond = 1.0;
        } else {
            if (n.parent < 0 || n.parent >= static_cast<int>(tree.nodes.size()))
                throw std::invalid_argument("explicit tree: node " + std::to_string(n.id) +
                                            " has an invalid parent");
            tree.nodes[n.parent].children.push_back(n.id);
        }
    }
    for (auto& lvl : tree.levels) std::sort(lvl.begin(), lvl.end());
    for (auto& n : tree.nodes) std::sort(n.children.begin(), n.children.end());
    for (int level = 1; level <= depth; ++level)
        for (int id : tree.levels[level]) {
            auto& n = tree.nodes[id];
            if (tree.nodes[n.parent].level != level - 1)
                throw std::invalid_argument("explicit tree: node " + std::to_string(id) +
                                            " skips a level");
            n.p_path = tree.nodes[n.parent].p_path * n.p_cond;
        }
    validate_event_tree(tree);
    return tree;
}

// ---------------------------------------------------------------------------
// Processes on trees
// ---------------------------------------------------------------------------

enum class Flavor { Adapted, Predictable, Optional };

/// One extended-real value per node. Adapted and optional coincide on trees;
/// both labels are kept. Predictable processes are stored per node under a
/// sibling-constancy invariant; +inf is admitted only for cap processes.
struct TreeProcess {
    Flavor flavor = Flavor::Adapted;
    std::vector<double> values;

    double operator[](int id) const { return values[id]; }
    double& operator[](int id) { return values[id]; }
};

inline TreeProcess make_process(const EventTree& tree, Flavor flavor,
                                const std::function<double(const EventTree::Node&)>& f) {
    TreeProcess p;
    p.flavor = flavor;
    p.values.reserve(tree.size());
    for (const auto& n : tree.nodes) p.values.push_back(f(n));
    return p;
}

inline TreeProcess constant_process(const EventTree& tree, double v,
                                    Flavor flavor = Flavor::Adapted) {
    return TreeProcess{flavor, std::vector<double>(tree.size(), v)};
}

inline void check_sized(const EventTree& tree, const TreeProcess& p,
                        const char* what) {
    if (p.values.size() != tree.size())
        throw std::invalid_argument(std::string(what) + ": process/tree size mismatch");
}

/// Sibling constancy; this is what predictability means on a tree.
inline void check_predictable(const EventTree& tree, const TreeProcess& p,
                              const char* what = "process") {
    check_sized(tree, p, what);
    for (const auto& n : tree.nodes)
        for (std::size_t j = 1; j < n.children.size(); ++j)
            if (p.values[n.children[j]] != p.values[n.children[0]])
                throw std::invalid_argument(
                    std::string(what) + " is not predictable: children of node " +
                    std::to_string(n.id) + " differ");
}

inline void check_finite(const EventTree& tree, const TreeProcess& p,
                         const char* what) {
    check_sized(tree, p, what);
    for (const auto& n : tree.nodes)
        if (!std::isfinite(p.values[n.id]))
            throw std::invalid_argument(std::string(what) + ": non-finite value at node " +
                                        std::to_string(n.id));
}

inline double sup_abs(const TreeProcess& p) {
    double m = 0.0;
    for (double v : p.values) m = std::max(m, std::abs(v));
    return m;
}

// ---------------------------------------------------------------------------
// Conditional expectation and the kappa pairing
// ---------------------------------------------------------------------------

/// E[X | F_j] for a process carried by level-k nodes. The result holds the
/// conditional expectations on levels j..k-1 and the input on level k;
/// entries below level j are zero.
inline std::vector<double> conditional_expectation(const EventTree& tree,
                                                   const std::vector<double>& x, int k,
                                                   int j) {
    if (j > k) throw std::invalid_argument("conditional expectation: target level above source");
    if (k > tree.max_level() || j < 0)
        throw std::invalid_argument("conditional expectation: level out of range");
    if (x.size() != tree.size())
        throw std::invalid_argument("conditional expectation: size mismatch");
    for (int id : tree.levels[k])
        if (!std::isfinite(x[id]))
            throw std::invalid_argument("conditional expectation: non-finite value at node " +
                                        std::to_string(id));
    std::vector<double> out(tree.size(), 0.0);
    for (int id : tree.levels[k]) out[id] = x[id];
    for (int level = k - 1; level >= j; --level)
        for (int u : tree.levels[level]) {
            double s = 0.0;
            for (int c : tree.nodes[u].children) s += tree.nodes[c].p_cond * out[c];
            out[u] = s;
        }
    return out;
}

inline TreeProcess conditional_expectation(const EventTree& tree, const TreeProcess& x,
                                           int k, int j) {
    return TreeProcess{Flavor::Adapted, conditional_expectation(tree, x.values, k, j)};
}

/// Full expectation of the level-k slice.
inline double expectation(const EventTree& tree, const std::vector<double>& x, int k) {
    return conditional_expectation(tree, x, k, 0)[0];
}

/// E of the kappa-integral of an adapted process: sum over nodes of
/// path probability * level weight * value. Fixed reduction order.
inline double kappa_expectation(const EventTree& tree, const TreeProcess& x) {
    check_sized(tree, x, "kappa_expectation");
    double s = 0.0;
    for (const auto& n : tree.nodes) s += n.p_path * tree.grid.kappa[n.level] * x.values[n.id];
    return s;
}

// ---------------------------------------------------------------------------
// Doob decomposition, brackets, N-functional
// ---------------------------------------------------------------------------

struct Decomposition {
    TreeProcess martingale_part;   // M, adapted, M_0 = X_0
    TreeProcess predictable_part;  // A, predictable, A_0 = 0
    TreeProcess bracket;           // <M,M>, predictable, non-decreasing
};

/// X = M + A with A predictable, A_0 = 0, dA_k = E[dX_k | F_{k-1}].
/// The decomposition is unique; the bracket accumulates one-step
/// conditional variances of M.
inline Decomposition doob_decompose(const EventTree& tree, const TreeProcess& x) {
    check_finite(tree, x, "doob_decompose");
    Decomposition d;
    d.martingale_part = TreeProcess{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
    d.predictable_part = TreeProcess{Flavor::Predictable, std::vector<double>(tree.size(), 0.0)};
    d.bracket = TreeProcess{Flavor::Predictable, std::vector<double>(tree.size(), 0.0)};
    auto& m = d.martingale_part.values;
    auto& a = d.predictable_part.values;
    auto& br = d.bracket.values;
    m[0] = x.values[0];
    for (const auto& n : tree.nodes) {
        if (n.children.empty()) continue;
        double pred = 0.0;
        for (int c : n.children) pred += tree.nodes[c].p_cond * x.values[c];
        const double drift = pred - x.values[n.id];
        double var = 0.0;
        for (int c : tree.nodes[n.id].children) {
            a[c] = a[n.id] + drift;
            m[c] = x.values[c] - a[c];
        }
        for (int c : tree.nodes[n.id].children) {
            const double dm = m[c] - m[n.id];
            var += tree.nodes[c].p_cond * dm * dm;
        }
        for (int c : tree.nodes[n.id].children) br[c] = br[n.id] + var;
    }
    return d;
}

inline double martingale_residual(const EventTree& tree, const TreeProcess& m) {
    check_sized(tree, m, "martingale_residual");
    double worst = 0.0;
    for (const auto& n : tree.nodes) {
        if (n.children.empty()) continue;
        double s = 0.0;
        for (int c : n.children) s += tree.nodes[c].p_cond * m.values[c];
        worst = std::max(worst, std::abs(s - m.values[n.id]));
    }
    return worst;
}

/// <M,M> for a process that is already a martingale (checked).
inline TreeProcess predictable_bracket(const EventTree& tree, const TreeProcess& m) {
    check_finite(tree, m, "predictable_bracket");
    const double resid = martingale_residual(tree, m);
    const double scale = std::max(1.0, sup_abs(m));
    if (resid > kConstructTol * scale)
        throw std::invalid_argument("predictable_bracket: input is not a martingale "
                                    "(max residual " + format_double(resid) + ")");
    TreeProcess br{Flavor::Predictable, std::vector<double>(tree.size(), 0.0)};
    for (const auto& n : tree.nodes) {
        if (n.children.empty()) continue;
        double var = 0.0;
        for (int c : n.children) {
            const double dm = m.values[c] - m.values[n.id];
            var += tree.nodes[c].p_cond * dm * dm;
        }
        for (int c : n.children) br.values[c] = br.values[n.id] + var;
    }
    return br;
}

/// Terminal value of the bracket of the martingale part, as a sup over
/// leaves; the integrability gauge for endowments and caps.
inline double n_functional(const EventTree& tree, const TreeProcess& x) {
    const Decomposition d = doob_decompose(tree, x);
    double worst = 0.0;
    for (int id : tree.leaves()) worst = std::max(worst, d.bracket.values[id]);
    return worst;
}

// ---------------------------------------------------------------------------
// Multiplicative decomposition and measure changes
// ---------------------------------------------------------------------------

struct MultiplicativeDecomposition {
    TreeProcess martingale;       // strictly positive, mean-one increments
    TreeProcess predictable_part; // beta, predictable, strictly positive, beta_0 = 1
};

/// X = Qhat * beta for strictly positive X. beta grows by the one-step
/// predictable projection ratio, the reciprocal of which compensates X.
inline MultiplicativeDecomposition multiplicative_decompose(const EventTree& tree,
                                                            const TreeProcess& x) {
    check_finite(tree, x, "multiplicative_decompose");
    for (const auto& n : tree.nodes)
        if (!(x.values[n.id] > 0.0))
            throw std::invalid_argument("multiplicative_decompose: non-positive value at node " +
                                        std::to_string(n.id));
    MultiplicativeDecomposition d;
    d.predictable_part = TreeProcess{Flavor::Predictable, std::vector<double>(tree.size(), 1.0)};
    d.martingale = TreeProcess{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
    auto& beta = d.predictable_part.values;
    auto& q = d.martingale.values;
    q[0] = x.values[0];
    for (const auto& n : tree.nodes) {
        if (n.children.empty()) continue;
        double pred = 0.0;
        for (int c : n.children) pred += tree.nodes[c].p_cond * x.values[c];
        const double ratio = pred / x.values[n.id];
        for (int c : n.children) {
            beta[c] = beta[n.id] * ratio;
            q[c] = x.values[c] / beta[c];
        }
    }
    return d;
}

/// Reweights conditional probabilities by a strictly positive martingale
/// with Z_0 = 1: p'(u->v) = p(u->v) Z(v)/Z(u).
inline EventTree change_of_measure(const EventTree& tree, const TreeProcess& z) {
    check_finite(tree, z, "change_of_measure");
    if (std::abs(z.values[0] - 1.0) > kVerifyTol)
        throw std::invalid_argument("change_of_measure: density must start at 1");
    for (const auto& n : tree.nodes)
        if (!(z.values[n.id] > 0.0))
            throw std::invalid_argument("change_of_measure: non-positive density at node " +
                                        std::to_string(n.id));
    const double resid = martingale_residual(tree, z);
    if (resid > kConstructTol * std::max(1.0, sup_abs(z)))
        throw std::invalid_argument("change_of_measure: density is not a martingale "
                                    "(max residual " + format_double(resid) + ")");
    EventTree out = tree;
    for (auto& n : out.nodes) {
        if (n.parent < 0) continue;
        n.p_cond = tree.nodes[n.id].p_cond * z.values[n.id] / z.values[n.parent];
        n.p_path = out.nodes[n.parent].p_path * n.p_cond;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization: nodes in (level, stable index) order
// ---------------------------------------------------------------------------

inline nlohmann::json tree_to_json(const EventTree& tree) {
    nlohmann::json j;
    j["grid"] = {{"times", tree.grid.times}};
    auto& nodes = j["nodes"] = nlohmann::json::array();
    for (const auto& lvl : tree.levels)
        for (int id : lvl) {
            const auto& n = tree.nodes[id];
            nodes.push_back({{"id", n.id},
                             {"level", n.level},
                             {"parent", n.parent},
                             {"p_cond", n.p_cond}});
        }
    if (!tree.state.empty()) j["state"] = tree.state;
    return j;
}

inline EventTree tree_from_json(const nlohmann::json& j) {
    TreeSpec spec;
    spec.kind = TreeSpec::Kind::Explicit;
    spec.times = j.at("grid").at("times").get<std::vector<double>>();
    for (const auto& jn : j.at("nodes")) {
        TreeSpec::ExplicitNode en;
        en.id = jn.at("id").get<int>();
        en.level = jn.at("level").get<int>();
        en.parent = jn.at("parent").get<int>();
        en.p_cond = jn.at("p_cond").get<double>();
        spec.explicit_nodes.push_back(en);
    }
    EventTree tree = build_tree(spec);
    if (j.contains("state")) tree.state = j.at("state").get<std::vector<int>>();
    return tree;
}

}  // namespace equilibrage
