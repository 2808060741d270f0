#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"

#include "equilibrage/lattice.hpp"
#include "equilibrage/marketize.hpp"
#include "equilibrage/negishi.hpp"
#include "equilibrage/preferences.hpp"
#include "equilibrage/util.hpp"

namespace equilibrage {

// ---------------------------------------------------------------------------
// Certificates
// ---------------------------------------------------------------------------

struct CertificateCheck {
    std::string check;
    std::string paper_anchor;  // the equilibrium property the check realizes
    double residual = 0.0;
    double tol = 0.0;
    bool pass = false;
};

struct Certificate {
    std::vector<CertificateCheck> checks;
    std::vector<std::string> notes;
    bool overall = true;

    void add(std::string name, std::string anchor, double residual, double tol) {
        const bool ok = residual <= tol;
        overall = overall && ok;
        checks.push_back({std::move(name), std::move(anchor), residual, tol, ok});
    }
};

inline nlohmann::json certificate_to_json(const Certificate& cert) {
    nlohmann::json j;
    j["overall"] = cert.overall;
    j["notes"] = cert.notes;
    auto& arr = j["checks"] = nlohmann::json::array();
    for (const auto& c : cert.checks)
        arr.push_back({{"check", c.check},
                       {"paper_anchor", c.paper_anchor},
                       {"residual", c.residual},
                       {"tol", c.tol},
                       {"pass", c.pass}});
    return j;
}

// ---------------------------------------------------------------------------
// Unique equivalent martingale measure
// ---------------------------------------------------------------------------

struct UniquenessReport {
    bool pass = true;
    double max_probability_gap = 0.0;  // against the reweighted tree
    int failing_node = -1;
    std::string reason;
};

/// Per node, solves the linear system that any one-step martingale measure
/// for S/B must satisfy and checks that the solution exists, is unique,
/// strictly positive, and coincides with the reweighted tree.
inline UniquenessReport uniqueness_check(const EventTree& tree, const EventTree& qhat,
                                         const Market& market) {
    UniquenessReport rep;
    for (const auto& n : tree.nodes) {
        if (n.children.empty()) continue;
        const int m = static_cast<int>(n.children.size());
        // rows: active discounted-asset increments must have mean zero;
        // last row: probabilities sum to one
        std::vector<std::vector<double>> a;
        std::vector<double> b;
        for (std::size_t j = 0; j < market.assets.size(); ++j) {
            std::vector<double> row(m);
            const double level = std::abs(market.assets[j].values[n.id] /
                                          market.bond.values[n.id]);
            double peak = 0.0;
            for (int c = 0; c < m; ++c) {
                const int v = n.children[c];
                row[c] = market.assets[j].values[v] / market.bond.values[v] -
                         market.assets[j].values[n.id] / market.bond.values[n.id];
                peak = std::max(peak, std::abs(row[c]));
            }
            // components that do not move at this node carry only rounding
            // noise in the discounted ratio; they span nothing
            if (peak > 1e-12 * std::max(1.0, level)) {
                a.push_back(std::move(row));
                b.push_back(0.0);
            }
        }
        if (static_cast<int>(a.size()) != m - 1) {
            rep.pass = false;
            rep.failing_node = n.id;
            rep.reason = "increment frame at node " + std::to_string(n.id) + " has rank " +
                         std::to_string(a.size()) + ", expected " + std::to_string(m - 1);
            return rep;
        }
        a.push_back(std::vector<double>(m, 1.0));
        b.push_back(1.0);
        std::vector<double> p;
        if (!solve_dense(a, b, p, 1e-12)) {
            rep.pass = false;
            rep.failing_node = n.id;
            rep.reason = "martingale-measure system is rank deficient at node " +
                         std::to_string(n.id);
            return rep;
        }
        for (int c = 0; c < m; ++c) {
            if (!(p[c] > 0.0)) {
                rep.pass = false;
                rep.failing_node = n.id;
                rep.reason = "martingale measure not strictly positive at node " +
                             std::to_string(n.id);
                return rep;
            }
            rep.max_probability_gap = std::max(
                rep.max_probability_gap, std::abs(p[c] - qhat.nodes[n.children[c]].p_cond));
        }
    }
    if (rep.max_probability_gap > 1e-10) {
        rep.pass = false;
        rep.reason = "martingale measure differs from the reweighted tree by " +
                     format_double(rep.max_probability_gap);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Independent best response
// ---------------------------------------------------------------------------

/// Maximizes the agent's utility over the budget set by a scalar search on
/// the multiplier: c(mu) = min(cap, I(t, mu Q)) with the budget monotone in
/// mu. Shares no state with the equilibrium solver.
inline TreeProcess oracle_best_response(const EventTree& tree, const AgentSpec& agent,
                                        const TreeProcess& q) {
    check_sized(tree, q, "oracle_best_response");
    double budget = 0.0;
    for (const auto& n : tree.nodes)
        budget += n.p_path * tree.grid.kappa[n.level] * q.values[n.id] *
                  agent.endowment.values[n.id];
    const auto spend = [&](double mu) {
        double total = 0.0;
        for (const auto& n : tree.nodes) {
            const double c =
                std::min(agent.cap.values[n.id],
                         eval_inverse_marginal(agent.utility, tree.grid.times[n.level],
                                               mu * q.values[n.id]));
            total += n.p_path * tree.grid.kappa[n.level] * q.values[n.id] * c;
        }
        return total - budget;
    };
    const double mu = bisect_decreasing(spend, 1.0, 1e-11 * budget);
    TreeProcess c{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
    for (const auto& n : tree.nodes)
        c.values[n.id] = std::min(agent.cap.values[n.id],
                                  eval_inverse_marginal(agent.utility,
                                                        tree.grid.times[n.level],
                                                        mu * q.values[n.id]));
    return c;
}

// ---------------------------------------------------------------------------
// Random affordable deviations
// ---------------------------------------------------------------------------

struct DeviationReport {
    int count = 0;
    double max_gap = -kInf;        // best improvement found over the equilibrium
    double min_terminal = kInf;    // worst terminal wealth across deviations
    double equilibrium_utility = 0.0;
    bool pass = true;              // no deviation beats equilibrium beyond 1e-9
};

/// Seeded affordable deviations built through the discounted-wealth
/// identity: draw a capped consumption plan, scale it into the budget, and
/// hedge its net flows on the basis, which keeps terminal wealth
/// nonnegative by construction (verified per deviation). None may beat the
/// equilibrium utility.
inline DeviationReport deviation_test(const EventTree& tree, const MarketRealization& mr,
                                      const AgentSpec& agent, const TreeProcess& q,
                                      const TreeProcess& equilibrium_c, int count,
                                      std::uint64_t seed) {
    DeviationReport rep;
    rep.count = count;
    rep.equilibrium_utility = utility_functional(tree, agent.utility, equilibrium_c);
    double budget = 0.0, e_peak = 0.0;
    for (const auto& n : tree.nodes) {
        budget += n.p_path * tree.grid.kappa[n.level] * q.values[n.id] *
                  agent.endowment.values[n.id];
        e_peak = std::max(e_peak, agent.endowment.values[n.id]);
    }
    for (int rep_i = 0; rep_i < count; ++rep_i) {
        Rng rng(mix_seed(seed, rep_i));
        TreeProcess c{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
        for (const auto& n : tree.nodes)
            c.values[n.id] = rng.uniform(0.05, 1.0) *
                             std::min(agent.cap.values[n.id], 3.0 * e_peak);
        double price = 0.0;
        for (const auto& n : tree.nodes)
            price += n.p_path * tree.grid.kappa[n.level] * q.values[n.id] * c.values[n.id];
        if (price > budget)
            for (auto& v : c.values) v *= budget / price;

        // hedge the net flows so the pair (H, c) is an affordable strategy
        std::vector<double> terminal(tree.size(), 0.0);
        for (int leaf : mr.qhat.leaves()) {
            double total = 0.0;
            for (int v = leaf; v >= 0; v = mr.qhat.nodes[v].parent)
                total += mr.beta.values[v] * (c.values[v] - agent.endowment.values[v]) *
                         tree.grid.kappa[tree.nodes[v].level];
            terminal[leaf] = total;
        }
        const TreeProcess target{
            Flavor::Adapted,
            conditional_expectation(mr.qhat, terminal, mr.qhat.max_level(), 0)};
        const auto holdings = represent(mr.qhat, mr.basis, target);
        const TreeProcess wealth =
            simulate_wealth(tree, mr.market, holdings, c, agent.endowment);
        for (int leaf : tree.leaves())
            rep.min_terminal = std::min(rep.min_terminal, wealth.values[leaf]);

        const double u = utility_functional(tree, agent.utility, c);
        rep.max_gap = std::max(rep.max_gap, u - rep.equilibrium_utility);
    }
    rep.pass = rep.max_gap <= 1e-9 && rep.min_terminal >= -1e-9;
    return rep;
}

// ---------------------------------------------------------------------------
// End-to-end certification
// ---------------------------------------------------------------------------

/// Aggregates every equilibrium property into one certificate: clearing,
/// zero net supply, budgets, first-order conditions and duality,
/// affordability, the martingale property of discounted assets, uniqueness
/// of the pricing measure, boundedness, and the density factorization.
inline Certificate certify(const EventTree& tree, const std::vector<AgentSpec>& agents,
                           const EquilibriumSolution& sol, const MarketRealization& mr) {
    Certificate cert;
    cert.notes.push_back(
        "basis orthogonality is enforced conditionally (predictable bracket); pathwise "
        "bracket orthogonality is unattainable when all components jump on the same grid");

    const std::size_t d = agents.size();
    {
        double worst = 0.0;
        for (const auto& n : tree.nodes) {
            double csum = 0.0, esum = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                csum += sol.allocations[i].values[n.id];
                esum += agents[i].endowment.values[n.id];
            }
            worst = std::max(worst, std::abs(csum - esum) / esum);
        }
        cert.add("nodewise clearing", "aggregate consumption equals aggregate endowment",
                 worst, 1e-10);
    }
    {
        double worst = 0.0;
        for (std::size_t j = 0; j < mr.market.assets.size(); ++j)
            for (std::size_t v = 0; v < tree.size(); ++v) {
                double sum = 0.0;
                for (std::size_t i = 0; i < d; ++i) sum += mr.portfolios[i][j].values[v];
                worst = std::max(worst, std::abs(sum));
            }
        cert.add("portfolio clearing", "risky assets in zero net supply", worst, 0.0);
    }
    {
        double worst = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            double scale = 0.0;
            for (const auto& n : tree.nodes)
                scale += n.p_path * tree.grid.kappa[n.level] * sol.q.values[n.id] *
                         agents[i].endowment.values[n.id];
            worst = std::max(worst, std::abs(sol.residuals[i]) / scale);
        }
        cert.add("budget equalities", "each agent spends exactly the endowment value",
                 worst, 1e-9);
    }
    {
        const KktReport kkt = kkt_certificate(tree, agents, sol);
        cert.add("first-order conditions",
                 "marginal utility matches the weighted density off the cap",
                 std::max(kkt.max_interior_residual, std::max(0.0, kkt.max_cap_violation)),
                 1e-8);
        double gap = 0.0;
        for (double g : kkt.dual_gaps) gap = std::max(gap, g);
        cert.add("strong duality gap", "primal utility equals the dualized budget value",
                 gap, 1e-7);
    }
    {
        double terminal = 0.0, cap_excess = 0.0, floor_value = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const TreeProcess x = simulate_wealth(tree, mr.market, mr.portfolios[i],
                                                  sol.allocations[i], agents[i].endowment);
            for (int leaf : tree.leaves())
                terminal = std::max(terminal, std::abs(x.values[leaf]));
            for (const auto& n : tree.nodes)
                cap_excess = std::max(cap_excess, sol.allocations[i].values[n.id] -
                                                      agents[i].cap.values[n.id]);
            const auto rep =
                affordability_check(tree, mr.market, mr.portfolios[i], sol.allocations[i],
                                    agents[i].endowment, agents[i].cap);
            floor_value = std::min(floor_value, rep.gains_floor);
        }
        cert.add("terminal wealth", "hedged wealth returns to zero at the horizon",
                 terminal, 1e-8);
        cert.add("withdrawal caps", "consumption never exceeds the cap",
                 std::max(0.0, cap_excess), 0.0);
        cert.notes.push_back("cumulative trading gains bounded below by " +
                             format_double(floor_value));
    }
    {
        double worst = 0.0;
        for (std::size_t j = 0; j < mr.market.assets.size(); ++j) {
            TreeProcess discounted{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
            for (std::size_t v = 0; v < tree.size(); ++v)
                discounted.values[v] =
                    mr.market.assets[j].values[v] / mr.market.bond.values[v];
            worst = std::max(worst, martingale_residual(mr.qhat, discounted));
        }
        cert.add("discounted assets martingale",
                 "discounted prices are martingales under the pricing measure", worst, 1e-11);
    }
    {
        const UniquenessReport rep = uniqueness_check(tree, mr.qhat, mr.market);
        if (!rep.pass && !rep.reason.empty()) cert.notes.push_back(rep.reason);
        cert.add("unique martingale measure",
                 "one-step systems pin a unique positive measure matching the density",
                 rep.pass ? rep.max_probability_gap : kInf, 1e-10);
    }
    {
        double e_peak = 0.0, c_peak = 0.0;
        for (const auto& n : tree.nodes) {
            double esum = 0.0;
            for (std::size_t i = 0; i < d; ++i) esum += agents[i].endowment.values[n.id];
            e_peak = std::max(e_peak, esum);
        }
        for (const auto& c : sol.allocations)
            for (double v : c.values) c_peak = std::max(c_peak, v);
        cert.add("uniform boundedness", "consumption stays below the aggregate endowment peak",
                 std::max(0.0, c_peak - e_peak), 1e-12);
    }
    {
        double worst = 0.0;
        for (std::size_t v = 0; v < tree.size(); ++v) {
            const double rebuilt = mr.qhat0 * mr.density.values[v] * mr.beta.values[v];
            worst = std::max(worst,
                             std::abs(rebuilt - sol.q.values[v]) / sol.q.values[v]);
        }
        cert.add("density factorization", "pricing density splits into martingale and discount",
                 worst, 1e-12);
        cert.add("pricing equivalence",
                 "pricing under the density equals discounted expectation under the measure",
                 mr.pricing_check, 1e-11);
    }
    return cert;
}

}  // namespace equilibrage
