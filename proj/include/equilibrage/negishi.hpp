#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "equilibrage/lattice.hpp"
#include "equilibrage/preferences.hpp"
#include "equilibrage/util.hpp"

namespace equilibrage {

struct SolveOptions {
    // relative budget-residual tolerance; the default leaves the hedging
    // layer enough headroom for its own absolute bounds
    double tol = 1e-11;
    int max_iters = 500;
    double step0 = 1.0;
    bool accelerate = false; // Broyden step on log-weights with damped fallback
    std::vector<double> initial_weights;  // empty: all ones
};

/// Thrown when the weight iteration fails to meet the tolerance; carries the
/// relative residual trace for diagnostics.
class SolveError : public std::runtime_error {
public:
    SolveError(const std::string& msg, std::vector<double> trace)
        : std::runtime_error(msg), residual_trace(std::move(trace)) {}
    std::vector<double> residual_trace;
};

struct EquilibriumSolution {
    std::vector<double> weights;           // lambda; only lambda_i * Q is identified
    TreeProcess q;                         // pricing density, E int Q dkappa = 1
    std::vector<TreeProcess> allocations;  // c^i
    std::vector<double> residuals;         // r_i = E int Q (e^i - c^i) dkappa
    std::vector<double> residual_trace;    // relative max residual per iteration
    int iterations = 0;
    double q_min = 0.0, q_max = 0.0;
    std::string normalization = "kappa-expectation-one";
};

// ---------------------------------------------------------------------------
// Per-node clearing
// ---------------------------------------------------------------------------

/// Root of F(q) = sum_i min(cap_i, I^i(t, lambda_i q)) - e_agg, the one-node
/// market-clearing condition. F is strictly decreasing through its root, so
/// bracketed bisection applies.
inline double clearing_price(double t, double e_agg, const std::vector<double>& caps,
                             const std::vector<double>& lambda,
                             const std::vector<UtilitySpec>& utilities) {
    const std::size_t d = lambda.size();
    if (caps.size() != d || utilities.size() != d)
        throw std::invalid_argument("clearing_price: mismatched agent arrays");
    if (!(e_agg > 0.0)) throw std::invalid_argument("clearing_price: e_agg must be positive");
    double cap_sum = 0.0;
    for (double g : caps) {
        if (!(g > 0.0)) throw std::invalid_argument("clearing_price: caps must be positive");
        cap_sum += g;
    }
    if (!(cap_sum > e_agg))
        throw std::invalid_argument("clearing_price: infeasible node, caps sum " +
                                    format_double(cap_sum) + " <= aggregate endowment " +
                                    format_double(e_agg));
    const auto excess = [&](double q) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            s += std::min(caps[i], eval_inverse_marginal(utilities[i], t, lambda[i] * q));
        return s - e_agg;
    };
    const double guess = u_marginal(utilities[0], t, e_agg / static_cast<double>(d)) / lambda[0];
    try {
        return bisect_decreasing(excess, guess, 1e-13 * e_agg);
    } catch (const BisectionFailure& e) {
        throw std::runtime_error(std::string("clearing_price: ") + e.what());
    }
}

inline TreeProcess aggregate_endowment(const EventTree& tree,
                                       const std::vector<AgentSpec>& agents) {
    TreeProcess e{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
    for (const auto& a : agents)
        for (std::size_t i = 0; i < tree.size(); ++i) e.values[i] += a.endowment.values[i];
    return e;
}

/// The clearing price applied at every node.
inline TreeProcess pricing_density(const EventTree& tree, const std::vector<AgentSpec>& agents,
                                   const std::vector<double>& lambda) {
    const std::size_t d = agents.size();
    std::vector<UtilitySpec> utils;
    for (const auto& a : agents) utils.push_back(a.utility);
    TreeProcess q{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
    std::vector<double> caps(d);
    for (const auto& n : tree.nodes) {
        double e_agg = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            caps[i] = agents[i].cap.values[n.id];
            e_agg += agents[i].endowment.values[n.id];
        }
        try {
            q.values[n.id] = clearing_price(tree.grid.times[n.level], e_agg, caps, lambda, utils);
        } catch (const std::exception& e) {
            throw std::runtime_error("pricing_density at node " + std::to_string(n.id) + ": " +
                                     e.what());
        }
    }
    return q;
}

inline std::vector<TreeProcess> allocations(const EventTree& tree,
                                            const std::vector<AgentSpec>& agents,
                                            const std::vector<double>& lambda,
                                            const TreeProcess& q) {
    std::vector<TreeProcess> c;
    for (std::size_t i = 0; i < agents.size(); ++i) {
        TreeProcess ci{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
        for (const auto& n : tree.nodes)
            ci.values[n.id] =
                std::min(agents[i].cap.values[n.id],
                         eval_inverse_marginal(agents[i].utility, tree.grid.times[n.level],
                                               lambda[i] * q.values[n.id]));
        c.push_back(std::move(ci));
    }
    return c;
}

// ---------------------------------------------------------------------------
// Coalition formula cross-check
// ---------------------------------------------------------------------------

/// Independent route to the pricing density: per node, the minimum over
/// nonempty coalitions b of J^b(t, e - Gamma^b), where J^b inverts
/// y -> sum_{i in b} I^i(t, lambda_i y) and Gamma^b adds the caps of the
/// excluded agents. Returns the largest discrepancy against q.
inline double coalition_cross_check(const EventTree& tree, const std::vector<AgentSpec>& agents,
                                    const std::vector<double>& lambda, const TreeProcess& q) {
    const std::size_t d = agents.size();
    if (d > 12)
        throw std::invalid_argument("coalition_cross_check: refusing d > 12 agents "
                                    "(2^d coalitions); disable the cross-check instead");
    check_sized(tree, q, "coalition_cross_check");
    double worst = 0.0;
    for (const auto& n : tree.nodes) {
        const double t = tree.grid.times[n.level];
        double e_agg = 0.0;
        for (const auto& a : agents) e_agg += a.endowment.values[n.id];
        double best = kInf;
        for (unsigned mask = 1; mask < (1u << d); ++mask) {
            double cap_out = 0.0;
            for (std::size_t i = 0; i < d; ++i)
                if (!(mask & (1u << i))) cap_out += agents[i].cap.values[n.id];
            const double x = e_agg - cap_out;
            if (!(x > 0.0)) continue;  // J^b = +inf
            const auto gap = [&](double y) {
                double s = 0.0;
                for (std::size_t i = 0; i < d; ++i)
                    if (mask & (1u << i))
                        s += eval_inverse_marginal(agents[i].utility, t, lambda[i] * y);
                return s - x;
            };
            best = std::min(best, bisect_decreasing(gap, 1.0, 1e-13 * x));
        }
        worst = std::max(worst, std::abs(q.values[n.id] - best));
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Budgets and the weight iteration
// ---------------------------------------------------------------------------

inline std::vector<double> budget_residuals_for(const EventTree& tree,
                                                const std::vector<AgentSpec>& agents,
                                                const TreeProcess& q,
                                                const std::vector<TreeProcess>& c) {
    std::vector<double> r(agents.size(), 0.0);
    for (std::size_t i = 0; i < agents.size(); ++i)
        for (const auto& n : tree.nodes)
            r[i] += n.p_path * tree.grid.kappa[n.level] * q.values[n.id] *
                    (agents[i].endowment.values[n.id] - c[i].values[n.id]);
    return r;
}

/// r_i = E int Q (e^i - c^i) dkappa at the given weights. Sums to zero by
/// nodewise clearing (Walras' law).
inline std::vector<double> budget_residuals(const EventTree& tree,
                                            const std::vector<AgentSpec>& agents,
                                            const std::vector<double>& lambda) {
    const TreeProcess q = pricing_density(tree, agents, lambda);
    return budget_residuals_for(tree, agents, q, allocations(tree, agents, lambda, q));
}

namespace detail {

struct Iterate {
    TreeProcess q;
    std::vector<TreeProcess> c;
    std::vector<double> r;      // budget residuals
    std::vector<double> s;      // per-agent budget scales E int Q e^i dkappa
    double scale = 0.0;         // E int Q e dkappa
    double rel = 0.0;           // max_i |r_i| / scale, the convergence measure
    double merit = 0.0;         // L2 norm of the free residuals r_i/s_i, i >= 2;
                                // r_1 is redundant by Walras' law and its weight
                                // is pinned, so steps are judged on the free part
};

inline Iterate evaluate_weights(const EventTree& tree, const std::vector<AgentSpec>& agents,
                                const std::vector<double>& lambda) {
    Iterate it;
    it.q = pricing_density(tree, agents, lambda);
    it.c = allocations(tree, agents, lambda, it.q);
    it.r = budget_residuals_for(tree, agents, it.q, it.c);
    it.s.assign(agents.size(), 0.0);
    for (std::size_t i = 0; i < agents.size(); ++i)
        for (const auto& n : tree.nodes)
            it.s[i] += n.p_path * tree.grid.kappa[n.level] * it.q.values[n.id] *
                       agents[i].endowment.values[n.id];
    it.scale = 0.0;
    for (double v : it.s) it.scale += v;
    it.rel = 0.0;
    for (std::size_t i = 0; i < agents.size(); ++i)
        it.rel = std::max(it.rel, std::abs(it.r[i]) / it.scale);
    it.merit = 0.0;
    for (std::size_t i = 1; i < agents.size(); ++i) {
        const double g = it.r[i] / it.s[i];
        it.merit += g * g;
    }
    it.merit = std::sqrt(it.merit);
    return it;
}

}  // namespace detail

/// Damped multiplicative weight iteration: lambda_i <- lambda_i exp(-eta r_i/s_i)
/// with lambda_1 pinned to 1, the step halved whenever the residual grows,
/// and an optional Broyden acceleration on log-weights. The returned solution
/// is rescaled so that E int Q dkappa = 1; only the products lambda_i Q are
/// identified, and they are invariant under that rescaling.
inline EquilibriumSolution solve(const EventTree& tree, const std::vector<AgentSpec>& agents,
                                 const SolveOptions& opts = {}) {
    const std::size_t d = agents.size();
    if (d == 0) throw std::invalid_argument("solve: no agents");
    std::vector<double> lambda = opts.initial_weights.empty()
                                     ? std::vector<double>(d, 1.0)
                                     : opts.initial_weights;
    if (lambda.size() != d) throw std::invalid_argument("solve: initial weights size mismatch");
    for (double l : lambda)
        if (!(l > 0.0)) throw std::invalid_argument("solve: weights must be positive");
    for (std::size_t i = d; i-- > 0;) lambda[i] /= lambda[0];  // pin the scale

    std::vector<double> trace;
    double eta = opts.step0;
    auto cur = detail::evaluate_weights(tree, agents, lambda);
    trace.push_back(cur.rel);
    int iters = 0;

    // Broyden state on x = log lambda_{2..d}, g = r/s; B approximates the
    // inverse Jacobian so that the update reads x <- x - B g.
    const std::size_t nfree = d - 1;
    std::vector<std::vector<double>> binv;
    auto reset_broyden = [&] {
        binv.assign(nfree, std::vector<double>(nfree, 0.0));
        for (std::size_t i = 0; i < nfree; ++i) binv[i][i] = eta;
    };
    if (opts.accelerate) reset_broyden();

    while (cur.rel > opts.tol && iters < opts.max_iters) {
        ++iters;
        std::vector<double> g(nfree), dx(nfree);
        for (std::size_t i = 0; i < nfree; ++i) g[i] = cur.r[i + 1] / cur.s[i + 1];
        if (opts.accelerate) {
            for (std::size_t i = 0; i < nfree; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < nfree; ++j) s += binv[i][j] * g[j];
                dx[i] = -s;
            }
        } else {
            for (std::size_t i = 0; i < nfree; ++i) dx[i] = -eta * g[i];
        }
        std::vector<double> cand = lambda;
        for (std::size_t i = 0; i < nfree; ++i) cand[i + 1] = lambda[i + 1] * std::exp(dx[i]);
        auto next = detail::evaluate_weights(tree, agents, cand);
        trace.push_back(next.rel);
        if (next.rel <= opts.tol || next.merit <= cur.merit) {
            if (opts.accelerate) {
                // good-Broyden rank-one update of the inverse Jacobian
                std::vector<double> dg(nfree), bdg(nfree, 0.0), xtb(nfree, 0.0);
                for (std::size_t i = 0; i < nfree; ++i)
                    dg[i] = next.r[i + 1] / next.s[i + 1] - g[i];
                for (std::size_t i = 0; i < nfree; ++i)
                    for (std::size_t j = 0; j < nfree; ++j) {
                        bdg[i] += binv[i][j] * dg[j];
                        xtb[j] += dx[i] * binv[i][j];
                    }
                double denom = 0.0;
                for (std::size_t i = 0; i < nfree; ++i) denom += dx[i] * bdg[i];
                if (std::abs(denom) > 1e-300) {
                    for (std::size_t i = 0; i < nfree; ++i)
                        for (std::size_t j = 0; j < nfree; ++j)
                            binv[i][j] += (dx[i] - bdg[i]) * xtb[j] / denom;
                }
            }
            lambda = std::move(cand);
            cur = std::move(next);
            eta = std::min(opts.step0, eta * 1.25);  // recover pace after damping
        } else {
            eta *= 0.5;
            if (opts.accelerate) reset_broyden();
            if (eta < 1e-12)
                throw SolveError("solve: step collapsed before reaching tolerance", trace);
        }
    }
    if (cur.rel > opts.tol)
        throw SolveError("solve: no convergence after " + std::to_string(opts.max_iters) +
                             " iterations (relative residual " + format_double(cur.rel) + ")",
                         trace);

    // normalize the density to a kappa-probability; rescale weights to keep
    // the products lambda_i Q fixed
    const double mass = kappa_expectation(tree, cur.q);
    EquilibriumSolution sol;
    sol.q = cur.q;
    for (auto& v : sol.q.values) v /= mass;
    sol.weights = lambda;
    for (auto& l : sol.weights) l *= mass;
    sol.allocations = allocations(tree, agents, sol.weights, sol.q);
    sol.residuals = budget_residuals_for(tree, agents, sol.q, sol.allocations);
    sol.residual_trace = std::move(trace);
    sol.iterations = iters;
    sol.q_min = kInf;
    sol.q_max = 0.0;
    for (double v : sol.q.values) {
        sol.q_min = std::min(sol.q_min, v);
        sol.q_max = std::max(sol.q_max, v);
    }
    return sol;
}

// ---------------------------------------------------------------------------
// First-order and duality certificates
// ---------------------------------------------------------------------------

struct KktReport {
    double max_interior_residual = 0.0;  // relative |U_x(c) - lambda Q| off the cap
    double max_cap_violation = 0.0;      // max(0, lambda Q - U_x(cap)) at the cap
    std::vector<double> budget_residuals;
    std::vector<double> dual_gaps;       // |U^i(c^i) - dual value|
    double interior_tol = 1e-9;
    double cap_tol = 1e-9;
    double gap_tol = 1e-8;

    bool pass(double budget_tol_abs) const {
        if (max_interior_residual > interior_tol) return false;
        if (max_cap_violation > cap_tol) return false;
        for (double g : dual_gaps)
            if (g > gap_tol) return false;
        for (double r : budget_residuals)
            if (std::abs(r) > budget_tol_abs) return false;
        return true;
    }
};

/// Pointwise first-order conditions, budget equalities, and the strong
/// duality gap between the primal utility and the dualized budget value.
inline KktReport kkt_certificate(const EventTree& tree, const std::vector<AgentSpec>& agents,
                                 const EquilibriumSolution& sol) {
    KktReport rep;
    rep.budget_residuals = sol.residuals;
    for (std::size_t i = 0; i < agents.size(); ++i) {
        const auto& a = agents[i];
        const auto& c = sol.allocations[i];
        double c_sup = 0.0;
        for (double v : c.values) c_sup = std::max(c_sup, v);
        double price_of_endowment = 0.0;
        double dual_integral = 0.0;
        for (const auto& n : tree.nodes) {
            const double t = tree.grid.times[n.level];
            const double lq = sol.weights[i] * sol.q.values[n.id];
            const double cap = a.cap.values[n.id];
            if (c.values[n.id] >= cap) {
                rep.max_cap_violation =
                    std::max(rep.max_cap_violation, lq - u_marginal(a.utility, t, cap));
            } else {
                const double ux = u_marginal(a.utility, t, c.values[n.id]);
                rep.max_interior_residual =
                    std::max(rep.max_interior_residual, std::abs(ux - lq) / lq);
            }
            const double m = std::min(cap, c_sup + 1.0);
            const double w = n.p_path * tree.grid.kappa[n.level];
            price_of_endowment += w * sol.q.values[n.id] * a.endowment.values[n.id];
            dual_integral += w * dual_value(a.utility, t, lq, m);
        }
        const double primal = utility_functional(tree, a.utility, c);
        rep.dual_gaps.push_back(
            std::abs(primal - (sol.weights[i] * price_of_endowment + dual_integral)));
    }
    return rep;
}

}  // namespace equilibrage
