#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "equilibrage/lattice.hpp"
#include "equilibrage/negishi.hpp"
#include "equilibrage/util.hpp"

namespace equilibrage {

// ---------------------------------------------------------------------------
// Equivalent measure
// ---------------------------------------------------------------------------

struct EquivalentMeasure {
    EventTree qhat;        // tree reweighted by the martingale part of Q
    TreeProcess beta;      // predictable discount, beta_0 = 1
    TreeProcess density;   // Z = Qhat-process / Q_0, a unit-mean martingale
    double qhat0 = 1.0;    // Q_0, the mass carried by the density normalization
    double pricing_check = 0.0;  // worst relative error of the pricing identity
};

/// Splits Q = Qhat * beta and switches the tree to the measure induced by
/// Qhat. Verifies on seeded test processes that pricing under Q coincides
/// with discounted expectation under the new measure:
///   E int Q c dkappa = Q_0 * E^ int c beta dkappa under qhat.
inline EquivalentMeasure equivalent_measure(const EventTree& tree, const TreeProcess& q,
                                            std::uint64_t check_seed = 2024) {
    const auto dec = multiplicative_decompose(tree, q);
    EquivalentMeasure em;
    em.beta = dec.predictable_part;
    em.qhat0 = dec.martingale.values[0];
    em.density = dec.martingale;
    for (auto& v : em.density.values) v /= em.qhat0;
    em.qhat = change_of_measure(tree, em.density);

    for (int rep = 0; rep < 10; ++rep) {
        Rng rng(mix_seed(check_seed, rep));
        TreeProcess c{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
        for (auto& v : c.values) v = rng.uniform(0.0, 2.0);
        TreeProcess qc = c, cb = c;
        for (std::size_t i = 0; i < tree.size(); ++i) {
            qc.values[i] *= q.values[i];
            cb.values[i] *= em.beta.values[i];
        }
        const double lhs = kappa_expectation(tree, qc);
        const double rhs = em.qhat0 * kappa_expectation(em.qhat, cb);
        const double rel = std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs));
        em.pricing_check = std::max(em.pricing_check, rel);
    }
    if (em.pricing_check > 1e-11)
        throw std::runtime_error("equivalent_measure: pricing identity failed, error " +
                                 format_double(em.pricing_check));
    return em;
}

// ---------------------------------------------------------------------------
// Martingale multiplicity and the orthonormal basis
// ---------------------------------------------------------------------------

/// Smallest number of mutually orthogonal martingales spanning every
/// martingale: on a tree, the largest branching degree minus one.
inline int multiplicity(const EventTree& tree) {
    int n = 0;
    for (const auto& node : tree.nodes)
        n = std::max(n, static_cast<int>(node.children.size()) - 1);
    return n;
}

struct MartingaleBasis {
    int n = 0;
    std::vector<TreeProcess> y;  // strictly positive martingales, Y_j(root) = 1

    struct Frame {
        // orthonormal, conditionally mean-zero contrasts over the children
        std::vector<std::vector<double>> xi;
        std::vector<double> scale;  // jump scales; dY_j = scale_j * xi_j
    };
    std::vector<Frame> frames;  // per node id; empty past the active count
};

/// Orthonormal increment frames by Gram-Schmidt under the one-step inner
/// product of the (already reweighted) tree, applied to the first m-1
/// child-indicator contrasts in child-index order. Jump sizes are halved
/// against the largest frame entry, which keeps every Y_j positive. The
/// construction is deterministic given the tree.
inline MartingaleBasis martingale_basis(const EventTree& qhat) {
    MartingaleBasis basis;
    basis.n = multiplicity(qhat);
    basis.frames.resize(qhat.size());
    basis.y.assign(basis.n, constant_process(qhat, 1.0));
    for (int level = 0; level < qhat.max_level(); ++level)
        for (int u : qhat.levels[level]) {
            const auto& children = qhat.nodes[u].children;
            const int m = static_cast<int>(children.size());
            std::vector<double> p(m);
            for (int c = 0; c < m; ++c) p[c] = qhat.nodes[children[c]].p_cond;
            const auto dot = [&](const std::vector<double>& a, const std::vector<double>& b) {
                double s = 0.0;
                for (int c = 0; c < m; ++c) s += p[c] * a[c] * b[c];
                return s;
            };
            auto& frame = basis.frames[u];
            for (int j = 0; j + 1 < m; ++j) {
                std::vector<double> v(m, 0.0);
                v[j] = 1.0;
                const double mean = p[j];
                for (int c = 0; c < m; ++c) v[c] -= mean;
                for (const auto& prev : frame.xi) {
                    const double coef = dot(v, prev);
                    for (int c = 0; c < m; ++c) v[c] -= coef * prev[c];
                }
                const double norm = std::sqrt(dot(v, v));
                for (int c = 0; c < m; ++c) v[c] /= norm;
                frame.xi.push_back(std::move(v));
            }
            frame.scale.resize(frame.xi.size());
            for (std::size_t j = 0; j < frame.xi.size(); ++j) {
                double peak = 0.0;
                for (double v : frame.xi[j]) peak = std::max(peak, std::abs(v));
                frame.scale[j] = basis.y[j].values[u] / (2.0 * peak);
            }
            for (int j = 0; j < basis.n; ++j)
                for (int c = 0; c < m; ++c) {
                    const double jump =
                        j + 1 < m ? frame.scale[j] * frame.xi[j][c] : 0.0;
                    basis.y[j].values[children[c]] = basis.y[j].values[u] + jump;
                }
        }
    return basis;
}

// ---------------------------------------------------------------------------
// Martingale representation
// ---------------------------------------------------------------------------

/// Predictable integrands recovering a martingale from the basis:
/// H_j = E[dM xi_j | parent] / scale_j on the active components. The
/// reconstruction dM = sum_j H_j dY_j is exact on the tree and is verified.
inline std::vector<TreeProcess> represent(const EventTree& qhat, const MartingaleBasis& basis,
                                          const TreeProcess& m) {
    check_finite(qhat, m, "represent");
    const double resid = martingale_residual(qhat, m);
    const double scale = std::max(1.0, sup_abs(m));
    if (resid > kConstructTol * scale)
        throw std::invalid_argument("represent: input is not a martingale (max residual " +
                                    format_double(resid) + ")");
    std::vector<TreeProcess> h(basis.n,
                               TreeProcess{Flavor::Predictable,
                                           std::vector<double>(qhat.size(), 0.0)});
    double max_dm = 0.0, worst = 0.0;
    for (const auto& node : qhat.nodes) {
        const auto& children = node.children;
        if (children.empty()) continue;
        const int mm = static_cast<int>(children.size());
        const auto& frame = basis.frames[node.id];
        std::vector<double> dm(mm);
        for (int c = 0; c < mm; ++c) {
            dm[c] = m.values[children[c]] - m.values[node.id];
            max_dm = std::max(max_dm, std::abs(dm[c]));
        }
        for (int j = 0; j < basis.n; ++j) {
            double coef = 0.0;
            if (j + 1 < mm) {
                double proj = 0.0;
                for (int c = 0; c < mm; ++c)
                    proj += qhat.nodes[children[c]].p_cond * dm[c] * frame.xi[j][c];
                coef = proj / frame.scale[j];
            }
            for (int c = 0; c < mm; ++c) h[j].values[children[c]] = coef;
        }
        for (int c = 0; c < mm; ++c) {
            double rebuilt = 0.0;
            for (int j = 0; j + 1 < mm; ++j)
                rebuilt += h[j].values[children[c]] *
                           (basis.y[j].values[children[c]] - basis.y[j].values[node.id]);
            worst = std::max(worst, std::abs(dm[c] - rebuilt));
        }
    }
    if (worst > 1e-11 * (1.0 + max_dm))
        throw std::runtime_error("represent: reconstruction residual " + format_double(worst));
    return h;
}

// ---------------------------------------------------------------------------
// The market itself
// ---------------------------------------------------------------------------

struct Market {
    TreeProcess bond;                 // B = 1/beta, predictable
    std::vector<TreeProcess> assets;  // S_j = B * Y_j
};

inline Market build_market(const EventTree& tree, const TreeProcess& beta,
                           const MartingaleBasis& basis) {
    check_predictable(tree, beta, "beta");
    Market mkt;
    mkt.bond = TreeProcess{Flavor::Predictable, std::vector<double>(tree.size(), 0.0)};
    for (std::size_t i = 0; i < tree.size(); ++i) {
        if (!(beta.values[i] > 0.0))
            throw std::invalid_argument("build_market: beta must be strictly positive");
        mkt.bond.values[i] = 1.0 / beta.values[i];
    }
    for (const auto& y : basis.y) {
        TreeProcess s{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
        for (std::size_t i = 0; i < tree.size(); ++i)
            s.values[i] = mkt.bond.values[i] * y.values[i];
        mkt.assets.push_back(std::move(s));
    }
    return mkt;
}

// ---------------------------------------------------------------------------
// Hedging
// ---------------------------------------------------------------------------

enum class ClearingAdjustment {
    MeanSubtract,     // H^i -= mean over agents; zero net supply made exact
    IndicatorZeroing  // zero out components whose agent sum is not negligible
};

struct HedgeResult {
    std::vector<std::vector<TreeProcess>> portfolios;  // per agent, per component
    std::vector<TreeProcess> discounted_targets;       // X-tilde^i
    std::vector<double> target_origin;                 // X-tilde^i_0, ~0 when budgets bind
    double correction = 0.0;  // worst pre-adjustment violation of zero net supply
};

/// Martingale targets X-tilde^i_t = E^[sum_k beta_k (c^i_k - e^i_k) w_k | F_t]
/// under the reweighted tree, represented on the basis; the representation
/// coefficients are then adjusted to clear exactly.
inline HedgeResult hedge_portfolios(const EventTree& qhat, const MartingaleBasis& basis,
                                    const TreeProcess& beta,
                                    const std::vector<AgentSpec>& agents,
                                    const std::vector<TreeProcess>& consumption,
                                    ClearingAdjustment mode = ClearingAdjustment::MeanSubtract) {
    const std::size_t d = agents.size();
    HedgeResult out;
    std::vector<std::vector<TreeProcess>> raw;
    for (std::size_t i = 0; i < d; ++i) {
        // cumulative discounted net consumption along each path, then its
        // conditional expectations down to the root
        std::vector<double> terminal(qhat.size(), 0.0);
        for (int leaf : qhat.leaves()) {
            double total = 0.0;
            for (int v = leaf; v >= 0; v = qhat.nodes[v].parent)
                total += beta.values[v] *
                         (consumption[i].values[v] - agents[i].endowment.values[v]) *
                         qhat.grid.kappa[qhat.nodes[v].level];
            terminal[leaf] = total;
        }
        TreeProcess target{Flavor::Adapted,
                           conditional_expectation(qhat, terminal, qhat.max_level(), 0)};
        out.target_origin.push_back(target.values[0]);
        raw.push_back(represent(qhat, basis, target));
        out.discounted_targets.push_back(std::move(target));
    }

    out.portfolios = raw;
    for (int j = 0; j < basis.n; ++j)
        for (std::size_t v = 0; v < qhat.size(); ++v) {
            double sum = 0.0;
            for (std::size_t i = 0; i < d; ++i) sum += raw[i][j].values[v];
            out.correction = std::max(out.correction, std::abs(sum) / d);
            if (mode == ClearingAdjustment::MeanSubtract) {
                for (std::size_t i = 0; i < d; ++i)
                    out.portfolios[i][j].values[v] = raw[i][j].values[v] - sum / d;
                // pin the last agent so the sum vanishes in exact arithmetic
                double head = 0.0;
                for (std::size_t i = 0; i + 1 < d; ++i)
                    head += out.portfolios[i][j].values[v];
                out.portfolios[d - 1][j].values[v] = -head;
            } else {
                const bool keep = std::abs(sum) <= 1e-10;
                for (std::size_t i = 0; i < d; ++i)
                    out.portfolios[i][j].values[v] = keep ? raw[i][j].values[v] : 0.0;
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Wealth dynamics
// ---------------------------------------------------------------------------

/// Self-financing wealth recursion with consumption and endowment flows:
/// trading gains accrue over each step with predictable holdings, and the
/// level-k flow (e_k - c_k) settles at t_k with weight w_k (the root flow
/// settles at time zero on top of zero initial wealth).
inline TreeProcess simulate_wealth(const EventTree& tree, const Market& market,
                                   const std::vector<TreeProcess>& holdings,
                                   const TreeProcess& consumption,
                                   const TreeProcess& endowment) {
    if (holdings.size() != market.assets.size())
        throw std::invalid_argument("simulate_wealth: holdings/asset count mismatch");
    for (const auto& h : holdings) check_predictable(tree, h, "holdings");
    check_sized(tree, consumption, "consumption");
    check_sized(tree, endowment, "endowment");

    TreeProcess x{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
    x.values[0] = (endowment.values[0] - consumption.values[0]) * tree.grid.kappa[0];
    for (int level = 1; level <= tree.max_level(); ++level)
        for (int v : tree.levels[level]) {
            const int u = tree.nodes[v].parent;
            double gains = 0.0, position = 0.0;
            for (std::size_t j = 0; j < holdings.size(); ++j) {
                gains += holdings[j].values[v] *
                         (market.assets[j].values[v] - market.assets[j].values[u]);
                position += holdings[j].values[v] * market.assets[j].values[u];
            }
            const double bond_gain = (x.values[u] - position) *
                                     (market.bond.values[v] - market.bond.values[u]) /
                                     market.bond.values[u];
            x.values[v] = x.values[u] + gains + bond_gain +
                          (endowment.values[v] - consumption.values[v]) *
                              tree.grid.kappa[level];
        }
    return x;
}

// ---------------------------------------------------------------------------
// Affordability
// ---------------------------------------------------------------------------

struct AffordabilityReport {
    double gains_floor = 0.0;         // min over nodes of cumulative stock gains
    double min_terminal_wealth = 0.0;
    bool cap_respected = true;
    int cap_violation_node = -1;
    double terminal_tol = 1e-9;

    bool pass() const { return min_terminal_wealth >= -terminal_tol && cap_respected; }
};

inline AffordabilityReport affordability_check(const EventTree& tree, const Market& market,
                                               const std::vector<TreeProcess>& holdings,
                                               const TreeProcess& consumption,
                                               const TreeProcess& endowment,
                                               const TreeProcess& cap) {
    AffordabilityReport rep;
    // cumulative trading gains are bounded below on a finite tree; report the bound
    std::vector<double> gains(tree.size(), 0.0);
    for (int level = 1; level <= tree.max_level(); ++level)
        for (int v : tree.levels[level]) {
            const int u = tree.nodes[v].parent;
            double step = 0.0;
            for (std::size_t j = 0; j < holdings.size(); ++j)
                step += holdings[j].values[v] *
                        (market.assets[j].values[v] - market.assets[j].values[u]);
            gains[v] = gains[u] + step;
        }
    rep.gains_floor = 0.0;
    for (double g : gains) rep.gains_floor = std::min(rep.gains_floor, g);

    const TreeProcess x = simulate_wealth(tree, market, holdings, consumption, endowment);
    rep.min_terminal_wealth = kInf;
    for (int leaf : tree.leaves())
        rep.min_terminal_wealth = std::min(rep.min_terminal_wealth, x.values[leaf]);

    for (const auto& n : tree.nodes)
        if (consumption.values[n.id] > cap.values[n.id]) {
            rep.cap_respected = false;
            rep.cap_violation_node = n.id;
            break;
        }
    return rep;
}

// ---------------------------------------------------------------------------
// Full realization
// ---------------------------------------------------------------------------

struct MarketRealization {
    EventTree qhat;
    TreeProcess density;  // d(qhat)/dP as a process, unit mean
    double qhat0 = 1.0;
    double pricing_check = 0.0;
    TreeProcess beta;
    Market market;
    MartingaleBasis basis;
    std::vector<std::vector<TreeProcess>> portfolios;
    std::vector<TreeProcess> wealth;
    std::vector<double> hedge_target_origin;
    double hedge_correction = 0.0;
};

/// The passage from the pricing density to an explicit market: measure
/// change, basis, bond and assets, hedging portfolios, and wealth paths.
inline MarketRealization marketize(const EventTree& tree, const std::vector<AgentSpec>& agents,
                                   const EquilibriumSolution& sol,
                                   ClearingAdjustment mode = ClearingAdjustment::MeanSubtract) {
    MarketRealization mr;
    EquivalentMeasure em = equivalent_measure(tree, sol.q);
    mr.qhat = std::move(em.qhat);
    mr.density = std::move(em.density);
    mr.qhat0 = em.qhat0;
    mr.pricing_check = em.pricing_check;
    mr.beta = std::move(em.beta);
    mr.basis = martingale_basis(mr.qhat);
    mr.market = build_market(tree, mr.beta, mr.basis);
    HedgeResult hedge =
        hedge_portfolios(mr.qhat, mr.basis, mr.beta, agents, sol.allocations, mode);
    mr.portfolios = std::move(hedge.portfolios);
    mr.hedge_target_origin = std::move(hedge.target_origin);
    mr.hedge_correction = hedge.correction;
    for (std::size_t i = 0; i < agents.size(); ++i)
        mr.wealth.push_back(simulate_wealth(tree, mr.market, mr.portfolios[i],
                                            sol.allocations[i], agents[i].endowment));
    return mr;
}

}  // namespace equilibrage
