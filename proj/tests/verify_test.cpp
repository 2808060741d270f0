#include "equilibrage/verify.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

namespace equilibrage {
namespace {

using testing::bounded_multiplicative_endowment;
using testing::log_agent;
using testing::power_agent;
using testing::set_overdraft_cap;
using testing::set_proportional_cap;

EventTree binary_tree(int depth, std::uint64_t seed = 0) {
    TreeSpec s;
    s.kind = TreeSpec::Kind::Uniform;
    s.depth = depth;
    s.branching = 2;
    if (seed != 0) {
        s.seed = seed;
        s.random_probs = true;
    }
    return build_tree(s);
}

struct Solved {
    EventTree tree;
    std::vector<AgentSpec> agents;
    EquilibriumSolution sol;
    MarketRealization mr;
};

Solved make_solved(int depth, std::uint64_t seed, int flavor = 0) {
    Solved sc;
    sc.tree = binary_tree(depth, seed);
    AgentSpec a1 =
        log_agent(sc.tree, bounded_multiplicative_endowment(sc.tree, seed + 1, 0.5, 2.0), 0.1);
    AgentSpec a2 =
        power_agent(sc.tree, bounded_multiplicative_endowment(sc.tree, seed + 2, 0.5, 2.0), 0.5);
    if (flavor == 1) set_proportional_cap(sc.tree, a1, 1.4);
    if (flavor == 2) set_overdraft_cap(sc.tree, a2, 0.5);
    sc.agents = {a1, a2};
    sc.sol = solve(sc.tree, sc.agents);
    sc.mr = marketize(sc.tree, sc.agents, sc.sol);
    return sc;
}

TEST(Certify, AutarkyPassesEverything) {
    const EventTree t = binary_tree(3, 3);
    const AgentSpec a = log_agent(t, bounded_multiplicative_endowment(t, 5, 0.5, 2.0));
    const auto sol = solve(t, {a});
    const auto mr = marketize(t, {a}, sol);
    const auto cert = certify(t, {a}, sol, mr);
    EXPECT_TRUE(cert.overall);
    for (const auto& c : cert.checks) {
        EXPECT_TRUE(c.pass) << c.check;
        if (c.check != "withdrawal caps" && c.check != "portfolio clearing")
            EXPECT_LE(c.residual, 1e-11) << c.check;
    }
}

TEST(Certify, SolvedScenariosPassAllChecks) {
    for (int flavor : {0, 1, 2}) {
        const auto sc = make_solved(3, 100 + flavor, flavor);
        const auto cert = certify(sc.tree, sc.agents, sc.sol, sc.mr);
        EXPECT_TRUE(cert.overall) << "flavor " << flavor;
    }
}

TEST(Certify, CorruptedPortfolioFailsExactlyTheRightChecks) {
    auto sc = make_solved(3, 200);
    // +0.1 on one component of agent 1's portfolio across one sibling family
    for (int c : sc.tree.nodes[0].children)
        sc.mr.portfolios[0][0].values[c] += 0.1;
    const auto cert = certify(sc.tree, sc.agents, sc.sol, sc.mr);
    EXPECT_FALSE(cert.overall);
    for (const auto& c : cert.checks) {
        if (c.check == "portfolio clearing" || c.check == "terminal wealth")
            EXPECT_FALSE(c.pass) << c.check;
        else
            EXPECT_TRUE(c.pass) << c.check;
    }
}

TEST(Certify, JsonShapeCarriesAnchorsAndTolerances) {
    const auto sc = make_solved(2, 300);
    const auto cert = certify(sc.tree, sc.agents, sc.sol, sc.mr);
    const auto j = certificate_to_json(cert);
    EXPECT_TRUE(j.at("overall").get<bool>());
    for (const auto& c : j.at("checks")) {
        EXPECT_TRUE(c.contains("check"));
        EXPECT_TRUE(c.contains("paper_anchor"));
        EXPECT_TRUE(c.contains("residual"));
        EXPECT_TRUE(c.contains("tol"));
        EXPECT_TRUE(c.contains("pass"));
    }
}

TEST(OracleBestResponse, AutarkyReproducesTheEndowment) {
    const EventTree t = binary_tree(3, 7);
    const AgentSpec a = log_agent(t, bounded_multiplicative_endowment(t, 9, 0.5, 2.0));
    const auto sol = solve(t, {a});
    const TreeProcess c = oracle_best_response(t, a, sol.q);
    for (std::size_t i = 0; i < t.size(); ++i)
        EXPECT_NEAR(c.values[i], a.endowment.values[i], 1e-7);
}

TEST(OracleBestResponse, SymmetricPairGetsHalfTheAggregate) {
    const EventTree t = binary_tree(2, 11);
    const TreeProcess e = bounded_multiplicative_endowment(t, 13, 0.5, 2.0);
    const AgentSpec a = log_agent(t, e);
    const auto sol = solve(t, {a, a});
    const TreeProcess c = oracle_best_response(t, a, sol.q);
    for (std::size_t i = 0; i < t.size(); ++i)
        EXPECT_NEAR(c.values[i], e.values[i], 1e-7);
}

TEST(OracleBestResponse, AgreesWithTheSolverIncludingCaps) {
    for (int flavor : {0, 1, 2}) {
        const auto sc = make_solved(3, 400 + flavor, flavor);
        for (std::size_t i = 0; i < sc.agents.size(); ++i) {
            const TreeProcess c = oracle_best_response(sc.tree, sc.agents[i], sc.sol.q);
            for (std::size_t v = 0; v < sc.tree.size(); ++v)
                EXPECT_NEAR(c.values[v], sc.sol.allocations[i].values[v], 1e-6)
                    << "flavor " << flavor << " agent " << i << " node " << v;
            // where the solver pinned the cap, so does the oracle
            for (std::size_t v = 0; v < sc.tree.size(); ++v)
                if (sc.sol.allocations[i].values[v] == sc.agents[i].cap.values[v])
                    EXPECT_DOUBLE_EQ(c.values[v], sc.agents[i].cap.values[v]);
        }
    }
}

TEST(OracleBestResponse, IndependentOfSolverWeights) {
    const auto sc = make_solved(2, 500);
    const TreeProcess base = oracle_best_response(sc.tree, sc.agents[0], sc.sol.q);
    // corrupting the solver's weights must not move the oracle: it only
    // sees the density
    EquilibriumSolution corrupted = sc.sol;
    corrupted.weights[0] *= 3.0;
    corrupted.weights[1] *= 0.1;
    const TreeProcess after = oracle_best_response(sc.tree, sc.agents[0], corrupted.q);
    for (std::size_t v = 0; v < sc.tree.size(); ++v)
        EXPECT_DOUBLE_EQ(base.values[v], after.values[v]);
}

TEST(DeviationTest, EquilibriumSurvivesRandomDeviations) {
    const auto sc = make_solved(3, 600);
    for (std::size_t i = 0; i < sc.agents.size(); ++i) {
        const auto rep = deviation_test(sc.tree, sc.mr, sc.agents[i], sc.sol.q,
                                        sc.sol.allocations[i], 100, 777 + i);
        EXPECT_TRUE(rep.pass);
        EXPECT_LE(rep.max_gap, 1e-9);
    }
}

TEST(DeviationTest, IdentityAndScalingDeviations) {
    const auto sc = make_solved(2, 700);
    const auto& agent = sc.agents[0];
    const auto& c_eq = sc.sol.allocations[0];
    const double u_eq = utility_functional(sc.tree, agent.utility, c_eq);
    EXPECT_DOUBLE_EQ(u_eq - u_eq, 0.0);  // the identity deviation has zero gap
    TreeProcess scaled = c_eq;
    for (auto& v : scaled.values) v *= 0.9;
    const double u_scaled = utility_functional(sc.tree, agent.utility, scaled);
    EXPECT_LT(u_scaled, u_eq);  // affordable but strictly worse
}

TEST(UniquenessCheck, BinaryNodeHandFormula) {
    const auto sc = make_solved(2, 800);
    // at each binary node the unique measure is (b/(a+b), a/(a+b)) for
    // discounted increments (a, -b)
    const auto& y = sc.mr.basis.y[0];
    for (const auto& n : sc.tree.nodes) {
        if (n.children.empty()) continue;
        const double a = y.values[n.children[0]] - y.values[n.id];
        const double b = y.values[n.id] - y.values[n.children[1]];
        const double p_up = b / (a + b);
        EXPECT_NEAR(p_up, sc.mr.qhat.nodes[n.children[0]].p_cond, 1e-12);
    }
    const auto rep = uniqueness_check(sc.tree, sc.mr.qhat, sc.mr.market);
    EXPECT_TRUE(rep.pass);
    EXPECT_LE(rep.max_probability_gap, 1e-10);
}

// multiplicity zero: no risky assets exist, yet the bond alone carries the
// equilibrium and every check still holds
TEST(Certify, DeterministicPathEconomyNeedsNoAssets) {
    TreeSpec s;
    s.kind = TreeSpec::Kind::Uniform;
    s.depth = 3;
    s.branching = 1;
    const EventTree t = build_tree(s);
    const AgentSpec a1 = log_agent(t, TreeProcess{Flavor::Adapted, {0.6, 1.4, 0.9, 1.1}});
    const AgentSpec a2 = log_agent(t, TreeProcess{Flavor::Adapted, {1.4, 0.6, 1.1, 0.9}}, 0.1);
    const auto sol = solve(t, {a1, a2});
    const auto mr = marketize(t, {a1, a2}, sol);
    EXPECT_EQ(mr.basis.n, 0);
    EXPECT_TRUE(mr.market.assets.empty());
    const auto cert = certify(t, {a1, a2}, sol, mr);
    EXPECT_TRUE(cert.overall);
    for (const auto& x : mr.wealth)
        EXPECT_LE(std::abs(x.values[t.leaves()[0]]), 1e-9);
}

// branching varies across nodes, so some basis components stay flat where
// fewer children exist; the rank check must see through the rounding noise
// those components leave in the discounted ratios
TEST(Certify, MixedBranchingEconomyPasses) {
    TreeSpec s;
    s.kind = TreeSpec::Kind::Explicit;
    s.times = {0.0, 0.5, 1.0};
    s.explicit_nodes = {{0, 0, -1, 1.0}, {1, 1, 0, 0.5},  {2, 1, 0, 0.5},
                        {3, 2, 1, 0.2},  {4, 2, 1, 0.3},  {5, 2, 1, 0.5},
                        {6, 2, 2, 0.6},  {7, 2, 2, 0.4}};
    const EventTree t = build_tree(s);
    const AgentSpec a1 = log_agent(t, bounded_multiplicative_endowment(t, 71, 0.5, 2.0));
    const AgentSpec a2 =
        power_agent(t, bounded_multiplicative_endowment(t, 72, 0.5, 2.0), 0.5, 0.1);
    const auto sol = solve(t, {a1, a2});
    const auto mr = marketize(t, {a1, a2}, sol);
    EXPECT_EQ(mr.basis.n, 2);  // one node branches three ways, another two
    const auto cert = certify(t, {a1, a2}, sol, mr);
    EXPECT_TRUE(cert.overall);
    for (const auto& c : cert.checks) EXPECT_TRUE(c.pass) << c.check;
}

TEST(UniquenessCheck, DeterministicNodesPassVacuously) {
    TreeSpec s;
    s.kind = TreeSpec::Kind::Uniform;
    s.depth = 3;
    s.branching = 1;
    const EventTree t = build_tree(s);
    const AgentSpec a = log_agent(t, constant_process(t, 1.0));
    const auto sol = solve(t, {a});
    const auto mr = marketize(t, {a}, sol);
    const auto rep = uniqueness_check(t, mr.qhat, mr.market);
    EXPECT_TRUE(rep.pass);
}

TEST(UniquenessCheck, FlatIncrementsFailWithARankReport) {
    auto sc = make_solved(2, 900);
    // flatten the only asset's discounted increments below the root
    const auto& root = sc.tree.nodes[0];
    for (int c : root.children)
        sc.mr.market.assets[0].values[c] =
            sc.mr.market.bond.values[c] * sc.mr.basis.y[0].values[0];
    const auto rep = uniqueness_check(sc.tree, sc.mr.qhat, sc.mr.market);
    EXPECT_FALSE(rep.pass);
    EXPECT_EQ(rep.failing_node, 0);
    EXPECT_NE(rep.reason.find("node 0"), std::string::npos);
}

}  // namespace
}  // namespace equilibrage
