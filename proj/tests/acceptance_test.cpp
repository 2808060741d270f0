// Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
// Criteria 2,3,4,5,7 share one 50-scenario randomized run built lazily and
// cached; criterion 8 re-executes the pipeline from scratch and compares
// emitted bytes.

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <iostream>

#include "equilibrage/pipeline.hpp"
#include "equilibrage/semicalc.hpp"
#include "test_support.hpp"

namespace equilibrage {
namespace {

struct CriterionBanner {
    std::string label;
    explicit CriterionBanner(std::string l) : label(std::move(l)) {}
    ~CriterionBanner() {
        std::cout << "[criterion] " << label << ": "
                  << (::testing::Test::HasFailure() ? "FAIL" : "PASS") << std::endl;
    }
};

// ---------------------------------------------------------------------------
// The randomized scenario suite
// ---------------------------------------------------------------------------

constexpr int kSuiteSize = 50;

Scenario suite_scenario(int s) {
    Rng rng(mix_seed(0xacce97, s));
    Scenario sc;
    sc.tree.kind = TreeSpec::Kind::Uniform;
    sc.tree.depth = 2 + s % 4;              // K in 2..5
    sc.tree.branching = 2 + (s / 4) % 2;    // 2 or 3
    sc.tree.random_probs = true;
    sc.tree.seed = 100 + s;
    const int d = 1 + s % 4;
    for (int i = 0; i < d; ++i) {
        AgentScenario a;
        switch ((s + i) % 4) {
            case 0:
                a.utility.family = UtilitySpec::Family::Log;
                a.utility.beta = 0.05 * (s % 3);
                break;
            case 1:
                a.utility.family = UtilitySpec::Family::Power;
                a.utility.p = 0.5;
                a.utility.beta = 0.1;
                break;
            case 2:
                a.utility.family = UtilitySpec::Family::Power;
                a.utility.p = -1.0;
                break;
            default:
                a.utility.family = UtilitySpec::Family::Power;
                a.utility.p = 0.3;
                break;
        }
        a.endowment.kind = EndowmentSpec::Kind::Multiplicative;
        a.endowment.lo = 0.5;
        a.endowment.hi = 2.0;
        a.endowment.base = rng.uniform(0.7, 1.4);
        a.endowment.seed = mix_seed(7000 + s, i);
        switch ((s + i) % 3) {
            case 0:
                a.cap.kind = CapSpec::Kind::None;
                break;
            case 1:
                a.cap.kind = CapSpec::Kind::Proportional;
                a.cap.gamma = 1.4 + 0.2 * (i % 3);
                break;
            default:
                a.cap.kind = CapSpec::Kind::Overdraft;
                a.cap.delta = 0.5 + 0.25 * (i % 2);
                break;
        }
        sc.agents.push_back(std::move(a));
    }
    sc.solver.max_iters = 2000;
    sc.solver.accelerate = s % 5 == 0;
    sc.cross_check = true;
    sc.output.deviations = 100;
    sc.output.deviation_seed = mix_seed(0xdead, s);
    return sc;
}

struct SuiteRun {
    Scenario scenario;
    Materialized m;
    EquilibriumSolution sol;
    MarketRealization mr;
    Certificate cert;
    std::string manifest;
};

SuiteRun execute(const Scenario& sc) {
    SuiteRun run;
    run.scenario = sc;
    run.m = materialize(sc);
    run.sol = solve(run.m.tree, run.m.agents, sc.solver);
    run.mr = marketize(run.m.tree, run.m.agents, run.sol);
    run.cert = certify(run.m.tree, run.m.agents, run.sol, run.mr);
    const RegularityReport reg = regularity_report(run.m.tree, run.m.agents);
    run.manifest =
        manifest_of(collect_outputs(run.m.tree, run.sol, run.mr, run.cert, reg)).dump();
    return run;
}

struct SuiteCache {
    std::vector<SuiteRun> runs;
    double seconds = 0.0;
};

const SuiteCache& suite() {
    static const SuiteCache cache = [] {
        SuiteCache c;
        const auto start = std::chrono::steady_clock::now();
        for (int s = 0; s < kSuiteSize; ++s) c.runs.push_back(execute(suite_scenario(s)));
        c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                        .count();
        return c;
    }();
    return cache;
}

double check_residual(const Certificate& cert, const std::string& name) {
    for (const auto& c : cert.checks)
        if (c.check == name) return c.residual;
    return kInf;
}

// ---------------------------------------------------------------------------
// 1. Closed-form log-utility equilibrium
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion1ClosedFormLogEquilibrium) {
    CriterionBanner banner("1 closed-form log-utility equilibrium");
    for (double beta : {0.0, 0.1}) {
        TreeSpec ts;
        ts.kind = TreeSpec::Kind::Uniform;
        ts.depth = 4;
        ts.branching = 2;
        ts.random_probs = true;
        ts.seed = 2024;
        const EventTree tree = build_tree(ts);
        const TreeProcess e1 = multiplicative_endowment(tree, 501, 0.5, 2.0, 1.1);
        const TreeProcess e2 = multiplicative_endowment(tree, 502, 0.5, 2.0, 0.9);
        const AgentSpec a1 = testing::log_agent(tree, e1, beta);
        const AgentSpec a2 = testing::log_agent(tree, e2, beta);

        const auto start = std::chrono::steady_clock::now();
        const EquilibriumSolution sol = solve(tree, {a1, a2});
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        EXPECT_LT(secs, 1.0);

        const auto alpha = testing::log_share_oracle(tree, {e1, e2}, beta);
        for (int i = 0; i < 2; ++i) {
            double share_lo = kInf, share_hi = 0.0;
            for (const auto& n : tree.nodes) {
                const double share = sol.allocations[i].values[n.id] /
                                     (e1.values[n.id] + e2.values[n.id]);
                share_lo = std::min(share_lo, share);
                share_hi = std::max(share_hi, share);
                EXPECT_NEAR(share, alpha[i], 1e-8 * alpha[i]);
            }
            EXPECT_LE(share_hi - share_lo, 1e-8);  // node-constant
        }
        // cross-record of the weights: lambda_i alpha_i is agent-invariant
        // for common-impatience log agents
        EXPECT_NEAR(sol.weights[0] * alpha[0], sol.weights[1] * alpha[1],
                    1e-8 * sol.weights[0] * alpha[0]);
    }
}

// ---------------------------------------------------------------------------
// 2. Randomized residual suite
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion2RandomizedResidualSuite) {
    CriterionBanner banner("2 randomized residual suite (50 scenarios)");
    const auto& cache = suite();
    ASSERT_EQ(cache.runs.size(), static_cast<std::size_t>(kSuiteSize));
    EXPECT_LT(cache.seconds, 60.0) << "suite took " << cache.seconds << " s";
    for (int s = 0; s < kSuiteSize; ++s) {
        const auto& run = cache.runs[s];
        EXPECT_TRUE(run.cert.overall) << "scenario " << s;
        EXPECT_LE(check_residual(run.cert, "nodewise clearing"), 1e-10) << s;
        EXPECT_LE(check_residual(run.cert, "budget equalities"), 1e-9) << s;
        EXPECT_LE(check_residual(run.cert, "first-order conditions"), 1e-8) << s;
        EXPECT_LE(check_residual(run.cert, "strong duality gap"), 1e-7) << s;
        EXPECT_EQ(check_residual(run.cert, "portfolio clearing"), 0.0) << s;
        EXPECT_LE(check_residual(run.cert, "terminal wealth"), 1e-8) << s;
        EXPECT_LE(check_residual(run.cert, "discounted assets martingale"), 1e-11) << s;
        EXPECT_LE(check_residual(run.cert, "unique martingale measure"), 1e-10) << s;
    }
}

// ---------------------------------------------------------------------------
// 3. Coalition formula equivalence
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion3CoalitionFormula) {
    CriterionBanner banner("3 coalition formula equivalence");
    for (const auto& run : suite().runs) {
        ASSERT_LE(run.m.agents.size(), 4u);
        const double gap =
            coalition_cross_check(run.m.tree, run.m.agents, run.sol.weights, run.sol.q);
        EXPECT_LE(gap, 1e-8);
    }
}

// ---------------------------------------------------------------------------
// 4. Decomposition exactness
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion4DecompositionExactness) {
    CriterionBanner banner("4 multiplicative decomposition and pricing identity");
    for (const auto& run : suite().runs) {
        const auto& tree = run.m.tree;
        double worst = 0.0;
        for (std::size_t v = 0; v < tree.size(); ++v) {
            const double rebuilt =
                run.mr.qhat0 * run.mr.density.values[v] * run.mr.beta.values[v];
            worst = std::max(worst,
                             std::abs(rebuilt - run.sol.q.values[v]) / run.sol.q.values[v]);
        }
        EXPECT_LE(worst, 1e-12);
        TreeProcess qhat_proc = run.mr.density;
        for (auto& v : qhat_proc.values) v *= run.mr.qhat0;
        EXPECT_LE(martingale_residual(tree, qhat_proc), 1e-13);
        EXPECT_NO_THROW(check_predictable(tree, run.mr.beta, "beta"));
        EXPECT_LE(run.mr.pricing_check, 1e-11);  // 10 random processes per scenario
    }
}

// ---------------------------------------------------------------------------
// 5. Best-response oracle and deviations
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion5BestResponseAndDeviations) {
    CriterionBanner banner("5 best-response agreement and 100 deviations per agent");
    for (const auto& run : suite().runs) {
        for (std::size_t i = 0; i < run.m.agents.size(); ++i) {
            const TreeProcess best =
                oracle_best_response(run.m.tree, run.m.agents[i], run.sol.q);
            double sup = 0.0;
            for (std::size_t v = 0; v < run.m.tree.size(); ++v)
                sup = std::max(sup,
                               std::abs(best.values[v] - run.sol.allocations[i].values[v]));
            EXPECT_LE(sup, 1e-6);
            const auto dev = deviation_test(
                run.m.tree, run.mr, run.m.agents[i], run.sol.q, run.sol.allocations[i], 100,
                mix_seed(run.scenario.output.deviation_seed, i));
            EXPECT_LE(dev.max_gap, 1e-9);
        }
    }
}

// ---------------------------------------------------------------------------
// 6. Semimartingale toolkit
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion6SemimartingaleToolkit) {
    CriterionBanner banner("6 semimartingale toolkit");
    // (a) exact martingale part on 100 seeded function/process pairs
    {
        int checked = 0;
        for (int rep = 0; rep < 100; ++rep) {
            Rng rng(mix_seed(0xf00d, rep));
            TreeSpec ts;
            ts.kind = TreeSpec::Kind::Uniform;
            ts.depth = 2 + rep % 3;
            ts.branching = 2 + rep % 2;
            ts.random_probs = true;
            ts.seed = 300 + rep;
            const EventTree tree = build_tree(ts);
            TreeProcess x{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
            for (auto& v : x.values) v = rng.uniform(0.5, 2.5);
            const double a = rng.uniform(-2.0, 2.0), b = rng.uniform(-1.0, 1.0),
                         c = rng.uniform(0.0, 1.5);
            const auto fn = analytic_function(
                [=](double t, double xv) {
                    return a * xv * xv + b * std::exp(xv) + c * t * xv;
                },
                [=](double t, double xv) { return 2.0 * a * xv + b * std::exp(xv) + c * t; });
            const auto dec = semifun_decompose(tree, fn, x);
            EXPECT_LE(martingale_residual(tree, dec.martingale_part),
                      1e-13 * std::max(1.0, sup_abs(dec.martingale_part)));
            ++checked;
        }
        EXPECT_EQ(checked, 100);
        // the hand example is exact
        TreeSpec ts;
        ts.kind = TreeSpec::Kind::Uniform;
        ts.depth = 1;
        ts.branching = 2;
        const EventTree tree = build_tree(ts);
        TreeProcess x{Flavor::Adapted, {1.0, 2.0, 0.0}};
        const auto fn = analytic_function([](double, double xv) { return xv * xv; },
                                          [](double, double xv) { return 2.0 * xv; });
        const auto dec = semifun_decompose(tree, fn, x);
        EXPECT_DOUBLE_EQ(dec.martingale_part.values[1], 2.0);
        EXPECT_DOUBLE_EQ(dec.martingale_part.values[2], -2.0);
        EXPECT_DOUBLE_EQ(dec.drift_part.values[1], 1.0);
        EXPECT_DOUBLE_EQ(dec.drift_part.values[2], 1.0);
    }
    // (b) cubic reconstruction with analytic derivatives
    {
        GridFunction f;
        f.t = {0.0};
        const int nx = 100001;
        f.values.emplace_back();
        f.dvalues.emplace_back();
        for (int m = 0; m < nx; ++m) {
            const double x = -1.0 + 2.0 * m / (nx - 1);
            f.x.push_back(x);
            f.values[0].push_back(x * x * x - x);
            f.dvalues[0].push_back(3.0 * x * x - 1.0);
        }
        f.analytic_derivative = true;
        EXPECT_LE(convexity_split(f).reconstruction_error, 1e-9);
    }
    // (c) inverse-split reconstruction order across three refinements
    {
        std::vector<double> errors;
        for (int n : {101, 201, 401}) {
            GridFunction f;
            f.t = {0.0};
            f.values.emplace_back();
            f.dvalues.emplace_back();
            for (int m = 0; m < n; ++m) {
                const double x = 2.0 * m / (n - 1);
                f.x.push_back(x);
                f.values[0].push_back(x + x * x * x);
                f.dvalues[0].push_back(1.0 + 3.0 * x * x);
            }
            f.analytic_derivative = true;
            GridFunction g;
            g.t = {0.0};
            g.values.emplace_back();
            for (int m = 0; m < n; ++m) {
                const double y = 0.2 + (9.0 - 0.2) * m / (n - 1);
                double lo = 0.0, hi = 3.0;
                for (int it = 0; it < 200; ++it) {
                    const double mid = 0.5 * (lo + hi);
                    (mid + mid * mid * mid < y ? lo : hi) = mid;
                }
                g.x.push_back(y);
                g.values[0].push_back(0.5 * (lo + hi));
            }
            errors.push_back(inverse_split(f, g).reconstruction_error);
        }
        EXPECT_GE(std::log2(errors[0] / errors[1]), 1.8);
        EXPECT_GE(std::log2(errors[1] / errors[2]), 1.8);
    }
    // (d) min-stability factor-2 bound on 100 seeded pairs
    {
        TreeSpec ts;
        ts.kind = TreeSpec::Kind::Uniform;
        ts.depth = 3;
        ts.branching = 2;
        ts.random_probs = true;
        ts.seed = 777;
        const EventTree tree = build_tree(ts);
        for (int rep = 0; rep < 100; ++rep) {
            Rng rng(mix_seed(0xbeef, rep));
            TreeProcess a{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
            TreeProcess b{Flavor::Adapted, std::vector<double>(tree.size(), 0.0)};
            for (std::size_t i = 0; i < tree.size(); ++i) {
                a.values[i] = rng.uniform(-2.0, 2.0);
                b.values[i] = rng.uniform(-2.0, 2.0);
            }
            EXPECT_TRUE(min_stability(tree, a, b).factor2_bound);
        }
    }
}

// ---------------------------------------------------------------------------
// 7. Theorem conclusions at desk scale
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion7MainTheoremConclusions) {
    CriterionBanner banner("7 unique martingale measure and uniform boundedness");
    for (const auto& run : suite().runs) {
        const auto rep = uniqueness_check(run.m.tree, run.mr.qhat, run.mr.market);
        EXPECT_TRUE(rep.pass) << rep.reason;
        EXPECT_LE(rep.max_probability_gap, 1e-10);
        double e_peak = 0.0, c_peak = 0.0;
        for (const auto& n : run.m.tree.nodes) {
            double esum = 0.0;
            for (const auto& a : run.m.agents) esum += a.endowment.values[n.id];
            e_peak = std::max(e_peak, esum);
        }
        for (const auto& c : run.sol.allocations)
            for (double v : c.values) c_peak = std::max(c_peak, v);
        EXPECT_LE(c_peak, e_peak + 1e-12);
    }
}

// ---------------------------------------------------------------------------
// 8. Determinism
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion8Determinism) {
    CriterionBanner banner("8 byte-identical artifacts on rerun");
    for (const auto& run : suite().runs) {
        const SuiteRun again = execute(run.scenario);
        EXPECT_EQ(run.manifest, again.manifest);
    }
}

}  // namespace
}  // namespace equilibrage
