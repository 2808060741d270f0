#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "equilibrage/pipeline.hpp"

#ifndef EQUILIBRAGE_CLI_PATH
#define EQUILIBRAGE_CLI_PATH "equilibrage"
#endif

namespace equilibrage {
namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("equilibrage_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

int run_cli(const std::string& args) {
    const std::string cmd = std::string(EQUILIBRAGE_CLI_PATH) + " " + args + " 2>/dev/null";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& content) {
    std::ofstream os(p, std::ios::binary);
    os << content;
}

TEST(ParseScenario, DemoScenariosRoundTrip) {
    TempDir dir;
    ASSERT_EQ(run_demo((dir.path / "demos").string()), 0);
    for (const char* name : {"complete.json", "proportional.json", "overdraft.json"}) {
        const fs::path file = dir.path / "demos" / name;
        ASSERT_TRUE(fs::exists(file)) << name;
        const Scenario sc = parse_scenario_file(file.string());
        const nlohmann::json j = scenario_to_json(sc);
        const Scenario sc2 = parse_scenario(j);
        EXPECT_EQ(scenario_to_json(sc2).dump(), j.dump());
    }
}

TEST(ParseScenario, ProportionalCapBelowOneIsASchemaError) {
    nlohmann::json j = {
        {"schema", 1},
        {"tree", {{"generator", "uniform"}, {"K", 2}, {"branching", 2}}},
        {"agents",
         {{{"utility", {{"family", "log"}}},
           {"endowment", {{"kind", "multiplicative"}, {"seed", 1}}},
           {"cap", {{"kind", "proportional"}, {"gamma", 0.5}}}}}}};
    try {
        parse_scenario(j);
        FAIL() << "expected ScenarioError";
    } catch (const ScenarioError& e) {
        ASSERT_EQ(e.errors.size(), 1u);
        EXPECT_NE(e.errors[0].find("agents[0].cap.gamma"), std::string::npos);
    }
}

TEST(ParseScenario, ExplicitTreeWithBadProbabilitiesNamesTheNode) {
    nlohmann::json j = {
        {"schema", 1},
        {"tree",
         {{"generator", "explicit"},
          {"times", {0.0, 1.0}},
          {"nodes",
           {{{"id", 0}, {"level", 0}, {"parent", -1}, {"p_cond", 1.0}},
            {{"id", 1}, {"level", 1}, {"parent", 0}, {"p_cond", 0.5}},
            {{"id", 2}, {"level", 1}, {"parent", 0}, {"p_cond", 0.4}}}}}},
        {"agents",
         {{{"utility", {{"family", "log"}}},
           {"endowment", {{"kind", "multiplicative"}, {"seed", 1}}},
           {"cap", {{"kind", "none"}}}}}}};
    const Scenario sc = parse_scenario(j);  // schema-valid; the tree itself rejects
    try {
        materialize(sc);
        FAIL() << "expected a tree validation error";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("node 0"), std::string::npos);
    }
}

TEST(ParseScenario, MissingAndMalformedFilesAreDistinguished) {
    EXPECT_THROW(parse_scenario_file("/nonexistent/path.json"), std::runtime_error);
    TempDir dir;
    spit(dir.path / "bad.json", "{ not json");
    try {
        parse_scenario_file((dir.path / "bad.json").string());
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("not valid JSON"), std::string::npos);
    }
}

TEST(Cli, AllOnTheDemoScenarioExitsZeroAndEmitsTheManifest) {
    TempDir dir;
    ASSERT_EQ(run_cli("demo --out " + (dir.path / "demos").string()), 0);
    const std::string scenario = (dir.path / "demos" / "complete.json").string();
    const std::string out = (dir.path / "run").string();
    ASSERT_EQ(run_cli("all --scenario " + scenario + " --out " + out + " --cross-check"), 0);
    ASSERT_TRUE(fs::exists(fs::path(out) / "certificate.json"));
    const auto manifest = nlohmann::json::parse(slurp(fs::path(out) / "manifest.json"));
    // 4 structured artifacts + q + bond + n assets + d consumptions + d wealths
    const auto eq = nlohmann::json::parse(slurp(fs::path(out) / "equilibrium.json"));
    const std::size_t d = eq.at("allocations").size();
    std::size_t n = 0;
    for (const auto& f : manifest.at("files")) {
        const std::string name = f.at("name").get<std::string>();
        if (name.rfind("s_", 0) == 0) ++n;
    }
    EXPECT_EQ(manifest.at("files").size(), 4 + 2 + n + 2 * d);
}

TEST(ParseScenario, MarkovTreeWithStateMappedEndowmentsAndTables) {
    nlohmann::json table_y = nlohmann::json::array();
    nlohmann::json table_i = nlohmann::json::array();
    for (int k = 0; k < 9; ++k) {
        const double y = 0.01 * std::pow(10000.0, k / 8.0);
        table_y.push_back(y);
        table_i.push_back(1.0 / y);
    }
    const nlohmann::json j = {
        {"schema", 1},
        {"tree",
         {{"generator", "markov"},
          {"K", 3},
          {"transition", {{0.6, 0.4}, {0.3, 0.7}}},
          {"initial_state", 0}}},
        {"agents",
         {{{"utility", {{"family", "tabulated"}, {"beta", 0.1},
                        {"table", {{"y", table_y}, {"i", table_i}}}}},
           {"endowment", {{"kind", "state_map"}, {"values", {0.8, 1.25}}}},
           {"cap", {{"kind", "overdraft"}, {"delta", 0.5}}}},
          {{"utility", {{"family", "log"}}},
           {"endowment", {{"kind", "multiplicative"}, {"seed", 5}}},
           {"cap", {{"kind", "none"}}}}}}};
    const Scenario sc = parse_scenario(j);
    const Materialized m = materialize(sc);
    ASSERT_EQ(m.tree.state.size(), m.tree.size());
    for (std::size_t v = 0; v < m.tree.size(); ++v)
        EXPECT_DOUBLE_EQ(m.agents[0].endowment.values[v],
                         m.tree.state[v] == 0 ? 0.8 : 1.25);
    // the whole pipeline runs on it
    const auto sol = solve(m.tree, m.agents);
    const auto mr = marketize(m.tree, m.agents, sol);
    EXPECT_TRUE(certify(m.tree, m.agents, sol, mr).overall);
}

TEST(Cli, RegularityFailuresGateTheExitCode) {
    // a tabulated inverse marginal with shallow power tails misses the
    // vanishing/exploding limits at the probe points
    TempDir dir;
    nlohmann::json table_y = nlohmann::json::array();
    nlohmann::json table_i = nlohmann::json::array();
    for (int k = 0; k < 9; ++k) {
        const double y = 1e-2 * std::pow(1e4, k / 8.0);
        table_y.push_back(y);
        table_i.push_back(std::pow(y, -0.1));
    }
    const nlohmann::json j = {
        {"schema", 1},
        {"tree", {{"generator", "uniform"}, {"K", 2}, {"branching", 2}}},
        {"agents",
         {{{"utility", {{"family", "tabulated"}, {"table", {{"y", table_y}, {"i", table_i}}}}},
           {"endowment", {{"kind", "multiplicative"}, {"seed", 3}}},
           {"cap", {{"kind", "none"}}}}}}};
    spit(dir.path / "shallow.json", j.dump());
    EXPECT_EQ(run_cli("regularity --scenario " + (dir.path / "shallow.json").string() +
                      " --out " + (dir.path / "reg").string()),
              1);
}

TEST(Cli, RegularityCommandWritesAReport) {
    TempDir dir;
    ASSERT_EQ(run_demo((dir.path / "demos").string()), 0);
    const std::string out = (dir.path / "reg").string();
    EXPECT_EQ(run_cli("regularity --scenario " +
                      (dir.path / "demos" / "complete.json").string() + " --out " + out),
              0);
    const auto j = nlohmann::json::parse(slurp(fs::path(out) / "regularity.json"));
    EXPECT_TRUE(j.at("all_pass").get<bool>());
    EXPECT_EQ(j.at("agents").size(), 2u);
}

TEST(Cli, ForcedNonConvergenceExitsTwo) {
    TempDir dir;
    ASSERT_EQ(run_demo((dir.path / "demos").string()), 0);
    const std::string scenario = (dir.path / "demos" / "proportional.json").string();
    EXPECT_EQ(run_cli("solve --scenario " + scenario + " --out " +
                      (dir.path / "out").string() + " --max-iters 1"),
              2);
}

TEST(Cli, TamperedMarketDumpFailsCertification) {
    TempDir dir;
    ASSERT_EQ(run_demo((dir.path / "demos").string()), 0);
    const std::string scenario = (dir.path / "demos" / "overdraft.json").string();
    const std::string out = (dir.path / "run").string();
    ASSERT_EQ(run_cli("all --scenario " + scenario + " --out " + out), 0);
    ASSERT_EQ(run_cli("certify --scenario " + scenario + " --out " + out), 0);
    // nudge one bond entry in the dump
    std::string csv = slurp(fs::path(out) / "market.csv");
    const auto pos = csv.find_last_of('\n', csv.size() - 2);
    csv.insert(pos - 1, "1");
    spit(fs::path(out) / "market.csv", csv);
    EXPECT_EQ(run_cli("certify --scenario " + scenario + " --out " + out), 1);
}

TEST(Cli, MissingInputsExitThree) {
    TempDir dir;
    EXPECT_EQ(run_cli("all --scenario /nonexistent.json --out " + dir.path.string()), 3);
    ASSERT_EQ(run_demo((dir.path / "demos").string()), 0);
    // certify without artifacts
    EXPECT_EQ(run_cli("certify --scenario " +
                      (dir.path / "demos" / "complete.json").string() + " --out " +
                      (dir.path / "empty").string()),
              3);
    // unwritable output directory
    EXPECT_EQ(run_cli("all --scenario " +
                      (dir.path / "demos" / "complete.json").string() +
                      " --out /proc/equilibrage/nope"),
              3);
}

TEST(MarketDump, JsonFormMirrorsTheCsv) {
    TempDir dir;
    ASSERT_EQ(run_demo((dir.path / "demos").string()), 0);
    const Scenario sc =
        parse_scenario_file((dir.path / "demos" / "complete.json").string());
    const Materialized m = materialize(sc);
    const auto sol = solve(m.tree, m.agents, sc.solver);
    const auto mr = marketize(m.tree, m.agents, sol);
    const auto j = market_to_json(m.tree, mr);
    ASSERT_EQ(j.at("nodes").size(), m.tree.size());
    const auto& row = j.at("nodes")[0];
    EXPECT_EQ(row.at("bond").get<double>(), mr.market.bond.values[0]);
    EXPECT_EQ(row.at("assets").size(), mr.market.assets.size());
    EXPECT_EQ(row.at("portfolios").size(), m.agents.size());
    EXPECT_EQ(row.at("wealth").size(), m.agents.size());
}

TEST(Cli, RerunsWithTheSameSeedAreByteIdentical) {
    TempDir dir;
    ASSERT_EQ(run_demo((dir.path / "demos").string()), 0);
    const std::string scenario = (dir.path / "demos" / "complete.json").string();
    const std::string a = (dir.path / "a").string(), b = (dir.path / "b").string(),
                      c = (dir.path / "c").string();
    ASSERT_EQ(run_cli("all --scenario " + scenario + " --out " + a + " --seed 7"), 0);
    ASSERT_EQ(run_cli("all --scenario " + scenario + " --out " + b + " --seed 7"), 0);
    ASSERT_EQ(run_cli("all --scenario " + scenario + " --out " + c + " --seed 8"), 0);
    for (const auto& entry : fs::directory_iterator(a)) {
        const auto name = entry.path().filename();
        EXPECT_EQ(slurp(entry.path()), slurp(fs::path(b) / name)) << name;
    }
    EXPECT_NE(slurp(fs::path(a) / "manifest.json"), slurp(fs::path(c) / "manifest.json"));
}

TEST(Cli, ThreadEnvironmentVariableIsValidated) {
    TempDir dir;
    const std::string cmd = std::string("EQUILIBRAGE_THREADS=zebra ") + EQUILIBRAGE_CLI_PATH +
                            " demo --out " + (dir.path / "d").string() + " 2>/dev/null";
    const int status = std::system(cmd.c_str());
    EXPECT_EQ(WEXITSTATUS(status), 3);
    const std::string ok = std::string("EQUILIBRAGE_THREADS=4 ") + EQUILIBRAGE_CLI_PATH +
                           " demo --out " + (dir.path / "d").string() + " 2>/dev/null";
    EXPECT_EQ(WEXITSTATUS(std::system(ok.c_str())), 0);
}

}  // namespace
}  // namespace equilibrage
