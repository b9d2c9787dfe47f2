#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <gtest/gtest.h>
#include <json.hpp>

#include <rlmm/dataset.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result
{
    int code = -1;
    std::string output;
};

fs::path scratch(const std::string& name)
{
    auto p = fs::temp_directory_path() / ("rlmm_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Result run(const std::string& args)
{
    const auto log = fs::temp_directory_path() / ("rlmm_cli_log_" + std::to_string(::getpid()));
    const std::string cmd = std::string(RLMM_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    r.output = ss.str();
    return r;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json manifest(const fs::path& dir) { return json::parse(slurp(dir / "manifest.json")); }

std::size_t lines(const fs::path& p)
{
    const auto s = slurp(p);
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

} // namespace

TEST(Cli, UnknownCommandAndBadFlagsExitTwo)
{
    EXPECT_EQ(run("no-such-command").code, 2);
    EXPECT_EQ(run("simulate --persons notanumber --out /tmp/x").code, 2);
    EXPECT_EQ(run("simulate --board no-such-board --out " + scratch("badboard").string()).code, 2);
}

TEST(Cli, BoardsCheckPassesOnCalibratedBoard)
{
    const auto r = run("boards --check grid-4x4 --out " + scratch("boards").string());
    EXPECT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("9336"), std::string::npos) << r.output;
}

TEST(Cli, BoardsCheckFailsOnMismatch)
{
    const auto r = run("boards --check big-L --out " + scratch("boards_bigl").string());
    EXPECT_EQ(r.code, 2) << r.output;
}

TEST(Cli, BoardsWithoutEnumeration)
{
    const auto dir = scratch("boards_dry");
    const auto r = run("boards cross-7x7 --enumerate false --out " + dir.string());
    EXPECT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("cross-7x7"), std::string::npos);
    EXPECT_TRUE(fs::exists(dir / "manifest.json"));
}

TEST(Cli, SimulateWritesDataTruthsAndManifest)
{
    const auto dir = scratch("sim");
    const auto r = run("simulate --board tiny-cross --persons 7 --games 3 --seed 5 --deterministic --out " + dir.string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(lines(dir / "truths.csv"), 8u);
    const auto d = rlmm::load_dataset((dir / "data.jsonl").string());
    const auto eps = rlmm::episodes(d);
    EXPECT_EQ(eps.size(), 21u);
    const auto m = manifest(dir);
    EXPECT_EQ(m["command"], "simulate");
    EXPECT_EQ(m["seed"], 5);
    EXPECT_EQ(m["board"], "tiny-cross");
    EXPECT_EQ(m["dataset_fingerprint"], rlmm::fingerprint(d));
    for (const char* key : {"config", "version", "stage_times", "outputs"}) EXPECT_TRUE(m.contains(key)) << key;

    const auto dir2 = scratch("sim2");
    ASSERT_EQ(run("simulate --board tiny-cross --persons 7 --games 3 --seed 5 --deterministic --out " + dir2.string()).code, 0);
    EXPECT_EQ(slurp(dir / "data.jsonl"), slurp(dir2 / "data.jsonl"));
}

TEST(Cli, ConfigPrecedence)
{
    const auto dir = scratch("cfg");
    {
        std::ofstream cfg(dir / "cfg.json");
        cfg << R"({"persons": 4, "games": 2, "seed": 9})";
    }
    const auto out = dir / "run";
    ASSERT_EQ(run("simulate --config " + (dir / "cfg.json").string() + " --games 3 --deterministic --out " + out.string()).code, 0);
    const auto m = manifest(out);
    EXPECT_EQ(m["config"]["persons"], 4);
    EXPECT_EQ(m["config"]["games"], 3);
    EXPECT_EQ(m["config"]["seed"], 9);
    EXPECT_EQ(m["config"]["board"], "tiny-cross");

    {
        std::ofstream cfg(dir / "bad.json");
        cfg << R"({"no_such_key": 1})";
    }
    EXPECT_EQ(run("simulate --config " + (dir / "bad.json").string() + " --out " + (dir / "bad").string()).code, 2);
}

TEST(Cli, FitBothModelsAndRerunIsByteIdentical)
{
    const auto dir = scratch("fit");
    ASSERT_EQ(run("simulate --board tiny-cross --persons 6 --games 4 --seed 3 --deterministic --out " + (dir / "sim").string()).code, 0);
    const auto data = (dir / "sim" / "data.jsonl").string();

    const auto rl = dir / "rlmm";
    auto r = run("fit-rlmm --data " + data + " --k-outer 3 --batch-size 32 --deterministic --out " + rl.string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(lines(rl / "persons.csv"), 7u);
    EXPECT_TRUE(fs::exists(rl / "traces.csv"));
    EXPECT_TRUE(fs::exists(rl / "theta.ckpt"));
    const auto summary = json::parse(slurp(rl / "summary.json"));
    EXPECT_TRUE(summary.contains("rmse_log_beta"));

    const auto re = dir / "rlmm_rerun";
    r = run("rerun " + (rl / "manifest.json").string() + " --out " + re.string());
    ASSERT_EQ(r.code, 0) << r.output;
    for (const char* f : {"persons.csv", "traces.csv", "summary.json", "theta.ckpt", "recovery.csv"})
        EXPECT_EQ(slurp(rl / f), slurp(re / f)) << f;

    ASSERT_EQ(run("simulate --board tiny-cross --persons 20 --games 20 --seed 3 --deterministic --out " + (dir / "sim20").string()).code, 0);
    const auto mm = dir / "mdpmm";
    r = run("fit-mdpmm --data " + (dir / "sim20" / "data.jsonl").string() + " --nodes 7 --deterministic --out " + mm.string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(lines(mm / "persons.csv"), 21u);
    EXPECT_TRUE(fs::exists(mm / "fit_meta.txt"));

    const auto inf = dir / "influence";
    r = run("influence --data " + data + " --fit " + rl.string() + " --top 5 --validate --deterministic --out " + inf.string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(lines(inf / "critical.csv"), 6u);
    for (const char* f : {"influence.csv", "aggregates.csv", "collapse.csv", "validation.csv"})
        EXPECT_TRUE(fs::exists(inf / f)) << f;

    const auto inf2 = dir / "influence2";
    ASSERT_EQ(run("influence --data " + data + " --fit " + rl.string() + " --top 5 --deterministic --out " + inf2.string()).code, 0);
    EXPECT_EQ(slurp(inf / "critical.csv"), slurp(inf2 / "critical.csv"));

    const auto rep = dir / "report";
    r = run("report " + rl.string() + " " + mm.string() + " --out " + rep.string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_TRUE(fs::exists(rep / "rmse_table.csv"));
    EXPECT_TRUE(fs::exists(rep / "report.md"));
}

TEST(Cli, MdpmmNonConvergenceIsRuntimeFailureWithTrace)
{
    const auto dir = scratch("mm_small");
    ASSERT_EQ(run("simulate --board tiny-cross --persons 6 --games 4 --seed 3 --out " + (dir / "sim").string()).code, 0);
    const auto r = run("fit-mdpmm --data " + (dir / "sim" / "data.jsonl").string() + " --nodes 7 --max-rounds 1 --out "
                       + (dir / "mm").string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("did not converge"), std::string::npos);
    EXPECT_NE(r.output.find("sigma2="), std::string::npos);
}

TEST(Cli, InfluenceRejectsForeignData)
{
    const auto dir = scratch("foreign");
    ASSERT_EQ(run("simulate --persons 3 --games 2 --seed 1 --out " + (dir / "a").string()).code, 0);
    ASSERT_EQ(run("simulate --persons 3 --games 2 --seed 2 --out " + (dir / "b").string()).code, 0);
    ASSERT_EQ(run("fit-rlmm --data " + (dir / "a" / "data.jsonl").string() + " --k-outer 1 --out " + (dir / "fit").string()).code, 0);
    EXPECT_EQ(run("influence --data " + (dir / "b" / "data.jsonl").string() + " --fit " + (dir / "fit").string()
                  + " --out " + (dir / "inf").string()).code,
              2);
}

TEST(Cli, ReportOnEmptyDirectoryExitsTwo)
{
    const auto dir = scratch("empty");
    const auto r = run("report " + dir.string() + " --out " + (dir / "out").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_FALSE(r.output.empty());
}

TEST(Cli, MissingDatasetExitsTwo)
{
    const auto dir = scratch("missing");
    EXPECT_EQ(run("fit-rlmm --data " + (dir / "nope.jsonl").string() + " --out " + (dir / "o").string()).code, 2);
}
