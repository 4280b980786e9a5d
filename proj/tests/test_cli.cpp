#include <gtest/gtest.h>

#include <cstdlib>
#include <sys/wait.h>

#include "support.hpp"

using dtcmr::testing::slurp;
using dtcmr::testing::TempDir;

namespace {

int cli(const std::string& args, const std::filesystem::path& log = "/dev/null") {
    const std::string cmd = std::string(DTCMR_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// A small phantom written once through the CLI.
class CliTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new TempDir("cli");
        ASSERT_EQ(cli("phantom --output " + dir_->path().string() +
                      " --name ph --averages 2 --size 64 --noise 0.02 --max-shift 2 --corrupt 2 --seed 3"),
                  0);
    }
    static void TearDownTestSuite() { delete dir_; }

    static std::string p(const std::string& name) { return (dir_->path() / name).string(); }
    static std::string dataset() { return "--dataset " + p("ph.json"); }

    static TempDir* dir_;
};

TempDir* CliTest::dir_ = nullptr;

}  // namespace

TEST(Cli, UsageErrorsExitWithTwo) {
    EXPECT_EQ(cli(""), 2);
    EXPECT_EQ(cli("frobnicate"), 2);
    EXPECT_EQ(cli("run --no-such-flag"), 2);
    EXPECT_EQ(cli("run --rank notanumber --dataset x.json"), 2);
    EXPECT_EQ(cli("--help"), 0);
}

TEST_F(CliTest, PhantomWritesDatasetTruthAndKeepList) {
    for (const char* f : {"ph.json", "ph_truth.json", "ph_keep.txt", "ph_noiseless.bin", "ph_truth_tensor.bin"})
        EXPECT_TRUE(std::filesystem::exists(dir_->path() / f)) << f;
    const std::string keep = slurp(dir_->path() / "ph_keep.txt");
    EXPECT_EQ(std::count(keep.begin(), keep.end(), '\n'), 1 + 26 - 2);
}

TEST_F(CliTest, RunSucceedsAndWritesTheReport) {
    EXPECT_EQ(cli("run " + dataset() + " --output " + p("run") + " --truth " + p("ph_truth.json")), 0);
    EXPECT_TRUE(std::filesystem::exists(dir_->path() / "run" / "report.json"));
    EXPECT_TRUE(std::filesystem::exists(dir_->path() / "run" / "truth_comparison.json"));
}

TEST_F(CliTest, InvalidInputsExitWithTwo) {
    EXPECT_EQ(cli("run --dataset " + p("absent.json") + " --output " + p("x")), 2);
    EXPECT_EQ(cli("run --output " + p("x")), 2);
    EXPECT_EQ(cli("run " + dataset() + " --output " + p("x") + " --engine warp"), 2);
    EXPECT_EQ(cli("run " + dataset() + " --output " + p("x") + " --metric mi"), 2);
    EXPECT_EQ(cli("run " + dataset() + " --output " + p("x") + " --selection manual"), 2);
    EXPECT_EQ(cli("run " + dataset() + " --output " + p("x") + " --config " + p("absent_config.json")), 2);
    dtcmr::io::write_text(dir_->path() / "unknown.json", R"({"rank": 6, "colour": "blue"})");
    EXPECT_EQ(cli("run " + dataset() + " --output " + p("x") + " --config " + p("unknown.json")), 2);
    EXPECT_EQ(cli("bench " + dataset() + " --frames 0 --output " + p("x")), 2);
}

TEST_F(CliTest, FlagsOverrideConfigWhichOverridesTheArm) {
    dtcmr::io::write_text(dir_->path() / "rank0.json", R"({"rank": 0})");
    dtcmr::io::write_text(dir_->path() / "rank6.json", R"({"rank": 6})");
    EXPECT_EQ(cli("run " + dataset() + " --output " + p("prec1") + " --config " + p("rank0.json")), 2);
    EXPECT_EQ(cli("run " + dataset() + " --output " + p("prec2") + " --config " + p("rank0.json") + " --rank 6"), 0);
    EXPECT_EQ(cli("run " + dataset() + " --output " + p("prec3") + " --config " + p("rank6.json") + " --rank 0"), 2);
    // The dft+manual preset asks for manual selection; the config file switches it off again.
    dtcmr::io::write_text(dir_->path() / "arm.json", R"({"arm": "dft+manual", "selection": "none"})");
    EXPECT_EQ(cli("run " + dataset() + " --output " + p("prec4") + " --config " + p("arm.json")), 0);
    EXPECT_EQ(cli("run " + dataset() + " --output " + p("prec5") + " --arm dft+manual"), 2);
}

TEST_F(CliTest, StageFailureExitsWithThree) {
    dtcmr::io::write_text(dir_->path() / "one.txt", "0\n");
    EXPECT_EQ(cli("run " + dataset() + " --output " + p("fail") + " --arm lowrank+manual --manual-keep " + p("one.txt"),
                  dir_->path() / "fail.log"),
              3);
    EXPECT_NE(slurp(dir_->path() / "fail.log").find("average"), std::string::npos);
}

TEST_F(CliTest, StageCommandsChain) {
    ASSERT_EQ(cli("register " + dataset() + " --output " + p("st")), 0);
    ASSERT_EQ(cli("select --dataset " + p("st/registered.json") + " --output " + p("st")), 0);
    ASSERT_EQ(cli("fit --dataset " + p("st/registered.json") + " --verdicts " + p("st/verdicts.csv") + " --output " +
                  p("st")),
              0);
    ASSERT_EQ(cli("evaluate --dataset " + p("st/registered.json") + " --tensor " + p("st/tensor.bin") + " --output " +
                  p("st")),
              0);
    for (const char* f : {"transforms.csv", "verdicts.csv", "tensor.bin", "report.json", "ha_map.pgm"})
        EXPECT_TRUE(std::filesystem::exists(dir_->path() / "st" / f)) << f;
    EXPECT_EQ(cli("fit --dataset " + p("st/registered.json") + " --verdicts " + p("absent.csv")), 2);
}

TEST_F(CliTest, BenchAndArmComparisonWriteTables) {
    ASSERT_EQ(cli("bench " + dataset() + " --frames 2 --output " + p("bench")), 0);
    const std::string totals = slurp(dir_->path() / "bench" / "bench_totals.csv");
    EXPECT_EQ(totals.rfind("engine,frames,total_seconds\ndft,2,", 0), 0u);
    ASSERT_EQ(cli("compare-arms " + dataset() + " --output " + p("arms") + " --manual-keep " + p("ph_keep.txt")), 0);
    const std::string arms = slurp(dir_->path() / "arms" / "arms.csv");
    EXPECT_EQ(std::count(arms.begin(), arms.end(), '\n'), 7);
}
