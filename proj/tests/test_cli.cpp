#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ulfs/csv_io.hpp"
#include "ulfs/sims.hpp"

#ifndef ULFS_KDPE_BIN
#error "ULFS_KDPE_BIN must point at the CLI binary"
#endif

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code;
  std::string out;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string("env -u ULFS_KDPE_CONFIG ") + ULFS_KDPE_BIN + " " + args + " 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) throw std::runtime_error("popen failed");
  std::string out;
  std::array<char, 4096> buf;
  while (const auto k = std::fread(buf.data(), 1, buf.size(), p)) out.append(buf.data(), k);
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("ulfs_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  std::string write(const std::string& name, const std::string& body) const {
    std::ofstream(path(name)) << body;
    return path(name);
  }
  std::string dgp_csv(const std::string& name, std::size_t n, std::uint64_t seed) const {
    std::ofstream os(path(name));
    ulfs::write_sample_csv(os, ulfs::sample_dgp1(n, seed).sample);
    return path(name);
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, EstimateSmokeOnTenRows) {
  const auto in = write("s.csv",
                        "x1,a,y\n0.1,0,0\n0.2,1,1\n0.3,0,1\n0.4,1,0\n0.5,0,0\n"
                        "0.6,1,1\n0.7,0,1\n0.8,1,1\n0.9,0,0\n0.95,1,0\n");
  const auto r = run("estimate --input " + in);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(r.out);
  for (const char* k : {"ate", "rr", "or"}) EXPECT_TRUE(j.at("targets").at(k).is_number()) << k;
  EXPECT_EQ(j.at("n"), 10);
  EXPECT_GT(j.at("sigma").get<double>(), 0.0);
}

TEST_F(Cli, BadTreatmentValueNamesTheLine) {
  const auto in = write("bad.csv", "x1,a,y\n0.1,0,0\n0.2,1,1\n0.3,0,1\n0.4,2,0\n0.5,0,0\n");
  const std::string cmd = std::string("env -u ULFS_KDPE_CONFIG ") + ULFS_KDPE_BIN + " estimate --input " + in + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  std::string err;
  std::array<char, 512> buf;
  while (const auto k = std::fread(buf.data(), 1, buf.size(), p)) err.append(buf.data(), k);
  const int status = pclose(p);
  EXPECT_EQ(WEXITSTATUS(status), 2);
  EXPECT_NE(err.find("line 5"), std::string::npos) << err;
}

TEST_F(Cli, MissingInputIsAnInputError) {
  EXPECT_EQ(run("estimate --input " + path("nope.csv")).code, 2);
  EXPECT_EQ(run("estimate").code, 2);
  EXPECT_EQ(run("estimate --input x --sigma banana").code, 2);
}

TEST_F(Cli, EstimateIsDeterministicApartFromTiming) {
  const auto in = dgp_csv("d.csv", 120, 9);
  auto strip = [](nlohmann::json j) {
    j.at("flow").erase("wall_seconds");
    return j.dump();
  };
  const auto a = run("estimate --input " + in), b = run("estimate --input " + in);
  ASSERT_EQ(a.code, 0);
  ASSERT_EQ(b.code, 0);
  EXPECT_EQ(strip(nlohmann::json::parse(a.out)), strip(nlohmann::json::parse(b.out)));
}

TEST_F(Cli, ConfigFileAndFlagOverride) {
  const auto in = dgp_csv("d.csv", 80, 4);
  const auto cfg = write("c.json", R"({"sigma": 0.5, "max-iters": 3, "stopping": "none", "delta_n": 1e-12})");
  const auto a = run("estimate --input " + in + " --config " + cfg);
  ASSERT_EQ(a.code, 0) << a.out;
  const auto ja = nlohmann::json::parse(a.out);
  EXPECT_EQ(ja.at("sigma"), 0.5);
  EXPECT_EQ(ja.at("iterations"), 3);
  const auto b = run("estimate --input " + in + " --config " + cfg + " --sigma 0.25");
  ASSERT_EQ(b.code, 0);
  EXPECT_EQ(nlohmann::json::parse(b.out).at("sigma"), 0.25);
  const auto bad = write("bad.json", R"({"sigmaa": 1})");
  EXPECT_EQ(run("estimate --input " + in + " --config " + bad).code, 2);
}

TEST_F(Cli, TruthsAreStableAcrossCalls) {
  const auto a = run("truths --dgp DGP1"), b = run("truths --dgp DGP1");
  ASSERT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  const auto j = nlohmann::json::parse(a.out);
  EXPECT_NEAR(j.at("ate").get<double>(), 0.37 / 3.0, 1e-9);
  EXPECT_EQ(run("truths --dgp DGP3").code, 2);
}

TEST_F(Cli, DiagnoseHealthyFlow) {
  const auto r = run("diagnose --dgp DGP1 --n 60 --max-iters 20");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("lyapunov"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
}

TEST_F(Cli, DiagnoseFlagsNegatedDirection) {
  const auto r = run("diagnose --dgp DGP1 --n 60 --max-iters 20 --negate-direction");
  EXPECT_EQ(r.code, 4) << r.out;
}

TEST_F(Cli, DiagnoseZeroStepIsStationary) {
  const auto r = run("diagnose --dgp DGP1 --n 60 --max-iters 10 --delta 0");
  EXPECT_EQ(r.code, 0) << r.out;
}

TEST_F(Cli, SimulateWritesSummaryCsv) {
  const auto r = run("simulate --dgp DGP2 --n 50 --reps 2 --seed 5");
  ASSERT_EQ(r.code, 0);
  std::istringstream is(r.out);
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, ulfs::kSummaryCsvHeader);
  const std::regex row(R"(^DGP2,[a-z_]+,(ATE|RR|OR),[^,]+,\d+,[^,]+,[^,]+,[^,]+$)");
  int rows = 0;
  for (std::string line; std::getline(is, line);) {
    EXPECT_TRUE(std::regex_match(line, row)) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 10);
  EXPECT_EQ(run("simulate --dgp DGP7 --reps 2").code, 2);
  EXPECT_EQ(run("simulate --reps 0").code, 2);
}

TEST_F(Cli, SimulateOutputPrefixWritesAllArtifacts) {
  const auto prefix = path("run");
  ASSERT_EQ(run("simulate --n 40 --reps 2 --output " + prefix).code, 0);
  for (const char* ext : {".csv", ".json", "_hist.csv"}) EXPECT_TRUE(fs::exists(prefix + ext)) << ext;
}
