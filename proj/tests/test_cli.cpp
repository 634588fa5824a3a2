// ----------------------------------------------------------------------------
//  sllm-desk
//  Copyright (c) sllm-desk contributors 2026
//
//   Licensed under the Apache License, Version 2.0 (the "License");
//   you may not use this file except in compliance with the License.
//
//   You may obtain a copy of the License at
//
//                   http://www.apache.org/licenses/LICENSE-2.0
//
//   Unless required by applicable law or agreed to in writing, software
//   distributed under the License is distributed on an "AS IS" BASIS,
//   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
//   See the License for the specific language governing permissions and
//   limitations under the License.
//  ----------------------------------------------------------------------------

#include "sllm/cli.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace sllm;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "sllm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

std::string fx(const std::string& name) { return sllm::testing::fixture(name).string(); }

std::size_t count_lines(const std::string& s, const std::string& prefix) {
  std::istringstream in(s);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) n += line.rfind(prefix, 0) == 0;
  return n;
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(invoke({}).code, 1);
  EXPECT_EQ(invoke({"--bogus"}).code, 1);
  EXPECT_EQ(invoke({"simulate", "--trace", fx("scenario_trace.txt")}).code, 1);
  EXPECT_EQ(invoke({"simulate", "--trace", fx("scenario_trace.txt"), "--config", fx("scenario_cluster.txt"), "--policy", "fastest"}).code, 1);
  EXPECT_EQ(invoke({"compare", "--trace", fx("scenario_trace.txt"), "--config", fx("scenario_cluster.txt"), "--policies", "locality"}).code, 1);
  EXPECT_EQ(invoke({"--help"}).code, 0);
}

TEST(Cli, DataErrorsExitTwo) {
  sllm::testing::TempDir dir("cli_data");
  std::ofstream(dir / "bad_trace.txt") << "0 r1 A 10\n";
  auto r = invoke({"simulate", "--trace", (dir / "bad_trace.txt").string(), "--config", fx("scenario_cluster.txt")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(":1"), std::string::npos) << r.err;
  EXPECT_EQ(invoke({"simulate", "--trace", (dir / "missing.txt").string(), "--config", fx("scenario_cluster.txt")}).code, 2);
  std::ofstream(dir / "unknown_model.txt") << "0 r1 Z 10 1\n";
  EXPECT_EQ(invoke({"simulate", "--trace", (dir / "unknown_model.txt").string(), "--config", fx("scenario_cluster.txt")}).code, 2);
  EXPECT_EQ(invoke({"calibrate", (dir / "missing.txt").string()}).code, 2);
}

TEST(Cli, BinaryExitStatus) {
  const std::string bin = SLLM_CLI_PATH;
  auto status = [](const std::string& cmd) {
    int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(status(bin), 1);
  EXPECT_EQ(status(bin + " simulate --trace /nonexistent --config " + fx("scenario_cluster.txt")), 2);
  EXPECT_EQ(status(bin + " simulate --trace " + fx("scenario_trace.txt") + " --config " + fx("scenario_cluster.txt")), 0);
}

TEST(Cli, CompareScenario) {
  sllm::testing::TempDir dir("cli_cmp");
  auto r = invoke({"compare", "--trace", fx("scenario_trace.txt"), "--config", fx("scenario_cluster.txt"), "--policies",
                "live_migration,availability,locality,preemption", "--out", dir.path().string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("# compare ", 0), 0u);
  EXPECT_EQ(count_lines(r.out, "live_migration "), 1u);
  EXPECT_EQ(count_lines(r.out, "preemption "), 1u);
  auto csv = slurp(dir / "comparison.csv");
  EXPECT_EQ(count_lines(csv, "policy,"), 1u);
  EXPECT_EQ(count_lines(csv, "live_migration,"), 1u);
  EXPECT_EQ(count_lines(csv, "availability,"), 1u);
  EXPECT_EQ(count_lines(csv, "locality,"), 1u);
  EXPECT_EQ(count_lines(csv, "preemption,"), 1u);
  EXPECT_NE(r.out.find(csv), std::string::npos);
}

TEST(Cli, SimulateWritesOutputs) {
  sllm::testing::TempDir dir("cli_sim");
  auto a = dir / "a";
  auto r = invoke({"simulate", "--trace", fx("scenario_trace.txt"), "--config", fx("scenario_cluster.txt"), "--policy", "live_migration",
                "--out", a.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(a / "events.log"));
  auto metrics = slurp(a / "metrics.csv");
  EXPECT_EQ(metrics.rfind(std::string(sim::kMetricsCsvHeader) + "\n", 0), 0u);
  EXPECT_EQ(count_lines(metrics, "live_migration,2,2,0,"), 1u);
  auto reqs = slurp(a / "requests.csv");
  EXPECT_EQ(count_lines(reqs, "reqA,A,completed,0,"), 1u);
  EXPECT_EQ(count_lines(reqs, "reqB,B,completed,1,"), 1u);

  auto b = dir / "b";
  ASSERT_EQ(invoke({"simulate", "--trace", fx("scenario_trace.txt"), "--config", fx("scenario_cluster.txt"), "--policy", "live_migration",
                 "--out", b.string()})
                .code,
            0);
  for (auto f : {"events.log", "metrics.csv", "requests.csv"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}

TEST(Cli, SimulateWithFailurePlan) {
  sllm::testing::TempDir dir("cli_fail");
  std::ofstream(dir / "plan.txt") << "5.3 1 server\n";
  auto r = invoke({"simulate", "--trace", fx("scenario_trace.txt"), "--config", fx("scenario_cluster.txt"), "--failure-plan",
                (dir / "plan.txt").string(), "--out", (dir / "o").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  auto reqs = slurp(dir / "o" / "requests.csv");
  EXPECT_EQ(count_lines(reqs, "reqA,A,aborted,"), 1u);
  EXPECT_EQ(count_lines(reqs, "reqB,B,completed,0,"), 1u);
}

TEST(Cli, GenTraceDeterministic) {
  sllm::testing::TempDir dir("cli_gen");
  std::ofstream(dir / "spec.txt") << "trace duration_s=300 seed=4\nmodel id=A rate=0.2 in_min=1 in_max=64 out_min=1 out_max=32\n";
  auto a = invoke({"gen-trace", "--config", (dir / "spec.txt").string()});
  auto b = invoke({"gen-trace", "--config", (dir / "spec.txt").string()});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  auto c = invoke({"gen-trace", "--config", (dir / "spec.txt").string(), "--seed", "5"});
  EXPECT_NE(a.out, c.out);
  ASSERT_EQ(invoke({"gen-trace", "--config", (dir / "spec.txt").string(), "--out", (dir / "t.txt").string()}).code, 0);
  auto t = sim::load_trace(dir / "t.txt");
  std::istringstream in(a.out);
  EXPECT_EQ(sim::parse_trace(in), t);
  EXPECT_FALSE(t.empty());
}

TEST(Cli, Calibrate) {
  sllm::testing::TempDir dir("cli_cal");
  // y = 0.002 x + 0.05 exactly.
  std::ofstream(dir / "s.txt") << "100 0.25\n200 0.45\n400 0.85\n800 1.65\n";
  auto r = invoke({"calibrate", (dir / "s.txt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("a=0.002"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("b_intercept=0.05"), std::string::npos) << r.out;
  std::ofstream(dir / "one.txt") << "100 0.25\n";
  EXPECT_EQ(invoke({"calibrate", (dir / "one.txt").string()}).code, 2);
}

TEST(Cli, ConvertAndBench) {
  sllm::testing::TempDir dir("cli_ckpt");
  std::vector<ckpt::TensorSpec> tensors;
  for (int i = 0; i < 8; ++i) tensors.push_back(ckpt::TensorSpec::make("w" + std::to_string(i), ckpt::DType::F32, {1000 + 37ull * i}));
  ckpt::write_naive(dir / "naive", tensors, [](const ckpt::TensorSpec& t, std::span<std::byte> out) { cli::fill_pattern(t.name, out); });
  auto r = invoke({"convert", (dir / "naive").string(), "m", "--out", (dir / "ck").string(), "--chunk", "4KiB"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("tensors=8"), std::string::npos);
  auto loaded = ckpt::load_checkpoint(dir / "ck", {}, "m");
  auto naive = ckpt::naive_load(dir / "naive");
  auto manifest = ckpt::read_manifest(dir / "ck", "m");
  std::uint64_t packed = 0;  // naive buffers are packed in listing order
  for (const auto& e : manifest.index) {
    auto a = loaded.buffer.slice(e.buffer_offset, e.spec.byte_length);
    auto b = naive.buffer.slice(packed, e.spec.byte_length);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << e.spec.name;
    packed += e.spec.byte_length;
  }
  EXPECT_EQ(packed, naive.report.bytes);

  auto b = invoke({"bench-load", "--size", "1MiB", "--reps", "1", "--chunk", "256KiB", "--out", (dir / "bench").string()});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(count_lines(b.out, "naive,0,"), 1u);
  EXPECT_EQ(count_lines(b.out, "pipelined,0,"), 1u);
  EXPECT_EQ(count_lines(b.out, "summary tensors=16 "), 1u);
  EXPECT_EQ(invoke({"bench-load", "--reps", "0"}).code, 1);
}
