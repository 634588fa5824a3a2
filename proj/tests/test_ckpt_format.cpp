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

#include "sllm/ckpt_format.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>

using namespace sllm;
using namespace sllm::ckpt;
using sllm::testing::TempDir;

namespace {

// Deterministic content per (tensor name, byte index).
std::byte pattern_byte(const std::string& name, std::uint64_t i) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  return static_cast<std::byte>((h >> 17) ^ (i * 2654435761ULL) ^ (i >> 8));
}

PayloadSource pattern_source() {
  return [](const TensorIndexEntry& e, std::span<std::byte> out) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pattern_byte(e.spec.name, i);
    return out.size();
  };
}

std::vector<TensorSpec> u8_tensors(std::initializer_list<std::uint64_t> sizes) {
  std::vector<TensorSpec> out;
  int i = 0;
  for (auto s : sizes) out.push_back(TensorSpec::make("t" + std::to_string(i++), DType::U8, {s}));
  return out;
}

void expect_payloads(const CheckpointManifest& m, const ModelBuffer& buf) {
  ASSERT_EQ(buf.size(), m.buffer_bytes());
  for (const auto& e : m.index) {
    auto s = buf.slice(e.buffer_offset, e.spec.byte_length);
    for (std::uint64_t i = 0; i < s.size(); ++i) {
      ASSERT_EQ(s[i], pattern_byte(e.spec.name, i)) << e.spec.name << " byte " << i;
    }
  }
}

void check_plan_structure(const CheckpointManifest& m, const LoadPlan& plan) {
  // Coverage and sequentiality: per partition, chunks tile [0, payload) in order.
  std::vector<std::uint64_t> cursor(m.partitions.size(), 0);
  for (const auto& c : plan.chunks) {
    ASSERT_LT(c.partition_id, m.partitions.size());
    EXPECT_EQ(c.file_offset, cursor[c.partition_id]);
    EXPECT_GT(c.length, 0u);
    EXPECT_LE(c.length, m.chunk_size);
    cursor[c.partition_id] = c.file_offset + c.length;
  }
  for (std::uint32_t p = 0; p < m.partitions.size(); ++p) EXPECT_EQ(cursor[p], m.payload_bytes(p));

  // Union of chunk destinations equals union of tensor buffer ranges.
  auto merge = [](std::vector<std::pair<std::uint64_t, std::uint64_t>> v) {
    std::sort(v.begin(), v.end());
    std::vector<std::pair<std::uint64_t, std::uint64_t>> out;
    for (auto r : v) {
      if (r.first == r.second) continue;
      if (!out.empty() && r.first <= out.back().second) {
        out.back().second = std::max(out.back().second, r.second);
      } else {
        out.push_back(r);
      }
    }
    return out;
  };
  std::vector<std::pair<std::uint64_t, std::uint64_t>> a, b;
  for (const auto& c : plan.chunks) a.emplace_back(c.buffer_offset, c.buffer_offset + c.length);
  for (const auto& e : m.index) b.emplace_back(e.buffer_offset, e.buffer_offset + e.spec.byte_length);
  EXPECT_EQ(merge(a), merge(b));
}

}  // namespace

TEST(BuildManifest, GreedyPackingStartsNewPartition) {
  auto m = build_manifest("m", u8_tensors({10, 10, 10}), 1, 1, 25);
  ASSERT_EQ(m.partitions.size(), 2u);
  EXPECT_EQ(m.partitions[0].size, 20u);
  EXPECT_EQ(m.partitions[1].size, 10u);
  EXPECT_EQ(m.index[2].partition_id, 1u);
  EXPECT_EQ(m.index[2].partition_offset, 0u);
  EXPECT_EQ(m.index[2].buffer_offset, 20u);
  EXPECT_EQ(m.total_bytes, 30u);
}

TEST(BuildManifest, EmptyTensorList) {
  auto m = build_manifest("m", {});
  EXPECT_TRUE(m.partitions.empty());
  EXPECT_EQ(m.total_bytes, 0u);
}

TEST(BuildManifest, SingleLargeTensor) {
  auto m = build_manifest("m", u8_tensors({100 * MiB}), 16 * MiB);
  ASSERT_EQ(m.partitions.size(), 1u);
  EXPECT_EQ(m.index[0].buffer_offset, 0u);
  EXPECT_EQ(m.partitions[0].size, 100 * MiB);
}

TEST(BuildManifest, PadsPartitionsToAlignment) {
  auto m = build_manifest("m", u8_tensors({5000}), 8192, 4096);
  EXPECT_EQ(m.partitions[0].size, 8192u);
  EXPECT_EQ(m.payload_bytes(0), 5000u);
}

TEST(BuildManifest, ScalarAndShapes) {
  auto s = TensorSpec::make("s", DType::F32, {});
  EXPECT_EQ(s.byte_length, 4u);
  auto t = TensorSpec::make("w", DType::BF16, {3, 5, 7});
  EXPECT_EQ(t.byte_length, 3u * 5 * 7 * 2);
}

TEST(BuildManifest, Errors) {
  auto dup = u8_tensors({1, 1});
  dup[1].name = dup[0].name;
  EXPECT_THROW(build_manifest("m", dup), Error);
  EXPECT_THROW(build_manifest("m", u8_tensors({100}), 1, 1, 50), Error);
  EXPECT_THROW(build_manifest("m", u8_tensors({1}), 0, 1), Error);
  EXPECT_THROW(build_manifest("m", u8_tensors({1}), 4096, 3), Error);
  EXPECT_THROW(build_manifest("m", u8_tensors({1}), 6000, 4096), Error);
}

TEST(PlanLoad, CeilingDivisionIntoChunks) {
  auto m = build_manifest("m", u8_tensors({100 * MiB}), 16 * MiB);
  auto plan = plan_load(m);
  ASSERT_EQ(plan.chunks.size(), 7u);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(plan.chunks[i].length, 16 * MiB);
  EXPECT_EQ(plan.chunks[6].length, 4 * MiB);
  check_plan_structure(m, plan);
}

TEST(PlanLoad, EmptyAndExactDivision) {
  EXPECT_TRUE(plan_load(build_manifest("m", {})).chunks.empty());
  auto m = build_manifest("m", u8_tensors({16 * MiB, 16 * MiB}), 16 * MiB, 4096, 16 * MiB);
  auto plan = plan_load(m);
  ASSERT_EQ(plan.chunks.size(), 2u);
  EXPECT_EQ(plan.chunks[0].partition_id, 0u);
  EXPECT_EQ(plan.chunks[1].partition_id, 1u);
  EXPECT_EQ(plan.chunks[1].buffer_offset, 16 * MiB);
}

TEST(PlanLoad, ClampsPipelineShape) {
  auto plan = plan_load(build_manifest("m", u8_tensors({10})), 0, 0);
  EXPECT_EQ(plan.worker_count, 1u);
  EXPECT_EQ(plan.staging_buffer_count, 2u);
}

TEST(WriteCheckpoint, TwoTensorModelFiles) {
  TempDir dir("write2");
  auto res = write_checkpoint(build_manifest("tiny", u8_tensors({100, 200})), pattern_source(), dir.path());
  ASSERT_EQ(res.files.size(), 2u);
  EXPECT_EQ(res.files[0].filename(), "tiny.sllm");
  EXPECT_EQ(res.files[1].filename(), "tiny.part0");
  EXPECT_EQ(std::filesystem::file_size(res.files[1]), 4096u);
}

TEST(WriteCheckpoint, EmptyModelWritesManifestOnly) {
  TempDir dir("write0");
  auto res = write_checkpoint(build_manifest("empty", {}), pattern_source(), dir.path());
  ASSERT_EQ(res.files.size(), 1u);
  auto loaded = load_checkpoint(dir.path());
  EXPECT_EQ(loaded.buffer.size(), 0u);
  EXPECT_EQ(loaded.report.throughput, 0.0);
}

TEST(WriteCheckpoint, RefusesOverwriteWithoutFlag) {
  TempDir dir("overwrite");
  auto m = build_manifest("m", u8_tensors({10}));
  write_checkpoint(m, pattern_source(), dir.path());
  try {
    write_checkpoint(m, pattern_source(), dir.path());
    FAIL() << "expected error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("exists"), std::string::npos);
  }
  EXPECT_NO_THROW(write_checkpoint(m, pattern_source(), dir.path(), true));
}

TEST(WriteCheckpoint, ShortPayloadIsAnError) {
  TempDir dir("short");
  PayloadSource src = [](const TensorIndexEntry&, std::span<std::byte> out) { return out.size() / 2; };
  EXPECT_THROW(write_checkpoint(build_manifest("m", u8_tensors({10})), src, dir.path()), Error);
}

TEST(ManifestBytes, LayoutMatchesFormat) {
  auto m = build_manifest("m", {TensorSpec::make("ab", DType::F16, {2, 3})}, 4096, 4096);
  auto bytes = serialize_manifest(m);
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(bytes.substr(0, 8), "SLLMCKPT");
  auto u32 = [&](std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[at + i]);
    return v;
  };
  EXPECT_EQ(u32(8), 1u);      // version
  EXPECT_EQ(u32(12), 4096u);  // chunk
  EXPECT_EQ(u32(16), 4096u);  // alignment
  EXPECT_EQ(u32(20), 1u);     // partitions
  // header 32 + partition (2 + 7 + 8 + 4) + count 4 + tensor (2 + 2 + 1 + 1 + 16 + 4 + 8 + 8)
  EXPECT_EQ(bytes.size(), 32u + 21 + 4 + 42);
  EXPECT_EQ(parse_manifest(bytes, "m"), m);
}

TEST(ReadManifest, RoundTripIdentity) {
  TempDir dir("rt");
  auto res = write_checkpoint(build_manifest("m", u8_tensors({7, 9000, 3})), pattern_source(), dir.path());
  EXPECT_EQ(read_manifest(dir.path()), res.manifest);
}

TEST(ReadManifest, TruncatedPartitionDetected) {
  TempDir dir("trunc");
  write_checkpoint(build_manifest("m", u8_tensors({5000})), pattern_source(), dir.path());
  auto part = dir / "m.part0";
  std::filesystem::resize_file(part, std::filesystem::file_size(part) - 1);
  try {
    read_manifest(dir.path());
    FAIL() << "expected corruption";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Corruption);
  }
}

TEST(ReadManifest, FlippedByteFailsChecksum) {
  TempDir dir("flip");
  write_checkpoint(build_manifest("m", u8_tensors({5000})), pattern_source(), dir.path());
  {
    std::fstream f(dir / "m.part0", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    char c = 0x5a;
    f.write(&c, 1);
  }
  EXPECT_THROW(read_manifest(dir.path()), Error);
}

TEST(ReadManifest, BadMagicAndVersion) {
  TempDir dir("magic");
  write_checkpoint(build_manifest("m", u8_tensors({10})), pattern_source(), dir.path());
  auto path = dir / "m.sllm";
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << b;
  };
  auto bad = bytes;
  bad[0] = 'X';
  write(bad);
  try {
    read_manifest(dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
  }
  bad = bytes;
  bad[8] = 2;
  write(bad);
  try {
    read_manifest(dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(ReadManifest, MissingPartitionFile) {
  TempDir dir("missing");
  write_checkpoint(build_manifest("m", u8_tensors({10})), pattern_source(), dir.path());
  std::filesystem::remove(dir / "m.part0");
  EXPECT_THROW(read_manifest(dir.path()), Error);
}

TEST(ExecuteLoad, WorkerCountDoesNotChangeBytes) {
  TempDir dir("workers");
  std::vector<TensorSpec> ts;
  for (int i = 0; i < 40; ++i) ts.push_back(TensorSpec::make("w" + std::to_string(i), DType::F32, {1000 + 37 * static_cast<std::uint64_t>(i)}));
  auto m = write_checkpoint(build_manifest("m", ts, 64 * KiB, 4096, 1 * MiB), pattern_source(), dir.path()).manifest;
  auto one = load_checkpoint(dir.path(), LoadOptions{true, 1, 2});
  auto four = load_checkpoint(dir.path(), LoadOptions{true, 4, 4});
  auto buffered = load_checkpoint(dir.path(), LoadOptions{false, 3, 3});
  expect_payloads(m, one.buffer);
  ASSERT_EQ(one.buffer.size(), four.buffer.size());
  EXPECT_TRUE(std::equal(one.buffer.span().begin(), one.buffer.span().end(), four.buffer.span().begin()));
  EXPECT_TRUE(std::equal(one.buffer.span().begin(), one.buffer.span().end(), buffered.buffer.span().begin()));
  EXPECT_EQ(one.report.bytes, m.total_bytes);
  EXPECT_EQ(four.report.bytes, m.total_bytes);
  EXPECT_FALSE(buffered.report.direct_io_used);
  EXPECT_TRUE(four.report.direct_io_used || four.report.direct_io_fallback);
}

TEST(ExecuteLoad, UnalignedPlanFallsBackWithFlag) {
  TempDir dir("unaligned");
  auto m = write_checkpoint(build_manifest("m", u8_tensors({13, 29, 100}), 16, 1), pattern_source(), dir.path()).manifest;
  auto r = load_checkpoint(dir.path());
  expect_payloads(m, r.buffer);
  EXPECT_TRUE(r.report.direct_io_fallback);
  EXPECT_FALSE(r.report.direct_io_used);
}

TEST(ExecuteLoad, ReadFailureThrows) {
  TempDir dir("readfail");
  auto m = write_checkpoint(build_manifest("m", u8_tensors({200 * KiB}), 64 * KiB), pattern_source(), dir.path()).manifest;
  auto plan = plan_load(m);
  std::filesystem::resize_file(dir / "m.part0", 70 * KiB);
  EXPECT_THROW(execute_load(plan, dir.path()), Error);
  std::filesystem::remove(dir / "m.part0");
  EXPECT_THROW(execute_load(plan, dir.path()), Error);
}

TEST(ExecuteLoad, RejectsBadOptions) {
  auto plan = plan_load(build_manifest("m", {}));
  EXPECT_THROW(execute_load(plan, ".", LoadOptions{true, 0, 4}), Error);
  EXPECT_THROW(execute_load(plan, ".", LoadOptions{true, 1, 1}), Error);
}

TEST(ExecuteLoad, ConcurrentLoadsDoNotInterfere) {
  TempDir a("conc_a"), b("conc_b");
  auto ma = write_checkpoint(build_manifest("a", u8_tensors({300 * KiB, 5})), pattern_source(), a.path()).manifest;
  std::vector<TensorSpec> tb = {TensorSpec::make("x", DType::I64, {9000}), TensorSpec::make("y", DType::U8, {77})};
  auto mb = write_checkpoint(build_manifest("b", tb, 8 * KiB), pattern_source(), b.path()).manifest;
  LoadResult ra, rb;
  std::thread t1([&] { ra = load_checkpoint(a.path()); });
  std::thread t2([&] { rb = load_checkpoint(b.path()); });
  t1.join();
  t2.join();
  expect_payloads(ma, ra.buffer);
  expect_payloads(mb, rb.buffer);
}

TEST(RoundTripProperty, RandomizedCheckpoints) {
  std::mt19937_64 rng(20240601);
  TempDir root("prop");
  const std::uint64_t aligns[] = {1, 64, 512, 4096};
  const DType dtypes[] = {DType::U8, DType::F16, DType::F32, DType::I64, DType::BF16};
  for (int c = 0; c < 120; ++c) {
    SCOPED_TRACE("case " + std::to_string(c));
    std::vector<TensorSpec> ts;
    const int n = std::uniform_int_distribution<int>(0, 60)(rng);
    for (int i = 0; i < n; ++i) {
      DType d = dtypes[rng() % 5];
      std::vector<std::uint64_t> shape;
      const int rank = static_cast<int>(rng() % 3);
      for (int k = 0; k < rank; ++k) shape.push_back(1 + rng() % 40);
      ts.push_back(TensorSpec::make("t" + std::to_string(i), d, shape));
    }
    const auto align = aligns[rng() % 4];
    const auto chunk = align * (1 + rng() % 64);
    std::uint64_t largest = 1;
    for (const auto& t : ts) largest = std::max(largest, t.byte_length);
    const auto maxpart = largest + rng() % 20000;
    auto m = build_manifest("p" + std::to_string(c), ts, chunk, align, maxpart);
    auto dir = root / ("c" + std::to_string(c));
    auto written = write_checkpoint(m, pattern_source(), dir).manifest;
    auto plan = plan_load(read_manifest(dir));
    check_plan_structure(written, plan);
    LoadOptions opt{rng() % 2 == 0, static_cast<std::uint32_t>(1 + rng() % 4), static_cast<std::uint32_t>(2 + rng() % 3)};
    auto r = execute_load(plan, dir, opt);
    expect_payloads(written, r.buffer);
    EXPECT_EQ(r.report.bytes, written.total_bytes);
    std::filesystem::remove_all(dir);
  }
}

TEST(Naive, ConvertRoundTrip) {
  TempDir dir("naive");
  std::vector<TensorSpec> ts = {TensorSpec::make("embed", DType::F32, {64, 8}), TensorSpec::make("bias", DType::F16, {8}),
                                TensorSpec::make("scale", DType::F32, {})};
  write_naive(dir / "naive", ts, [](const TensorSpec& t, std::span<std::byte> out) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pattern_byte(t.name, i);
  });
  auto m = convert_from_naive(dir / "naive", dir / "ckpt", "toy", 4096, 4096);
  auto r = load_checkpoint(dir / "ckpt");
  expect_payloads(m, r.buffer);
  auto naive = naive_load(dir / "naive");
  ASSERT_EQ(naive.buffer.size(), r.buffer.size());
  EXPECT_TRUE(std::equal(naive.buffer.span().begin(), naive.buffer.span().end(), r.buffer.span().begin()));
}

TEST(Naive, ListingNamingMissingFile) {
  TempDir dir("naive_missing");
  write_naive(dir.path(), {TensorSpec::make("a", DType::U8, {4})}, [](const TensorSpec&, std::span<std::byte>) {});
  {
    std::ofstream l(dir / "listing.txt", std::ios::app);
    l << "ghost u8 4\n";
  }
  EXPECT_THROW(convert_from_naive(dir.path(), dir / "out", "m"), Error);
}

TEST(Naive, SizeMismatch) {
  TempDir dir("naive_size");
  write_naive(dir.path(), {TensorSpec::make("a", DType::U8, {4})}, [](const TensorSpec&, std::span<std::byte>) {});
  std::filesystem::resize_file(dir / "a", 3);
  EXPECT_THROW(convert_from_naive(dir.path(), dir / "out", "m"), Error);
}
