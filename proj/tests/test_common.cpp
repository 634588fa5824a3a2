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

#include "sllm/common.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace sllm;

TEST(Common, FloorRatioLandsOnExactMultiples) {
  EXPECT_EQ(floor_ratio(1.0, 0.1), 10u);
  EXPECT_EQ(floor_ratio(1.05, 0.1), 10u);
  EXPECT_EQ(floor_ratio(0.3, 0.1), 3u);
  EXPECT_EQ(floor_ratio(0.0, 0.1), 0u);
  EXPECT_EQ(floor_ratio(-1.0, 0.1), 0u);
  EXPECT_EQ(floor_ratio(0.0999, 0.1), 0u);
}

TEST(Common, Crc32cCheckValue) {
  // Standard CRC-32C check value for the ASCII digits 1..9.
  const char* s = "123456789";
  auto v = crc32c(std::span<const std::byte>(reinterpret_cast<const std::byte*>(s), std::strlen(s)));
  EXPECT_EQ(v, 0xE3069283u);
}

TEST(Common, QuantitiesWithUnits) {
  EXPECT_EQ(parse_bytes("4096", "x"), 4096u);
  EXPECT_EQ(parse_bytes("16MiB", "x"), 16u * MiB);
  EXPECT_EQ(parse_bytes("10GiB", "x"), 10u * GiB);
  EXPECT_EQ(parse_bytes("13GB", "x"), 13000000000u);
  EXPECT_DOUBLE_EQ(parse_quantity("50e9", "x"), 50e9);
  EXPECT_DOUBLE_EQ(parse_quantity("0.001", "x"), 0.001);
  EXPECT_THROW(parse_quantity("5 parsecs", "x"), Error);
  EXPECT_THROW(parse_quantity("12furlongs", "x"), Error);
  EXPECT_THROW(parse_quantity("-3", "x"), Error);
  EXPECT_THROW(parse_u64("12x", "x"), Error);
}

TEST(Common, RecordParsing) {
  auto r = Record::parse("tier kind=dram capacity_bytes=64GiB bandwidth_Bps=50e9", 7);
  EXPECT_EQ(r.tag(), "tier");
  EXPECT_EQ(r.str("kind"), "dram");
  EXPECT_EQ(r.bytes("capacity_bytes"), 64u * GiB);
  EXPECT_DOUBLE_EQ(r.number("bandwidth_Bps"), 50e9);
  EXPECT_DOUBLE_EQ(r.number_or("missing", 3.5), 3.5);
  EXPECT_THROW(r.str("missing"), Error);
  EXPECT_THROW(r.expect_keys({"kind"}), Error);
  EXPECT_THROW(Record::parse("tier kind", 1), Error);
  EXPECT_THROW(Record::parse("tier a=1 a=2", 1), Error);
}

TEST(Common, ErrorCarriesKind) {
  try {
    fail(ErrorKind::Corruption, "bad");
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Corruption);
    EXPECT_STREQ(e.what(), "bad");
  }
}
