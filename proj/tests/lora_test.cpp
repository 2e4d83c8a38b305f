// Copyright 2026 The FedMentor Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "fedmentor/lora.hpp"

#include <gtest/gtest.h>

#include "reference/oracles.hpp"

namespace fedmentor {
namespace {

TEST(ClassifyLayerTest, ThirdsRule) {
  EXPECT_EQ(classify_layer(0, 9), LayerPosition::kEarly);
  EXPECT_EQ(classify_layer(4, 9), LayerPosition::kMiddle);
  EXPECT_EQ(classify_layer(8, 9), LayerPosition::kLate);
  EXPECT_EQ(classify_layer(0, 1), LayerPosition::kEarly);
  EXPECT_EQ(classify_layer(2, 3), LayerPosition::kLate);
}

TEST(ClassifyLayerTest, OutOfRangeThrows) {
  EXPECT_THROW(classify_layer(3, 3), InvalidArgument);
  EXPECT_THROW(classify_layer(0, 0), InvalidArgument);
}

TEST(ClassifyLayerTest, PartitionIsContiguousAndOrdered) {
  for (std::size_t L = 1; L <= 40; ++L) {
    int prev = 0;
    std::size_t early = 0;
    for (std::size_t i = 0; i < L; ++i) {
      const int pos = static_cast<int>(classify_layer(i, L));
      EXPECT_GE(pos, prev) << "L=" << L << " i=" << i;
      prev = pos;
      early += pos == 0;
    }
    EXPECT_EQ(early, (L + 2) / 3);
    EXPECT_EQ(classify_layer(0, L), LayerPosition::kEarly);
  }
}

TEST(LoraPairTest, ShapeInvariants) {
  EXPECT_THROW(LoraPair(0, Matrix(2, 4), Matrix(4, 3)), ShapeError);
  // r = 3 > min(d=2, k=4)
  EXPECT_THROW(LoraPair(0, Matrix(3, 4), Matrix(2, 3)), ShapeError);
  EXPECT_NO_THROW(LoraPair(0, Matrix(2, 4), Matrix(4, 2)));
}

TEST(AdapterSetTest, RejectsDuplicateAndOutOfRangeLayers) {
  std::vector<LoraPair> dup = {LoraPair(1, Matrix(1, 2), Matrix(2, 1)),
                               LoraPair(1, Matrix(1, 2), Matrix(2, 1))};
  EXPECT_THROW(AdapterSet(3, dup), ShapeError);
  std::vector<LoraPair> far = {LoraPair(3, Matrix(1, 2), Matrix(2, 1))};
  EXPECT_THROW(AdapterSet(3, far), ShapeError);
}

TEST(MergeDeltaTest, Examples) {
  EXPECT_EQ(merge_delta(LoraPair(0, Matrix(2, 3), Matrix(4, 2, 1.0))),
            Matrix(4, 3));
  EXPECT_EQ(merge_delta(LoraPair(0, Matrix{{2, 3}}, Matrix{{1}, {0}})),
            (Matrix{{2, 3}, {0, 0}}));
  Rng rng(4);
  const LoraPair p(0, gaussian(rng, 2, 5, 0, 1), gaussian(rng, 6, 2, 0, 1));
  EXPECT_EQ(merge_delta(p), matmul(p.b(), p.a()));
}

TEST(MergeDeltaTest, BilinearInA) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const LoraPair p(0, gaussian(rng, 2, 4, 0, 1), gaussian(rng, 3, 2, 0, 1));
    const double c = rng.normal();
    const LoraPair q(0, scaled(c, p.a()), p.b());
    const Matrix lhs = merge_delta(q);
    const Matrix rhs = scaled(c, merge_delta(p));
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      EXPECT_NEAR(lhs.data()[i], rhs.data()[i], 1e-12);
    }
  }
}

AdapterSet uniform_set(std::size_t layers, std::size_t r, std::size_t d,
                       std::size_t k) {
  std::vector<LoraPair> pairs;
  for (std::size_t l = 0; l < layers; ++l) {
    pairs.emplace_back(l, Matrix(r, k), Matrix(d, r));
  }
  return AdapterSet(layers, std::move(pairs));
}

TEST(ParamCountTest, Examples) {
  EXPECT_EQ(trainable_param_count(uniform_set(1, 2, 4, 4)), 16u);
  EXPECT_EQ(trainable_param_count(AdapterSet()), 0u);
  EXPECT_EQ(trainable_param_count(uniform_set(3, 8, 64, 64)), 3072u);
}

TEST(PayloadBytesTest, Examples) {
  EXPECT_EQ(payload_bytes(uniform_set(1, 2, 4, 4), 8, false), 128u);
  EXPECT_EQ(payload_bytes(uniform_set(1, 2, 4, 4), 8),
            128u + kWireFixedHeaderBytes + kWireLayerHeaderBytes);
  EXPECT_EQ(payload_bytes(uniform_set(2, 4, 16, 16), 2, false),
            2 * payload_bytes(uniform_set(2, 2, 16, 16), 2, false));
  EXPECT_THROW(payload_bytes(AdapterSet(), 3), InvalidArgument);
}

TEST(PayloadBytesTest, ThreeClientRoundVolume) {
  // 16.56 MB per client, three clients: 49.68 MB against a reported 49.69 MB.
  const double total = round_upload_megabytes(16.56, 3);
  EXPECT_NEAR(total, 49.68, 1e-9);
  EXPECT_LT(std::abs(total - 49.69) / 49.69, 1e-3);
}

TEST(WireTest, RoundTripAndLengthProperty) {
  Rng rng(123);
  for (int t = 0; t < 100; ++t) {
    const std::size_t layers = 1 + rng.uniform_index(5);
    const AdapterSet set = testing::random_adapter_set(rng, layers, 9);
    const auto bytes = serialize(set);
    EXPECT_EQ(bytes.size(), payload_bytes(set, 8));
    EXPECT_EQ(deserialize(bytes), set);
  }
}

TEST(WireTest, SparseLayersRoundTripWithExplicitTotal) {
  std::vector<LoraPair> pairs = {LoraPair(1, Matrix{{1, 2}}, Matrix{{-0.0}, {3}})};
  const AdapterSet set(5, pairs);
  const auto back = deserialize(serialize(set), 5);
  EXPECT_EQ(back, set);
  EXPECT_TRUE(std::signbit(back.pairs()[0].b()(0, 0)));
}

TEST(WireTest, HeaderLayout) {
  std::vector<LoraPair> pairs = {LoraPair(0, Matrix{{2.0}}, Matrix{{1.0}})};
  const auto bytes = serialize(AdapterSet(1, pairs));
  ASSERT_EQ(bytes.size(), 12u + 16u + 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FMAD");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[8], 1);  // layer count
  EXPECT_EQ(bytes[16], 1);  // r
  // B = 1.0 precedes A = 2.0; 1.0 is 0x3FF0000000000000.
  EXPECT_EQ(bytes[28 + 7], 0x3F);
  EXPECT_EQ(bytes[28 + 6], 0xF0);
  EXPECT_EQ(bytes[36 + 7], 0x40);
}

TEST(WireTest, CorruptMagicRejected) {
  Rng rng(1);
  auto bytes = serialize(testing::random_adapter_set(rng, 2));
  bytes[0] = 'X';
  try {
    deserialize(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(WireTest, VersionMismatchRejectedWithOffset) {
  Rng rng(1);
  auto bytes = serialize(testing::random_adapter_set(rng, 2));
  bytes[4] = 2;
  try {
    deserialize(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(WireTest, TruncationRejectedWithOffset) {
  Rng rng(2);
  const auto full = serialize(testing::random_adapter_set(rng, 3));
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, std::size_t{20},
                          full.size() - 1}) {
    std::vector<std::uint8_t> part(full.begin(), full.begin() + cut);
    EXPECT_THROW(deserialize(part), FormatError) << "cut=" << cut;
  }
  auto extra = full;
  extra.push_back(0);
  EXPECT_THROW(deserialize(extra), FormatError);
}

}  // namespace
}  // namespace fedmentor
