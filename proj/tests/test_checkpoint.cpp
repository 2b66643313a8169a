#include <gtest/gtest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>

#include "pmeta/checkpoint.hpp"
#include "pmeta/error.hpp"
#include "pmeta/rng.hpp"

using namespace pmeta;

namespace {

AdaptPlan sample_plan(bool attention) {
  Rng rng(17);
  AdaptPlan p;
  p.network = NetworkSpec::parse(
      "input channels=2 height=4 width=4\n"
      "conv2d in=2 out=4 kernel=3 stride=1 padding=1\n"
      "group_norm channels=4 groups=2\n"
      "relu\n"
      "max_pool window=2 stride=2\n"
      "fully_connected in=16 out=3\n");
  p.weights = init_params(p.network, rng);
  p.alpha = rng.uniform_tensor({3, 2}, 0.0, 0.1);
  p.alpha[1] = 0.0;
  p.attention_enabled = attention;
  p.rho_fw = 0.1 + 0.2;  // not exactly representable in short decimal
  p.rho_bw = 0.05;
  p.attention = AttentionParams::init(p.network, 3, rng);
  if (!attention) p.attention.layers.clear();
  auto flat = p.attention.flatten();
  for (Tensor& t : flat) t = rng.normal_tensor(t.shape(), 1.0);
  p.attention.assign(flat);
  return p;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwise) {
  for (bool attention : {false, true}) {
    const AdaptPlan p = sample_plan(attention);
    const auto bytes = serialize_plan(p);
    ASSERT_GE(bytes.size(), 11u);
    EXPECT_EQ(std::memcmp(bytes.data(), "PMETA1\0", 7), 0);
    EXPECT_EQ(bytes[7], 1);  // little-endian version
    EXPECT_EQ(bytes[8], 0);

    const AdaptPlan q = deserialize_plan(bytes);
    EXPECT_EQ(q.network, p.network);
    EXPECT_TRUE(q.alpha.identical(p.alpha));
    ASSERT_EQ(q.weights.size(), p.weights.size());
    for (std::size_t i = 0; i < p.weights.size(); ++i) EXPECT_TRUE(q.weights[i].identical(p.weights[i]));
    EXPECT_EQ(q.attention_enabled, attention);
    EXPECT_EQ(q.rho_fw, p.rho_fw);
    EXPECT_EQ(q.rho_bw, p.rho_bw);
    EXPECT_EQ(q.attention.reduction, 3u);
    const auto fa = p.attention.flatten(), fb = q.attention.flatten();
    ASSERT_EQ(fa.size(), fb.size());
    for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_TRUE(fa[i].identical(fb[i]));
    EXPECT_EQ(serialize_plan(q), bytes);
  }
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "pmeta_checkpoint_test.bin").string();
  const AdaptPlan p = sample_plan(true);
  save_plan(p, path);
  EXPECT_EQ(serialize_plan(load_plan(path)), serialize_plan(p));
  std::remove(path.c_str());
  EXPECT_THROW(load_plan(path), Error);
}

TEST(Checkpoint, CorruptInputIsAParseError) {
  const auto bytes = serialize_plan(sample_plan(true));
  auto kind_of = [](const std::vector<std::uint8_t>& b) {
    try {
      deserialize_plan(b);
    } catch (const Error& e) {
      return static_cast<int>(e.kind());
    }
    return -1;
  };
  const int parse = static_cast<int>(ErrorKind::parse);
  for (std::size_t cut : {0ul, 5ul, 11ul, bytes.size() / 2, bytes.size() - 1})
    EXPECT_EQ(kind_of(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<long>(cut))), parse) << cut;
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(kind_of(bad), parse);
  bad = bytes;
  bad[7] = 9;
  EXPECT_EQ(kind_of(bad), parse);
  bad = bytes;
  bad.push_back(0);
  EXPECT_EQ(kind_of(bad), parse);
}
