#include <gtest/gtest.h>

#include <set>

#include <segcascade/label_algebra.hpp>

#include "support.hpp"

using namespace segcascade;

namespace {

LabelVolume random_labels(Rng& rng, const Index3& e, const std::vector<Label>& codes) {
  LabelVolume lv(Grid(e, {1, 1, 1}));
  for (auto& v : lv.data) v = codes[rng.below(codes.size())];
  return lv;
}

const std::vector<Label> kAll{Label::BG, Label::ET, Label::NET, Label::CC, Label::ED};

}  // namespace

TEST(DeriveRegion, Composites) {
  LabelVolume lv(Grid({6, 1, 1}, {1, 1, 1}));
  lv.data = {Label::ET, Label::NET, Label::CC, Label::BG, Label::BG, Label::BG};
  EXPECT_EQ(count_true(derive_region(lv, RegionId::TC)), 3u);
  lv.data[3] = Label::ED;
  EXPECT_EQ(count_true(derive_region(lv, RegionId::WT)), 4u);
  EXPECT_EQ(count_true(derive_region(lv, RegionId::TC)), 3u);

  LabelVolume cc_ed(Grid({2, 1, 1}, {1, 1, 1}));
  cc_ed.data = {Label::CC, Label::ED};
  EXPECT_EQ(count_true(derive_region(cc_ed, RegionId::ST)), 0u);
}

TEST(DeriveRegion, CountsAddUp) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const auto lv = random_labels(rng, testsupport::random_extents(rng, 8), kAll);
    auto n = [&](RegionId r) { return count_true(derive_region(lv, r)); };
    EXPECT_EQ(n(RegionId::TC), n(RegionId::ET) + n(RegionId::NET) + n(RegionId::CC));
    EXPECT_EQ(n(RegionId::WT), n(RegionId::TC) + n(RegionId::ED));
    EXPECT_EQ(n(RegionId::ST), n(RegionId::ET) + n(RegionId::NET));
    EXPECT_EQ(n(RegionId::BG) + n(RegionId::WT), lv.size());
  }
}

TEST(RegionNames, ParseAndPrint) {
  for (auto r : {RegionId::BG, RegionId::ET, RegionId::NET, RegionId::CC, RegionId::ED, RegionId::TC, RegionId::WT,
                 RegionId::ST})
    EXPECT_EQ(parse_region(to_string(r)), r);
  EXPECT_EQ(parse_region("NETC"), RegionId::NET);
  EXPECT_FALSE(parse_region("XX").has_value());
  EXPECT_THROW(label_for(RegionId::TC), Error);
}

TEST(ToChannels, CountsAndOrder) {
  LabelVolume lv(Grid({4, 4, 1}, {1, 1, 1}), Label::BG);
  for (int i = 0; i < 5; ++i) lv.data[i] = Label::ET;
  for (int i = 5; i < 12; ++i) lv.data[i] = Label::NET;
  const auto s = to_channels(lv, {RegionId::ET, RegionId::NET});
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s.names, (std::vector<std::string>{"ET", "NET"}));
  double a = 0, b = 0;
  for (float v : s.channels[0]) a += v;
  for (float v : s.channels[1]) b += v;
  EXPECT_EQ(a, 5.0);
  EXPECT_EQ(b, 7.0);
}

TEST(ToChannels, SolidTumourChannel) {
  Rng rng(2);
  const auto lv = random_labels(rng, {5, 5, 5}, kAll);
  const auto s = to_channels(lv, {RegionId::ST, RegionId::CC, RegionId::ED});
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const bool st = lv.data[i] == Label::ET || lv.data[i] == Label::NET;
    EXPECT_EQ(s.channels[0][i], st ? 1.0f : 0.0f);
    EXPECT_EQ(s.channels[1][i], lv.data[i] == Label::CC ? 1.0f : 0.0f);
  }
}

TEST(ToChannels, AllBackgroundGivesZeros) {
  const LabelVolume lv(Grid({3, 3, 3}, {1, 1, 1}), Label::BG);
  for (const auto& ch : to_channels(lv, {RegionId::ET, RegionId::NET, RegionId::CC, RegionId::ED}).channels)
    for (float v : ch) EXPECT_EQ(v, 0.0f);
}

TEST(Argmax, StrictAndTies) {
  ChannelStack s;
  s.grid = Grid({3, 1, 1}, {1, 1, 1});
  s.names = {"BG", "ET", "NET"};
  s.channels = {{0.1f, 0.5f, 1.0f / 3}, {0.7f, 0.5f, 1.0f / 3}, {0.2f, 0.0f, 1.0f / 3}};
  const auto lv = argmax_labels(s, {Label::BG, Label::ET, Label::NET});
  EXPECT_EQ(lv.data, (std::vector<Label>{Label::ET, Label::BG, Label::BG}));
  EXPECT_THROW(argmax_labels(s, {Label::BG, Label::ET}), Error);
}

TEST(Argmax, UniformIsAllBackground) {
  ChannelStack s;
  s.grid = Grid({4, 4, 4}, {1, 1, 1});
  s.channels.assign(5, std::vector<float>(64, 0.2f));
  for (auto l : argmax_labels(s, kAll).data) EXPECT_EQ(l, Label::BG);
}

TEST(Argmax, ChannelsRoundTripRestrictedLabels) {
  Rng rng(5);
  const std::vector<std::pair<std::vector<RegionId>, std::vector<Label>>> sets{
      {{RegionId::ET, RegionId::NET}, {Label::ET, Label::NET}},
      {{RegionId::CC, RegionId::ED}, {Label::CC, Label::ED}},
      {{RegionId::ET, RegionId::NET, RegionId::CC, RegionId::ED}, {Label::ET, Label::NET, Label::CC, Label::ED}}};
  for (int trial = 0; trial < 30; ++trial) {
    const auto lv = random_labels(rng, testsupport::random_extents(rng, 6), kAll);
    for (const auto& [regions, labels] : sets) {
      // BG channel is one minus the union of the requested channels.
      auto s = to_channels(lv, regions);
      std::vector<float> bg(lv.size(), 1.0f);
      for (const auto& ch : s.channels)
        for (std::size_t i = 0; i < lv.size(); ++i) bg[i] -= ch[i];
      s.channels.insert(s.channels.begin(), bg);
      std::vector<Label> codes{Label::BG};
      codes.insert(codes.end(), labels.begin(), labels.end());
      EXPECT_EQ(argmax_labels(s, codes), restrict_labels(lv, codes));
    }
  }
}

TEST(Merge, Examples) {
  LabelVolume a(Grid({3, 1, 1}, {1, 1, 1})), b(a.grid);
  a.data = {Label::ET, Label::NET, Label::BG};
  b.data = {Label::CC, Label::BG, Label::BG};
  EXPECT_EQ(merge_stage_outputs(a, b).data, (std::vector<Label>{Label::CC, Label::NET, Label::BG}));
}

TEST(Merge, RejectsOutOfSetCodes) {
  LabelVolume a(Grid({1, 1, 1}, {1, 1, 1})), b(a.grid);
  a.data = {Label::CC};
  b.data = {Label::BG};
  try {
    merge_stage_outputs(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::CodeOutOfRange);
  }
  a.data = {Label::ET};
  b.data = {Label::NET};
  EXPECT_THROW(merge_stage_outputs(a, b), Error);
  LabelVolume c(Grid({2, 1, 1}, {1, 1, 1}));
  EXPECT_THROW(merge_stage_outputs(a, c), Error);
}

TEST(Merge, FixedPointAndClosedCodeSet) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto e = testsupport::random_extents(rng, 6);
    const auto a = random_labels(rng, e, {Label::BG, Label::ET, Label::NET});
    const auto b = random_labels(rng, e, {Label::BG, Label::CC, Label::ED});
    const auto m = merge_stage_outputs(a, b);
    // The merged volume, read back as a 2a output, is unchanged by the same 2b.
    EXPECT_EQ(merge_stage_outputs(restrict_labels(m, {Label::BG, Label::ET, Label::NET}), b), m);
    for (std::size_t i = 0; i < m.size(); ++i) {
      EXPECT_TRUE(m.data[i] == a.data[i] || m.data[i] == b.data[i]);
      EXPECT_EQ(m.data[i], b.data[i] != Label::BG ? b.data[i] : a.data[i]);
    }
  }
}

TEST(ChannelStack, SumError) {
  ChannelStack s;
  s.grid = Grid({2, 1, 1}, {1, 1, 1});
  s.channels = {{0.25f, 1.0f}, {0.75f, 0.0f}};
  EXPECT_LT(max_channel_sum_error(s), 1e-7);
  s.channels[0][0] = 0.5f;
  EXPECT_NEAR(max_channel_sum_error(s), 0.25, 1e-7);
}
