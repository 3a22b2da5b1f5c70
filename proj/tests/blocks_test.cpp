#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "oracle.hpp"
#include "vajra/blocks.hpp"
#include "vajra/selftest.hpp"

using namespace vajra;

namespace {

template <class Block>
std::vector<std::string> unit_names(const Block& b) {
  std::vector<std::string> names;
  b.visit([&](const std::string& n, const auto&) { names.push_back(n); });
  return names;
}

/// conv unit evaluated with the oracle conv and BN.
Tensor4 unit_ref(const ConvUnit& u, const Tensor4& x) {
  const auto& s = u.spec;
  Tensor4 y = oracle::conv(x, {s.c_in, s.c_out, s.k, s.stride, s.padding, s.groups}, u.weight, u.bias);
  if (u.bn) y = oracle::batchnorm(y, u.bn->gamma, u.bn->beta, u.bn->mean, u.bn->var, u.bn->eps);
  for (float& v : y.data()) {
    if (u.act == Activation::SiLU) v = static_cast<float>(oracle::silu(v));
    if (u.act == Activation::Sigmoid) v = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
  }
  return y;
}

}  // namespace

TEST(RepVGG, IdentityBranchNeedsMatchingGeometry) {
  EXPECT_THROW(RepVGG::make(8, 16, 1, true, Activation::SiLU, {}), ShapeError);
  EXPECT_THROW(RepVGG::make(8, 8, 2, true, Activation::SiLU, {}), ShapeError);
  EXPECT_NO_THROW(RepVGG::make(8, 8, 2, false, Activation::SiLU, {}));
}

TEST(RepVGG, ForwardIsSumOfBranches) {
  Rng rng(1);
  RepVGG r = RepVGG::make(4, 4, 1, true, Activation::SiLU, {});
  Randomizer{rng}("r", r);
  const Tensor4 x = rng.tensor({1, 4, 6, 6});
  const auto& b = r.branches();
  Tensor4 sum = add(b.conv3.affine(x), b.conv1.affine(x));
  const auto& id = *b.identity_bn;
  sum = add(sum, oracle::batchnorm(x, id.gamma, id.beta, id.mean, id.var, id.eps));
  for (float& v : sum.data()) v = silu(v);
  EXPECT_LE(max_abs_diff(r.forward(x), sum), 1e-5f);
}

TEST(MerudandaX, StructureAndErrors) {
  BlockHyper hp;
  hp.n = 2;
  const MerudandaX b = MerudandaX::make(8, 16, hp, {});
  const auto names = unit_names(b);
  EXPECT_EQ(names.front(), "stem");
  EXPECT_EQ(names.back(), "out");
  EXPECT_EQ(std::count(names.begin(), names.end(), "csp1.m.1"), 1);
  EXPECT_EQ(b.out.spec.c_in, 32);  // stem (16) + two stage outputs (8 each)
  Rng rng(2);
  EXPECT_EQ(b.forward(rng.tensor({1, 8, 5, 5})).shape(), (Shape4{1, 16, 5, 5}));

  hp.hidden_ratio = 0.5;
  EXPECT_THROW(MerudandaX::make(8, 6, hp, {}), ShapeError);  // stem 3 is odd
  hp.hidden_ratio = 0.3;
  EXPECT_THROW(MerudandaX::make(8, 16, hp, {}), ConfigError);
}

TEST(MerudandaX, CensusIsTwoNPlusTwo) {
  for (int n = 1; n <= 4; ++n) {
    BlockHyper hp;
    hp.n = n;
    EXPECT_EQ(count_conv3x3(MerudandaX::make(8, 8, hp, {})), 2 * n + 2);
    EXPECT_EQ(count_conv3x3(MerudandaX::make(8, 8, hp, UnitOptions{1e-3f, true})), 2 * n + 2);
  }
}

TEST(RepCSP, BranchWidthsMustMatch) {
  EXPECT_THROW(RepCSP::make({8, 4, 6, 8}, 1, false, {}), ShapeError);
}

TEST(MerudandaDW, KernelChoiceAndResidual) {
  EXPECT_THROW(MerudandaDW::make(8, 5, {}), ConfigError);
  const MerudandaDW b = MerudandaDW::make(8, 7, {});
  EXPECT_EQ(b.dw2.spec.k, 7);
  EXPECT_EQ(b.dw2.spec.groups, 16);
  Rng rng(3);
  MerudandaDW r = b;
  r.visit(Randomizer{rng});
  const Tensor4 x = rng.tensor({1, 8, 6, 6});
  EXPECT_TRUE(r.forward(x).bit_equal(add(x, r.chain(x))));
}

TEST(SqueezeExcite, GateMatchesOracle) {
  EXPECT_THROW(SqueezeExcite::make(10, 4), ShapeError);
  Rng rng(4);
  SqueezeExcite se = SqueezeExcite::make(8, 4);
  se.visit(Randomizer{rng});
  const Tensor4 x = rng.tensor({2, 8, 3, 3});
  const Tensor4 g = se.gate(x);
  const Tensor4 ref = unit_ref(se.expand, unit_ref(se.reduce, global_avg_pool(x)));
  EXPECT_LE(max_abs_diff(g, ref), 1e-6f);
  for (float v : g.data()) EXPECT_TRUE(v > 0.0f && v < 1.0f);
}

TEST(SPPF, MatchesOracleComposition) {
  Rng rng(5);
  SPPF s = SPPF::make(8, 6, 5, {});
  s.visit(Randomizer{rng});
  const Tensor4 x = rng.tensor({1, 8, 7, 6});
  const Tensor4 y0 = unit_ref(s.cv1, x);
  const Tensor4 y1 = oracle::maxpool(y0, 5, 1, 2);
  const Tensor4 y2 = oracle::maxpool(y1, 5, 1, 2);
  const Tensor4 y3 = oracle::maxpool(y2, 5, 1, 2);
  const Tensor4 ref = unit_ref(s.cv2, concat_channels({y0, y1, y2, y3}));
  EXPECT_LE(max_abs_diff(s.forward(x), ref), 1e-5f);
  EXPECT_THROW(SPPF::make(7, 6, 5, {}), ShapeError);
  EXPECT_THROW(SPPF::make(8, 6, 4, {}), ConfigError);
}

TEST(ADown, MatchesOracleComposition) {
  Rng rng(6);
  ADown a = ADown::make(8, 12, {});
  a.visit(Randomizer{rng});
  const Tensor4 x = rng.tensor({2, 8, 10, 6});
  const Tensor4 pooled = oracle::avgpool(x, 2, 1, 0);
  const auto halves = split_channels(pooled, 2);
  const Tensor4 ref =
      concat_channels({unit_ref(a.cv1, halves[0]), unit_ref(a.cv2, oracle::maxpool(halves[1], 3, 2, 1))});
  const Tensor4 y = a.forward(x);
  EXPECT_EQ(y.shape(), (Shape4{2, 12, 5, 3}));
  EXPECT_LE(max_abs_diff(y, ref), 1e-5f);
  EXPECT_THROW(a.forward(rng.tensor({1, 8, 5, 6})), ShapeError);
  EXPECT_THROW(ADown::make(7, 12, {}), ShapeError);
}

TEST(AttentionV2, MatchesNaiveMultiHeadAttention) {
  Rng rng(7);
  const int c = 8;
  const int heads = 2;
  const int d = c / heads;
  AttentionV2 a = AttentionV2::make(c, heads, {});
  a.visit(Randomizer{rng});
  const Tensor4 x = rng.tensor({2, c, 3, 4});
  const int sites = 12;
  const Tensor4 qk = unit_ref(a.qk, x);
  const Tensor4 v = unit_ref(a.v, x);
  Tensor4 attended(2, c, 3, 4);
  for (int b = 0; b < 2; ++b) {
    for (int h = 0; h < heads; ++h) {
      auto q_at = [&](int ch, int s) { return qk.data()[qk.offset(b, h * 2 * d + ch, 0, 0) + s]; };
      auto k_at = [&](int ch, int s) { return qk.data()[qk.offset(b, h * 2 * d + d + ch, 0, 0) + s]; };
      for (int i = 0; i < sites; ++i) {
        std::vector<double> logits(sites);
        double mx = -1e300;
        for (int j = 0; j < sites; ++j) {
          double dot = 0.0;
          for (int ch = 0; ch < d; ++ch) dot += static_cast<double>(q_at(ch, i)) * k_at(ch, j);
          logits[j] = dot / std::sqrt(static_cast<double>(d));
          mx = std::max(mx, logits[j]);
        }
        double z = 0.0;
        for (double& l : logits) z += (l = std::exp(l - mx));
        for (int ch = 0; ch < d; ++ch) {
          double acc = 0.0;
          for (int j = 0; j < sites; ++j) acc += logits[j] / z * v.data()[v.offset(b, h * d + ch, 0, 0) + j];
          attended.data()[attended.offset(b, h * d + ch, 0, 0) + i] = static_cast<float>(acc);
        }
      }
    }
  }
  const Tensor4 ref = unit_ref(a.proj, add(attended, unit_ref(a.pe, v)));
  AttentionTrace tr;
  const Tensor4 y = a.forward(x, &tr);
  EXPECT_LE(max_abs_diff(tr.attended, attended), 1e-5f);
  EXPECT_LE(max_abs_diff(y, ref), 1e-5f);
  EXPECT_EQ(tr.attention.shape(), (Shape4{2, heads, sites, sites}));
  EXPECT_THROW(AttentionV2::make(8, 3, {}), ShapeError);
}

TEST(AttentionV2, SingleSiteIsIdentityMixing) {
  Rng rng(8);
  AttentionV2 a = AttentionV2::make(8, 2, {});
  a.visit(Randomizer{rng});
  AttentionTrace tr;
  a.forward(rng.tensor({1, 8, 1, 1}), &tr);
  for (float p : tr.attention.data()) EXPECT_EQ(p, 1.0f);
}

TEST(Blocks, DefaultHeadsDivideChannels) {
  EXPECT_EQ(default_heads(32), 1);
  EXPECT_EQ(default_heads(128), 2);
  EXPECT_EQ(default_heads(192), 3);
  EXPECT_EQ(default_heads(320), 5);
  for (int c = 1; c <= 1024; ++c) EXPECT_EQ(c % default_heads(c), 0);
}

TEST(Blocks, ResidualIdentities) {
  Rng rng(9);
  auto check = [&](auto block, int c) {
    block.visit(Randomizer{rng});
    block.visit(Silencer{});
    const Tensor4 x = rng.tensor({1, c, 5, 4});
    return block.forward(x).bit_equal(x);
  };
  EXPECT_TRUE(check(MerudandaDW::make(8, 3, {}), 8));
  EXPECT_TRUE(check(RepViTBlock::make(8, 7, 4, 2, {}), 8));
  EXPECT_TRUE(check(AttentionBlockV2::make(16, 2, 2, {}), 16));
}

TEST(Bhag, ShapesAndNames) {
  BlockHyper hp;
  hp.n = 2;
  hp.inner = InnerKind::RepViT;
  const MerudandaBhag15 b = MerudandaBhag15::make(16, 16, hp, {});
  EXPECT_EQ(b.out.spec.c_in, 4 * 8);
  const auto names = unit_names(b);
  EXPECT_NE(std::find(names.begin(), names.end(), "m.1.se.expand"), names.end());
  Rng rng(10);
  EXPECT_EQ(b.forward(rng.tensor({1, 16, 4, 4})).shape(), (Shape4{1, 16, 4, 4}));

  const AttentionBhag6 a = AttentionBhag6::make(16, 32, 2, BlockHyper{}, 5, {});
  const auto an = unit_names(a);
  EXPECT_EQ(an.front(), "sppf.cv1");
  EXPECT_NE(std::find(an.begin(), an.end(), "m.1.attn.pe"), an.end());
  EXPECT_EQ(a.forward(rng.tensor({1, 16, 4, 4})).shape(), (Shape4{1, 32, 4, 4}));
  const std::set<std::string> unique(an.begin(), an.end());
  EXPECT_EQ(unique.size(), an.size());
}
