#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "oracle.hpp"
#include "vajra/model.hpp"
#include "vajra/reparam.hpp"
#include "vajra/selftest.hpp"

using namespace vajra;

namespace {

BNParams random_bn(Rng& rng, int c, float eps = 1e-3f) {
  BNParams bn = BNParams::identity(c, eps);
  Randomizer{rng}.bn(bn);
  return bn;
}

template <class Block>
WeightStore snapshot(const Block& b) {
  WeightStore w;
  b.visit(detail::Exporter{w});
  return w;
}

}  // namespace

TEST(FuseConvBN, MatchesConvThenBN) {
  Rng rng(21);
  for (int trial = 0; trial < 40; ++trial) {
    ConvSpec s;
    s.groups = rng.range(1, 2);
    s.c_in = s.groups * rng.range(1, 4);
    s.c_out = s.groups * rng.range(1, 4);
    s.k = 2 * rng.range(0, 2) + 1;
    s.stride = rng.range(1, 2);
    s.padding = s.k / 2;
    s.has_bias = rng.coin();
    const Tensor4 w = rng.tensor(s.weight_shape());
    std::vector<float> bias;
    if (s.has_bias) {
      for (int i = 0; i < s.c_out; ++i) bias.push_back(rng.uniform(-1, 1));
    }
    const BNParams bn = random_bn(rng, s.c_out);
    const Tensor4 x = rng.tensor({2, s.c_in, 7, 6});
    const Tensor4 ref = oracle::batchnorm(oracle::conv(x, {s.c_in, s.c_out, s.k, s.stride, s.padding, s.groups}, w, bias),
                                          bn.gamma, bn.beta, bn.mean, bn.var, bn.eps);
    const FusedConv f = fuse_conv_bn(s, w, bias, bn);
    EXPECT_TRUE(f.spec.has_bias);
    EXPECT_LE(max_abs_diff(f.forward(x), ref), 1e-5f) << "trial " << trial;
  }
}

TEST(FuseConvBN, RejectsNonPositiveDenominator) {
  const ConvSpec s{1, 1, 1, 1, 0, 1, false};
  BNParams bn = BNParams::identity(1, 0.0f);
  bn.var[0] = 0.0f;
  EXPECT_THROW(fuse_conv_bn(s, Tensor4(1, 1, 1, 1), {}, bn), ShapeError);
}

TEST(Kernels, EmbedAndIdentity) {
  Tensor4 k1(2, 3, 1, 1);
  k1.at(1, 2, 0, 0) = 5.0f;
  const Tensor4 k3 = embed_kernel(k1, 3);
  EXPECT_EQ(k3.shape(), (Shape4{2, 3, 3, 3}));
  EXPECT_EQ(k3.at(1, 2, 1, 1), 5.0f);
  float total = 0.0f;
  for (float v : k3.data()) total += v;
  EXPECT_EQ(total, 5.0f);
  EXPECT_THROW(embed_kernel(Tensor4(1, 1, 2, 2), 3), ShapeError);

  Rng rng(22);
  const Tensor4 x = rng.tensor({1, 4, 5, 5});
  const Tensor4 y = conv2d(x, {4, 4, 3, 1, 1, 1, false}, identity_kernel(4, 3));
  EXPECT_TRUE(y.bit_equal(x));
}

TEST(FuseRepVGG, EquivalentAcrossConfigs) {
  Rng rng(23);
  for (int trial = 0; trial < 60; ++trial) {
    const int c = 4 * rng.range(1, 4);
    const int stride = rng.range(1, 2);
    const bool identity = stride == 1 && rng.coin();
    RepVGG r = RepVGG::make(c, c, stride, identity, Activation::SiLU, {});
    Randomizer{rng}("r", r);
    RepVGG f = r;
    f.form = fuse_repvgg(r).to_unit(Activation::Identity);
    ASSERT_TRUE(f.is_fused());
    EXPECT_FALSE(f.fused().bn.has_value());
    const Tensor4 x = rng.tensor({2, c, 9, 8});
    EXPECT_LE(max_abs_diff(r.forward(x), f.forward(x)), 1e-4f) << "trial " << trial;
  }
}

TEST(Reparameterize, EveryBlockKindIsEquivalentAndIdempotent) {
  Rng rng(24);
  BlockHyper hp;
  hp.n = 2;
  hp.identity_branch = true;
  BlockHyper rv = hp;
  rv.inner = InnerKind::RepViT;
  rv.dw_kernel = 7;

  auto check = [&](auto block, Shape4 in, const char* what) {
    block.visit(Randomizer{rng});
    auto fused = block;
    reparameterize(fused);
    const Tensor4 x = rng.tensor(in);
    EXPECT_LE(max_abs_diff(block.forward(x), fused.forward(x)), 1e-4f) << what;
    fused.visit([&](const std::string& name, const auto& unit) {
      using U = std::decay_t<decltype(unit)>;
      if constexpr (std::is_same_v<U, ConvUnit>) {
        EXPECT_FALSE(unit.bn.has_value()) << what << " " << name;
      } else {
        EXPECT_TRUE(unit.is_fused()) << what << " " << name;
      }
    });
    auto twice = fused;
    reparameterize(twice);
    EXPECT_TRUE(snapshot(twice).bit_equal(snapshot(fused))) << what;
  };
  check(MerudandaX::make(8, 16, hp, {}), {1, 8, 6, 6}, "merudanda_x");
  check(MerudandaBhag15::make(8, 16, hp, {}), {1, 8, 6, 6}, "bhag15 dw");
  check(MerudandaBhag15::make(8, 16, rv, {}), {1, 8, 6, 6}, "bhag15 repvit");
  check(AttentionBhag6::make(16, 16, 2, BlockHyper{}, 5, {}), {1, 16, 4, 4}, "attention_bhag6");
  check(ADown::make(8, 16, {}), {1, 8, 6, 6}, "adown");
  check(SPPF::make(8, 16, 5, {}), {1, 8, 6, 6}, "sppf");
}

TEST(VerifyEquivalence, GateBehaviour) {
  Rng rng(25);
  RepVGG r = RepVGG::make(8, 8, 1, true, Activation::SiLU, {});
  Randomizer{rng}("r", r);
  RepVGG f = r;
  f.form = fuse_repvgg(r).to_unit(Activation::Identity);
  const TensorFn multi = [&](const Tensor4& x) { return r.forward(x); };
  const TensorFn fused = [&](const Tensor4& x) { return f.forward(x); };

  const auto ok = verify_equivalence(multi, fused, 4, {2, 8, 16, 16}, 1e-4f, 1);
  EXPECT_TRUE(ok.pass);
  EXPECT_EQ(ok.trials.size(), 4u);
  EXPECT_GT(ok.max_abs, 0.0f);  // rounding exists

  EXPECT_FALSE(verify_equivalence(multi, fused, 4, {2, 8, 16, 16}, 0.0f, 1).pass);
  EXPECT_TRUE(verify_equivalence(multi, multi, 2, {2, 8, 16, 16}, 0.0f, 1).pass);

  const TensorFn nan_out = [](const Tensor4& x) {
    Tensor4 y = x;
    y.data()[0] = std::numeric_limits<float>::quiet_NaN();
    return y;
  };
  const TensorFn same = [](const Tensor4& x) { return x; };
  EXPECT_FALSE(verify_equivalence(same, nan_out, 1, {1, 1, 2, 2}, 1.0f).pass);
  const TensorFn shrink = [](const Tensor4& x) { return x.reshaped({1, 1, 1, 4}); };
  EXPECT_THROW(verify_equivalence(same, shrink, 1, {1, 1, 2, 2}, 1.0f), ShapeError);
}
