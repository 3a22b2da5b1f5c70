#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "oracle.hpp"
#include "vajra/cost.hpp"
#include "vajra/model.hpp"
#include "vajra/report.hpp"
#include "vajra/selftest.hpp"

using namespace vajra;

TEST(ConvCost, PublishedAndTrivialCases) {
  const ConvCost std3 = conv_cost({64, 128, 3, 2, 1, 1, false}, 32, 32);
  EXPECT_EQ(std3.macs, 18874368u);
  EXPECT_EQ(std3.macs, 9u * 32 * 32 * 64 * 128 / 4);
  const ConvCost unit = conv_cost({1, 1, 1, 1, 0, 1, false}, 1, 1);
  EXPECT_EQ(unit.macs, 1u);
  EXPECT_EQ(unit.params, 1u);
  const ConvCost dw = conv_cost({24, 24, 3, 1, 1, 24, true}, 10, 7);
  EXPECT_EQ(dw.macs, 10u * 7 * 9 * 24);
  EXPECT_EQ(dw.params, 9u * 24 + 24);
  EXPECT_THROW(conv_cost({4, 4, 5, 1, 0, 1, false}, 3, 3), ShapeError);
}

TEST(ConvCost, EqualsLoopNestCounter) {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    ConvSpec s;
    s.groups = rng.range(1, 3);
    s.c_in = s.groups * rng.range(1, 3);
    if (rng.range(0, 3) == 0) s.groups = s.c_in;
    s.c_out = s.groups * rng.range(1, 3);
    s.k = 2 * rng.range(0, 3) + 1;
    s.stride = rng.range(1, 2);
    s.padding = rng.range(0, s.k / 2);
    s.has_bias = rng.coin();
    const int h = rng.range(s.k, 14);
    const int w = rng.range(s.k, 14);
    std::uint64_t counted = 0;
    const Tensor4 wt(s.weight_shape());
    const std::vector<float> bias(s.has_bias ? s.c_out : 0);
    oracle::conv(Tensor4(1, s.c_in, h, w), {s.c_in, s.c_out, s.k, s.stride, s.padding, s.groups}, wt, bias, &counted);
    const ConvCost c = conv_cost(s, h, w);
    EXPECT_EQ(c.macs, counted) << "trial " << trial;
    EXPECT_EQ(c.params, wt.size() + bias.size());
  }
}

TEST(ADownCost, FiveEighteenthsEverywhere) {
  const ADownCost a = adown_cost(64, 128, 32, 32);
  EXPECT_EQ(a.macs, 5242880u);
  EXPECT_EQ(a.standard_macs, 18874368u);
  EXPECT_EQ(a.ratio, (Rational{5, 18}));
  EXPECT_EQ(a.params_ratio, (Rational{5, 18}));
  EXPECT_EQ(a.params, 2u * 64 * 128 + 64u * 128 / 2);  // 2.5 * C * C_out
  for (int c = 32; c <= 256; c += 32)
    for (int co = 32; co <= 256; co += 32)
      for (int hw : {16, 32, 64}) {
        const ADownCost s = adown_cost(c, co, hw, hw);
        EXPECT_EQ(s.ratio, (Rational{5, 18}));
        EXPECT_EQ(s.macs * 8, 5ULL * hw * hw * c * co);
      }
  EXPECT_EQ(adown_cost(2, 6, 4, 10).ratio, (Rational{5, 18}));
  EXPECT_THROW(adown_cost(63, 128, 32, 32), ShapeError);
  EXPECT_THROW(adown_cost(64, 128, 31, 32), ShapeError);
}

TEST(ADownCost, DecimalRenderings) {
  EXPECT_EQ(adown_ratio_line(), "5/18 (27.8% rounded; paper: 27.7%)");
  EXPECT_DOUBLE_EQ(Rational::reduced(18, 5).value(), 3.6);
}

TEST(ADownCost, InstrumentedForwardMatches) {
  Rng rng(32);
  ADown a = ADown::make(64, 128, {});
  a.visit(Randomizer{rng});
  MacProbe probe;
  a.forward(rng.tensor({1, 64, 32, 32}));
  EXPECT_EQ(probe.count(), 5242880u);
}

TEST(AttentionCost, MatmulTerms) {
  const AttentionCost a = attention_cost(64, 8, 8, 1);
  EXPECT_EQ(a.matmul_macs, 524288u);
  EXPECT_EQ(attention_cost(64, 8, 8, 4).matmul_macs, 524288u);
  EXPECT_EQ(attention_cost(32, 1, 1, 2).matmul_macs, 64u);
  EXPECT_EQ(attention_cost(64, 16, 16, 1).matmul_macs, 16u * a.matmul_macs);
  EXPECT_THROW(attention_cost(64, 8, 8, 3), ShapeError);

  Rng rng(33);
  for (int heads : {1, 2, 4}) {
    AttentionV2 m = AttentionV2::make(64, heads, {});
    m.visit(Randomizer{rng});
    MacProbe probe;
    m.forward(rng.tensor({1, 64, 8, 8}));
    EXPECT_EQ(probe.count(), attention_cost(64, 8, 8, heads).macs);
  }
}

TEST(BlockCost, EqualsInstrumentedCounterForEveryKind) {
  for (const auto& [name, text] : block_kind_probes()) {
    for (bool fused : {false, true}) {
      for (Shape4 in : {Shape4{1, 0, 8, 8}, Shape4{2, 0, 6, 10}}) {
        ModelGraph g = parse_config(text);
        for (auto& n : g.nodes) n.fused = fused && has_parameters(n.kind);
        in.c = g.nodes.front().c_in;
        const WeightStore w = init_weights(g, 5);
        const CostReport rep = graph_cost(g, in);
        MacProbe probe;
        forward_graph(g, w, Rng(1).tensor(in));
        EXPECT_EQ(rep.totals.macs, probe.count()) << name << (fused ? " fused " : " ") << in.str();
        EXPECT_EQ(rep.totals.params, count_stored_params(w)) << name << (fused ? " fused" : "");
      }
    }
  }
}

TEST(BlockCost, Census) {
  for (int n = 1; n <= 3; ++n) {
    const ModelGraph g = parse_config("block x type=merudanda_x in=16 out=16 n=" + std::to_string(n) + " from=input\n");
    EXPECT_EQ(graph_cost(g, {1, 16, 8, 8}).totals.conv3x3, static_cast<std::uint64_t>(2 * n + 2));
  }
}

TEST(GraphCost, EmptyGraphAndTotals) {
  const CostReport empty = graph_cost(ModelGraph{}, {1, 3, 8, 8});
  EXPECT_TRUE(empty.nodes.empty());
  EXPECT_EQ(empty.totals, Cost{});

  const ModelGraph g = parse_config(preset_config(Scale::N));
  MacProbe probe;
  const CostReport rep = graph_cost(g, {1, 3, 640, 640});
  EXPECT_EQ(probe.count(), 0u);  // static: nothing executed
  Cost sum;
  for (const auto& n : rep.nodes) sum += n.cost;
  EXPECT_EQ(sum, rep.totals);
  EXPECT_EQ(rep.nodes.size(), g.nodes.size());
}

TEST(GraphCost, FusionRemovesBranchCost) {
  const ModelGraph g = parse_config(preset_config(Scale::N));
  const WeightStore w = init_weights(g, 1);
  const auto [fg, fw] = reparam_graph(g, w);
  const CostReport a = graph_cost(g, {1, 3, 64, 64});
  const CostReport b = graph_cost(fg, {1, 3, 64, 64});
  EXPECT_LT(b.totals.macs, a.totals.macs);
  EXPECT_EQ(a.totals.conv3x3, b.totals.conv3x3);
  EXPECT_EQ(b.totals.params, count_stored_params(fw));
}

TEST(GraphCost, ShapeFailureNamesNode) {
  const ModelGraph g = parse_config("block d type=adown in=8 out=8 from=input\n");
  try {
    graph_cost(g, {1, 8, 5, 6});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("'d'"), std::string::npos) << e.what();
  }
}

TEST(Report, JsonSchema) {
  const ModelGraph g = parse_config(preset_config(Scale::N));
  const CostReport rep = graph_cost(g, {1, 3, 640, 640});
  const auto j = render_json(rep, g.scale);
  for (const char* key : {"input", "scale", "nodes", "totals", "adown_ratio", "reference"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  ASSERT_EQ(j["nodes"].size(), g.nodes.size());
  std::uint64_t macs = 0;
  for (const auto& n : j["nodes"]) {
    for (const char* key : {"id", "kind", "stage", "output", "macs", "flops", "params", "non_mac_ops", "conv3x3"}) {
      EXPECT_TRUE(n.contains(key)) << key;
    }
    EXPECT_TRUE(n["macs"].is_number_unsigned());
    EXPECT_EQ(n["flops"].get<std::uint64_t>(), 2 * n["macs"].get<std::uint64_t>());
    macs += n["macs"].get<std::uint64_t>();
  }
  EXPECT_EQ(j["totals"]["macs"].get<std::uint64_t>(), macs);
  EXPECT_EQ(j["adown_ratio"]["exact"], "5/18");
  EXPECT_DOUBLE_EQ(j["adown_ratio"]["percent_truncated"].get<double>(), 27.7);
  EXPECT_DOUBLE_EQ(j["adown_ratio"]["percent_rounded"].get<double>(), 27.8);
  ASSERT_EQ(j["reference"].size(), 3u);
  EXPECT_DOUBLE_EQ(j["reference"][0]["params_m"].get<double>(), 3.78);
  EXPECT_DOUBLE_EQ(j["reference"][0]["gflops"].get<double>(), 13.7);

  const auto plain = render_json(graph_cost(parse_config("block a type=adown in=64 out=128 from=input\n"), {1, 64, 32, 32}),
                                 std::nullopt);
  EXPECT_FALSE(plain.contains("reference"));
  EXPECT_EQ(plain["totals"]["macs"].get<std::uint64_t>(), 5242880u);
}

TEST(Report, TextTableMatchesGolden) {
  const std::string golden_path = std::string(VAJRA_CONFIG_DIR) + "/../tests/golden/cost_n_640.txt";
  std::ifstream f(golden_path);
  ASSERT_TRUE(f) << golden_path;
  std::stringstream ss;
  ss << f.rdbuf();
  const ModelGraph g = parse_config(preset_config(Scale::N));
  const std::string text = render_text(graph_cost(g, {1, 3, 640, 640}), g.scale);
  EXPECT_EQ(text, ss.str());
  EXPECT_NE(text.find("5/18 (27.8% rounded; paper: 27.7%)"), std::string::npos);
  EXPECT_NE(text.find("params 3.78M"), std::string::npos);
  EXPECT_NE(text.find("FLOPs 13.7B"), std::string::npos);
}
