#include <gtest/gtest.h>

#include "vajra/model.hpp"
#include "vajra/selftest.hpp"

using namespace vajra;

namespace {

const ModelGraph& nano() {
  static const ModelGraph g = parse_config(preset_config(Scale::N));
  return g;
}

}  // namespace

TEST(Init, DeterministicPerSeed) {
  const WeightStore a = init_weights(nano(), 7);
  EXPECT_TRUE(init_weights(nano(), 7).bit_equal(a));
  EXPECT_FALSE(init_weights(nano(), 8).bit_equal(a));
  EXPECT_TRUE(perturb_bn_stats(a, 3).bit_equal(perturb_bn_stats(a, 3)));
  EXPECT_FALSE(perturb_bn_stats(a, 3).bit_equal(a));
}

TEST(Init, SitesMatchStore) {
  const WeightStore w = init_weights(nano(), 1);
  const auto sites = parameter_sites(nano());
  ASSERT_EQ(sites.size(), w.size());
  auto it = w.begin();
  for (const auto& [name, dims] : sites) {
    EXPECT_EQ(name, it->first);
    EXPECT_EQ(dims, it->second.dims) << name;
    ++it;
  }
  EXPECT_TRUE(w.contains("stem.conv.weight"));
  EXPECT_TRUE(w.contains("stem.conv.bn.var"));
}

TEST(Forward, RuntimeShapesMatchPropagation) {
  const Shape4 in{1, 3, 64, 96};
  const auto r = forward_graph(nano(), init_weights(nano(), 2), Rng(4).tensor(in));
  const auto shapes = propagate_shapes(nano(), in);
  ASSERT_EQ(r.node_outputs.size(), shapes.size());
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    EXPECT_EQ(r.node_outputs[i].shape(), shapes[i]) << nano().nodes[i].id;
  }
  ASSERT_EQ(r.features.size(), 3u);
  EXPECT_EQ(r.features.at("P3").shape(), (Shape4{1, 64, 8, 12}));
  EXPECT_EQ(r.features.at("P4").h() * 2, r.features.at("P3").h());
  EXPECT_EQ(r.features.at("P5").h() * 4, r.features.at("P3").h());
}

TEST(Forward, AlternateScheduleIsBitIdentical) {
  const Model m(nano(), perturb_bn_stats(init_weights(nano(), 3), 3));
  const Tensor4 x = Rng(5).tensor({1, 3, 64, 64});
  const auto order = topological_order(nano().nodes, true);
  const auto a = m.forward(x);
  const auto b = m.forward(x, &order);
  for (const auto& [tag, t] : a.features) EXPECT_TRUE(t.bit_equal(b.features.at(tag))) << tag;
  std::vector<std::size_t> reversed(nano().nodes.size());
  for (std::size_t i = 0; i < reversed.size(); ++i) reversed[i] = reversed.size() - 1 - i;
  EXPECT_THROW(m.forward(x, &reversed), Error);
}

TEST(Forward, ErrorsNameTheNode) {
  WeightStore w = init_weights(nano(), 1);
  WeightStore missing;
  for (const auto& [name, t] : w) {
    if (name != "p3_out.out.weight") missing.put(name, t);
  }
  try {
    Model m(nano(), missing);
    FAIL() << "expected missing weight";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("p3_out.out.weight"), std::string::npos) << e.what();
  }
  try {
    forward_graph(nano(), w, Tensor4(1, 4, 32, 32));
    FAIL() << "expected channel error";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("'stem'"), std::string::npos) << e.what();
  }
}

TEST(Reparam, GraphStaysEquivalent) {
  const WeightStore w = perturb_bn_stats(init_weights(nano(), 9), 9);
  const auto [fg, fw] = reparam_graph(nano(), w);
  EXPECT_LT(fw.size(), w.size());
  for (const auto& [name, t] : fw) EXPECT_EQ(name.find(".bn."), std::string::npos) << name;
  const Tensor4 x = Rng(6).tensor({1, 3, 64, 64});
  const auto a = forward_graph(nano(), w, x);
  const auto b = forward_graph(fg, fw, x);
  for (const auto& [tag, t] : a.features) EXPECT_LE(max_abs_diff(t, b.features.at(tag)), 1e-3f) << tag;

  const auto [fg2, fw2] = reparam_graph(fg, fw);
  EXPECT_TRUE(fw2.bit_equal(fw));
  EXPECT_EQ(write_config(fg2), write_config(fg));
  EXPECT_EQ(parse_config(write_config(fg)).nodes, fg.nodes);
}

TEST(Reparam, PlumbingOnlyGraphIsUnchanged) {
  const ModelGraph g = parse_config(
      "block up type=upsample from=input in=4\n"
      "block cat type=concat from=up,up\n");
  const auto [fg, fw] = reparam_graph(g, WeightStore{});
  EXPECT_EQ(fg.nodes, g.nodes);
  EXPECT_TRUE(fw.empty());
  const Tensor4 x = Rng(7).tensor({1, 4, 3, 3});
  const auto r = forward_graph(fg, fw, x);
  EXPECT_EQ(r.features.at("cat").shape(), (Shape4{1, 8, 6, 6}));
}
