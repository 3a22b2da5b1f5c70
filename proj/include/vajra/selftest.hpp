#pragma once

// Acceptance suite: one check per criterion, shared by `vajra selftest` and
// the acceptance test binary.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vajra/blocks.hpp"
#include "vajra/cost.hpp"
#include "vajra/graph.hpp"
#include "vajra/model.hpp"
#include "vajra/random.hpp"
#include "vajra/report.hpp"
#include "vajra/reparam.hpp"
#include "vajra/weights.hpp"

namespace vajra {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  bool gating = true;
  std::string detail;
};

struct SelftestOptions {
  std::uint64_t seed = 20240;
  /// Directory holding vajra_{n,s,m,l,x}.cfg; the built-in presets are used when unset.
  std::optional<std::filesystem::path> config_dir;
};

// ---------------------------------------------------------------------------
// Helpers shared by the checks

/// Random conv weights (+-1/sqrt(fan_in)), biases and BN statistics
/// (gamma, var in [0.5, 1.5); beta, mean in [-0.1, 0.1)).
struct Randomizer {
  Rng& rng;

  void bn(BNParams& p) const {
    for (auto& v : p.gamma) v = rng.uniform(0.5f, 1.5f);
    for (auto& v : p.beta) v = rng.uniform(-0.1f, 0.1f);
    for (auto& v : p.mean) v = rng.uniform(-0.1f, 0.1f);
    for (auto& v : p.var) v = rng.uniform(0.5f, 1.5f);
  }
  void operator()(const std::string&, ConvUnit& u) const {
    const float bound = 1.0f / std::sqrt(static_cast<float>(u.weight.size() / u.spec.c_out));
    rng.fill(u.weight, -bound, bound);
    for (auto& b : u.bias) b = rng.uniform(-bound, bound);
    if (u.bn) bn(*u.bn);
  }
  void operator()(const std::string& name, RepVGG& r) const {
    if (r.is_fused()) {
      (*this)(name, std::get<ConvUnit>(r.form));
      return;
    }
    (*this)(name, r.branches().conv3);
    (*this)(name, r.branches().conv1);
    if (r.branches().identity_bn) bn(*r.branches().identity_bn);
  }
};

/// Zeroes conv weights, biases, BN shift and BN mean, so every unit outputs 0
/// whatever its input.
struct Silencer {
  void operator()(const std::string&, ConvUnit& u) const {
    u.zero();
    if (u.bn) {
      for (auto& v : u.bn->beta) v = 0.0f;
      for (auto& v : u.bn->mean) v = 0.0f;
    }
  }
  void operator()(const std::string& name, RepVGG& r) const {
    if (r.is_fused()) {
      (*this)(name, std::get<ConvUnit>(r.form));
      return;
    }
    (*this)(name, r.branches().conv3);
    (*this)(name, r.branches().conv1);
  }
};

/// 3x3 convolution sites of a block instance; a RepVGG unit is one site.
template <class Block>
int count_conv3x3(const Block& b) {
  int n = 0;
  b.visit([&](const std::string&, const auto& unit) {
    using U = std::decay_t<decltype(unit)>;
    if constexpr (std::is_same_v<U, ConvUnit>) {
      n += unit.spec.k == 3 ? 1 : 0;
    } else {
      n += unit.dense_spec().k == 3 ? 1 : 0;
    }
  });
  return n;
}

/// Parameter count by summing stored elements, BN running statistics excluded.
inline std::uint64_t count_stored_params(const WeightStore& w) {
  std::uint64_t n = 0;
  for (const auto& [name, t] : w) {
    auto ends_with = [&](std::string_view s) {
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".mean") || ends_with(".var")) continue;
    n += t.data.size();
  }
  return n;
}

inline std::string preset_file_name(Scale s) {
  std::string name = "vajra_";
  name += static_cast<char>(std::tolower(to_string(s)[0]));
  return name + ".cfg";
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::string load_preset_text(Scale s, const SelftestOptions& opt) {
  if (opt.config_dir) return read_text_file(*opt.config_dir / preset_file_name(s));
  return preset_config(s);
}

inline constexpr Scale kAllScales[] = {Scale::N, Scale::S, Scale::M, Scale::L, Scale::X};

namespace detail {

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Criteria

/// 1. RepVGG fusion over 200 random configs (<= 1e-4) and the scale-N graph
///    end to end (<= 1e-3).
inline CriterionResult check_reparam_equivalence(const SelftestOptions& opt) {
  CriterionResult r{1, "reparameterization equivalence", false, true, {}};
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(opt.seed);
  const int widths[] = {8, 16, 32};
  float worst_block = 0.0f;
  bool finite = true;
  for (int i = 0; i < 200; ++i) {
    const int c = widths[rng.range(0, 2)];
    const int stride = rng.coin() ? 2 : 1;
    const bool identity = stride == 1 && rng.coin();
    RepVGG multi = RepVGG::make(c, c, stride, identity, Activation::SiLU, {});
    Randomizer{rng}("", multi);
    RepVGG fused = multi;
    fused.form = fuse_repvgg(multi).to_unit(Activation::Identity);
    const Tensor4 x = rng.tensor({2, c, 16, 16});
    const float d = max_abs_diff(multi.forward(x), fused.forward(x));
    if (std::isnan(d)) finite = false;
    worst_block = std::max(worst_block, d);
  }

  const ModelGraph g = parse_config(load_preset_text(Scale::N, opt));
  const WeightStore w = perturb_bn_stats(init_weights(g, opt.seed), opt.seed);
  const auto [fg, fw] = reparam_graph(g, w);
  const Tensor4 x = Rng(opt.seed + 1).tensor({1, 3, 128, 128});
  const auto a = forward_graph(g, w, x);
  const auto b = forward_graph(fg, fw, x);
  float worst_graph = 0.0f;
  for (const auto& [tag, t] : a.features) {
    const float d = max_abs_diff(t, b.features.at(tag));
    if (std::isnan(d)) finite = false;
    worst_graph = std::max(worst_graph, d);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.pass = finite && worst_block <= 1e-4f && worst_graph <= 1e-3f && secs < 120.0;
  r.detail = "200 RepVGG configs max diff " + detail::sci(worst_block) + " (tol 1e-4); scale-N graph max diff " +
             detail::sci(worst_graph) + " (tol 1e-3); " + detail::sci(secs) + " s";
  return r;
}

/// 2. ADown MAC ratio is exactly 5/18 across the sweep; decimals; live count.
inline CriterionResult check_adown_arithmetic(const SelftestOptions& opt) {
  CriterionResult r{2, "adown arithmetic", false, true, {}};
  const Rational five_eighteenths{5, 18};
  int cases = 0;
  int bad = 0;
  for (int c = 32; c <= 256; c += 32) {
    for (int co = 32; co <= 256; co += 32) {
      for (int hw : {16, 32, 64}) {
        const ADownCost ac = adown_cost(c, co, hw, hw);
        const std::uint64_t expect = 5ULL * hw * hw * c * co / 8;
        ++cases;
        if (ac.ratio != five_eighteenths || ac.params_ratio != five_eighteenths || ac.macs != expect) ++bad;
      }
    }
  }
  const double pct = five_eighteenths.value() * 100.0;
  const bool truncated_ok = std::floor(pct * 10.0) / 10.0 == 27.7;
  const bool rounded_ok = std::round(five_eighteenths.value() * 100.0) / 100.0 == 0.28;
  const bool speedup_ok = Rational::reduced(18, 5).value() == 3.6;

  Rng rng(opt.seed);
  ADown block = ADown::make(64, 128, {});
  block.visit(Randomizer{rng});
  std::uint64_t live = 0;
  {
    MacProbe probe;
    block.forward(rng.tensor({1, 64, 32, 32}));
    live = probe.count();
  }
  const ADownCost ref = adown_cost(64, 128, 32, 32);
  r.pass = bad == 0 && truncated_ok && rounded_ok && speedup_ok && live == ref.macs && live == 5242880;
  r.detail = std::to_string(cases - bad) + "/" + std::to_string(cases) + " sweep cases at 5/18; " +
             adown_ratio_line() + "; live MACs " + std::to_string(live) + " vs analytic " +
             std::to_string(ref.macs) + " (standard 3x3/s2 " + std::to_string(ref.standard_macs) + ")";
  return r;
}

namespace detail {

/// Analytic vs instrumented MACs and params for a graph at one input shape.
struct GraphAudit {
  std::uint64_t analytic_macs = 0;
  std::uint64_t live_macs = 0;
  std::uint64_t analytic_params = 0;
  std::uint64_t stored_params = 0;
  bool equal() const { return analytic_macs == live_macs && analytic_params == stored_params; }
};

inline GraphAudit audit_graph(const ModelGraph& g, Shape4 input, std::uint64_t seed) {
  GraphAudit a;
  const WeightStore w = init_weights(g, seed);
  const CostReport rep = graph_cost(g, input);
  a.analytic_macs = rep.totals.macs;
  a.analytic_params = rep.totals.params;
  a.stored_params = count_stored_params(w);
  MacProbe probe;
  forward_graph(g, w, Rng(seed).tensor(input));
  a.live_macs = probe.count();
  return a;
}

}  // namespace detail

/// Single-node (plus plumbing) configs covering every block kind.
inline std::vector<std::pair<std::string, std::string>> block_kind_probes() {
  return {
      {"conv_bn_act", "block a type=conv_bn_act in=8 out=16 k=3 s=2 from=input\n"},
      {"conv_bn_act 5x5", "block a type=conv_bn_act in=8 out=12 k=5 s=1 from=input\n"},
      {"merudanda_x", "block a type=merudanda_x in=8 out=16 n=2 identity=1 from=input\n"},
      {"merudanda_x csp", "block a type=merudanda_x in=8 out=16 n=1 hidden=0.5 csp=0.5 from=input\n"},
      {"merudanda_bhag15 dw", "block a type=merudanda_bhag15 in=8 out=16 n=2 dw=7 inner=merudanda_dw from=input\n"},
      {"merudanda_bhag15 repvit", "block a type=merudanda_bhag15 in=8 out=16 n=1 dw=3 inner=repvit from=input\n"},
      {"attention_bhag6", "block a type=attention_bhag6 in=16 out=16 blocks=2 heads=2 from=input\n"},
      {"adown", "block a type=adown in=8 out=16 from=input\n"},
      {"sppf", "block a type=sppf in=8 out=16 from=input\n"},
      {"upsample+concat",
       "block a type=conv_bn_act in=8 out=8 k=1 s=1 from=input\n"
       "block b type=upsample from=a\n"
       "block c type=conv_bn_act in=8 out=8 k=3 s=2 from=b\n"
       "block d type=concat from=c,a\n"},
  };
}

/// 3. Analytic MACs/params equal the instrumented counter and the stored
///    element count exactly.
inline CriterionResult check_cost_oracle(const SelftestOptions& opt) {
  CriterionResult r{3, "cost-oracle equality", false, true, {}};
  Rng rng(opt.seed);
  int conv_ok = 0;
  for (int i = 0; i < 50; ++i) {
    ConvSpec s;
    const int groups = rng.range(1, 3);
    const bool depthwise = rng.range(0, 3) == 0;
    s.c_in = depthwise ? rng.range(1, 8) : groups * rng.range(1, 4);
    s.groups = depthwise ? s.c_in : groups;
    s.c_out = depthwise ? s.c_in * rng.range(1, 2) : groups * rng.range(1, 4);
    s.k = 2 * rng.range(0, 3) + 1;
    s.stride = rng.range(1, 2);
    s.padding = rng.range(0, s.k / 2);
    s.has_bias = rng.coin();
    const int h = rng.range(s.k, 20);
    const int w = rng.range(s.k, 20);
    const int batch = rng.range(1, 2);
    Tensor4 weights = rng.tensor(s.weight_shape());
    std::vector<float> bias(s.has_bias ? s.c_out : 0, 0.5f);
    const ConvCost cc = conv_cost(s, h, w, batch);
    MacProbe probe;
    conv2d(rng.tensor({batch, s.c_in, h, w}), s, weights, bias);
    if (probe.count() == cc.macs && cc.params == weights.size() + bias.size()) ++conv_ok;
  }

  int block_ok = 0;
  int block_total = 0;
  std::string failures;
  for (const auto& [name, text] : block_kind_probes()) {
    for (bool fused : {false, true}) {
      ModelGraph g = parse_config(text);
      for (auto& n : g.nodes) n.fused = fused && has_parameters(n.kind);
      const Shape4 in{2, g.nodes.front().c_in, 8, 8};
      const auto a = detail::audit_graph(g, in, opt.seed);
      ++block_total;
      if (a.equal()) {
        ++block_ok;
      } else {
        failures += " " + name + (fused ? "(fused)" : "");
      }
    }
  }
  const AttentionCost att = attention_cost(64, 8, 8, 1);
  AttentionV2 attn = AttentionV2::make(64, 1, {});
  attn.visit(Randomizer{rng});
  std::uint64_t live_attn = 0;
  {
    MacProbe probe;
    attn.forward(rng.tensor({1, 64, 8, 8}));
    live_attn = probe.count();
  }
  const bool attn_ok = att.matmul_macs == 524288 && live_attn == att.macs;
  r.pass = conv_ok == 50 && block_ok == block_total && attn_ok;
  r.detail = std::to_string(conv_ok) + "/50 conv specs, " + std::to_string(block_ok) + "/" +
             std::to_string(block_total) + " block probes" + (failures.empty() ? "" : " (failed:" + failures + ")") +
             ", attention c=64 8x8 matmul MACs " + std::to_string(att.matmul_macs) + ", live " +
             std::to_string(live_attn) + " vs analytic " + std::to_string(att.macs);
  return r;
}

/// 4. merudanda_x carries 2n + 2 3x3 convolutions.
inline CriterionResult check_census(const SelftestOptions&) {
  CriterionResult r{4, "receptive-field census", false, true, {}};
  r.pass = true;
  for (int n = 1; n <= 3; ++n) {
    BlockHyper hp;
    hp.n = n;
    const MerudandaX b = MerudandaX::make(16, 16, hp, {});
    const int walked = count_conv3x3(b);
    BlockNode node;
    node.id = "x";
    node.kind = BlockKind::MerudandaX;
    node.inputs = {std::string(kGraphInput)};
    node.c_in = node.c_out = 16;
    node.hyper = hp;
    const auto analytic = block_cost(node, {{1, 16, 8, 8}}).conv3x3;
    r.pass = r.pass && walked == 2 * n + 2 && analytic == static_cast<std::uint64_t>(walked);
    r.detail += (n > 1 ? ", " : "") + std::string("n=") + std::to_string(n) + ": " + std::to_string(walked);
  }
  return r;
}

/// 5. Attention rows are distributions, shape is preserved, and uniform
///    logits average V over the sites of each head.
inline CriterionResult check_attention(const SelftestOptions& opt) {
  CriterionResult r{5, "attention properties", false, true, {}};
  Rng rng(opt.seed);
  const int widths[] = {8, 16, 32, 64};
  double worst_row = 0.0;
  double worst_mean = 0.0;
  bool shapes_ok = true;
  for (int i = 0; i < 100; ++i) {
    const int c = widths[rng.range(0, 3)];
    int heads = 1 << rng.range(0, 3);
    while (c % heads) heads /= 2;
    AttentionV2 a = AttentionV2::make(c, heads, {});
    a.visit(Randomizer{rng});
    const Tensor4 x = rng.tensor({rng.range(1, 2), c, rng.range(1, 8), rng.range(1, 8)});
    AttentionTrace tr;
    const Tensor4 y = a.forward(x, &tr);
    shapes_ok = shapes_ok && y.shape() == x.shape();
    const int cols = tr.attention.w();
    auto att = tr.attention.data();
    for (std::size_t row = 0; row < att.size(); row += cols) {
      double s = 0.0;
      for (int j = 0; j < cols; ++j) s += att[row + j];
      worst_row = std::max(worst_row, std::abs(s - 1.0));
    }

    AttentionV2 flat = a;
    Silencer{}("qk", flat.qk);
    AttentionTrace ut;
    flat.forward(x, &ut);
    const int sites = x.h() * x.w();
    for (int b = 0; b < x.n(); ++b) {
      for (int ch = 0; ch < c; ++ch) {
        const int hd = ch / (c / heads);
        const int row = ch % (c / heads);
        double mean = 0.0;
        for (int j = 0; j < sites; ++j) mean += ut.values.at(b, hd, row, j);
        mean /= sites;
        for (float v : ut.attended.plane(b, ch)) worst_mean = std::max(worst_mean, std::abs(v - mean));
      }
    }
  }
  r.pass = shapes_ok && worst_row <= 1e-6 && worst_mean <= 1e-6;
  r.detail = "100 instances; worst |row sum - 1| " + detail::sci(worst_row) +
             ", worst uniform-logit deviation from mean(V) " + detail::sci(worst_mean) + " (tol 1e-6)" +
             (shapes_ok ? "" : "; output shape mismatch");
  return r;
}

/// 6. Residual blocks with their non-residual path silenced are exact identities.
inline CriterionResult check_residual_identities(const SelftestOptions& opt) {
  CriterionResult r{6, "residual identities", false, true, {}};
  Rng rng(opt.seed);
  auto identity_of = [&](auto block, int c) {
    block.visit(Randomizer{rng});
    block.visit(Silencer{});
    const Tensor4 x = rng.tensor({2, c, 9, 7});
    return block.forward(x).bit_equal(x);
  };
  const bool dw3 = identity_of(MerudandaDW::make(16, 3, {}), 16);
  const bool dw7 = identity_of(MerudandaDW::make(16, 7, {}), 16);
  const bool repvit = identity_of(RepViTBlock::make(16, 3, 4, 2, {}), 16);
  const bool attn = identity_of(AttentionBlockV2::make(32, 2, 2, {}), 32);
  r.pass = dw3 && dw7 && repvit && attn;
  auto mark = [](bool ok) { return ok ? std::string("bit-exact") : std::string("DIFFERS"); };
  r.detail = "merudanda_dw k3 " + mark(dw3) + ", k7 " + mark(dw7) + "; repvit_block " + mark(repvit) +
             "; attention_block_v2 " + mark(attn);
  return r;
}

/// 7. The shipped presets satisfy every scale placement rule.
inline CriterionResult check_presets(const SelftestOptions& opt) {
  CriterionResult r{7, "scale placement rules", false, true, {}};
  r.pass = true;
  for (Scale s : kAllScales) {
    std::string status = "ok";
    try {
      const ModelGraph g = parse_config(load_preset_text(s, opt));
      const RuleCheck rc = check_scale_rules(g, ScaleConfig::for_scale(s));
      if (!g.scale || *g.scale != s) status = "wrong scale header";
      if (!rc.errors.empty()) status = rc.errors.front();
    } catch (const std::exception& e) {
      status = e.what();
    }
    if (status != "ok") r.pass = false;
    r.detail += (r.detail.empty() ? "" : ", ") + std::string(to_string(s)) + " " + status;
  }
  return r;
}

/// 8. Weight files roundtrip bit-exactly, forward is byte-reproducible and
///    reparameterization is idempotent.
inline CriterionResult check_persistence(const SelftestOptions& opt) {
  CriterionResult r{8, "persistence and determinism", false, true, {}};
  const ModelGraph g = parse_config(load_preset_text(Scale::N, opt));
  const WeightStore w = perturb_bn_stats(init_weights(g, opt.seed), opt.seed);
  const std::string bytes = serialize_weights(w);
  const bool roundtrip = deserialize_weights(bytes).bit_equal(w) && serialize_weights(deserialize_weights(bytes)) == bytes;
  const bool init_repeat = init_weights(g, opt.seed).bit_equal(init_weights(g, opt.seed));

  const Tensor4 x = Rng(opt.seed + 2).tensor({1, 3, 64, 64});
  auto encode = [](const Model::Result& res) {
    WeightStore out;
    for (const auto& [tag, t] : res.features) out.put(tag, StoredTensor::from(t));
    return serialize_weights(out);
  };
  const std::string run1 = encode(forward_graph(g, w, x));
  const std::string run2 = encode(forward_graph(g, w, x));
  const auto late = topological_order(g.nodes, true);
  const std::string run3 = encode(Model(g, w).forward(x, &late));
  const bool forward_repeat = run1 == run2;
  const bool order_free = run1 == run3;

  const auto [g1, w1] = reparam_graph(g, w);
  const auto [g2, w2] = reparam_graph(g1, w1);
  const bool idempotent = g1.nodes == g2.nodes && w1.bit_equal(w2);
  r.pass = roundtrip && init_repeat && forward_repeat && order_free && idempotent;
  auto yn = [](bool ok) { return ok ? std::string("yes") : std::string("NO"); };
  r.detail = "weight roundtrip bit-identical " + yn(roundtrip) + " (" + std::to_string(bytes.size()) +
             " bytes); init repeatable " + yn(init_repeat) + "; forward byte-identical " + yn(forward_repeat) +
             "; alternate topological order identical " + yn(order_free) + "; reparam idempotent " + yn(idempotent);
  return r;
}

/// 9. Computed totals beside the published references. Never gating.
inline CriterionResult report_reference_delta(const SelftestOptions& opt) {
  CriterionResult r{9, "reporting delta (non-gating)", false, true, {}};
  r.gating = false;
  r.pass = true;
  for (Scale s : kAllScales) {
    const ModelGraph g = parse_config(load_preset_text(s, opt));
    const CostReport rep = graph_cost(g, {1, 3, 640, 640});
    const ReferenceTarget t = reference_targets(s).front();
    const double pm = static_cast<double>(rep.totals.params) / 1e6;
    const double gf = 2.0 * static_cast<double>(rep.totals.macs) / 1e9;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s%s %.2fM/%.1fB vs %.2fM/%.1fB (%+.1f%%/%+.1f%%)", r.detail.empty() ? "" : "; ",
                  std::string(to_string(s)).c_str(), pm, gf, t.params_m, t.gflops, signed_delta_pct(pm, t.params_m),
                  signed_delta_pct(gf, t.gflops));
    r.detail += buf;
  }
  return r;
}

using CriterionFn = std::function<CriterionResult(const SelftestOptions&)>;

inline std::vector<CriterionFn> acceptance_criteria() {
  return {check_reparam_equivalence, check_adown_arithmetic, check_cost_oracle,
          check_census,              check_attention,        check_residual_identities,
          check_presets,             check_persistence,      report_reference_delta};
}

/// Runs every criterion, printing one line each. A criterion that throws
/// counts as a failure. Returns true iff every gating criterion passed.
inline bool run_acceptance(const SelftestOptions& opt, std::FILE* out) {
  bool ok = true;
  int index = 0;
  for (const auto& fn : acceptance_criteria()) {
    ++index;
    CriterionResult res;
    try {
      res = fn(opt);
    } catch (const std::exception& e) {
      res = {index, "criterion", false, true, std::string("threw: ") + e.what()};
    }
    if (res.gating && !res.pass) ok = false;
    std::fprintf(out, "%s %d %s: %s\n", res.pass ? (res.gating ? "PASS" : "INFO") : "FAIL", res.id,
                 res.name.c_str(), res.detail.c_str());
  }
  std::fflush(out);
  return ok;
}

}  // namespace vajra
