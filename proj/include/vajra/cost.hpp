#pragma once

// Static MAC / parameter accounting. Nothing here runs a forward pass; every
// count is derived from node hyperparameters and the input geometry.
//
// Conventions:
//   macs         multiply-accumulates of convolutions and attention matmuls,
//                counting every tap of the logical window (padding included)
//   params       conv weights, conv biases, BN gamma/beta (BN mean/var are
//                buffers and not counted)
//   non_mac_ops  one per pooling-window tap and one per element for each
//                BN, activation, residual add, scaling or softmax application
//   conv3x3      3x3 convolution sites; a RepVGG unit counts once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "vajra/blocks.hpp"
#include "vajra/error.hpp"
#include "vajra/graph.hpp"
#include "vajra/ops.hpp"

namespace vajra {

struct Rational {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  static Rational reduced(std::uint64_t n, std::uint64_t d) {
    if (d == 0) throw Error("rational with zero denominator");
    const std::uint64_t g = std::gcd(n, d);
    return g == 0 ? Rational{0, 1} : Rational{n / g, d / g};
  }
  double value() const noexcept { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
  friend bool operator==(const Rational&, const Rational&) = default;
};

struct Cost {
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
  std::uint64_t non_mac_ops = 0;
  std::uint64_t conv3x3 = 0;

  Cost& operator+=(const Cost& o) noexcept {
    macs += o.macs;
    params += o.params;
    non_mac_ops += o.non_mac_ops;
    conv3x3 += o.conv3x3;
    return *this;
  }
  friend bool operator==(const Cost&, const Cost&) = default;
};

struct ConvCost {
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
};

/// Bare convolution: macs = Ho*Wo*k^2*(c_in/groups)*c_out per batch item,
/// params = k^2*(c_in/groups)*c_out (+ c_out with bias).
inline ConvCost conv_cost(const ConvSpec& spec, int h_in, int w_in, int batch = 1) {
  const Shape4 out = conv_output_shape(Shape4{batch, spec.c_in, h_in, w_in}, spec);
  const std::uint64_t per_site = static_cast<std::uint64_t>(spec.k) * spec.k * (spec.c_in / spec.groups);
  ConvCost c;
  c.params = per_site * spec.c_out + (spec.has_bias ? spec.c_out : 0);
  c.macs = static_cast<std::uint64_t>(out.numel()) * per_site;
  return c;
}

struct ADownCost {
  std::uint64_t macs = 0;           ///< conv MACs only
  std::uint64_t params = 0;         ///< conv weight elements only
  std::uint64_t pool_ops = 0;       ///< window taps of both pools
  std::uint64_t standard_macs = 0;  ///< plain 3x3/s2 conv C -> C_out
  std::uint64_t standard_params = 0;
  Rational ratio;         ///< macs / standard_macs
  Rational params_ratio;  ///< params / standard_params
};

inline ADownCost adown_cost(int c_in, int c_out, int h, int w) {
  if (c_in <= 0 || c_out <= 0 || h <= 0 || w <= 0 || c_in % 2 || c_out % 2 || h % 2 || w % 2) {
    throw ShapeError("adown_cost: channels and spatial dims must be positive and even (" +
                     std::to_string(c_in) + " -> " + std::to_string(c_out) + ", " +
                     std::to_string(h) + "x" + std::to_string(w) + ")");
  }
  const int ci = c_in / 2;
  const int co = c_out / 2;
  const ConvCost a = conv_cost({ci, co, 3, 2, 1, 1, false}, h - 1, w - 1);
  const ConvCost b = conv_cost({ci, co, 1, 1, 0, 1, false}, h / 2, w / 2);
  const ConvCost std3 = conv_cost({c_in, c_out, 3, 2, 1, 1, false}, h, w);
  ADownCost r;
  r.macs = a.macs + b.macs;
  r.params = a.params + b.params;
  r.pool_ops = static_cast<std::uint64_t>(c_in) * (h - 1) * (w - 1) * 4 +
               static_cast<std::uint64_t>(ci) * (h / 2) * (w / 2) * 9;
  r.standard_macs = std3.macs;
  r.standard_params = std3.params;
  r.ratio = Rational::reduced(r.macs, r.standard_macs);
  r.params_ratio = Rational::reduced(r.params, r.standard_params);
  return r;
}

namespace detail {

/// Accumulates unit costs while tracking the running spatial size.
struct CostWalker {
  bool fused = false;
  std::uint64_t batch = 1;
  Cost total;

  std::uint64_t elems(int c, int h, int w) const { return batch * c * h * w; }

  /// Conv + BN (or bias when fused) + activation. Returns output extent.
  std::pair<int, int> unit(int c_in, int c_out, int k, int stride, int groups, int h, int w,
                           bool act = true, bool biased_plain = false) {
    ConvSpec s{c_in, c_out, k, stride, same_padding(k), groups, fused || biased_plain};
    const ConvCost c = conv_cost(s, h, w, static_cast<int>(batch));
    const Shape4 o = conv_output_shape(Shape4{1, c_in, h, w}, s);
    total.macs += c.macs;
    total.params += c.params;
    if (!fused && !biased_plain) {
      total.params += 2ULL * c_out;
      total.non_mac_ops += elems(c_out, o.h, o.w);
    }
    if (act) total.non_mac_ops += elems(c_out, o.h, o.w);
    if (k == 3) total.conv3x3 += 1;
    return {o.h, o.w};
  }

  void repvgg(int c, bool identity, int h, int w) {
    if (fused) {
      unit(c, c, 3, 1, 1, h, w);
      return;
    }
    const std::uint64_t before = total.conv3x3;
    unit(c, c, 3, 1, 1, h, w, false);
    unit(c, c, 1, 1, 1, h, w, false);
    std::uint64_t joins = 1;  // branch sum
    if (identity) {
      total.params += 2ULL * c;
      joins += 2;  // identity BN + its add
    }
    total.non_mac_ops += (joins + 1) * elems(c, h, w);  // + activation
    total.conv3x3 = before + 1;
  }

  void add(int c, int h, int w) { total.non_mac_ops += elems(c, h, w); }

  void pool(int c, int h_out, int w_out, int k) {
    total.non_mac_ops += elems(c, h_out, w_out) * k * k;
  }

  void rep_csp(int c_in, int csp, int c_out, int n, bool identity, int h, int w) {
    unit(c_in, csp, 1, 1, 1, h, w);
    unit(c_in, csp, 1, 1, 1, h, w);
    for (int i = 0; i < n; ++i) repvgg(csp, identity, h, w);
    add(csp, h, w);
    unit(csp, c_out, 1, 1, 1, h, w);
  }

  void merudanda_dw_chain(int c, int k, int h, int w) {
    unit(c, c, 3, 1, c, h, w);
    unit(c, 2 * c, 1, 1, 1, h, w);
    unit(2 * c, 2 * c, k, 1, 2 * c, h, w);
    unit(2 * c, c, 1, 1, 1, h, w);
    unit(c, c, 3, 1, c, h, w);
  }

  void squeeze_excite(int c, int ratio, int h, int w) {
    total.non_mac_ops += elems(c, h, w);  // global average
    unit(c, c / ratio, 1, 1, 1, 1, 1, true, true);
    unit(c / ratio, c, 1, 1, 1, 1, 1, true, true);
    total.non_mac_ops += elems(c, h, w);  // channel scaling
  }

  void repvit(int c, const BlockHyper& hp, int h, int w) {
    merudanda_dw_chain(c, hp.dw_kernel, h, w);
    squeeze_excite(c, hp.se_ratio, h, w);
    add(c, h, w);
    unit(c, c * hp.mlp_ratio, 1, 1, 1, h, w);
    unit(c * hp.mlp_ratio, c, 1, 1, 1, h, w, false);
    add(c, h, w);
  }

  void sppf(int c_in, int c_out, int k, int h, int w) {
    const int hidden = c_in / 2;
    unit(c_in, hidden, 1, 1, 1, h, w);
    for (int i = 0; i < 3; ++i) pool(hidden, h, w, k);
    unit(4 * hidden, c_out, 1, 1, 1, h, w);
  }

  void attention(int c, int heads, int h, int w) {
    const std::uint64_t n = static_cast<std::uint64_t>(h) * w;
    unit(c, 2 * c, 1, 1, 1, h, w, false);
    unit(c, c, 1, 1, 1, h, w, false);
    total.macs += batch * 2 * n * n * static_cast<std::uint64_t>(c);
    total.non_mac_ops += 2 * batch * heads * n * n;  // scaling + softmax
    unit(c, c, 3, 1, c, h, w, false);
    add(c, h, w);
    unit(c, c, 1, 1, 1, h, w, false);
  }

  void attention_block(int c, int heads, int mlp_ratio, int h, int w) {
    attention(c, heads, h, w);
    add(c, h, w);
    unit(c, c * mlp_ratio, 1, 1, 1, h, w);
    unit(c * mlp_ratio, c, 1, 1, 1, h, w, false);
    add(c, h, w);
  }
};

}  // namespace detail

struct AttentionCost {
  std::uint64_t macs = 0;
  std::uint64_t matmul_macs = 0;
  std::uint64_t params = 0;
};

/// One AttentionV2 module: three 1x1 convs, depthwise 3x3 positional
/// encoding, and the two score/value matmuls (2 * N^2 * C MACs in total).
inline AttentionCost attention_cost(int c, int h, int w, int heads, bool fused = false) {
  if (heads < 1 || c % heads != 0) {
    throw ShapeError("attention_cost: " + std::to_string(heads) + " heads do not divide " +
                     std::to_string(c) + " channels");
  }
  detail::CostWalker cw;
  cw.fused = fused;
  cw.attention(c, heads, h, w);
  const std::uint64_t n = static_cast<std::uint64_t>(h) * w;
  return {cw.total.macs, 2 * n * n * static_cast<std::uint64_t>(c), cw.total.params};
}

/// Cost of one graph node given its input shapes.
inline Cost block_cost(const BlockNode& node, const std::vector<Shape4>& in_shapes) {
  const Shape4 out = node_output_shape(node, in_shapes);
  if (!has_parameters(node.kind)) {
    return {};
  }
  const Shape4 x = in_shapes.front();
  const NodeWidths nw = node_widths(node);
  detail::CostWalker cw;
  cw.fused = node.fused;
  cw.batch = static_cast<std::uint64_t>(x.n);
  const BlockHyper& hp = node.hyper;
  const int h = x.h;
  const int w = x.w;
  switch (node.kind) {
    case BlockKind::ConvBnAct:
      cw.unit(node.c_in, node.c_out, node.k, node.stride, 1, h, w);
      break;
    case BlockKind::MerudandaX: {
      const int half = nw.hidden / 2;
      cw.unit(node.c_in, nw.hidden, 1, 1, 1, h, w);
      for (int s = 0; s < 2; ++s) {
        cw.rep_csp(half, nw.csp, half, hp.n, hp.identity_branch, h, w);
        cw.unit(half, half, 3, 1, 1, h, w);
      }
      cw.unit(nw.hidden + 2 * half, node.c_out, 1, 1, 1, h, w);
      break;
    }
    case BlockKind::MerudandaBhag15: {
      const int c = nw.hidden;
      cw.unit(node.c_in, 2 * c, 1, 1, 1, h, w);
      for (int i = 0; i < hp.n; ++i) {
        if (hp.inner == InnerKind::RepViT) {
          cw.repvit(c, hp, h, w);
        } else {
          cw.merudanda_dw_chain(c, hp.dw_kernel, h, w);
          cw.add(c, h, w);
        }
      }
      cw.unit((2 + hp.n) * c, node.c_out, 1, 1, 1, h, w);
      break;
    }
    case BlockKind::AttentionBhag6: {
      const int c = nw.hidden;
      cw.sppf(node.c_in, node.c_in, node.k, h, w);
      cw.unit(node.c_in, 2 * c, 1, 1, 1, h, w);
      for (int i = 0; i < node.attn_blocks; ++i) cw.attention_block(c, nw.heads, hp.mlp_ratio, h, w);
      cw.unit(2 * c, node.c_out, 1, 1, 1, h, w);
      break;
    }
    case BlockKind::ADown: {
      const int ci = node.c_in / 2;
      const int co = node.c_out / 2;
      cw.pool(node.c_in, h - 1, w - 1, 2);
      cw.unit(ci, co, 3, 2, 1, h - 1, w - 1);
      cw.pool(ci, out.h, out.w, 3);
      cw.unit(ci, co, 1, 1, 1, out.h, out.w);
      break;
    }
    case BlockKind::SPPF:
      cw.sppf(node.c_in, node.c_out, node.k, h, w);
      break;
    case BlockKind::Upsample:
    case BlockKind::Concat:
      break;
  }
  return cw.total;
}

struct NodeCost {
  std::string id;
  BlockKind kind = BlockKind::ConvBnAct;
  std::string stage;
  Shape4 out;
  Cost cost;
};

struct CostReport {
  Shape4 input;
  std::vector<NodeCost> nodes;
  Cost totals;
};

/// Per-node costs in graph order; totals are the sum of node entries.
inline CostReport graph_cost(const ModelGraph& g, Shape4 input) {
  CostReport r;
  r.input = input;
  const std::vector<Shape4> shapes = propagate_shapes(g, input);
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const BlockNode& n = g.nodes[i];
    std::vector<Shape4> in;
    for (const auto& src : n.inputs) in.push_back(src == kGraphInput ? input : shapes[g.index_of(src)]);
    NodeCost nc{n.id, n.kind, n.stage, shapes[i], {}};
    try {
      nc.cost = block_cost(n, in);
    } catch (const ShapeError& e) {
      throw ShapeError("node '" + n.id + "': " + e.what());
    }
    r.totals += nc.cost;
    r.nodes.push_back(std::move(nc));
  }
  return r;
}

}  // namespace vajra
