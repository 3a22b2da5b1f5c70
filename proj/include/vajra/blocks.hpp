#pragma once

// Forward implementations of the VajraV1 computational blocks.
//
// Every block is an aggregate of ConvUnit / RepVGG leaves built with zero
// weights by its `make` factory. `visit(f)` reports each leaf as
// f(name, unit) in a fixed order; names are dot-separated paths such as
// "csp1.m.0" that become weight-store keys once prefixed with a node id.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "vajra/error.hpp"
#include "vajra/ops.hpp"
#include "vajra/units.hpp"

namespace vajra {

enum class InnerKind { MerudandaDW, RepViT };

inline std::string_view to_string(InnerKind k) noexcept {
  return k == InnerKind::RepViT ? "repvit" : "merudanda_dw";
}

/// Scale-dependent block hyperparameters.
struct BlockHyper {
  int n = 1;                            ///< inner-block repeat count
  std::optional<double> hidden_ratio;   ///< hidden width / output width; block default if unset
  double csp_ratio = 1.0;               ///< RepCSP hidden width / stage width
  int dw_kernel = 3;                    ///< 3 or 7
  InnerKind inner = InnerKind::MerudandaDW;
  int attn_heads = 0;                   ///< 0 selects hidden/64 (at least 1)
  bool identity_branch = false;         ///< RepVGG identity+BN third branch
  int se_ratio = 4;
  int mlp_ratio = 2;

  friend bool operator==(const BlockHyper&, const BlockHyper&) = default;
};

/// Integer channel count `base * ratio`; throws when the product is fractional.
inline int scaled_width(int base, double ratio, std::string_view what) {
  const double w = base * ratio;
  const double r = std::round(w);
  if (std::abs(w - r) > 1e-9 || r < 1) {
    throw ConfigError(std::string(what) + ": width " + std::to_string(base) + " * " +
                      std::to_string(ratio) + " is not a positive integer");
  }
  return static_cast<int>(r);
}

/// Head count used when none is configured: one head per 64 channels,
/// reduced until it divides the channel count.
inline int default_heads(int channels) noexcept {
  int h = std::max(1, channels / 64);
  while (channels % h != 0) --h;
  return h;
}

// ---------------------------------------------------------------------------

/// 1x1 -> RepVGG x n on one branch, 1x1 on the other, joined by addition
/// before the output 1x1.
struct RepCSP {
  ConvUnit cv1;
  ConvUnit cv2;
  std::vector<RepVGG> m;
  ConvUnit cv3;

  struct Widths {
    int c_in = 0;
    int branch1 = 0;  ///< width emitted by cv1 (and carried through the RepVGG stack)
    int branch2 = 0;  ///< width emitted by cv2
    int c_out = 0;
  };

  static RepCSP make(const Widths& w, int n, bool identity_branch, const UnitOptions& opt) {
    if (w.branch1 != w.branch2) {
      throw ShapeError("RepCSP branch widths differ (" + std::to_string(w.branch1) + " vs " +
                       std::to_string(w.branch2) + "); the additive join needs equal channels");
    }
    if (n < 1) throw ConfigError("RepCSP repeat count must be >= 1");
    RepCSP r;
    r.cv1 = ConvUnit::make(w.c_in, w.branch1, 1, 1, 1, Activation::SiLU, opt);
    r.cv2 = ConvUnit::make(w.c_in, w.branch2, 1, 1, 1, Activation::SiLU, opt);
    for (int i = 0; i < n; ++i) {
      r.m.push_back(RepVGG::make(w.branch1, w.branch1, 1, identity_branch, Activation::SiLU, opt));
    }
    r.cv3 = ConvUnit::make(w.branch1, w.c_out, 1, 1, 1, Activation::SiLU, opt);
    return r;
  }

  Tensor4 forward(const Tensor4& x) const {
    Tensor4 a = cv1.forward(x);
    for (const auto& rep : m) a = rep.forward(a);
    return cv3.forward(add(a, cv2.forward(x)));
  }

  template <class F> void visit(F&& f) { walk(*this, f); }
  template <class F> void visit(F&& f) const { walk(*this, f); }

 private:
  template <class Self, class F>
  static void walk(Self& self, F& f) {
    f("cv1", self.cv1);
    f("cv2", self.cv2);
    for (std::size_t i = 0; i < self.m.size(); ++i) f("m." + std::to_string(i), self.m[i]);
    f("cv3", self.cv3);
  }
};

/// GELAN-style primary block: stem 1x1, split in two, two chained stages of
/// (RepCSP, 3x3 conv), concat of all four partitions, output 1x1.
struct MerudandaX {
  ConvUnit stem;
  RepCSP csp1;
  ConvUnit conv1;
  RepCSP csp2;
  ConvUnit conv2;
  ConvUnit out;

  static MerudandaX make(int c_in, int c_out, const BlockHyper& hp, const UnitOptions& opt) {
    const int stem_c = scaled_width(c_out, hp.hidden_ratio.value_or(1.0), "merudanda_x stem");
    if (stem_c % 2 != 0) {
      throw ShapeError("merudanda_x: odd stem width " + std::to_string(stem_c) +
                       " cannot be split evenly");
    }
    const int half = stem_c / 2;
    const int csp_c = scaled_width(half, hp.csp_ratio, "merudanda_x RepCSP");
    MerudandaX b;
    b.stem = ConvUnit::make(c_in, stem_c, 1, 1, 1, Activation::SiLU, opt);
    const RepCSP::Widths w{half, csp_c, csp_c, half};
    b.csp1 = RepCSP::make(w, hp.n, hp.identity_branch, opt);
    b.conv1 = ConvUnit::make(half, half, 3, 1, 1, Activation::SiLU, opt);
    b.csp2 = RepCSP::make(w, hp.n, hp.identity_branch, opt);
    b.conv2 = ConvUnit::make(half, half, 3, 1, 1, Activation::SiLU, opt);
    b.out = ConvUnit::make(stem_c + 2 * half, c_out, 1, 1, 1, Activation::SiLU, opt);
    return b;
  }

  Tensor4 forward(const Tensor4& x) const {
    auto parts = split_channels(stem.forward(x), 2);
    Tensor4 s1 = conv1.forward(csp1.forward(parts[1]));
    Tensor4 s2 = conv2.forward(csp2.forward(s1));
    return out.forward(concat_channels({parts[0], parts[1], s1, s2}));
  }

  template <class F> void visit(F&& f) { walk(*this, f); }
  template <class F> void visit(F&& f) const { walk(*this, f); }

 private:
  template <class Self, class F>
  static void walk(Self& self, F& f) {
    f("stem", self.stem);
    self.csp1.visit(prefixed(f, "csp1"));
    f("conv1", self.conv1);
    self.csp2.visit(prefixed(f, "csp2"));
    f("conv2", self.conv2);
    f("out", self.out);
  }
};

/// Compact inverted block: DW3 -> PW(c->2c) -> DW(k) -> PW(2c->c) -> DW3,
/// with a residual around the chain when `residual` is set.
struct MerudandaDW {
  ConvUnit dw1;
  ConvUnit pw1;
  ConvUnit dw2;
  ConvUnit pw2;
  ConvUnit dw3;
  bool residual = true;

  static MerudandaDW make(int c, int dw_kernel, const UnitOptions& opt, bool residual = true) {
    if (dw_kernel != 3 && dw_kernel != 7) {
      throw ConfigError("merudanda_dw: depthwise kernel must be 3 or 7, got " +
                        std::to_string(dw_kernel));
    }
    MerudandaDW b;
    b.dw1 = ConvUnit::make(c, c, 3, 1, c, Activation::SiLU, opt);
    b.pw1 = ConvUnit::make(c, 2 * c, 1, 1, 1, Activation::SiLU, opt);
    b.dw2 = ConvUnit::make(2 * c, 2 * c, dw_kernel, 1, 2 * c, Activation::SiLU, opt);
    b.pw2 = ConvUnit::make(2 * c, c, 1, 1, 1, Activation::SiLU, opt);
    b.dw3 = ConvUnit::make(c, c, 3, 1, c, Activation::SiLU, opt);
    b.residual = residual;
    return b;
  }

  Tensor4 chain(const Tensor4& x) const {
    return dw3.forward(pw2.forward(dw2.forward(pw1.forward(dw1.forward(x)))));
  }

  Tensor4 forward(const Tensor4& x) const { return residual ? add(x, chain(x)) : chain(x); }

  template <class F> void visit(F&& f) { walk(*this, f); }
  template <class F> void visit(F&& f) const { walk(*this, f); }

 private:
  template <class Self, class F>
  static void walk(Self& self, F& f) {
    f("dw1", self.dw1);
    f("pw1", self.pw1);
    f("dw2", self.dw2);
    f("pw2", self.pw2);
    f("dw3", self.dw3);
  }
};

/// Squeeze-excitation: x * sigmoid(W2 act(W1 GAP(x))), per channel.
struct SqueezeExcite {
  ConvUnit reduce;
  ConvUnit expand;

  static SqueezeExcite make(int c, int reduce_ratio) {
    if (reduce_ratio < 1 || c % reduce_ratio != 0) {
      throw ShapeError("squeeze-excite: ratio " + std::to_string(reduce_ratio) +
                       " does not divide " + std::to_string(c) + " channels");
    }
    SqueezeExcite s;
    s.reduce = ConvUnit::make_biased(c, c / reduce_ratio, 1, Activation::SiLU);
    s.expand = ConvUnit::make_biased(c / reduce_ratio, c, 1, Activation::Sigmoid);
    return s;
  }

  /// Per-channel scale factors, n x c x 1 x 1.
  Tensor4 gate(const Tensor4& x) const { return expand.forward(reduce.forward(global_avg_pool(x))); }

  Tensor4 forward(const Tensor4& x) const { return scale_channels(x, gate(x)); }

  template <class F> void visit(F&& f) { walk(*this, f); }
  template <class F> void visit(F&& f) const { walk(*this, f); }

 private:
  template <class Self, class F>
  static void walk(Self& self, F& f) {
    f("reduce", self.reduce);
    f("expand", self.expand);
  }
};

/// MerudandaDW chain + SE as token mixer, pointwise MLP as channel mixer,
/// each wrapped in a residual.
struct RepViTBlock {
  MerudandaDW mixer;
  SqueezeExcite se;
  ConvUnit mlp1;
  ConvUnit mlp2;

  static RepViTBlock make(int c, int dw_kernel, int se_ratio, int mlp_ratio,
                          const UnitOptions& opt) {
    RepViTBlock b;
    b.mixer = MerudandaDW::make(c, dw_kernel, opt, /*residual=*/false);
    b.se = SqueezeExcite::make(c, se_ratio);
    b.mlp1 = ConvUnit::make(c, c * mlp_ratio, 1, 1, 1, Activation::SiLU, opt);
    b.mlp2 = ConvUnit::make(c * mlp_ratio, c, 1, 1, 1, Activation::Identity, opt);
    return b;
  }

  Tensor4 token_mixer(const Tensor4& x) const { return se.forward(mixer.chain(x)); }

  Tensor4 forward(const Tensor4& x) const {
    Tensor4 x1 = add(x, token_mixer(x));
    return add(x1, mlp2.forward(mlp1.forward(x1)));
  }

  template <class F> void visit(F&& f) { walk(*this, f); }
  template <class F> void visit(F&& f) const { walk(*this, f); }

 private:
  template <class Self, class F>
  static void walk(Self& self, F& f) {
    self.mixer.visit(prefixed(f, "mixer"));
    self.se.visit(prefixed(f, "se"));
    f("mlp1", self.mlp1);
    f("mlp2", self.mlp2);
  }
};

/// C2f-style parameter-efficient block: stem 1x1, split in two, n inner
/// blocks chained on the second half with every intermediate appended,
/// concat of n + 2 partitions, output 1x1.
struct MerudandaBhag15 {
  using Inner = std::variant<MerudandaDW, RepViTBlock>;

  ConvUnit stem;
  std::vector<Inner> inner;
  ConvUnit out;

  static MerudandaBhag15 make(int c_in, int c_out, const BlockHyper& hp, const UnitOptions& opt) {
    if (hp.n < 1) throw ConfigError("merudanda_bhag15: n must be >= 1");
    const int hidden = scaled_width(c_out, hp.hidden_ratio.value_or(0.5), "merudanda_bhag15");
    MerudandaBhag15 b;
    b.stem = ConvUnit::make(c_in, 2 * hidden, 1, 1, 1, Activation::SiLU, opt);
    for (int i = 0; i < hp.n; ++i) {
      if (hp.inner == InnerKind::RepViT) {
        b.inner.emplace_back(RepViTBlock::make(hidden, hp.dw_kernel, hp.se_ratio, hp.mlp_ratio, opt));
      } else {
        b.inner.emplace_back(MerudandaDW::make(hidden, hp.dw_kernel, opt));
      }
    }
    b.out = ConvUnit::make((2 + hp.n) * hidden, c_out, 1, 1, 1, Activation::SiLU, opt);
    return b;
  }

  Tensor4 forward(const Tensor4& x) const {
    std::vector<Tensor4> parts = split_channels(stem.forward(x), 2);
    for (const auto& blk : inner) {
      const Tensor4& last = parts.back();
      parts.push_back(std::visit([&](const auto& b) { return b.forward(last); }, blk));
    }
    return out.forward(concat_channels(parts));
  }

  template <class F> void visit(F&& f) { walk(*this, f); }
  template <class F> void visit(F&& f) const { walk(*this, f); }

 private:
  template <class Self, class F>
  static void walk(Self& self, F& f) {
    f("stem", self.stem);
    for (std::size_t i = 0; i < self.inner.size(); ++i) {
      std::visit([&](auto& b) { b.visit(prefixed(f, "m." + std::to_string(i))); }, self.inner[i]);
    }
    f("out", self.out);
  }
};

/// 1x1 reduce, three chained stride-1 max pools, concat of four maps, 1x1 project.
struct SPPF {
  ConvUnit cv1;
  ConvUnit cv2;
  int k = 5;

  static SPPF make(int c_in, int c_out, int k, const UnitOptions& opt) {
    if (k < 1 || k % 2 == 0) throw ConfigError("sppf: pool kernel must be odd, got " + std::to_string(k));
    if (c_in % 2 != 0) throw ShapeError("sppf: input channels must be even");
    const int hidden = c_in / 2;
    SPPF s;
    s.cv1 = ConvUnit::make(c_in, hidden, 1, 1, 1, Activation::SiLU, opt);
    s.cv2 = ConvUnit::make(4 * hidden, c_out, 1, 1, 1, Activation::SiLU, opt);
    s.k = k;
    return s;
  }

  Tensor4 forward(const Tensor4& x) const {
    Tensor4 y0 = cv1.forward(x);
    Tensor4 y1 = pool2d(y0, PoolKind::Max, k, 1, k / 2);
    Tensor4 y2 = pool2d(y1, PoolKind::Max, k, 1, k / 2);
    Tensor4 y3 = pool2d(y2, PoolKind::Max, k, 1, k / 2);
    return cv2.forward(concat_channels({y0, y1, y2, y3}));
  }

  template <class F> void visit(F&& f) { walk(*this, f); }
  template <class F> void visit(F&& f) const { walk(*this, f); }

 private:
  template <class Self, class F>
  static void walk(Self& self, F& f) {
    f("cv1", self.cv1);
    f("cv2", self.cv2);
  }
};

/// Intermediate values of one AttentionV2 call, captured on request.
struct AttentionTrace {
  Tensor4 attention;  ///< (batch, heads, N, N), rows are softmax distributions
  Tensor4 values;     ///< (batch, heads, d_head, N)
  Tensor4 attended;   ///< attention @ V reshaped to (batch, C, H, W)
};

/// Multi-head self-attention over the H*W sites of a feature map.
///
/// qk: 1x1 C->2C, reshaped (B, heads, 2*d, N) and split into Q and K;
/// v: 1x1 C->C; pe: depthwise 3x3 on V added before proj: 1x1 C->C.
struct AttentionV2 {
  ConvUnit qk;
  ConvUnit v;
  ConvUnit pe;
  ConvUnit proj;
  int heads = 1;

  static AttentionV2 make(int c, int heads, const UnitOptions& opt) {
    if (heads < 1 || c % heads != 0) {
      throw ShapeError("attention: " + std::to_string(heads) + " heads do not divide " +
                       std::to_string(c) + " channels");
    }
    AttentionV2 a;
    a.qk = ConvUnit::make(c, 2 * c, 1, 1, 1, Activation::Identity, opt);
    a.v = ConvUnit::make(c, c, 1, 1, 1, Activation::Identity, opt);
    a.pe = ConvUnit::make(c, c, 3, 1, c, Activation::Identity, opt);
    a.proj = ConvUnit::make(c, c, 1, 1, 1, Activation::Identity, opt);
    a.heads = heads;
    return a;
  }

  int channels() const noexcept { return v.spec.c_out; }

  Tensor4 forward(const Tensor4& x, AttentionTrace* trace = nullptr) const {
    const int B = x.n();
    const int C = channels();
    const int N = x.h() * x.w();
    const int d = C / heads;

    auto qk_parts = split_channels(qk.forward(x).reshaped({B * heads, 2 * d, 1, N}), 2);
    Tensor4 q = std::move(qk_parts[0]).reshaped({B, heads, d, N});
    Tensor4 k = std::move(qk_parts[1]).reshaped({B, heads, d, N});
    Tensor4 v_img = v.forward(x);
    Tensor4 vh = v_img.reshaped({B, heads, d, N});

    Tensor4 scores = scale(matmul_batched(transpose_last2(q), k),
                           1.0f / std::sqrt(static_cast<float>(d)));
    Tensor4 attn = softmax_lastdim(std::move(scores));
    Tensor4 attended = matmul_batched(vh, transpose_last2(attn)).reshaped({B, C, x.h(), x.w()});

    Tensor4 y = proj.forward(add(attended, pe.forward(v_img)));
    if (trace) {
      trace->attention = std::move(attn);
      trace->values = std::move(vh);
      trace->attended = std::move(attended);
    }
    return y;
  }

  template <class F> void visit(F&& f) { walk(*this, f); }
  template <class F> void visit(F&& f) const { walk(*this, f); }

 private:
  template <class Self, class F>
  static void walk(Self& self, F& f) {
    f("qk", self.qk);
    f("v", self.v);
    f("pe", self.pe);
    f("proj", self.proj);
  }
};

/// Transformer block: x1 = x + attn(x); out = x1 + FFN(x1).
struct AttentionBlockV2 {
  AttentionV2 attn;
  ConvUnit ffn1;
  ConvUnit ffn2;

  static AttentionBlockV2 make(int c, int heads, int mlp_ratio, const UnitOptions& opt) {
    AttentionBlockV2 b;
    b.attn = AttentionV2::make(c, heads, opt);
    b.ffn1 = ConvUnit::make(c, c * mlp_ratio, 1, 1, 1, Activation::SiLU, opt);
    b.ffn2 = ConvUnit::make(c * mlp_ratio, c, 1, 1, 1, Activation::Identity, opt);
    return b;
  }

  Tensor4 forward(const Tensor4& x) const {
    Tensor4 x1 = add(x, attn.forward(x));
    return add(x1, ffn2.forward(ffn1.forward(x1)));
  }

  template <class F> void visit(F&& f) { walk(*this, f); }
  template <class F> void visit(F&& f) const { walk(*this, f); }

 private:
  template <class Self, class F>
  static void walk(Self& self, F& f) {
    self.attn.visit(prefixed(f, "attn"));
    f("ffn1", self.ffn1);
    f("ffn2", self.ffn2);
  }
};

/// SPPF, 1x1, split; the second half runs through N transformer blocks while
/// the first bypasses them; concat and project.
struct AttentionBhag6 {
  SPPF sppf;
  ConvUnit cv1;
  std::vector<AttentionBlockV2> blocks;
  ConvUnit cv2;

  static AttentionBhag6 make(int c_in, int c_out, int n_blocks, const BlockHyper& hp, int sppf_k,
                             const UnitOptions& opt) {
    if (n_blocks < 0) throw ConfigError("attention_bhag6: block count must be >= 0");
    const int hidden = scaled_width(c_out, hp.hidden_ratio.value_or(0.5), "attention_bhag6");
    const int heads = hp.attn_heads > 0 ? hp.attn_heads : default_heads(hidden);
    AttentionBhag6 b;
    b.sppf = SPPF::make(c_in, c_in, sppf_k, opt);
    b.cv1 = ConvUnit::make(c_in, 2 * hidden, 1, 1, 1, Activation::SiLU, opt);
    for (int i = 0; i < n_blocks; ++i) {
      b.blocks.push_back(AttentionBlockV2::make(hidden, heads, hp.mlp_ratio, opt));
    }
    b.cv2 = ConvUnit::make(2 * hidden, c_out, 1, 1, 1, Activation::SiLU, opt);
    return b;
  }

  Tensor4 forward(const Tensor4& x) const {
    auto parts = split_channels(cv1.forward(sppf.forward(x)), 2);
    Tensor4 y = parts[1];
    for (const auto& blk : blocks) y = blk.forward(y);
    return cv2.forward(concat_channels({parts[0], y}));
  }

  template <class F> void visit(F&& f) { walk(*this, f); }
  template <class F> void visit(F&& f) const { walk(*this, f); }

 private:
  template <class Self, class F>
  static void walk(Self& self, F& f) {
    self.sppf.visit(prefixed(f, "sppf"));
    f("cv1", self.cv1);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      self.blocks[i].visit(prefixed(f, "m." + std::to_string(i)));
    }
    f("cv2", self.cv2);
  }
};

/// Downsampling: 2x2/s1 average pool, channel split, 3x3/s2 conv on one half,
/// 3x3/s2 max pool + 1x1 conv on the other, concat.
struct ADown {
  ConvUnit cv1;
  ConvUnit cv2;

  static ADown make(int c_in, int c_out, const UnitOptions& opt) {
    if (c_in % 2 != 0 || c_out % 2 != 0) {
      throw ShapeError("adown: odd channels (" + std::to_string(c_in) + " -> " +
                       std::to_string(c_out) + ")");
    }
    ADown a;
    a.cv1 = ConvUnit::make(c_in / 2, c_out / 2, 3, 2, 1, Activation::SiLU, opt);
    a.cv2 = ConvUnit::make(c_in / 2, c_out / 2, 1, 1, 1, Activation::SiLU, opt);
    return a;
  }

  Tensor4 forward(const Tensor4& x) const {
    if (x.h() % 2 != 0 || x.w() % 2 != 0) {
      throw ShapeError("adown: spatial dims must be even, got " + x.shape().str());
    }
    auto parts = split_channels(pool2d(x, PoolKind::Avg, 2, 1, 0), 2);
    Tensor4 a = cv1.forward(parts[0]);
    Tensor4 b = cv2.forward(pool2d(parts[1], PoolKind::Max, 3, 2, 1));
    return concat_channels({a, b});
  }

  template <class F> void visit(F&& f) { walk(*this, f); }
  template <class F> void visit(F&& f) const { walk(*this, f); }

 private:
  template <class Self, class F>
  static void walk(Self& self, F& f) {
    f("cv1", self.cv1);
    f("cv2", self.cv2);
  }
};

}  // namespace vajra
