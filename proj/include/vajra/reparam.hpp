#pragma once

// Structural reparameterization: BatchNorm folding and RepVGG branch fusion,
// plus a numerical equivalence checker for the rewritten modules.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "vajra/blocks.hpp"
#include "vajra/ops.hpp"
#include "vajra/random.hpp"
#include "vajra/units.hpp"

namespace vajra {

/// A biased convolution produced by folding. spec.has_bias is always set.
struct FusedConv {
  ConvSpec spec;
  Tensor4 weight;
  std::vector<float> bias;

  Tensor4 forward(const Tensor4& x) const { return conv2d(x, spec, weight, bias); }

  ConvUnit to_unit(Activation act) const { return ConvUnit{spec, weight, bias, std::nullopt, act}; }
};

/// Folds inference BatchNorm into the preceding convolution:
/// W' = W * g / sqrt(var + eps), b' = (b - mean) * g / sqrt(var + eps) + beta.
inline FusedConv fuse_conv_bn(const ConvSpec& spec, const Tensor4& weights,
                              std::span<const float> bias, const BNParams& bn) {
  spec.validate();
  if (weights.shape() != spec.weight_shape()) {
    throw ShapeError("fuse_conv_bn: weights " + weights.shape().str() + " do not match spec");
  }
  bn.validate(spec.c_out);
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(spec.c_out)) {
    throw ShapeError("fuse_conv_bn: bias length mismatch");
  }
  FusedConv f;
  f.spec = spec;
  f.spec.has_bias = true;
  f.weight = weights;
  f.bias.resize(spec.c_out);
  const std::size_t per_out = weights.size() / spec.c_out;
  auto w = f.weight.data();
  for (int o = 0; o < spec.c_out; ++o) {
    const double denom = static_cast<double>(bn.var[o]) + bn.eps;
    if (!(denom > 0.0)) {
      throw ShapeError("fuse_conv_bn: var + eps must be positive (channel " + std::to_string(o) + ")");
    }
    const double s = bn.gamma[o] / std::sqrt(denom);
    for (std::size_t i = 0; i < per_out; ++i) {
      auto& v = w[o * per_out + i];
      v = static_cast<float>(v * s);
    }
    const double b = bias.empty() ? 0.0 : bias[o];
    f.bias[o] = static_cast<float>((b - bn.mean[o]) * s + bn.beta[o]);
  }
  return f;
}

/// Zero-pads a k x k kernel to the centre of a K x K kernel.
inline Tensor4 embed_kernel(const Tensor4& weights, int target) {
  const int k = weights.h();
  if (weights.w() != k) throw ShapeError("embed_kernel: kernel must be square");
  if (k % 2 == 0 || target % 2 == 0) throw ShapeError("embed_kernel: kernel sizes must be odd");
  if (k > target) throw ShapeError("embed_kernel: source kernel larger than target");
  Tensor4 out(weights.n(), weights.c(), target, target);
  const int off = (target - k) / 2;
  for (int o = 0; o < weights.n(); ++o) {
    for (int i = 0; i < weights.c(); ++i) {
      for (int y = 0; y < k; ++y) {
        for (int x = 0; x < k; ++x) out.at(o, i, y + off, x + off) = weights.at(o, i, y, x);
      }
    }
  }
  return out;
}

/// Kernel of a (dense) convolution that reproduces its input: a centre-tap
/// delta on the diagonal.
inline Tensor4 identity_kernel(int channels, int k) {
  if (k % 2 == 0) throw ShapeError("identity_kernel: kernel size must be odd");
  Tensor4 out(channels, channels, k, k);
  for (int c = 0; c < channels; ++c) out.at(c, c, k / 2, k / 2) = 1.0f;
  return out;
}

/// BN-folded form of a single unit, ignoring its activation.
inline FusedConv fold_unit(const ConvUnit& u) {
  if (u.bn) return fuse_conv_bn(u.spec, u.weight, u.bias, *u.bn);
  FusedConv f{u.spec, u.weight, u.bias};
  if (!f.spec.has_bias) {
    f.spec.has_bias = true;
    f.bias.assign(u.spec.c_out, 0.0f);
  }
  return f;
}

/// Collapses a RepVGG block into one biased 3x3 convolution.
inline FusedConv fuse_repvgg(const RepVGG& r) {
  if (r.is_fused()) return fold_unit(r.fused());
  const auto& b = r.branches();
  const ConvSpec& s3 = b.conv3.spec;
  const ConvSpec& s1 = b.conv1.spec;
  if (s3.c_in != s1.c_in || s3.c_out != s1.c_out || s3.stride != s1.stride ||
      s3.groups != s1.groups) {
    throw ShapeError("fuse_repvgg: branch specs are not compatible");
  }
  if (s3.padding - s1.padding != (s3.k - s1.k) / 2) {
    throw ShapeError("fuse_repvgg: branch paddings do not align the kernel centres");
  }
  FusedConv dense = fold_unit(b.conv3);
  const FusedConv point = fold_unit(b.conv1);
  const Tensor4 point_k = embed_kernel(point.weight, s3.k);
  auto w = dense.weight.data();
  auto pw = point_k.data();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += pw[i];
  for (int o = 0; o < s3.c_out; ++o) dense.bias[o] += point.bias[o];

  if (b.identity_bn) {
    if (s3.c_in != s3.c_out || s3.stride != 1 || s3.groups != 1) {
      throw ShapeError("fuse_repvgg: identity branch needs c_in == c_out, stride 1, groups 1");
    }
    ConvSpec id_spec{s3.c_in, s3.c_out, s3.k, 1, s3.padding, 1, false};
    const FusedConv id = fuse_conv_bn(id_spec, identity_kernel(s3.c_out, s3.k), {}, *b.identity_bn);
    auto iw = id.weight.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += iw[i];
    for (int o = 0; o < s3.c_out; ++o) dense.bias[o] += id.bias[o];
  }
  return dense;
}

/// Rewrites every unit of a block in deploy form: BN folded, RepVGG branches
/// fused. Units already in deploy form are left bit-identical.
template <class Block>
void reparameterize(Block& block) {
  block.visit([](const std::string&, auto& unit) {
    using U = std::decay_t<decltype(unit)>;
    if constexpr (std::is_same_v<U, ConvUnit>) {
      if (unit.bn) unit = fold_unit(unit).to_unit(unit.act);
    } else {
      if (!unit.is_fused()) unit.form = fuse_repvgg(unit).to_unit(Activation::Identity);
    }
  });
}

inline void reparameterize(ConvUnit& unit) {
  if (unit.bn) unit = fold_unit(unit).to_unit(unit.act);
}

// ---------------------------------------------------------------------------

struct EquivalenceTrial {
  float max_abs = 0.0f;
  float max_rel = 0.0f;
};

struct EquivalenceReport {
  std::vector<EquivalenceTrial> trials;
  float max_abs = 0.0f;
  float max_rel = 0.0f;
  float tol = 0.0f;
  bool pass = false;
};

using TensorFn = std::function<Tensor4(const Tensor4&)>;

/// Runs f and g on `trials` random inputs of `shape` (uniform in [-1, 1)) and
/// compares outputs. Passes iff the largest absolute difference is <= tol.
inline EquivalenceReport verify_equivalence(const TensorFn& f, const TensorFn& g, int trials,
                                            Shape4 shape, float tol, std::uint64_t seed = 0) {
  EquivalenceReport rep;
  rep.tol = tol;
  Rng rng(seed);
  bool finite = true;
  for (int t = 0; t < trials; ++t) {
    const Tensor4 x = rng.tensor(shape);
    const Tensor4 a = f(x);
    const Tensor4 b = g(x);
    if (a.shape() != b.shape()) {
      throw ShapeError("verify_equivalence: output shapes differ (" + a.shape().str() + " vs " +
                       b.shape().str() + ")");
    }
    EquivalenceTrial tr;
    tr.max_abs = max_abs_diff(a, b);
    float scale_ref = 0.0f;
    for (float v : a.data()) scale_ref = std::max(scale_ref, std::abs(v));
    tr.max_rel = scale_ref > 0.0f ? tr.max_abs / scale_ref : tr.max_abs;
    if (std::isnan(tr.max_abs)) finite = false;
    rep.max_abs = std::max(rep.max_abs, tr.max_abs);
    rep.max_rel = std::max(rep.max_rel, tr.max_rel);
    rep.trials.push_back(tr);
  }
  rep.pass = finite && rep.max_abs <= tol;
  return rep;
}

}  // namespace vajra
