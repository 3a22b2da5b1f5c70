#pragma once

// Parameter-bearing leaf units shared by every block: a convolution with
// optional inference BatchNorm and activation, and the two/three-branch
// RepVGG block. Blocks expose their units through `visit`, which is how
// weights are initialized, serialized, counted and fused.

#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "vajra/ops.hpp"

namespace vajra {

/// How a unit is materialized: training topology (conv + BN) or deployed
/// (BN folded into a biased conv).
struct UnitOptions {
  float bn_eps = 1e-3f;
  bool fused = false;
};

/// conv -> BatchNorm -> activation. `bias` is populated iff spec.has_bias.
struct ConvUnit {
  ConvSpec spec;
  Tensor4 weight;
  std::vector<float> bias;
  std::optional<BNParams> bn;
  Activation act = Activation::SiLU;

  /// Zero weights, identity BN statistics (or zero bias when fused).
  static ConvUnit make(int c_in, int c_out, int k, int stride, int groups, Activation act,
                       const UnitOptions& opt) {
    ConvUnit u;
    u.spec = ConvSpec{c_in, c_out, k, stride, same_padding(k), groups, opt.fused};
    u.spec.validate();
    u.weight = Tensor4(u.spec.weight_shape());
    if (opt.fused) {
      u.bias.assign(c_out, 0.0f);
    } else {
      u.bn = BNParams::identity(c_out, opt.bn_eps);
    }
    u.act = act;
    return u;
  }

  /// Plain biased conv without BatchNorm (e.g. squeeze-excitation projections).
  static ConvUnit make_biased(int c_in, int c_out, int k, Activation act) {
    ConvUnit u;
    u.spec = ConvSpec{c_in, c_out, k, 1, same_padding(k), 1, true};
    u.spec.validate();
    u.weight = Tensor4(u.spec.weight_shape());
    u.bias.assign(c_out, 0.0f);
    u.act = act;
    return u;
  }

  /// conv + BN, before the activation.
  Tensor4 affine(const Tensor4& x) const {
    Tensor4 y = conv2d(x, spec, weight, bias);
    if (bn) y = batchnorm_infer(y, *bn);
    return y;
  }

  Tensor4 forward(const Tensor4& x) const {
    Tensor4 y = affine(x);
    activate_inplace(y, act);
    return y;
  }

  void zero() {
    weight.fill(0.0f);
    for (auto& b : bias) b = 0.0f;
  }
};

/// RepVGG block: act(BN(conv3x3(x)) + BN(conv1x1(x)) [+ BN(x)]).
/// After reparameterization the branches are replaced by one biased 3x3 conv.
struct RepVGG {
  struct Branches {
    ConvUnit conv3;
    ConvUnit conv1;
    std::optional<BNParams> identity_bn;
  };

  std::variant<Branches, ConvUnit> form;
  Activation act = Activation::SiLU;

  static RepVGG make(int c_in, int c_out, int stride, bool identity_branch, Activation act,
                     const UnitOptions& opt) {
    if (identity_branch && (c_in != c_out || stride != 1)) {
      throw ShapeError("RepVGG identity branch needs c_in == c_out and stride 1 (got " +
                       std::to_string(c_in) + "->" + std::to_string(c_out) + ", stride " +
                       std::to_string(stride) + ")");
    }
    RepVGG r;
    r.act = act;
    if (opt.fused) {
      r.form = ConvUnit::make(c_in, c_out, 3, stride, 1, Activation::Identity, opt);
    } else {
      Branches b;
      b.conv3 = ConvUnit::make(c_in, c_out, 3, stride, 1, Activation::Identity, opt);
      b.conv1 = ConvUnit::make(c_in, c_out, 1, stride, 1, Activation::Identity, opt);
      if (identity_branch) b.identity_bn = BNParams::identity(c_out, opt.bn_eps);
      r.form = std::move(b);
    }
    return r;
  }

  bool is_fused() const noexcept { return std::holds_alternative<ConvUnit>(form); }
  const Branches& branches() const { return std::get<Branches>(form); }
  Branches& branches() { return std::get<Branches>(form); }
  const ConvUnit& fused() const { return std::get<ConvUnit>(form); }

  const ConvSpec& dense_spec() const {
    return is_fused() ? fused().spec : branches().conv3.spec;
  }

  Tensor4 forward(const Tensor4& x) const {
    Tensor4 y;
    if (is_fused()) {
      y = fused().affine(x);
    } else {
      const auto& b = branches();
      if (b.conv1.spec.c_out != b.conv3.spec.c_out || b.conv1.spec.stride != b.conv3.spec.stride) {
        throw ShapeError("RepVGG branches disagree on output geometry");
      }
      y = add(b.conv3.affine(x), b.conv1.affine(x));
      if (b.identity_bn) y = add(y, batchnorm_infer(x, *b.identity_bn));
    }
    activate_inplace(y, act);
    return y;
  }
};

/// Wraps a unit visitor so that every reported name gets `prefix.` prepended.
template <class F>
auto prefixed(F& f, std::string prefix) {
  return [&f, prefix = std::move(prefix)](const std::string& name, auto& unit) {
    f(prefix + "." + name, unit);
  };
}

}  // namespace vajra
