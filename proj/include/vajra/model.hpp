#pragma once

// Graph execution: building block instances from nodes, binding them to a
// WeightStore, deterministic initialization, forward evaluation and the
// whole-graph reparameterization pass.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "vajra/blocks.hpp"
#include "vajra/graph.hpp"
#include "vajra/random.hpp"
#include "vajra/reparam.hpp"
#include "vajra/units.hpp"
#include "vajra/weights.hpp"

namespace vajra {

/// Parametric block of one graph node; monostate for upsample/concat.
using BlockInstance =
    std::variant<std::monostate, ConvUnit, MerudandaX, MerudandaBhag15, AttentionBhag6, ADown, SPPF>;

inline BlockInstance build_block(const BlockNode& n, float bn_eps) {
  const UnitOptions opt{bn_eps, n.fused};
  node_widths(n);
  switch (n.kind) {
    case BlockKind::ConvBnAct:
      return ConvUnit::make(n.c_in, n.c_out, n.k, n.stride, 1, Activation::SiLU, opt);
    case BlockKind::MerudandaX:
      return MerudandaX::make(n.c_in, n.c_out, n.hyper, opt);
    case BlockKind::MerudandaBhag15:
      return MerudandaBhag15::make(n.c_in, n.c_out, n.hyper, opt);
    case BlockKind::AttentionBhag6:
      return AttentionBhag6::make(n.c_in, n.c_out, n.attn_blocks, n.hyper, n.k, opt);
    case BlockKind::ADown:
      return ADown::make(n.c_in, n.c_out, opt);
    case BlockKind::SPPF:
      return SPPF::make(n.c_in, n.c_out, n.k, opt);
    case BlockKind::Upsample:
    case BlockKind::Concat:
      return std::monostate{};
  }
  return std::monostate{};
}

/// Visits every unit of a block instance with names prefixed by `prefix`.
template <class Inst, class F>
void visit_units(Inst& inst, const std::string& prefix, F&& f) {
  std::visit(
      [&](auto& b) {
        using B = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<B, std::monostate>) {
          return;
        } else if constexpr (std::is_same_v<B, ConvUnit>) {
          f(prefix + ".conv", b);
        } else {
          b.visit(prefixed(f, prefix));
        }
      },
      inst);
}

// ---------------------------------------------------------------------------
// Unit <-> store binding

namespace detail {

inline void export_conv(WeightStore& w, const std::string& name, const ConvUnit& u) {
  w.put(name + ".weight", StoredTensor::from(u.weight));
  if (u.spec.has_bias) w.put(name + ".bias", StoredTensor::vector(u.bias));
  if (u.bn) {
    w.put(name + ".bn.gamma", StoredTensor::vector(u.bn->gamma));
    w.put(name + ".bn.beta", StoredTensor::vector(u.bn->beta));
    w.put(name + ".bn.mean", StoredTensor::vector(u.bn->mean));
    w.put(name + ".bn.var", StoredTensor::vector(u.bn->var));
  }
}

inline void export_bn(WeightStore& w, const std::string& name, const BNParams& bn) {
  w.put(name + ".gamma", StoredTensor::vector(bn.gamma));
  w.put(name + ".beta", StoredTensor::vector(bn.beta));
  w.put(name + ".mean", StoredTensor::vector(bn.mean));
  w.put(name + ".var", StoredTensor::vector(bn.var));
}

inline void import_vector(const WeightStore& w, const std::string& name, std::vector<float>& dst) {
  const StoredTensor& t = w.get(name);
  if (t.dims.size() != 1 || t.data.size() != dst.size()) {
    throw Error("weight '" + name + "' has " + std::to_string(t.data.size()) + " values, expected " +
                std::to_string(dst.size()));
  }
  dst = t.data;
}

inline void import_bn(const WeightStore& w, const std::string& name, BNParams& bn) {
  import_vector(w, name + ".gamma", bn.gamma);
  import_vector(w, name + ".beta", bn.beta);
  import_vector(w, name + ".mean", bn.mean);
  import_vector(w, name + ".var", bn.var);
}

inline void import_conv(const WeightStore& w, const std::string& name, ConvUnit& u) {
  const StoredTensor& t = w.get(name + ".weight");
  if (t.dims.size() != 4 || t.data.size() != u.weight.size() ||
      t.as_tensor4().shape() != u.weight.shape()) {
    std::string got;
    for (auto d : t.dims) got += (got.empty() ? "" : "x") + std::to_string(d);
    throw Error("weight '" + name + ".weight' has dims " + got + ", expected " +
                u.weight.shape().str());
  }
  u.weight = t.as_tensor4();
  if (u.spec.has_bias) import_vector(w, name + ".bias", u.bias);
  if (u.bn) import_bn(w, name + ".bn", *u.bn);
}

struct Exporter {
  WeightStore& w;
  void operator()(const std::string& name, const ConvUnit& u) const { export_conv(w, name, u); }
  void operator()(const std::string& name, const RepVGG& r) const {
    if (r.is_fused()) {
      export_conv(w, name + ".fused", r.fused());
      return;
    }
    const auto& b = r.branches();
    export_conv(w, name + ".conv3", b.conv3);
    export_conv(w, name + ".conv1", b.conv1);
    if (b.identity_bn) export_bn(w, name + ".id_bn", *b.identity_bn);
  }
};

struct Importer {
  const WeightStore& w;
  void operator()(const std::string& name, ConvUnit& u) const { import_conv(w, name, u); }
  void operator()(const std::string& name, RepVGG& r) const {
    if (r.is_fused()) {
      import_conv(w, name + ".fused", std::get<ConvUnit>(r.form));
      return;
    }
    auto& b = r.branches();
    import_conv(w, name + ".conv3", b.conv3);
    import_conv(w, name + ".conv1", b.conv1);
    if (b.identity_bn) import_bn(w, name + ".id_bn", *b.identity_bn);
  }
};

/// Fan-in-scaled uniform init of conv weights and biases; BN keeps identity
/// statistics.
struct Initializer {
  Rng& rng;
  void conv(ConvUnit& u) const {
    const int fan_in = (u.spec.c_in / u.spec.groups) * u.spec.k * u.spec.k;
    const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
    rng.fill(u.weight, -bound, bound);
    for (auto& b : u.bias) b = rng.uniform(-bound, bound);
  }
  void operator()(const std::string&, ConvUnit& u) const { conv(u); }
  void operator()(const std::string&, RepVGG& r) const {
    if (r.is_fused()) {
      conv(std::get<ConvUnit>(r.form));
    } else {
      conv(r.branches().conv3);
      conv(r.branches().conv1);
    }
  }
};

}  // namespace detail

inline void export_block(const BlockInstance& inst, const std::string& prefix, WeightStore& w) {
  visit_units(inst, prefix, detail::Exporter{w});
}

inline void import_block(BlockInstance& inst, const std::string& prefix, const WeightStore& w) {
  visit_units(inst, prefix, detail::Importer{w});
}

// ---------------------------------------------------------------------------

/// Block instances of a graph bound to concrete weights.
class Model {
 public:
  Model(const ModelGraph& g, const WeightStore& w) : graph_(g) {
    blocks_.reserve(g.nodes.size());
    for (const auto& n : g.nodes) {
      BlockInstance inst = build_block(n, g.bn_eps);
      try {
        import_block(inst, n.id, w);
      } catch (const Error& e) {
        throw Error("node '" + n.id + "': " + e.what());
      }
      blocks_.push_back(std::move(inst));
    }
  }

  /// Builds block instances with zero weights (used by initialization).
  explicit Model(const ModelGraph& g) : graph_(g) {
    for (const auto& n : g.nodes) blocks_.push_back(build_block(n, g.bn_eps));
  }

  const ModelGraph& graph() const noexcept { return graph_; }
  std::vector<BlockInstance>& blocks() noexcept { return blocks_; }
  const std::vector<BlockInstance>& blocks() const noexcept { return blocks_; }

  WeightStore export_weights() const {
    WeightStore w;
    for (std::size_t i = 0; i < blocks_.size(); ++i) export_block(blocks_[i], graph_.nodes[i].id, w);
    return w;
  }

  struct Result {
    std::map<std::string, Tensor4> features;  ///< P3/P4/P5, or the last node by id
    std::vector<Tensor4> node_outputs;        ///< indexed like graph().nodes
  };

  /// Evaluates every node. `order` is a topological order of graph().nodes;
  /// by default the stored order is used.
  Result forward(const Tensor4& x, const std::vector<std::size_t>* order = nullptr) const {
    const auto& nodes = graph_.nodes;
    std::vector<std::size_t> default_order;
    if (!order) {
      default_order.resize(nodes.size());
      for (std::size_t i = 0; i < nodes.size(); ++i) default_order[i] = i;
      order = &default_order;
    }
    std::vector<Tensor4> outs(nodes.size());
    std::vector<bool> done(nodes.size(), false);
    for (std::size_t i : *order) {
      const BlockNode& n = nodes[i];
      std::vector<const Tensor4*> in;
      for (const auto& src : n.inputs) {
        if (src == kGraphInput) {
          in.push_back(&x);
        } else {
          const std::size_t j = graph_.index_of(src);
          if (!done[j]) throw Error("node '" + n.id + "' scheduled before its input '" + src + "'");
          in.push_back(&outs[j]);
        }
      }
      try {
        outs[i] = run_node(i, in);
      } catch (const ShapeError& e) {
        throw ShapeError("node '" + n.id + "': " + e.what());
      }
      done[i] = true;
    }
    Result r;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const std::string& tag = nodes[i].stage;
      if (tag == "P3" || tag == "P4" || tag == "P5") r.features[tag] = outs[i];
    }
    if (r.features.empty() && !nodes.empty()) r.features[nodes.back().id] = outs.back();
    r.node_outputs = std::move(outs);
    return r;
  }

 private:
  Tensor4 run_node(std::size_t i, const std::vector<const Tensor4*>& in) const {
    const BlockNode& n = graph_.nodes[i];
    if (n.kind == BlockKind::Upsample) return upsample_nearest(*in.front(), n.factor);
    if (n.kind == BlockKind::Concat) {
      std::vector<Tensor4> parts;
      for (const auto* t : in) parts.push_back(*t);
      return concat_channels(parts);
    }
    const Tensor4& x = *in.front();
    if (x.c() != n.c_in) {
      throw ShapeError("expects " + std::to_string(n.c_in) + " input channels, got " +
                       std::to_string(x.c()));
    }
    return std::visit(
        [&](const auto& b) -> Tensor4 {
          using B = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<B, std::monostate>) {
            throw Error("node has no block instance");
          } else {
            return b.forward(x);
          }
        },
        blocks_[i]);
  }

  ModelGraph graph_;
  std::vector<BlockInstance> blocks_;
};

/// Deterministic weights for a graph: conv weights and biases uniform in
/// +-1/sqrt(fan_in), BN gamma=1, beta=0, mean=0, var=1.
inline WeightStore init_weights(const ModelGraph& g, std::uint64_t seed) {
  Model m(g);
  Rng rng(seed);
  for (std::size_t i = 0; i < m.blocks().size(); ++i) {
    visit_units(m.blocks()[i], g.nodes[i].id, detail::Initializer{rng});
  }
  return m.export_weights();
}

/// Replaces BN statistics with random values (gamma, var in [0.5, 1.5);
/// beta, mean in [-0.1, 0.1)) so that folding is exercised non-trivially.
inline WeightStore perturb_bn_stats(const WeightStore& w, std::uint64_t seed) {
  Rng rng(seed ^ 0x5eedb17eULL);
  WeightStore out;
  for (const auto& [name, t] : w) {
    StoredTensor copy = t;
    auto ends_with = [&](std::string_view suffix) {
      return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    const bool bn = name.find(".bn.") != std::string::npos || name.find(".id_bn.") != std::string::npos;
    if (bn && (ends_with(".gamma") || ends_with(".var"))) {
      for (auto& v : copy.data) v = rng.uniform(0.5f, 1.5f);
    } else if (bn && (ends_with(".beta") || ends_with(".mean"))) {
      for (auto& v : copy.data) v = rng.uniform(-0.1f, 0.1f);
    }
    out.put(name, std::move(copy));
  }
  return out;
}

/// Names and dims of every tensor the graph needs, in store order.
inline std::vector<std::pair<std::string, std::vector<std::uint32_t>>> parameter_sites(const ModelGraph& g) {
  std::vector<std::pair<std::string, std::vector<std::uint32_t>>> sites;
  for (const auto& [name, t] : Model(g).export_weights()) sites.emplace_back(name, t.dims);
  return sites;
}

inline Model::Result forward_graph(const ModelGraph& g, const WeightStore& w, const Tensor4& x) {
  return Model(g, w).forward(x);
}

/// Folds every BatchNorm and fuses every RepVGG block. Parametric nodes come
/// back marked fused; upsample/concat nodes are passed through unchanged.
inline std::pair<ModelGraph, WeightStore> reparam_graph(const ModelGraph& g, const WeightStore& w) {
  Model m(g, w);
  for (auto& inst : m.blocks()) {
    std::visit(
        [](auto& b) {
          using B = std::decay_t<decltype(b)>;
          if constexpr (!std::is_same_v<B, std::monostate>) reparameterize(b);
        },
        inst);
  }
  ModelGraph fused = g;
  for (auto& n : fused.nodes) {
    if (has_parameters(n.kind)) n.fused = true;
  }
  WeightStore out;
  for (std::size_t i = 0; i < m.blocks().size(); ++i) export_block(m.blocks()[i], g.nodes[i].id, out);
  return {std::move(fused), std::move(out)};
}

}  // namespace vajra
