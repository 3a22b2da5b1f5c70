#pragma once

// Model graph: typed DAG of blocks, the line-oriented config format, shape
// propagation, and the per-scale placement rules.
//
// Config format (UTF-8, one statement per line, `#` starts a comment):
//
//   scale=N                      # optional: N | S | M | L | X
//   eps=0.001                    # optional BatchNorm epsilon
//   block <id> type=<kind> key=value ... from=<id>[,<id>...]
//
// `from=input` reads the graph input. Recognised keys: in, out, k, s, n,
// hidden, csp, dw, inner, heads, blocks, identity, se, mlp, factor, stage,
// fused.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vajra/blocks.hpp"
#include "vajra/error.hpp"
#include "vajra/ops.hpp"

namespace vajra {

enum class BlockKind {
  ConvBnAct,
  MerudandaX,
  MerudandaBhag15,
  AttentionBhag6,
  ADown,
  SPPF,
  Upsample,
  Concat,
};

inline std::string_view to_string(BlockKind k) noexcept {
  switch (k) {
    case BlockKind::ConvBnAct: return "conv_bn_act";
    case BlockKind::MerudandaX: return "merudanda_x";
    case BlockKind::MerudandaBhag15: return "merudanda_bhag15";
    case BlockKind::AttentionBhag6: return "attention_bhag6";
    case BlockKind::ADown: return "adown";
    case BlockKind::SPPF: return "sppf";
    case BlockKind::Upsample: return "upsample";
    case BlockKind::Concat: return "concat";
  }
  return "?";
}

inline std::optional<BlockKind> parse_block_kind(std::string_view s) {
  for (BlockKind k : {BlockKind::ConvBnAct, BlockKind::MerudandaX, BlockKind::MerudandaBhag15,
                      BlockKind::AttentionBhag6, BlockKind::ADown, BlockKind::SPPF,
                      BlockKind::Upsample, BlockKind::Concat}) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

inline bool has_parameters(BlockKind k) noexcept {
  return k != BlockKind::Upsample && k != BlockKind::Concat;
}

enum class Scale { N, S, M, L, X };

inline std::string_view to_string(Scale s) noexcept {
  constexpr std::string_view names[] = {"N", "S", "M", "L", "X"};
  return names[static_cast<int>(s)];
}

inline std::optional<Scale> parse_scale(std::string_view s) {
  if (s.size() != 1) return std::nullopt;
  switch (std::toupper(static_cast<unsigned char>(s[0]))) {
    case 'N': return Scale::N;
    case 'S': return Scale::S;
    case 'M': return Scale::M;
    case 'L': return Scale::L;
    case 'X': return Scale::X;
    default: return std::nullopt;
  }
}

inline constexpr std::string_view kGraphInput = "input";

struct BlockNode {
  std::string id;
  BlockKind kind = BlockKind::ConvBnAct;
  std::vector<std::string> inputs;
  std::string stage;  ///< S1..S5, P3..P5, or empty
  int c_in = 0;
  int c_out = 0;
  int k = 3;          ///< conv kernel, or SPPF pool size
  int stride = 1;
  int factor = 2;     ///< upsample factor
  int attn_blocks = 1;
  BlockHyper hyper;
  bool fused = false;

  friend bool operator==(const BlockNode&, const BlockNode&) = default;
};

struct ModelGraph {
  std::optional<Scale> scale;
  float bn_eps = 1e-3f;
  int input_channels = 0;
  std::vector<BlockNode> nodes;  ///< topological order
  std::vector<std::string> warnings;

  const BlockNode* find(std::string_view id) const {
    for (const auto& n : nodes) {
      if (n.id == id) return &n;
    }
    return nullptr;
  }

  std::size_t index_of(std::string_view id) const {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i].id == id) return i;
    }
    throw ConfigError("unknown node id '" + std::string(id) + "'");
  }
};

// ---------------------------------------------------------------------------
// Structural checks shared by the parser, the cost model and the builders.

/// Derived internal widths of a node, validated.
struct NodeWidths {
  int hidden = 0;  ///< merudanda_x stem width, bhag15/attention half width, SPPF reduce width
  int csp = 0;     ///< merudanda_x RepCSP width
  int heads = 0;   ///< attention heads
};

inline NodeWidths node_widths(const BlockNode& n) {
  NodeWidths w;
  const BlockHyper& hp = n.hyper;
  auto fail = [&](const std::string& msg) { throw ConfigError("node '" + n.id + "': " + msg); };
  if (has_parameters(n.kind) && (n.c_in < 1 || n.c_out < 1)) fail("channel counts must be >= 1");
  switch (n.kind) {
    case BlockKind::ConvBnAct:
      if (n.k < 1 || n.k % 2 == 0) fail("conv kernel must be odd");
      if (n.stride < 1 || n.stride > 2) fail("conv stride must be 1 or 2");
      break;
    case BlockKind::MerudandaX:
      if (hp.n < 1) fail("n must be >= 1");
      w.hidden = scaled_width(n.c_out, hp.hidden_ratio.value_or(1.0), n.id);
      if (w.hidden % 2 != 0) fail("odd stem width " + std::to_string(w.hidden) + " cannot be split evenly");
      w.csp = scaled_width(w.hidden / 2, hp.csp_ratio, n.id);
      break;
    case BlockKind::MerudandaBhag15:
      if (hp.n < 1) fail("n must be >= 1");
      if (hp.dw_kernel != 3 && hp.dw_kernel != 7) fail("dw kernel must be 3 or 7");
      w.hidden = scaled_width(n.c_out, hp.hidden_ratio.value_or(0.5), n.id);
      if (hp.inner == InnerKind::RepViT && (hp.se_ratio < 1 || w.hidden % hp.se_ratio != 0)) {
        fail("SE ratio " + std::to_string(hp.se_ratio) + " does not divide " + std::to_string(w.hidden));
      }
      if (hp.mlp_ratio < 1) fail("mlp ratio must be >= 1");
      break;
    case BlockKind::AttentionBhag6:
      if (n.attn_blocks < 0) fail("attention block count must be >= 0");
      if (n.k < 1 || n.k % 2 == 0) fail("SPPF pool kernel must be odd");
      if (n.c_in % 2 != 0) fail("input channels must be even");
      w.hidden = scaled_width(n.c_out, hp.hidden_ratio.value_or(0.5), n.id);
      w.heads = hp.attn_heads > 0 ? hp.attn_heads : default_heads(w.hidden);
      if (w.hidden % w.heads != 0) {
        fail(std::to_string(w.heads) + " heads do not divide " + std::to_string(w.hidden) + " channels");
      }
      if (hp.mlp_ratio < 1) fail("mlp ratio must be >= 1");
      break;
    case BlockKind::ADown:
      if (n.c_in % 2 != 0 || n.c_out % 2 != 0) fail("adown needs even input and output channels");
      break;
    case BlockKind::SPPF:
      if (n.k < 1 || n.k % 2 == 0) fail("SPPF pool kernel must be odd");
      if (n.c_in % 2 != 0) fail("SPPF input channels must be even");
      w.hidden = n.c_in / 2;
      break;
    case BlockKind::Upsample:
      if (n.factor < 1) fail("upsample factor must be >= 1");
      break;
    case BlockKind::Concat:
      break;
  }
  return w;
}

/// Output shape of a node given the shapes of its inputs.
inline Shape4 node_output_shape(const BlockNode& n, const std::vector<Shape4>& in) {
  auto fail = [&](const std::string& msg) -> Shape4 {
    throw ShapeError("node '" + n.id + "': " + msg);
  };
  if (in.empty()) return fail("no inputs");
  if (n.kind != BlockKind::Concat && in.size() != 1) return fail("expects exactly one input");
  const Shape4& x = in.front();
  if (n.kind != BlockKind::Concat && n.kind != BlockKind::Upsample && x.c != n.c_in) {
    return fail("expects " + std::to_string(n.c_in) + " input channels, got " + std::to_string(x.c));
  }
  switch (n.kind) {
    case BlockKind::ConvBnAct: {
      ConvSpec spec{n.c_in, n.c_out, n.k, n.stride, same_padding(n.k), 1, false};
      try {
        return conv_output_shape(x, spec);
      } catch (const ShapeError& e) {
        return fail(e.what());
      }
    }
    case BlockKind::MerudandaX:
    case BlockKind::MerudandaBhag15:
    case BlockKind::AttentionBhag6:
    case BlockKind::SPPF:
      return {x.n, n.c_out, x.h, x.w};
    case BlockKind::ADown:
      if (x.h % 2 != 0 || x.w % 2 != 0) return fail("adown needs even spatial dims, got " + x.str());
      if (x.h < 2 || x.w < 2) return fail("adown input too small: " + x.str());
      return {x.n, n.c_out, x.h / 2, x.w / 2};
    case BlockKind::Upsample:
      return {x.n, x.c, x.h * n.factor, x.w * n.factor};
    case BlockKind::Concat: {
      Shape4 out = x;
      out.c = 0;
      for (const auto& s : in) {
        if (s.n != x.n || s.h != x.h || s.w != x.w) {
          return fail("concat inputs disagree: " + s.str() + " vs " + x.str());
        }
        out.c += s.c;
      }
      return out;
    }
  }
  return fail("unknown kind");
}

/// Output shape of every node for a given graph input, in node order.
inline std::vector<Shape4> propagate_shapes(const ModelGraph& g, Shape4 input) {
  if (!input.valid()) throw ShapeError("input shape must have all dims >= 1, got " + input.str());
  if (g.input_channels != 0 && input.c != g.input_channels) {
    throw ShapeError("graph expects " + std::to_string(g.input_channels) +
                     " input channels, got " + std::to_string(input.c));
  }
  std::vector<Shape4> shapes;
  shapes.reserve(g.nodes.size());
  for (const auto& n : g.nodes) {
    std::vector<Shape4> in;
    for (const auto& src : n.inputs) {
      in.push_back(src == kGraphInput ? input : shapes[g.index_of(src)]);
    }
    shapes.push_back(node_output_shape(n, in));
  }
  return shapes;
}

/// Node order for execution. Kahn's algorithm over the declared order; ties
/// go to the earliest declared node, or the latest when `prefer_late` is set.
inline std::vector<std::size_t> topological_order(const std::vector<BlockNode>& nodes,
                                                  bool prefer_late = false) {
  std::map<std::string, std::size_t, std::less<>> index;
  for (std::size_t i = 0; i < nodes.size(); ++i) index[nodes[i].id] = i;
  std::vector<int> indegree(nodes.size(), 0);
  std::vector<std::vector<std::size_t>> users(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& src : nodes[i].inputs) {
      if (src == kGraphInput) continue;
      auto it = index.find(src);
      if (it == index.end()) {
        throw ConfigError("node '" + nodes[i].id + "' reads unknown node '" + src + "'");
      }
      ++indegree[i];
      users[it->second].push_back(i);
    }
  }
  std::vector<std::size_t> ready;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (indegree[i] == 0) ready.push_back(i);
  }
  std::vector<std::size_t> order;
  while (!ready.empty()) {
    auto pick = prefer_late ? std::max_element(ready.begin(), ready.end())
                            : std::min_element(ready.begin(), ready.end());
    const std::size_t i = *pick;
    ready.erase(pick);
    order.push_back(i);
    for (std::size_t u : users[i]) {
      if (--indegree[u] == 0) ready.push_back(u);
    }
  }
  if (order.size() != nodes.size()) {
    std::string stuck;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (indegree[i] > 0) stuck += (stuck.empty() ? "" : ", ") + nodes[i].id;
    }
    throw ConfigError("graph contains a cycle through: " + stuck);
  }
  return order;
}

// ---------------------------------------------------------------------------
// Scale placement rules

/// Per-scale structural rules of the model family.
struct ScaleConfig {
  Scale scale = Scale::N;
  int depth = 1;                               ///< n of every merudanda block
  int attention_blocks = 1;                    ///< transformer blocks in attention_bhag6
  std::vector<std::string> dw7_stages;         ///< bhag15 stages using a 7x7 depthwise kernel
  std::vector<std::string> adown_stages;       ///< stages whose downsample is adown
  bool adown_everywhere = false;               ///< every non-stem downsample is adown

  static ScaleConfig for_scale(Scale s) {
    ScaleConfig c;
    c.scale = s;
    c.depth = (s == Scale::L || s == Scale::X) ? 2 : 1;
    c.attention_blocks = (s == Scale::L || s == Scale::X) ? 2 : 1;
    if (s == Scale::N) c.dw7_stages = {"P5"};
    if (s == Scale::S) c.dw7_stages = {"S5", "P5"};
    if (s == Scale::M || s == Scale::L) c.adown_stages = {"S5", "P5"};
    if (s == Scale::X) c.adown_everywhere = true;
    return c;
  }

  bool dw7_at(std::string_view stage) const {
    return std::find(dw7_stages.begin(), dw7_stages.end(), stage) != dw7_stages.end();
  }
  bool adown_at(std::string_view stage) const {
    return adown_everywhere ||
           std::find(adown_stages.begin(), adown_stages.end(), stage) != adown_stages.end();
  }
};

/// A spatial downsampling node other than the stem (the conv reading the image).
inline bool is_downsample(const BlockNode& n) {
  const bool reads_input =
      std::find(n.inputs.begin(), n.inputs.end(), kGraphInput) != n.inputs.end();
  if (reads_input) return false;
  return n.kind == BlockKind::ADown || (n.kind == BlockKind::ConvBnAct && n.stride == 2);
}

struct RuleCheck {
  std::vector<std::string> errors;
  std::vector<std::string> warnings;
  bool ok() const noexcept { return errors.empty(); }
};

/// Checks every node against the placement rules of `cfg`. Inner-kind
/// placement mismatches are warnings; everything else is an error.
inline RuleCheck check_scale_rules(const ModelGraph& g, const ScaleConfig& cfg) {
  RuleCheck rc;
  const std::string tag = "scale " + std::string(to_string(cfg.scale)) + ": ";
  for (const auto& n : g.nodes) {
    const std::string who = std::string(to_string(n.kind)) + " node '" + n.id + "'";
    if (n.kind == BlockKind::MerudandaX || n.kind == BlockKind::MerudandaBhag15) {
      if (n.hyper.n != cfg.depth) {
        rc.errors.push_back(tag + who + " has n=" + std::to_string(n.hyper.n) + ", expected n=" +
                            std::to_string(cfg.depth));
      }
    }
    if (n.kind == BlockKind::MerudandaBhag15) {
      const int want = cfg.dw7_at(n.stage) ? 7 : 3;
      if (n.hyper.dw_kernel != want) {
        rc.errors.push_back(tag + who + " at " + (n.stage.empty() ? "-" : n.stage) + " has dw=" +
                            std::to_string(n.hyper.dw_kernel) + ", expected dw=" +
                            std::to_string(want));
      }
      const bool deepest = n.stage == "S5" || n.stage == "P5";
      const InnerKind want_inner = deepest ? InnerKind::RepViT : InnerKind::MerudandaDW;
      if (n.hyper.inner != want_inner) {
        rc.warnings.push_back(tag + who + " at " + (n.stage.empty() ? "-" : n.stage) +
                              " uses inner=" + std::string(to_string(n.hyper.inner)) +
                              ", placement rule expects " + std::string(to_string(want_inner)));
      }
    }
    if (n.kind == BlockKind::AttentionBhag6) {
      if (n.attn_blocks != cfg.attention_blocks) {
        rc.errors.push_back(tag + who + " has blocks=" + std::to_string(n.attn_blocks) +
                            ", expected blocks=" + std::to_string(cfg.attention_blocks));
      }
      if (n.stage != "S5") {
        rc.errors.push_back(tag + who + " must be placed at S5, found " +
                            (n.stage.empty() ? "-" : n.stage));
      }
    }
    if (is_downsample(n)) {
      const bool want_adown = cfg.adown_at(n.stage);
      if (want_adown && n.kind != BlockKind::ADown) {
        rc.errors.push_back(tag + who + " at " + (n.stage.empty() ? "-" : n.stage) +
                            " must be adown");
      } else if (!want_adown && n.kind == BlockKind::ADown) {
        rc.errors.push_back(tag + who + " at " + (n.stage.empty() ? "-" : n.stage) +
                            " must be a strided conv_bn_act, not adown");
      }
    }
  }
  return rc;
}

// ---------------------------------------------------------------------------
// Config text

namespace detail {

struct Token {
  std::string_view text;
  std::size_t column;  // 1-based
};

inline std::vector<Token> tokenize(std::string_view line) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i >= line.size()) break;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    out.push_back({line.substr(start, i - start), start + 1});
  }
  return out;
}

inline bool valid_id(std::string_view id) {
  if (id.empty()) return false;
  return std::all_of(id.begin(), id.end(), [](char ch) {
    return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.';
  });
}

inline std::string format_ratio(double r) {
  std::ostringstream os;
  os.precision(17);
  os << r;
  return os.str();
}

}  // namespace detail

/// Parses and validates a config. Nodes are returned in topological order;
/// channel counts are checked along every edge, and when a scale header is
/// present the placement rules are enforced (inner-kind placement only warns).
inline ModelGraph parse_config(std::string_view text) {
  ModelGraph g;
  struct Pending {
    BlockNode node;
    std::size_t line;
    std::size_t in_column = 0;
    bool has_in = false;
    bool has_out = false;
    bool has_kind = false;
  };
  std::vector<Pending> pending;

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    auto toks = detail::tokenize(line);
    if (toks.empty()) {
      if (eol == text.size()) break;
      continue;
    }

    auto split_kv = [&](const detail::Token& t) {
      auto eq = t.text.find('=');
      if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("expected key=value, got '" + std::string(t.text) + "'", line_no, t.column);
      }
      return std::pair{t.text.substr(0, eq), t.text.substr(eq + 1)};
    };
    auto parse_int = [&](std::string_view v, std::size_t col) {
      int out = 0;
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
      if (ec != std::errc() || p != v.data() + v.size()) {
        throw ConfigError("expected an integer, got '" + std::string(v) + "'", line_no, col);
      }
      return out;
    };
    auto parse_real = [&](std::string_view v, std::size_t col) {
      std::string s(v);
      std::size_t used = 0;
      double d = 0.0;
      try {
        d = std::stod(s, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != s.size() || s.empty()) {
        throw ConfigError("expected a number, got '" + s + "'", line_no, col);
      }
      return d;
    };
    auto parse_flag = [&](std::string_view v, std::size_t col) {
      if (v == "1" || v == "true") return true;
      if (v == "0" || v == "false") return false;
      throw ConfigError("expected 0 or 1, got '" + std::string(v) + "'", line_no, col);
    };

    if (toks[0].text != "block") {
      for (const auto& t : toks) {
        auto [key, value] = split_kv(t);
        const std::size_t vcol = t.column + key.size() + 1;
        if (key == "scale") {
          auto s = parse_scale(value);
          if (!s) throw ConfigError("unknown scale '" + std::string(value) + "'", line_no, vcol);
          g.scale = s;
        } else if (key == "eps") {
          const double e = parse_real(value, vcol);
          if (!(e > 0.0)) throw ConfigError("eps must be positive", line_no, vcol);
          g.bn_eps = static_cast<float>(e);
        } else {
          throw ConfigError("unknown header key '" + std::string(key) + "'", line_no, t.column);
        }
      }
      continue;
    }

    if (toks.size() < 2) throw ConfigError("block statement needs an id", line_no, toks[0].column + 5);
    Pending p;
    p.line = line_no;
    p.node.id = std::string(toks[1].text);
    if (!detail::valid_id(p.node.id) || p.node.id == kGraphInput || p.node.id.find('=') != std::string::npos) {
      throw ConfigError("invalid block id '" + p.node.id + "'", line_no, toks[1].column);
    }
    bool has_k = false;
    for (std::size_t i = 2; i < toks.size(); ++i) {
      auto [key, value] = split_kv(toks[i]);
      const std::size_t vcol = toks[i].column + key.size() + 1;
      BlockNode& n = p.node;
      if (key == "type") {
        auto kind = parse_block_kind(value);
        if (!kind) throw ConfigError("unknown block kind '" + std::string(value) + "'", line_no, vcol);
        n.kind = *kind;
        p.has_kind = true;
      } else if (key == "in") {
        n.c_in = parse_int(value, vcol);
        p.has_in = true;
        p.in_column = vcol;
      } else if (key == "out") {
        n.c_out = parse_int(value, vcol);
        p.has_out = true;
      } else if (key == "k") {
        n.k = parse_int(value, vcol);
        has_k = true;
      } else if (key == "s") {
        n.stride = parse_int(value, vcol);
      } else if (key == "n") {
        n.hyper.n = parse_int(value, vcol);
      } else if (key == "hidden") {
        n.hyper.hidden_ratio = parse_real(value, vcol);
      } else if (key == "csp") {
        n.hyper.csp_ratio = parse_real(value, vcol);
      } else if (key == "dw") {
        n.hyper.dw_kernel = parse_int(value, vcol);
      } else if (key == "inner") {
        if (value == "repvit") {
          n.hyper.inner = InnerKind::RepViT;
        } else if (value == "merudanda_dw") {
          n.hyper.inner = InnerKind::MerudandaDW;
        } else {
          throw ConfigError("unknown inner kind '" + std::string(value) + "'", line_no, vcol);
        }
      } else if (key == "heads") {
        n.hyper.attn_heads = parse_int(value, vcol);
      } else if (key == "blocks") {
        n.attn_blocks = parse_int(value, vcol);
      } else if (key == "identity") {
        n.hyper.identity_branch = parse_flag(value, vcol);
      } else if (key == "se") {
        n.hyper.se_ratio = parse_int(value, vcol);
      } else if (key == "mlp") {
        n.hyper.mlp_ratio = parse_int(value, vcol);
      } else if (key == "factor") {
        n.factor = parse_int(value, vcol);
      } else if (key == "stage") {
        n.stage = std::string(value);
      } else if (key == "fused") {
        n.fused = parse_flag(value, vcol);
      } else if (key == "from") {
        std::string_view rest = value;
        std::size_t col = vcol;
        while (true) {
          auto comma = rest.find(',');
          std::string_view id = rest.substr(0, comma);
          if (!detail::valid_id(id)) {
            throw ConfigError("invalid source id '" + std::string(id) + "'", line_no, col);
          }
          n.inputs.emplace_back(id);
          if (comma == std::string_view::npos) break;
          rest = rest.substr(comma + 1);
          col += comma + 1;
        }
      } else {
        throw ConfigError("unknown key '" + std::string(key) + "'", line_no, toks[i].column);
      }
    }
    if (!p.has_kind) throw ConfigError("block '" + p.node.id + "' has no type", line_no, toks[1].column);
    if (p.node.inputs.empty()) throw ConfigError("block '" + p.node.id + "' has no from=", line_no, toks[1].column);
    if (p.node.kind == BlockKind::SPPF || p.node.kind == BlockKind::AttentionBhag6) {
      if (!has_k) p.node.k = 5;
    }
    if (has_parameters(p.node.kind) && !p.has_out) {
      throw ConfigError("block '" + p.node.id + "' needs out=", line_no, toks[1].column);
    }
    for (const auto& q : pending) {
      if (q.node.id == p.node.id) {
        throw ConfigError("duplicate block id '" + p.node.id + "'", line_no, toks[1].column);
      }
    }
    pending.push_back(std::move(p));
    if (eol == text.size()) break;
  }

  if (pending.empty()) throw ConfigError("no nodes");

  std::vector<BlockNode> declared;
  for (const auto& p : pending) declared.push_back(p.node);
  std::vector<std::size_t> order;
  try {
    order = topological_order(declared);
  } catch (const ConfigError& e) {
    throw ConfigError(e.what());
  }

  // channel arithmetic along edges, in topological order
  std::map<std::string, int, std::less<>> out_channels;
  for (std::size_t idx : order) {
    Pending& p = pending[idx];
    BlockNode& n = p.node;
    int inferred = 0;
    for (const auto& src : n.inputs) {
      int c = 0;
      if (src == kGraphInput) {
        if (!p.has_in) {
          throw ConfigError("block '" + n.id + "' reads the graph input and needs in=", p.line, 1);
        }
        c = n.c_in;
        if (g.input_channels != 0 && g.input_channels != c) {
          throw ConfigError("channel mismatch: block '" + n.id + "' declares input with " +
                                std::to_string(c) + " channels, another block uses " +
                                std::to_string(g.input_channels),
                            p.line, p.in_column);
        }
        g.input_channels = c;
      } else {
        c = out_channels.at(src);
      }
      if (n.kind == BlockKind::Concat) {
        inferred += c;
      } else if (inferred == 0) {
        inferred = c;
      }
    }
    if (n.kind != BlockKind::Concat && n.inputs.size() != 1) {
      throw ConfigError("block '" + n.id + "' (" + std::string(to_string(n.kind)) +
                            ") takes exactly one input",
                        p.line, 1);
    }
    if (p.has_in && n.c_in != inferred) {
      throw ConfigError("channel mismatch: block '" + n.id + "' declares in=" +
                            std::to_string(n.c_in) + " but receives " + std::to_string(inferred),
                        p.line, p.in_column);
    }
    n.c_in = inferred;
    if (!has_parameters(n.kind)) {
      const int produced = n.kind == BlockKind::Concat ? inferred : n.c_in;
      if (p.has_out && n.c_out != produced) {
        throw ConfigError("channel mismatch: block '" + n.id + "' declares out=" +
                              std::to_string(n.c_out) + " but produces " + std::to_string(produced),
                          p.line, 1);
      }
      n.c_out = produced;
    }
    try {
      node_widths(n);
    } catch (const ConfigError& e) {
      throw ConfigError(e.what(), p.line, 1);
    }
    out_channels[n.id] = n.c_out;
    g.nodes.push_back(n);
  }

  if (g.scale) {
    RuleCheck rc = check_scale_rules(g, ScaleConfig::for_scale(*g.scale));
    if (!rc.ok()) {
      std::string msg = "placement rule violation: " + rc.errors.front();
      if (rc.errors.size() > 1) msg += " (+" + std::to_string(rc.errors.size() - 1) + " more)";
      throw ConfigError(msg);
    }
    g.warnings = std::move(rc.warnings);
  }
  return g;
}

/// Canonical config text for a graph; parse_config(write_config(g)) == g.
inline std::string write_config(const ModelGraph& g) {
  std::ostringstream os;
  if (g.scale) os << "scale=" << to_string(*g.scale) << "\n";
  if (g.bn_eps != 1e-3f) os << "eps=" << detail::format_ratio(g.bn_eps) << "\n";
  const BlockHyper defaults;
  for (const auto& n : g.nodes) {
    os << "block " << n.id << " type=" << to_string(n.kind);
    if (has_parameters(n.kind)) os << " in=" << n.c_in << " out=" << n.c_out;
    switch (n.kind) {
      case BlockKind::ConvBnAct:
        os << " k=" << n.k << " s=" << n.stride;
        break;
      case BlockKind::SPPF:
        if (n.k != 5) os << " k=" << n.k;
        break;
      case BlockKind::AttentionBhag6:
        os << " blocks=" << n.attn_blocks;
        if (n.k != 5) os << " k=" << n.k;
        break;
      case BlockKind::Upsample:
        if (n.factor != 2) os << " factor=" << n.factor;
        break;
      default:
        break;
    }
    const BlockHyper& hp = n.hyper;
    if (n.kind == BlockKind::MerudandaX || n.kind == BlockKind::MerudandaBhag15) os << " n=" << hp.n;
    if (hp.hidden_ratio) os << " hidden=" << detail::format_ratio(*hp.hidden_ratio);
    if (hp.csp_ratio != defaults.csp_ratio) os << " csp=" << detail::format_ratio(hp.csp_ratio);
    if (n.kind == BlockKind::MerudandaBhag15) {
      os << " dw=" << hp.dw_kernel << " inner=" << to_string(hp.inner);
    } else if (hp.dw_kernel != defaults.dw_kernel) {
      os << " dw=" << hp.dw_kernel;
    }
    if (hp.attn_heads != 0) os << " heads=" << hp.attn_heads;
    if (hp.identity_branch) os << " identity=1";
    if (hp.se_ratio != defaults.se_ratio) os << " se=" << hp.se_ratio;
    if (hp.mlp_ratio != defaults.mlp_ratio) os << " mlp=" << hp.mlp_ratio;
    if (!n.stage.empty()) os << " stage=" << n.stage;
    if (n.fused) os << " fused=1";
    os << " from=";
    for (std::size_t i = 0; i < n.inputs.size(); ++i) os << (i ? "," : "") << n.inputs[i];
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Presets

/// Stage widths used by the shipped presets (S1..S5 outputs; the neck reuses
/// S3..S5 widths for P3..P5).
struct PresetWidths {
  int s1, s2, s3, s4, s5;
};

inline PresetWidths preset_widths(Scale s) {
  switch (s) {
    case Scale::N: return {16, 32, 64, 128, 256};
    case Scale::S: return {32, 64, 128, 256, 512};
    case Scale::M: return {64, 128, 256, 512, 512};
    case Scale::L: return {64, 128, 256, 512, 512};
    case Scale::X: return {96, 192, 384, 768, 768};
  }
  return {};
}

/// Config text of the reconstructed backbone + PAN neck for one scale.
///
/// The placement rules of ScaleConfig are applied literally; stage widths
/// follow preset_widths and are reconstructions, not published values.
inline std::string preset_config(Scale s) {
  const ScaleConfig rules = ScaleConfig::for_scale(s);
  const PresetWidths w = preset_widths(s);
  const int n = rules.depth;
  std::ostringstream os;
  os << "# VajraV1-" << to_string(s) << " backbone and neck (reconstructed preset)\n";
  os << "scale=" << to_string(s) << "\n";

  auto down = [&](const std::string& id, int cin, int cout, const std::string& stage,
                  const std::string& from) {
    os << "block " << id;
    if (rules.adown_at(stage)) {
      os << " type=adown in=" << cin << " out=" << cout;
    } else {
      os << " type=conv_bn_act in=" << cin << " out=" << cout << " k=3 s=2";
    }
    os << " stage=" << stage << " from=" << from << "\n";
  };
  auto mx = [&](const std::string& id, int cin, int cout, const std::string& stage,
                const std::string& from) {
    os << "block " << id << " type=merudanda_x in=" << cin << " out=" << cout << " n=" << n
       << " stage=" << stage << " from=" << from << "\n";
  };
  auto bhag = [&](const std::string& id, int cin, int cout, const std::string& stage,
                  const std::string& from) {
    const bool deepest = stage == "S5" || stage == "P5";
    os << "block " << id << " type=merudanda_bhag15 in=" << cin << " out=" << cout << " n=" << n
       << " dw=" << (rules.dw7_at(stage) ? 7 : 3) << " inner=" << (deepest ? "repvit" : "merudanda_dw")
       << " stage=" << stage << " from=" << from << "\n";
  };

  os << "# backbone\n";
  os << "block stem type=conv_bn_act in=3 out=" << w.s1 << " k=3 s=2 stage=S1 from=input\n";
  down("s2_down", w.s1, w.s2, "S2", "stem");
  mx("s2_block", w.s2, w.s2, "S2", "s2_down");
  down("s3_down", w.s2, w.s3, "S3", "s2_block");
  mx("s3_block", w.s3, w.s3, "S3", "s3_down");
  down("s4_down", w.s3, w.s4, "S4", "s3_block");
  mx("s4_block", w.s4, w.s4, "S4", "s4_down");
  down("s5_down", w.s4, w.s5, "S5", "s4_block");
  bhag("s5_block", w.s5, w.s5, "S5", "s5_down");
  os << "block s5_attn type=attention_bhag6 in=" << w.s5 << " out=" << w.s5
     << " blocks=" << rules.attention_blocks << " stage=S5 from=s5_block\n";

  os << "# neck, top-down\n";
  os << "block p4_up type=upsample stage=P4 from=s5_attn\n";
  os << "block p4_cat type=concat stage=P4 from=p4_up,s4_block\n";
  mx("p4_td", w.s5 + w.s4, w.s4, "P4", "p4_cat");
  os << "block p3_up type=upsample stage=P3 from=p4_td\n";
  os << "block p3_cat type=concat stage=P3 from=p3_up,s3_block\n";
  mx("p3_out", w.s4 + w.s3, w.s3, "P3", "p3_cat");

  os << "# neck, bottom-up\n";
  down("p4_down", w.s3, w.s3, "P4", "p3_out");
  os << "block p4_cat2 type=concat stage=P4 from=p4_down,p4_td\n";
  if (s == Scale::N || s == Scale::S) {
    mx("p4_out", w.s3 + w.s4, w.s4, "P4", "p4_cat2");
  } else {
    bhag("p4_out", w.s3 + w.s4, w.s4, "P4", "p4_cat2");
  }
  down("p5_down", w.s4, w.s4, "P5", "p4_out");
  os << "block p5_cat type=concat stage=P5 from=p5_down,s5_attn\n";
  bhag("p5_out", w.s4 + w.s5, w.s5, "P5", "p5_cat");
  return os.str();
}

}  // namespace vajra
