// vajra: command-line front end.
//
//   vajra describe      --config FILE [--shape NxCxHxW] [--format text|json] [--out FILE]
//   vajra cost          --config FILE [--shape NxCxHxW] [--format text|json] [--out FILE]
//   vajra reparam-check --config FILE [--weights FILE | --seed N] [--tol T] [--shape S]
//                       [--trials K] [--out FUSED.vjw] [--out-config FUSED.cfg]
//   vajra forward       --config FILE [--weights FILE | --seed N] [--input FILE | --shape S] --out FILE
//   vajra selftest      [--seed N] [--config-dir DIR]
//
// Exit codes: 0 success, 1 validation or tolerance failure, 2 usage error.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "vajra/vajra.hpp"

namespace {

using namespace vajra;

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Args {
  std::string config;
  std::string weights;
  std::string input;
  std::string out;
  std::string out_config;
  std::string config_dir;
  std::string shape;
  std::string format = "text";
  std::uint64_t seed = 0;
  double tol = 1e-3;
  int trials = 2;
};

ModelGraph load_graph(const Args& a) {
  return parse_config(read_text_file(a.config));
}

Shape4 input_shape(const Args& a, const ModelGraph& g, int default_hw) {
  if (!a.shape.empty()) {
    try {
      return parse_shape(a.shape);
    } catch (const ShapeError& e) {
      throw UsageError(e.what());
    }
  }
  const int c = g.input_channels != 0 ? g.input_channels : g.nodes.front().c_in;
  return {1, c, default_hw, default_hw};
}

void emit(const Args& a, const std::string& text) {
  if (a.out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(a.out, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + a.out + "' for writing");
  f << text;
}

std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : sep) + x;
  return s;
}

int cmd_describe(const Args& a) {
  const ModelGraph g = load_graph(a);
  const Shape4 in = input_shape(a, g, 640);
  const auto shapes = propagate_shapes(g, in);
  if (a.format == "json") {
    nlohmann::ordered_json j;
    j["scale"] = g.scale ? nlohmann::ordered_json(std::string(to_string(*g.scale))) : nlohmann::ordered_json(nullptr);
    j["input"] = {in.n, in.c, in.h, in.w};
    j["nodes"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
      const auto& n = g.nodes[i];
      const auto& s = shapes[i];
      j["nodes"].push_back({{"id", n.id},
                            {"kind", std::string(to_string(n.kind))},
                            {"stage", n.stage},
                            {"inputs", n.inputs},
                            {"output", {s.n, s.c, s.h, s.w}},
                            {"fused", n.fused}});
    }
    j["warnings"] = g.warnings;
    emit(a, j.dump(2) + "\n");
    return kOk;
  }
  std::vector<std::array<std::string, 6>> rows{{"#", "id", "kind", "stage", "inputs", "output"}};
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const auto& n = g.nodes[i];
    rows.push_back({std::to_string(i), n.id, std::string(to_string(n.kind)) + (n.fused ? " (fused)" : ""),
                    n.stage.empty() ? "-" : n.stage, join(n.inputs, ","), shapes[i].str()});
  }
  std::size_t width[6] = {};
  for (const auto& r : rows) {
    for (int c = 0; c < 6; ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::string text;
  if (g.scale) text += "scale " + std::string(to_string(*g.scale)) + ", ";
  text += std::to_string(g.nodes.size()) + " nodes, input " + in.str() + "\n";
  for (const auto& r : rows) {
    std::string line;
    for (int c = 0; c < 6; ++c) {
      std::string cell = r[c];
      if (c < 5) cell.resize(width[c], ' ');
      line += (c ? "  " : "") + cell;
    }
    text += line + "\n";
  }
  for (const auto& w : g.warnings) text += "warning: " + w + "\n";
  emit(a, text);
  return kOk;
}

int cmd_cost(const Args& a) {
  const ModelGraph g = load_graph(a);
  const CostReport rep = graph_cost(g, input_shape(a, g, 640));
  emit(a, a.format == "json" ? render_json(rep, g.scale).dump(2) + "\n" : render_text(rep, g.scale));
  return kOk;
}

WeightStore weights_for(const Args& a, const ModelGraph& g, bool perturb) {
  if (!a.weights.empty()) return load_weights(a.weights);
  WeightStore w = init_weights(g, a.seed);
  return perturb ? perturb_bn_stats(w, a.seed) : w;
}

int cmd_reparam_check(const Args& a) {
  const ModelGraph g = load_graph(a);
  const Shape4 in = input_shape(a, g, 128);
  const WeightStore w = weights_for(a, g, true);
  const auto [fg, fw] = reparam_graph(g, w);
  const Model original(g, w);
  const Model fused(fg, fw);

  double worst = 0.0;
  bool finite = true;
  std::map<std::string, double> per_feature;
  std::vector<double> per_node(g.nodes.size(), 0.0);
  for (int t = 0; t < a.trials; ++t) {
    const Tensor4 x = Rng(a.seed + static_cast<std::uint64_t>(t)).tensor(in);
    const auto ra = original.forward(x);
    const auto rb = fused.forward(x);
    for (const auto& [tag, v] : ra.features) {
      const double d = max_abs_diff(v, rb.features.at(tag));
      if (std::isnan(d)) finite = false;
      per_feature[tag] = std::max(per_feature[tag], d);
      worst = std::max(worst, d);
    }
    for (std::size_t i = 0; i < per_node.size(); ++i) {
      const double d = max_abs_diff(ra.node_outputs[i], rb.node_outputs[i]);
      per_node[i] = std::isnan(d) ? INFINITY : std::max(per_node[i], d);
    }
  }
  if (!a.out.empty()) save_weights(fw, a.out);
  if (!a.out_config.empty()) {
    std::ofstream f(a.out_config, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + a.out_config + "' for writing");
    f << write_config(fg);
  }

  const bool pass = finite && worst <= a.tol;
  std::size_t offender = 0;
  for (std::size_t i = 1; i < per_node.size(); ++i) {
    if (per_node[i] > per_node[offender]) offender = i;
  }
  char buf[256];
  for (const auto& [tag, d] : per_feature) {
    std::snprintf(buf, sizeof buf, "%-8s max abs diff %.3e\n", tag.c_str(), d);
    std::cout << buf;
  }
  std::snprintf(buf, sizeof buf, "max abs diff %.3e (tol %.3e) over %d input(s) of %s: %s\n", worst, a.tol,
                a.trials, in.str().c_str(), pass ? "PASS" : "FAIL");
  std::cout << buf;
  if (!pass && !per_node.empty()) {
    std::snprintf(buf, sizeof buf, "worst node: %s (%s) max abs diff %.3e\n", g.nodes[offender].id.c_str(),
                  std::string(to_string(g.nodes[offender].kind)).c_str(), per_node[offender]);
    std::cout << buf;
  }
  if (!a.out.empty()) std::cout << "fused weights written to " << a.out << " (" << fw.size() << " tensors)\n";
  return pass ? kOk : kFailed;
}

int cmd_forward(const Args& a) {
  if (a.out.empty()) throw UsageError("forward needs --out");
  if (!a.input.empty() && !a.shape.empty()) throw UsageError("--input and --shape are mutually exclusive");
  const ModelGraph g = load_graph(a);
  const WeightStore w = weights_for(a, g, false);
  Tensor4 x;
  if (!a.input.empty()) {
    const WeightStore in = load_weights(a.input);
    if (in.size() != 1) throw FormatError("input file must hold exactly one tensor, found " + std::to_string(in.size()));
    const StoredTensor& t = in.begin()->second;
    if (t.dims.size() != 4) throw FormatError("input tensor must have rank 4");
    x = t.as_tensor4();
  } else {
    x = Rng(a.seed).tensor(input_shape(a, g, 128));
  }
  const auto res = Model(g, w).forward(x);
  WeightStore out;
  for (const auto& [tag, t] : res.features) {
    out.put(tag, StoredTensor::from(t));
    std::cout << tag << " " << t.shape().str() << "\n";
  }
  save_weights(out, a.out);
  return kOk;
}

int cmd_selftest(const Args& a) {
  SelftestOptions opt;
  if (a.seed != 0) opt.seed = a.seed;
  if (!a.config_dir.empty()) opt.config_dir = a.config_dir;
  return run_acceptance(opt, stdout) ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VajraV1 block kit: describe, cost, reparameterize and run block graphs"};
  app.require_subcommand(1);
  Args a;

  auto add_format = [&](CLI::App* sub) {
    sub->add_option("--format", a.format, "text or json")->check(CLI::IsMember({"text", "json"}));
  };
  auto* describe = app.add_subcommand("describe", "List graph nodes in topological order");
  auto* cost = app.add_subcommand("cost", "Analytic MAC and parameter report");
  auto* reparam = app.add_subcommand("reparam-check", "Fuse BN and RepVGG branches, compare outputs");
  auto* forward = app.add_subcommand("forward", "Run the graph and write P3/P4/P5 features");
  auto* selftest = app.add_subcommand("selftest", "Run the acceptance suite");

  for (auto* sub : {describe, cost, reparam, forward}) {
    sub->add_option("--config", a.config, "graph config file")->required();
    sub->add_option("--shape", a.shape, "input shape NxCxHxW");
    sub->add_option("--out", a.out, "output file");
  }
  add_format(describe);
  add_format(cost);
  for (auto* sub : {reparam, forward}) {
    sub->add_option("--weights", a.weights, "weight file (default: initialize from --seed)");
    sub->add_option("--seed", a.seed, "seed for weights and inputs (default 0)");
  }
  reparam->add_option("--tol", a.tol, "max abs diff allowed (default 1e-3)")->check(CLI::NonNegativeNumber);
  reparam->add_option("--trials", a.trials, "random inputs to compare (default 2)")->check(CLI::PositiveNumber);
  reparam->add_option("--out-config", a.out_config, "write the fused graph config here");
  forward->add_option("--input", a.input, "input tensor file (weight-file encoding, one rank-4 tensor)");
  selftest->add_option("--seed", a.seed, "suite seed (default 20240)");
  selftest->add_option("--config-dir", a.config_dir, "directory with vajra_{n,s,m,l,x}.cfg");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*describe) return cmd_describe(a);
    if (*cost) return cmd_cost(a);
    if (*reparam) return cmd_reparam_check(a);
    if (*forward) return cmd_forward(a);
    if (*selftest) return cmd_selftest(a);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
