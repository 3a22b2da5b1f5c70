#pragma once

// Text and JSON renderings of a CostReport. Both are derived from the same
// structure.
//
// JSON schema:
//   {
//     "input":  [n, c, h, w],
//     "scale":  "N" | ... | null,
//     "nodes":  [ { "id", "kind", "stage", "output": [n, c, h, w],
//                   "macs", "flops", "params", "non_mac_ops", "conv3x3" } ],
//     "totals": { "macs", "flops", "params", "non_mac_ops", "conv3x3" },
//     "adown_ratio": { "exact": "5/18", "value", "percent_rounded", "percent_truncated" },
//     "reference": [ { "task", "params_m", "gflops", "params_delta_pct", "gflops_delta_pct" } ]
//   }
// All counts are integers. FLOPs = 2 * MACs. "reference" is present only for
// graphs that declare a scale.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vajra/cost.hpp"
#include "vajra/graph.hpp"

namespace vajra {

struct ReferenceTarget {
  std::string_view task;
  double params_m;
  double gflops;
};

/// Published full-model totals (with task heads) per scale: detection,
/// segmentation, pose.
inline std::vector<ReferenceTarget> reference_targets(Scale s) {
  switch (s) {
    case Scale::N: return {{"detect", 3.78, 13.7}, {"segment", 4.03, 17.6}, {"pose", 4.07, 14.8}};
    case Scale::S: return {{"detect", 11.58, 47.9}, {"segment", 12.23, 61.9}, {"pose", 12.07, 49.6}};
    case Scale::M: return {{"detect", 20.29, 94.5}, {"segment", 22.6, 149.9}, {"pose", 21.15, 98.4}};
    case Scale::L: return {{"detect", 24.63, 115.2}, {"segment", 26.93, 170.6}, {"pose", 25.49, 118.9}};
    case Scale::X: return {{"detect", 72.7, 208.3}, {"segment", 75.0, 278.1}, {"pose", 73.56, 226.5}};
  }
  return {};
}

inline double signed_delta_pct(double computed, double reference) {
  return (computed - reference) / reference * 100.0;
}

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string pad(std::string s, std::size_t width, bool right) {
  if (s.size() >= width) return s;
  const std::string fill(width - s.size(), ' ');
  return right ? fill + s : s + fill;
}

}  // namespace detail

/// The ADown-vs-standard ratio line, e.g. "5/18 (27.8% rounded; paper: 27.7%)".
/// The second figure is the percentage truncated to one decimal.
inline std::string adown_ratio_line() {
  const Rational r = adown_cost(64, 128, 32, 32).ratio;
  const double pct = r.value() * 100.0;
  return r.str() + " (" + detail::fmt("%.1f", pct) + "% rounded; paper: " +
         detail::fmt("%.1f", std::floor(pct * 10.0) / 10.0) + "%)";
}

inline std::string render_text(const CostReport& r, std::optional<Scale> scale) {
  struct Row {
    std::string cells[7];
  };
  std::vector<Row> rows;
  rows.push_back({{"id", "kind", "stage", "output", "macs", "params", "conv3x3"}});
  for (const auto& n : r.nodes) {
    rows.push_back({{n.id, std::string(to_string(n.kind)), n.stage.empty() ? "-" : n.stage, n.out.str(),
                     std::to_string(n.cost.macs), std::to_string(n.cost.params),
                     std::to_string(n.cost.conv3x3)}});
  }
  rows.push_back({{"total", "", "", "", std::to_string(r.totals.macs), std::to_string(r.totals.params),
                   std::to_string(r.totals.conv3x3)}});
  std::size_t width[7] = {};
  for (const auto& row : rows) {
    for (int i = 0; i < 7; ++i) width[i] = std::max(width[i], row.cells[i].size());
  }
  std::string out;
  for (const auto& row : rows) {
    std::string line;
    for (int i = 0; i < 7; ++i) {
      if (i) line += "  ";
      line += detail::pad(row.cells[i], width[i], i >= 4);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  }
  const double params_m = static_cast<double>(r.totals.params) / 1e6;
  const double gflops = 2.0 * static_cast<double>(r.totals.macs) / 1e9;
  out += "\ninput " + r.input.str() + "\n";
  out += "params " + detail::fmt("%.3f", params_m) + " M, MACs " +
         detail::fmt("%.3f", static_cast<double>(r.totals.macs) / 1e9) + " G, FLOPs " +
         detail::fmt("%.3f", gflops) + " B (2 x MACs), non-MAC ops " +
         std::to_string(r.totals.non_mac_ops) + "\n";
  out += "adown vs 3x3/s2 conv MACs: " + adown_ratio_line() + "\n";
  if (scale) {
    out += "published reference, scale " + std::string(to_string(*scale)) +
           " (full model with head; backbone+neck computed here):\n";
    for (const auto& t : reference_targets(*scale)) {
      out += "  " + detail::pad(std::string(t.task), 8, false) + " params " +
             detail::fmt("%.2f", t.params_m) + "M (computed " + detail::fmt("%.2f", params_m) + "M, " +
             detail::fmt("%+.1f", signed_delta_pct(params_m, t.params_m)) + "%)  FLOPs " +
             detail::fmt("%.1f", t.gflops) + "B (computed " + detail::fmt("%.1f", gflops) + "B, " +
             detail::fmt("%+.1f", signed_delta_pct(gflops, t.gflops)) + "%)\n";
    }
  }
  return out;
}

inline nlohmann::ordered_json render_json(const CostReport& r, std::optional<Scale> scale) {
  using nlohmann::ordered_json;
  auto shape = [](const Shape4& s) { return ordered_json::array({s.n, s.c, s.h, s.w}); };
  auto counts = [](const Cost& c) {
    ordered_json j;
    j["macs"] = c.macs;
    j["flops"] = 2 * c.macs;
    j["params"] = c.params;
    j["non_mac_ops"] = c.non_mac_ops;
    j["conv3x3"] = c.conv3x3;
    return j;
  };
  ordered_json j;
  j["input"] = shape(r.input);
  j["scale"] = scale ? ordered_json(std::string(to_string(*scale))) : ordered_json(nullptr);
  j["nodes"] = ordered_json::array();
  for (const auto& n : r.nodes) {
    ordered_json e;
    e["id"] = n.id;
    e["kind"] = std::string(to_string(n.kind));
    e["stage"] = n.stage;
    e["output"] = shape(n.out);
    e.update(counts(n.cost));
    j["nodes"].push_back(std::move(e));
  }
  j["totals"] = counts(r.totals);
  const Rational ratio = adown_cost(64, 128, 32, 32).ratio;
  const double pct = ratio.value() * 100.0;
  j["adown_ratio"] = {{"exact", ratio.str()},
                      {"value", ratio.value()},
                      {"percent_rounded", std::round(pct * 10.0) / 10.0},
                      {"percent_truncated", std::floor(pct * 10.0) / 10.0}};
  if (scale) {
    const double params_m = static_cast<double>(r.totals.params) / 1e6;
    const double gflops = 2.0 * static_cast<double>(r.totals.macs) / 1e9;
    j["reference"] = ordered_json::array();
    for (const auto& t : reference_targets(*scale)) {
      j["reference"].push_back({{"task", std::string(t.task)},
                                {"params_m", t.params_m},
                                {"gflops", t.gflops},
                                {"params_delta_pct", signed_delta_pct(params_m, t.params_m)},
                                {"gflops_delta_pct", signed_delta_pct(gflops, t.gflops)}});
    }
  }
  return j;
}

}  // namespace vajra
