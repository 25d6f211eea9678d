#pragma once

#include <sstream>
#include <string>

#include "blockfuse/ir.hpp"

namespace blockfuse {

namespace dot_detail {

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}

inline void emit_graph(const BlockGraph& g, std::ostringstream& os, int depth) {
  std::string pad(static_cast<size_t>(depth) * 2, ' ');
  for (const auto& [id, n] : g.nodes) {
    switch (n.kind) {
      case NodeKind::Input:
        os << pad << "n" << id << " [shape=ellipse, label=\"" << escape(n.name) << "\"];\n";
        break;
      case NodeKind::Output:
        os << pad << "n" << id << " [shape=ellipse, peripheries=2, label=\"" << escape(n.name) << "\"];\n";
        break;
      case NodeKind::BoundaryIn:
      case NodeKind::BoundaryOut:
        os << pad << "n" << id << " [shape=point, width=0.08];\n";
        break;
      case NodeKind::Func: {
        std::string label = func_name(n.op.kind);
        if (n.op.kind == FuncKind::Elementwise) label = n.op.expr.str();
        os << pad << "n" << id << " [shape=box, label=\"" << escape(label) << "\"];\n";
        break;
      }
      case NodeKind::Reduce:
        os << pad << "n" << id << " [shape=circle, label=\"+\"];\n";
        break;
      case NodeKind::Misc:
        os << pad << "n" << id << " [shape=box, style=filled, fillcolor=lightgray, label=\""
           << escape(n.name) << "\"];\n";
        break;
      case NodeKind::Map: {
        std::string range;
        if (n.range == MapRange::First) range = " [0]";
        if (n.range == MapRange::Rest) range = " [1:]";
        // dotted border and the iteration dimension in the corner label
        os << pad << "subgraph cluster_" << id << " {\n";
        os << pad << "  style=dashed; labeljust=r; labelloc=b; label=\"" << escape(n.dim) << range
           << "\";\n";
        os << pad << "  n" << id << " [shape=point, style=invis];\n";  // edge anchor
        emit_graph(*n.inner, os, depth + 1);
        os << pad << "}\n";
        break;
      }
    }
  }
  for (const Edge& e : g.edges) {
    os << pad << "n" << e.src.node << " -> n" << e.dst.node << " [";
    if (e.buffered) os << "color=red, ";
    if (g.node(e.src.node).kind == NodeKind::Map) os << "ltail=cluster_" << e.src.node << ", ";
    if (g.node(e.dst.node).kind == NodeKind::Map) os << "lhead=cluster_" << e.dst.node << ", ";
    os << "dir=forward];\n";
  }
}

}  // namespace dot_detail

/// Graphviz rendering: maps as dashed clusters labeled with their dimension,
/// buffered edges in red, reductions as a circled plus.
inline std::string to_dot(const BlockGraph& g) {
  std::ostringstream os;
  os << "digraph block_program {\n";
  os << "  rankdir=LR;\n";
  os << "  compound=true;\n";
  dot_detail::emit_graph(g, os, 1);
  os << "}\n";
  return os.str();
}

}  // namespace blockfuse
