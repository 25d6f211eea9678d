#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "blockfuse/interpreter.hpp"
#include "blockfuse/ir.hpp"

namespace blockfuse {

/// Buffered edges between operator nodes at any level: the quantity fusion
/// exists to remove. Edges touching inputs, outputs or boundary ports are the
/// unavoidable reads/writes of the program itself and do not count.
inline int internal_buffered_edges(const BlockGraph& g) {
  int count = 0;
  for (const Edge& e : g.edges)
    if (e.buffered && is_operator(g.node(e.src.node).kind) && is_operator(g.node(e.dst.node).kind))
      count++;
  for (const auto& [id, n] : g.nodes)
    if (n.kind == NodeKind::Map) count += internal_buffered_edges(*n.inner);
  return count;
}

/// All buffered edges, including those incident with inputs and outputs.
/// Fusion rules 1-3 strictly decrease this total.
inline int total_buffered_edges(const BlockGraph& g) {
  int count = 0;
  for (const Edge& e : g.edges)
    if (e.buffered) count++;
  for (const auto& [id, n] : g.nodes)
    if (n.kind == NodeKind::Map) count += total_buffered_edges(*n.inner);
  return count;
}

inline int total_node_count(const BlockGraph& g) {
  int count = static_cast<int>(g.nodes.size());
  for (const auto& [id, n] : g.nodes)
    if (n.kind == NodeKind::Map) count += total_node_count(*n.inner);
  return count;
}

/// Top-level operator nodes; each launches one kernel under the naive
/// execution model.
inline int kernel_count(const BlockGraph& g) {
  int count = 0;
  for (const auto& [id, n] : g.nodes)
    if (is_operator(n.kind)) count++;
  return count;
}

struct TrafficModel {
  int element_bytes = 8;
};

namespace metrics_detail {

// Byte size of the value on an edge under a binding, assuming every block
// inherits its shape from the flows feeding it. Shapes are propagated the
// same way the interpreter computes values.
struct ShapeCtx {
  const DimBinding& binding;
};

inline Shape edge_shape(const BlockGraph& g, const Edge& e, std::map<std::pair<NodeId, int>, Shape>& out,
                        const ShapeCtx& ctx);

inline std::vector<Shape> infer_graph(const BlockGraph& g, const std::vector<Shape>& boundary,
                                      const ShapeCtx& ctx,
                                      std::map<const Edge*, Shape>* record,
                                      long long multiplicity,
                                      std::map<const Edge*, long long>* mults) {
  std::map<std::pair<NodeId, int>, Shape> shapes;
  auto input_shape = [&](NodeId id, int port) {
    const Edge* e = g.producer(id, port);
    if (!e) throw Error("shape inference: missing producer");
    return shapes.at({e->src.node, e->src.port});
  };
  for (NodeId id : topological_order(g)) {
    const Node& n = g.node(id);
    switch (n.kind) {
      case NodeKind::Input: {
        Shape s;
        s.base = Base::Block;
        s.rows = n.rows_dim.empty() ? ctx.binding.free_len : ctx.binding.block_len(n.rows_dim);
        s.cols = n.cols_dim.empty() ? ctx.binding.free_len : ctx.binding.block_len(n.cols_dim);
        if (!n.cols_dim.empty()) s = s.push_list(n.cols_dim, ctx.binding.count(n.cols_dim));
        if (!n.rows_dim.empty()) s = s.push_list(n.rows_dim, ctx.binding.count(n.rows_dim));
        shapes[{id, 0}] = s;
        break;
      }
      case NodeKind::BoundaryIn:
        shapes[{id, 0}] = boundary.at(
            std::find(g.boundary_in.begin(), g.boundary_in.end(), id) - g.boundary_in.begin());
        break;
      case NodeKind::Func: {
        std::vector<Shape> in;
        for (int p = 0; p < func_arity(n.op.kind); ++p) in.push_back(input_shape(id, p));
        shapes[{id, 0}] = detail::func_shape(n, in);
        break;
      }
      case NodeKind::Reduce: {
        Shape in = input_shape(id, 0);
        shapes[{id, 0}] = in.lists.empty() ? in : in.pop_list();
        break;
      }
      case NodeKind::Map: {
        std::vector<Shape> inner_b;
        for (int p = 0; p < map_in_count(n); ++p) {
          Shape s = input_shape(id, p);
          inner_b.push_back(n.in_modes[p] == PortMode::Iterate ? s.pop_list() : s);
        }
        int extent = ctx.binding.count(n.dim);
        if (n.range == MapRange::First) extent = 1;
        if (n.range == MapRange::Rest) extent -= 1;
        std::vector<Shape> outs = infer_graph(*n.inner, inner_b, ctx, record,
                                              multiplicity * std::max(extent, 1), mults);
        for (int p = 0; p < map_out_count(n); ++p)
          shapes[{id, p}] =
              map_out_kind(n, p) == OutKind::Collect ? outs[p].push_list(n.dim, extent) : outs[p];
        break;
      }
      case NodeKind::Misc: {
        // opaque: assume it preserves its first input's shape per output
        Shape in = input_shape(id, 0);
        for (int p = 0; p < n.misc_outputs; ++p) shapes[{id, p}] = in;
        break;
      }
      case NodeKind::Output:
      case NodeKind::BoundaryOut: break;
    }
  }
  if (record)
    for (const Edge& e : g.edges) {
      auto it = shapes.find({e.src.node, e.src.port});
      if (it != shapes.end()) {
        (*record)[&e] = it->second;
        (*mults)[&e] = multiplicity;
      }
    }
  std::vector<Shape> out;
  for (NodeId bo : g.boundary_out) {
    const Edge* e = g.producer(bo, 0);
    out.push_back(shapes.at({e->src.node, e->src.port}));
  }
  return out;
}

}  // namespace metrics_detail

/// Modeled global-memory traffic: every buffered producer port is written
/// once by its producer (inputs are already resident) and read once per
/// consumer. Unbuffered values never leave local memory and cost nothing.
inline std::uint64_t traffic_bytes(const BlockGraph& g, const DimBinding& binding,
                                   const TrafficModel& model = {}) {
  metrics_detail::ShapeCtx ctx{binding};
  std::map<const Edge*, Shape> shapes;
  std::map<const Edge*, long long> mults;
  metrics_detail::infer_graph(g, {}, ctx, &shapes, 1, &mults);

  // group buffered edges by producer port, at every level
  struct PortUse {
    std::uint64_t bytes = 0;
    int reads = 0;
    bool writes = false;
  };
  std::map<std::pair<const void*, std::pair<NodeId, int>>, PortUse> ports;

  std::function<void(const BlockGraph&)> walk = [&](const BlockGraph& gr) {
    for (const Edge& e : gr.edges) {
      if (!e.buffered) continue;
      const Node& s = gr.node(e.src.node);
      const Node& d = gr.node(e.dst.node);
      if (is_boundary(s.kind) || is_boundary(d.kind)) continue;  // accounted one level up
      auto key = std::make_pair(static_cast<const void*>(&gr), std::make_pair(e.src.node, e.src.port));
      PortUse& u = ports[key];
      auto it = shapes.find(&e);
      if (it != shapes.end())
        u.bytes = static_cast<std::uint64_t>(it->second.elems()) * mults[&e] * model.element_bytes;
      if (is_operator(s.kind)) u.writes = true;
      if (is_operator(d.kind)) u.reads++;
    }
    for (const auto& [id, n] : gr.nodes)
      if (n.kind == NodeKind::Map) walk(*n.inner);
  };
  walk(g);

  std::uint64_t total = 0;
  for (const auto& [key, u] : ports) total += u.bytes * (u.reads + (u.writes ? 1 : 0));
  return total;
}

struct MetricsReport {
  int internal_buffered = 0;
  int kernels = 0;
  std::uint64_t traffic = 0;
};

inline MetricsReport metrics_report(const BlockGraph& g, const DimBinding& binding,
                                    const TrafficModel& model = {}) {
  return {internal_buffered_edges(g), kernel_count(g), traffic_bytes(g, binding, model)};
}

}  // namespace blockfuse
