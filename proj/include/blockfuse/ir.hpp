#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "blockfuse/box.hpp"
#include "blockfuse/scalar_expr.hpp"

namespace blockfuse {

using NodeId = int;
using GraphPath = std::vector<NodeId>;  // map node ids from the root graph

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

enum class Base { Block, Vector, Scalar };

inline const char* base_name(Base b) {
  switch (b) {
    case Base::Block: return "block";
    case Base::Vector: return "vector";
    case Base::Scalar: return "scalar";
  }
  return "?";
}

/// Type of the value travelling on an edge: a block, vector or scalar,
/// possibly nested in lists (outermost dimension first). A value with no
/// list dimensions fits in local memory; a list must live in global memory.
struct ValueDesc {
  Base base = Base::Block;
  std::vector<std::string> list_dims;

  bool is_list() const { return !list_dims.empty(); }
  ValueDesc pop_dim() const {
    ValueDesc d = *this;
    d.list_dims.erase(d.list_dims.begin());
    return d;
  }
  ValueDesc push_dim(const std::string& dim) const {
    ValueDesc d = *this;
    d.list_dims.insert(d.list_dims.begin(), dim);
    return d;
  }
  bool operator==(const ValueDesc&) const = default;

  static ValueDesc block() { return {Base::Block, {}}; }
  static ValueDesc vector() { return {Base::Vector, {}}; }
  static ValueDesc scalar() { return {Base::Scalar, {}}; }
  static ValueDesc list_of(Base b, std::vector<std::string> dims) { return {b, std::move(dims)}; }
};

inline std::string desc_str(const ValueDesc& d) {
  std::string s = base_name(d.base);
  for (auto it = d.list_dims.rbegin(); it != d.list_dims.rend(); ++it) s = "list(" + *it + ", " + s + ")";
  return s;
}

enum class FuncKind { Add, Mul, RowShift, RowScale, RowSum, Dot, Outer, Elementwise };

inline const char* func_name(FuncKind k) {
  switch (k) {
    case FuncKind::Add: return "add";
    case FuncKind::Mul: return "mul";
    case FuncKind::RowShift: return "row_shift";
    case FuncKind::RowScale: return "row_scale";
    case FuncKind::RowSum: return "row_sum";
    case FuncKind::Dot: return "dot";
    case FuncKind::Outer: return "outer";
    case FuncKind::Elementwise: return "elementwise";
  }
  return "?";
}

inline int func_arity(FuncKind k) {
  switch (k) {
    case FuncKind::Add:
    case FuncKind::Mul:
    case FuncKind::RowShift:
    case FuncKind::RowScale:
    case FuncKind::Dot:
    case FuncKind::Outer: return 2;
    case FuncKind::RowSum:
    case FuncKind::Elementwise: return 1;
  }
  return 0;
}

struct FuncOp {
  FuncKind kind = FuncKind::Elementwise;
  ScalarExpr expr;  // Elementwise only
};

enum class NodeKind { Input, Output, BoundaryIn, BoundaryOut, Func, Map, Reduce, Misc };

inline const char* kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::Input: return "input";
    case NodeKind::Output: return "output";
    case NodeKind::BoundaryIn: return "boundary_in";
    case NodeKind::BoundaryOut: return "boundary_out";
    case NodeKind::Func: return "func";
    case NodeKind::Map: return "map";
    case NodeKind::Reduce: return "reduce";
    case NodeKind::Misc: return "misc";
  }
  return "?";
}

enum class PortMode { Iterate, Broadcast };
enum class MapRange { Full, First, Rest };  // Full = all iterations; First = index 0; Rest = 1..end
enum class OutKind { Collect, Accumulate };
enum class ReduceOp { Add };  // the only reduction in use; field kept for extension

struct BlockGraph;

struct Node {
  NodeId id = -1;
  NodeKind kind = NodeKind::Func;

  // Input / Output / Misc
  std::string name;
  // Input: grid layout of the stored matrix. Empty dim means the axis is not
  // split. `transposed` records that the stored matrix is the transpose of
  // the mathematical operand (weights feeding the dot operator).
  ValueDesc desc;
  std::string rows_dim, cols_dim;
  bool transposed = false;

  // Func
  FuncOp op;

  // Map
  std::string dim;
  MapRange range = MapRange::Full;
  std::vector<PortMode> in_modes;
  box<BlockGraph> inner;

  // Reduce
  ReduceOp reduce_op = ReduceOp::Add;

  // Misc
  int misc_inputs = 1;
  int misc_outputs = 1;
};

struct Endpoint {
  NodeId node = -1;
  int port = 0;
  bool operator==(const Endpoint&) const = default;
  auto operator<=>(const Endpoint&) const = default;
};

struct Edge {
  Endpoint src, dst;
  ValueDesc desc;
  bool buffered = false;
};

/// Hierarchical dataflow graph over blocks. The root graph owns Input/Output
/// nodes and the node-id counter; inner graphs (inside map operators) expose
/// ordered boundary ports instead.
struct BlockGraph {
  std::map<NodeId, Node> nodes;
  std::vector<Edge> edges;
  std::vector<NodeId> boundary_in, boundary_out;
  NodeId next_id = 0;

  NodeId fresh_id() { return next_id++; }

  Node& node(NodeId id) {
    auto it = nodes.find(id);
    if (it == nodes.end()) throw Error("unknown node id " + std::to_string(id));
    return it->second;
  }
  const Node& node(NodeId id) const { return const_cast<BlockGraph*>(this)->node(id); }
  bool has_node(NodeId id) const { return nodes.count(id) > 0; }

  NodeId add(Node n) {
    if (n.id < 0) throw Error("node without id");
    if (nodes.count(n.id)) throw Error("duplicate node id " + std::to_string(n.id));
    NodeId id = n.id;
    nodes.emplace(id, std::move(n));
    return id;
  }

  void connect(NodeId src, int sport, NodeId dst, int dport, ValueDesc desc) {
    Edge e{{src, sport}, {dst, dport}, desc, false};
    e.buffered = desc.is_list() || node(src).kind == NodeKind::Input || node(dst).kind == NodeKind::Output;
    edges.push_back(e);
    sort_edges();
  }

  void erase_edge(const Endpoint& src, const Endpoint& dst) {
    auto it = std::find_if(edges.begin(), edges.end(),
                           [&](const Edge& e) { return e.src == src && e.dst == dst; });
    if (it == edges.end()) throw Error("edge not found");
    edges.erase(it);
  }

  void erase_node(NodeId id) {
    nodes.erase(id);
    edges.erase(std::remove_if(edges.begin(), edges.end(),
                               [&](const Edge& e) { return e.src.node == id || e.dst.node == id; }),
                edges.end());
  }

  const Edge* producer(NodeId node, int port) const {
    for (const auto& e : edges)
      if (e.dst.node == node && e.dst.port == port) return &e;
    return nullptr;
  }

  std::vector<const Edge*> consumers(NodeId node, int port) const {
    std::vector<const Edge*> out;
    for (const auto& e : edges)
      if (e.src.node == node && e.src.port == port) out.push_back(&e);
    return out;
  }

  std::vector<const Edge*> out_edges(NodeId node) const {
    std::vector<const Edge*> out;
    for (const auto& e : edges)
      if (e.src.node == node) out.push_back(&e);
    return out;
  }

  std::vector<const Edge*> in_edges(NodeId node) const {
    std::vector<const Edge*> out;
    for (const auto& e : edges)
      if (e.dst.node == node) out.push_back(&e);
    return out;
  }

  /// Keeps edge order canonical: one producer per destination port makes
  /// (dst, src) a unique key.
  void sort_edges() {
    std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
      if (a.dst != b.dst) return a.dst < b.dst;
      return a.src < b.src;
    });
  }
};

inline bool is_operator(NodeKind k) {
  return k == NodeKind::Func || k == NodeKind::Map || k == NodeKind::Reduce || k == NodeKind::Misc;
}
inline bool is_boundary(NodeKind k) { return k == NodeKind::BoundaryIn || k == NodeKind::BoundaryOut; }
inline bool is_io(NodeKind k) { return k == NodeKind::Input || k == NodeKind::Output; }

inline int map_in_count(const Node& m) { return static_cast<int>(m.in_modes.size()); }
inline int map_out_count(const Node& m) { return static_cast<int>(m.inner->boundary_out.size()); }

/// A map out-port accumulates across iterations when the node feeding the
/// matching boundary port is a reduction over per-iteration (non-list) values.
inline OutKind map_out_kind(const Node& m, int port) {
  const BlockGraph& g = *m.inner;
  NodeId bo = g.boundary_out.at(port);
  const Edge* e = g.producer(bo, 0);
  if (!e) return OutKind::Collect;
  const Node& p = g.node(e->src.node);
  if (p.kind == NodeKind::Reduce && !e->desc.is_list()) {
    const Edge* in = g.producer(p.id, 0);
    if (in && !in->desc.is_list()) return OutKind::Accumulate;
  }
  return OutKind::Collect;
}

inline int node_out_ports(const Node& n) {
  switch (n.kind) {
    case NodeKind::Input:
    case NodeKind::BoundaryIn:
    case NodeKind::Func:
    case NodeKind::Reduce: return 1;
    case NodeKind::Map: return map_out_count(n);
    case NodeKind::Misc: return n.misc_outputs;
    case NodeKind::Output:
    case NodeKind::BoundaryOut: return 0;
  }
  return 0;
}

inline int node_in_ports(const Node& n) {
  switch (n.kind) {
    case NodeKind::Output:
    case NodeKind::BoundaryOut:
    case NodeKind::Reduce: return 1;
    case NodeKind::Func: return func_arity(n.op.kind);
    case NodeKind::Map: return map_in_count(n);
    case NodeKind::Misc: return n.misc_inputs;
    case NodeKind::Input:
    case NodeKind::BoundaryIn: return 0;
  }
  return 0;
}

// --- structural queries ------------------------------------------------------

/// True iff a directed path of one or more edges leads from u to v.
inline bool reachable(const BlockGraph& g, NodeId u, NodeId v) {
  g.node(u);
  g.node(v);
  std::set<NodeId> seen;
  std::vector<NodeId> stack{u};
  while (!stack.empty()) {
    NodeId cur = stack.back();
    stack.pop_back();
    for (const Edge* e : g.out_edges(cur)) {
      NodeId nxt = e->dst.node;
      if (nxt == v) return true;
      if (seen.insert(nxt).second) stack.push_back(nxt);
    }
  }
  return false;
}

/// Kahn's algorithm with ascending-id tie breaking, so the order is a
/// deterministic function of the graph.
inline std::vector<NodeId> topological_order(const BlockGraph& g) {
  std::map<NodeId, int> indeg;
  for (const auto& [id, n] : g.nodes) indeg[id] = 0;
  for (const Edge& e : g.edges) indeg[e.dst.node]++;
  std::priority_queue<NodeId, std::vector<NodeId>, std::greater<>> ready;
  for (const auto& [id, d] : indeg)
    if (d == 0) ready.push(id);
  std::vector<NodeId> order;
  while (!ready.empty()) {
    NodeId id = ready.top();
    ready.pop();
    order.push_back(id);
    for (const Edge* e : g.out_edges(id))
      if (--indeg[e->dst.node] == 0) ready.push(e->dst.node);
  }
  if (order.size() != g.nodes.size()) {
    for (const Edge& e : g.edges)
      if (indeg[e.dst.node] > 0 && indeg[e.src.node] > 0)
        throw Error("cycle detected through edge " + std::to_string(e.src.node) + " -> " +
                    std::to_string(e.dst.node));
    throw Error("cycle detected");
  }
  return order;
}

// --- validation --------------------------------------------------------------

namespace detail {

inline std::string at(const GraphPath& path) {
  std::string s = "[";
  for (size_t i = 0; i < path.size(); ++i) s += (i ? "/" : "") + std::to_string(path[i]);
  return s + "]";
}

inline void validate_graph(const BlockGraph& g, const GraphPath& path, bool is_root,
                           std::vector<std::string>& out) {
  auto fail = [&](const std::string& msg) { out.push_back("graph " + at(path) + ": " + msg); };

  for (const auto& [id, n] : g.nodes) {
    if (n.id != id) fail("node " + std::to_string(id) + ": stored id mismatch");
    if (is_io(n.kind) && !is_root) fail("node " + std::to_string(id) + ": input/output inside inner graph");
    if (is_boundary(n.kind) && is_root) fail("node " + std::to_string(id) + ": boundary node in root graph");
  }
  for (NodeId id : g.boundary_in)
    if (!g.has_node(id) || g.node(id).kind != NodeKind::BoundaryIn)
      fail("boundary_in refers to non boundary node " + std::to_string(id));
  for (NodeId id : g.boundary_out)
    if (!g.has_node(id) || g.node(id).kind != NodeKind::BoundaryOut)
      fail("boundary_out refers to non boundary node " + std::to_string(id));
  for (const auto& [id, n] : g.nodes) {
    if (n.kind == NodeKind::BoundaryIn &&
        std::count(g.boundary_in.begin(), g.boundary_in.end(), id) != 1)
      fail("boundary_in node " + std::to_string(id) + " not listed exactly once");
    if (n.kind == NodeKind::BoundaryOut &&
        std::count(g.boundary_out.begin(), g.boundary_out.end(), id) != 1)
      fail("boundary_out node " + std::to_string(id) + " not listed exactly once");
  }

  for (const Edge& e : g.edges) {
    if (!g.has_node(e.src.node) || !g.has_node(e.dst.node)) {
      fail("edge references unknown node");
      continue;
    }
    const Node& s = g.node(e.src.node);
    const Node& d = g.node(e.dst.node);
    if (e.src.port < 0 || e.src.port >= node_out_ports(s))
      fail("edge from " + std::to_string(s.id) + ": bad source port");
    if (e.dst.port < 0 || e.dst.port >= node_in_ports(d))
      fail("edge into " + std::to_string(d.id) + ": bad destination port");
    bool expect = e.desc.is_list() || s.kind == NodeKind::Input || d.kind == NodeKind::Output;
    if (e.buffered != expect) {
      if (!expect)
        fail("edge " + std::to_string(s.id) + "->" + std::to_string(d.id) +
             ": local value between operators must be unbuffered");
      else if (s.kind == NodeKind::Input || d.kind == NodeKind::Output)
        fail("edge " + std::to_string(s.id) + "->" + std::to_string(d.id) +
             ": input/output edge must be buffered");
      else
        fail("edge " + std::to_string(s.id) + "->" + std::to_string(d.id) +
             ": list-typed edge must be buffered");
    }
  }

  // every in-port fed exactly once, every out-port consumed
  for (const auto& [id, n] : g.nodes) {
    for (int p = 0; p < node_in_ports(n); ++p) {
      int cnt = 0;
      for (const Edge& e : g.edges)
        if (e.dst.node == id && e.dst.port == p) cnt++;
      if (cnt != 1)
        fail("node " + std::to_string(id) + " in-port " + std::to_string(p) + ": " +
             (cnt == 0 ? "dangling (no producer)" : "multiple producers"));
    }
    for (int p = 0; p < node_out_ports(n); ++p) {
      bool used = false;
      for (const Edge& e : g.edges)
        if (e.src.node == id && e.src.port == p) used = true;
      if (!used) fail("node " + std::to_string(id) + " out-port " + std::to_string(p) + ": dangling (no consumer)");
    }
  }

  try {
    topological_order(g);
  } catch (const Error& err) {
    fail(err.what());
  }

  auto in_desc = [&](NodeId id, int port) -> const ValueDesc* {
    const Edge* e = g.producer(id, port);
    return e ? &e->desc : nullptr;
  };

  for (const auto& [id, n] : g.nodes) {
    switch (n.kind) {
      case NodeKind::Func: {
        const ValueDesc* a = in_desc(id, 0);
        const ValueDesc* b = func_arity(n.op.kind) > 1 ? in_desc(id, 1) : nullptr;
        auto outs = g.consumers(id, 0);
        const ValueDesc* r = outs.empty() ? nullptr : &outs.front()->desc;
        auto local = [&](const ValueDesc* d) { return d && !d->is_list(); };
        if ((a && a->is_list()) || (b && b->is_list()) || (r && r->is_list())) {
          fail("func node " + std::to_string(id) + ": list value on a functional port");
          break;
        }
        switch (n.op.kind) {
          case FuncKind::Add:
          case FuncKind::Mul:
            if (local(a) && local(b) && a->base != b->base)
              fail("func node " + std::to_string(id) + ": operand base mismatch");
            if (local(a) && r && r->base != a->base)
              fail("func node " + std::to_string(id) + ": result base mismatch");
            break;
          case FuncKind::RowShift:
          case FuncKind::RowScale:
            if (local(a) && a->base != Base::Block) fail("func node " + std::to_string(id) + ": block expected");
            if (local(b) && b->base != Base::Vector) fail("func node " + std::to_string(id) + ": vector expected");
            if (r && r->base != Base::Block) fail("func node " + std::to_string(id) + ": block result expected");
            break;
          case FuncKind::RowSum:
            if (local(a) && a->base != Base::Block) fail("func node " + std::to_string(id) + ": block expected");
            if (r && r->base != Base::Vector) fail("func node " + std::to_string(id) + ": vector result expected");
            break;
          case FuncKind::Dot:
            if ((local(a) && a->base != Base::Block) || (local(b) && b->base != Base::Block))
              fail("func node " + std::to_string(id) + ": dot expects blocks");
            break;
          case FuncKind::Outer:
            if ((local(a) && a->base != Base::Vector) || (local(b) && b->base != Base::Vector))
              fail("func node " + std::to_string(id) + ": outer expects vectors");
            if (r && r->base != Base::Block) fail("func node " + std::to_string(id) + ": block result expected");
            break;
          case FuncKind::Elementwise:
            if (local(a) && r && r->base != a->base)
              fail("func node " + std::to_string(id) + ": elementwise must preserve base kind");
            break;
        }
        break;
      }
      case NodeKind::Reduce: {
        const ValueDesc* in = in_desc(id, 0);
        if (!in) break;
        if (in->is_list()) {
          if (in->list_dims.size() != 1)
            fail("reduce node " + std::to_string(id) + ": input must be a list over exactly one dimension");
          for (const Edge* e : g.consumers(id, 0))
            if (e->desc != in->pop_dim())
              fail("reduce node " + std::to_string(id) + ": output must drop the folded dimension");
        } else {
          // cross-iteration accumulator form
          if (is_root) fail("reduce node " + std::to_string(id) + ": accumulator outside any map");
          for (const Edge* e : g.consumers(id, 0))
            if (g.node(e->dst.node).kind != NodeKind::BoundaryOut)
              fail("reduce node " + std::to_string(id) +
                   ": accumulated value may only leave through a boundary port");
        }
        break;
      }
      case NodeKind::Map: {
        if (!n.inner) {
          fail("map node " + std::to_string(id) + ": missing inner graph");
          break;
        }
        const BlockGraph& in = *n.inner;
        if (static_cast<int>(n.in_modes.size()) != static_cast<int>(in.boundary_in.size())) {
          fail("map node " + std::to_string(id) + ": port modes do not match inner boundary");
          break;
        }
        for (int p = 0; p < map_in_count(n); ++p) {
          const ValueDesc* d = in_desc(id, p);
          if (!d) continue;
          NodeId bi = in.boundary_in[p];
          ValueDesc inner_expect = *d;
          if (n.in_modes[p] == PortMode::Iterate) {
            if (!d->is_list() || d->list_dims.front() != n.dim) {
              fail("map node " + std::to_string(id) + " port " + std::to_string(p) +
                   ": iterated input must be a list over the map dimension");
              continue;
            }
            inner_expect = d->pop_dim();
          }
          for (const Edge* e : in.consumers(bi, 0))
            if (e->desc != inner_expect)
              fail("map node " + std::to_string(id) + " port " + std::to_string(p) +
                   ": inner boundary type mismatch");
        }
        for (int p = 0; p < map_out_count(n); ++p) {
          NodeId bo = in.boundary_out[p];
          const Edge* pe = in.producer(bo, 0);
          if (!pe) continue;
          ValueDesc expect = map_out_kind(n, p) == OutKind::Collect ? pe->desc.push_dim(n.dim) : pe->desc;
          for (const Edge* e : g.consumers(id, p))
            if (e->desc != expect)
              fail("map node " + std::to_string(id) + " out-port " + std::to_string(p) +
                   ": expected " + desc_str(expect) + ", edge carries " + desc_str(e->desc));
        }
        GraphPath sub = path;
        sub.push_back(id);
        validate_graph(in, sub, false, out);
        break;
      }
      default: break;
    }
  }
}

}  // namespace detail

/// Structural validity check. Returns one message per violation; an empty
/// result means the program satisfies every invariant at every nesting level.
inline std::vector<std::string> validate(const BlockGraph& g) {
  std::vector<std::string> out;
  detail::validate_graph(g, {}, true, out);
  return out;
}

// --- cloning -----------------------------------------------------------------

namespace detail {
inline void renumber(const BlockGraph& src, BlockGraph& dst, NodeId& counter,
                     std::map<NodeId, NodeId>& idmap) {
  for (const auto& [old_id, n] : src.nodes) idmap[old_id] = counter++;
  for (const auto& [old_id, n] : src.nodes) {
    Node copy = n;
    copy.id = idmap[old_id];
    if (n.kind == NodeKind::Map) {
      copy.inner = box<BlockGraph>(BlockGraph{});
      renumber(*n.inner, *copy.inner, counter, idmap);
    }
    dst.nodes.emplace(copy.id, std::move(copy));
  }
  for (const Edge& e : src.edges) {
    Edge c = e;
    c.src.node = idmap[e.src.node];
    c.dst.node = idmap[e.dst.node];
    dst.edges.push_back(c);
  }
  dst.sort_edges();
  for (NodeId id : src.boundary_in) dst.boundary_in.push_back(idmap[id]);
  for (NodeId id : src.boundary_out) dst.boundary_out.push_back(idmap[id]);
}
}  // namespace detail

struct CloneResult {
  BlockGraph graph;
  std::map<NodeId, NodeId> id_map;  // old id -> new id
};

/// Structure-preserving deep copy with densely renumbered node ids. The copy
/// shares no state with the original; the id map relates old ids to new ones.
inline CloneResult deep_clone(const BlockGraph& g) {
  CloneResult r;
  NodeId counter = 0;
  detail::renumber(g, r.graph, counter, r.id_map);
  r.graph.next_id = counter;
  return r;
}

/// Resolves a path of map node ids to the graph nested at that position.
inline BlockGraph& resolve_path(BlockGraph& root, const GraphPath& path) {
  BlockGraph* g = &root;
  for (NodeId id : path) {
    Node& n = g->node(id);
    if (n.kind != NodeKind::Map) throw Error("path step " + std::to_string(id) + " is not a map");
    g = n.inner.get();
  }
  return *g;
}
inline const BlockGraph& resolve_path(const BlockGraph& root, const GraphPath& path) {
  return resolve_path(const_cast<BlockGraph&>(root), path);
}

// --- small builder helpers ----------------------------------------------------

inline NodeId mk_input(BlockGraph& root, NodeId id, std::string name, ValueDesc desc,
                       std::string rows_dim, std::string cols_dim, bool transposed = false) {
  Node n;
  n.id = id;
  n.kind = NodeKind::Input;
  n.name = std::move(name);
  n.desc = std::move(desc);
  n.rows_dim = std::move(rows_dim);
  n.cols_dim = std::move(cols_dim);
  n.transposed = transposed;
  return root.add(std::move(n));
}

inline NodeId mk_output(BlockGraph& root, NodeId id, std::string name) {
  Node n;
  n.id = id;
  n.kind = NodeKind::Output;
  n.name = std::move(name);
  return root.add(std::move(n));
}

inline NodeId mk_func(BlockGraph& g, NodeId id, FuncKind kind, ScalarExpr expr = {}) {
  Node n;
  n.id = id;
  n.kind = NodeKind::Func;
  n.op = FuncOp{kind, std::move(expr)};
  return g.add(std::move(n));
}

inline NodeId mk_reduce(BlockGraph& g, NodeId id) {
  Node n;
  n.id = id;
  n.kind = NodeKind::Reduce;
  return g.add(std::move(n));
}

inline NodeId mk_misc(BlockGraph& g, NodeId id, std::string name, int inputs = 1, int outputs = 1) {
  Node n;
  n.id = id;
  n.kind = NodeKind::Misc;
  n.name = std::move(name);
  n.misc_inputs = inputs;
  n.misc_outputs = outputs;
  return g.add(std::move(n));
}

inline NodeId mk_boundary_in(BlockGraph& g, NodeId id) {
  Node n;
  n.id = id;
  n.kind = NodeKind::BoundaryIn;
  g.add(std::move(n));
  g.boundary_in.push_back(id);
  return id;
}

inline NodeId mk_boundary_out(BlockGraph& g, NodeId id) {
  Node n;
  n.id = id;
  n.kind = NodeKind::BoundaryOut;
  g.add(std::move(n));
  g.boundary_out.push_back(id);
  return id;
}

inline NodeId mk_map(BlockGraph& g, NodeId id, std::string dim, BlockGraph inner,
                     std::vector<PortMode> in_modes) {
  Node n;
  n.id = id;
  n.kind = NodeKind::Map;
  n.dim = std::move(dim);
  n.inner = box<BlockGraph>(std::move(inner));
  n.in_modes = std::move(in_modes);
  return g.add(std::move(n));
}

}  // namespace blockfuse
