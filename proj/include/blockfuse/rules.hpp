#pragma once

#include <algorithm>
#include <deque>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "blockfuse/ir.hpp"

namespace blockfuse {

enum class RuleId {
  R1_consecutive_maps,
  R2_sibling_maps,
  R3_map_reduction,
  R4_scale_dot,
  R5_shift_dot,
  R6_extend,
  R7_peel,
  R8_duplicate_scale,
  R9_elementwise,
};

inline const char* rule_name(RuleId r) {
  switch (r) {
    case RuleId::R1_consecutive_maps: return "R1_consecutive_maps";
    case RuleId::R2_sibling_maps: return "R2_sibling_maps";
    case RuleId::R3_map_reduction: return "R3_map_reduction";
    case RuleId::R4_scale_dot: return "R4_scale_dot";
    case RuleId::R5_shift_dot: return "R5_shift_dot";
    case RuleId::R6_extend: return "R6_extend";
    case RuleId::R7_peel: return "R7_peel";
    case RuleId::R8_duplicate_scale: return "R8_duplicate_scale";
    case RuleId::R9_elementwise: return "R9_elementwise";
  }
  return "?";
}

/// A located rule application: which rule, which graph of the hierarchy, and
/// the nodes it binds there. Matches go stale if the program changes under
/// them; apply() verifies the pattern still holds.
struct RuleMatch {
  RuleId rule;
  GraphPath path;
  std::vector<NodeId> bound;
  std::string dim;
  char variant = 0;  // R6/R7: 'a', 'b' or 'c'

  std::string str() const {
    std::ostringstream os;
    os << rule_name(rule) << " at " << detail::at(path) << " nodes=[";
    for (size_t i = 0; i < bound.size(); ++i) os << (i ? "," : "") << bound[i];
    os << "]";
    if (!dim.empty()) os << " dim=" << dim;
    if (variant) os << " variant=" << variant;
    return os.str();
  }
};

namespace pat {

inline bool reachable_excluding_direct(const BlockGraph& g, NodeId u, NodeId v) {
  std::set<NodeId> seen;
  std::vector<NodeId> stack;
  for (const Edge* e : g.out_edges(u))
    if (e->dst.node != v && seen.insert(e->dst.node).second) stack.push_back(e->dst.node);
  while (!stack.empty()) {
    NodeId cur = stack.back();
    stack.pop_back();
    if (cur == v) return true;
    for (const Edge* e : g.out_edges(cur))
      if (seen.insert(e->dst.node).second) stack.push_back(e->dst.node);
  }
  return false;
}

/// A map whose inner graph is exactly one row_scale / row_shift, iterating a
/// list of blocks and broadcasting the vector operand.
inline bool is_vector_op_map(const BlockGraph& g, NodeId id, FuncKind kind) {
  const Node& n = g.node(id);
  if (n.kind != NodeKind::Map || n.range != MapRange::Full || !n.inner) return false;
  const BlockGraph& in = *n.inner;
  if (in.boundary_in.size() != 2 || in.boundary_out.size() != 1 || in.nodes.size() != 4) return false;
  if (n.in_modes != std::vector<PortMode>{PortMode::Iterate, PortMode::Broadcast}) return false;
  NodeId f = -1;
  for (const auto& [nid, nn] : in.nodes)
    if (nn.kind == NodeKind::Func) {
      if (nn.op.kind != kind) return false;
      f = nid;
    }
  if (f < 0) return false;
  const Edge* a = in.producer(f, 0);
  const Edge* b = in.producer(f, 1);
  if (!a || !b) return false;
  if (a->src.node != in.boundary_in[0] || b->src.node != in.boundary_in[1]) return false;
  auto cons = in.consumers(f, 0);
  return cons.size() == 1 && cons[0]->dst.node == in.boundary_out[0];
}

struct MatmulFrag {
  NodeId outer;        // map over the free dimension
  NodeId contraction;  // inner map over the contracted dimension
  NodeId reduce;
  int lhs_port = -1;  // outer-map port whose value reaches dot's first operand
  int rhs_port = -1;
  std::string contraction_dim;
};

/// Matches the canonical lowering of a matrix multiplication:
/// map_f{ map_c{ dot } -> reduce } with the row operand broadcast in.
inline std::optional<MatmulFrag> matmul_fragment(const BlockGraph& g, NodeId id) {
  const Node& f = g.node(id);
  if (f.kind != NodeKind::Map || f.range != MapRange::Full || !f.inner) return std::nullopt;
  const BlockGraph& in = *f.inner;
  if (in.boundary_in.size() != 2 || in.boundary_out.size() != 1 || in.nodes.size() != 5) return std::nullopt;
  NodeId cmap = -1, red = -1;
  for (const auto& [nid, nn] : in.nodes) {
    if (nn.kind == NodeKind::Map) cmap = nid;
    if (nn.kind == NodeKind::Reduce) red = nid;
  }
  if (cmap < 0 || red < 0) return std::nullopt;
  const Node& c = in.node(cmap);
  if (c.dim == f.dim || c.range != MapRange::Full) return std::nullopt;
  if (c.in_modes != std::vector<PortMode>{PortMode::Iterate, PortMode::Iterate}) return std::nullopt;
  const BlockGraph& ci = *c.inner;
  if (ci.boundary_in.size() != 2 || ci.boundary_out.size() != 1 || ci.nodes.size() != 4) return std::nullopt;
  NodeId dot = -1;
  for (const auto& [nid, nn] : ci.nodes)
    if (nn.kind == NodeKind::Func) {
      if (nn.op.kind != FuncKind::Dot) return std::nullopt;
      dot = nid;
    }
  if (dot < 0) return std::nullopt;
  const Edge* d0 = ci.producer(dot, 0);
  const Edge* d1 = ci.producer(dot, 1);
  if (!d0 || !d1) return std::nullopt;
  int lhs_cport = -1;
  if (d0->src.node == ci.boundary_in[0] && d1->src.node == ci.boundary_in[1])
    lhs_cport = 0;
  else if (d0->src.node == ci.boundary_in[1] && d1->src.node == ci.boundary_in[0])
    lhs_cport = 1;
  else
    return std::nullopt;
  // reduce folds the contraction map's collected output and feeds the boundary
  const Edge* rprod = in.producer(red, 0);
  if (!rprod || rprod->src.node != cmap || !rprod->desc.is_list()) return std::nullopt;
  if (in.consumers(cmap, 0).size() != 1) return std::nullopt;
  auto rc = in.consumers(red, 0);
  if (rc.size() != 1 || rc[0]->dst.node != in.boundary_out[0]) return std::nullopt;

  MatmulFrag out;
  out.outer = id;
  out.contraction = cmap;
  out.reduce = red;
  out.contraction_dim = c.dim;
  // Map the contraction map's zip ports back to the outer map's boundary.
  auto outer_port_of = [&](int cport) -> int {
    const Edge* e = in.producer(cmap, cport);
    if (!e) return -1;
    for (size_t p = 0; p < in.boundary_in.size(); ++p)
      if (in.boundary_in[p] == e->src.node) return static_cast<int>(p);
    return -1;
  };
  out.lhs_port = outer_port_of(lhs_cport);
  out.rhs_port = outer_port_of(1 - lhs_cport);
  if (out.lhs_port < 0 || out.rhs_port < 0) return std::nullopt;
  return out;
}

}  // namespace pat

// --- rule 1: fuse consecutive maps ---------------------------------------------

inline std::optional<RuleMatch> match_consecutive_maps(const BlockGraph& program,
                                                       const GraphPath& path = {},
                                                       const std::optional<std::string>& dim = {}) {
  const BlockGraph& g = resolve_path(program, path);
  std::optional<RuleMatch> best;
  auto key = [](const RuleMatch& m) { return std::minmax(m.bound[0], m.bound[1]); };
  for (const auto& [uid, u] : g.nodes) {
    if (u.kind != NodeKind::Map || u.range != MapRange::Full) continue;
    if (dim && u.dim != *dim) continue;
    std::set<NodeId> targets;
    for (const Edge* e : g.out_edges(uid)) targets.insert(e->dst.node);
    for (NodeId vid : targets) {
      if (vid == uid || !g.has_node(vid)) continue;
      const Node& v = g.node(vid);
      if (v.kind != NodeKind::Map || v.range != MapRange::Full || v.dim != u.dim) continue;
      bool ok = true;
      for (const Edge* e : g.out_edges(uid)) {
        if (e->dst.node != vid) continue;
        if (map_out_kind(u, e->src.port) != OutKind::Collect ||
            v.in_modes[e->dst.port] != PortMode::Iterate) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      if (pat::reachable_excluding_direct(g, uid, vid)) continue;  // would create a loop
      RuleMatch m{RuleId::R1_consecutive_maps, path, {uid, vid}, u.dim};
      if (!best || key(m) < key(*best)) best = m;
    }
  }
  return best;
}

// --- rule 2: fuse sibling maps --------------------------------------------------

inline std::optional<RuleMatch> match_sibling_maps(const BlockGraph& program,
                                                   const GraphPath& path = {},
                                                   const std::optional<std::string>& dim = {}) {
  const BlockGraph& g = resolve_path(program, path);
  std::optional<RuleMatch> best;
  auto key = [](const RuleMatch& m) { return std::minmax(m.bound[0], m.bound[1]); };
  std::vector<NodeId> maps;
  for (const auto& [id, n] : g.nodes)
    if (n.kind == NodeKind::Map && n.range == MapRange::Full && (!dim || n.dim == *dim))
      maps.push_back(id);
  for (size_t i = 0; i < maps.size(); ++i) {
    for (size_t j = i + 1; j < maps.size(); ++j) {
      const Node& u = g.node(maps[i]);
      const Node& v = g.node(maps[j]);
      if (u.dim != v.dim) continue;
      // a shared parent: the same producer port feeding both maps in the same mode
      bool shared = false;
      for (const Edge* eu : g.in_edges(u.id)) {
        for (const Edge* ev : g.in_edges(v.id)) {
          if (eu->src == ev->src && u.in_modes[eu->dst.port] == v.in_modes[ev->dst.port]) {
            shared = true;
            break;
          }
        }
        if (shared) break;
      }
      if (!shared) continue;
      bool direct = false;
      for (const Edge* e : g.out_edges(u.id))
        if (e->dst.node == v.id) direct = true;
      for (const Edge* e : g.out_edges(v.id))
        if (e->dst.node == u.id) direct = true;
      if (direct) continue;  // rule 1's territory
      if (reachable(g, u.id, v.id) || reachable(g, v.id, u.id)) continue;
      RuleMatch m{RuleId::R2_sibling_maps, path, {u.id, v.id}, u.dim};
      if (!best || key(m) < key(*best)) best = m;
    }
  }
  return best;
}

// --- rule 3: fuse map with reduction --------------------------------------------

inline std::optional<RuleMatch> match_map_reduction(const BlockGraph& program,
                                                    const GraphPath& path = {}) {
  const BlockGraph& g = resolve_path(program, path);
  std::optional<RuleMatch> best;
  for (const auto& [rid, r] : g.nodes) {
    if (r.kind != NodeKind::Reduce) continue;
    const Edge* pe = g.producer(rid, 0);
    if (!pe || !pe->desc.is_list()) continue;
    const Node& u = g.node(pe->src.node);
    if (u.kind != NodeKind::Map || u.range != MapRange::Full) continue;
    if (pe->desc.list_dims.size() != 1 || pe->desc.list_dims[0] != u.dim) continue;
    if (g.consumers(u.id, pe->src.port).size() != 1) continue;  // the list must die here
    RuleMatch m{RuleId::R3_map_reduction, path, {u.id, rid}, u.dim};
    if (!best || std::make_pair(m.bound[0], m.bound[1]) < std::make_pair(best->bound[0], best->bound[1]))
      best = m;
  }
  return best;
}

// --- rule 4 / rule 5: swap scale / shift with dot --------------------------------

namespace pat {
inline std::optional<RuleMatch> match_vector_op_dot(const BlockGraph& program, const GraphPath& path,
                                                    FuncKind kind, RuleId rule) {
  const BlockGraph& g = resolve_path(program, path);
  std::optional<RuleMatch> best;
  for (const auto& [sid, s] : g.nodes) {
    if (!is_vector_op_map(g, sid, kind)) continue;
    auto cons = g.consumers(sid, 0);
    if (cons.size() != 1) continue;  // its output must no longer be needed elsewhere
    NodeId fid = cons[0]->dst.node;
    auto frag = matmul_fragment(g, fid);
    if (!frag) continue;
    if (cons[0]->dst.port != frag->lhs_port) continue;
    const Node& f = g.node(fid);
    if (f.in_modes[frag->lhs_port] != PortMode::Broadcast) continue;
    if (frag->contraction_dim != s.dim) continue;
    RuleMatch m{rule, path, {sid, fid, frag->contraction, frag->reduce}, s.dim};
    if (!best || std::make_pair(m.bound[0], m.bound[1]) < std::make_pair(best->bound[0], best->bound[1]))
      best = m;
  }
  return best;
}
}  // namespace pat

inline std::optional<RuleMatch> match_scale_dot(const BlockGraph& program, const GraphPath& path = {}) {
  return pat::match_vector_op_dot(program, path, FuncKind::RowScale, RuleId::R4_scale_dot);
}

inline std::optional<RuleMatch> match_shift_dot(const BlockGraph& program, const GraphPath& path = {}) {
  return pat::match_vector_op_dot(program, path, FuncKind::RowShift, RuleId::R5_shift_dot);
}

// --- rule 8: duplicate mapped scale ----------------------------------------------

inline std::optional<RuleMatch> match_duplicate_scale(const BlockGraph& program,
                                                      const GraphPath& path = {}) {
  const BlockGraph& g = resolve_path(program, path);
  std::optional<RuleMatch> best;
  for (const auto& [sid, s] : g.nodes) {
    if (!pat::is_vector_op_map(g, sid, FuncKind::RowScale)) continue;
    auto cons = g.consumers(sid, 0);
    if (cons.size() != 2) continue;  // exactly two downstream multiplications, as drawn
    bool ok = true;
    std::vector<NodeId> frags;
    for (const Edge* e : cons) {
      auto frag = pat::matmul_fragment(g, e->dst.node);
      if (!frag || e->dst.port != frag->lhs_port || frag->contraction_dim != s.dim ||
          g.node(e->dst.node).in_modes[frag->lhs_port] != PortMode::Broadcast) {
        ok = false;
        break;
      }
      frags.push_back(e->dst.node);
    }
    if (!ok || frags[0] == frags[1]) continue;
    std::sort(frags.begin(), frags.end());
    RuleMatch m{RuleId::R8_duplicate_scale, path, {sid, frags[0], frags[1]}, s.dim};
    if (!best || m.bound < best->bound) best = m;
  }
  return best;
}

// --- rule 9: fuse consecutive elementwise -----------------------------------------

inline std::optional<RuleMatch> match_elementwise(const BlockGraph& program,
                                                  const GraphPath& path = {}) {
  const BlockGraph& g = resolve_path(program, path);
  std::optional<RuleMatch> best;
  for (const auto& [uid, u] : g.nodes) {
    if (u.kind != NodeKind::Func || u.op.kind != FuncKind::Elementwise) continue;
    auto cons = g.consumers(uid, 0);
    if (cons.size() != 1) continue;
    const Node& v = g.node(cons[0]->dst.node);
    if (v.kind != NodeKind::Func || v.op.kind != FuncKind::Elementwise) continue;
    RuleMatch m{RuleId::R9_elementwise, path, {uid, v.id}, ""};
    if (!best || std::make_pair(m.bound[0], m.bound[1]) < std::make_pair(best->bound[0], best->bound[1]))
      best = m;
  }
  return best;
}

// --- rules 6 & 7: map extension / peeling -----------------------------------------

namespace pat {

struct ExtendSite {
  GraphPath path;
  NodeId x = -1, y = -1, inner_y = -1;
  char variant = 0;
};

/// Preconditions shared by extension and peeling: the map must be the sole
/// producer of the graph's outputs, and its iterated inputs must come straight
/// from the graph's inputs so they survive the restructuring.
inline bool extendable(const BlockGraph& g, const Node& x, bool is_root) {
  if (x.kind != NodeKind::Map || x.range != MapRange::Full) return false;
  for (const auto& [id, n] : g.nodes)
    if (n.kind == NodeKind::Misc) return false;  // opaque operators are never replicated
  for (const Edge* e : g.out_edges(x.id)) {
    NodeKind k = g.node(e->dst.node).kind;
    if (k != NodeKind::Output && k != NodeKind::BoundaryOut) return false;
  }
  for (const auto& [id, n] : g.nodes) {
    if ((is_root && n.kind == NodeKind::Output) || (!is_root && n.kind == NodeKind::BoundaryOut)) {
      const Edge* e = g.producer(id, 0);
      if (!e || e->src.node != x.id) return false;
    }
  }
  for (int p = 0; p < map_in_count(x); ++p) {
    if (x.in_modes[p] != PortMode::Iterate) continue;
    const Edge* e = g.producer(x.id, p);
    if (!e) return false;
    NodeKind k = g.node(e->src.node).kind;
    if (k != NodeKind::Input && k != NodeKind::BoundaryIn) return false;
  }
  // something else must exist to pull in
  int ops = 0;
  for (const auto& [id, n] : g.nodes)
    if (is_operator(n.kind)) ops++;
  return ops >= 2;
}

/// The inner map of X that consumes broadcast port p by iteration, if any.
inline NodeId inner_map_on_port(const Node& x, int p) {
  const BlockGraph& in = *x.inner;
  NodeId bi = in.boundary_in[p];
  for (const Edge* e : in.consumers(bi, 0)) {
    const Node& m = in.node(e->dst.node);
    if (m.kind == NodeKind::Map && m.in_modes[e->dst.port] == PortMode::Iterate) return m.id;
  }
  return -1;
}

inline std::vector<ExtendSite> extend_sites(const BlockGraph& g, const GraphPath& path, bool is_root,
                                            bool whole_graph = true) {
  std::vector<ExtendSite> found;
  std::vector<NodeId> maps;
  for (const auto& [id, n] : g.nodes)
    if (n.kind == NodeKind::Map) maps.push_back(id);

  for (char variant : {'a', 'b', 'c'}) {
    std::vector<ExtendSite> stage;
    for (NodeId xid : maps) {
      const Node& x = g.node(xid);
      if (x.range != MapRange::Full) continue;
      if (whole_graph && !extendable(g, x, is_root)) continue;
      for (int p = 0; p < map_in_count(x); ++p) {
        if (x.in_modes[p] != PortMode::Broadcast) continue;
        NodeId my = inner_map_on_port(x, p);
        if (my < 0) continue;
        const std::string& ydim = x.inner->node(my).dim;
        if (ydim == x.dim) continue;
        const Edge* pe = g.producer(xid, p);
        if (!pe) continue;
        const Node& src = g.node(pe->src.node);
        if (variant == 'a') {
          // the outer map feeds the port whose list the inner map iterates
          if (src.kind == NodeKind::Map && src.dim == ydim)
            stage.push_back({path, xid, src.id, my, 'a'});
        } else {
          bool src_is_input = src.kind == NodeKind::Input || src.kind == NodeKind::BoundaryIn;
          if (variant == 'b' && !src_is_input) continue;
          if (variant == 'c' && (src_is_input || !is_operator(src.kind))) continue;
          for (NodeId yid : maps) {
            if (yid == xid) continue;
            const Node& y = g.node(yid);
            if (y.dim != ydim) continue;
            bool consumes = false;
            for (const Edge* e : g.in_edges(yid))
              if (e->src == pe->src) consumes = true;
            if (consumes) stage.push_back({path, xid, yid, my, variant});
          }
        }
      }
    }
    std::sort(stage.begin(), stage.end(), [](const ExtendSite& a, const ExtendSite& b) {
      return std::tie(a.x, a.y, a.inner_y) < std::tie(b.x, b.y, b.inner_y);
    });
    found.insert(found.end(), stage.begin(), stage.end());
  }
  return found;
}

inline std::vector<std::pair<GraphPath, const BlockGraph*>> bfs_graphs(const BlockGraph& program) {
  std::vector<std::pair<GraphPath, const BlockGraph*>> out;
  std::deque<std::pair<GraphPath, const BlockGraph*>> queue{{GraphPath{}, &program}};
  while (!queue.empty()) {
    auto [path, g] = queue.front();
    queue.pop_front();
    out.push_back({path, g});
    for (const auto& [id, n] : g->nodes)
      if (n.kind == NodeKind::Map) {
        GraphPath sub = path;
        sub.push_back(id);
        queue.push_back({sub, n.inner.get()});
      }
  }
  return out;
}

}  // namespace pat

/// Searches the whole hierarchy breadth-first for the first chance to extend a
/// map over its surrounding graph.
inline std::optional<RuleMatch> match_extend(const BlockGraph& program) {
  for (const auto& [path, g] : pat::bfs_graphs(program)) {
    auto sites = pat::extend_sites(*g, path, path.empty());
    if (!sites.empty()) {
      const auto& s = sites.front();
      RuleMatch m{RuleId::R6_extend, s.path, {s.x, s.y, s.inner_y},
                  g->node(s.x).dim, s.variant};
      return m;
    }
  }
  return std::nullopt;
}

/// Peeling matches the same shapes as extension but is restricted to maps
/// whose outputs all accumulate, so the split halves recombine with add.
/// Unlike extension it is a local rewrite, so the map's surroundings are free.
inline std::optional<RuleMatch> match_peel(const BlockGraph& program, const GraphPath& path = {}) {
  const BlockGraph& g = resolve_path(program, path);
  auto sites = pat::extend_sites(g, path, path.empty(), false);
  for (const auto& s : sites) {
    const Node& x = g.node(s.x);
    bool all_acc = map_out_count(x) > 0;
    for (int p = 0; p < map_out_count(x); ++p)
      if (map_out_kind(x, p) != OutKind::Accumulate) all_acc = false;
    if (!all_acc) continue;
    return RuleMatch{RuleId::R7_peel, s.path, {s.x, s.y, s.inner_y}, x.dim, s.variant};
  }
  return std::nullopt;
}

// --- applies ---------------------------------------------------------------------

namespace detail {

inline void stale(const std::string& why) { throw Error("stale match: " + why); }

inline BlockGraph clone_graph_fresh(BlockGraph& root, const BlockGraph& src) {
  BlockGraph dst;
  std::map<NodeId, NodeId> ids;
  for (const auto& [oid, on] : src.nodes) ids[oid] = root.fresh_id();
  for (const auto& [oid, on] : src.nodes) {
    Node c = on;
    c.id = ids[oid];
    if (on.kind == NodeKind::Map) c.inner = box<BlockGraph>(clone_graph_fresh(root, *on.inner));
    dst.nodes.emplace(c.id, std::move(c));
  }
  for (const Edge& e : src.edges) {
    Edge c = e;
    c.src.node = ids[e.src.node];
    c.dst.node = ids[e.dst.node];
    dst.edges.push_back(c);
  }
  dst.sort_edges();
  for (NodeId id : src.boundary_in) dst.boundary_in.push_back(ids[id]);
  for (NodeId id : src.boundary_out) dst.boundary_out.push_back(ids[id]);
  return dst;
}

/// Clones a node (with any nested graphs) assigning fresh ids from the root.
inline Node clone_fresh(BlockGraph& root, const Node& n) {
  Node copy = n;
  copy.id = root.fresh_id();
  if (n.kind == NodeKind::Map) copy.inner = box<BlockGraph>(clone_graph_fresh(root, *n.inner));
  return copy;
}

struct SavedEdge {
  Endpoint src, dst;
  ValueDesc desc;
};

/// Shared engine for rules 1 and 2: replaces maps U and V with one fused map.
/// Direct U->V edges become ordinary edges in the merged inner graph; inputs
/// read from the same source in the same mode collapse into one port.
inline void merge_maps(BlockGraph& root, const GraphPath& path, NodeId uid, NodeId vid,
                       bool expect_direct) {
  BlockGraph& g = resolve_path(root, path);
  if (!g.has_node(uid) || !g.has_node(vid)) stale("fused map operand vanished");
  Node u = g.node(uid);
  Node v = g.node(vid);
  if (u.kind != NodeKind::Map || v.kind != NodeKind::Map || u.dim != v.dim)
    stale("operands are no longer same-dimension maps");

  std::vector<SavedEdge> u_in, v_in;
  for (int p = 0; p < map_in_count(u); ++p) {
    const Edge* e = g.producer(uid, p);
    u_in.push_back({e->src, e->dst, e->desc});
  }
  for (int p = 0; p < map_in_count(v); ++p) {
    const Edge* e = g.producer(vid, p);
    v_in.push_back({e->src, e->dst, e->desc});
  }
  std::vector<std::vector<SavedEdge>> u_out(node_out_ports(u)), v_out(node_out_ports(v));
  for (int p = 0; p < node_out_ports(u); ++p)
    for (const Edge* e : g.consumers(uid, p)) u_out[p].push_back({e->src, e->dst, e->desc});
  for (int p = 0; p < node_out_ports(v); ++p)
    for (const Edge* e : g.consumers(vid, p)) v_out[p].push_back({e->src, e->dst, e->desc});

  std::vector<std::pair<int, int>> direct;  // (u out port, v in port)
  for (int p = 0; p < node_out_ports(u); ++p)
    for (const SavedEdge& e : u_out[p])
      if (e.dst.node == vid) direct.push_back({p, e.dst.port});
  if (expect_direct && direct.empty()) stale("no direct edge between the maps");
  if (!expect_direct && !direct.empty()) stale("sibling maps became connected");

  // fused inner graph = union of the two inner graphs
  BlockGraph ni;
  for (auto& [id, n] : u.inner->nodes) ni.nodes.emplace(id, std::move(n));
  for (auto& [id, n] : v.inner->nodes) ni.nodes.emplace(id, std::move(n));
  ni.edges = u.inner->edges;
  ni.edges.insert(ni.edges.end(), v.inner->edges.begin(), v.inner->edges.end());

  // stitch each internalized edge: producer inside U's part now feeds V's consumers
  std::set<int> stitched_v_ports, internalized_u_ports;
  for (auto [up, vq] : direct) {
    NodeId bo = u.inner->boundary_out[up];
    Endpoint prod = ni.producer(bo, 0)->src;
    NodeId bi = v.inner->boundary_in[vq];
    std::vector<Edge> stitched;
    for (const Edge* ce : ni.consumers(bi, 0))
      stitched.push_back({prod, ce->dst, ce->desc, ce->desc.is_list()});
    for (const Edge& e : stitched) ni.edges.push_back(e);
    stitched_v_ports.insert(vq);
  }
  for (auto [up, vq] : direct) {
    NodeId bi = v.inner->boundary_in[vq];
    if (ni.has_node(bi)) ni.erase_node(bi);
  }
  // drop U out-ports whose only consumers were V
  for (int p = 0; p < node_out_ports(u); ++p) {
    bool external = false;
    for (const SavedEdge& e : u_out[p])
      if (e.dst.node != vid) external = true;
    if (!external && !u_out[p].empty() &&
        std::any_of(direct.begin(), direct.end(), [&](auto d) { return d.first == p; }))
      internalized_u_ports.insert(p);
  }

  // assemble ports, merging duplicate (source, mode) reads
  struct PortEntry {
    Endpoint src;
    PortMode mode;
    ValueDesc desc;
    NodeId bi;
  };
  std::vector<PortEntry> ports;
  auto add_port = [&](const SavedEdge& e, PortMode mode, NodeId bi) {
    for (const PortEntry& p : ports)
      if (p.src == e.src && p.mode == mode) {
        std::vector<Edge> rewired;
        for (const Edge* ce : ni.consumers(bi, 0)) {
          Edge ne = *ce;
          ne.src.node = p.bi;
          rewired.push_back(ne);
        }
        ni.erase_node(bi);
        for (const Edge& ne : rewired) ni.edges.push_back(ne);
        return;
      }
    ports.push_back({e.src, mode, e.desc, bi});
  };
  for (int p = 0; p < map_in_count(u); ++p)
    add_port(u_in[p], u.in_modes[p], u.inner->boundary_in[p]);
  for (int q = 0; q < map_in_count(v); ++q) {
    if (stitched_v_ports.count(q)) continue;
    add_port(v_in[q], v.in_modes[q], v.inner->boundary_in[q]);
  }
  std::vector<std::pair<NodeId, std::vector<SavedEdge>>> outs;  // boundary-out node, consumers
  for (int p = 0; p < node_out_ports(u); ++p) {
    if (internalized_u_ports.count(p)) {
      // the producer keeps its stitched consumers; drop the boundary node
      ni.erase_node(u.inner->boundary_out[p]);
      continue;
    }
    std::vector<SavedEdge> ext;
    for (const SavedEdge& e : u_out[p])
      if (e.dst.node != vid) ext.push_back(e);
    outs.push_back({u.inner->boundary_out[p], std::move(ext)});
  }
  for (int p = 0; p < node_out_ports(v); ++p) outs.push_back({v.inner->boundary_out[p], v_out[p]});

  ni.boundary_in.clear();
  ni.boundary_out.clear();
  for (const PortEntry& p : ports) ni.boundary_in.push_back(p.bi);
  for (const auto& [bo, ext] : outs) ni.boundary_out.push_back(bo);
  ni.sort_edges();

  Node w;
  w.id = std::min(uid, vid);
  w.kind = NodeKind::Map;
  w.dim = u.dim;
  w.range = MapRange::Full;
  for (const PortEntry& p : ports) w.in_modes.push_back(p.mode);
  w.inner = box<BlockGraph>(std::move(ni));

  g.erase_node(uid);
  g.erase_node(vid);
  NodeId wid = g.add(std::move(w));
  for (size_t p = 0; p < ports.size(); ++p)
    g.connect(ports[p].src.node, ports[p].src.port, wid, static_cast<int>(p), ports[p].desc);
  for (size_t p = 0; p < outs.size(); ++p)
    for (const SavedEdge& e : outs[p].second)
      g.connect(wid, static_cast<int>(p), e.dst.node, e.dst.port, e.desc);
}

inline void apply_map_reduction(BlockGraph& root, const RuleMatch& m) {
  BlockGraph& g = resolve_path(root, m.path);
  NodeId uid = m.bound[0], rid = m.bound[1];
  if (!g.has_node(uid) || !g.has_node(rid)) stale("map or reduction vanished");
  Node& u = g.node(uid);
  const Edge* pe = g.producer(rid, 0);
  if (!pe || pe->src.node != uid || !pe->desc.is_list()) stale("reduction no longer fed by the map");
  int port = pe->src.port;
  if (g.consumers(uid, port).size() != 1) stale("the mapped list grew another consumer");

  BlockGraph& in = *u.inner;
  NodeId bo = in.boundary_out[port];
  const Edge* inner_pe = in.producer(bo, 0);
  ValueDesc per_iter = inner_pe->desc;
  Endpoint producer = inner_pe->src;
  in.erase_edge(producer, {bo, 0});
  Node acc;
  acc.id = rid;  // the reduction moves inside, keeping its identity
  acc.kind = NodeKind::Reduce;
  std::vector<SavedEdge> downstream;
  for (const Edge* e : g.consumers(rid, 0)) downstream.push_back({e->src, e->dst, e->desc});
  g.erase_node(rid);
  in.add(std::move(acc));
  in.connect(producer.node, producer.port, rid, 0, per_iter);
  in.connect(rid, 0, bo, 0, per_iter);
  for (const SavedEdge& e : downstream) g.connect(uid, port, e.dst.node, e.dst.port, e.desc);
}

inline BlockGraph vector_op_inner(BlockGraph& root, FuncKind kind) {
  BlockGraph in;
  NodeId bi0 = mk_boundary_in(in, root.fresh_id());
  NodeId bi1 = mk_boundary_in(in, root.fresh_id());
  NodeId f = mk_func(in, root.fresh_id(), kind);
  NodeId bo = mk_boundary_out(in, root.fresh_id());
  in.connect(bi0, 0, f, 0, ValueDesc::block());
  in.connect(bi1, 0, f, 1, ValueDesc::vector());
  in.connect(f, 0, bo, 0, ValueDesc::block());
  return in;
}

inline void apply_scale_dot(BlockGraph& root, const RuleMatch& m) {
  BlockGraph& g = resolve_path(root, m.path);
  NodeId sid = m.bound[0], fid = m.bound[1];
  if (!g.has_node(sid) || !g.has_node(fid)) stale("scale or matmul vanished");
  if (!pat::is_vector_op_map(g, sid, FuncKind::RowScale)) stale("scale map shape changed");
  auto frag = pat::matmul_fragment(g, fid);
  if (!frag) stale("matmul fragment shape changed");
  auto cons = g.consumers(sid, 0);
  if (cons.size() != 1 || cons[0]->dst.node != fid || cons[0]->dst.port != frag->lhs_port)
    stale("scale output grew another consumer");

  const Edge* es = g.producer(sid, 0);
  const Edge* ec = g.producer(sid, 1);
  Endpoint unscaled = es->src, cvec = ec->src;
  ValueDesc list_desc = es->desc;
  std::vector<SavedEdge> downstream;
  for (const Edge* e : g.consumers(fid, 0)) downstream.push_back({e->src, e->dst, e->desc});
  ValueDesc f_out = downstream.front().desc;

  g.erase_node(sid);
  g.connect(unscaled.node, unscaled.port, fid, frag->lhs_port, list_desc);

  const Node& f = g.node(fid);
  Node s2;
  s2.id = root.fresh_id();
  s2.kind = NodeKind::Map;
  s2.dim = f.dim;  // the scaling map moves past the multiplication and changes dimension
  s2.in_modes = {PortMode::Iterate, PortMode::Broadcast};
  s2.inner = box<BlockGraph>(vector_op_inner(root, FuncKind::RowScale));
  NodeId s2id = g.add(std::move(s2));
  for (const SavedEdge& e : downstream) g.erase_edge(e.src, e.dst);
  g.connect(fid, 0, s2id, 0, f_out);
  g.connect(cvec.node, cvec.port, s2id, 1, ValueDesc::vector());
  for (const SavedEdge& e : downstream) g.connect(s2id, 0, e.dst.node, e.dst.port, e.desc);
}

inline void apply_shift_dot(BlockGraph& root, const RuleMatch& m) {
  BlockGraph& g = resolve_path(root, m.path);
  NodeId sid = m.bound[0], fid = m.bound[1];
  if (!g.has_node(sid) || !g.has_node(fid)) stale("shift or matmul vanished");
  if (!pat::is_vector_op_map(g, sid, FuncKind::RowShift)) stale("shift map shape changed");
  auto frag = pat::matmul_fragment(g, fid);
  if (!frag) stale("matmul fragment shape changed");
  auto cons = g.consumers(sid, 0);
  if (cons.size() != 1 || cons[0]->dst.node != fid || cons[0]->dst.port != frag->lhs_port)
    stale("shift output grew another consumer");

  const Node& f0 = g.node(fid);
  std::string fdim = f0.dim, cdim = frag->contraction_dim;
  const Edge* es = g.producer(sid, 0);
  const Edge* ec = g.producer(sid, 1);
  const Edge* er = g.producer(fid, frag->rhs_port);
  Endpoint unshifted = es->src, cvec = ec->src, rhs = er->src;
  ValueDesc lhs_desc = es->desc, rhs_desc = er->desc;
  std::vector<SavedEdge> downstream;
  for (const Edge* e : g.consumers(fid, 0)) downstream.push_back({e->src, e->dst, e->desc});
  ValueDesc f_out = downstream.front().desc;

  g.erase_node(sid);
  g.connect(unshifted.node, unshifted.port, fid, frag->lhs_port, lhs_desc);

  // column sums of the (transposed) right operand: map_f{ map_c{row_sum} -> reduce }
  BlockGraph rs_in;
  NodeId rs_bi = mk_boundary_in(rs_in, root.fresh_id());
  BlockGraph rs_c_in;
  NodeId c_bi = mk_boundary_in(rs_c_in, root.fresh_id());
  NodeId c_f = mk_func(rs_c_in, root.fresh_id(), FuncKind::RowSum);
  NodeId c_bo = mk_boundary_out(rs_c_in, root.fresh_id());
  rs_c_in.connect(c_bi, 0, c_f, 0, ValueDesc::block());
  rs_c_in.connect(c_f, 0, c_bo, 0, ValueDesc::vector());
  NodeId rs_cmap = mk_map(rs_in, root.fresh_id(), cdim, std::move(rs_c_in), {PortMode::Iterate});
  NodeId rs_red = mk_reduce(rs_in, root.fresh_id());
  NodeId rs_bo = mk_boundary_out(rs_in, root.fresh_id());
  rs_in.connect(rs_bi, 0, rs_cmap, 0, ValueDesc::list_of(Base::Block, {cdim}));
  rs_in.connect(rs_cmap, 0, rs_red, 0, ValueDesc::list_of(Base::Vector, {cdim}));
  rs_in.connect(rs_red, 0, rs_bo, 0, ValueDesc::vector());
  NodeId rsum = mk_map(g, root.fresh_id(), fdim, std::move(rs_in), {PortMode::Iterate});

  BlockGraph o_in;
  NodeId o_bic = mk_boundary_in(o_in, root.fresh_id());
  NodeId o_bis = mk_boundary_in(o_in, root.fresh_id());
  NodeId o_f = mk_func(o_in, root.fresh_id(), FuncKind::Outer);
  NodeId o_bo = mk_boundary_out(o_in, root.fresh_id());
  o_in.connect(o_bic, 0, o_f, 0, ValueDesc::vector());
  o_in.connect(o_bis, 0, o_f, 1, ValueDesc::vector());
  o_in.connect(o_f, 0, o_bo, 0, ValueDesc::block());
  NodeId omap = mk_map(g, root.fresh_id(), fdim, std::move(o_in),
                       {PortMode::Broadcast, PortMode::Iterate});

  BlockGraph a_in;
  NodeId a_bi0 = mk_boundary_in(a_in, root.fresh_id());
  NodeId a_bi1 = mk_boundary_in(a_in, root.fresh_id());
  NodeId a_f = mk_func(a_in, root.fresh_id(), FuncKind::Add);
  NodeId a_bo = mk_boundary_out(a_in, root.fresh_id());
  a_in.connect(a_bi0, 0, a_f, 0, ValueDesc::block());
  a_in.connect(a_bi1, 0, a_f, 1, ValueDesc::block());
  a_in.connect(a_f, 0, a_bo, 0, ValueDesc::block());
  NodeId amap = mk_map(g, root.fresh_id(), fdim, std::move(a_in),
                       {PortMode::Iterate, PortMode::Iterate});

  g.connect(rhs.node, rhs.port, rsum, 0, rhs_desc);
  g.connect(cvec.node, cvec.port, omap, 0, ValueDesc::vector());
  g.connect(rsum, 0, omap, 1, ValueDesc::list_of(Base::Vector, {fdim}));
  for (const SavedEdge& e : downstream) g.erase_edge(e.src, e.dst);
  g.connect(fid, 0, amap, 0, f_out);
  g.connect(omap, 0, amap, 1, ValueDesc::list_of(Base::Block, {fdim}));
  for (const SavedEdge& e : downstream) g.connect(amap, 0, e.dst.node, e.dst.port, e.desc);
}

inline void apply_duplicate_scale(BlockGraph& root, const RuleMatch& m) {
  BlockGraph& g = resolve_path(root, m.path);
  NodeId sid = m.bound[0];
  if (!g.has_node(sid) || !pat::is_vector_op_map(g, sid, FuncKind::RowScale))
    stale("scale map shape changed");
  auto cons = g.consumers(sid, 0);
  if (cons.size() != 2) stale("scale no longer feeds exactly two consumers");
  const Edge* second = cons[0]->dst.node > cons[1]->dst.node ? cons[0] : cons[1];
  SavedEdge moved{second->src, second->dst, second->desc};

  Node s2 = clone_fresh(root, g.node(sid));
  NodeId s2id = g.add(std::move(s2));
  SavedEdge es{g.producer(sid, 0)->src, {}, g.producer(sid, 0)->desc};
  SavedEdge ec{g.producer(sid, 1)->src, {}, g.producer(sid, 1)->desc};
  g.connect(es.src.node, es.src.port, s2id, 0, es.desc);
  g.connect(ec.src.node, ec.src.port, s2id, 1, ec.desc);
  g.erase_edge(moved.src, moved.dst);
  g.connect(s2id, 0, moved.dst.node, moved.dst.port, moved.desc);
}

inline void apply_elementwise_fuse(BlockGraph& root, const RuleMatch& m) {
  BlockGraph& g = resolve_path(root, m.path);
  NodeId uid = m.bound[0], vid = m.bound[1];
  if (!g.has_node(uid) || !g.has_node(vid)) stale("elementwise pair vanished");
  Node& u = g.node(uid);
  Node& v = g.node(vid);
  if (u.kind != NodeKind::Func || v.kind != NodeKind::Func ||
      u.op.kind != FuncKind::Elementwise || v.op.kind != FuncKind::Elementwise)
    stale("pair is no longer two elementwise operators");
  auto cons = g.consumers(uid, 0);
  if (cons.size() != 1 || cons[0]->dst.node != vid) stale("first operator grew another consumer");
  const Edge* in = g.producer(uid, 0);
  Endpoint src = in->src;
  ValueDesc d = in->desc;
  v.op.expr = v.op.expr.compose(u.op.expr);
  g.erase_node(uid);
  g.connect(src.node, src.port, vid, 0, d);
}

inline void apply_extend(BlockGraph& root, const RuleMatch& m) {
  BlockGraph& g = resolve_path(root, m.path);
  NodeId xid = m.bound[0];
  if (!g.has_node(xid)) stale("extension target vanished");
  Node& xref = g.node(xid);
  if (!pat::extendable(g, xref, m.path.empty())) stale("map is no longer extendable");

  std::vector<NodeId> moved;
  for (const auto& [id, n] : g.nodes)
    if (id != xid && is_operator(n.kind)) moved.push_back(id);

  // record the wiring before mutating
  struct PortInfo {
    Endpoint src;
    PortMode mode;
    ValueDesc desc;
    NodeId bi;
    bool internal;  // source moves inside
  };
  Node x = std::move(g.nodes.at(xid));
  g.nodes.erase(xid);
  BlockGraph& in = *x.inner;
  std::set<NodeId> moved_set(moved.begin(), moved.end());

  std::vector<PortInfo> ports;
  for (int p = 0; p < static_cast<int>(x.in_modes.size()); ++p) {
    const Edge* e = g.producer(xid, p);
    bool internal = moved_set.count(e->src.node) > 0;
    if (internal && x.in_modes[p] != PortMode::Broadcast) stale("iterated input would move inside");
    ports.push_back({e->src, x.in_modes[p], e->desc, in.boundary_in[p], internal});
  }
  std::vector<std::vector<SavedEdge>> x_out(node_out_ports(x));
  for (int p = 0; p < node_out_ports(x); ++p)
    for (const Edge* e : g.consumers(xid, p)) x_out[p].push_back({e->src, e->dst, e->desc});

  std::vector<SavedEdge> moved_internal, moved_external;
  for (const Edge& e : g.edges) {
    bool s = moved_set.count(e.src.node), d = moved_set.count(e.dst.node);
    if (s && d) moved_internal.push_back({e.src, e.dst, e.desc});
    else if (d && !s && e.src.node != xid) moved_external.push_back({e.src, e.dst, e.desc});
  }

  // move the nodes
  for (NodeId id : moved) {
    in.nodes.emplace(id, std::move(g.nodes.at(id)));
    g.nodes.erase(id);
  }
  g.edges.erase(std::remove_if(g.edges.begin(), g.edges.end(),
                               [&](const Edge& e) {
                                 return moved_set.count(e.src.node) || moved_set.count(e.dst.node) ||
                                        e.src.node == xid || e.dst.node == xid;
                               }),
                g.edges.end());
  for (const SavedEdge& e : moved_internal)
    in.edges.push_back({e.src, e.dst, e.desc, e.desc.is_list()});

  // ports whose producer moved inside dissolve into direct edges
  std::vector<PortInfo> kept;
  for (const PortInfo& p : ports) {
    if (p.internal) {
      std::vector<Edge> rewired;
      for (const Edge* ce : in.consumers(p.bi, 0)) {
        Edge ne = *ce;
        ne.src = p.src;
        rewired.push_back(ne);
      }
      in.erase_node(p.bi);
      for (const Edge& ne : rewired) in.edges.push_back(ne);
    } else {
      kept.push_back(p);
    }
  }
  // external feeds of moved nodes become broadcast ports (reusing same-source ones)
  for (const SavedEdge& e : moved_external) {
    NodeId bi = -1;
    for (const PortInfo& p : kept)
      if (p.src == e.src && p.mode == PortMode::Broadcast) bi = p.bi;
    if (bi < 0) {
      bi = root.fresh_id();
      Node b;
      b.id = bi;
      b.kind = NodeKind::BoundaryIn;
      in.nodes.emplace(bi, std::move(b));
      kept.push_back({e.src, PortMode::Broadcast, e.desc, bi, false});
    }
    in.edges.push_back({{bi, 0}, e.dst, e.desc, e.desc.is_list()});
  }
  in.boundary_in.clear();
  x.in_modes.clear();
  for (const PortInfo& p : kept) {
    in.boundary_in.push_back(p.bi);
    x.in_modes.push_back(p.mode);
  }
  in.sort_edges();

  NodeId nid = x.id;
  g.nodes.emplace(nid, std::move(x));
  for (size_t p = 0; p < kept.size(); ++p)
    g.connect(kept[p].src.node, kept[p].src.port, nid, static_cast<int>(p), kept[p].desc);
  for (size_t p = 0; p < x_out.size(); ++p)
    for (const SavedEdge& e : x_out[p])
      g.connect(nid, static_cast<int>(p), e.dst.node, e.dst.port, e.desc);
}

inline void apply_peel(BlockGraph& root, const RuleMatch& m) {
  BlockGraph& g = resolve_path(root, m.path);
  NodeId xid = m.bound[0];
  if (!g.has_node(xid)) stale("peel target vanished");
  Node& x = g.node(xid);
  if (x.kind != NodeKind::Map || x.range != MapRange::Full) stale("peel target is not a full map");
  for (int p = 0; p < map_out_count(x); ++p)
    if (map_out_kind(x, p) != OutKind::Accumulate) stale("peel requires accumulating outputs");

  Node first = clone_fresh(root, x);
  first.range = MapRange::First;
  x.range = MapRange::Rest;
  NodeId fid = g.add(std::move(first));
  for (int p = 0; p < map_in_count(x); ++p) {
    const Edge* e = g.producer(xid, p);
    g.connect(e->src.node, e->src.port, fid, p, e->desc);
  }
  for (int p = 0; p < map_out_count(x); ++p) {
    std::vector<SavedEdge> downstream;
    for (const Edge* e : g.consumers(xid, p)) downstream.push_back({e->src, e->dst, e->desc});
    ValueDesc d = downstream.front().desc;
    NodeId add = mk_func(g, root.fresh_id(), FuncKind::Add);
    for (const SavedEdge& e : downstream) g.erase_edge(e.src, e.dst);
    g.connect(fid, p, add, 0, d);
    g.connect(xid, p, add, 1, d);
    for (const SavedEdge& e : downstream) g.connect(add, 0, e.dst.node, e.dst.port, e.desc);
  }
}

}  // namespace detail

/// Performs the substitution a match describes, mutating the program in place.
/// Throws if the program changed since the match was taken.
inline void apply(BlockGraph& program, const RuleMatch& m) {
  switch (m.rule) {
    case RuleId::R1_consecutive_maps:
      detail::merge_maps(program, m.path, m.bound[0], m.bound[1], true);
      return;
    case RuleId::R2_sibling_maps:
      detail::merge_maps(program, m.path, m.bound[0], m.bound[1], false);
      return;
    case RuleId::R3_map_reduction: detail::apply_map_reduction(program, m); return;
    case RuleId::R4_scale_dot: detail::apply_scale_dot(program, m); return;
    case RuleId::R5_shift_dot: detail::apply_shift_dot(program, m); return;
    case RuleId::R6_extend: detail::apply_extend(program, m); return;
    case RuleId::R7_peel: detail::apply_peel(program, m); return;
    case RuleId::R8_duplicate_scale: detail::apply_duplicate_scale(program, m); return;
    case RuleId::R9_elementwise: detail::apply_elementwise_fuse(program, m); return;
  }
  throw Error("unknown rule");
}

/// Copying convenience over apply().
inline BlockGraph applied(const BlockGraph& program, const RuleMatch& m) {
  BlockGraph copy = program;
  apply(copy, m);
  return copy;
}

}  // namespace blockfuse
