#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "blockfuse/ir.hpp"

namespace blockfuse {

namespace pseudo_detail {

// Where a value lives while emitting: a local temporary or a global buffer
// plus the indices applied so far.
struct Ref {
  bool buffer = false;
  std::string name;
  std::vector<std::string> indices;

  std::string render() const {
    std::string s = name;
    for (const std::string& i : indices) s += "[" + i + "]";
    return s;
  }
};

struct Emitter {
  std::ostringstream out;
  int temp_counter = 1;
  int buffer_counter = 1;
  std::map<std::string, int> loop_vars;

  std::string temp() { return "t" + std::to_string(temp_counter++); }
  std::string buffer() { return "T" + std::to_string(buffer_counter++); }
  std::string loop_var(const std::string& dim) {
    std::string base = dim;
    for (char& c : base) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    int n = loop_vars[base]++;
    return n == 0 ? base : base + std::to_string(n + 1);
  }
  void release_loop_var(const std::string& dim) {
    std::string base = dim;
    for (char& c : base) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    loop_vars[base]--;
  }
  void line(int indent, const std::string& text) {
    out << std::string(static_cast<size_t>(indent) * 4, ' ') << text << "\n";
  }
};

// Per-port requests handed to a graph being emitted: either "store your value
// into this buffer location" or "accumulate into this local".
struct OutTarget {
  bool accumulate = false;
  Ref store;           // valid when !accumulate (buffer with indices)
  std::string acc_var;  // valid when accumulate
};

struct Scope {
  std::map<std::string, std::string> loads;  // rendered buffer ref -> local var
};

inline std::string render_expr(const ScalarExpr& e, const std::string& arg);

inline std::string render_child(const ScalarExpr& e, const std::string& arg) {
  return render_expr(e, arg);
}

inline std::string render_expr(const ScalarExpr& e, const std::string& arg) {
  using Op = ScalarExpr::Op;
  std::ostringstream os;
  switch (e.op()) {
    case Op::Var: return arg;
    case Op::Const: os << e.value(); return os.str();
    case Op::DimTotal: return "total(" + e.dim() + ")";
    case Op::Add: return "(" + render_child(e.lhs(), arg) + " + " + render_child(e.rhs(), arg) + ")";
    case Op::Sub: return "(" + render_child(e.lhs(), arg) + " - " + render_child(e.rhs(), arg) + ")";
    case Op::Mul: return "(" + render_child(e.lhs(), arg) + " * " + render_child(e.rhs(), arg) + ")";
    case Op::Div: return "(" + render_child(e.lhs(), arg) + " / " + render_child(e.rhs(), arg) + ")";
    case Op::Exp: return "exp(" + render_child(e.lhs(), arg) + ")";
    case Op::Sqrt: return "sqrt(" + render_child(e.lhs(), arg) + ")";
    case Op::Recip: return "recip(" + render_child(e.lhs(), arg) + ")";
    case Op::Square: return "square(" + render_child(e.lhs(), arg) + ")";
    case Op::Sigmoid: return "sigmoid(" + render_child(e.lhs(), arg) + ")";
  }
  return arg;
}

struct GraphEmitter {
  Emitter& em;
  const BlockGraph& g;
  int indent;
  std::map<std::pair<NodeId, int>, Ref> refs;  // produced values
  Scope scope;
  std::map<NodeId, OutTarget> out_targets;  // per boundary-out node

  // A value usable as an operand: buffers are loaded once per scope.
  std::string operand(NodeId node, int port) {
    const Edge* e = g.producer(node, port);
    if (!e) throw Error("pseudocode: missing producer");
    Ref r = refs.at({e->src.node, e->src.port});
    if (!r.buffer) return r.name;
    std::string key = r.render();
    auto it = scope.loads.find(key);
    if (it != scope.loads.end()) return it->second;
    std::string v = em.temp();
    em.line(indent, v + " = load " + key);
    scope.loads[key] = v;
    return v;
  }

  Ref ref_of(NodeId node, int port) {
    const Edge* e = g.producer(node, port);
    if (!e) throw Error("pseudocode: missing producer");
    return refs.at({e->src.node, e->src.port});
  }

  void run(const std::vector<Ref>& boundary_in, const std::vector<OutTarget>& boundary_out);
  void emit_map(const Node& n);
};

inline void GraphEmitter::emit_map(const Node& n) {
  std::vector<Ref> inner_in;
  for (int p = 0; p < map_in_count(n); ++p) {
    const Edge* e = g.producer(n.id, p);
    Ref r = refs.at({e->src.node, e->src.port});
    inner_in.push_back(r);
  }
  bool serial = false;
  for (int p = 0; p < map_out_count(n); ++p)
    if (map_out_kind(n, p) == OutKind::Accumulate) serial = true;

  std::string var = em.loop_var(n.dim);
  std::string range = "range(" + n.dim + ")";
  if (n.range == MapRange::First) range = "range(0, 1)";
  if (n.range == MapRange::Rest) range = "range(1, " + n.dim + ")";
  em.line(indent, std::string(serial ? "for " : "forall ") + var + " in " + range + ":");

  std::vector<Ref> bvals;
  for (int p = 0; p < map_in_count(n); ++p) {
    Ref r = inner_in[p];
    if (n.in_modes[p] == PortMode::Iterate) r.indices.push_back(var);
    bvals.push_back(r);
  }
  std::vector<OutTarget> btargets;
  std::map<int, Ref> port_refs;
  for (int p = 0; p < map_out_count(n); ++p) {
    OutTarget t;
    if (map_out_kind(n, p) == OutKind::Accumulate) {
      t.accumulate = true;
      t.acc_var = em.temp();
      port_refs[p] = Ref{false, t.acc_var, {}};
    } else {
      // collected output: store into the output buffer, the surrounding store
      // target, or a fresh intermediate
      auto cons = g.consumers(n.id, p);
      Ref target;
      bool named = false;
      if (cons.size() == 1) {
        const Node& d = g.node(cons[0]->dst.node);
        if (d.kind == NodeKind::Output) {
          target = Ref{true, d.name, {}};
          named = true;
        } else if (d.kind == NodeKind::BoundaryOut) {
          auto it = out_targets.find(d.id);
          if (it != out_targets.end() && !it->second.accumulate) {
            target = it->second.store;
            named = true;
          }
        }
      }
      if (!named) target = Ref{true, em.buffer(), {}};
      Ref stored = target;
      target.indices.push_back(var);
      t.store = target;
      port_refs[p] = stored;
    }
    btargets.push_back(t);
  }

  GraphEmitter inner{em, *n.inner, indent + 1, {}, {}, {}};
  inner.run(bvals, btargets);
  em.release_loop_var(n.dim);
  for (auto& [p, r] : port_refs) refs[{n.id, p}] = r;
}

inline void GraphEmitter::run(const std::vector<Ref>& boundary_in,
                              const std::vector<OutTarget>& boundary_out) {
  for (size_t p = 0; p < g.boundary_in.size(); ++p) refs[{g.boundary_in[p], 0}] = boundary_in[p];

  // boundary-out targets steer nested collected stores
  for (size_t p = 0; p < g.boundary_out.size(); ++p) out_targets[g.boundary_out[p]] = boundary_out[p];

  for (NodeId id : topological_order(g)) {
    const Node& n = g.node(id);
    switch (n.kind) {
      case NodeKind::Input:
        refs[{id, 0}] = Ref{true, n.name, {}};
        break;
      case NodeKind::BoundaryIn: break;  // pre-seeded
      case NodeKind::Func: {
        std::vector<std::string> args;
        for (int p = 0; p < func_arity(n.op.kind); ++p) args.push_back(operand(id, p));
        std::string v = em.temp();
        if (n.op.kind == FuncKind::Elementwise)
          em.line(indent, v + " = " + render_expr(n.op.expr, args[0]));
        else
          em.line(indent, v + " = " + std::string(func_name(n.op.kind)) + "(" + args[0] +
                              (args.size() > 1 ? ", " + args[1] : "") + ")");
        refs[{id, 0}] = Ref{false, v, {}};
        break;
      }
      case NodeKind::Reduce: {
        const Edge* e = g.producer(id, 0);
        Ref in = refs.at({e->src.node, e->src.port});
        if (e->desc.is_list()) {
          // standalone fold over a buffered list
          std::string acc = em.temp();
          std::string var = em.loop_var(e->desc.list_dims[0]);
          em.line(indent, "for " + var + " in range(" + e->desc.list_dims[0] + "):");
          Ref item = in;
          item.indices.push_back(var);
          std::string v = em.temp();
          em.line(indent + 1, v + " = load " + item.render());
          em.line(indent + 1, acc + " += " + v);
          em.release_loop_var(e->desc.list_dims[0]);
          refs[{id, 0}] = Ref{false, acc, {}};
        } else {
          // accumulator: the value flows into the enclosing map's running sum
          auto cons = g.consumers(id, 0);
          std::string target;
          if (cons.size() == 1 && out_targets.count(cons[0]->dst.node) &&
              out_targets[cons[0]->dst.node].accumulate)
            target = out_targets[cons[0]->dst.node].acc_var;
          else
            target = em.temp();
          em.line(indent, target + " += " + operand(id, 0));
          refs[{id, 0}] = Ref{false, target, {}};
        }
        break;
      }
      case NodeKind::Map: emit_map(n); break;
      case NodeKind::Misc: {
        std::vector<std::string> args;
        for (int p = 0; p < n.misc_inputs; ++p) args.push_back(operand(id, p));
        std::string v = em.temp();
        std::string call = n.name + "(";
        for (size_t i = 0; i < args.size(); ++i) call += (i ? ", " : "") + args[i];
        call += ")";
        em.line(indent, v + " = " + call);
        for (int p = 0; p < n.misc_outputs; ++p) refs[{id, p}] = Ref{false, v, {}};
        break;
      }
      case NodeKind::Output: {
        Ref r = ref_of(id, 0);
        if (!r.buffer) em.line(indent, "store " + n.name + " = " + r.name);
        // collected buffers were stored under this name where they were built
        break;
      }
      case NodeKind::BoundaryOut: {
        const OutTarget& t = out_targets[id];
        Ref r = ref_of(id, 0);
        if (t.accumulate) {
          // the accumulator already wrote t.acc_var
        } else if (!r.buffer) {
          em.line(indent, "store " + t.store.render() + " = " + r.name);
        }
        break;
      }
    }
  }
}

}  // namespace pseudo_detail

/// Listing-style rendering: maps as forall loops (for, once they carry an
/// accumulator), reductions as serial loops, explicit load/store at every
/// buffered crossing. Temporaries are numbered in topological order, so the
/// text is a pure function of the program.
inline std::string to_pseudocode(const BlockGraph& g) {
  pseudo_detail::Emitter em;
  pseudo_detail::GraphEmitter ge{em, g, 0, {}, {}, {}};
  ge.run({}, {});
  return em.out.str();
}

}  // namespace blockfuse
