#pragma once

#include <json.hpp>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "blockfuse/ir.hpp"
#include "blockfuse/lowering.hpp"

namespace blockfuse {

using Json = nlohmann::ordered_json;

// --- scalar expressions ----------------------------------------------------------

inline Json expr_to_json(const ScalarExpr& e) {
  using Op = ScalarExpr::Op;
  Json j;
  switch (e.op()) {
    case Op::Var: j["op"] = "var"; return j;
    case Op::Const:
      j["op"] = "const";
      j["value"] = e.value();
      return j;
    case Op::DimTotal:
      j["op"] = "dim_total";
      j["dim"] = e.dim();
      return j;
    case Op::Add: j["op"] = "add"; break;
    case Op::Sub: j["op"] = "sub"; break;
    case Op::Mul: j["op"] = "mul"; break;
    case Op::Div: j["op"] = "div"; break;
    case Op::Exp: j["op"] = "exp"; break;
    case Op::Sqrt: j["op"] = "sqrt"; break;
    case Op::Recip: j["op"] = "recip"; break;
    case Op::Square: j["op"] = "square"; break;
    case Op::Sigmoid: j["op"] = "sigmoid"; break;
  }
  j["lhs"] = expr_to_json(e.lhs());
  if (e.has_rhs()) j["rhs"] = expr_to_json(e.rhs());
  return j;
}

inline ScalarExpr expr_from_json(const Json& j) {
  std::string op = j.at("op");
  if (op == "var") return ScalarExpr::var();
  if (op == "const") return ScalarExpr::constant(j.at("value").get<double>());
  if (op == "dim_total") return ScalarExpr::dim_total(j.at("dim").get<std::string>());
  ScalarExpr lhs = expr_from_json(j.at("lhs"));
  if (op == "exp") return ScalarExpr::exp(lhs);
  if (op == "sqrt") return ScalarExpr::sqrt(lhs);
  if (op == "recip") return ScalarExpr::recip(lhs);
  if (op == "square") return ScalarExpr::square(lhs);
  if (op == "sigmoid") return ScalarExpr::sigmoid(lhs);
  ScalarExpr rhs = expr_from_json(j.at("rhs"));
  if (op == "add") return ScalarExpr::add(lhs, rhs);
  if (op == "sub") return ScalarExpr::sub(lhs, rhs);
  if (op == "mul") return ScalarExpr::mul(lhs, rhs);
  if (op == "div") return ScalarExpr::div(lhs, rhs);
  throw Error("unknown expression op '" + op + "'");
}

// --- block graphs -----------------------------------------------------------------

inline Json desc_to_json(const ValueDesc& d) {
  Json j;
  j["base"] = base_name(d.base);
  j["dims"] = d.list_dims;
  return j;
}

inline ValueDesc desc_from_json(const Json& j) {
  ValueDesc d;
  std::string b = j.at("base");
  if (b == "block") d.base = Base::Block;
  else if (b == "vector") d.base = Base::Vector;
  else if (b == "scalar") d.base = Base::Scalar;
  else throw Error("unknown value base '" + b + "'");
  d.list_dims = j.at("dims").get<std::vector<std::string>>();
  return d;
}

inline Json graph_to_json(const BlockGraph& g) {
  Json j;
  j["nodes"] = Json::array();
  for (const auto& [id, n] : g.nodes) {
    Json nj;
    nj["id"] = id;
    nj["kind"] = kind_name(n.kind);
    switch (n.kind) {
      case NodeKind::Input:
        nj["name"] = n.name;
        nj["desc"] = desc_to_json(n.desc);
        nj["rows_dim"] = n.rows_dim;
        nj["cols_dim"] = n.cols_dim;
        nj["transposed"] = n.transposed;
        break;
      case NodeKind::Output: nj["name"] = n.name; break;
      case NodeKind::Func:
        nj["op"] = func_name(n.op.kind);
        if (n.op.kind == FuncKind::Elementwise) nj["expr"] = expr_to_json(n.op.expr);
        break;
      case NodeKind::Map: {
        nj["dim"] = n.dim;
        nj["range"] = n.range == MapRange::Full ? "full" : (n.range == MapRange::First ? "first" : "rest");
        Json modes = Json::array();
        for (PortMode m : n.in_modes) modes.push_back(m == PortMode::Iterate ? "iterate" : "broadcast");
        nj["in_modes"] = modes;
        nj["inner"] = graph_to_json(*n.inner);
        break;
      }
      case NodeKind::Misc:
        nj["name"] = n.name;
        nj["inputs"] = n.misc_inputs;
        nj["outputs"] = n.misc_outputs;
        break;
      default: break;
    }
    j["nodes"].push_back(nj);
  }
  j["edges"] = Json::array();
  for (const Edge& e : g.edges) {
    Json ej;
    ej["src"] = {e.src.node, e.src.port};
    ej["dst"] = {e.dst.node, e.dst.port};
    ej["desc"] = desc_to_json(e.desc);
    ej["buffered"] = e.buffered;
    j["edges"].push_back(ej);
  }
  j["boundary_in"] = g.boundary_in;
  j["boundary_out"] = g.boundary_out;
  return j;
}

inline BlockGraph graph_from_json(const Json& j) {
  BlockGraph g;
  NodeId max_id = -1;
  for (const Json& nj : j.at("nodes")) {
    Node n;
    n.id = nj.at("id").get<NodeId>();
    max_id = std::max(max_id, n.id);
    std::string kind = nj.at("kind");
    if (kind == "input") {
      n.kind = NodeKind::Input;
      n.name = nj.at("name");
      n.desc = desc_from_json(nj.at("desc"));
      n.rows_dim = nj.at("rows_dim");
      n.cols_dim = nj.at("cols_dim");
      n.transposed = nj.at("transposed").get<bool>();
    } else if (kind == "output") {
      n.kind = NodeKind::Output;
      n.name = nj.at("name");
    } else if (kind == "boundary_in") {
      n.kind = NodeKind::BoundaryIn;
    } else if (kind == "boundary_out") {
      n.kind = NodeKind::BoundaryOut;
    } else if (kind == "func") {
      n.kind = NodeKind::Func;
      std::string op = nj.at("op");
      if (op == "add") n.op.kind = FuncKind::Add;
      else if (op == "mul") n.op.kind = FuncKind::Mul;
      else if (op == "row_shift") n.op.kind = FuncKind::RowShift;
      else if (op == "row_scale") n.op.kind = FuncKind::RowScale;
      else if (op == "row_sum") n.op.kind = FuncKind::RowSum;
      else if (op == "dot") n.op.kind = FuncKind::Dot;
      else if (op == "outer") n.op.kind = FuncKind::Outer;
      else if (op == "elementwise") {
        n.op.kind = FuncKind::Elementwise;
        n.op.expr = expr_from_json(nj.at("expr"));
      } else {
        throw Error("unknown functional op '" + op + "'");
      }
    } else if (kind == "map") {
      n.kind = NodeKind::Map;
      n.dim = nj.at("dim");
      std::string r = nj.at("range");
      n.range = r == "full" ? MapRange::Full : (r == "first" ? MapRange::First : MapRange::Rest);
      for (const Json& m : nj.at("in_modes"))
        n.in_modes.push_back(m.get<std::string>() == "iterate" ? PortMode::Iterate
                                                               : PortMode::Broadcast);
      n.inner = box<BlockGraph>(graph_from_json(nj.at("inner")));
    } else if (kind == "reduce") {
      n.kind = NodeKind::Reduce;
    } else if (kind == "misc") {
      n.kind = NodeKind::Misc;
      n.name = nj.at("name");
      n.misc_inputs = nj.at("inputs").get<int>();
      n.misc_outputs = nj.at("outputs").get<int>();
    } else {
      throw Error("unknown block node kind '" + kind + "'");
    }
    g.nodes.emplace(n.id, std::move(n));
  }
  for (const Json& ej : j.at("edges")) {
    Edge e;
    e.src = {ej.at("src")[0].get<NodeId>(), ej.at("src")[1].get<int>()};
    e.dst = {ej.at("dst")[0].get<NodeId>(), ej.at("dst")[1].get<int>()};
    e.desc = desc_from_json(ej.at("desc"));
    e.buffered = ej.at("buffered").get<bool>();
    g.edges.push_back(e);
  }
  g.sort_edges();
  g.boundary_in = j.at("boundary_in").get<std::vector<NodeId>>();
  g.boundary_out = j.at("boundary_out").get<std::vector<NodeId>>();
  g.next_id = max_id + 1;
  return g;
}

// --- array programs ----------------------------------------------------------------

inline Json array_to_json(const ArrayProgram& p) {
  Json j;
  j["nodes"] = Json::array();
  for (const auto& [id, n] : p.nodes) {
    Json nj;
    nj["id"] = id;
    switch (n.kind) {
      case ArrayNodeKind::Input:
        nj["kind"] = "input";
        nj["name"] = n.name;
        nj["rows_dim"] = n.rows_dim;
        nj["cols_dim"] = n.cols_dim;
        nj["transposed"] = n.transposed;
        break;
      case ArrayNodeKind::Output:
        nj["kind"] = "output";
        nj["name"] = n.name;
        break;
      case ArrayNodeKind::Op:
        nj["kind"] = "op";
        nj["op"] = n.op_kind;
        nj["inputs"] = n.inputs;
        if (n.op_kind == "elementwise" || n.op_kind == "divide_const") nj["expr"] = expr_to_json(n.expr);
        if (n.op_kind == "rmsnorm") nj["eps"] = n.eps;
        break;
    }
    j["nodes"].push_back(nj);
  }
  j["edges"] = Json::array();
  for (const ArrayEdge& e : p.edges) j["edges"].push_back({{"src", e.src}, {"dst", e.dst}, {"port", e.dst_port}});
  return j;
}

inline ArrayProgram array_from_json(const Json& j, std::vector<std::string>* warnings) {
  static const std::set<std::string> known = {"elementwise", "divide_const", "swish",  "matmul",
                                              "softmax",     "layernorm",    "rmsnorm", "hadamard"};
  ArrayProgram p;
  for (const Json& nj : j.at("nodes")) {
    ArrayNode n;
    n.id = nj.at("id").get<NodeId>();
    std::string kind = nj.at("kind");
    if (kind == "input") {
      n.kind = ArrayNodeKind::Input;
      n.name = nj.at("name");
      n.rows_dim = nj.at("rows_dim");
      n.cols_dim = nj.at("cols_dim");
      n.transposed = nj.at("transposed").get<bool>();
    } else if (kind == "output") {
      n.kind = ArrayNodeKind::Output;
      n.name = nj.at("name");
    } else if (kind == "op") {
      n.kind = ArrayNodeKind::Op;
      n.op_kind = nj.at("op");
      n.inputs = nj.at("inputs").get<int>();
      if (nj.contains("expr")) n.expr = expr_from_json(nj.at("expr"));
      if (nj.contains("eps")) n.eps = nj.at("eps").get<double>();
      if (!known.count(n.op_kind) && warnings)
        warnings->push_back("operator '" + n.op_kind + "' is not registered; it lowers to a miscellaneous node");
    } else {
      throw Error("unknown array node kind '" + kind + "'");
    }
    p.add(std::move(n));
  }
  for (const Json& ej : j.at("edges"))
    p.edges.push_back({ej.at("src").get<NodeId>(), ej.at("dst").get<NodeId>(), ej.at("port").get<int>()});
  return p;
}

// --- program files ------------------------------------------------------------------

constexpr int kProgramFormatVersion = 1;

inline std::set<std::string> collect_dims(const BlockGraph& g) {
  std::set<std::string> dims;
  std::function<void(const BlockGraph&)> walk = [&](const BlockGraph& gr) {
    for (const auto& [id, n] : gr.nodes) {
      if (n.kind == NodeKind::Map) {
        dims.insert(n.dim);
        walk(*n.inner);
      }
      if (n.kind == NodeKind::Input) {
        if (!n.rows_dim.empty()) dims.insert(n.rows_dim);
        if (!n.cols_dim.empty()) dims.insert(n.cols_dim);
      }
    }
    for (const Edge& e : gr.edges)
      for (const std::string& d : e.desc.list_dims) dims.insert(d);
  };
  walk(g);
  return dims;
}

inline std::string serialize_program(const BlockGraph& g) {
  Json j;
  j["format"] = "blockfuse-program";
  j["version"] = kProgramFormatVersion;
  j["kind"] = "block";
  j["dims"] = collect_dims(g);
  j["graph"] = graph_to_json(g);
  return j.dump(2) + "\n";
}

inline std::string serialize_program(const ArrayProgram& p) {
  Json j;
  j["format"] = "blockfuse-program";
  j["version"] = kProgramFormatVersion;
  j["kind"] = "array";
  std::set<std::string> dims;
  for (const auto& [id, n] : p.nodes)
    if (n.kind == ArrayNodeKind::Input) {
      dims.insert(n.rows_dim);
      dims.insert(n.cols_dim);
    }
  j["dims"] = dims;
  j["array"] = array_to_json(p);
  return j.dump(2) + "\n";
}

struct ParsedProgram {
  std::variant<ArrayProgram, BlockGraph> program;
  std::vector<std::string> warnings;

  bool is_array() const { return std::holds_alternative<ArrayProgram>(program); }
  const ArrayProgram& array() const { return std::get<ArrayProgram>(program); }
  const BlockGraph& block() const { return std::get<BlockGraph>(program); }

  /// Lowers array programs; passes block programs through.
  BlockGraph to_block() const { return is_array() ? lower(array()) : block(); }
};

inline ParsedProgram parse_program(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(std::string("program file syntax error: ") + e.what());
  }
  if (j.value("format", "") != "blockfuse-program") throw Error("not a program file");
  if (j.value("version", -1) != kProgramFormatVersion)
    throw Error("unsupported program file version");
  ParsedProgram out;
  std::string kind = j.at("kind");
  if (kind == "array") {
    out.program = array_from_json(j.at("array"), &out.warnings);
  } else if (kind == "block") {
    BlockGraph g = graph_from_json(j.at("graph"));
    auto violations = validate(g);
    if (!violations.empty()) throw Error("program file is structurally invalid: " + violations.front());
    out.program = std::move(g);
  } else {
    throw Error("unknown program kind '" + kind + "'");
  }
  return out;
}

/// Canonical text form: densely renumbered, so two graphs compare equal
/// exactly when they are isomorphic up to node-id renaming.
inline std::string canonical_form(const BlockGraph& g) {
  return serialize_program(deep_clone(g).graph);
}

}  // namespace blockfuse
