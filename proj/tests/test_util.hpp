#pragma once

#include <string>
#include <vector>

#include "blockfuse/interpreter.hpp"
#include "blockfuse/ir.hpp"

namespace bftest {

using namespace blockfuse;

// X (rows split over M) times B (cols split over N, supplied transposed),
// followed by an elementwise relu; the block grids are one-dimensional and
// the product is a single dot per (m, n), as in the classic warm-up example.
inline BlockGraph relu_matmul(bool fused) {
  BlockGraph g;
  NodeId a = mk_input(g, g.fresh_id(), "A", ValueDesc::list_of(Base::Block, {"M"}), "M", "");
  NodeId bt = mk_input(g, g.fresh_id(), "Bt", ValueDesc::list_of(Base::Block, {"N"}), "N", "");
  NodeId out = mk_output(g, g.fresh_id(), "R");

  // steep swish stands in for relu; the expression vocabulary has no max
  auto act = ScalarExpr::mul(
      ScalarExpr::var(),
      ScalarExpr::sigmoid(ScalarExpr::mul(ScalarExpr::constant(64), ScalarExpr::var())));

  BlockGraph ni;
  NodeId nbi_a = mk_boundary_in(ni, g.fresh_id());
  NodeId nbi_b = mk_boundary_in(ni, g.fresh_id());
  NodeId dot = mk_func(ni, g.fresh_id(), FuncKind::Dot);
  ni.connect(nbi_a, 0, dot, 0, ValueDesc::block());
  ni.connect(nbi_b, 0, dot, 1, ValueDesc::block());

  if (fused) {
    NodeId ew = mk_func(ni, g.fresh_id(), FuncKind::Elementwise, act);
    NodeId nbo = mk_boundary_out(ni, g.fresh_id());
    ni.connect(dot, 0, ew, 0, ValueDesc::block());
    ni.connect(ew, 0, nbo, 0, ValueDesc::block());
  } else {
    NodeId nbo = mk_boundary_out(ni, g.fresh_id());
    ni.connect(dot, 0, nbo, 0, ValueDesc::block());
  }

  BlockGraph mi;
  NodeId mbi_a = mk_boundary_in(mi, g.fresh_id());
  NodeId mbi_b = mk_boundary_in(mi, g.fresh_id());
  NodeId nmap = mk_map(mi, g.fresh_id(), "N", std::move(ni), {PortMode::Broadcast, PortMode::Iterate});
  NodeId mbo = mk_boundary_out(mi, g.fresh_id());
  mi.connect(mbi_a, 0, nmap, 0, ValueDesc::block());
  mi.connect(mbi_b, 0, nmap, 1, ValueDesc::list_of(Base::Block, {"N"}));
  mi.connect(nmap, 0, mbo, 0, ValueDesc::list_of(Base::Block, {"N"}));

  NodeId mmap = mk_map(g, g.fresh_id(), "M", std::move(mi), {PortMode::Iterate, PortMode::Broadcast});
  g.connect(a, 0, mmap, 0, ValueDesc::list_of(Base::Block, {"M"}));
  g.connect(bt, 0, mmap, 1, ValueDesc::list_of(Base::Block, {"N"}));

  if (fused) {
    g.connect(mmap, 0, out, 0, ValueDesc::list_of(Base::Block, {"M", "N"}));
  } else {
    // separate top-level elementwise pass over the materialized product
    BlockGraph ei;
    NodeId ebi = mk_boundary_in(ei, g.fresh_id());
    NodeId ew = mk_func(ei, g.fresh_id(), FuncKind::Elementwise, act);
    NodeId ebo = mk_boundary_out(ei, g.fresh_id());
    ei.connect(ebi, 0, ew, 0, ValueDesc::block());
    ei.connect(ew, 0, ebo, 0, ValueDesc::block());

    BlockGraph emi;
    NodeId embi = mk_boundary_in(emi, g.fresh_id());
    NodeId emap = mk_map(emi, g.fresh_id(), "N", std::move(ei), {PortMode::Iterate});
    NodeId embo = mk_boundary_out(emi, g.fresh_id());
    emi.connect(embi, 0, emap, 0, ValueDesc::list_of(Base::Block, {"N"}));
    emi.connect(emap, 0, embo, 0, ValueDesc::list_of(Base::Block, {"N"}));

    NodeId emmap = mk_map(g, g.fresh_id(), "M", std::move(emi), {PortMode::Iterate});
    g.connect(mmap, 0, emmap, 0, ValueDesc::list_of(Base::Block, {"M", "N"}));
    g.connect(emmap, 0, out, 0, ValueDesc::list_of(Base::Block, {"M", "N"}));
  }
  return g;
}

// one Input feeding one elementwise operator feeding one Output
inline BlockGraph single_elementwise(double s, double d) {
  BlockGraph g;
  NodeId in = mk_input(g, g.fresh_id(), "a", ValueDesc::block(), "", "");
  NodeId ew = mk_func(g, g.fresh_id(), FuncKind::Elementwise,
                      ScalarExpr::div(ScalarExpr::sub(ScalarExpr::var(), ScalarExpr::constant(s)),
                                      ScalarExpr::constant(d)));
  NodeId out = mk_output(g, g.fresh_id(), "b");
  g.connect(in, 0, ew, 0, ValueDesc::block());
  g.connect(ew, 0, out, 0, ValueDesc::block());
  return g;
}

}  // namespace bftest
