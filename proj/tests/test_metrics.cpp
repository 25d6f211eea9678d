#include <catch2/catch_amalgamated.hpp>

#include "blockfuse/engine.hpp"
#include "blockfuse/lowering.hpp"
#include "blockfuse/metrics.hpp"
#include "test_util.hpp"

using namespace blockfuse;

TEST_CASE("internal buffered edges vanish exactly at full fusion") {
  for (auto make : {examples::attention, examples::layernorm_matmul, examples::rms_ffn_swiglu}) {
    BlockGraph g = lower(make());
    CHECK(internal_buffered_edges(g) > 0);
    auto result = fuse(g);
    CHECK(internal_buffered_edges(result.snapshots.back().program) == 0);
  }
}

TEST_CASE("a straight-line program has no internal buffered edges") {
  BlockGraph g = bftest::single_elementwise(1, 2);
  CHECK(internal_buffered_edges(g) == 0);
}

TEST_CASE("rule 3 removes exactly one internal buffered edge") {
  BlockGraph g;
  NodeId in = mk_input(g, g.fresh_id(), "X", ValueDesc::list_of(Base::Block, {"K"}), "", "K");
  BlockGraph mi;
  NodeId bi = mk_boundary_in(mi, g.fresh_id());
  NodeId rs = mk_func(mi, g.fresh_id(), FuncKind::RowSum);
  NodeId bo = mk_boundary_out(mi, g.fresh_id());
  mi.connect(bi, 0, rs, 0, ValueDesc::block());
  mi.connect(rs, 0, bo, 0, ValueDesc::vector());
  NodeId m = mk_map(g, g.fresh_id(), "K", std::move(mi), {PortMode::Iterate});
  NodeId red = mk_reduce(g, g.fresh_id());
  NodeId out = mk_output(g, g.fresh_id(), "S");
  g.connect(in, 0, m, 0, ValueDesc::list_of(Base::Block, {"K"}));
  g.connect(m, 0, red, 0, ValueDesc::list_of(Base::Vector, {"K"}));
  g.connect(red, 0, out, 0, ValueDesc::vector());

  int before = internal_buffered_edges(g);
  auto match = match_map_reduction(g);
  REQUIRE(match);
  apply(g, *match);
  CHECK(internal_buffered_edges(g) == before - 1);
}

TEST_CASE("kernel counts") {
  SECTION("empty program") {
    BlockGraph g;
    CHECK(kernel_count(g) == 0);
  }
  SECTION("attention: seven top-level operators collapse to one") {
    BlockGraph g = lower(examples::attention());
    CHECK(kernel_count(g) == 7);
    Trace t;
    fuse_no_extend(g, {}, EngineConfig{}, t);
    CHECK(kernel_count(g) == 1);
  }
  SECTION("layernorm+matmul top level collapses to one") {
    BlockGraph g = lower(examples::layernorm_matmul());
    CHECK(kernel_count(g) == 8);
    Trace t;
    fuse_no_extend(g, {}, EngineConfig{}, t);
    CHECK(kernel_count(g) == 1);
  }
}

TEST_CASE("fusing the warm-up kernel saves one write and one read of the intermediate") {
  BlockGraph unfused = bftest::relu_matmul(false);
  BlockGraph fused = bftest::relu_matmul(true);
  DimBinding b;
  b.dims["M"] = {2, 3};
  b.dims["N"] = {2, 3};
  b.free_len = 4;
  TrafficModel model{8};

  // hand count: A and Bt are 6x4 and the product is 6x6
  std::uint64_t i_elems = 36;
  std::uint64_t t_unfused = traffic_bytes(unfused, b, model);
  std::uint64_t t_fused = traffic_bytes(fused, b, model);
  CHECK(t_unfused - t_fused == 2 * i_elems * 8);

  SECTION("fully fused traffic is inputs plus outputs") {
    std::uint64_t a = 24, bt = 24, o = 36;
    CHECK(t_fused == (a + bt + o) * 8);
  }
  SECTION("the driver reproduces the hand-fused kernel's traffic") {
    auto result = fuse(unfused);
    CHECK(traffic_bytes(result.snapshots.back().program, b, model) == t_fused);
  }
}

TEST_CASE("traffic of block-grid edges depends on element counts, not the grid") {
  // every buffered value in this program is a grid of blocks, so refining the
  // grid at a fixed total size moves the same bytes
  BlockGraph g = bftest::relu_matmul(false);
  DimBinding coarse, fine;
  for (const std::string d : {"M", "N"}) {
    coarse.dims[d] = {2, 6};
    fine.dims[d] = {4, 3};
  }
  coarse.free_len = 4;
  fine.free_len = 4;
  CHECK(traffic_bytes(g, coarse) == traffic_bytes(g, fine));
}

TEST_CASE("buffered-edge counts never increase under the applicable rules") {
  // R4 and R8 leave the internal count unchanged at the level they fire
  BlockGraph g = lower(examples::rms_ffn_swiglu());
  Trace t;
  fuse_no_extend(g, {}, EngineConfig{}, t);
  GraphPath path;
  for (const auto& [id, n] : g.nodes)
    if (n.kind == NodeKind::Map) path = {id};

  int before = internal_buffered_edges(g);
  auto m8 = match_duplicate_scale(g, path);
  REQUIRE(m8);
  apply(g, *m8);
  CHECK(internal_buffered_edges(g) == before);

  before = internal_buffered_edges(g);
  auto m4 = match_scale_dot(g, path);
  REQUIRE(m4);
  apply(g, *m4);
  CHECK(internal_buffered_edges(g) == before);
}

TEST_CASE("metrics report bundles the three quantities") {
  BlockGraph g = lower(examples::attention());
  DimBinding b;
  for (const std::string d : {"M", "N", "D", "L"}) b.dims[d] = {2, 4};
  auto rep = metrics_report(g, b, TrafficModel{4});
  CHECK(rep.kernels == 7);
  CHECK(rep.internal_buffered > 0);
  CHECK(rep.traffic > 0);
}
