#include <catch2/catch_amalgamated.hpp>

#include "blockfuse/interpreter.hpp"
#include "blockfuse/lowering.hpp"
#include "blockfuse/metrics.hpp"
#include "blockfuse/serialize.hpp"

using namespace blockfuse;

namespace {

DimBinding bind2(std::initializer_list<std::string> dims, int count = 2, int len = 3) {
  DimBinding b;
  for (const auto& d : dims) b.dims[d] = {count, len};
  return b;
}

int top_maps(const BlockGraph& g) {
  int n = 0;
  for (const auto& [id, node] : g.nodes)
    if (is_operator(node.kind)) n++;
  return n;
}

}  // namespace

TEST_CASE("single elementwise op lowers to nested maps") {
  ArrayProgram p;
  NodeId x = p.input("X", "M", "N");
  NodeId e = p.op("elementwise", {x},
                  ScalarExpr::div(ScalarExpr::sub(ScalarExpr::var(), ScalarExpr::constant(1)),
                                  ScalarExpr::constant(2)));
  p.output("Y", e);
  BlockGraph g = lower(p);
  REQUIRE(validate(g).empty());
  REQUIRE(top_maps(g) == 1);
  // the one operator is a map over M whose inner holds a map over N
  for (const auto& [id, n] : g.nodes)
    if (n.kind == NodeKind::Map) {
      CHECK(n.dim == "M");
      int inner_maps = 0;
      for (const auto& [iid, in] : n.inner->nodes)
        if (in.kind == NodeKind::Map) {
          inner_maps++;
          CHECK(in.dim == "N");
        }
      CHECK(inner_maps == 1);
    }

  DimBinding b = bind2({"M", "N"});
  Matrix x0 = Matrix::Random(6, 6);
  auto out = execute(g, {{"X", x0}}, b);
  CHECK(max_rel_error(out.at("Y"), ref::elementwise(x0, ScalarExpr::div(
                                                             ScalarExpr::sub(ScalarExpr::var(),
                                                                             ScalarExpr::constant(1)),
                                                             ScalarExpr::constant(2)))) < 1e-12);
}

TEST_CASE("empty array program lowers to inputs wired to outputs") {
  ArrayProgram p;
  NodeId x = p.input("X", "M", "N");
  p.output("Y", x);
  BlockGraph g = lower(p);
  REQUIRE(validate(g).empty());
  CHECK(top_maps(g) == 0);
  CHECK(g.nodes.size() == 2);
}

TEST_CASE("unregistered operators fall back to miscellaneous nodes") {
  ArrayProgram p;
  NodeId x = p.input("X", "M", "N");
  NodeId s = p.op("sort_rows", {x});
  p.output("Y", s);
  BlockGraph g = lower(p);
  REQUIRE(validate(g).empty());
  bool found = false;
  for (const auto& [id, n] : g.nodes)
    if (n.kind == NodeKind::Misc && n.name == "sort_rows") found = true;
  CHECK(found);
}

TEST_CASE("attention lowers to the expected top level") {
  BlockGraph g = lower(examples::attention());
  REQUIRE(validate(g).empty());
  // two matrix multiplications, one divide, four softmax operators
  CHECK(top_maps(g) == 7);
  for (const auto& [id, n] : g.nodes)
    if (n.kind == NodeKind::Map) CHECK(n.dim == "M");
}

TEST_CASE("layernorm+matmul lowers to eight top-level operators") {
  BlockGraph g = lower(examples::layernorm_matmul());
  REQUIRE(validate(g).empty());
  CHECK(top_maps(g) == 8);
}

TEST_CASE("rmsnorm+ffn-swiglu lowers to nine top-level operators") {
  BlockGraph g = lower(examples::rms_ffn_swiglu());
  REQUIRE(validate(g).empty());
  CHECK(top_maps(g) == 9);
}

TEST_CASE("lowering the same program twice gives isomorphic graphs") {
  auto g1 = lower(examples::attention());
  auto g2 = lower(examples::attention());
  CHECK(canonical_form(g1) == canonical_form(g2));
}

TEST_CASE("template oracle: every registered template matches its dense reference") {
  std::mt19937_64 seeds(2024);
  auto rand_m = [&](Eigen::Index r, Eigen::Index c) {
    std::normal_distribution<double> d(0.0, 1.0);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = d(seeds);
    return m;
  };

  const int trials = 5;  // each template below; the acceptance suite runs 20
  for (int t = 0; t < trials; ++t) {
    DimBinding b = bind2({"M", "N", "K"});
    int rows = 6, cols = 6;

    SECTION("ew/matmul/softmax/norms trial " + std::to_string(t)) {}

    {
      ArrayProgram p;
      NodeId x = p.input("X", "M", "K");
      NodeId yt = p.input("Yt", "N", "K", true);
      p.output("O", p.op("matmul", {x, yt}));
      Matrix mx = rand_m(rows, cols), myt = rand_m(rows, cols);
      auto out = execute(lower(p), {{"X", mx}, {"Yt", myt}}, b);
      CHECK(max_rel_error(out.at("O"), ref::matmul(mx, myt)) < 1e-12);
    }
    {
      ArrayProgram p;
      NodeId x = p.input("X", "M", "N");
      p.output("O", p.op("softmax", {x}));
      Matrix mx = rand_m(rows, cols);
      auto out = execute(lower(p), {{"X", mx}}, b);
      CHECK(max_rel_error(out.at("O"), ref::softmax_rows(mx)) < 1e-12);
    }
    {
      ArrayProgram p;
      NodeId x = p.input("X", "M", "K");
      p.output("O", p.op("layernorm", {x}));
      Matrix mx = rand_m(rows, cols);
      auto out = execute(lower(p), {{"X", mx}}, b);
      CHECK(max_rel_error(out.at("O"), ref::layernorm(mx)) < 1e-10);
    }
    {
      ArrayProgram p;
      NodeId x = p.input("X", "M", "K");
      p.output("O", p.op("rmsnorm", {x}));
      Matrix mx = rand_m(rows, cols);
      auto out = execute(lower(p), {{"X", mx}}, b);
      CHECK(max_rel_error(out.at("O"), ref::rmsnorm(mx)) < 1e-10);
    }
    {
      ArrayProgram p;
      NodeId x = p.input("X", "M", "N");
      NodeId y = p.input("Y", "M", "N");
      p.output("O", p.op("hadamard", {x, y}));
      Matrix mx = rand_m(rows, cols), my = rand_m(rows, cols);
      auto out = execute(lower(p), {{"X", mx}, {"Y", my}}, b);
      CHECK(max_rel_error(out.at("O"), ref::hadamard(mx, my)) < 1e-12);
    }
    {
      ArrayProgram p;
      NodeId x = p.input("X", "M", "N");
      p.output("O", p.op("swish", {x}));
      Matrix mx = rand_m(rows, cols);
      auto out = execute(lower(p), {{"X", mx}}, b);
      CHECK(max_rel_error(out.at("O"), ref::swish(mx)) < 1e-12);
    }
  }
}

TEST_CASE("full example programs match their dense references") {
  DimBinding b;
  for (const std::string d : {"M", "N", "D", "L", "K"}) b.dims[d] = {2, 4};

  SECTION("attention") {
    BlockGraph g = lower(examples::attention());
    auto specs = input_specs(g, b);
    auto in = random_inputs(specs, 5);
    auto out = execute(g, in, b);
    CHECK(max_rel_error(out.at("O"), ref::attention(in["Q"], in["K"], in["Vt"])) < 1e-10);
  }
  SECTION("layernorm+matmul") {
    BlockGraph g = lower(examples::layernorm_matmul());
    auto in = random_inputs(input_specs(g, b), 6);
    auto out = execute(g, in, b);
    CHECK(max_rel_error(out.at("O"), ref::layernorm_matmul(in["X"], in["Yt"])) < 1e-10);
  }
  SECTION("rmsnorm+ffn-swiglu") {
    BlockGraph g = lower(examples::rms_ffn_swiglu());
    auto in = random_inputs(input_specs(g, b), 7);
    auto out = execute(g, in, b);
    CHECK(max_rel_error(out.at("O"), ref::rms_ffn_swiglu(in["X"], in["Wt"], in["Vt"], in["Ut"])) <
          1e-10);
  }
}
