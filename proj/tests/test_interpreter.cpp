#include <catch2/catch_amalgamated.hpp>

#include "blockfuse/interpreter.hpp"
#include "blockfuse/lowering.hpp"
#include "test_util.hpp"

using namespace blockfuse;

namespace {
Matrix random_matrix(Eigen::Index r, Eigen::Index c, unsigned long long seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = dist(rng) * scale;
  return m;
}
}  // namespace

TEST_CASE("split and assemble") {
  Matrix m = random_matrix(4, 4, 1);
  Value grid = split_into_blocks(m, 2, 2);
  REQUIRE(grid.list().size() == 2);
  REQUIRE(grid.list()[0].list().size() == 2);
  CHECK(grid.list()[1].list()[0].block() == m.block(2, 0, 2, 2));

  SECTION("1x1 split is the identity") {
    Value one = split_into_blocks(m, 1, 1);
    CHECK(assemble(one) == m);
  }
  SECTION("round trip on random matrices") {
    for (unsigned long long s = 0; s < 5; ++s) {
      Matrix x = random_matrix(6, 8, s);
      CHECK(assemble(split_into_blocks(x, 3, 2)) == x);
      CHECK(assemble(split_into_blocks(x, 2, 4)) == x);
    }
  }
  SECTION("non-divisible shapes are rejected") {
    CHECK_THROWS_AS(split_into_blocks(m, 3, 1), Error);
  }
  SECTION("assembling an empty nesting fails") {
    CHECK_THROWS_AS(assemble(Value(ValueList{})), Error);
  }
}

TEST_CASE("identity elementwise program returns its input") {
  BlockGraph g = bftest::single_elementwise(0, 1);
  DimBinding b;
  Matrix in = random_matrix(4, 4, 7);
  auto out = execute(g, {{"a", in}}, b);
  CHECK(max_rel_error(out.at("b"), in) == 0.0);
}

TEST_CASE("map and reduction semantics over blocked rows") {
  // row sums of a matrix split along columns: map{row_sum} then a fold
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
  REQUIRE(validate(g).empty());

  DimBinding b;
  b.dims["K"] = {3, 2};
  Matrix x = random_matrix(4, 6, 3);
  auto res = execute(g, {{"X", x}}, b);
  Matrix expect = x.rowwise().sum();
  CHECK(max_rel_error(res.at("S"), expect) < 1e-12);
}

TEST_CASE("misc nodes need a registered executor") {
  BlockGraph g;
  NodeId in = mk_input(g, g.fresh_id(), "a", ValueDesc::block(), "", "");
  NodeId misc = mk_misc(g, g.fresh_id(), "reverse_rows");
  NodeId out = mk_output(g, g.fresh_id(), "b");
  g.connect(in, 0, misc, 0, ValueDesc::block());
  g.connect(misc, 0, out, 0, ValueDesc::block());

  Matrix x = random_matrix(3, 3, 11);
  DimBinding b;
  CHECK_THROWS_WITH(execute(g, {{"a", x}}, b), Catch::Matchers::ContainsSubstring("reverse_rows"));

  ExecOptions opts;
  opts.misc["reverse_rows"] = [](const std::vector<Value>& in) {
    Matrix m = in[0].block().rowwise().reverse();
    return std::vector<Value>{Value(std::move(m))};
  };
  auto res = execute(g, {{"a", x}}, b, opts);
  CHECK(res.at("b") == x.rowwise().reverse());
}

TEST_CASE("unbound dimension errors") {
  BlockGraph g = bftest::relu_matmul(false);
  DimBinding b;  // nothing bound
  CHECK_THROWS_WITH(execute(g, {{"A", random_matrix(4, 4, 0)}, {"Bt", random_matrix(4, 4, 1)}}, b),
                    Catch::Matchers::ContainsSubstring("unbound"));
}

TEST_CASE("dense reference functions") {
  SECTION("softmax rows sum to one") {
    Matrix x = random_matrix(5, 7, 21);
    Matrix p = ref::softmax_rows(x);
    for (Eigen::Index i = 0; i < p.rows(); ++i) CHECK(p.row(i).sum() == Catch::Approx(1.0));
  }
  SECTION("layernorm of constant rows is zero") {
    Matrix x = Matrix::Constant(3, 5, 2.5);
    CHECK(ref::layernorm(x).isZero());
  }
  SECTION("standard deviation formula at s1=0, s2=k") {
    // sigma = sqrt(s2/k - (s1/k)^2)
    double k = 8, s1 = 0, s2 = 8;
    CHECK(std::sqrt(s2 / k - (s1 / k) * (s1 / k)) == Catch::Approx(1.0));
  }
  SECTION("rmsnorm rows have unit mean square") {
    Matrix x = random_matrix(4, 6, 5);
    Matrix r = ref::rmsnorm(x);
    for (Eigen::Index i = 0; i < r.rows(); ++i)
      CHECK(r.row(i).squaredNorm() / r.cols() == Catch::Approx(1.0));
  }
  SECTION("attention matches its composition") {
    Matrix q = random_matrix(4, 6, 1), k = random_matrix(8, 6, 2), vt = random_matrix(5, 8, 3);
    Matrix o = ref::attention(q, k, vt);
    Matrix s = (q * k.transpose()) / std::sqrt(6.0);
    CHECK(max_rel_error(o, ref::softmax_rows(s) * vt.transpose()) < 1e-15);
  }
}

TEST_CASE("check_equivalence distinguishes same from different") {
  BlockGraph g = bftest::relu_matmul(false);
  DimBinding b;
  b.dims["M"] = {2, 3};
  b.dims["N"] = {2, 3};
  b.free_len = 5;

  SECTION("a program equals its clone exactly") {
    auto rep = check_equivalence(g, deep_clone(g).graph, b, 5, 42, 0.0);
    CHECK(rep.pass);
    CHECK(rep.max_rel == 0.0);
  }
  SECTION("fused and unfused forms agree") {
    auto rep = check_equivalence(g, bftest::relu_matmul(true), b, 10, 7, 1e-12);
    CHECK(rep.pass);
  }
  SECTION("different functions fail") {
    BlockGraph other = bftest::single_elementwise(0, 1);
    auto rep = check_equivalence(g, other, b, 2, 1, 1e-8);
    CHECK_FALSE(rep.pass);
  }
}

TEST_CASE("map iteration order does not matter") {
  // permuting the iteration order of a map changes nothing: compare against
  // an input with permuted blocks and a matching output permutation
  BlockGraph g = bftest::relu_matmul(false);
  DimBinding b;
  b.dims["M"] = {3, 2};
  b.dims["N"] = {2, 2};
  b.free_len = 4;
  Matrix a = random_matrix(6, 4, 13), bt = random_matrix(4, 4, 14);
  auto out = execute(g, {{"A", a}, {"Bt", bt}}, b);

  Matrix a_perm(6, 4);
  a_perm << a.middleRows(4, 2), a.middleRows(0, 2), a.middleRows(2, 2);
  auto out_perm = execute(g, {{"A", a_perm}, {"Bt", bt}}, b);
  Matrix expect(6, 4);
  expect << out.at("R").middleRows(4, 2), out.at("R").middleRows(0, 2), out.at("R").middleRows(2, 2);
  CHECK(max_rel_error(out_perm.at("R"), expect) == 0.0);
}

TEST_CASE("serial and pairwise reductions agree closely") {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> xs(64);
    for (double& x : xs) x = dist(rng);
    double serial = 0;
    for (double x : xs) serial += x;
    std::vector<double> tree = xs;
    while (tree.size() > 1) {
      std::vector<double> nxt;
      for (size_t i = 0; i + 1 < tree.size(); i += 2) nxt.push_back(tree[i] + tree[i + 1]);
      if (tree.size() % 2) nxt.push_back(tree.back());
      tree = nxt;
    }
    CHECK(std::abs(serial - tree[0]) <= 1e-10 * std::max(1.0, std::abs(serial)));
  }
}
