#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace blockfuse {

/// Expression tree for elementwise operators. A tree is a pure function of a
/// single variable `x`; named symbolic constants (typically the total element
/// count along a dimension) are resolved when the program is interpreted.
class ScalarExpr {
 public:
  enum class Op {
    Var,
    Const,
    DimTotal,  // count(dim) * block_len(dim), resolved at interpretation
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Sqrt,
    Recip,
    Square,
    Sigmoid,
  };

  using DimResolver = std::function<double(const std::string&)>;

  ScalarExpr() : op_(Op::Var) {}

  static ScalarExpr var() { return ScalarExpr(Op::Var); }
  static ScalarExpr constant(double v) {
    ScalarExpr e(Op::Const);
    e.value_ = v;
    return e;
  }
  static ScalarExpr dim_total(std::string dim) {
    ScalarExpr e(Op::DimTotal);
    e.dim_ = std::move(dim);
    return e;
  }
  static ScalarExpr add(ScalarExpr a, ScalarExpr b) { return binary(Op::Add, std::move(a), std::move(b)); }
  static ScalarExpr sub(ScalarExpr a, ScalarExpr b) { return binary(Op::Sub, std::move(a), std::move(b)); }
  static ScalarExpr mul(ScalarExpr a, ScalarExpr b) { return binary(Op::Mul, std::move(a), std::move(b)); }
  static ScalarExpr div(ScalarExpr a, ScalarExpr b) { return binary(Op::Div, std::move(a), std::move(b)); }
  static ScalarExpr exp(ScalarExpr a) { return unary(Op::Exp, std::move(a)); }
  static ScalarExpr sqrt(ScalarExpr a) { return unary(Op::Sqrt, std::move(a)); }
  static ScalarExpr recip(ScalarExpr a) { return unary(Op::Recip, std::move(a)); }
  static ScalarExpr square(ScalarExpr a) { return unary(Op::Square, std::move(a)); }
  static ScalarExpr sigmoid(ScalarExpr a) { return unary(Op::Sigmoid, std::move(a)); }
  static ScalarExpr swish() { return mul(var(), sigmoid(var())); }

  Op op() const { return op_; }
  double value() const { return value_; }
  const std::string& dim() const { return dim_; }
  const ScalarExpr& lhs() const { return *lhs_; }
  const ScalarExpr& rhs() const { return *rhs_; }
  bool has_rhs() const { return static_cast<bool>(rhs_); }

  double eval(double x, const DimResolver& dims = {}) const {
    switch (op_) {
      case Op::Var: return x;
      case Op::Const: return value_;
      case Op::DimTotal:
        if (!dims) throw std::runtime_error("scalar expr: unresolved dim total " + dim_);
        return dims(dim_);
      case Op::Add: return lhs_->eval(x, dims) + rhs_->eval(x, dims);
      case Op::Sub: return lhs_->eval(x, dims) - rhs_->eval(x, dims);
      case Op::Mul: return lhs_->eval(x, dims) * rhs_->eval(x, dims);
      case Op::Div: return lhs_->eval(x, dims) / rhs_->eval(x, dims);
      case Op::Exp: return std::exp(lhs_->eval(x, dims));
      case Op::Sqrt: return std::sqrt(lhs_->eval(x, dims));
      case Op::Recip: return 1.0 / lhs_->eval(x, dims);
      case Op::Square: {
        double v = lhs_->eval(x, dims);
        return v * v;
      }
      case Op::Sigmoid: return 1.0 / (1.0 + std::exp(-lhs_->eval(x, dims)));
    }
    throw std::runtime_error("scalar expr: bad op");
  }

  /// f.compose(g) is x -> f(g(x)).
  ScalarExpr compose(const ScalarExpr& inner) const {
    switch (op_) {
      case Op::Var: return inner;
      case Op::Const:
      case Op::DimTotal: return *this;
      default: {
        ScalarExpr e(op_);
        e.lhs_ = std::make_shared<ScalarExpr>(lhs_->compose(inner));
        if (rhs_) e.rhs_ = std::make_shared<ScalarExpr>(rhs_->compose(inner));
        return e;
      }
    }
  }

  std::string str() const {
    std::ostringstream os;
    print(os);
    return os.str();
  }

  bool operator==(const ScalarExpr& o) const { return str() == o.str(); }

 private:
  explicit ScalarExpr(Op op) : op_(op) {}
  static ScalarExpr unary(Op op, ScalarExpr a) {
    ScalarExpr e(op);
    e.lhs_ = std::make_shared<ScalarExpr>(std::move(a));
    return e;
  }
  static ScalarExpr binary(Op op, ScalarExpr a, ScalarExpr b) {
    ScalarExpr e(op);
    e.lhs_ = std::make_shared<ScalarExpr>(std::move(a));
    e.rhs_ = std::make_shared<ScalarExpr>(std::move(b));
    return e;
  }

  void print(std::ostringstream& os) const {
    switch (op_) {
      case Op::Var: os << "x"; return;
      case Op::Const: os << value_; return;
      case Op::DimTotal: os << "total(" << dim_ << ")"; return;
      case Op::Add: infix(os, "+"); return;
      case Op::Sub: infix(os, "-"); return;
      case Op::Mul: infix(os, "*"); return;
      case Op::Div: infix(os, "/"); return;
      case Op::Exp: call(os, "exp"); return;
      case Op::Sqrt: call(os, "sqrt"); return;
      case Op::Recip: call(os, "recip"); return;
      case Op::Square: call(os, "square"); return;
      case Op::Sigmoid: call(os, "sigmoid"); return;
    }
  }
  void infix(std::ostringstream& os, const char* sym) const {
    os << "(";
    lhs_->print(os);
    os << " " << sym << " ";
    rhs_->print(os);
    os << ")";
  }
  void call(std::ostringstream& os, const char* name) const {
    os << name << "(";
    lhs_->print(os);
    os << ")";
  }

  Op op_;
  double value_ = 0.0;
  std::string dim_;
  // Children are immutable once built, so sharing keeps copies cheap.
  std::shared_ptr<ScalarExpr> lhs_, rhs_;
};

}  // namespace blockfuse
