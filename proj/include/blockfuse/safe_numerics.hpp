#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "blockfuse/interpreter.hpp"

namespace blockfuse {

/// Software float: the pair (s, t) represents s * e^t. Exponentials of any
/// magnitude stay representable because the exponent is stored, not applied.
struct SEScalar {
  double s = 0.0;
  double t = 0.0;
};

inline SEScalar se_from_real(double x) { return {x, 0.0}; }
inline SEScalar se_exp(double y) { return {1.0, y}; }

inline SEScalar se_mul(SEScalar a, SEScalar b) { return {a.s * b.s, a.t + b.t}; }

/// Rebases both operands to z = max(t1, t2); the internal exponentials stay
/// in (0, 1], so the sum cannot overflow when the inputs are finite.
inline SEScalar se_add(SEScalar a, SEScalar b) {
  double z = std::max(a.t, b.t);
  return {a.s * std::exp(a.t - z) + b.s * std::exp(b.t - z), z};
}

inline SEScalar se_inv(SEScalar a) {
  if (a.s == 0.0) throw Error("se_inv: zero significand");
  return {1.0 / a.s, -a.t};
}

/// May overflow to +/-inf for large exponents; the pair itself stays valid.
inline double se_to_real(SEScalar a, bool* overflowed = nullptr) {
  double v = a.s * std::exp(a.t);
  if (overflowed) *overflowed = !std::isfinite(v);
  return v;
}

enum class SEForm { Shared, RowWise };

/// Block of significands with either one shared exponent or one exponent per
/// row. The row-wise form is the streaming-softmax representation.
struct SEBlock {
  Matrix s;
  SEForm form = SEForm::Shared;
  double t = 0.0;   // Shared
  Vector t_rows;    // RowWise

  static SEBlock from_real(const Matrix& x) {
    SEBlock b;
    b.s = x;
    return b;
  }

  /// e^X with the exponent rebased so no element of the significand exceeds 1.
  static SEBlock exp_of(const Matrix& x, SEForm form) {
    SEBlock b;
    b.form = form;
    if (form == SEForm::Shared) {
      b.t = x.maxCoeff();
      b.s = (x.array() - b.t).exp();
    } else {
      b.t_rows = x.rowwise().maxCoeff();
      b.s = (x.colwise() - b.t_rows).array().exp();
    }
    return b;
  }

  Matrix to_real() const {
    if (form == SEForm::Shared) return s * std::exp(t);
    Matrix r = s;
    for (Eigen::Index i = 0; i < r.rows(); ++i) r.row(i) *= std::exp(t_rows[i]);
    return r;
  }
};

inline SEBlock se_block_add(const SEBlock& a, const SEBlock& b) {
  if (a.form != b.form) throw Error("se_block_add: form mismatch");
  if (a.s.rows() != b.s.rows() || a.s.cols() != b.s.cols()) throw Error("se_block_add: shape mismatch");
  SEBlock r;
  r.form = a.form;
  if (a.form == SEForm::Shared) {
    double z = std::max(a.t, b.t);
    r.t = z;
    r.s = a.s * std::exp(a.t - z) + b.s * std::exp(b.t - z);
  } else {
    r.t_rows = a.t_rows.cwiseMax(b.t_rows);
    r.s.resize(a.s.rows(), a.s.cols());
    for (Eigen::Index i = 0; i < a.s.rows(); ++i)
      r.s.row(i) = a.s.row(i) * std::exp(a.t_rows[i] - r.t_rows[i]) +
                   b.s.row(i) * std::exp(b.t_rows[i] - r.t_rows[i]);
  }
  return r;
}

/// (S1, t1) . (S2, t2) = (S1 . S2, t1 + t2). A row-wise left operand keeps
/// its per-row exponents, since row scalings commute with the product.
inline SEBlock se_block_matmul(const SEBlock& a, const SEBlock& b) {
  if (a.s.cols() != b.s.rows()) throw Error("se_block_matmul: inner dimension mismatch");
  if (b.form != SEForm::Shared) throw Error("se_block_matmul: right operand must have a shared exponent");
  SEBlock r;
  r.form = a.form;
  r.s = a.s * b.s;
  if (a.form == SEForm::Shared) {
    r.t = a.t + b.t;
  } else {
    r.t_rows = a.t_rows.array() + b.t;
  }
  return r;
}

/// Row-wise softmax that streams over column slices, carrying row-wise
/// significand-exponent sums; finite for any finite input.
inline Matrix safe_softmax_rows(const Matrix& x, int col_chunks = 1) {
  if (x.cols() % col_chunks != 0) throw Error("safe_softmax_rows: chunk count must divide columns");
  Eigen::Index w = x.cols() / col_chunks;

  // accumulate per-row denominators as (s, t) pairs
  Vector den_s = Vector::Zero(x.rows());
  Vector den_t = Vector::Constant(x.rows(), -std::numeric_limits<double>::infinity());
  for (int c = 0; c < col_chunks; ++c) {
    Matrix chunk = x.middleCols(c * w, w);
    SEBlock e = SEBlock::exp_of(chunk, SEForm::RowWise);
    Vector part = e.s.rowwise().sum();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      double z = std::max(den_t[i], e.t_rows[i]);
      double base = den_t[i] == -std::numeric_limits<double>::infinity() ? 0.0
                                                                         : den_s[i] * std::exp(den_t[i] - z);
      den_s[i] = base + part[i] * std::exp(e.t_rows[i] - z);
      den_t[i] = z;
    }
  }
  // den_t now holds the running row maxima; every exponent below is <= 0
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    out.row(i) = (x.row(i).array() - den_t[i]).exp() / den_s[i];
  return out;
}

/// The fused attention kernel with the streaming rescale: numerator and
/// denominator accumulate in row-wise significand-exponent form while the
/// key/value blocks are consumed one slice at a time.
inline Matrix safe_attention_rows(const Matrix& q, const Matrix& k, const Matrix& vt,
                                  int row_chunks = 1) {
  if (k.rows() != vt.cols()) throw Error("safe_attention_rows: key/value sizes disagree");
  if (k.rows() % row_chunks != 0) throw Error("safe_attention_rows: chunk count must divide keys");
  Eigen::Index h = k.rows() / row_chunks;
  double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));

  Matrix num_s = Matrix::Zero(q.rows(), vt.rows());
  Vector den_s = Vector::Zero(q.rows());
  Vector t = Vector::Constant(q.rows(), -std::numeric_limits<double>::infinity());
  for (int c = 0; c < row_chunks; ++c) {
    Matrix s = (q * k.middleRows(c * h, h).transpose()) * scale;
    SEBlock e = SEBlock::exp_of(s, SEForm::RowWise);
    Matrix v_slice = vt.middleCols(c * h, h).transpose();  // h x L
    Matrix num_part = e.s * v_slice;
    Vector den_part = e.s.rowwise().sum();
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      double z = std::max(t[i], e.t_rows[i]);
      double rebase = t[i] == -std::numeric_limits<double>::infinity() ? 0.0 : std::exp(t[i] - z);
      double fresh = std::exp(e.t_rows[i] - z);
      num_s.row(i) = num_s.row(i) * rebase + num_part.row(i) * fresh;
      den_s[i] = den_s[i] * rebase + den_part[i] * fresh;
      t[i] = z;
    }
  }
  Matrix out = num_s;
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) /= den_s[i];
  return out;
}

}  // namespace blockfuse
