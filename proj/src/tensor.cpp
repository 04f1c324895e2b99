#include "posattn/tensor.hpp"

#include <cmath>
#include <memory>

namespace posattn {

namespace {

std::string dims(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

const Tape::Node& Tape::node(int id) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size()))
    throw std::runtime_error("tape: stale or foreign Var (id " + std::to_string(id) + ")");
  return nodes_[id];
}

Tape::Node& Tape::node(int id) {
  return const_cast<Node&>(static_cast<const Tape*>(this)->node(id));
}

Var Tape::leaf(Mat value, bool requires_grad) {
  Node n;
  n.val = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::emit(Mat value, bool requires_grad, std::function<void()> back, const char* op) {
  if (check_finite && !value.allFinite())
    throw numeric_error(std::string(op) + ": non-finite output (numeric overflow)");
  Node n;
  n.val = std::move(value);
  n.requires_grad = requires_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Mat& Tape::grad_buf(int id) {
  Node& n = node(id);
  if (!n.grad_set) {
    n.grad = Mat::Zero(n.val.rows(), n.val.cols());
    n.grad_set = true;
  }
  return n.grad;
}

const Mat& Tape::grad(Var v) const {
  const Node& n = node(v.id);
  if (!n.grad_set) throw std::runtime_error("tape: gradient not computed for this Var");
  return n.grad;
}

void Tape::backward(Var loss) {
  const Node& ln = node(loss.id);
  if (ln.val.rows() != 1 || ln.val.cols() != 1)
    throw std::runtime_error("backward: loss must be scalar, got " + dims(ln.val));
  for (auto& n : nodes_) n.grad_set = false;
  grad_buf(loss.id).setConstant(1.0);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad_set && n.requires_grad && n.back) n.back();
  }
  // leaves off every path to the loss still report an exact zero gradient
  for (auto& n : nodes_) {
    if (n.requires_grad && !n.grad_set) {
      n.grad = Mat::Zero(n.val.rows(), n.val.cols());
      n.grad_set = true;
    }
  }
}

void Tape::clear() { nodes_.clear(); }

// ---- ops -------------------------------------------------------------------
// Pattern: the new node's id equals t.size() at emission time, so backward
// lambdas capture `out` by value before calling emit.

Var matmul(Tape& t, Var a, Var b) {
  const Mat& A = t.val(a);
  const Mat& B = t.val(b);
  if (A.cols() != B.rows())
    throw shape_error("matmul: incompatible shapes " + dims(A) + " and " + dims(B));
  const int out = t.size();
  return t.emit(A * B, t.requires_grad(a) || t.requires_grad(b), [&t, a, b, out]() {
    const Mat& g = t.grad_buf(out);
    if (t.requires_grad(a)) t.grad_buf(a.id).noalias() += g * t.val(b).transpose();
    if (t.requires_grad(b)) t.grad_buf(b.id).noalias() += t.val(a).transpose() * g;
  }, "matmul");
}

Var transpose(Tape& t, Var a) {
  const int out = t.size();
  return t.emit(t.val(a).transpose(), t.requires_grad(a), [&t, a, out]() {
    if (t.requires_grad(a)) t.grad_buf(a.id) += t.grad_buf(out).transpose();
  }, "transpose");
}

Var add(Tape& t, Var a, Var b) {
  const Mat& A = t.val(a);
  const Mat& B = t.val(b);
  if (A.rows() != B.rows() || A.cols() != B.cols())
    throw shape_error("add: shape mismatch " + dims(A) + " vs " + dims(B));
  const int out = t.size();
  return t.emit(A + B, t.requires_grad(a) || t.requires_grad(b), [&t, a, b, out]() {
    const Mat& g = t.grad_buf(out);
    if (t.requires_grad(a)) t.grad_buf(a.id) += g;
    if (t.requires_grad(b)) t.grad_buf(b.id) += g;
  }, "add");
}

Var sub(Tape& t, Var a, Var b) {
  const Mat& A = t.val(a);
  const Mat& B = t.val(b);
  if (A.rows() != B.rows() || A.cols() != B.cols())
    throw shape_error("sub: shape mismatch " + dims(A) + " vs " + dims(B));
  const int out = t.size();
  return t.emit(A - B, t.requires_grad(a) || t.requires_grad(b), [&t, a, b, out]() {
    const Mat& g = t.grad_buf(out);
    if (t.requires_grad(a)) t.grad_buf(a.id) += g;
    if (t.requires_grad(b)) t.grad_buf(b.id) -= g;
  }, "sub");
}

Var mul(Tape& t, Var a, Var b) {
  const Mat& A = t.val(a);
  const Mat& B = t.val(b);
  if (A.rows() != B.rows() || A.cols() != B.cols())
    throw shape_error("mul: shape mismatch " + dims(A) + " vs " + dims(B));
  const int out = t.size();
  return t.emit(A.cwiseProduct(B), t.requires_grad(a) || t.requires_grad(b), [&t, a, b, out]() {
    const Mat& g = t.grad_buf(out);
    if (t.requires_grad(a)) t.grad_buf(a.id) += g.cwiseProduct(t.val(b));
    if (t.requires_grad(b)) t.grad_buf(b.id) += g.cwiseProduct(t.val(a));
  }, "mul");
}

Var scale(Tape& t, Var a, double s) {
  const int out = t.size();
  return t.emit(t.val(a) * s, t.requires_grad(a), [&t, a, s, out]() {
    if (t.requires_grad(a)) t.grad_buf(a.id) += t.grad_buf(out) * s;
  }, "scale");
}

Var add_rowvec(Tape& t, Var x, Var bias) {
  const Mat& X = t.val(x);
  const Mat& B = t.val(bias);
  if (B.rows() != 1 || B.cols() != X.cols())
    throw shape_error("add_rowvec: bias " + dims(B) + " does not broadcast over " + dims(X));
  const int out = t.size();
  Mat v = X;
  v.rowwise() += B.row(0);
  return t.emit(std::move(v), t.requires_grad(x) || t.requires_grad(bias), [&t, x, bias, out]() {
    const Mat& g = t.grad_buf(out);
    if (t.requires_grad(x)) t.grad_buf(x.id) += g;
    if (t.requires_grad(bias)) t.grad_buf(bias.id).row(0) += g.colwise().sum();
  }, "add_rowvec");
}

Var relu(Tape& t, Var a) {
  const int out = t.size();
  return t.emit(t.val(a).cwiseMax(0.0), t.requires_grad(a), [&t, a, out]() {
    if (!t.requires_grad(a)) return;
    const Mat& g = t.grad_buf(out);
    const Mat& A = t.val(a);
    t.grad_buf(a.id).array() += g.array() * (A.array() > 0.0).cast<double>();
  }, "relu");
}

Var softmax_rows(Tape& t, Var a) {
  const Mat& A = t.val(a);
  Mat y(A.rows(), A.cols());
  for (Eigen::Index r = 0; r < A.rows(); ++r) {
    const double mx = A.row(r).maxCoeff();
    y.row(r) = (A.row(r).array() - mx).exp();
    y.row(r) /= y.row(r).sum();
  }
  const int out = t.size();
  return t.emit(std::move(y), t.requires_grad(a), [&t, a, out]() {
    if (!t.requires_grad(a)) return;
    const Mat& g = t.grad_buf(out);
    const Mat& y = t.val(Var{out});
    Mat& ga = t.grad_buf(a.id);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      ga.row(r).array() += (g.row(r).array() - dot) * y.row(r).array();
    }
  }, "softmax_rows");
}

Var concat_cols(Tape& t, Var a, Var b) {
  const Mat& A = t.val(a);
  const Mat& B = t.val(b);
  if (A.rows() != B.rows())
    throw shape_error("concat_cols: row mismatch " + dims(A) + " vs " + dims(B));
  Mat v(A.rows(), A.cols() + B.cols());
  v.leftCols(A.cols()) = A;
  v.rightCols(B.cols()) = B;
  const int out = t.size();
  const int ac = static_cast<int>(A.cols());
  const int bc = static_cast<int>(B.cols());
  return t.emit(std::move(v), t.requires_grad(a) || t.requires_grad(b), [&t, a, b, ac, bc, out]() {
    const Mat& g = t.grad_buf(out);
    if (t.requires_grad(a)) t.grad_buf(a.id) += g.leftCols(ac);
    if (t.requires_grad(b)) t.grad_buf(b.id) += g.rightCols(bc);
  }, "concat_cols");
}

Var slice_cols(Tape& t, Var a, int start, int count) {
  const Mat& A = t.val(a);
  if (start < 0 || count < 0 || start + count > A.cols())
    throw shape_error("slice_cols: range [" + std::to_string(start) + ", " +
                      std::to_string(start + count) + ") outside " + dims(A));
  const int out = t.size();
  return t.emit(A.middleCols(start, count), t.requires_grad(a), [&t, a, start, count, out]() {
    if (t.requires_grad(a)) t.grad_buf(a.id).middleCols(start, count) += t.grad_buf(out);
  }, "slice_cols");
}

Var slice_rows(Tape& t, Var a, int start, int count) {
  const Mat& A = t.val(a);
  if (start < 0 || count < 0 || start + count > A.rows())
    throw shape_error("slice_rows: range [" + std::to_string(start) + ", " +
                      std::to_string(start + count) + ") outside " + dims(A));
  const int out = t.size();
  return t.emit(A.middleRows(start, count), t.requires_grad(a), [&t, a, start, count, out]() {
    if (t.requires_grad(a)) t.grad_buf(a.id).middleRows(start, count) += t.grad_buf(out);
  }, "slice_rows");
}

Var gather_rows(Tape& t, Var a, const std::vector<int>& rows) {
  const Mat& A = t.val(a);
  for (int r : rows)
    if (r < 0 || r >= A.rows())
      throw shape_error("gather_rows: index " + std::to_string(r) + " outside " + dims(A));
  Mat v(static_cast<Eigen::Index>(rows.size()), A.cols());
  for (size_t i = 0; i < rows.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = A.row(rows[i]);
  const int out = t.size();
  return t.emit(std::move(v), t.requires_grad(a), [&t, a, rows, out]() {
    if (!t.requires_grad(a)) return;
    const Mat& g = t.grad_buf(out);
    Mat& ga = t.grad_buf(a.id);
    for (size_t i = 0; i < rows.size(); ++i)
      ga.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
  }, "gather_rows");
}

Var reshape(Tape& t, Var a, int rows, int cols) {
  const Mat& A = t.val(a);
  if (rows * cols != A.rows() * A.cols())
    throw shape_error("reshape: cannot view " + dims(A) + " as " + std::to_string(rows) + "x" +
                      std::to_string(cols));
  Mat v(rows, cols);
  // row-major reinterpretation of the underlying buffer
  Eigen::Map<const Eigen::RowVectorXd> flat(A.data(), A.size());
  Eigen::Map<Eigen::RowVectorXd>(v.data(), v.size()) = flat;
  const int out = t.size();
  return t.emit(std::move(v), t.requires_grad(a), [&t, a, out]() {
    if (!t.requires_grad(a)) return;
    Mat& ga = t.grad_buf(a.id);
    const Mat& g = t.grad_buf(out);
    Eigen::Map<Eigen::RowVectorXd>(ga.data(), ga.size()) +=
        Eigen::Map<const Eigen::RowVectorXd>(g.data(), g.size());
  }, "reshape");
}

Var sum_all(Tape& t, Var a) {
  Mat v(1, 1);
  v(0, 0) = t.val(a).sum();
  const int out = t.size();
  return t.emit(std::move(v), t.requires_grad(a), [&t, a, out]() {
    if (t.requires_grad(a)) t.grad_buf(a.id).array() += t.grad_buf(out)(0, 0);
  }, "sum_all");
}

Var mse_masked(Tape& t, Var pred, const Mat& target, const Mat& mask) {
  const Mat& P = t.val(pred);
  if (P.rows() != target.rows() || P.cols() != target.cols())
    throw shape_error("mse_masked: pred " + dims(P) + " vs target " + dims(target));
  if (P.rows() != mask.rows() || P.cols() != mask.cols())
    throw shape_error("mse_masked: pred " + dims(P) + " vs mask " + dims(mask));
  const double count = mask.sum();
  if (count <= 0.0) throw std::runtime_error("mse_masked: mask selects no entries");
  Mat diff = (P - target).cwiseProduct(mask);
  Mat v(1, 1);
  v(0, 0) = diff.squaredNorm() / count;
  const int out = t.size();
  return t.emit(std::move(v), t.requires_grad(pred),
                [&t, pred, d = std::move(diff), count, out]() {
    if (t.requires_grad(pred))
      t.grad_buf(pred.id) += (2.0 / count) * t.grad_buf(out)(0, 0) * d;
  }, "mse_masked");
}

Var attend_shared(Tape& t, Var A, Var Z, int block) {
  const Mat& a = t.val(A);
  const Mat& z = t.val(Z);
  if (a.rows() != block || a.cols() != block)
    throw shape_error("attend_shared: A " + dims(a) + " is not " + std::to_string(block) + "x" +
                      std::to_string(block));
  if (z.rows() % block != 0)
    throw shape_error("attend_shared: Z " + dims(z) + " not a multiple of block " +
                      std::to_string(block));
  const Eigen::Index nb = z.rows() / block;
  Mat v(z.rows(), z.cols());
  for (Eigen::Index b = 0; b < nb; ++b)
    v.middleRows(b * block, block).noalias() = a * z.middleRows(b * block, block);
  const int out = t.size();
  return t.emit(std::move(v), t.requires_grad(A) || t.requires_grad(Z),
                [&t, A, Z, block, nb, out]() {
    const Mat& g = t.grad_buf(out);
    const Mat& a = t.val(A);
    const Mat& z = t.val(Z);
    if (t.requires_grad(A)) {
      Mat& ga = t.grad_buf(A.id);
      for (Eigen::Index b = 0; b < nb; ++b)
        ga.noalias() += g.middleRows(b * block, block) * z.middleRows(b * block, block).transpose();
    }
    if (t.requires_grad(Z)) {
      Mat& gz = t.grad_buf(Z.id);
      for (Eigen::Index b = 0; b < nb; ++b)
        gz.middleRows(b * block, block).noalias() +=
            a.transpose() * g.middleRows(b * block, block);
    }
  }, "attend_shared");
}

Var attend_blocks(Tape& t, Var A, Var Z, int block) {
  const Mat& a = t.val(A);
  const Mat& z = t.val(Z);
  if (a.cols() != block || a.rows() != z.rows() || z.rows() % block != 0)
    throw shape_error("attend_blocks: A " + dims(a) + " incompatible with Z " + dims(z) +
                      " at block " + std::to_string(block));
  const Eigen::Index nb = z.rows() / block;
  Mat v(z.rows(), z.cols());
  for (Eigen::Index b = 0; b < nb; ++b)
    v.middleRows(b * block, block).noalias() =
        a.middleRows(b * block, block) * z.middleRows(b * block, block);
  const int out = t.size();
  return t.emit(std::move(v), t.requires_grad(A) || t.requires_grad(Z),
                [&t, A, Z, block, nb, out]() {
    const Mat& g = t.grad_buf(out);
    const Mat& a = t.val(A);
    const Mat& z = t.val(Z);
    if (t.requires_grad(A)) {
      Mat& ga = t.grad_buf(A.id);
      for (Eigen::Index b = 0; b < nb; ++b)
        ga.middleRows(b * block, block).noalias() +=
            g.middleRows(b * block, block) * z.middleRows(b * block, block).transpose();
    }
    if (t.requires_grad(Z)) {
      Mat& gz = t.grad_buf(Z.id);
      for (Eigen::Index b = 0; b < nb; ++b)
        gz.middleRows(b * block, block).noalias() +=
            a.middleRows(b * block, block).transpose() * g.middleRows(b * block, block);
    }
  }, "attend_blocks");
}

Var block_outer(Tape& t, Var Q, Var K, int block) {
  const Mat& q = t.val(Q);
  const Mat& k = t.val(K);
  if (q.rows() != k.rows() || q.cols() != k.cols() || q.rows() % block != 0)
    throw shape_error("block_outer: Q " + dims(q) + " vs K " + dims(k) + " at block " +
                      std::to_string(block));
  const Eigen::Index nb = q.rows() / block;
  Mat v(q.rows(), block);
  for (Eigen::Index b = 0; b < nb; ++b)
    v.middleRows(b * block, block).noalias() =
        q.middleRows(b * block, block) * k.middleRows(b * block, block).transpose();
  const int out = t.size();
  return t.emit(std::move(v), t.requires_grad(Q) || t.requires_grad(K),
                [&t, Q, K, block, nb, out]() {
    const Mat& g = t.grad_buf(out);
    const Mat& q = t.val(Q);
    const Mat& k = t.val(K);
    if (t.requires_grad(Q)) {
      Mat& gq = t.grad_buf(Q.id);
      for (Eigen::Index b = 0; b < nb; ++b)
        gq.middleRows(b * block, block).noalias() +=
            g.middleRows(b * block, block) * k.middleRows(b * block, block);
    }
    if (t.requires_grad(K)) {
      Mat& gk = t.grad_buf(K.id);
      for (Eigen::Index b = 0; b < nb; ++b)
        gk.middleRows(b * block, block).noalias() +=
            g.middleRows(b * block, block).transpose() * q.middleRows(b * block, block);
    }
  }, "block_outer");
}

namespace {

// Precomputed per-row cos/sin tables for one block; reused forward and backward.
struct RopeTables {
  Mat c, s;  // block x d/2
};

RopeTables rope_tables(const std::vector<int>& positions, int d, double base) {
  const int half = d / 2;
  RopeTables tb;
  tb.c.resize(static_cast<int>(positions.size()), half);
  tb.s.resize(static_cast<int>(positions.size()), half);
  for (size_t r = 0; r < positions.size(); ++r) {
    for (int i = 0; i < half; ++i) {
      const double theta = positions[r] * std::pow(base, -2.0 * i / d);
      tb.c(static_cast<int>(r), i) = std::cos(theta);
      tb.s(static_cast<int>(r), i) = std::sin(theta);
    }
  }
  return tb;
}

}  // namespace

Var rope_rows(Tape& t, Var Q, const std::vector<int>& positions, double base) {
  const Mat& q = t.val(Q);
  const int block = static_cast<int>(positions.size());
  if (block == 0 || q.rows() % block != 0)
    throw shape_error("rope_rows: " + std::to_string(block) + " positions for " + dims(q));
  if (q.cols() % 2 != 0)
    throw shape_error("rope_rows: feature width must be even, got " + dims(q));
  const int d = static_cast<int>(q.cols());
  auto tb = std::make_shared<RopeTables>(rope_tables(positions, d, base));
  const Eigen::Index nb = q.rows() / block;
  Mat v(q.rows(), d);
  for (Eigen::Index b = 0; b < nb; ++b) {
    for (int r = 0; r < block; ++r) {
      const Eigen::Index row = b * block + r;
      for (int i = 0; i < d / 2; ++i) {
        const double x0 = q(row, 2 * i), x1 = q(row, 2 * i + 1);
        v(row, 2 * i) = x0 * tb->c(r, i) - x1 * tb->s(r, i);
        v(row, 2 * i + 1) = x0 * tb->s(r, i) + x1 * tb->c(r, i);
      }
    }
  }
  const int out = t.size();
  return t.emit(std::move(v), t.requires_grad(Q), [&t, Q, tb, block, nb, d, out]() {
    if (!t.requires_grad(Q)) return;
    const Mat& g = t.grad_buf(out);
    Mat& gq = t.grad_buf(Q.id);
    // inverse rotation on the gradient (rotations are orthogonal)
    for (Eigen::Index b = 0; b < nb; ++b) {
      for (int r = 0; r < block; ++r) {
        const Eigen::Index row = b * block + r;
        for (int i = 0; i < d / 2; ++i) {
          const double g0 = g(row, 2 * i), g1 = g(row, 2 * i + 1);
          gq(row, 2 * i) += g0 * tb->c(r, i) + g1 * tb->s(r, i);
          gq(row, 2 * i + 1) += -g0 * tb->s(r, i) + g1 * tb->c(r, i);
        }
      }
    }
  }, "rope_rows");
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Mat& point, double step) {
  Tape t;
  Var x = t.leaf(point, true);
  Var y = f(t, x);
  t.backward(y);
  Mat analytic = t.grad(x);

  double worst = 0.0;
  Mat p = point;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      const double keep = p(i, j);
      p(i, j) = keep + step;
      Tape tp;
      const double up = tp.val(f(tp, tp.leaf(p, false)))(0, 0);
      p(i, j) = keep - step;
      Tape tm;
      const double dn = tm.val(f(tm, tm.leaf(p, false)))(0, 0);
      p(i, j) = keep;
      const double fd = (up - dn) / (2.0 * step);
      const double a = analytic(i, j);
      worst = std::max(worst, std::abs(a - fd) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

}  // namespace posattn
