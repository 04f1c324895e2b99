#pragma once

#include <Eigen/Dense>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace posattn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Handle into a Tape. A Var plus its tape is what the docs call a tensor:
// a dense 64-bit float matrix with an optional gradient buffer.
struct Var {
  int id = -1;
};

// Reverse-mode tape. Operations append nodes in topological order; backward
// walks the list once in reverse. Single-threaded by design: one tape (and
// the tensors on it) belongs to one worker at a time.
class Tape {
 public:
  Var leaf(Mat value, bool requires_grad = false);

  const Mat& val(Var v) const { return node(v.id).val; }
  const Mat& grad(Var v) const;
  bool requires_grad(Var v) const { return node(v.id).requires_grad; }

  // Seeds d(loss)/d(loss) = 1 and applies every recorded backward rule in
  // reverse order. loss must be 1x1.
  void backward(Var loss);

  void clear();
  int size() const { return static_cast<int>(nodes_.size()); }

  // When set, every forward op checks its output for NaN/Inf and throws
  // numeric_error on overflow. Costs a few percent; kept on everywhere.
  bool check_finite = true;

  // internal: used by the op implementations
  Var emit(Mat value, bool requires_grad, std::function<void()> back, const char* op);
  Mat& grad_buf(int id);
  bool grad_set(int id) const { return nodes_[id].grad_set; }

 private:
  struct Node {
    Mat val;
    Mat grad;
    bool requires_grad = false;
    bool grad_set = false;
    std::function<void()> back;
  };
  const Node& node(int id) const;
  Node& node(int id);
  std::vector<Node> nodes_;
};

// ---- primitive ops ---------------------------------------------------------

Var matmul(Tape& t, Var a, Var b);
Var transpose(Tape& t, Var a);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);  // elementwise
Var scale(Tape& t, Var a, double s);
Var add_rowvec(Tape& t, Var x, Var bias);  // bias is 1xd, broadcast over rows
Var relu(Tape& t, Var a);
Var softmax_rows(Tape& t, Var a);  // max-subtracted, rows sum to 1
Var concat_cols(Tape& t, Var a, Var b);
Var slice_cols(Tape& t, Var a, int start, int count);
Var slice_rows(Tape& t, Var a, int start, int count);
Var gather_rows(Tape& t, Var a, const std::vector<int>& rows);  // repeatable row pick
Var reshape(Tape& t, Var a, int rows, int cols);  // row-major reinterpret
Var sum_all(Tape& t, Var a);  // 1x1

// Mean squared error over the entries where mask is nonzero; scalar output.
Var mse_masked(Tape& t, Var pred, const Mat& target, const Mat& mask);

// ---- batched sequence ops --------------------------------------------------
// Samples are stacked vertically: a batch of B sequences of k rows each is a
// (B*k) x d matrix. block = k below.

// One attention matrix shared by every sample: out_b = A * Z_b. A is k x k.
Var attend_shared(Tape& t, Var A, Var Z, int block);

// Per-sample attention stacked like the data: A is (B*k) x k, out_b = A_b * Z_b.
Var attend_blocks(Tape& t, Var A, Var Z, int block);

// Per-sample outer products: out is (B*k) x k with out_b = Q_b * K_b^T.
Var block_outer(Tape& t, Var Q, Var K, int block);

// Rotary rotation: row r of each block is rotated in coordinate pairs
// (2i, 2i+1) by angle positions[r] * base^(-2i/d). d must be even.
Var rope_rows(Tape& t, Var Q, const std::vector<int>& positions, double base = 10000.0);

// ---- gradient checking -----------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued function of one matrix input.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Mat& point, double step);

}  // namespace posattn
