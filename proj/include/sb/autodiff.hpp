#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include <Eigen/Dense>

namespace sb {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

inline constexpr double kMasked = -std::numeric_limits<double>::infinity();

namespace ad {

/// Handle to a node recorded on a Tape. Only meaningful for the tape that produced it.
struct Var {
  std::size_t id = 0;
};

class Tape;

using BackwardFn = std::function<void(Tape&, const Mat& out_grad)>;

/// Reverse-mode tape over a fixed vocabulary of dense matrix operations.
///
/// Nodes are appended in evaluation order, so a single reverse sweep is a valid
/// topological order. A node's backward closure is only stored when at least
/// one of its inputs requires a gradient; value-only passes record no closures.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(Mat value);
  Var leaf(Mat value);
  /// Records a node that aliases external storage; the referent must outlive the tape.
  Var external(const Mat& value, bool requires_grad);

  Var record(Mat value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Mat value, const std::vector<Var>& inputs, BackwardFn fn);

  const Mat& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  double scalar(Var v) const;

  /// Gradient accumulated at v by the last backward(); zeros if unreached.
  Mat grad(Var v) const;
  /// Mutable gradient buffer, allocated on first use. For op implementations.
  Mat& grad_buffer(Var v);

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and sweeps the tape in reverse.
  void backward(Var out);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat owned;
    const Mat* alias = nullptr;
    Mat grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Elementwise and shape ops.
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var add_scalar(Tape& t, Var a, double s);
Var add_row(Tape& t, Var a, Var row);  // a (n x m) + row (1 x m) broadcast
Var matmul(Tape& t, Var a, Var b);
Var matmul_nt(Tape& t, Var a, Var b);  // a * b^T
Var slice_rows(Tape& t, Var a, std::size_t begin, std::size_t count);
Var concat_rows(Tape& t, const std::vector<Var>& parts);
Var gather_rows(Tape& t, Var table, const std::vector<std::size_t>& rows);
Var sum(Tape& t, Var a);
Var mean(Tape& t, Var a);

// Nonlinearities.
Var gelu(Tape& t, Var a);
Var tanh(Tape& t, Var a);
/// log(max(a, floor)); gradient is zero where the floor is active.
Var log_floor(Tape& t, Var a, double floor);

/// Row-wise layer normalization with per-column gain and bias (both 1 x m).
Var layer_norm(Tape& t, Var a, Var gain, Var bias, double eps = 1e-5);

/// Sets entries above the diagonal to kMasked.
Var causal_mask(Tape& t, Var a);
/// Row-wise softmax over columns j <= i (entries above the diagonal become 0).
Var softmax_causal(Tape& t, Var a);
/// Row-wise log-softmax over all columns.
Var log_softmax(Tape& t, Var a);
/// Mean over rows of the cosine similarity between matching rows of a and b.
/// Throws std::domain_error(what) if any row has zero norm.
Var mean_row_cosine(Tape& t, Var a, Var b, const char* what);

}  // namespace ad
}  // namespace sb
