#pragma once

// Dense row-major matrices and a reverse-mode tape over them.
//
// A Graph records every operation applied to its Vars in creation order, so
// the node list is already a topological order and backward() only has to
// walk it in reverse. Graphs are cheap and meant to be rebuilt per training
// step; nothing is shared between them.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace pldcp {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix row_vector(std::span<const double> values);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  bool all_finite() const noexcept;
  std::string shape_string() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Plain (non-recorded) kernels shared by the tape and by inference paths.
namespace la {
Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T without materialising the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// a^T * b without materialising the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double frobenius(const Matrix& a);
}  // namespace la

enum class OpKind : std::uint8_t {
  kConstant,
  kParameter,
  kMatMul,
  kAdd,
  kAddRow,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kLeakyRelu,
  kSigmoid,
  kSoftmaxRows,
  kLog,
  kClip,
  kTranspose,
  kSum,
  kMean,
  kMeanRows,
  kRowNorm,
  kCosine,
  kFrobenius,
  kConcatRows,
  kGrl,
  kDetach,
  kCount_,
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  std::size_t id() const noexcept { return id_; }
  Graph& graph() const { return *graph_; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);
  Var parameter(Matrix value);

  const Matrix& value(const Var& v) const { return nodes_[v.id()].value; }
  const Matrix& grad(const Var& v) const;

  /// Accumulates d(loss)/d(node) into every node reachable from `loss`.
  /// Calling it twice without zero_grad() sums both passes.
  void backward(const Var& loss);
  void zero_grad();

  /// When disabled, gradient-reversal nodes pass adjoints through unchanged
  /// and callers building straight-through estimators must fall back to the
  /// hard path, so the tape differentiates exactly the function it evaluates.
  void set_surrogate_gradients(bool enabled) noexcept { surrogates_ = enabled; }
  bool surrogate_gradients() const noexcept { return surrogates_; }

  /// Appends a node. Used by the op functions below; not meant for callers.
  Var record(OpKind op, std::vector<std::size_t> inputs, Matrix value,
             double scalar = 0.0, std::vector<double> extra = {});

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t op_count(OpKind kind) const noexcept {
    return op_counts_[static_cast<std::size_t>(kind)];
  }

 private:
  struct Node {
    OpKind op;
    std::vector<std::size_t> inputs;
    Matrix value;
    Matrix grad;  // lazily sized on first accumulation
    bool requires_grad = false;
    double scalar = 0.0;        // op parameter (scale, slope, lambda, ...)
    std::vector<double> extra;  // op-specific payload (softmax mask, clip range)
  };

  void propagate(const Node& node, const Matrix& adjoint, std::vector<Matrix>& adj);

  std::vector<Node> nodes_;
  std::size_t op_counts_[static_cast<std::size_t>(OpKind::kCount_)] = {};
  bool surrogates_ = true;
};

// Recorded operations. Shape mismatches throw Error(kShape) naming the op and
// both operand shapes.
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
/// a (n x c) plus a 1 x c row broadcast over every row.
Var add_row(const Var& a, const Var& row);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var leaky_relu(const Var& a, double slope = 0.01);
Var sigmoid(const Var& a);
/// Row softmax. With `group` > 0 each row is split into consecutive blocks of
/// that width and normalised per block. Entries with mask == 0 are excluded
/// from the support and come out as exactly 0.
Var softmax_rows(const Var& a, std::size_t group = 0, std::span<const double> mask = {});
Var log(const Var& a);
/// Elementwise clamp to [lo, hi]; gradient is zero where the clamp is active.
Var clip(const Var& a, double lo, double hi);
Var transpose(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
/// Column means, 1 x cols.
Var mean_rows(const Var& a);
/// L2 norm of every row, rows x 1.
Var row_norm(const Var& a);
/// Cosine similarity of every row of `a` with every row of `b`. A zero row
/// yields similarity 0 with zero gradient.
Var cosine(const Var& a, const Var& b);
Var frobenius_norm(const Var& a);
Var concat_rows(std::span<const Var> parts);
/// Gradient reversal: identity forward, adjoint scaled by -lambda backward.
Var grl(const Var& a, double lambda);
/// Identity forward, blocks all gradient.
Var detach(const Var& a);

/// Builds a scalar objective from parameter Vars on the given graph.
using ScalarFn = std::function<Var(Graph&, std::span<const Var>)>;

/// Max over every parameter entry of |autodiff - central difference| /
/// max(1, |central difference|). Surrogate gradients are disabled for the
/// evaluation. Throws Error(kNumeric) naming the parameter index if any
/// evaluation is non-finite.
double grad_check(const ScalarFn& fn, std::span<const Matrix> params, double eps = 1e-5);

}  // namespace pldcp
