#include "pldcp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "pldcp/error.hpp"

namespace pldcp {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kData: return "data";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kCheckpoint: return "checkpoint";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Matrix

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw Error(ErrorKind::kShape, "Matrix: " + std::to_string(rows) + "x" +
                                       std::to_string(cols) + " needs " +
                                       std::to_string(rows * cols) + " values, got " +
                                       std::to_string(data_.size()));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw Error(ErrorKind::kShape, "Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

[[noreturn]] void shape_error(std::string_view op, const Matrix& a, const Matrix& b) {
  throw Error(ErrorKind::kShape, std::string(op) + ": incompatible shapes " +
                                     a.shape_string() + " and " + b.shape_string());
}

void require_same(std::string_view op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a, b);
}

// c += a * b. Four rows of `a` share each streamed row of `b`.
void gemm_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    double* c0 = c.row(i).data();
    double* c1 = c.row(i + 1).data();
    double* c2 = c.row(i + 2).data();
    double* c3 = c.row(i + 3).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double a0 = a(i, p), a1 = a(i + 1, p), a2 = a(i + 2, p), a3 = a(i + 3, p);
      const double* bp = b.row(p).data();
      for (std::size_t j = 0; j < m; ++j) {
        const double bv = bp[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < n; ++i) {
    double* ci = c.row(i).data();
    const double* ai = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b.row(p).data();
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c += a * b^T
void gemm_nt_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t n = a.rows(), m = b.rows(), k = a.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a.row(i).data();
    std::size_t j = 0;
    for (; j + 4 <= m; j += 4) {
      const double* b0 = b.row(j).data();
      const double* b1 = b.row(j + 1).data();
      const double* b2 = b.row(j + 2).data();
      const double* b3 = b.row(j + 3).data();
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ai[p];
        s0 += av * b0[p];
        s1 += av * b1[p];
        s2 += av * b2[p];
        s3 += av * b3[p];
      }
      c(i, j) += s0;
      c(i, j + 1) += s1;
      c(i, j + 2) += s2;
      c(i, j + 3) += s3;
    }
    for (; j < m; ++j) c(i, j) += la::dot(a.row(i), b.row(j));
  }
}

// c += a^T * b. Four rows of `a`/`b` are folded into each pass over c.
void gemm_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const double* b0 = b.row(i).data();
    const double* b1 = b.row(i + 1).data();
    const double* b2 = b.row(i + 2).data();
    const double* b3 = b.row(i + 3).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double a0 = a(i, p), a1 = a(i + 1, p), a2 = a(i + 2, p), a3 = a(i + 3, p);
      double* cp = c.row(p).data();
      for (std::size_t j = 0; j < m; ++j) cp[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
  }
  for (; i < n; ++i) {
    const double* ai = a.row(i).data();
    const double* bi = b.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      double* cp = c.row(p).data();
      for (std::size_t j = 0; j < m; ++j) cp[j] += aip * bi[j];
    }
  }
}

}  // namespace

namespace la {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  Matrix c(a.rows(), b.cols());
  gemm_acc(a, b, c);
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) shape_error("matmul_nt", a, b);
  Matrix c(a.rows(), b.rows());
  gemm_nt_acc(a, b, c);
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) shape_error("matmul_tn", a, b);
  Matrix c(a.cols(), b.cols());
  gemm_tn_acc(a, b, c);
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double frobenius(const Matrix& a) { return norm2(a.data()); }

}  // namespace la

// ---------------------------------------------------------------------------
// Graph

const Matrix& Var::value() const { return graph_->value(*this); }
const Matrix& Var::grad() const { return graph_->grad(*this); }

Var Graph::record(OpKind op, std::vector<std::size_t> inputs, Matrix value,
                  double scalar, std::vector<double> extra) {
  Node node;
  node.op = op;
  node.requires_grad = op == OpKind::kParameter;
  if (op != OpKind::kDetach) {
    for (std::size_t in : inputs) node.requires_grad |= nodes_[in].requires_grad;
  }
  node.inputs = std::move(inputs);
  node.value = std::move(value);
  node.scalar = scalar;
  node.extra = std::move(extra);
  nodes_.push_back(std::move(node));
  ++op_counts_[static_cast<std::size_t>(op)];
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Matrix value) { return record(OpKind::kConstant, {}, std::move(value)); }

Var Graph::parameter(Matrix value) {
  return record(OpKind::kParameter, {}, std::move(value));
}

const Matrix& Graph::grad(const Var& v) const {
  Node& node = const_cast<Node&>(nodes_[v.id()]);
  if (node.grad.empty() && !node.value.empty()) {
    node.grad = Matrix(node.value.rows(), node.value.cols());
  }
  return node.grad;
}

void Graph::zero_grad() {
  for (auto& node : nodes_) node.grad = Matrix();
}

void Graph::backward(const Var& loss) {
  const Matrix& lv = nodes_[loss.id()].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw Error(ErrorKind::kShape, "backward: loss must be 1x1, got " + lv.shape_string());
  }
  // Fresh adjoints for this pass; persistent grads accumulate across passes.
  std::vector<Matrix> adj(loss.id() + 1);
  adj[loss.id()] = Matrix(1, 1, 1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    if (adj[i].empty()) continue;
    Node& node = nodes_[i];
    if (!node.requires_grad) continue;
    if (node.grad.empty()) node.grad = Matrix(node.value.rows(), node.value.cols());
    auto g = node.grad.data();
    auto a = adj[i].data();
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += a[k];
    propagate(node, adj[i], adj);
    adj[i] = Matrix();
  }
}

namespace {

Matrix& slot(std::vector<Matrix>& adj, std::size_t id, const Matrix& like) {
  Matrix& m = adj[id];
  if (m.empty()) m = Matrix(like.rows(), like.cols());
  return m;
}

}  // namespace

void Graph::propagate(const Node& node, const Matrix& g, std::vector<Matrix>& adj) {
  const auto& in = node.inputs;
  auto needs = [&](std::size_t k) { return nodes_[in[k]].requires_grad; };
  auto target = [&](std::size_t k) -> Matrix& {
    return slot(adj, in[k], nodes_[in[k]].value);
  };
  auto input = [&](std::size_t k) -> const Matrix& { return nodes_[in[k]].value; };
  const Matrix& y = node.value;

  switch (node.op) {
    case OpKind::kConstant:
    case OpKind::kParameter:
    case OpKind::kDetach:
      return;
    case OpKind::kMatMul:
      if (needs(0)) gemm_nt_acc(g, input(1), target(0));
      if (needs(1)) gemm_tn_acc(input(0), g, target(1));
      return;
    case OpKind::kAdd:
    case OpKind::kSub: {
      const double sign_b = node.op == OpKind::kSub ? -1.0 : 1.0;
      if (needs(0)) {
        auto t = target(0).data();
        for (std::size_t k = 0; k < t.size(); ++k) t[k] += g.data()[k];
      }
      if (needs(1)) {
        auto t = target(1).data();
        for (std::size_t k = 0; k < t.size(); ++k) t[k] += sign_b * g.data()[k];
      }
      return;
    }
    case OpKind::kAddRow:
      if (needs(0)) {
        auto t = target(0).data();
        for (std::size_t k = 0; k < t.size(); ++k) t[k] += g.data()[k];
      }
      if (needs(1)) {
        Matrix& t = target(1);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) t(0, j) += g(i, j);
      }
      return;
    case OpKind::kMul:
      if (needs(0)) {
        auto t = target(0).data();
        auto b = input(1).data();
        for (std::size_t k = 0; k < t.size(); ++k) t[k] += g.data()[k] * b[k];
      }
      if (needs(1)) {
        auto t = target(1).data();
        auto a = input(0).data();
        for (std::size_t k = 0; k < t.size(); ++k) t[k] += g.data()[k] * a[k];
      }
      return;
    case OpKind::kScale: {
      auto t = target(0).data();
      for (std::size_t k = 0; k < t.size(); ++k) t[k] += node.scalar * g.data()[k];
      return;
    }
    case OpKind::kAddScalar:
    case OpKind::kTranspose:
      if (node.op == OpKind::kTranspose) {
        Matrix& t = target(0);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) t(j, i) += g(i, j);
      } else {
        auto t = target(0).data();
        for (std::size_t k = 0; k < t.size(); ++k) t[k] += g.data()[k];
      }
      return;
    case OpKind::kLeakyRelu: {
      auto t = target(0).data();
      auto x = input(0).data();
      for (std::size_t k = 0; k < t.size(); ++k)
        t[k] += g.data()[k] * (x[k] > 0.0 ? 1.0 : node.scalar);
      return;
    }
    case OpKind::kSigmoid: {
      auto t = target(0).data();
      auto s = y.data();
      for (std::size_t k = 0; k < t.size(); ++k) t[k] += g.data()[k] * s[k] * (1.0 - s[k]);
      return;
    }
    case OpKind::kSoftmaxRows: {
      Matrix& t = target(0);
      const std::size_t group = static_cast<std::size_t>(node.scalar);
      for (std::size_t i = 0; i < y.rows(); ++i) {
        for (std::size_t start = 0; start < y.cols(); start += group) {
          double inner = 0.0;
          for (std::size_t j = start; j < start + group; ++j) inner += y(i, j) * g(i, j);
          // Masked entries have y == 0 and so receive no gradient.
          for (std::size_t j = start; j < start + group; ++j)
            t(i, j) += y(i, j) * (g(i, j) - inner);
        }
      }
      return;
    }
    case OpKind::kLog: {
      auto t = target(0).data();
      auto x = input(0).data();
      for (std::size_t k = 0; k < t.size(); ++k) t[k] += g.data()[k] / x[k];
      return;
    }
    case OpKind::kClip: {
      auto t = target(0).data();
      auto x = input(0).data();
      const double lo = node.extra[0], hi = node.extra[1];
      for (std::size_t k = 0; k < t.size(); ++k)
        if (x[k] >= lo && x[k] <= hi) t[k] += g.data()[k];
      return;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      auto t = target(0).data();
      const double w =
          node.op == OpKind::kSum ? g(0, 0) : g(0, 0) / static_cast<double>(t.size());
      for (double& v : t) v += w;
      return;
    }
    case OpKind::kMeanRows: {
      Matrix& t = target(0);
      const double inv = 1.0 / static_cast<double>(t.rows());
      for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) t(i, j) += g(0, j) * inv;
      return;
    }
    case OpKind::kRowNorm: {
      Matrix& t = target(0);
      const Matrix& x = input(0);
      for (std::size_t i = 0; i < x.rows(); ++i) {
        if (y(i, 0) == 0.0) continue;
        const double w = g(i, 0) / y(i, 0);
        for (std::size_t j = 0; j < x.cols(); ++j) t(i, j) += w * x(i, j);
      }
      return;
    }
    case OpKind::kCosine: {
      const Matrix& a = input(0);
      const Matrix& b = input(1);
      const auto& norms = node.extra;  // |a_i| then |b_j|
      const std::size_t n = a.rows(), m = b.rows(), h = a.cols();
      Matrix* ta = needs(0) ? &target(0) : nullptr;
      Matrix* tb = needs(1) ? &target(1) : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        const double na = norms[i];
        if (na == 0.0) continue;
        for (std::size_t j = 0; j < m; ++j) {
          const double nb = norms[n + j];
          if (nb == 0.0) continue;
          const double gij = g(i, j);
          if (gij == 0.0) continue;
          const double c = y(i, j);
          const double inv = 1.0 / (na * nb);
          if (ta) {
            const double ka = c / (na * na);
            for (std::size_t p = 0; p < h; ++p)
              (*ta)(i, p) += gij * (b(j, p) * inv - ka * a(i, p));
          }
          if (tb) {
            const double kb = c / (nb * nb);
            for (std::size_t p = 0; p < h; ++p)
              (*tb)(j, p) += gij * (a(i, p) * inv - kb * b(j, p));
          }
        }
      }
      return;
    }
    case OpKind::kFrobenius: {
      if (y(0, 0) == 0.0) return;
      auto t = target(0).data();
      auto x = input(0).data();
      const double w = g(0, 0) / y(0, 0);
      for (std::size_t k = 0; k < t.size(); ++k) t[k] += w * x[k];
      return;
    }
    case OpKind::kConcatRows: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < in.size(); ++k) {
        const Matrix& part = input(k);
        if (needs(k)) {
          Matrix& t = target(k);
          for (std::size_t i = 0; i < part.rows(); ++i)
            for (std::size_t j = 0; j < part.cols(); ++j) t(i, j) += g(offset + i, j);
        }
        offset += part.rows();
      }
      return;
    }
    case OpKind::kGrl: {
      const double factor = surrogates_ ? -node.scalar : 1.0;
      auto t = target(0).data();
      for (std::size_t k = 0; k < t.size(); ++k) t[k] += factor * g.data()[k];
      return;
    }
    case OpKind::kCount_:
      break;
  }
}

// ---------------------------------------------------------------------------
// Recorded ops

namespace {

template <typename F>
Matrix map(const Matrix& a, F f) {
  Matrix out(a.rows(), a.cols());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t k = 0; k < src.size(); ++k) dst[k] = f(src[k]);
  return out;
}

Graph& same_graph(std::string_view op, const Var& a, const Var& b) {
  if (&a.graph() != &b.graph()) {
    throw Error(ErrorKind::kShape, std::string(op) + ": operands belong to different graphs");
  }
  return a.graph();
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Graph& g = same_graph("matmul", a, b);
  return g.record(OpKind::kMatMul, {a.id(), b.id()}, la::matmul(a.value(), b.value()));
}

Var add(const Var& a, const Var& b) {
  Graph& g = same_graph("add", a, b);
  require_same("add", a.value(), b.value());
  Matrix out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t k = 0; k < o.size(); ++k) o[k] += bv[k];
  return g.record(OpKind::kAdd, {a.id(), b.id()}, std::move(out));
}

Var add_row(const Var& a, const Var& row) {
  Graph& g = same_graph("add_row", a, row);
  const Matrix& r = row.value();
  if (r.rows() != 1 || r.cols() != a.value().cols()) shape_error("add_row", a.value(), r);
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += r(0, j);
  return g.record(OpKind::kAddRow, {a.id(), row.id()}, std::move(out));
}

Var sub(const Var& a, const Var& b) {
  Graph& g = same_graph("sub", a, b);
  require_same("sub", a.value(), b.value());
  Matrix out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t k = 0; k < o.size(); ++k) o[k] -= bv[k];
  return g.record(OpKind::kSub, {a.id(), b.id()}, std::move(out));
}

Var mul(const Var& a, const Var& b) {
  Graph& g = same_graph("mul", a, b);
  require_same("mul", a.value(), b.value());
  Matrix out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t k = 0; k < o.size(); ++k) o[k] *= bv[k];
  return g.record(OpKind::kMul, {a.id(), b.id()}, std::move(out));
}

Var scale(const Var& a, double s) {
  return a.graph().record(OpKind::kScale, {a.id()},
                          map(a.value(), [s](double v) { return s * v; }), s);
}

Var add_scalar(const Var& a, double s) {
  return a.graph().record(OpKind::kAddScalar, {a.id()},
                          map(a.value(), [s](double v) { return v + s; }), s);
}

Var leaky_relu(const Var& a, double slope) {
  return a.graph().record(OpKind::kLeakyRelu, {a.id()},
                          map(a.value(), [slope](double v) { return v > 0.0 ? v : slope * v; }),
                          slope);
}

Var sigmoid(const Var& a) {
  return a.graph().record(OpKind::kSigmoid, {a.id()}, map(a.value(), [](double v) {
                            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
                            const double e = std::exp(v);
                            return e / (1.0 + e);
                          }));
}

Var softmax_rows(const Var& a, std::size_t group, std::span<const double> mask) {
  const Matrix& x = a.value();
  if (group == 0) group = x.cols();
  if (group == 0 || x.cols() % group != 0) {
    throw Error(ErrorKind::kShape, "softmax_rows: group width " + std::to_string(group) +
                                       " does not divide " + x.shape_string());
  }
  if (!mask.empty() && mask.size() != x.cols()) {
    throw Error(ErrorKind::kShape, "softmax_rows: mask length " + std::to_string(mask.size()) +
                                       " does not match " + x.shape_string());
  }
  auto keep = [&](std::size_t j) { return mask.empty() || mask[j] != 0.0; };
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t start = 0; start < x.cols(); start += group) {
      double hi = -std::numeric_limits<double>::infinity();
      for (std::size_t j = start; j < start + group; ++j)
        if (keep(j)) hi = std::max(hi, x(i, j));
      if (!std::isfinite(hi)) continue;  // whole block masked: stays zero
      double total = 0.0;
      for (std::size_t j = start; j < start + group; ++j) {
        if (!keep(j)) continue;
        out(i, j) = std::exp(x(i, j) - hi);
        total += out(i, j);
      }
      for (std::size_t j = start; j < start + group; ++j) out(i, j) /= total;
    }
  }
  return a.graph().record(OpKind::kSoftmaxRows, {a.id()}, std::move(out),
                          static_cast<double>(group));
}

Var log(const Var& a) {
  return a.graph().record(OpKind::kLog, {a.id()},
                          map(a.value(), [](double v) { return std::log(v); }));
}

Var clip(const Var& a, double lo, double hi) {
  return a.graph().record(OpKind::kClip, {a.id()},
                          map(a.value(), [lo, hi](double v) { return std::clamp(v, lo, hi); }),
                          0.0, {lo, hi});
}

Var transpose(const Var& a) {
  return a.graph().record(OpKind::kTranspose, {a.id()}, la::transpose(a.value()));
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph().record(OpKind::kSum, {a.id()}, Matrix(1, 1, s));
}

Var mean(const Var& a) {
  const Matrix& x = a.value();
  if (x.empty()) throw Error(ErrorKind::kShape, "mean: empty operand");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return a.graph().record(OpKind::kMean, {a.id()},
                          Matrix(1, 1, s / static_cast<double>(x.size())));
}

Var mean_rows(const Var& a) {
  const Matrix& x = a.value();
  if (x.rows() == 0) throw Error(ErrorKind::kShape, "mean_rows: no rows in " + x.shape_string());
  Matrix out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
  for (double& v : out.data()) v /= static_cast<double>(x.rows());
  return a.graph().record(OpKind::kMeanRows, {a.id()}, std::move(out));
}

Var row_norm(const Var& a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) out(i, 0) = la::norm2(x.row(i));
  return a.graph().record(OpKind::kRowNorm, {a.id()}, std::move(out));
}

Var cosine(const Var& a, const Var& b) {
  Graph& g = same_graph("cosine", a, b);
  const Matrix& x = a.value();
  const Matrix& z = b.value();
  if (x.cols() != z.cols()) shape_error("cosine", x, z);
  std::vector<double> norms(x.rows() + z.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) norms[i] = la::norm2(x.row(i));
  for (std::size_t j = 0; j < z.rows(); ++j) norms[x.rows() + j] = la::norm2(z.row(j));
  Matrix out = la::matmul_nt(x, z);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < z.rows(); ++j) {
      const double denom = norms[i] * norms[x.rows() + j];
      out(i, j) = denom == 0.0 ? 0.0 : std::clamp(out(i, j) / denom, -1.0, 1.0);
    }
  }
  return g.record(OpKind::kCosine, {a.id(), b.id()}, std::move(out), 0.0, std::move(norms));
}

Var frobenius_norm(const Var& a) {
  return a.graph().record(OpKind::kFrobenius, {a.id()}, Matrix(1, 1, la::frobenius(a.value())));
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw Error(ErrorKind::kShape, "concat_rows: no operands");
  Graph& g = parts.front().graph();
  const std::size_t cols = parts.front().value().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    if (&p.graph() != &g) throw Error(ErrorKind::kShape, "concat_rows: mixed graphs");
    if (p.value().cols() != cols) shape_error("concat_rows", parts.front().value(), p.value());
    rows += p.value().rows();
    ids.push_back(p.id());
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const Var& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  return g.record(OpKind::kConcatRows, std::move(ids), Matrix(rows, cols, std::move(data)));
}

Var grl(const Var& a, double lambda) {
  if (!(lambda >= 0.0)) {
    throw Error(ErrorKind::kConfig, "grl: lambda must be non-negative, got " + std::to_string(lambda));
  }
  return a.graph().record(OpKind::kGrl, {a.id()}, a.value(), lambda);
}

Var detach(const Var& a) { return a.graph().record(OpKind::kDetach, {a.id()}, a.value()); }

// ---------------------------------------------------------------------------
// Gradient check

double grad_check(const ScalarFn& fn, std::span<const Matrix> params, double eps) {
  std::vector<Matrix> work(params.begin(), params.end());

  auto evaluate = [&](bool with_grad, std::vector<Matrix>* grads) {
    Graph graph;
    graph.set_surrogate_gradients(false);
    std::vector<Var> vars;
    vars.reserve(work.size());
    for (const Matrix& p : work) vars.push_back(graph.parameter(p));
    Var out = fn(graph, vars);
    if (out.rows() != 1 || out.cols() != 1) {
      throw Error(ErrorKind::kShape, "grad_check: function must return 1x1, got " +
                                         out.value().shape_string());
    }
    if (with_grad) {
      graph.backward(out);
      for (const Var& v : vars) grads->push_back(graph.grad(v));
    }
    return out.value()(0, 0);
  };

  std::vector<Matrix> analytic;
  const double base = evaluate(true, &analytic);
  if (!std::isfinite(base)) {
    throw Error(ErrorKind::kNumeric, "grad_check: non-finite value at the unperturbed point");
  }

  double worst = 0.0;
  for (std::size_t p = 0; p < work.size(); ++p) {
    auto values = work[p].data();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double original = values[k];
      values[k] = original + eps;
      const double up = evaluate(false, nullptr);
      values[k] = original - eps;
      const double down = evaluate(false, nullptr);
      values[k] = original;
      const double fd = (up - down) / (2.0 * eps);
      const double ad = analytic[p].data()[k];
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(ad)) {
        throw Error(ErrorKind::kNumeric, "grad_check: non-finite value at parameter " +
                                             std::to_string(p) + " entry " + std::to_string(k));
      }
      worst = std::max(worst, std::abs(ad - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace pldcp
