#pragma once

// Dense row-major matrices with reverse-mode gradient recording.
//
// A Tensor is a shared handle to a node holding a value, an optional gradient
// buffer and, for results of recorded operations, the inputs and the backward
// rule. Nodes are numbered in recording order; backward() replays the rules of
// every reachable node in reverse order of that numbering.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "gpldan/errors.hpp"

namespace gpldan::numgrad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Tensor;

/// Backward rule of a recorded operation. Receives the operation's output value
/// and the gradient flowing into it; accumulates into inputs that require grad.
using BackwardFn =
    std::function<void(const Matrix& out_value, const Matrix& out_grad, std::span<Tensor> inputs)>;

namespace detail {

struct Node;

inline std::atomic<std::uint64_t>& sequence_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

}  // namespace detail

/// While alive, operations on this thread are evaluated without recording.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor constant(Matrix value) { return Tensor(std::move(value), false); }
  static Tensor parameter(Matrix value) { return Tensor(std::move(value), true); }
  static Tensor scalar(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  /// Result of a primitive operation. Recorded only when grad mode is on and
  /// at least one input requires grad.
  static Tensor from_op(Matrix value, std::vector<Tensor> inputs, BackwardFn backward);

  bool defined() const noexcept { return node_ != nullptr; }
  Eigen::Index rows() const;
  Eigen::Index cols() const;
  Eigen::Index size() const { return rows() * cols(); }
  std::string shape() const { return detail::shape_str(rows(), cols()); }

  const Matrix& value() const;
  /// In-place access for optimizers; only valid on leaves.
  Matrix& mutable_value();
  const Matrix& grad() const;
  Matrix& mutable_grad();
  bool requires_grad() const;
  bool is_leaf() const;
  std::uint64_t sequence() const;
  double item() const;

  void zero_grad();
  /// Constant copy of the value, cut from the recording.
  Tensor detach() const { return constant(value()); }

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  friend void backward(const Tensor& loss);
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

}  // namespace detail

inline Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->seq = detail::sequence_counter().fetch_add(1);
  if (requires_grad) node_->grad = Matrix::Zero(node_->value.rows(), node_->value.cols());
}

inline Tensor Tensor::from_op(Matrix value, std::vector<Tensor> inputs, BackwardFn backward) {
  Tensor out(std::move(value), false);
  if (!detail::grad_mode()) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->grad = Matrix::Zero(out.rows(), out.cols());
  out.node_->inputs = std::move(inputs);
  out.node_->backward = std::move(backward);
  return out;
}

inline Eigen::Index Tensor::rows() const { return node_->value.rows(); }
inline Eigen::Index Tensor::cols() const { return node_->value.cols(); }
inline const Matrix& Tensor::value() const { return node_->value; }
inline Matrix& Tensor::mutable_value() {
  if (!is_leaf()) throw ContractError("numgrad", "mutable_value() on a recorded intermediate");
  return node_->value;
}
inline const Matrix& Tensor::grad() const {
  if (!node_->requires_grad) throw ContractError("numgrad", "grad() on a tensor without requires_grad");
  return node_->grad;
}
inline Matrix& Tensor::mutable_grad() {
  if (!node_->requires_grad) throw ContractError("numgrad", "grad() on a tensor without requires_grad");
  return node_->grad;
}
inline bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
inline bool Tensor::is_leaf() const { return !node_->backward; }
inline std::uint64_t Tensor::sequence() const { return node_->seq; }
inline double Tensor::item() const {
  if (rows() != 1 || cols() != 1) throw DimensionError("numgrad", "item() on non-scalar " + shape());
  return node_->value(0, 0);
}
inline void Tensor::zero_grad() {
  if (node_->requires_grad) node_->grad.setZero();
}

/// Propagates d(loss)/d(leaf) into every reachable leaf that requires grad.
/// Leaf gradients accumulate across calls; intermediate gradients are reset.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.rows() != 1 || loss.cols() != 1)
    throw ContractError("numgrad", "backward() needs a scalar loss, got " +
                                       (loss.defined() ? loss.shape() : std::string("undefined")));
  if (!loss.requires_grad())
    throw ContractError("numgrad", "backward() on a loss that depends on no parameter");

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{loss.node_.get()};
  seen.insert(loss.node_.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const Tensor& in : n->inputs) {
      detail::Node* p = in.node_.get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back(p);
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  for (detail::Node* n : order)
    if (n->backward) n->grad.setZero();
  loss.node_->grad(0, 0) += 1.0;
  for (detail::Node* n : order)
    if (n->backward) n->backward(n->value, n->grad, std::span<Tensor>(n->inputs));
}

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("numgrad", std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
}

// Elementwise unary op with derivative expressed from (input, output).
template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  Matrix out = a.value().unaryExpr(f);
  return Tensor::from_op(std::move(out), {a},
                         [df](const Matrix& v, const Matrix& g, std::span<Tensor> in) {
                           Matrix d = in[0].value().binaryExpr(v, df);
                           in[0].mutable_grad().array() += g.array() * d.array();
                         });
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw DimensionError("numgrad", "matmul: inner dimensions differ, " + a.shape() + " * " + b.shape());
  Matrix out;
  out.noalias() = a.value() * b.value();
  return Tensor::from_op(std::move(out), {a, b}, [](const Matrix&, const Matrix& g, std::span<Tensor> in) {
    if (in[0].requires_grad()) in[0].mutable_grad().noalias() += g * in[1].value().transpose();
    if (in[1].requires_grad()) in[1].mutable_grad().noalias() += in[0].value().transpose() * g;
  });
}

inline Tensor transpose(const Tensor& a) {
  Matrix out = a.value().transpose();
  return Tensor::from_op(std::move(out), {a}, [](const Matrix&, const Matrix& g, std::span<Tensor> in) {
    in[0].mutable_grad() += g.transpose();
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  Matrix out = a.value() + b.value();
  return Tensor::from_op(std::move(out), {a, b}, [](const Matrix&, const Matrix& g, std::span<Tensor> in) {
    if (in[0].requires_grad()) in[0].mutable_grad() += g;
    if (in[1].requires_grad()) in[1].mutable_grad() += g;
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  Matrix out = a.value() - b.value();
  return Tensor::from_op(std::move(out), {a, b}, [](const Matrix&, const Matrix& g, std::span<Tensor> in) {
    if (in[0].requires_grad()) in[0].mutable_grad() += g;
    if (in[1].requires_grad()) in[1].mutable_grad() -= g;
  });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("hadamard", a, b);
  Matrix out = a.value().cwiseProduct(b.value());
  return Tensor::from_op(std::move(out), {a, b}, [](const Matrix&, const Matrix& g, std::span<Tensor> in) {
    if (in[0].requires_grad()) in[0].mutable_grad() += g.cwiseProduct(in[1].value());
    if (in[1].requires_grad()) in[1].mutable_grad() += g.cwiseProduct(in[0].value());
  });
}

inline Tensor scale(const Tensor& a, double c) {
  Matrix out = a.value() * c;
  return Tensor::from_op(std::move(out), {a}, [c](const Matrix&, const Matrix& g, std::span<Tensor> in) {
    in[0].mutable_grad() += c * g;
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  Matrix out = a.value().array() + c;
  return Tensor::from_op(std::move(out), {a}, [](const Matrix&, const Matrix& g, std::span<Tensor> in) {
    in[0].mutable_grad() += g;
  });
}

namespace detail {

// Vectorizes through exp; the odd Taylor series covers |x| < 1e-3 where
// 1 - 2/(e^2x + 1) would lose relative precision.
inline Matrix tanh_value(const Matrix& x) {
  const auto xa = x.array();
  const Eigen::ArrayXXd x2 = xa.square();
  Matrix out = 1.0 - 2.0 / ((2.0 * xa).exp() + 1.0);
  Matrix small = xa * (1.0 + x2 * (-1.0 / 3.0 + x2 * (2.0 / 15.0 + x2 * (-17.0 / 315.0))));
  out = (xa.abs() < 1e-3).select(small, out);
  return out;
}

}  // namespace detail

inline Tensor tanh(const Tensor& a) {
  Matrix out = detail::tanh_value(a.value());
  return Tensor::from_op(std::move(out), {a}, [](const Matrix& v, const Matrix& g, std::span<Tensor> in) {
    in[0].mutable_grad().array() += g.array() * (1.0 - v.array().square());
  });
}

// d|x|/dx taken as 0 at x = 0.
inline Tensor abs(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Tensor sqrt(const Tensor& a) {
  if ((a.value().array() < 0.0).any()) throw NumericDomainError("numgrad", "sqrt of a negative entry");
  return detail::unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor log(const Tensor& a) {
  if ((a.value().array() <= 0.0).any()) throw NumericDomainError("numgrad", "log of a non-positive entry");
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// Clips into [lo, hi]; gradient passes only where the input was inside.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Tensor sum(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return Tensor::from_op(std::move(out), {a}, [](const Matrix&, const Matrix& g, std::span<Tensor> in) {
    in[0].mutable_grad().array() += g(0, 0);
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("numgrad", "mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Row-major reinterpretation with the same element count.
inline Tensor reshape(const Tensor& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.size())
    throw DimensionError("numgrad", "reshape: cannot view " + a.shape() + " as " + detail::shape_str(rows, cols));
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return Tensor::from_op(std::move(out), {a}, [](const Matrix& v, const Matrix& g, std::span<Tensor> in) {
    Eigen::Map<Matrix> flat(in[0].mutable_grad().data(), v.rows(), v.cols());
    flat += g;
  });
}

namespace detail {

inline Matrix softmax_rows_value(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

}  // namespace detail

inline Tensor softmax_rows(const Tensor& a) {
  return Tensor::from_op(detail::softmax_rows_value(a.value()), {a},
                         [](const Matrix& s, const Matrix& g, std::span<Tensor> in) {
                           // dx = s * (g - <g, s>) per row
                           Eigen::VectorXd dots = (g.cwiseProduct(s)).rowwise().sum();
                           Matrix d = g;
                           d.colwise() -= dots;
                           in[0].mutable_grad() += s.cwiseProduct(d);
                         });
}

/// Softmax of each column independently.
inline Tensor softmax_cols(const Tensor& a) {
  Matrix out = detail::softmax_rows_value(a.value().transpose()).transpose();
  return Tensor::from_op(std::move(out), {a}, [](const Matrix& s, const Matrix& g, std::span<Tensor> in) {
    Eigen::RowVectorXd dots = (g.cwiseProduct(s)).colwise().sum();
    Matrix d = g;
    d.rowwise() -= dots;
    in[0].mutable_grad() += s.cwiseProduct(d);
  });
}

/// 1 - <a,b> / (|a| |b|) for two 1xn row vectors.
inline Tensor cosine_distance(const Tensor& a, const Tensor& b) {
  if (a.rows() != 1 || b.rows() != 1 || a.cols() != b.cols())
    throw DimensionError("numgrad", "cosine_distance: needs two 1xn rows, got " + a.shape() + " and " + b.shape());
  const double na = a.value().norm();
  const double nb = b.value().norm();
  if (na == 0.0 || nb == 0.0) throw NumericDomainError("numgrad", "cosine_distance of a zero-norm vector");
  // Rounding can push the ratio just outside [-1, 1]; the result stays in [0, 2].
  const double cos = std::clamp(a.value().cwiseProduct(b.value()).sum() / (na * nb), -1.0, 1.0);
  Matrix out(1, 1);
  out(0, 0) = 1.0 - cos;
  return Tensor::from_op(std::move(out), {a, b},
                         [na, nb, cos](const Matrix&, const Matrix& g, std::span<Tensor> in) {
                           const double go = g(0, 0);
                           const Matrix& av = in[0].value();
                           const Matrix& bv = in[1].value();
                           if (in[0].requires_grad())
                             in[0].mutable_grad() += go * (cos * av / (na * na) - bv / (na * nb));
                           if (in[1].requires_grad())
                             in[1].mutable_grad() += go * (cos * bv / (nb * nb) - av / (na * nb));
                         });
}

}  // namespace gpldan::numgrad
