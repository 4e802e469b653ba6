#pragma once

// Dense row-major tensors of doubles with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared graph node. Tensors created from
// data are leaves; tensors returned by an op remember their inputs and a
// backward rule whenever at least one input requires a gradient. Gradients
// are populated by backward() on leaves only and must be cleared with
// zero_grad() before the next backward pass that reaches the same leaf.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mxml {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct Node;
}

// Receives the gradient of the op output and writes (accumulates) into the
// gradient buffers of its inputs. A buffer is empty when that input does not
// require a gradient.
using BackwardFn =
    std::function<void(std::span<const double> out_grad, std::span<const std::span<double>> in_grads)>;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  // Result of a custom op. Used by the builtin ops and by modules that need
  // fused kernels with analytic backward rules.
  static Tensor from_op(std::string_view op, Shape shape, std::vector<double> values,
                        std::vector<Tensor> inputs, BackwardFn backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  // Matrix view: 2-D tensors map directly, 1-D tensors are a single row and
  // scalars are 1x1.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  double item() const;
  double operator[](std::size_t i) const { return values()[i]; }
  double at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  std::string_view op() const;

  // Copy of the values with no graph history.
  Tensor detach() const;
  // Fresh leaf holding a copy of the values.
  Tensor clone_leaf(bool requires_grad) const;

  // In-place access for optimizers. Only legal on leaves that no live graph
  // node currently consumes.
  std::span<double> mutable_values();

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const detail::Node& node() const;

  std::shared_ptr<detail::Node> node_;

  friend void backward(const Tensor& loss);
};

// Populates grad() on every requires-grad leaf reachable from `loss`.
// Throws GraphError if the loss is untracked or if a reachable leaf still holds
// a gradient from a previous pass.
void backward(const Tensor& loss);

// While alive, ops on the current thread record no graph history.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Re-enables recording inside a NoGradGuard scope (inner-loop adaptation).
class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// ---------------------------------------------------------------------------
// Ops. Matrices are 2-D; where noted, 1-D tensors are treated as one row.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// a[r x c] + b[c] on every row.
Tensor add_row(const Tensor& a, const Tensor& b);
// a[r x c] + b[r] on every column.
Tensor add_col(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
// Values are clipped into [lo, hi]; the gradient is zero where clipping bites.
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Reduces a 2-D tensor along `axis` (0: over rows, 1: over columns).
Tensor sum_axis(const Tensor& a, int axis);

// Numerically stable log(sum(exp(v))) along `axis`; a 1-D input reduces to
// a scalar.
Tensor logsumexp(const Tensor& v, int axis = -1);
// Along the last axis.
Tensor log_softmax(const Tensor& v);
Tensor softmax(const Tensor& v);
// Each row (or the whole 1-D vector) scaled to unit L2 norm. Throws
// NumericError when a norm falls below 1e-12.
Tensor l2_normalize(const Tensor& h);

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
// Row-wise concatenation of matrices with equal column counts, or plain
// concatenation of 1-D tensors.
Tensor concat(std::span<const Tensor> parts);
// out[i] = a[i, index[i]].
Tensor pick(const Tensor& a, std::span<const std::size_t> index);
// Mean of each run of `group_size` consecutive rows: [g*n x d] -> [n x d].
Tensor group_mean(const Tensor& a, std::size_t group_size);
// out[i, j] = ||a_i - b_j||^2.
Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Gradient checking against central finite differences.

struct GradCheckResult {
  // ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8), per input.
  std::vector<double> rel_error;
  double max_rel_error = 0.0;
};

using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;

GradCheckResult gradient_check(const ScalarFn& f, std::span<const Tensor> inputs, double step = 1e-5);

}  // namespace mxml
