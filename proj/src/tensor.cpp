#include "mxml/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <unordered_set>

#include "mxml/error.hpp"

namespace mxml {

namespace detail {

struct Node {
  std::string_view op = "leaf";
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  bool leaf = true;
  std::optional<std::vector<double>> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
  // Number of live op results holding this node as an input.
  std::atomic<int> consumers{0};

  ~Node() {
    for (auto& in : inputs) in->consumers.fetch_sub(1, std::memory_order_relaxed);
  }
};

}  // namespace detail

namespace {

thread_local bool t_grad_enabled = true;

void check_finite_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
}

bool is_matrix(const Tensor& t) { return t.dim() == 2; }

void require_matrix(const Tensor& t, std::string_view op) {
  if (!is_matrix(t)) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

void require_finite(std::span<const double> v, std::string_view op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite result");
  }
}

int normalize_axis(const Tensor& t, int axis, std::string_view op) {
  const int nd = static_cast<int>(t.dim());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd || nd > 2) {
    throw ShapeError(std::string(op) + ": invalid axis for shape " + shape_to_string(t.shape()));
  }
  return axis;
}

// Unary elementwise op with derivative expressed through input and output.
template <typename Fwd, typename Deriv>
Tensor unary(std::string_view name, const Tensor& a, Fwd fwd, Deriv deriv) {
  auto in = a.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  require_finite(out, name);
  return Tensor::from_op(
      name, a.shape(), out, {a},
      [a, deriv, out](std::span<const double> g, std::span<const std::span<double>> gi) {
        auto x = a.values();
        for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * deriv(x[i], out[i]);
      });
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  check_finite_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_to_string(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " + std::to_string(values.size()));
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_finite_shape(shape);
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const auto n = values.size();
  return Tensor({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad) {
  return Tensor({rows, cols}, std::move(values), requires_grad);
}

Tensor Tensor::from_op(std::string_view op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                       BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values), false);
  auto& node = *out.node_;
  node.op = op;
  node.leaf = false;
  if (!t_grad_enabled) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  node.requires_grad = true;
  node.backward = std::move(backward);
  node.inputs.reserve(inputs.size());
  for (auto& in : inputs) {
    in.node_->consumers.fetch_add(1, std::memory_order_relaxed);
    node.inputs.push_back(in.node_);
  }
  return out;
}

const detail::Node& Tensor::node() const {
  if (!node_) throw GraphError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }
std::size_t Tensor::numel() const { return node().values.size(); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s.size() == 2 ? s[0] : 1;
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  if (s.empty()) return 1;
  return s.back();
}

std::span<const double> Tensor::values() const { return node().values; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  return node().values[0];
}

bool Tensor::requires_grad() const { return node().requires_grad; }
bool Tensor::is_leaf() const { return node().leaf; }
bool Tensor::has_grad() const { return node().grad.has_value(); }

std::span<const double> Tensor::grad() const {
  if (!node().grad) throw GraphError("tensor has no gradient");
  return *node().grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.reset();
}

std::string_view Tensor::op() const { return node().op; }

Tensor Tensor::detach() const { return Tensor(shape(), node().values, false); }

Tensor Tensor::clone_leaf(bool requires_grad) const { return Tensor(shape(), node().values, requires_grad); }

std::span<double> Tensor::mutable_values() {
  if (!node_) throw GraphError("use of an undefined tensor");
  if (!node_->leaf) throw GraphError("in-place mutation of a non-leaf tensor");
  if (node_->consumers.load(std::memory_order_relaxed) > 0) {
    throw GraphError("in-place mutation of a tensor that a live graph still uses");
  }
  return node_->values;
}

// ---------------------------------------------------------------------------
// Backward

void backward(const Tensor& loss) {
  auto& root = *loss.node_;
  if (loss.numel() != 1) throw GraphError("backward() needs a scalar loss, got " + shape_to_string(root.shape));
  if (!root.requires_grad) throw GraphError("backward() on a loss that is detached from every tracked tensor");

  // Iterative post-order DFS gives a deterministic reverse topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node_.get(), 0);
  seen.insert(loss.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (n->leaf && n->grad) {
      throw GraphError("gradient already populated on a leaf; call zero_grad() before another backward()");
    }
  }
  for (auto* n : order) n->grad.emplace(n->values.size(), 0.0);
  (*root.grad)[0] = 1.0;

  std::vector<std::span<double>> in_grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->leaf) continue;
    in_grads.clear();
    for (auto& in : n->inputs) {
      if (in->requires_grad) {
        in_grads.emplace_back(*in->grad);
      } else {
        in_grads.emplace_back();
      }
    }
    n->backward(*n->grad, in_grads);
  }
  // Intermediate buffers are not part of the contract.
  for (auto* n : order) {
    if (!n->leaf) n->grad.reset();
  }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
EnableGradGuard::EnableGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (!is_matrix(a) || !is_matrix(b) || a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + shape_to_string(a.shape()) + " by " + shape_to_string(b.shape()));
  }
  const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * c];
      double* orow = &out[i * c];
      for (std::size_t j = 0; j < c; ++j) orow[j] += aip * brow[j];
    }
  }
  return Tensor::from_op("matmul", {r, c}, std::move(out), {a, b},
                         [a, b, r, k, c](std::span<const double> g, std::span<const std::span<double>> gi) {
                           auto av = a.values();
                           auto bv = b.values();
                           if (!gi[0].empty()) {
                             // dA = G * B^T
                             for (std::size_t i = 0; i < r; ++i) {
                               for (std::size_t p = 0; p < k; ++p) {
                                 double acc = 0.0;
                                 for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * bv[p * c + j];
                                 gi[0][i * k + p] += acc;
                               }
                             }
                           }
                           if (!gi[1].empty()) {
                             // dB = A^T * G
                             for (std::size_t i = 0; i < r; ++i) {
                               for (std::size_t p = 0; p < k; ++p) {
                                 const double aip = av[i * k + p];
                                 for (std::size_t j = 0; j < c; ++j) gi[1][p * c + j] += aip * g[i * c + j];
                               }
                             }
                           }
                         });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  auto av = a.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return Tensor::from_op("transpose", {c, r}, std::move(out), {a},
                         [r, c](std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) gi[0][i * c + j] += g[j * r + i];
                         });
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_finite_shape(shape);
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " + shape_to_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return Tensor::from_op("reshape", std::move(shape), std::move(out), {a},
                         [](std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                         });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor::from_op("add", a.shape(), std::move(out), {a, b},
                         [](std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (auto& dst : gi) {
                             if (dst.empty()) continue;
                             for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                           }
                         });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return Tensor::from_op("sub", a.shape(), std::move(out), {a, b},
                         [](std::span<const double> g, std::span<const std::span<double>> gi) {
                           if (!gi[0].empty())
                             for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                           if (!gi[1].empty())
                             for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] -= g[i];
                         });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor::from_op("mul", a.shape(), std::move(out), {a, b},
                         [a, b](std::span<const double> g, std::span<const std::span<double>> gi) {
                           auto av = a.values(), bv = b.values();
                           if (!gi[0].empty())
                             for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * bv[i];
                           if (!gi[1].empty())
                             for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] += g[i] * av[i];
                         });
}

Tensor add_row(const Tensor& a, const Tensor& b) {
  require_matrix(a, "add_row");
  if (b.numel() != a.cols() || b.dim() > 2 || (b.dim() == 2 && b.rows() != 1)) {
    throw ShapeError("add_row: cannot broadcast " + shape_to_string(b.shape()) + " over rows of " +
                     shape_to_string(a.shape()));
  }
  const std::size_t r = a.rows(), c = a.cols();
  auto av = a.values(), bv = b.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] + bv[j];
  return Tensor::from_op("add_row", a.shape(), std::move(out), {a, b},
                         [r, c](std::span<const double> g, std::span<const std::span<double>> gi) {
                           if (!gi[0].empty())
                             for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                           if (!gi[1].empty())
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) gi[1][j] += g[i * c + j];
                         });
}

Tensor add_col(const Tensor& a, const Tensor& b) {
  require_matrix(a, "add_col");
  if (b.numel() != a.rows() || b.dim() != 1) {
    throw ShapeError("add_col: cannot broadcast " + shape_to_string(b.shape()) + " over columns of " +
                     shape_to_string(a.shape()));
  }
  const std::size_t r = a.rows(), c = a.cols();
  auto av = a.values(), bv = b.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] + bv[i];
  return Tensor::from_op("add_col", a.shape(), std::move(out), {a, b},
                         [r, c](std::span<const double> g, std::span<const std::span<double>> gi) {
                           if (!gi[0].empty())
                             for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                           if (!gi[1].empty())
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) gi[1][i] += g[i * c + j];
                         });
}

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.values()) {
    if (!(x > 0.0)) throw NumericError("log: input must be positive");
  }
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ShapeError("clamp: empty interval");
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return Tensor::from_op("sum", {}, {s}, {a}, [](std::span<const double> g, std::span<const std::span<double>> gi) {
    for (auto& x : gi[0]) x += g[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_axis(const Tensor& a, int axis) {
  require_matrix(a, "sum_axis");
  axis = normalize_axis(a, axis, "sum_axis");
  const std::size_t r = a.rows(), c = a.cols();
  auto av = a.values();
  std::vector<double> out(axis == 0 ? c : r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += av[i * c + j];
  Shape shape{out.size()};
  return Tensor::from_op("sum_axis", shape, std::move(out), {a},
                         [r, c, axis](std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) gi[0][i * c + j] += g[axis == 0 ? j : i];
                         });
}

Tensor logsumexp(const Tensor& v, int axis) {
  if (v.dim() == 0) throw ShapeError("logsumexp: expected at least one axis");
  axis = normalize_axis(v, axis, "logsumexp");
  // View as outer x extent x inner with the reduced axis in the middle.
  const std::size_t extent = v.shape()[axis];
  if (extent == 0) throw ShapeError("logsumexp over an empty axis");
  std::size_t outer = 1, inner = 1;
  if (v.dim() == 2) {
    if (axis == 0) {
      inner = v.cols();
    } else {
      outer = v.rows();
    }
  }
  auto x = v.values();
  std::vector<double> out(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < extent; ++e) mx = std::max(mx, x[(o * extent + e) * inner + in]);
      double s = 0.0;
      for (std::size_t e = 0; e < extent; ++e) s += std::exp(x[(o * extent + e) * inner + in] - mx);
      out[o * inner + in] = mx + std::log(s);
    }
  }
  require_finite(out, "logsumexp");
  Shape shape = v.dim() == 1 ? Shape{} : Shape{out.size()};
  return Tensor::from_op("logsumexp", shape, out, {v},
                         [v, out, outer, inner, extent](std::span<const double> g,
                                                        std::span<const std::span<double>> gi) {
                           auto x = v.values();
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t in = 0; in < inner; ++in) {
                               const double lse = out[o * inner + in];
                               const double go = g[o * inner + in];
                               for (std::size_t e = 0; e < extent; ++e) {
                                 const std::size_t idx = (o * extent + e) * inner + in;
                                 gi[0][idx] += go * std::exp(x[idx] - lse);
                               }
                             }
                         });
}

Tensor log_softmax(const Tensor& v) {
  if (v.dim() == 0 || v.dim() > 2) throw ShapeError("log_softmax: expected a 1-D or 2-D tensor");
  const std::size_t r = v.rows(), c = v.cols();
  if (c < 2) throw ShapeError("log_softmax: need at least 2 classes, got " + shape_to_string(v.shape()));
  auto x = v.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(x[i * c + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] - lse;
  }
  require_finite(out, "log_softmax");
  return Tensor::from_op("log_softmax", v.shape(), out, {v},
                         [out, r, c](std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (std::size_t i = 0; i < r; ++i) {
                             double gs = 0.0;
                             for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
                             for (std::size_t j = 0; j < c; ++j)
                               gi[0][i * c + j] += g[i * c + j] - std::exp(out[i * c + j]) * gs;
                           }
                         });
}

Tensor softmax(const Tensor& v) { return exp(log_softmax(v)); }

Tensor l2_normalize(const Tensor& h) {
  if (h.dim() == 0 || h.dim() > 2) throw ShapeError("l2_normalize: expected a 1-D or 2-D tensor");
  const std::size_t r = h.rows(), c = h.cols();
  auto x = h.values();
  std::vector<double> norms(r), out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x[i * c + j] * x[i * c + j];
    norms[i] = std::sqrt(s);
    if (norms[i] < 1e-12) throw NumericError("l2_normalize: vector norm below 1e-12");
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] / norms[i];
  }
  return Tensor::from_op("l2_normalize", h.shape(), out, {h},
                         [out, norms, r, c](std::span<const double> g, std::span<const std::span<double>> gi) {
                           // d(x/|x|) = (g - y (y.g)) / |x|
                           for (std::size_t i = 0; i < r; ++i) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < c; ++j) dot += out[i * c + j] * g[i * c + j];
                             for (std::size_t j = 0; j < c; ++j)
                               gi[0][i * c + j] += (g[i * c + j] - out[i * c + j] * dot) / norms[i];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Indexing

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.dim() == 0 || a.dim() > 2 || begin >= end || end > a.cols()) {
    throw ShapeError("slice_cols: invalid range [" + std::to_string(begin) + ", " + std::to_string(end) + ") for " +
                     shape_to_string(a.shape()));
  }
  const std::size_t r = a.rows(), c = a.cols(), w = end - begin;
  auto av = a.values();
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = av[i * c + begin + j];
  Shape shape = a.dim() == 1 ? Shape{w} : Shape{r, w};
  return Tensor::from_op("slice_cols", shape, std::move(out), {a},
                         [r, c, w, begin](std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < w; ++j) gi[0][i * c + begin + j] += g[i * w + j];
                         });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_matrix(a, "gather_rows");
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t c = a.cols();
  for (auto r : rows) {
    if (r >= a.rows()) throw ShapeError("gather_rows: row index out of range");
  }
  auto av = a.values();
  std::vector<double> out(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(&av[rows[i] * c], c, &out[i * c]);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return Tensor::from_op("gather_rows", {rows.size(), c}, std::move(out), {a},
                         [idx, c](std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t j = 0; j < c; ++j) gi[0][idx[i] * c + j] += g[i * c + j];
                         });
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const bool vectors = parts.front().dim() <= 1;
  std::size_t total_rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (vectors) {
      if (p.dim() > 1) throw ShapeError("concat: mixing vectors and matrices");
    } else if (p.dim() != 2 || p.cols() != parts.front().cols()) {
      throw ShapeError("concat: column mismatch " + shape_to_string(p.shape()) + " vs " +
                       shape_to_string(parts.front().shape()));
    }
    total_rows += vectors ? p.numel() : p.rows();
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  Shape shape = vectors ? Shape{total_rows} : Shape{total_rows, parts.front().cols()};
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    off += p.numel();
  }
  return Tensor::from_op("concat", shape, std::move(out), {parts.begin(), parts.end()},
                         [offsets](std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (std::size_t k = 0; k < gi.size(); ++k) {
                             if (gi[k].empty()) continue;
                             for (std::size_t i = 0; i < gi[k].size(); ++i) gi[k][i] += g[offsets[k] + i];
                           }
                         });
}

Tensor pick(const Tensor& a, std::span<const std::size_t> index) {
  require_matrix(a, "pick");
  if (index.size() != a.rows()) throw ShapeError("pick: need one index per row");
  const std::size_t c = a.cols();
  for (auto j : index) {
    if (j >= c) throw ShapeError("pick: column index out of range");
  }
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = a.values()[i * c + index[i]];
  std::vector<std::size_t> idx(index.begin(), index.end());
  return Tensor::from_op("pick", {idx.size()}, std::move(out), {a},
                         [idx, c](std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (std::size_t i = 0; i < idx.size(); ++i) gi[0][i * c + idx[i]] += g[i];
                         });
}

Tensor group_mean(const Tensor& a, std::size_t group_size) {
  require_matrix(a, "group_mean");
  if (group_size == 0 || a.rows() % group_size != 0) {
    throw ShapeError("group_mean: " + std::to_string(a.rows()) + " rows do not split into groups of " +
                     std::to_string(group_size));
  }
  const std::size_t n = a.rows() / group_size, c = a.cols();
  const double inv = 1.0 / static_cast<double>(group_size);
  auto av = a.values();
  std::vector<double> out(n * c, 0.0);
  for (std::size_t g = 0; g < n; ++g) {
    for (std::size_t k = 0; k < group_size; ++k)
      for (std::size_t j = 0; j < c; ++j) out[g * c + j] += av[(g * group_size + k) * c + j];
    for (std::size_t j = 0; j < c; ++j) out[g * c + j] *= inv;
  }
  return Tensor::from_op("group_mean", {n, c}, std::move(out), {a},
                         [n, c, group_size, inv](std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (std::size_t grp = 0; grp < n; ++grp)
                             for (std::size_t k = 0; k < group_size; ++k)
                               for (std::size_t j = 0; j < c; ++j)
                                 gi[0][(grp * group_size + k) * c + j] += g[grp * c + j] * inv;
                         });
}

Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b) {
  require_matrix(a, "pairwise_sq_dist");
  require_matrix(b, "pairwise_sq_dist");
  if (a.cols() != b.cols()) {
    throw ShapeError("pairwise_sq_dist: dimension mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  const std::size_t r = a.rows(), c = b.rows(), d = a.cols();
  auto av = a.values(), bv = b.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = av[i * d + k] - bv[j * d + k];
        s += diff * diff;
      }
      out[i * c + j] = s;
    }
  return Tensor::from_op("pairwise_sq_dist", {r, c}, std::move(out), {a, b},
                         [a, b, r, c, d](std::span<const double> g, std::span<const std::span<double>> gi) {
                           auto av = a.values(), bv = b.values();
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) {
                               const double gij = 2.0 * g[i * c + j];
                               for (std::size_t k = 0; k < d; ++k) {
                                 const double diff = av[i * d + k] - bv[j * d + k];
                                 if (!gi[0].empty()) gi[0][i * d + k] += gij * diff;
                                 if (!gi[1].empty()) gi[1][j * d + k] -= gij * diff;
                               }
                             }
                         });
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckResult gradient_check(const ScalarFn& f, std::span<const Tensor> inputs, double step) {
  std::vector<Tensor> tracked;
  tracked.reserve(inputs.size());
  for (const auto& in : inputs) tracked.push_back(in.clone_leaf(true));
  {
    Tensor loss = f(tracked);
    if (loss.requires_grad()) backward(loss);
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  std::vector<Tensor> probe;
  for (const auto& in : inputs) probe.push_back(in.clone_leaf(false));
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::vector<double> analytic = tracked[k].has_grad()
                                             ? std::vector<double>(tracked[k].grad().begin(), tracked[k].grad().end())
                                             : std::vector<double>(tracked[k].numel(), 0.0);
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      auto vals = probe[k].mutable_values();
      const double orig = vals[i];
      vals[i] = orig + step;
      const double up = f(probe).item();
      vals = probe[k].mutable_values();
      vals[i] = orig - step;
      const double down = f(probe).item();
      probe[k].mutable_values()[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    result.rel_error.push_back(std::sqrt(diff2) / denom);
    result.max_rel_error = std::max(result.max_rel_error, result.rel_error.back());
  }
  return result;
}

}  // namespace mxml
