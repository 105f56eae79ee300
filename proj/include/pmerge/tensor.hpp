#pragma once

// Reverse-mode automatic differentiation over dense float64 tensors.
//
// A Tensor is a cheap handle to a graph node. Leaves are created by the
// factory functions; every op returns a fresh node that keeps its parents
// alive, so the graph is freed once the last handle to the loss goes away.
// Gradients never live on the nodes: backward() writes into a side table and
// returns a GradientMap, so repeated calls on the same graph are idempotent.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace pmerge {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  std::span<const double> data() const;
  double item() const;
  double at(std::size_t row, std::size_t col) const;
  bool requires_grad() const;
  bool is_leaf() const;

  // Leaves only. Used by optimizers and finite differences between passes;
  // never while a graph that reads this leaf is being differentiated.
  std::span<double> mutable_data();
  void set_requires_grad(bool flag);

  /// Deep copy of the values into a new leaf.
  Tensor detach_copy(bool requires_grad = false) const;

  const detail::Node* id() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;

  friend class OpBuilder;
  friend class GradientMap;
  friend class GradientMapBuilder;
};

/// Gradients of a scalar loss with respect to requires_grad leaves.
class GradientMap {
 public:
  struct Entry {
    Tensor param;
    std::vector<double> grad;
  };

  bool contains(const Tensor& param) const;
  /// Gradient for `param`, or nullptr if the leaf was not reachable.
  const std::vector<double>* find(const Tensor& param) const;
  /// Gradient for `param`; zeros of the parameter's size if unreachable.
  std::vector<double> get(const Tensor& param) const;

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<const detail::Node*, std::size_t> index_;

  friend class GradientMapBuilder;
};

/// While alive on a thread, ops on that thread record no graph edges.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool active();

 private:
  bool previous_;
};

// --- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// a[m x n] + bias[n] on every row.
Tensor add_row(const Tensor& a, const Tensor& bias);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t length);
/// Rows of `table` [V x d] picked by `ids`; backward scatter-adds.
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& t, std::size_t axis);
/// Row softmax over the last axis of a matrix; entries with keep[i] == 0
/// get probability exactly 0. Every row must keep at least one entry.
Tensor masked_softmax(const Tensor& t, std::span<const std::uint8_t> keep);
/// -(1/T) sum_t log softmax(logits)[t, targets[t]].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

// --- differentiation --------------------------------------------------------

/// Reverse pass from a scalar loss. Every reachable requires_grad leaf gets
/// an entry.
GradientMap backward(const Tensor& loss);
/// As above, and every tensor in `params` gets an entry (zeros when
/// unreachable).
GradientMap backward(const Tensor& loss, std::span<const Tensor> params);

/// Central differences of f around the current values of leaf `t`. The leaf
/// is perturbed in place and restored. f is evaluated twice up front and a
/// mismatch raises an oracle error.
std::vector<double> finite_diff_grad(const std::function<Tensor(const Tensor&)>& f,
                                     Tensor t, double eps = 1e-6);

/// max over elements of |a-b| / max(|a|, |b|), where pairs with
/// |a-b| <= abs_floor count as exact.
double max_relative_error(std::span<const double> a, std::span<const double> b,
                          double abs_floor = 1e-8);

}  // namespace pmerge
