#include "pmerge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "pmerge/error.hpp"

namespace pmerge {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension_error";
    case ErrorKind::Numeric: return "numeric_error";
    case ErrorKind::Index: return "index_error";
    case ErrorKind::Contract: return "contract_error";
    case ErrorKind::Length: return "length_error";
    case ErrorKind::MaskViolation: return "mask_violation";
    case ErrorKind::Design: return "design_error";
    case ErrorKind::Config: return "config_error";
    case ErrorKind::Load: return "load_error";
    case ErrorKind::Oracle: return "oracle_error";
    case ErrorKind::Compatibility: return "compatibility_error";
    case ErrorKind::EmptyData: return "empty_data_error";
    case ErrorKind::Io: return "io_error";
  }
  return "error";
}

std::string shape_str(const Shape& shape) {
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
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

namespace detail {

struct Node {
  using BackwardFn = std::function<void(const Node& self, const double* gout,
                                        std::span<double* const> parent_grads)>;

  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

}  // namespace detail

using detail::Node;

namespace {

void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) fail(ErrorKind::Dimension, "zero-sized dimension in " + shape_str(shape));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    fail(ErrorKind::Dimension, std::string(op) + ": expected rank " +
                                   std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

thread_local bool g_no_grad = false;

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::active() { return g_no_grad; }

class OpBuilder {
 public:
  static Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != data.size()) {
      fail(ErrorKind::Dimension, "tensor data size " + std::to_string(data.size()) +
                                     " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   Node::BackwardFn fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->leaf = false;
    if (!g_no_grad) {
      for (const auto& in : inputs) node->requires_grad |= in.node_->requires_grad;
    }
    if (node->requires_grad) {
      node->parents.reserve(inputs.size());
      for (auto& in : inputs) node->parents.push_back(in.node_);
      node->backward = std::move(fn);
    }
    return Tensor(std::move(node));
  }

  static const std::vector<double>& value(const Tensor& t) { return t.node_->value; }
};

// --- Tensor -----------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  return OpBuilder::leaf(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, 1.0), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    fail(ErrorKind::Dimension, "axis " + std::to_string(axis) + " out of range for " +
                                   shape_str(shape()));
  }
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::data() const { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) fail(ErrorKind::Contract, "item() on non-scalar " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  require_rank(*this, 2, "at");
  return node_->value[row * shape()[1] + col];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

bool Tensor::is_leaf() const { return node_->leaf; }

std::span<double> Tensor::mutable_data() {
  if (!node_->leaf) fail(ErrorKind::Contract, "mutable_data() on a non-leaf tensor");
  return node_->value;
}

void Tensor::set_requires_grad(bool flag) {
  if (!node_->leaf) fail(ErrorKind::Contract, "set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = flag;
}

Tensor Tensor::detach_copy(bool requires_grad) const {
  return from(shape(), node_->value, requires_grad);
}

// --- GradientMap ------------------------------------------------------------

bool GradientMap::contains(const Tensor& param) const {
  return index_.count(param.id()) != 0;
}

const std::vector<double>* GradientMap::find(const Tensor& param) const {
  auto it = index_.find(param.id());
  return it == index_.end() ? nullptr : &entries_[it->second].grad;
}

std::vector<double> GradientMap::get(const Tensor& param) const {
  if (const auto* g = find(param)) return *g;
  return std::vector<double>(param.numel(), 0.0);
}

class GradientMapBuilder {
 public:
  static void add(GradientMap& map, const Tensor& param, std::vector<double> grad) {
    if (map.index_.count(param.id())) return;
    map.index_.emplace(param.id(), map.entries_.size());
    map.entries_.push_back({param, std::move(grad)});
  }

  static GradientMap run(const Tensor& loss) {
    if (loss.numel() != 1) {
      fail(ErrorKind::Contract, "backward() requires a scalar loss, got " + shape_str(loss.shape()));
    }
    GradientMap out;
    const std::shared_ptr<Node>& root = loss.node_;
    if (!root->requires_grad) return out;

    // Iterative post-order DFS; each node visited once.
    std::vector<std::shared_ptr<Node>> order;
    std::unordered_map<const Node*, bool> visited;
    std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack{{root, 0}};
    visited[root.get()] = true;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        std::shared_ptr<Node> p = node->parents[next++];
        if (p->requires_grad && !visited[p.get()]) {
          visited[p.get()] = true;
          stack.emplace_back(std::move(p), 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    std::unordered_map<const Node*, std::vector<double>> grads;
    grads[root.get()] = std::vector<double>(1, 1.0);
    std::vector<double*> parent_ptrs;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const Node* node = it->get();
      if (node->leaf) continue;
      auto g = grads.find(node);
      if (g == grads.end()) continue;
      parent_ptrs.assign(node->parents.size(), nullptr);
      for (std::size_t i = 0; i < node->parents.size(); ++i) {
        const Node* p = node->parents[i].get();
        if (!p->requires_grad) continue;
        auto& buf = grads[p];
        if (buf.empty()) buf.assign(p->value.size(), 0.0);
        parent_ptrs[i] = buf.data();
      }
      // `grads` may rehash while parent buffers are inserted, so fetch again.
      node->backward(*node, grads.at(node).data(), parent_ptrs);
      if (node != root.get()) grads.erase(node);
    }

    // Post-order puts leaves in first-use order.
    for (const auto& node : order) {
      if (!node->leaf) continue;
      auto g = grads.find(node.get());
      std::vector<double> grad = g == grads.end() ? std::vector<double>(node->value.size(), 0.0)
                                                  : std::move(g->second);
      out.index_.emplace(node.get(), out.entries_.size());
      out.entries_.push_back({Tensor(node), std::move(grad)});
    }
    return out;
  }
};

GradientMap backward(const Tensor& loss) { return GradientMapBuilder::run(loss); }

GradientMap backward(const Tensor& loss, std::span<const Tensor> params) {
  GradientMap map = GradientMapBuilder::run(loss);
  for (const auto& p : params) {
    GradientMapBuilder::add(map, p, std::vector<double>(p.numel(), 0.0));
  }
  return map;
}

// --- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    fail(ErrorKind::Dimension,
         "matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " do not align");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const double* A = a.data().data();
  const double* B = b.data().data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return OpBuilder::op({m, n}, std::move(out), {a, b},
                       [m, k, n](const Node& self, const double* g, std::span<double* const> pg) {
                         const double* A = self.parents[0]->value.data();
                         const double* B = self.parents[1]->value.data();
                         if (double* ga = pg[0]) {
                           // dA = dC B^T, as row axpys over B^T so the inner loop vectorizes
                           std::vector<double> bt(n * k);
                           for (std::size_t p = 0; p < k; ++p)
                             for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = B[p * n + j];
                           for (std::size_t i = 0; i < m; ++i) {
                             const double* grow = g + i * n;
                             double* garow = ga + i * k;
                             for (std::size_t j = 0; j < n; ++j) {
                               const double gv = grow[j];
                               if (gv == 0.0) continue;
                               const double* btrow = bt.data() + j * k;
                               for (std::size_t p = 0; p < k; ++p) garow[p] += gv * btrow[p];
                             }
                           }
                         }
                         if (double* gb = pg[1]) {
                           // dB = A^T dC
                           for (std::size_t i = 0; i < m; ++i) {
                             const double* grow = g + i * n;
                             for (std::size_t p = 0; p < k; ++p) {
                               const double av = A[i * k + p];
                               if (av == 0.0) continue;
                               double* gbrow = gb + p * n;
                               for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                             }
                           }
                         }
                       });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto& v = OpBuilder::value(a);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  return OpBuilder::op({n, m}, std::move(out), {a},
                       [m, n](const Node&, const double* g, std::span<double* const> pg) {
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) pg[0][i * n + j] += g[j * m + i];
                       });
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Dimension, std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                                   shape_str(b.shape()) + " differ");
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto& x = OpBuilder::value(a);
  const auto& y = OpBuilder::value(b);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  const std::size_t n = x.size();
  return OpBuilder::op(a.shape(), std::move(out), {a, b},
                       [n](const Node&, const double* g, std::span<double* const> pg) {
                         for (double* p : pg) {
                           if (!p) continue;
                           for (std::size_t i = 0; i < n; ++i) p[i] += g[i];
                         }
                       });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto& x = OpBuilder::value(a);
  const auto& y = OpBuilder::value(b);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  const std::size_t n = x.size();
  return OpBuilder::op(a.shape(), std::move(out), {a, b},
                       [n](const Node&, const double* g, std::span<double* const> pg) {
                         if (pg[0])
                           for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[i];
                         if (pg[1])
                           for (std::size_t i = 0; i < n; ++i) pg[1][i] -= g[i];
                       });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto& x = OpBuilder::value(a);
  const auto& y = OpBuilder::value(b);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  const std::size_t n = x.size();
  return OpBuilder::op(a.shape(), std::move(out), {a, b},
                       [n](const Node& self, const double* g, std::span<double* const> pg) {
                         const auto& x = self.parents[0]->value;
                         const auto& y = self.parents[1]->value;
                         if (pg[0])
                           for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[i] * y[i];
                         if (pg[1])
                           for (std::size_t i = 0; i < n; ++i) pg[1][i] += g[i] * x[i];
                       });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  require_rank(a, 2, "add_row");
  require_rank(bias, 1, "add_row");
  if (bias.dim(0) != a.dim(1)) {
    fail(ErrorKind::Dimension, "add_row: bias " + shape_str(bias.shape()) + " vs " +
                                   shape_str(a.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto& x = OpBuilder::value(a);
  const auto& b = OpBuilder::value(bias);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
  return OpBuilder::op(a.shape(), std::move(out), {a, bias},
                       [m, n](const Node&, const double* g, std::span<double* const> pg) {
                         if (pg[0])
                           for (std::size_t i = 0; i < m * n; ++i) pg[0][i] += g[i];
                         if (pg[1])
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < n; ++j) pg[1][j] += g[i * n + j];
                       });
}

Tensor scale(const Tensor& a, double factor) {
  const auto& x = OpBuilder::value(a);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  const std::size_t n = x.size();
  return OpBuilder::op(a.shape(), std::move(out), {a},
                       [n, factor](const Node&, const double* g, std::span<double* const> pg) {
                         for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[i] * factor;
                       });
}

Tensor sum(const Tensor& a) {
  const auto& x = OpBuilder::value(a);
  double s = 0.0;
  for (double v : x) s += v;
  const std::size_t n = x.size();
  return OpBuilder::op({1}, {s}, {a},
                       [n](const Node&, const double* g, std::span<double* const> pg) {
                         for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[0];
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_shape(shape);
  if (shape_numel(shape) != a.numel()) {
    fail(ErrorKind::Dimension, "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  const std::size_t n = a.numel();
  return OpBuilder::op(std::move(shape), OpBuilder::value(a), {a},
                       [n](const Node&, const double* g, std::span<double* const> pg) {
                         for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[i];
                       });
}

namespace {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorKind::Dimension, "concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) {
    fail(ErrorKind::Dimension, "concat: axis " + std::to_string(axis) + " out of range for " +
                                   shape_str(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      fail(ErrorKind::Dimension, "concat: " + shape_str(s) + " incompatible with " +
                                     shape_str(first) + " on axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
    widths.push_back(s[axis]);
  }
  const auto split = split_at(first, axis);
  const std::size_t total = out_shape[axis];
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& v = OpBuilder::value(parts[pi]);
    const std::size_t block = widths[pi] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(v.data() + o * block, block,
                  out.data() + (o * total + offset) * split.inner);
    }
    offset += widths[pi];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return OpBuilder::op(
      std::move(out_shape), std::move(out), std::move(inputs),
      [split, total, widths](const Node&, const double* g, std::span<double* const> pg) {
        std::size_t offset = 0;
        for (std::size_t pi = 0; pi < widths.size(); ++pi) {
          const std::size_t block = widths[pi] * split.inner;
          if (double* dst = pg[pi]) {
            for (std::size_t o = 0; o < split.outer; ++o) {
              const double* src = g + (o * total + offset) * split.inner;
              double* d = dst + o * block;
              for (std::size_t i = 0; i < block; ++i) d[i] += src[i];
            }
          }
          offset += widths[pi];
        }
      });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis]) {
    fail(ErrorKind::Dimension, "slice: [" + std::to_string(start) + ", " +
                                   std::to_string(start + length) + ") on axis " +
                                   std::to_string(axis) + " of " + shape_str(s));
  }
  const auto split = split_at(s, axis);
  const std::size_t full = s[axis];
  Shape out_shape = s;
  out_shape[axis] = length;
  const auto& v = OpBuilder::value(a);
  std::vector<double> out(shape_numel(out_shape));
  const std::size_t block = length * split.inner;
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(v.data() + (o * full + start) * split.inner, block, out.data() + o * block);
  }
  return OpBuilder::op(std::move(out_shape), std::move(out), {a},
                       [split, full, start, block](const Node&, const double* g,
                                                   std::span<double* const> pg) {
                         for (std::size_t o = 0; o < split.outer; ++o) {
                           double* d = pg[0] + (o * full + start) * split.inner;
                           const double* src = g + o * block;
                           for (std::size_t i = 0; i < block; ++i) d[i] += src[i];
                         }
                       });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  require_rank(table, 2, "embedding");
  if (ids.empty()) fail(ErrorKind::Dimension, "embedding: empty id list");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  for (auto id : ids) {
    if (id >= rows) {
      fail(ErrorKind::Index, "embedding: id " + std::to_string(id) + " >= table rows " +
                                 std::to_string(rows));
    }
  }
  const auto& v = OpBuilder::value(table);
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(v.data() + ids[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return OpBuilder::op({ids.size(), d}, std::move(out), {table},
                       [idx = std::move(idx), d](const Node&, const double* g,
                                                 std::span<double* const> pg) {
                         for (std::size_t i = 0; i < idx.size(); ++i) {
                           double* dst = pg[0] + idx[i] * d;
                           const double* src = g + i * d;
                           for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                         }
                       });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(gamma, 1, "layer_norm");
  require_rank(beta, 1, "layer_norm");
  const std::size_t n = x.shape().back();
  if (gamma.dim(0) != n || beta.dim(0) != n) {
    fail(ErrorKind::Dimension, "layer_norm: affine params " + shape_str(gamma.shape()) +
                                   " do not match " + shape_str(x.shape()));
  }
  const std::size_t m = x.numel() / n;
  const auto& xv = OpBuilder::value(x);
  const auto& gv = OpBuilder::value(gamma);
  const auto& bv = OpBuilder::value(beta);
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> rstd(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mean) * rstd[i];
      xhat[i * n + j] = h;
      out[i * n + j] = h * gv[j] + bv[j];
    }
  }
  return OpBuilder::op(
      x.shape(), std::move(out), {x, gamma, beta},
      [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](
          const Node& self, const double* g, std::span<double* const> pg) {
        const auto& gv = self.parents[1]->value;
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g + i * n;
          const double* h = xhat.data() + i * n;
          if (pg[1])
            for (std::size_t j = 0; j < n; ++j) pg[1][j] += grow[j] * h[j];
          if (pg[2])
            for (std::size_t j = 0; j < n; ++j) pg[2][j] += grow[j];
          if (pg[0]) {
            double mean_d = 0.0, mean_dh = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = grow[j] * gv[j];
              mean_d += d;
              mean_dh += d * h[j];
            }
            mean_d /= static_cast<double>(n);
            mean_dh /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double d = grow[j] * gv[j];
              pg[0][i * n + j] += rstd[i] * (d - mean_d - h[j] * mean_dh);
            }
          }
        }
      });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  const auto& xv = OpBuilder::value(x);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  const std::size_t n = xv.size();
  return OpBuilder::op(x.shape(), std::move(out), {x},
                       [n](const Node& self, const double* g, std::span<double* const> pg) {
                         const auto& xv = self.parents[0]->value;
                         for (std::size_t i = 0; i < n; ++i) {
                           const double v = xv[i];
                           const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
                           const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
                           pg[0][i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                         }
                       });
}

namespace {

void require_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) fail(ErrorKind::Numeric, std::string(op) + ": non-finite input");
  }
}

}  // namespace

Tensor softmax(const Tensor& t, std::size_t axis) {
  if (axis >= t.rank()) {
    fail(ErrorKind::Dimension, "softmax: axis " + std::to_string(axis) + " out of range for " +
                                   shape_str(t.shape()));
  }
  const auto& v = OpBuilder::value(t);
  require_finite(v, "softmax");
  const auto split = split_at(t.shape(), axis);
  const std::size_t len = t.shape()[axis];
  std::vector<double> out(v.size());
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t in = 0; in < split.inner; ++in) {
      const std::size_t base = o * len * split.inner + in;
      double mx = v[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, v[base + k * split.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(v[base + k * split.inner] - mx);
        out[base + k * split.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * split.inner] /= z;
    }
  }
  return OpBuilder::op(t.shape(), std::move(out), {t},
                       [split, len](const Node& self, const double* g, std::span<double* const> pg) {
                         const auto& y = self.value;
                         for (std::size_t o = 0; o < split.outer; ++o) {
                           for (std::size_t in = 0; in < split.inner; ++in) {
                             const std::size_t base = o * len * split.inner + in;
                             double dot = 0.0;
                             for (std::size_t k = 0; k < len; ++k) {
                               const std::size_t i = base + k * split.inner;
                               dot += g[i] * y[i];
                             }
                             for (std::size_t k = 0; k < len; ++k) {
                               const std::size_t i = base + k * split.inner;
                               pg[0][i] += y[i] * (g[i] - dot);
                             }
                           }
                         }
                       });
}

Tensor masked_softmax(const Tensor& t, std::span<const std::uint8_t> keep) {
  require_rank(t, 2, "masked_softmax");
  if (keep.size() != t.numel()) {
    fail(ErrorKind::Dimension, "masked_softmax: mask size " + std::to_string(keep.size()) +
                                   " vs " + shape_str(t.shape()));
  }
  const auto& v = OpBuilder::value(t);
  require_finite(v, "masked_softmax");
  const std::size_t m = t.dim(0), n = t.dim(1);
  std::vector<double> out(v.size(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = v.data() + i * n;
    const std::uint8_t* k = keep.data() + i * n;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j)
      if (k[j]) mx = std::max(mx, row[j]);
    if (mx == -INFINITY) {
      fail(ErrorKind::Contract, "masked_softmax: row " + std::to_string(i) + " fully masked");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!k[j]) continue;
      out[i * n + j] = std::exp(row[j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return OpBuilder::op(t.shape(), std::move(out), {t},
                       [m, n](const Node& self, const double* g, std::span<double* const> pg) {
                         const auto& y = self.value;
                         for (std::size_t i = 0; i < m; ++i) {
                           double dot = 0.0;
                           for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                           for (std::size_t j = 0; j < n; ++j)
                             pg[0][i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                         }
                       });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t T = logits.dim(0), V = logits.dim(1);
  if (targets.size() != T) {
    fail(ErrorKind::Dimension, "cross_entropy: " + std::to_string(targets.size()) +
                                   " targets for logits " + shape_str(logits.shape()));
  }
  for (auto id : targets) {
    if (id >= V) {
      fail(ErrorKind::Index, "cross_entropy: target " + std::to_string(id) + " >= vocab " +
                                 std::to_string(V));
    }
  }
  const auto& v = OpBuilder::value(logits);
  require_finite(v, "cross_entropy");
  std::vector<double> probs(v.size());
  double loss = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = v.data() + t * V;
    const double mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      probs[t * V + j] = std::exp(row[j] - mx);
      z += probs[t * V + j];
    }
    for (std::size_t j = 0; j < V; ++j) probs[t * V + j] /= z;
    loss -= row[targets[t]] - mx - std::log(z);
  }
  loss /= static_cast<double>(T);
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return OpBuilder::op({1}, {loss}, {logits},
                       [T, V, probs = std::move(probs), tg = std::move(tg)](
                           const Node&, const double* g, std::span<double* const> pg) {
                         const double s = g[0] / static_cast<double>(T);
                         for (std::size_t t = 0; t < T; ++t) {
                           for (std::size_t j = 0; j < V; ++j) pg[0][t * V + j] += s * probs[t * V + j];
                           pg[0][t * V + tg[t]] -= s;
                         }
                       });
}

// --- oracle -----------------------------------------------------------------

std::vector<double> finite_diff_grad(const std::function<Tensor(const Tensor&)>& f, Tensor t,
                                     double eps) {
  if (!(eps > 0.0)) fail(ErrorKind::Contract, "finite_diff_grad: eps must be positive");
  if (!t.is_leaf()) fail(ErrorKind::Contract, "finite_diff_grad: tensor must be a leaf");
  const double base1 = f(t).item();
  const double base2 = f(t).item();
  if (!(base1 == base2)) {
    fail(ErrorKind::Oracle, "finite_diff_grad: f is not deterministic (" + std::to_string(base1) +
                                " vs " + std::to_string(base2) + ")");
  }
  auto x = t.mutable_data();
  std::vector<double> grad(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double orig = x[j];
    x[j] = orig + eps;
    const double fp = f(t).item();
    x[j] = orig - eps;
    const double fm = f(t).item();
    x[j] = orig;
    grad[j] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double abs_floor) {
  if (a.size() != b.size()) fail(ErrorKind::Dimension, "max_relative_error: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = std::abs(a[i] - b[i]);
    if (diff <= abs_floor) continue;
    worst = std::max(worst, diff / std::max(std::abs(a[i]), std::abs(b[i])));
  }
  return worst;
}

}  // namespace pmerge
