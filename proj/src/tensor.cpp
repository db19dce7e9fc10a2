#include "nre/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "nre/error.hpp"
#include "tensor_node.hpp"

namespace nre {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace detail {
std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

namespace {

NodePtr new_node(Shape shape, std::vector<double> data, const char* op) {
  for (auto extent : shape) {
    if (extent == 0) fail(ErrorCode::kDimension, "zero extent in shape " + shape_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    fail(ErrorCode::kDimension, "shape " + shape_string(shape) + " does not hold " + std::to_string(data.size()) +
                                    " values");
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  n->id = detail::next_node_id();
  return n;
}

Tensor make_op(Shape shape, std::vector<double> data, const char* op, std::initializer_list<const Tensor*> inputs,
               std::function<void(Node&)> backward) {
  auto n = new_node(std::move(shape), std::move(data), op);
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (any && g_grad_enabled) {
    n->requires_grad = true;
    for (const Tensor* t : inputs) n->parents.push_back(t->node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

// Accumulation target for parent i, or nullptr when it needs no gradient.
double* grad_of(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) fail(ErrorCode::kContract, std::string(op) + ": undefined tensor");
}

void require_rank2(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.rank() != 2) fail(ErrorCode::kDimension, std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    fail(ErrorCode::kDimension,
         std::string(op) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  }
}

// Rows/cols view where a vector counts as one row.
std::pair<std::size_t, std::size_t> as_matrix(const Tensor& t) {
  if (t.rank() == 2) return {t.shape()[0], t.shape()[1]};
  return {1, t.numel()};
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_vector(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values, bool requires_grad) {
  auto n = new_node(std::move(shape), std::move(values), "leaf");
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value) { return from_vector({}, {value}); }

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::numel() const { return defined() ? node_->data.size() : 0; }

std::size_t Tensor::rows() const {
  require_rank2(*this, "rows");
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  require_rank2(*this, "cols");
  return node_->shape[1];
}

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) fail(ErrorCode::kContract, "item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  require_defined(*this, "set_requires_grad");
  node_->requires_grad = value;
}

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require_defined(*this, "mutable_grad");
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  require_defined(*this, "zero_grad");
  node_->grad.clear();
}

std::uint64_t Tensor::id() const { return defined() ? node_->id : 0; }

const char* Tensor::op() const { return defined() ? node_->op : "undefined"; }

Tensor Tensor::detach() const { return from_vector(shape(), node_->data); }

namespace {

std::vector<Node*> topological_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS; (node, next-parent-index).
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (!root->requires_grad) return order;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (numel() != 1) fail(ErrorCode::kContract, "backward() needs a scalar loss, got " + shape_string(shape()));
  Node* root = node_.get();
  if (!root->requires_grad) fail(ErrorCode::kContract, "backward() on a tensor with no differentiable inputs");
  auto order = topological_order(root);
  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->data.size(), 0.0);
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

std::vector<TapeEntry> record_tape(const Tensor& root) {
  require_defined(root, "record_tape");
  std::vector<TapeEntry> tape;
  for (Node* n : topological_order(root.node().get())) {
    TapeEntry e{n->id, n->op, {}};
    for (const auto& p : n->parents) {
      if (p->requires_grad) e.parents.push_back(p->id);
    }
    tape.push_back(std::move(e));
  }
  return tape;
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    fail(ErrorCode::kDimension,
         "matmul: inner dimensions of " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  }
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_op({m, n}, std::move(out), "matmul", {&a, &b}, [m, k, n](Node& self) {
    const double* G = self.grad.data();
    const Node& an = *self.parents[0];
    const Node& bn = *self.parents[1];
    if (double* dA = grad_of(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = bn.data.data() + p * n;
          const double* grow = G + i * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          dA[i * k + p] += acc;
        }
      }
    }
    if (double* dB = grad_of(self, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = an.data[i * k + p];
          if (av == 0.0) continue;
          double* drow = dB + p * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  auto A = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  return make_op({n, m}, std::move(out), "transpose", {&a}, [m, n](Node& self) {
    if (double* d = grad_of(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] += self.grad[j * m + i];
    }
  });
}

// ---- elementwise --------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto A = a.data(), B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
  return make_op(a.shape(), std::move(out), "add", {&a, &b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* d = grad_of(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto A = a.data(), B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
  return make_op(a.shape(), std::move(out), "sub", {&a, &b}, [](Node& self) {
    if (double* d = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    if (double* d = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] -= self.grad[i];
  });
}

Tensor multiply(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "multiply");
  std::vector<double> out(a.numel());
  auto A = a.data(), B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  return make_op(a.shape(), std::move(out), "multiply", {&a, &b}, [](Node& self) {
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    if (double* d = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * bv[i];
    if (double* d = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * av[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return make_op(a.shape(), std::move(out), "scale", {&a}, [factor](Node& self) {
    if (double* d = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += factor * self.grad[i];
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank2(x, "add_bias");
  require_defined(bias, "add_bias");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.numel() != n) {
    fail(ErrorCode::kDimension,
         "add_bias: bias " + shape_string(bias.shape()) + " does not match columns of " + shape_string(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto B = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += B[j];
  return make_op(x.shape(), std::move(out), "add_bias", {&x, &bias}, [m, n](Node& self) {
    if (double* d = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    if (double* d = grad_of(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) d[j] += self.grad[i * n + j];
  });
}

Tensor tanh(const Tensor& x) {
  require_defined(x, "tanh");
  std::vector<double> out(x.numel());
  auto X = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(X[i]);
  return make_op(x.shape(), std::move(out), "tanh", {&x}, [](Node& self) {
    if (double* d = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * (1.0 - self.data[i] * self.data[i]);
  });
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  std::vector<double> out(x.numel());
  auto X = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] > 0.0 ? X[i] : 0.0;
  return make_op(x.shape(), std::move(out), "relu", {&x}, [](Node& self) {
    const auto& in = self.parents[0]->data;
    if (double* d = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (in[i] > 0.0) d[i] += self.grad[i];
  });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  require_defined(x, "dropout");
  if (p < 0.0 || p >= 1.0) fail(ErrorCode::kContract, "dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng.bernoulli(p) ? 0.0 : keep_scale;
  std::vector<double> out(x.numel());
  auto X = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] * mask[i];
  return make_op(x.shape(), std::move(out), "dropout", {&x}, [mask = std::move(mask)](Node& self) {
    if (double* d = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * mask[i];
  });
}

// ---- structure ------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    fail(ErrorCode::kDimension, "reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op(std::move(shape), std::move(out), "reshape", {&x}, [](Node& self) {
    if (double* d = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorCode::kContract, "concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const std::size_t rank = parts[0].rank();
  for (const auto& p : parts) {
    if (p.rank() != rank) fail(ErrorCode::kDimension, "concat: mixed ranks");
  }
  if (rank == 0 || rank > 2 || axis >= rank) fail(ErrorCode::kDimension, "concat: unsupported rank/axis");

  Shape shape;
  std::vector<double> out;
  // Per part: (column offset, width) for axis 1; flat offset for the rest.
  std::vector<std::size_t> offsets;
  if (rank == 1 || axis == 0) {
    std::size_t total = 0;
    const std::size_t width = rank == 2 ? parts[0].cols() : 0;
    for (const auto& p : parts) {
      if (rank == 2 && p.cols() != width) {
        fail(ErrorCode::kDimension, "concat: column counts differ (" + shape_string(p.shape()) + ")");
      }
      offsets.push_back(out.size());
      out.insert(out.end(), p.data().begin(), p.data().end());
      total += rank == 2 ? p.rows() : p.numel();
    }
    shape = rank == 2 ? Shape{total, width} : Shape{total};
  } else {
    const std::size_t m = parts[0].rows();
    std::size_t width = 0;
    for (const auto& p : parts) {
      if (p.rows() != m) fail(ErrorCode::kDimension, "concat: row counts differ (" + shape_string(p.shape()) + ")");
      offsets.push_back(width);
      width += p.cols();
    }
    out.resize(m * width);
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const std::size_t c = parts[k].cols();
      auto src = parts[k].data();
      for (std::size_t i = 0; i < m; ++i)
        std::copy_n(src.begin() + i * c, c, out.begin() + i * width + offsets[k]);
    }
    shape = {m, width};
  }

  auto n = new_node(shape, std::move(out), "concat");
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any && g_grad_enabled) {
    n->requires_grad = true;
    for (const auto& p : parts) n->parents.push_back(p.node());
    const bool by_columns = rank == 2 && axis == 1;
    n->backward = [offsets, by_columns](Node& self) {
      const std::size_t width = by_columns ? self.shape[1] : 0;
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        double* d = grad_of(self, k);
        if (!d) continue;
        const Node& p = *self.parents[k];
        if (!by_columns) {
          for (std::size_t i = 0; i < p.data.size(); ++i) d[i] += self.grad[offsets[k] + i];
        } else {
          const std::size_t m = p.shape[0], c = p.shape[1];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) d[i * c + j] += self.grad[i * width + offsets[k] + j];
        }
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_rows");
  if (begin >= end || end > x.rows()) {
    fail(ErrorCode::kIndex, "slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                                shape_string(x.shape()));
  }
  const std::size_t n = x.cols();
  std::vector<double> out(x.data().begin() + begin * n, x.data().begin() + end * n);
  return make_op({end - begin, n}, std::move(out), "slice_rows", {&x}, [begin, n](Node& self) {
    if (double* d = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[begin * n + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_cols");
  if (begin >= end || end > x.cols()) {
    fail(ErrorCode::kIndex, "slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                                shape_string(x.shape()));
  }
  const std::size_t m = x.rows(), n = x.cols(), w = end - begin;
  std::vector<double> out(m * w);
  auto X = x.data();
  for (std::size_t i = 0; i < m; ++i) std::copy_n(X.begin() + i * n + begin, w, out.begin() + i * w);
  return make_op({m, w}, std::move(out), "slice_cols", {&x}, [m, n, w, begin](Node& self) {
    if (double* d = grad_of(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) d[i * n + begin + j] += self.grad[i * w + j];
  });
}

Tensor embedding_gather(const Tensor& table, std::span<const std::size_t> ids) {
  require_rank2(table, "embedding_gather");
  if (ids.empty()) fail(ErrorCode::kContract, "embedding_gather: no ids");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  auto T = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) {
      fail(ErrorCode::kIndex,
           "embedding_gather: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v) + " rows");
    }
    std::copy_n(T.begin() + ids[i] * d, d, out.begin() + i * d);
  }
  std::vector<std::size_t> saved(ids.begin(), ids.end());
  return make_op({ids.size(), d}, std::move(out), "embedding_gather", {&table}, [saved = std::move(saved), d](Node& self) {
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < saved.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[saved[i] * d + j] += self.grad[i * d + j];
  });
}

// ---- reductions ---------------------------------------------------------------

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_op({}, {s}, "sum", {&x}, [](Node& self) {
    if (double* d = grad_of(self, 0))
      for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) d[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor l2_norm(const Tensor& x) {
  require_defined(x, "l2_norm");
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  const double norm = std::sqrt(s);
  return make_op({}, {norm}, "l2_norm", {&x}, [norm](Node& self) {
    if (norm == 0.0) return;  // subgradient 0 at the origin
    const auto& in = self.parents[0]->data;
    if (double* d = grad_of(self, 0))
      for (std::size_t i = 0; i < in.size(); ++i) d[i] += self.grad[0] * in[i] / norm;
  });
}

Tensor max_pool_rows(const Tensor& x) {
  require_rank2(x, "max_pool_rows");
  const std::size_t m = x.rows(), n = x.cols();
  auto X = x.data();
  std::vector<double> out(n);
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t j = 0; j < n; ++j) {
    double best = X[j];
    for (std::size_t i = 1; i < m; ++i) {
      if (X[i * n + j] > best) {
        best = X[i * n + j];
        arg[j] = i;
      }
    }
    out[j] = best;
  }
  return make_op({n}, std::move(out), "max_pool_rows", {&x}, [arg = std::move(arg), n](Node& self) {
    if (double* d = grad_of(self, 0))
      for (std::size_t j = 0; j < n; ++j) d[arg[j] * n + j] += self.grad[j];
  });
}

// ---- neural ops ------------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  require_defined(x, "softmax_rows");
  const auto [m, n] = as_matrix(x);
  auto X = x.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = X.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return make_op(x.shape(), std::move(out), "softmax_rows", {&x}, [m = m, n = n](Node& self) {
    if (double* d = grad_of(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* y = self.data.data() + i * n;
        const double* g = self.grad.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] += y[j] * (g[j] - dot);
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank2(logits, "cross_entropy");
  const std::size_t m = logits.rows(), n = logits.cols();
  if (labels.size() != m) {
    fail(ErrorCode::kDimension,
         "cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(m) + " rows");
  }
  auto X = logits.data();
  std::vector<double> probs(m * n);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] >= n) {
      fail(ErrorCode::kIndex,
           "cross_entropy: label " + std::to_string(labels[i]) + " with " + std::to_string(n) + " classes");
    }
    const double* row = X.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(row[j] - mx) / z;
    loss += std::log(z) + mx - row[labels[i]];
  }
  loss /= static_cast<double>(m);
  std::vector<std::size_t> saved(labels.begin(), labels.end());
  return make_op({}, {loss}, "cross_entropy", {&logits},
                 [probs = std::move(probs), saved = std::move(saved), m, n](Node& self) {
                   if (double* d = grad_of(self, 0)) {
                     const double g = self.grad[0] / static_cast<double>(m);
                     for (std::size_t i = 0; i < m; ++i) {
                       for (std::size_t j = 0; j < n; ++j) {
                         const double target = j == saved[i] ? 1.0 : 0.0;
                         d[i * n + j] += g * (probs[i * n + j] - target);
                       }
                     }
                   }
                 });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank2(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.numel() != n || beta.numel() != n) {
    fail(ErrorCode::kDimension, "layer_norm: scale/offset size does not match " + shape_string(x.shape()));
  }
  auto X = x.data();
  auto G = gamma.data();
  auto B = beta.data();
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = X.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      out[i * n + j] = G[j] * xhat[i * n + j] + B[j];
    }
  }
  return make_op(x.shape(), std::move(out), "layer_norm", {&x, &gamma, &beta},
                 [xhat = std::move(xhat), inv_std = std::move(inv_std), m, n](Node& self) {
                   const auto& gam = self.parents[1]->data;
                   double* dx = grad_of(self, 0);
                   double* dg = grad_of(self, 1);
                   double* db = grad_of(self, 2);
                   std::vector<double> dxhat(n);
                   for (std::size_t i = 0; i < m; ++i) {
                     const double* g = self.grad.data() + i * n;
                     const double* xh = xhat.data() + i * n;
                     double mean_d = 0.0, mean_dx = 0.0;
                     for (std::size_t j = 0; j < n; ++j) {
                       dxhat[j] = g[j] * gam[j];
                       mean_d += dxhat[j];
                       mean_dx += dxhat[j] * xh[j];
                       if (dg) dg[j] += g[j] * xh[j];
                       if (db) db[j] += g[j];
                     }
                     mean_d /= static_cast<double>(n);
                     mean_dx /= static_cast<double>(n);
                     if (dx)
                       for (std::size_t j = 0; j < n; ++j)
                         dx[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                   }
                 });
}

Tensor neg_sq_distance(const Tensor& a, const Tensor& b) {
  require_rank2(a, "neg_sq_distance");
  require_rank2(b, "neg_sq_distance");
  if (a.cols() != b.cols()) {
    fail(ErrorCode::kDimension,
         "neg_sq_distance: widths of " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  }
  const std::size_t m = a.rows(), nb = b.rows(), d = a.cols();
  auto A = a.data(), B = b.data();
  std::vector<double> out(m * nb);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < nb; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = A[i * d + k] - B[j * d + k];
        s += diff * diff;
      }
      out[i * nb + j] = -s;
    }
  }
  return make_op({m, nb}, std::move(out), "neg_sq_distance", {&a, &b}, [m, nb, d](Node& self) {
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    double* da = grad_of(self, 0);
    double* db = grad_of(self, 1);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < nb; ++j) {
        const double g = self.grad[i * nb + j];
        if (g == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = av[i * d + k] - bv[j * d + k];
          if (da) da[i * d + k] -= 2.0 * g * diff;
          if (db) db[j * d + k] += 2.0 * g * diff;
        }
      }
    }
  });
}

Tensor unfold_windows(const Tensor& x, std::size_t window, std::size_t seq_len) {
  require_rank2(x, "unfold_windows");
  if (window == 0 || seq_len < window || x.rows() % seq_len != 0) {
    fail(ErrorCode::kDimension, "unfold_windows: window " + std::to_string(window) + ", sequence length " +
                                    std::to_string(seq_len) + " over " + shape_string(x.shape()));
  }
  const std::size_t d = x.cols(), batch = x.rows() / seq_len, outs = seq_len - window + 1;
  const std::size_t width = window * d;
  std::vector<double> out(batch * outs * width);
  auto X = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < outs; ++t)
      std::copy_n(X.begin() + (b * seq_len + t) * d, width, out.begin() + (b * outs + t) * width);
  return make_op({batch * outs, width}, std::move(out), "unfold_windows", {&x},
                 [batch, outs, seq_len, width, d](Node& self) {
                   if (double* g = grad_of(self, 0))
                     for (std::size_t b = 0; b < batch; ++b)
                       for (std::size_t t = 0; t < outs; ++t) {
                         const double* src = self.grad.data() + (b * outs + t) * width;
                         double* dst = g + (b * seq_len + t) * d;
                         for (std::size_t k = 0; k < width; ++k) dst[k] += src[k];
                       }
                 });
}

Tensor conv1d_window(const Tensor& x, const Tensor& filters, const Tensor& bias, std::size_t window,
                     std::size_t seq_len) {
  return add_bias(matmul(unfold_windows(x, window, seq_len), filters), bias);
}

Tensor segment_max_pool(const Tensor& h, std::span<const int> segments, std::size_t pieces, std::size_t seq_len) {
  require_rank2(h, "segment_max_pool");
  if (segments.size() != h.rows()) {
    fail(ErrorCode::kDimension, "segment_max_pool: " + std::to_string(segments.size()) + " segment ids for " +
                                    shape_string(h.shape()));
  }
  if (seq_len == 0 || h.rows() % seq_len != 0) {
    fail(ErrorCode::kDimension, "segment_max_pool: rows not a multiple of sequence length");
  }
  const std::size_t d = h.cols(), batch = h.rows() / seq_len, width = pieces * d;
  auto H = h.data();
  std::vector<double> out(batch * width, kPoolFloor);
  // Source row per output cell; SIZE_MAX marks a floor value.
  std::vector<std::size_t> arg(batch * width, SIZE_MAX);
  for (std::size_t b = 0; b < batch; ++b) {
    bool any = false;
    for (std::size_t t = 0; t < seq_len; ++t) {
      const std::size_t row = b * seq_len + t;
      const int s = segments[row];
      if (s < 0 || static_cast<std::size_t>(s) > pieces) {
        fail(ErrorCode::kIndex, "segment_max_pool: segment id " + std::to_string(s) + " at row " + std::to_string(row));
      }
      if (s == 0) continue;
      any = true;
      const std::size_t base = b * width + static_cast<std::size_t>(s - 1) * d;
      for (std::size_t j = 0; j < d; ++j) {
        const double v = H[row * d + j];
        if (arg[base + j] == SIZE_MAX || v > out[base + j]) {
          out[base + j] = v;
          arg[base + j] = row;
        }
      }
    }
    if (!any) fail(ErrorCode::kDegenerateInput, "segment_max_pool: sequence " + std::to_string(b) + " is all padding");
  }
  return make_op({batch, width}, std::move(out), "segment_max_pool", {&h}, [arg = std::move(arg), d](Node& self) {
    if (double* g = grad_of(self, 0))
      for (std::size_t c = 0; c < arg.size(); ++c)
        if (arg[c] != SIZE_MAX) g[arg[c] * d + c % d] += self.grad[c];
  });
}

Tensor piecewise_max_pool(const Tensor& h, std::span<const int> segments) {
  require_rank2(h, "piecewise_max_pool");
  return reshape(segment_max_pool(h, segments, 3, h.rows()), {3 * h.cols()});
}

}  // namespace nre
