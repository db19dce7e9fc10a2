#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// Every op returns a fresh Tensor whose node keeps shared ownership of its
// parents, so a graph lives exactly as long as its output handle. There is
// no global tape: independent graphs can be built on different threads as
// long as they only read shared parameters.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nre/rng.hpp"

namespace nre {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  std::uint64_t id() const;
  const char* op() const;

  // Copy of the values with no history.
  Tensor detach() const;

  // Seeds d(self)/d(self) = 1 and propagates to every requires_grad
  // ancestor. Leaf gradients accumulate across calls; intermediate
  // gradients are recomputed each call.
  void backward() const;

  // Internal handle; only the op implementations use it.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// While alive on a thread, ops on that thread record no history.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

struct TapeEntry {
  std::uint64_t id;
  std::string op;
  std::vector<std::uint64_t> parents;
};

// Topological order of the differentiable subgraph reaching `root`
// (parents before children, each node once).
std::vector<TapeEntry> record_tape(const Tensor& root);

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor multiply(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// x[m x n] + bias[n] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);

// Inverted dropout: kept entries are scaled by 1/(1-p); identity when not
// training or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

// ---- structure -----------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
// axis 0 stacks rows (rank 2) or joins vectors (rank 1); axis 1 joins columns.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
// Row lookup; backward scatter-adds into the table.
Tensor embedding_gather(const Tensor& table, std::span<const std::size_t> ids);

// ---- reductions ----------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor l2_norm(const Tensor& x);
// Column-wise max over all rows: [m x n] -> [n].
Tensor max_pool_rows(const Tensor& x);

// ---- neural ops ----------------------------------------------------------

Tensor softmax_rows(const Tensor& x);
// Mean negative log-likelihood of `labels` under row softmax.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// out[i][j] = -||a_i - b_j||^2.
Tensor neg_sq_distance(const Tensor& a, const Tensor& b);

// Stacked sequences of `seq_len` rows each -> every window of `window`
// consecutive rows flattened: [B*seq_len x d] -> [B*(seq_len-window+1) x window*d].
Tensor unfold_windows(const Tensor& x, std::size_t window, std::size_t seq_len);
// Valid convolution over each stacked sequence as unfold + matmul + bias.
Tensor conv1d_window(const Tensor& x, const Tensor& filters, const Tensor& bias, std::size_t window,
                     std::size_t seq_len);

// Value that an empty pooling segment contributes.
inline constexpr double kPoolFloor = -100.0;

// Per-sequence, per-segment column max. `segments` holds one id per row in
// {0..pieces}; 0 is excluded from every piece. Output [B x pieces*d] with
// piece blocks in id order. Empty pieces yield kPoolFloor; a sequence with no
// nonzero segment is a degenerate-input error.
Tensor segment_max_pool(const Tensor& h, std::span<const int> segments, std::size_t pieces,
                        std::size_t seq_len);
// Three-piece pooling of a single sequence: [L x d] -> [3d].
Tensor piecewise_max_pool(const Tensor& h, std::span<const int> segments);

}  // namespace nre
