#pragma once

// Dense 64-bit tensors with tape-based reverse-mode differentiation.
//
// Every primitive below computes its forward value eagerly. When a Tape is
// active on the calling thread (see TapeScope) and at least one input
// requires a gradient, the primitive also records a local backward rule on
// that tape. Tape::backward replays the records in reverse order, so the
// accumulation order is fixed and results are bit-reproducible.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fms {

using Shape = std::vector<std::size_t>;

/// Raised when an operation's documented precondition does not hold.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until materialized
  bool requires_grad = false;
  std::uint64_t id = 0;

  std::vector<double>& grad_slot();
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);
  /// Leaf tensor that accumulates gradients (a learnable parameter).
  static Tensor param(Shape shape, std::vector<double> data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;
  std::uint64_t node_id() const;

  std::span<const double> data() const;
  /// Writable view for leaf tensors (parameter updates, test perturbation).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  /// Gradient view; all zeros when no gradient was accumulated.
  std::vector<double> grad() const;
  void zero_grad();

  /// Same values, no gradient tracking.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_result(Shape, std::vector<double>,
                            std::initializer_list<const Tensor*>);
  friend class Tape;
};

class Tape {
 public:
  struct Record {
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::shared_ptr<detail::Node> output;
    std::function<void()> backward;
  };

  void record(Record r);
  /// Accumulates d(root)/d(input) into every reachable input's gradient.
  void backward(const Tensor& root);
  void clear();
  std::size_t size() const { return records_.size(); }

 private:
  std::vector<Record> records_;
};

/// Makes `tape` the active tape for the current thread for this scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

void backward(Tape& tape, const Tensor& root);

using Index = std::vector<std::int64_t>;

// Elementwise. Shapes must match, or one side must hold a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
Tensor clamp(const Tensor& a, double lo, double hi);
/// Huber with delta 1: 0.5 r^2 for |r| < 1, |r| - 0.5 otherwise.
Tensor smooth_l1(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& a, Shape shape);
/// Concatenation of 2-D tensors along axis 0 (rows) or 1 (columns).
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);

/// Row-wise softmax of a 2-D tensor.
Tensor softmax(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Row-wise cosine similarity of two N x D tensors -> N x 1. Defined as 0
/// when either row is the zero vector.
Tensor cosine_rows(const Tensor& a, const Tensor& b);

/// out[i] = a[idx[i]] along `axis` of a 2-D tensor.
Tensor gather(const Tensor& a, int axis, const Index& idx);
/// out[idx[i]] += a[i] along `axis`; `extent` is the output size on that axis.
Tensor scatter_add(const Tensor& a, int axis, const Index& idx,
                   std::size_t extent);

/// Tap table for neighbor_conv: table[t][i] is the row read by tap t for
/// output row i, or -1 when the neighbor is absent (reads zero).
using TapTable = std::vector<Index>;

/// Depthwise sparse convolution: out[i,c] = sum_t w[t,c] * x[table[t][i], c].
Tensor neighbor_conv(const Tensor& x, const Tensor& w,
                     std::shared_ptr<const TapTable> table);

/// "Same" zero-padded depthwise 1-D convolution along rows with 2K+1 taps
/// (w has 2K+1 rows). When `segments` is non-empty, taps never cross a
/// change in segment id.
Tensor conv1d(const Tensor& x, const Tensor& w,
              const std::vector<int>& segments = {});
TapTable conv1d_table(std::size_t n, std::size_t taps,
                      const std::vector<int>& segments = {});

/// h[i] = a[i] * h[i-1] + b[i] with h[-1] = 0, elementwise over columns.
Tensor linear_recurrence(const Tensor& a, const Tensor& b);

}  // namespace fms
