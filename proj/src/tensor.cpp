#include "fms/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace fms {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local Tape* t_active = nullptr;

using NodePtr = std::shared_ptr<detail::Node>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractError(msg);
}

void require_2d(const Tensor& t, const char* op) {
  require(t.shape().size() == 2,
          std::string(op) + ": expected a 2-D tensor, got " +
              shape_str(t.shape()));
}

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (t_active == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

std::vector<double>& detail::Node::grad_slot() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  require(shape_numel(shape) == data.size(),
          "tensor: shape " + shape_str(shape) + " does not match " +
              std::to_string(data.size()) + " values");
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->id = g_next_id++;
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::param(Shape shape, std::vector<double> data) {
  Tensor t = from(std::move(shape), std::move(data));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->data.size(); }
std::size_t Tensor::rows() const { return node_->shape.at(0); }
std::size_t Tensor::cols() const {
  return node_->shape.size() < 2 ? 1 : node_->shape[1];
}
std::uint64_t Tensor::node_id() const { return node_->id; }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  require(numel() == 1, "item: tensor of shape " + shape_str(shape()) +
                            " is not a scalar");
  return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->data[r * cols() + c];
}

bool Tensor::requires_grad() const {
  return node_ && node_->requires_grad;
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), node_->data); }

Tensor make_result(Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  out.node_->requires_grad = needs_grad(inputs);
  return out;
}

// ------------------------------------------------------------------ Tape

void Tape::record(Record r) { records_.push_back(std::move(r)); }

void Tape::backward(const Tensor& root) {
  require(root.defined() && root.numel() == 1,
          "backward: root must be a scalar, got shape " +
              (root.defined() ? shape_str(root.shape()) : "<undefined>"));
  if (!root.requires_grad()) return;
  root.node()->grad_slot()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
}

void Tape::clear() { records_.clear(); }

TapeScope::TapeScope(Tape& tape) : previous_(t_active) { t_active = &tape; }
TapeScope::~TapeScope() { t_active = previous_; }

Tape* active_tape() { return t_active; }

void backward(Tape& tape, const Tensor& root) { tape.backward(root); }

namespace {

void record(const Tensor& out, std::vector<NodePtr> inputs,
            std::function<void()> fn) {
  if (!out.requires_grad()) return;
  t_active->record({std::move(inputs), out.node(), std::move(fn)});
}

// Accumulates into `n`'s gradient only when it participates.
inline bool wants(const NodePtr& n) { return n->requires_grad; }

enum class Bin { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, Bin kind, const char* name) {
  const bool same = a.shape() == b.shape();
  const bool a_sc = a.numel() == 1 && !same;
  const bool b_sc = b.numel() == 1 && !same;
  require(same || a_sc || b_sc,
          std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
              " vs " + shape_str(b.shape()));
  const Shape& out_shape = a_sc ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[a_sc ? 0 : i];
    const double y = bv[b_sc ? 0 : i];
    out[i] = kind == Bin::add ? x + y : kind == Bin::sub ? x - y : x * y;
  }
  Tensor r = make_result(out_shape, std::move(out), {&a, &b});
  NodePtr an = a.node(), bn = b.node(), rn = r.node();
  record(r, {an, bn}, [an, bn, rn, kind, a_sc, b_sc, n] {
    const auto& g = rn->grad;
    if (wants(an)) {
      auto& ga = an->grad_slot();
      for (std::size_t i = 0; i < n; ++i) {
        const double d = kind == Bin::mul ? g[i] * bn->data[b_sc ? 0 : i]
                                          : g[i];
        ga[a_sc ? 0 : i] += d;
      }
    }
    if (wants(bn)) {
      auto& gb = bn->grad_slot();
      for (std::size_t i = 0; i < n; ++i) {
        double d = g[i];
        if (kind == Bin::sub) d = -d;
        if (kind == Bin::mul) d *= an->data[a_sc ? 0 : i];
        gb[b_sc ? 0 : i] += d;
      }
    }
  });
  return r;
}

// Elementwise unary op whose derivative is a function of (input, output).
template <typename F, typename D>
Tensor unary(const Tensor& a, F f, D df) {
  const std::size_t n = a.numel();
  auto av = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i]);
  Tensor r = make_result(a.shape(), std::move(out), {&a});
  NodePtr an = a.node(), rn = r.node();
  record(r, {an}, [an, rn, n, df] {
    auto& ga = an->grad_slot();
    for (std::size_t i = 0; i < n; ++i)
      ga[i] += rn->grad[i] * df(an->data[i], rn->data[i]);
  });
  return r;
}

double softplus_value(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, Bin::add, "add");
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, Bin::sub, "sub");
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, Bin::mul, "mul");
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return x * s; },
      [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data())
    require(v > 0, "log: non-positive input " + std::to_string(v));
  return unary(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, sigmoid_value,
               [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary(a, softplus_value,
               [](double x, double) { return sigmoid_value(x); });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, [](double x) { return x * sigmoid_value(x); },
      [](double x, double) {
        const double s = sigmoid_value(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor pow_scalar(const Tensor& a, double p) {
  return unary(
      a, [p](double x) { return p == 0.0 ? 1.0 : std::pow(x, p); },
      [p](double x, double) {
        return p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0);
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor smooth_l1(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        const double ax = std::abs(x);
        return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
      },
      [](double x, double) {
        return std::abs(x) < 1.0 ? x : (x > 0 ? 1.0 : -1.0);
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  require(b.rows() == k, "matmul: shape mismatch " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = &bv[p * m];
      double* orow = &out[i * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += x * brow[j];
    }
  Tensor r = make_result({n, m}, std::move(out), {&a, &b});
  NodePtr an = a.node(), bn = b.node(), rn = r.node();
  record(r, {an, bn}, [an, bn, rn, n, k, m] {
    const auto& g = rn->grad;
    if (wants(an)) {
      auto& ga = an->grad_slot();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j)
            acc += g[i * m + j] * bn->data[p * m + j];
          ga[i * k + p] += acc;
        }
    }
    if (wants(bn)) {
      auto& gb = bn->grad_slot();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = an->data[i * k + p];
          if (x == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += x * g[i * m + j];
        }
    }
  });
  return r;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " +
              shape_str(shape));
  Tensor r = make_result(std::move(shape),
                         std::vector<double>(a.data().begin(), a.data().end()),
                         {&a});
  NodePtr an = a.node(), rn = r.node();
  record(r, {an}, [an, rn] {
    auto& ga = an->grad_slot();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += rn->grad[i];
  });
  return r;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  require(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  for (const auto& p : parts) require_2d(p, "concat");
  const std::size_t other = axis == 0 ? parts[0].cols() : parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    const std::size_t o = axis == 0 ? p.cols() : p.rows();
    require(o == other, "concat: shape mismatch " +
                            shape_str(parts[0].shape()) + " vs " +
                            shape_str(p.shape()));
    total += axis == 0 ? p.rows() : p.cols();
  }
  const std::size_t rows = axis == 0 ? total : other;
  const std::size_t cols = axis == 0 ? other : total;
  std::vector<double> out(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    auto pv = p.data();
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) {
        const std::size_t r = axis == 0 ? i + offset : i;
        const std::size_t c = axis == 0 ? j : j + offset;
        out[r * cols + c] = pv[i * p.cols() + j];
      }
    offset += axis == 0 ? p.rows() : p.cols();
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  Tensor r = Tensor::from({rows, cols}, std::move(out));
  if (!(any && t_active)) return r;
  r.node()->requires_grad = true;
  std::vector<NodePtr> ins;
  for (const auto& p : parts) ins.push_back(p.node());
  NodePtr rn = r.node();
  t_active->record({ins, rn, [ins, rn, axis, cols] {
                      std::size_t offset = 0;
                      for (const auto& in : ins) {
                        const std::size_t pr = in->shape[0], pc = in->shape[1];
                        if (wants(in)) {
                          auto& g = in->grad_slot();
                          for (std::size_t i = 0; i < pr; ++i)
                            for (std::size_t j = 0; j < pc; ++j) {
                              const std::size_t r = axis == 0 ? i + offset : i;
                              const std::size_t c = axis == 0 ? j : j + offset;
                              g[i * pc + j] += rn->grad[r * cols + c];
                            }
                        }
                        offset += axis == 0 ? pr : pc;
                      }
                    }});
  return r;
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
  require_2d(a, "slice");
  require(axis == 0 || axis == 1, "slice: axis must be 0 or 1");
  const std::size_t extent = axis == 0 ? a.rows() : a.cols();
  require(begin <= end && end <= extent,
          "slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
              ") out of bounds for " + shape_str(a.shape()));
  Index idx(end - begin);
  std::iota(idx.begin(), idx.end(), static_cast<std::int64_t>(begin));
  return gather(a, axis, idx);
}

Tensor softmax(const Tensor& a) {
  require_2d(a, "softmax");
  const std::size_t n = a.rows(), c = a.cols();
  auto av = a.data();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = av[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, av[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(av[i * c + j] - mx);
      z += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  Tensor r = make_result(a.shape(), std::move(out), {&a});
  NodePtr an = a.node(), rn = r.node();
  record(r, {an}, [an, rn, n, c] {
    auto& ga = an->grad_slot();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j)
        dot += rn->grad[i * c + j] * rn->data[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        ga[i * c + j] += rn->data[i * c + j] * (rn->grad[i * c + j] - dot);
    }
  });
  return r;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor r = make_result({1}, {s}, {&a});
  NodePtr an = a.node(), rn = r.node();
  record(r, {an}, [an, rn] {
    auto& ga = an->grad_slot();
    for (double& g : ga) g += rn->grad[0];
  });
  return r;
}

Tensor mean(const Tensor& a) {
  require(a.numel() > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor cosine_rows(const Tensor& a, const Tensor& b) {
  require_2d(a, "cosine_rows");
  require(a.shape() == b.shape(), "cosine_rows: shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  const std::size_t n = a.rows(), d = a.cols();
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n, 0.0), na(n), nb(n);
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0, sa = 0, sb = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += av[i * d + j] * bv[i * d + j];
      sa += av[i * d + j] * av[i * d + j];
      sb += bv[i * d + j] * bv[i * d + j];
    }
    na[i] = std::sqrt(sa);
    nb[i] = std::sqrt(sb);
    if (na[i] > 0 && nb[i] > 0) out[i] = dot / (na[i] * nb[i]);
  }
  Tensor r = make_result({n, 1}, std::move(out), {&a, &b});
  NodePtr an = a.node(), bn = b.node(), rn = r.node();
  record(r, {an, bn}, [an, bn, rn, n, d, na, nb] {
    for (std::size_t i = 0; i < n; ++i) {
      if (na[i] == 0 || nb[i] == 0) continue;
      const double g = rn->grad[i], s = rn->data[i];
      const double inv = 1.0 / (na[i] * nb[i]);
      if (wants(an)) {
        auto& ga = an->grad_slot();
        for (std::size_t j = 0; j < d; ++j)
          ga[i * d + j] += g * (bn->data[i * d + j] * inv -
                                s * an->data[i * d + j] / (na[i] * na[i]));
      }
      if (wants(bn)) {
        auto& gb = bn->grad_slot();
        for (std::size_t j = 0; j < d; ++j)
          gb[i * d + j] += g * (an->data[i * d + j] * inv -
                                s * bn->data[i * d + j] / (nb[i] * nb[i]));
      }
    }
  });
  return r;
}

Tensor gather(const Tensor& a, int axis, const Index& idx) {
  require_2d(a, "gather");
  require(axis == 0 || axis == 1, "gather: axis must be 0 or 1");
  const std::size_t rows = a.rows(), cols = a.cols();
  const std::size_t extent = axis == 0 ? rows : cols;
  for (auto i : idx)
    require(i >= 0 && static_cast<std::size_t>(i) < extent,
            "gather: index " + std::to_string(i) + " out of range for " +
                shape_str(a.shape()));
  const std::size_t orows = axis == 0 ? idx.size() : rows;
  const std::size_t ocols = axis == 0 ? cols : idx.size();
  auto av = a.data();
  std::vector<double> out(orows * ocols);
  for (std::size_t i = 0; i < orows; ++i)
    for (std::size_t j = 0; j < ocols; ++j) {
      const std::size_t si = axis == 0 ? static_cast<std::size_t>(idx[i]) : i;
      const std::size_t sj = axis == 0 ? j : static_cast<std::size_t>(idx[j]);
      out[i * ocols + j] = av[si * cols + sj];
    }
  Tensor r = make_result({orows, ocols}, std::move(out), {&a});
  NodePtr an = a.node(), rn = r.node();
  record(r, {an}, [an, rn, idx, axis, orows, ocols, cols] {
    auto& ga = an->grad_slot();
    for (std::size_t i = 0; i < orows; ++i)
      for (std::size_t j = 0; j < ocols; ++j) {
        const std::size_t si = axis == 0 ? static_cast<std::size_t>(idx[i]) : i;
        const std::size_t sj =
            axis == 0 ? j : static_cast<std::size_t>(idx[j]);
        ga[si * cols + sj] += rn->grad[i * ocols + j];
      }
  });
  return r;
}

Tensor scatter_add(const Tensor& a, int axis, const Index& idx,
                   std::size_t extent) {
  require_2d(a, "scatter_add");
  require(axis == 0 || axis == 1, "scatter_add: axis must be 0 or 1");
  const std::size_t rows = a.rows(), cols = a.cols();
  require(idx.size() == (axis == 0 ? rows : cols),
          "scatter_add: index list of length " + std::to_string(idx.size()) +
              " does not match " + shape_str(a.shape()));
  for (auto i : idx)
    require(i >= 0 && static_cast<std::size_t>(i) < extent,
            "scatter_add: index " + std::to_string(i) + " out of range " +
                std::to_string(extent));
  const std::size_t orows = axis == 0 ? extent : rows;
  const std::size_t ocols = axis == 0 ? cols : extent;
  auto av = a.data();
  std::vector<double> out(orows * ocols, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const std::size_t di = axis == 0 ? static_cast<std::size_t>(idx[i]) : i;
      const std::size_t dj = axis == 0 ? j : static_cast<std::size_t>(idx[j]);
      out[di * ocols + dj] += av[i * cols + j];
    }
  Tensor r = make_result({orows, ocols}, std::move(out), {&a});
  NodePtr an = a.node(), rn = r.node();
  record(r, {an}, [an, rn, idx, axis, rows, cols, ocols] {
    auto& ga = an->grad_slot();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        const std::size_t di = axis == 0 ? static_cast<std::size_t>(idx[i]) : i;
        const std::size_t dj =
            axis == 0 ? j : static_cast<std::size_t>(idx[j]);
        ga[i * cols + j] += rn->grad[di * ocols + dj];
      }
  });
  return r;
}

Tensor neighbor_conv(const Tensor& x, const Tensor& w,
                     std::shared_ptr<const TapTable> table) {
  require_2d(x, "neighbor_conv");
  require_2d(w, "neighbor_conv");
  const std::size_t n = x.rows(), c = x.cols(), taps = w.rows();
  require(w.cols() == c, "neighbor_conv: weight shape " +
                             shape_str(w.shape()) + " vs input " +
                             shape_str(x.shape()));
  require(table && table->size() == taps,
          "neighbor_conv: tap table does not match " + std::to_string(taps) +
              " taps");
  for (const auto& col : *table) {
    require(col.size() == n, "neighbor_conv: tap table row count mismatch");
    for (auto j : col)
      require(j >= -1 && j < static_cast<std::int64_t>(n),
              "neighbor_conv: neighbor index out of range");
  }
  auto xv = x.data();
  auto wv = w.data();
  std::vector<double> out(n * c, 0.0);
  for (std::size_t t = 0; t < taps; ++t) {
    const Index& col = (*table)[t];
    for (std::size_t i = 0; i < n; ++i) {
      if (col[i] < 0) continue;
      const double* src = &xv[static_cast<std::size_t>(col[i]) * c];
      for (std::size_t k = 0; k < c; ++k) out[i * c + k] += wv[t * c + k] * src[k];
    }
  }
  Tensor r = make_result({n, c}, std::move(out), {&x, &w});
  NodePtr xn = x.node(), wn = w.node(), rn = r.node();
  record(r, {xn, wn}, [xn, wn, rn, table, n, c, taps] {
    const auto& g = rn->grad;
    for (std::size_t t = 0; t < taps; ++t) {
      const Index& col = (*table)[t];
      for (std::size_t i = 0; i < n; ++i) {
        if (col[i] < 0) continue;
        const std::size_t j = static_cast<std::size_t>(col[i]);
        if (wants(xn)) {
          auto& gx = xn->grad_slot();
          for (std::size_t k = 0; k < c; ++k)
            gx[j * c + k] += wn->data[t * c + k] * g[i * c + k];
        }
        if (wants(wn)) {
          auto& gw = wn->grad_slot();
          for (std::size_t k = 0; k < c; ++k)
            gw[t * c + k] += xn->data[j * c + k] * g[i * c + k];
        }
      }
    }
  });
  return r;
}

TapTable conv1d_table(std::size_t n, std::size_t taps,
                      const std::vector<int>& segments) {
  require(taps % 2 == 1, "conv1d: tap count must be odd, got " +
                             std::to_string(taps));
  require(segments.empty() || segments.size() == n,
          "conv1d: segment list length mismatch");
  const auto half = static_cast<std::int64_t>(taps / 2);
  const auto sn = static_cast<std::int64_t>(n);
  TapTable table(taps, Index(n, -1));
  for (std::size_t t = 0; t < taps; ++t) {
    const std::int64_t off = static_cast<std::int64_t>(t) - half;
    for (std::int64_t i = 0; i < sn; ++i) {
      const std::int64_t j = i + off;
      if (j < 0 || j >= sn) continue;
      if (!segments.empty() && segments[static_cast<std::size_t>(j)] !=
                                   segments[static_cast<std::size_t>(i)])
        continue;
      table[t][static_cast<std::size_t>(i)] = j;
    }
  }
  return table;
}

Tensor conv1d(const Tensor& x, const Tensor& w,
              const std::vector<int>& segments) {
  require_2d(x, "conv1d");
  require_2d(w, "conv1d");
  auto table = std::make_shared<const TapTable>(
      conv1d_table(x.rows(), w.rows(), segments));
  return neighbor_conv(x, w, std::move(table));
}

Tensor linear_recurrence(const Tensor& a, const Tensor& b) {
  require_2d(a, "linear_recurrence");
  require(a.shape() == b.shape(), "linear_recurrence: shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  const std::size_t n = a.rows(), c = a.cols();
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> h(n * c);
  for (std::size_t k = 0; k < c; ++k) h[k] = bv[k];
  for (std::size_t i = 1; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      h[i * c + k] = av[i * c + k] * h[(i - 1) * c + k] + bv[i * c + k];
  Tensor r = make_result({n, c}, std::move(h), {&a, &b});
  NodePtr an = a.node(), bn = b.node(), rn = r.node();
  record(r, {an, bn}, [an, bn, rn, n, c] {
    // carry[k] holds dL/dh_i including the contribution flowing back
    // from h_{i+1} = a_{i+1} h_i + ...
    std::vector<double> carry(c, 0.0);
    for (std::size_t ii = n; ii-- > 0;) {
      for (std::size_t k = 0; k < c; ++k) {
        double g = rn->grad[ii * c + k];
        if (ii + 1 < n) g += an->data[(ii + 1) * c + k] * carry[k];
        carry[k] = g;
      }
      if (wants(bn)) {
        auto& gb = bn->grad_slot();
        for (std::size_t k = 0; k < c; ++k) gb[ii * c + k] += carry[k];
      }
      if (wants(an) && ii > 0) {
        auto& ga = an->grad_slot();
        for (std::size_t k = 0; k < c; ++k)
          ga[ii * c + k] += carry[k] * rn->data[(ii - 1) * c + k];
      }
    }
  });
  return r;
}

}  // namespace fms
