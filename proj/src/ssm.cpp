#include "fms/ssm.hpp"

#include <cmath>

namespace fms {

SsmParams SsmParams::make(ParamStore& store, const std::string& name, Rng& rng,
                          std::size_t d, std::size_t s) {
  SsmParams p;
  p.d = d;
  p.s = s;
  p.delta = Linear::make(store, name + ".delta", rng, d, d);
  // softplus(-1) ~ 0.31: a moderate initial step size.
  for (double& v : p.delta.bias.mutable_data()) v = -1.0;
  p.proj_b = Linear::make(store, name + ".B", rng, d, s, false);
  // C carries a bias so that rows with zero input (inserted tokens) still
  // read out their state.
  p.proj_c = Linear::make(store, name + ".C", rng, d, s, true);
  for (double& v : p.proj_c.bias.mutable_data()) v = 0.5;
  std::vector<double> a(d * s);
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t k = 0; k < s; ++k)
      a[c * s + k] = std::log(static_cast<double>(k + 1));
  p.a_log = store.add(name + ".a_log", Tensor::param({1, d * s}, std::move(a)));
  return p;
}

Tensor expand_channels(const Tensor& x, std::size_t s) {
  const std::size_t d = x.cols();
  Index idx(d * s);
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t k = 0; k < s; ++k) idx[c * s + k] = static_cast<std::int64_t>(c);
  return gather(x, 1, idx);
}

Tensor expand_states(const Tensor& x, std::size_t d) {
  const std::size_t s = x.cols();
  Index idx(d * s);
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t k = 0; k < s; ++k) idx[c * s + k] = static_cast<std::int64_t>(k);
  return gather(x, 1, idx);
}

namespace {

Tensor row_mask(const std::vector<char>& rows, std::size_t width,
                bool invert = false) {
  std::vector<double> v(rows.size() * width);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double m = (rows[i] != 0) != invert ? 1.0 : 0.0;
    for (std::size_t k = 0; k < width; ++k) v[i * width + k] = m;
  }
  return Tensor::from({rows.size(), width}, std::move(v));
}

}  // namespace

SsmSteps discretize(const SsmParams& p, const Tensor& x, const StepMask& mask) {
  if (x.shape().size() != 2 || x.cols() != p.d)
    throw ContractError("discretize: expected N x " + std::to_string(p.d) +
                        " input, got " + shape_str(x.shape()));
  const std::size_t n = x.rows();
  const std::size_t w = p.d * p.s;
  if (!mask.active.empty() && mask.active.size() != n)
    throw ContractError("discretize: active mask length mismatch");
  if (!mask.reset.empty() && mask.reset.size() != n)
    throw ContractError("discretize: reset mask length mismatch");

  SsmSteps st;
  st.d = p.d;
  st.s = p.s;
  Tensor delta = expand_channels(softplus(p.delta(x)), p.s);
  Tensor a = scale(exp(p.a_log), -1.0);
  st.a_bar = exp(mul(delta, repeat_rows(a, n)));
  st.b_bar = mul(delta, expand_states(p.proj_b(x), p.d));
  st.c = p.proj_c(x);
  if (!mask.active.empty()) {
    st.a_bar = add(mul(st.a_bar, row_mask(mask.active, w)),
                   row_mask(mask.active, w, true));
    st.b_bar = mul(st.b_bar, row_mask(mask.active, w));
  }
  if (!mask.reset.empty())
    st.a_bar = mul(st.a_bar, row_mask(mask.reset, w, true));
  return st;
}

SsmSteps make_steps(std::size_t d, std::size_t s, Tensor a_bar, Tensor b_bar,
                    Tensor c) {
  const std::size_t n = c.rows();
  if (a_bar.shape() != Shape{n, d * s} || b_bar.shape() != Shape{n, d * s} ||
      c.shape() != Shape{n, s})
    throw ContractError("make_steps: shapes " + shape_str(a_bar.shape()) + ", " +
                        shape_str(b_bar.shape()) + ", " + shape_str(c.shape()) +
                        " do not fit d=" + std::to_string(d) +
                        " s=" + std::to_string(s));
  return {d, s, std::move(a_bar), std::move(b_bar), std::move(c)};
}

Tensor scan_states(const Tensor& x, const SsmSteps& steps) {
  if (x.shape() != Shape{steps.length(), steps.d})
    throw ContractError("scan: input " + shape_str(x.shape()) + " vs steps for " +
                        std::to_string(steps.length()) + " x " +
                        std::to_string(steps.d));
  return linear_recurrence(steps.a_bar,
                           mul(steps.b_bar, expand_channels(x, steps.s)));
}

Tensor observe(const Tensor& h, const SsmSteps& steps) {
  const std::size_t d = steps.d;
  const std::size_t s = steps.s;
  std::vector<double> g(d * s * d, 0.0);
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t k = 0; k < s; ++k) g[(c * s + k) * d + c] = 1.0;
  return matmul(mul(h, expand_states(steps.c, d)),
                Tensor::from({d * s, d}, std::move(g)));
}

Tensor scan(const Tensor& x, const SsmSteps& steps) {
  return observe(scan_states(x, steps), steps);
}

std::vector<double> association_matrix(const SsmSteps& steps,
                                       std::size_t channel) {
  const std::size_t n = steps.length();
  const std::size_t s = steps.s;
  const std::size_t w = steps.d * s;
  if (channel >= steps.d)
    throw ContractError("association_matrix: channel out of range");
  auto a = steps.a_bar.data();
  auto b = steps.b_bar.data();
  auto c = steps.c.data();
  std::vector<double> m(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < s; ++k) {
      const std::size_t col = channel * s + k;
      double prod = 1.0;  // prod_{t=j+1..i} a_t
      for (std::size_t i = j; i < n; ++i) {
        if (i > j) prod *= a[i * w + col];
        m[i * n + j] += c[i * s + k] * prod * b[j * w + col];
      }
    }
  return m;
}

}  // namespace fms
