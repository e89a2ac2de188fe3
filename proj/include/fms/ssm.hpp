#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fms/nn.hpp"
#include "fms/tensor.hpp"

namespace fms {

/// Selective state-space parameters for D channels with S states each.
/// delta = softplus(x W_d + b_d) is per channel, B = x W_B and
/// C = x W_C + b_C are shared across channels, A = -exp(a_log) is diagonal
/// per channel.
struct SsmParams {
  std::size_t d = 0;
  std::size_t s = 0;
  Linear delta;   // D -> D
  Linear proj_b;  // D -> S, no bias
  Linear proj_c;  // D -> S
  Tensor a_log;   // 1 x (D*S), column c*S + s

  static SsmParams make(ParamStore& store, const std::string& name, Rng& rng,
                        std::size_t d, std::size_t s);
};

/// Discretized per-position parameters. a_bar and b_bar are N x (D*S) with
/// column c*S + s; c is N x S.
struct SsmSteps {
  std::size_t d = 0;
  std::size_t s = 0;
  Tensor a_bar;
  Tensor b_bar;
  Tensor c;

  std::size_t length() const { return c.rows(); }
};

struct StepMask {
  /// 0 marks a padding row: identity step (a_bar = 1, b_bar = 0).
  std::vector<char> active;
  /// Rows that start a new independent sequence (state reset to zero).
  std::vector<char> reset;
};

SsmSteps discretize(const SsmParams& p, const Tensor& x,
                    const StepMask& mask = {});

/// Builds steps directly from given values (tests, diagnostics).
SsmSteps make_steps(std::size_t d, std::size_t s, Tensor a_bar, Tensor b_bar,
                    Tensor c);

/// N x (D*S) states h_i = a_bar_i * h_{i-1} + b_bar_i * x_i, h_0 = 0.
Tensor scan_states(const Tensor& x, const SsmSteps& steps);
/// y_i[c] = sum_s C_i[s] h_i[c, s] -> N x D.
Tensor observe(const Tensor& h, const SsmSteps& steps);
/// observe(scan_states(x)).
Tensor scan(const Tensor& x, const SsmSteps& steps);

/// Expands an N x D per-channel tensor to N x (D*S).
Tensor expand_channels(const Tensor& x, std::size_t s);
/// Expands an N x S per-state tensor to N x (D*S).
Tensor expand_states(const Tensor& x, std::size_t d);

/// N x N map with y[:, channel] = M x[:, channel]:
/// M[i][j] = sum_s C_i[s] prod_{t=j+1..i} a_bar_t[s] b_bar_j[s] for j <= i.
std::vector<double> association_matrix(const SsmSteps& steps,
                                       std::size_t channel);

}  // namespace fms
