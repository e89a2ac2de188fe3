#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "fms/nn.hpp"
#include "fms/ssm.hpp"
#include "fms/tensor.hpp"
#include "fms/voxel.hpp"

namespace fms {

/// Row structure of a sequence fed to a block. All fields are optional.
struct SeqLayout {
  std::vector<int> segment;    // independent sub-sequence id per row
  std::vector<char> active;    // 0 marks a padding row
  std::vector<Cell> coords;    // grid cell per row (ignored where unanchored)
  std::vector<char> anchored;  // rows that own a cell in `coords`
  std::vector<int> classes;    // overrides predicted categories when set

  bool is_active(std::size_t i) const { return active.empty() || active[i] != 0; }
  int segment_of(std::size_t i) const { return segment.empty() ? 0 : segment[i]; }
  bool has_cell(std::size_t i) const;
  void check(std::size_t n) const;
};

/// Active rows and sub-sequence starts as SSM step masks.
StepMask step_mask(const SeqLayout& layout, std::size_t n);

/// argmax per row, ties to the lowest class id.
std::vector<int> predict_semantics(const Tensor& logits);

struct Rearranged {
  Tensor sorted;
  Index perm;  // sorted row k is input row perm[k]
};

/// Stable order by (segment, class, index). Padding rows are left out.
Index semantic_order(const std::vector<int>& classes, const SeqLayout& layout = {});
Rearranged semantic_rearrange(const Tensor& h, const std::vector<int>& classes,
                              const SeqLayout& layout = {});
/// Writes sorted rows back to their positions; rows not in perm become 0.
Tensor reverse_rearrange(const Tensor& sorted, const Index& perm, std::size_t n);

/// Tap weights for a window of `taps` (odd) positions, all 1 / taps.
Tensor saf_uniform_weights(int taps, std::size_t width);

/// Rearrange by category, depthwise "same" 1-D convolution with w
/// ((2K+1) x width), then restore the order. With `per_group` the taps stop
/// at category boundaries; they never cross segment boundaries.
Tensor saf(const Tensor& h, const std::vector<int>& classes, const Tensor& w,
           const SeqLayout& layout = {}, bool per_group = false);

/// Original-row index of the k-th window neighbor of each row (-1 if none).
TapTable saf_neighbors(const std::vector<int>& classes, int taps,
                       const SeqLayout& layout = {}, bool per_group = false);

/// N x N map with C * saf(scan_states(x)) = M' x for one channel:
/// M'[i][j] = sum_s C_i[s] sum_k w_k[s] [j <= n_k] prod_{t=j+1..n_k} a_t[s] b_j[s]
/// where n_k is the k-th window neighbor of i.
std::vector<double> saf_association(const SsmSteps& steps,
                                    const std::vector<int>& classes,
                                    const Tensor& w, std::size_t channel,
                                    const SeqLayout& layout = {},
                                    bool per_group = false);

/// Cosine similarity of |M| with the label exp(-d^2 / 2 sigma^2) restricted
/// to same-class pairs, d the Euclidean cell distance.
double association_similarity(const std::vector<double>& m,
                              const std::vector<Cell>& coords,
                              const std::vector<int>& classes, double sigma = 3.0);

/// Per-axis neighbor tables over occupied cells for a kernel of length
/// `kernel` (odd). Rows without a cell only see themselves.
struct SsfTables {
  std::array<std::shared_ptr<const TapTable>, 3> axis;
  int kernel = 9;
};

SsfTables ssf_tables(const SeqLayout& layout, std::size_t n, int kernel = 9);

/// Kernel x width weights with a 1 at the center tap.
Tensor ssf_identity_weights(int kernel, std::size_t width);

/// Depthwise convolution along X, then Y, then Z over the occupied cells.
Tensor ssf(const Tensor& h, const std::array<Tensor, 3>& w, const SsfTables& tables);

struct BlockConfig {
  std::size_t d = 32;
  std::size_t s = 4;
  std::size_t classes = 4;      // including background
  std::size_t head_hidden = 32;
  int saf_taps = 7;
  bool saf_per_group = false;
  int ssf_kernel = 9;
  bool use_saf = true;
  bool use_ssf = true;
  bool use_gate = true;
};

/// x -> SSM states -> SAF -> SSF -> C observation, times sigmoid(gate(x)).
struct SasfBlock {
  BlockConfig cfg;
  SsmParams ssm;
  Mlp head;
  Tensor saf_w;                 // taps x (D*S)
  std::array<Tensor, 3> ssf_w;  // kernel x (D*S) per axis
  Linear gate;

  static SasfBlock make(ParamStore& store, const std::string& name, Rng& rng,
                        const BlockConfig& cfg);
  Tensor semantic_logits(const Tensor& x) const;
  Tensor operator()(const Tensor& x, const SeqLayout& layout = {}) const;
};

}  // namespace fms
