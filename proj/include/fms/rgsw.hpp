#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "fms/fusion.hpp"
#include "fms/tensor.hpp"
#include "fms/voxel.hpp"

namespace fms {

/// Encoder applied to a batch of windows laid out back to back.
using SeqEncoder = std::function<Tensor(const Tensor&, const SeqLayout&)>;

struct PatchLayout {
  std::size_t n = 0;       // real rows
  std::size_t m = 1;       // patch count
  std::size_t len = 0;     // rows per patch after padding
  std::size_t padded = 0;  // m * len

  /// Pads to a multiple of m, or of 2m when sliding will follow, so that the
  /// half-patch split is exact.
  static PatchLayout make(std::size_t n, std::size_t m, bool even_len);
};

/// Windows of `len` consecutive padded positions, each followed by a token
/// row, flattened into one sequence.
struct WindowSeq {
  Tensor rows;
  SeqLayout layout;              // segment per window, padding inactive
  std::vector<std::int64_t> pos; // padded position per row, -1 for tokens
  std::vector<std::size_t> starts;
  std::size_t len = 0;
};

/// Windows starting at `starts` over x padded with zero rows to `padded`.
/// `coords` (optional) gives each real row a cell for spatial fusion.
WindowSeq make_windows(const Tensor& x, const std::vector<std::size_t>& starts,
                       std::size_t len, std::size_t padded, const Tensor& token,
                       const std::vector<Cell>& coords = {});

/// Contiguous split into m patches with the token appended to each.
WindowSeq split_and_insert(const Tensor& x, std::size_t m, const Tensor& token,
                           const std::vector<Cell>& coords = {});

/// Adds cos(row, token') * token' to every real row of each window, where
/// token' is that window's encoded token row, then drops token and padding
/// rows. Returns one row per real row of `win`, in window order.
Tensor propagate_token(const Tensor& encoded, const WindowSeq& win,
                       std::vector<std::int64_t>* positions = nullptr);

/// Half-patch shifted windows: concat(p_i[len/2:], p_{i+1}[:len/2]) for
/// i = 0..m-2 over an (m * len) x D patch tensor.
Tensor slide(const Tensor& patches, std::size_t m);
std::vector<std::size_t> slide_starts(std::size_t m, std::size_t len);

struct RgswConfig {
  std::size_t m = 4;
  int t = 2;
  bool propagate_every = true;  // token propagation after every iteration
};

/// Iteration 1 encodes the m regular patches. Iteration k >= 2 encodes the
/// half-shifted windows when k is even and the regular ones when k is odd.
/// Rows not covered by an iteration's windows pass through unchanged.
Tensor rgsw_encode(const Tensor& x, const SeqEncoder& enc, const Tensor& token,
                   const RgswConfig& cfg, const std::vector<Cell>& coords = {});

}  // namespace fms
