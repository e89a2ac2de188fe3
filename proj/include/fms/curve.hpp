#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fms/tensor.hpp"
#include "fms/voxel.hpp"

namespace fms {

enum class Scheme : std::uint8_t { hilbert = 0, zorder = 1, raster_x = 2, raster_y = 3 };

std::string scheme_name(Scheme s);
/// Accepts "hilbert", "zorder", "raster-x", "raster-y" (or with underscores).
Scheme parse_scheme(const std::string& name);

/// Bijection from the cells of a (2^order)^3 cube to ranks [0, 8^order).
struct CurveTemplate {
  Scheme scheme = Scheme::hilbert;
  int order = 1;
  std::vector<std::uint32_t> ranks;  // indexed by x + n*y + n*n*z

  std::int64_t side() const { return std::int64_t{1} << order; }
  bool contains(const Cell& c) const;
  std::uint32_t rank_of(const Cell& c) const;
  /// Inverse table: cell at each rank.
  std::vector<Cell> cells_by_rank() const;
};

constexpr int kMinOrder = 1;
constexpr int kMaxOrder = 6;

CurveTemplate build_template(Scheme scheme, int order);

/// Direct per-cell rank, no table.
std::uint32_t curve_rank(Scheme scheme, int order, const Cell& c);

/// Binary: "FMCT", scheme u8, order u8, then 8^order little-endian u32 ranks.
void save_template(std::ostream& os, const CurveTemplate& t);
CurveTemplate load_template(std::istream& is);
/// One `x,y,z,rank` line per cell after a header line.
void write_template_csv(std::ostream& os, const CurveTemplate& t);

/// (floor(x cos + y sin), floor(y cos - x sin), z). Values within 1e-9 of an
/// integer snap to it first so that exact quarter turns stay exact.
Cell rotate_coords(const Cell& p, double theta);

/// Translation that makes every rotated cell of a grid non-negative, and the
/// smallest order whose cube holds both the rotated and the unrotated grid.
struct RotationFrame {
  double theta = 0.0;
  Cell shift{0, 0, 0};
  int order = 1;
};

RotationFrame rotation_frame(const Cell& extent, double theta);

struct Flattened {
  Tensor seq;  // N x D, rows of the input reordered
  Index perm;  // seq row k is input row perm[k]
};

/// Sequence order of `coords` under `tmpl` after rotating by `frame`.
/// Ties on the same rotated cell fall back to the unrotated rank, then to the
/// input index.
Index serialize_order(const std::vector<Cell>& coords, const CurveTemplate& tmpl,
                      const RotationFrame& frame);

Flattened flatten(const Tensor& feats, const std::vector<Cell>& coords,
                  const CurveTemplate& tmpl, const RotationFrame& frame);

/// Inverse of a permutation.
Index invert_perm(const Index& perm);

struct GapStats {
  std::size_t pairs = 0;
  double mean_gap0 = 0.0;   // sequence distance at theta = 0
  double max_gap0 = 0.0;
  double mean_min_gap = 0.0;  // min over all angles
  double max_min_gap = 0.0;
  std::vector<std::int64_t> gap0;  // per adjacent pair
  std::vector<std::int64_t> min_gap;
};

/// Sequence distance between face-adjacent voxels, at theta = 0 and
/// minimized over `angles`. `extent` is the grid the coords live in.
GapStats truncation_gap(const std::vector<Cell>& coords, Scheme scheme,
                        const std::vector<double>& angles, const Cell& extent);

}  // namespace fms
