#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fms/nn.hpp"
#include "fms/tensor.hpp"

namespace fms {

using Cell = std::array<std::int64_t, 3>;
using Vec3 = std::array<double, 3>;

struct Grid {
  Cell resolution{64, 64, 16};    // cells along x, y, z
  Vec3 cell_size{0.25, 0.25, 0.25};
  Vec3 origin{0.0, 0.0, 0.0};     // world position of the corner of cell (0,0,0)

  Vec3 center_of(const Cell& c) const;
  bool contains(const Cell& c) const;
  std::size_t cell_count() const;
};

struct Point {
  Vec3 xyz{};
  std::vector<double> feat;
};

struct VoxelSet {
  std::vector<Cell> coords;
  Tensor feats;  // N x D
  Grid grid;

  std::size_t size() const { return coords.size(); }
  std::size_t dim() const { return feats.defined() ? feats.cols() : 0; }
  /// Throws ContractError on duplicate or out-of-range cells or a row count
  /// mismatch.
  void validate() const;
};

struct Box3D {
  Vec3 center{};
  Vec3 size{1.0, 1.0, 1.0};
  double yaw = 0.0;
  int class_id = 1;

  double volume() const { return size[0] * size[1] * size[2]; }
};

enum class EnlargeFrame { box, world };

struct Enlarge {
  double xy = 0.5;  // meters added on each side
  double z = 0.25;
  EnlargeFrame frame = EnlargeFrame::box;
};

/// One voxel per occupied cell, ordered by (x, y, z). Features are the mean
/// of the contained point features followed by the point count divided by
/// the largest count in the scene.
VoxelSet voxelize(const std::vector<Point>& points, const Grid& grid);

bool inside_enlarged(const Box3D& box, const Vec3& p, const Enlarge& e = {});

std::vector<int> foreground_labels(const VoxelSet& vox,
                                   const std::vector<Box3D>& boxes,
                                   const Enlarge& e = {});

/// Class of the smallest enclosing enlarged box, 0 when none.
std::vector<int> semantic_labels(const VoxelSet& vox,
                                 const std::vector<Box3D>& boxes,
                                 const Enlarge& e = {});

struct DownsampleMap {
  std::vector<Cell> coords;      // output cells, ordered by (x, y, z)
  Index parent;                  // input row -> output row
  std::vector<double> inv_count; // 1 / contributors per output row
  Grid grid;
};

DownsampleMap downsample_map(const std::vector<Cell>& coords, const Grid& grid,
                             int stride);

/// Strided merge: floor-divided cells, mean of contributing features, then
/// `proj` when it is given.
VoxelSet downsample(const VoxelSet& vox, int stride,
                    const Linear* proj = nullptr);

/// Mean of the rows of `feats` grouped by `map.parent`.
Tensor pool_mean(const Tensor& feats, const DownsampleMap& map);

std::vector<Point> read_points_csv(std::istream& is);
std::vector<Box3D> read_boxes_csv(std::istream& is);
void write_points_csv(std::ostream& os, const std::vector<Point>& points);
void write_boxes_csv(std::ostream& os, const std::vector<Box3D>& boxes);

}  // namespace fms
