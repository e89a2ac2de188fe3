#include "fms/voxel.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace fms {

Vec3 Grid::center_of(const Cell& c) const {
  Vec3 p{};
  for (int a = 0; a < 3; ++a)
    p[a] = origin[a] + (static_cast<double>(c[a]) + 0.5) * cell_size[a];
  return p;
}

bool Grid::contains(const Cell& c) const {
  for (int a = 0; a < 3; ++a)
    if (c[a] < 0 || c[a] >= resolution[a]) return false;
  return true;
}

std::size_t Grid::cell_count() const {
  return static_cast<std::size_t>(resolution[0] * resolution[1] * resolution[2]);
}

namespace {

std::string cell_str(const Cell& c) {
  return "(" + std::to_string(c[0]) + "," + std::to_string(c[1]) + "," +
         std::to_string(c[2]) + ")";
}

}  // namespace

void VoxelSet::validate() const {
  if (feats.defined() && feats.rows() != coords.size())
    throw ContractError("voxel set: " + std::to_string(coords.size()) +
                        " coords but feats " + shape_str(feats.shape()));
  std::vector<Cell> sorted = coords;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (!grid.contains(sorted[i]))
      throw ContractError("voxel set: cell " + cell_str(sorted[i]) +
                          " outside grid");
    if (i > 0 && sorted[i] == sorted[i - 1])
      throw ContractError("voxel set: duplicate cell " + cell_str(sorted[i]));
  }
}

VoxelSet voxelize(const std::vector<Point>& points, const Grid& grid) {
  for (int a = 0; a < 3; ++a)
    if (grid.resolution[a] <= 0 || !(grid.cell_size[a] > 0.0))
      throw ContractError("voxelize: grid extents must be positive");

  std::size_t dim = 0;
  if (!points.empty()) dim = points.front().feat.size();

  std::map<Cell, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    if (p.feat.size() != dim)
      throw ContractError("voxelize: point " + std::to_string(i) + " has " +
                          std::to_string(p.feat.size()) + " features, expected " +
                          std::to_string(dim));
    Cell c{};
    for (int a = 0; a < 3; ++a)
      c[a] = static_cast<std::int64_t>(
          std::floor((p.xyz[a] - grid.origin[a]) / grid.cell_size[a]));
    if (grid.contains(c)) cells[c].push_back(i);
  }

  std::size_t max_count = 0;
  for (const auto& [_, members] : cells)
    max_count = std::max(max_count, members.size());

  VoxelSet out;
  out.grid = grid;
  std::vector<double> data;
  data.reserve(cells.size() * (dim + 1));
  for (auto& [cell, members] : cells) {
    // Sum in a canonical order so the result does not depend on input order.
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      const auto& pa = points[a];
      const auto& pb = points[b];
      if (pa.xyz != pb.xyz) return pa.xyz < pb.xyz;
      return pa.feat < pb.feat;
    });
    out.coords.push_back(cell);
    for (std::size_t k = 0; k < dim; ++k) {
      double s = 0.0;
      for (auto m : members) s += points[m].feat[k];
      data.push_back(s / static_cast<double>(members.size()));
    }
    data.push_back(static_cast<double>(members.size()) /
                   static_cast<double>(max_count));
  }
  out.feats = Tensor::from({cells.size(), dim + 1}, std::move(data));
  return out;
}

bool inside_enlarged(const Box3D& box, const Vec3& p, const Enlarge& e) {
  const double dx = p[0] - box.center[0];
  const double dy = p[1] - box.center[1];
  const double dz = p[2] - box.center[2];
  if (std::abs(dz) > box.size[2] / 2 + e.z) return false;
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  const double lx = dx * c + dy * s;
  const double ly = -dx * s + dy * c;
  const double hx = box.size[0] / 2;
  const double hy = box.size[1] / 2;
  if (e.frame == EnlargeFrame::box)
    return std::abs(lx) <= hx + e.xy && std::abs(ly) <= hy + e.xy;
  // World-axis margin: Minkowski sum of the rotated rectangle with an
  // axis-aligned square. Both are centrally symmetric, so the sum is the
  // intersection of slabs along the four edge normals.
  const double ac = std::abs(c);
  const double as = std::abs(s);
  if (std::abs(lx) > hx + e.xy * (ac + as)) return false;
  if (std::abs(ly) > hy + e.xy * (ac + as)) return false;
  if (std::abs(dx) > hx * ac + hy * as + e.xy) return false;
  if (std::abs(dy) > hx * as + hy * ac + e.xy) return false;
  return true;
}

std::vector<int> foreground_labels(const VoxelSet& vox,
                                   const std::vector<Box3D>& boxes,
                                   const Enlarge& e) {
  std::vector<int> labels(vox.size(), 0);
  for (std::size_t i = 0; i < vox.size(); ++i) {
    const Vec3 p = vox.grid.center_of(vox.coords[i]);
    for (const auto& b : boxes)
      if (inside_enlarged(b, p, e)) {
        labels[i] = 1;
        break;
      }
  }
  return labels;
}

std::vector<int> semantic_labels(const VoxelSet& vox,
                                 const std::vector<Box3D>& boxes,
                                 const Enlarge& e) {
  for (const auto& b : boxes)
    if (b.class_id < 1)
      throw ContractError("semantic_labels: box class ids must be >= 1, got " +
                          std::to_string(b.class_id));
  std::vector<int> labels(vox.size(), 0);
  for (std::size_t i = 0; i < vox.size(); ++i) {
    const Vec3 p = vox.grid.center_of(vox.coords[i]);
    double best = 0.0;
    for (const auto& b : boxes) {
      if (!inside_enlarged(b, p, e)) continue;
      if (labels[i] == 0 || b.volume() < best) {
        labels[i] = b.class_id;
        best = b.volume();
      }
    }
  }
  return labels;
}

namespace {

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

}  // namespace

DownsampleMap downsample_map(const std::vector<Cell>& coords, const Grid& grid,
                             int stride) {
  if (stride < 1)
    throw ContractError("downsample: stride must be positive, got " +
                        std::to_string(stride));
  DownsampleMap m;
  m.grid = grid;
  for (int a = 0; a < 3; ++a) {
    // Extents are padded up to a multiple of the stride before halving.
    m.grid.resolution[a] = (grid.resolution[a] + stride - 1) / stride;
    m.grid.cell_size[a] = grid.cell_size[a] * stride;
  }
  std::map<Cell, std::int64_t> slot;
  std::vector<Cell> parents(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    for (int a = 0; a < 3; ++a) parents[i][a] = floor_div(coords[i][a], stride);
    slot.emplace(parents[i], 0);
  }
  std::int64_t k = 0;
  for (auto& [cell, id] : slot) {
    id = k++;
    m.coords.push_back(cell);
  }
  m.parent.resize(coords.size());
  std::vector<double> count(m.coords.size(), 0.0);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    m.parent[i] = slot[parents[i]];
    count[static_cast<std::size_t>(m.parent[i])] += 1.0;
  }
  m.inv_count.resize(count.size());
  for (std::size_t j = 0; j < count.size(); ++j) m.inv_count[j] = 1.0 / count[j];
  return m;
}

Tensor pool_mean(const Tensor& feats, const DownsampleMap& map) {
  const std::size_t n = map.coords.size();
  const std::size_t d = feats.cols();
  Tensor summed = scatter_add(feats, 0, map.parent, n);
  std::vector<double> w(n * d);
  for (std::size_t j = 0; j < n; ++j)
    std::fill_n(w.begin() + static_cast<std::ptrdiff_t>(j * d), d,
                map.inv_count[j]);
  return mul(summed, Tensor::from({n, d}, std::move(w)));
}

VoxelSet downsample(const VoxelSet& vox, int stride, const Linear* proj) {
  auto map = downsample_map(vox.coords, vox.grid, stride);
  VoxelSet out;
  out.grid = map.grid;
  out.feats = pool_mean(vox.feats, map);
  if (proj != nullptr) out.feats = (*proj)(out.feats);
  out.coords = std::move(map.coords);
  return out;
}

namespace {

std::vector<double> parse_row(const std::string& line, std::size_t lineno) {
  std::vector<double> v;
  std::stringstream ss(line);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      while (used < tok.size() && std::isspace(static_cast<unsigned char>(tok[used])))
        ++used;
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw std::runtime_error("csv line " + std::to_string(lineno) +
                               ": bad number '" + tok + "'");
    }
  }
  return v;
}

bool skip_line(const std::string& line) {
  auto pos = line.find_first_not_of(" \t\r");
  if (pos == std::string::npos || line[pos] == '#') return true;
  // A header row starts with a letter.
  return std::isalpha(static_cast<unsigned char>(line[pos])) != 0;
}

}  // namespace

std::vector<Point> read_points_csv(std::istream& is) {
  std::vector<Point> pts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (skip_line(line)) continue;
    auto v = parse_row(line, lineno);
    if (v.size() < 3)
      throw std::runtime_error("points csv line " + std::to_string(lineno) +
                               ": expected x,y,z[,features]");
    Point p;
    p.xyz = {v[0], v[1], v[2]};
    p.feat.assign(v.begin() + 3, v.end());
    pts.push_back(std::move(p));
  }
  return pts;
}

std::vector<Box3D> read_boxes_csv(std::istream& is) {
  std::vector<Box3D> boxes;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (skip_line(line)) continue;
    auto v = parse_row(line, lineno);
    if (v.size() != 8)
      throw std::runtime_error("boxes csv line " + std::to_string(lineno) +
                               ": expected cx,cy,cz,dx,dy,dz,yaw,class");
    Box3D b;
    b.center = {v[0], v[1], v[2]};
    b.size = {v[3], v[4], v[5]};
    b.yaw = v[6];
    b.class_id = static_cast<int>(v[7]);
    if (!(b.size[0] > 0 && b.size[1] > 0 && b.size[2] > 0))
      throw std::runtime_error("boxes csv line " + std::to_string(lineno) +
                               ": sizes must be positive");
    boxes.push_back(b);
  }
  return boxes;
}

void write_points_csv(std::ostream& os, const std::vector<Point>& points) {
  os.precision(17);
  for (const auto& p : points) {
    os << p.xyz[0] << ',' << p.xyz[1] << ',' << p.xyz[2];
    for (double f : p.feat) os << ',' << f;
    os << '\n';
  }
}

void write_boxes_csv(std::ostream& os, const std::vector<Box3D>& boxes) {
  os.precision(17);
  for (const auto& b : boxes)
    os << b.center[0] << ',' << b.center[1] << ',' << b.center[2] << ','
       << b.size[0] << ',' << b.size[1] << ',' << b.size[2] << ',' << b.yaw
       << ',' << b.class_id << '\n';
}

}  // namespace fms
