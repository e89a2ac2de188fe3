#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "fms/voxel.hpp"

using namespace fms;

namespace {

Grid small_grid(std::int64_t l, std::int64_t h, std::int64_t w, double cs) {
  Grid g;
  g.resolution = {l, h, w};
  g.cell_size = {cs, cs, cs};
  return g;
}

}  // namespace

TEST_CASE("voxelize averages features and normalizes counts") {
  std::vector<Point> pts{{{0.1, 0.1, 0.1}, {1.0}}, {{0.2, 0.3, 0.4}, {3.0}}};
  auto v = voxelize(pts, small_grid(4, 4, 4, 0.5));
  REQUIRE(v.size() == 1);
  CHECK(v.feats.at(0, 0) == 2.0);
  CHECK(v.feats.at(0, 1) == 1.0);
}

TEST_CASE("voxelize maps the origin to cell zero and drops outside points") {
  std::vector<Point> pts{{{0, 0, 0}, {}}, {{-0.1, 0, 0}, {}}, {{5, 0, 0}, {}}};
  auto v = voxelize(pts, small_grid(4, 4, 4, 0.5));
  REQUIRE(v.size() == 1);
  CHECK(v.coords[0] == Cell{0, 0, 0});
  CHECK(v.dim() == 1);
}

TEST_CASE("voxelize obeys pigeonhole bounds") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> ux(0, 10), uz(0, 4);
  std::vector<Point> pts;
  for (int i = 0; i < 1000; ++i) pts.push_back({{ux(rng), ux(rng), uz(rng)}, {1.0}});
  auto v = voxelize(pts, small_grid(10, 10, 4, 1.0));
  CHECK(v.size() <= 400);
  CHECK(v.size() <= 1000);
  v.validate();
}

TEST_CASE("voxelize is invariant to point order") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0, 4);
  std::vector<Point> pts;
  for (int i = 0; i < 300; ++i) pts.push_back({{u(rng), u(rng), u(rng)}, {u(rng), u(rng)}});
  auto a = voxelize(pts, small_grid(4, 4, 4, 1.0));
  std::shuffle(pts.begin(), pts.end(), rng);
  auto b = voxelize(pts, small_grid(4, 4, 4, 1.0));
  CHECK(a.coords == b.coords);
  CHECK(std::equal(a.feats.data().begin(), a.feats.data().end(),
                   b.feats.data().begin()));
}

TEST_CASE("voxelize empty input") {
  auto v = voxelize({}, small_grid(4, 4, 4, 1.0));
  CHECK(v.size() == 0);
}

TEST_CASE("enlarged membership margins") {
  Box3D box{{5, 5, 1}, {2, 2, 1}, 0.0, 1};
  CHECK(inside_enlarged(box, {5, 5, 1}));
  CHECK(inside_enlarged(box, {6.4, 5, 1}));   // 0.4 m past the +x face
  CHECK_FALSE(inside_enlarged(box, {6.6, 5, 1}));
  CHECK(inside_enlarged(box, {5, 5, 1.7}));   // 0.2 m past the top
  CHECK_FALSE(inside_enlarged(box, {5, 5, 1.8}));
}

TEST_CASE("foreground labels on voxel centers") {
  Grid g = small_grid(40, 40, 8, 0.25);
  VoxelSet vox;
  vox.grid = g;
  // Box centered at cell center of (20,20,4) with dx = 2.
  Box3D box{g.center_of({20, 20, 4}), {2, 2, 1}, 0.0, 2};
  // +x face at center x + 1. Cell 26 center is 1.5 m away (0.5 past the
  // face, on the margin); 25 is 0.25 past; 27 is 0.75 past.
  vox.coords = {{20, 20, 4}, {25, 20, 4}, {27, 20, 4}};
  vox.feats = Tensor::zeros({3, 1});
  auto fg = foreground_labels(vox, {box});
  CHECK(fg == std::vector<int>{1, 1, 0});
  auto sem = semantic_labels(vox, {box});
  CHECK(sem == std::vector<int>{2, 2, 0});
}

TEST_CASE("semantic labels prefer the smallest enclosing box") {
  Grid g = small_grid(40, 40, 8, 0.25);
  VoxelSet vox;
  vox.grid = g;
  vox.coords = {{20, 20, 4}};
  vox.feats = Tensor::zeros({1, 1});
  const auto c = g.center_of({20, 20, 4});
  Box3D small{c, {1, 1, 1}, 0.0, 1};
  Box3D large{c, {4, 4, 2}, 0.3, 3};
  CHECK(semantic_labels(vox, {large, small}) == std::vector<int>{1});
  CHECK(semantic_labels(vox, {small, large}) == std::vector<int>{1});
  CHECK_THROWS_AS(semantic_labels(vox, {Box3D{c, {1, 1, 1}, 0.0, 0}}),
                  ContractError);
}

TEST_CASE("foreground labels match analytic membership at yaw 0") {
  // Independent oracle: for an axis-aligned box the enlarged region is the
  // interval product [c - h - m, c + h + m].
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(2, 8), s(0.5, 3);
  Grid g = small_grid(40, 40, 16, 0.25);
  VoxelSet vox;
  vox.grid = g;
  for (std::int64_t x = 0; x < 40; ++x)
    for (std::int64_t y = 0; y < 40; ++y) vox.coords.push_back({x, y, 6});
  vox.feats = Tensor::zeros({vox.coords.size(), 1});
  for (int trial = 0; trial < 20; ++trial) {
    Box3D b{{u(rng), u(rng), 1.6}, {s(rng), s(rng), 1.0}, 0.0, 1};
    auto fg = foreground_labels(vox, {b});
    for (std::size_t i = 0; i < vox.size(); ++i) {
      auto p = g.center_of(vox.coords[i]);
      bool in = std::abs(p[0] - b.center[0]) <= b.size[0] / 2 + 0.5 &&
                std::abs(p[1] - b.center[1]) <= b.size[1] / 2 + 0.5 &&
                std::abs(p[2] - b.center[2]) <= b.size[2] / 2 + 0.25;
      CHECK(fg[i] == int(in));
    }
  }
}

TEST_CASE("foreground labels are yaw-equivariant up to the discretization band") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> ang(0, 2 * std::numbers::pi);
  Grid g = small_grid(48, 48, 8, 0.25);
  g.origin = {-6, -6, 0};
  const double diag = 0.25 * std::sqrt(3.0);
  Box3D box{{0.3, -0.2, 1.0}, {3.0, 1.5, 1.2}, 0.4, 1};
  for (int trial = 0; trial < 10; ++trial) {
    const double phi = ang(rng);
    const double c = std::cos(phi), s = std::sin(phi);
    // Dense sample of points, one per cell center of the unrotated grid.
    std::vector<Point> pts;
    for (std::int64_t x = 0; x < 48; ++x)
      for (std::int64_t y = 0; y < 48; ++y)
        for (std::int64_t z = 2; z < 7; ++z) pts.push_back({g.center_of({x, y, z}), {}});
    auto v0 = voxelize(pts, g);
    auto l0 = foreground_labels(v0, {box});
    std::vector<Point> rp = pts;
    for (auto& p : rp) {
      const double x = p.xyz[0], y = p.xyz[1];
      p.xyz[0] = c * x - s * y;
      p.xyz[1] = s * x + c * y;
    }
    Box3D rb = box;
    rb.center = {c * box.center[0] - s * box.center[1],
                 s * box.center[0] + c * box.center[1], box.center[2]};
    rb.yaw = box.yaw + phi;
    auto v1 = voxelize(rp, g);
    auto l1 = foreground_labels(v1, {rb});
    // A point keeps its label after rotation unless its rotated cell center
    // lies within one cell diagonal of an enlarged face.
    std::map<Cell, int> lab0, lab1;
    for (std::size_t i = 0; i < v0.size(); ++i) lab0[v0.coords[i]] = l0[i];
    for (std::size_t i = 0; i < v1.size(); ++i) lab1[v1.coords[i]] = l1[i];
    auto cell_of = [&](const Vec3& q) {
      Cell cc{};
      for (int a = 0; a < 3; ++a)
        cc[a] = std::int64_t(std::floor((q[a] - g.origin[a]) / g.cell_size[a]));
      return cc;
    };
    int changed = 0;
    for (std::size_t k = 0; k < pts.size(); ++k) {
      const Cell c0 = cell_of(pts[k].xyz), c1 = cell_of(rp[k].xyz);
      if (!g.contains(c1)) continue;
      if (lab0.at(c0) == lab1.at(c1)) continue;
      ++changed;
      auto p = g.center_of(c1);
      const double dx = p[0] - rb.center[0], dy = p[1] - rb.center[1];
      const double lx = dx * std::cos(rb.yaw) + dy * std::sin(rb.yaw);
      const double ly = -dx * std::sin(rb.yaw) + dy * std::cos(rb.yaw);
      const double ex = box.size[0] / 2 + 0.5, ey = box.size[1] / 2 + 0.5;
      const double band = std::min(std::abs(std::abs(lx) - ex), std::abs(std::abs(ly) - ey));
      CHECK(band <= diag);
    }
    CHECK(changed < 200);
  }
}

TEST_CASE("world-frame enlargement contains the box-frame footprint corners") {
  Box3D b{{0, 0, 0}, {4, 2, 1}, std::numbers::pi / 4, 1};
  Enlarge world{0.5, 0.25, EnlargeFrame::world};
  // A rotated corner pushed 0.5 m along world +x is inside the world-frame
  // sum; it is inside the box-frame one only if the local offset fits.
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const Vec3 corner{2 * c - 1 * s, 2 * s + 1 * c, 0};
  CHECK(inside_enlarged(b, {corner[0] + 0.49, corner[1], 0}, world));
  CHECK_FALSE(inside_enlarged(b, {corner[0] + 0.51, corner[1] + 0.51, 0}, world));
  // Brute force oracle: the Minkowski sum contains p iff some point of the
  // square around p lies in the box.
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-3.5, 3.5);
  for (int k = 0; k < 400; ++k) {
    Vec3 p{u(rng), u(rng), 0};
    bool hit = false;
    const int m = 60;
    for (int i = 0; i <= m && !hit; ++i)
      for (int j = 0; j <= m && !hit; ++j) {
        const double qx = p[0] - 0.5 + i / double(m);
        const double qy = p[1] - 0.5 + j / double(m);
        const double lx = qx * c + qy * s, ly = -qx * s + qy * c;
        hit = std::abs(lx) <= 2 && std::abs(ly) <= 1;
      }
    const bool got = inside_enlarged(b, p, world);
    // Sampling resolution can only miss thin slivers near the boundary.
    if (got != hit) {
      CHECK(got);
    }
  }
}

TEST_CASE("downsample merges blocks and averages") {
  VoxelSet v;
  v.grid = small_grid(4, 4, 4, 1.0);
  v.coords = {{0, 0, 0}, {1, 1, 1}};
  v.feats = Tensor::from({2, 1}, {2, 4});
  auto d = downsample(v, 2);
  REQUIRE(d.size() == 1);
  CHECK(d.coords[0] == Cell{0, 0, 0});
  CHECK(d.feats.item() == 3.0);
  CHECK(d.grid.resolution == Cell{2, 2, 2});
}

TEST_CASE("downsample with identity map") {
  ParamStore store;
  VoxelSet v;
  v.grid = small_grid(4, 4, 4, 1.0);
  v.coords = {{0, 0, 0}, {1, 0, 0}};
  v.feats = Tensor::from({2, 1}, {2, 4});
  Linear id{init_identity(1), Tensor{}};
  auto d = downsample(v, 2, &id);
  CHECK(d.feats.item() == 3.0);
}

TEST_CASE("downsample keeps distinct blocks and pads odd extents") {
  VoxelSet v;
  v.grid = small_grid(7, 5, 3, 1.0);
  v.coords = {{0, 0, 0}, {2, 0, 0}, {6, 4, 2}};
  v.feats = Tensor::from({3, 1}, {1, 2, 3});
  auto d = downsample(v, 2);
  CHECK(d.size() == 3);
  CHECK(d.grid.resolution == Cell{4, 3, 2});
  auto dd = downsample(downsample(v, 2), 2);
  CHECK(dd.grid.resolution == Cell{2, 2, 1});
  VoxelSet e;
  e.grid = small_grid(16, 8, 4, 1.0);
  e.coords = {{15, 7, 3}};
  e.feats = Tensor::from({1, 1}, {1});
  auto e2 = downsample(downsample(e, 2), 2);
  CHECK(e2.grid.resolution == Cell{4, 2, 1});
  CHECK(e2.coords[0] == Cell{3, 1, 0});
}

TEST_CASE("validate rejects duplicates and out-of-range cells") {
  VoxelSet v;
  v.grid = small_grid(4, 4, 4, 1.0);
  v.coords = {{0, 0, 0}, {0, 0, 0}};
  v.feats = Tensor::zeros({2, 1});
  CHECK_THROWS_AS(v.validate(), ContractError);
  v.coords = {{0, 0, 0}, {4, 0, 0}};
  CHECK_THROWS_AS(v.validate(), ContractError);
}

TEST_CASE("csv round trip") {
  std::vector<Point> pts{{{1.5, 2, 3}, {0.5, 7}}, {{0, 0, 0}, {1, 2}}};
  std::stringstream ss;
  write_points_csv(ss, pts);
  auto back = read_points_csv(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[0].xyz == pts[0].xyz);
  CHECK(back[1].feat == pts[1].feat);
  std::stringstream bs("cx,cy,cz,dx,dy,dz,yaw,class\n1,2,3,4,5,6,0.5,2\n");
  auto boxes = read_boxes_csv(bs);
  REQUIRE(boxes.size() == 1);
  CHECK(boxes[0].class_id == 2);
  std::stringstream bad("1,2,x\n");
  CHECK_THROWS(read_points_csv(bad));
  std::stringstream neg("0,0,0,1,-1,1,0,1\n");
  CHECK_THROWS(read_boxes_csv(neg));
}
