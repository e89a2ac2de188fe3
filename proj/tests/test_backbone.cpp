#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "fms/backbone.hpp"
#include "support/gradcheck.hpp"

using namespace fms;
using fms::testing::grad_check;

namespace {

VoxelSet random_voxels(std::mt19937_64& rng, std::size_t n, std::size_t d,
                       Cell res = {8, 8, 4}) {
  std::set<Cell> cells;
  std::uniform_int_distribution<std::int64_t> ux(0, res[0] - 1), uy(0, res[1] - 1),
      uz(0, res[2] - 1);
  while (cells.size() < n) cells.insert({ux(rng), uy(rng), uz(rng)});
  VoxelSet v;
  v.grid.resolution = res;
  v.coords.assign(cells.begin(), cells.end());
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> f(n * d);
  for (auto& x : f) x = u(rng);
  v.feats = Tensor::from({n, d}, f);
  return v;
}

StageConfig small_stage(std::size_t d = 4) {
  StageConfig c;
  c.block.d = d;
  c.block.s = 2;
  c.block.head_hidden = 6;
  c.block.saf_taps = 3;
  c.block.ssf_kernel = 3;
  c.scorer_hidden = 5;
  c.merge_hidden = 5;
  c.alpha = 0.5;
  c.m = 2;
  return c;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("top-k sampling examples") {
  auto a = sample_topk({0.9, 0.1, 0.8, 0.2}, 0.5);
  CHECK(a.fg == Index{0, 2});
  CHECK(a.bg == Index{1, 3});
  auto all = sample_topk({0.3, 0.9, 0.5}, 1.0);
  CHECK(all.fg == Index{1, 2, 0});
  CHECK(all.bg.empty());
  auto ties = sample_topk({0.5, 0.5, 0.5, 0.5, 0.5}, 0.4);
  CHECK(ties.fg == Index{0, 1});
  CHECK(sample_count(1000, 0.2) == 200);
  CHECK(sample_count(7, 0.2) == 2);
  CHECK(sample_count(3, 0.01) == 1);
  CHECK_THROWS_AS(sample_topk({0.1}, 0.0), ContractError);
  CHECK_THROWS_AS(sample_topk({0.1}, 1.5), ContractError);
}

TEST_CASE("face neighbor mean matches a brute-force scan") {
  std::mt19937_64 rng(1);
  auto v = random_voxels(rng, 60, 3);
  auto got = neighbor_mean(v.feats, face_neighbors(v.coords));
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::vector<double> acc(3, 0.0);
    int cnt = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      std::int64_t l1 = 0;
      for (int a = 0; a < 3; ++a) l1 += std::abs(v.coords[i][a] - v.coords[j][a]);
      if (l1 != 1) continue;
      ++cnt;
      for (int c = 0; c < 3; ++c) acc[c] += v.feats.at(j, c);
    }
    for (int c = 0; c < 3; ++c)
      CHECK(got.at(i, c) == doctest::Approx(cnt ? acc[c] / cnt : 0.0).epsilon(1e-12));
  }
}

TEST_CASE("foreground scores") {
  std::mt19937_64 rng(2);
  auto v = random_voxels(rng, 40, 4);
  ParamStore store;
  Rng prng(3);
  auto zero = Mlp{Linear::zeros(store, "a", 8, 5), Linear::zeros(store, "b", 5, 1)};
  for (double s : score_foreground(v, zero).data()) CHECK(s == 0.5);
  auto mlp = Mlp::make(store, "c", prng, 8, 5, 1);
  for (double s : score_foreground(v, mlp).data()) {
    CHECK(s > 0.0);
    CHECK(s < 1.0);
  }
}

TEST_CASE("identity encoder and merge leave the stage input unchanged") {
  std::mt19937_64 rng(4);
  auto v = random_voxels(rng, 50, 4);
  auto cfg = small_stage();
  cfg.angles = {0.0};
  ParamStore store;
  Rng prng(5);
  auto p = StageParams::make(store, "s", prng, cfg);
  StageHooks hooks;
  hooks.encoder = [](const Tensor& x, const SeqLayout&) { return x; };
  for (double a : {0.1, 0.5, 1.0}) {
    cfg.alpha = a;
    auto r = encode_stage(v, cfg, p, hooks);
    CHECK(values(r.out.feats) == values(v.feats));
    CHECK(r.out.coords == v.coords);
  }
}

TEST_CASE("stage keeps the voxel count and the background rows") {
  std::mt19937_64 rng(6);
  auto v = random_voxels(rng, 70, 4);
  auto cfg = small_stage();
  ParamStore store;
  Rng prng(7);
  auto p = StageParams::make(store, "s", prng, cfg);
  // Non-zero embedding so that background rows differ from the raw input.
  std::normal_distribution<double> g(0, 0.3);
  for (double& w : p.pe.weight.mutable_data()) w = g(rng);
  for (double& w : p.update.weight.mutable_data()) w = g(rng);
  auto nb = face_neighbors(v.coords);
  std::vector<double> pos(v.size() * 3);
  for (std::size_t i = 0; i < v.size(); ++i)
    for (int a = 0; a < 3; ++a)
      pos[i * 3 + a] = (v.coords[i][a] + 0.5) / double(v.grid.resolution[a]);
  auto z = add(v.feats, p.pe(Tensor::from({v.size(), 3}, pos)));
  auto u = add(z, p.update(concat({z, neighbor_mean(z, nb)}, 1)));
  for (double a : {0.05, 0.2, 0.5, 0.9, 1.0}) {
    cfg.alpha = a;
    auto r = encode_stage(v, cfg, p);
    CHECK(r.out.size() == v.size());
    CHECK(r.split.fg.size() + r.split.bg.size() == v.size());
    CHECK(r.split.fg.size() == sample_count(v.size(), a));
    CHECK(r.semantic.rows() == r.split.fg.size());
    for (auto i : r.split.bg)
      for (std::size_t c = 0; c < 4; ++c)
        CHECK(r.out.feats.at(i, c) == u.at(i, c));
    bool fg_moved = false;
    for (auto i : r.split.fg)
      for (std::size_t c = 0; c < 4; ++c) fg_moved |= r.out.feats.at(i, c) != u.at(i, c);
    CHECK(fg_moved);
  }
}

TEST_CASE("selection hook rewrites the encoded set") {
  std::mt19937_64 rng(8);
  auto v = random_voxels(rng, 30, 4);
  auto cfg = small_stage();
  ParamStore store;
  Rng prng(9);
  auto p = StageParams::make(store, "s", prng, cfg);
  StageHooks hooks;
  hooks.select = [](const Index&, const Index&) { return Index{3, 1, 7}; };
  auto r = encode_stage(v, cfg, p, hooks);
  CHECK(r.split.fg == Index{3, 1, 7});
  CHECK(r.split.bg.size() == 27);
  hooks.select = [](const Index&, const Index&) { return Index{3, 3}; };
  CHECK_THROWS_AS(encode_stage(v, cfg, p, hooks), ContractError);
}

TEST_CASE("backbone stages and downsampling") {
  std::mt19937_64 rng(10);
  auto v = random_voxels(rng, 90, 4, {16, 16, 8});
  auto cfg = small_stage();
  ParamStore store;
  Rng prng(11);
  std::vector<StageParams> ps{StageParams::make(store, "a", prng, cfg),
                              StageParams::make(store, "b", prng, cfg)};

  auto one = cfg;
  one.stride = 1;
  auto single = run_backbone(v, {one}, {ps[0]});
  auto direct = encode_stage(v, one, ps[0]);
  CHECK(values(single.out.feats) == values(direct.out.feats));

  auto two = run_backbone(v, {cfg, cfg}, ps);
  REQUIRE(two.stages.size() == 2);
  CHECK(two.stage_grids[0].resolution == Cell{16, 16, 8});
  CHECK(two.stage_grids[1].resolution == Cell{8, 8, 4});
  CHECK(two.out.grid.resolution == Cell{4, 4, 2});
  for (std::size_t s = 0; s < 2; ++s)
    CHECK(two.stages[s].scores.rows() == two.stage_coords[s].size());
  CHECK(two.stage_coords[1].size() < v.size());

  auto again = run_backbone(v, {cfg, cfg}, ps);
  CHECK(values(again.out.feats) == values(two.out.feats));
}

TEST_CASE("stage gradients match finite differences") {
  std::mt19937_64 rng(12);
  auto v = random_voxels(rng, 24, 3);
  v.feats = Tensor::param(v.feats.shape(), values(v.feats));
  auto cfg = small_stage(3);
  ParamStore store;
  Rng prng(13);
  auto p = StageParams::make(store, "s", prng, cfg);
  // Move zero-initialized parameters off their special values.
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto [_, t] : store.items())
    for (double& w : t.mutable_data()) w += u(rng);
  std::vector<Tensor> inputs{v.feats};
  for (const auto& [_, t] : store.items()) inputs.push_back(t);
  auto rep = grad_check(inputs, [&] {
    auto r = encode_stage(v, cfg, p);
    return add(add(sum(mul(r.out.feats, r.out.feats)), sum(r.scores)),
               sum(softmax(r.semantic)));
  }, 14, 200);
  INFO(rep.worst);
  CHECK(rep.max_rel_err <= 1e-3);
}

TEST_CASE("flops model") {
  std::mt19937_64 rng(15);
  auto v = random_voxels(rng, 1500, 32, {32, 32, 8});
  StageConfig base;
  base.stride = 2;

  auto at = [&](double a) {
    auto c = base;
    c.alpha = a;
    return count_flops(v, c);
  };
  auto lo = at(0.2), hi = at(1.0);
  CHECK(lo.encoder_total() / hi.encoder_total() == doctest::Approx(0.2).epsilon(0.05));
  CHECK(lo.total() / hi.total() < 0.5);
  CHECK(lo.flatten == 0.0);
  double parts = lo.scoring + lo.embed + lo.flatten + lo.merge + lo.downsample;
  for (double e : lo.encoder) parts += e;
  CHECK(parts == lo.total());
  REQUIRE(lo.encoder.size() == 2);
  CHECK(lo.encoder[0] == lo.encoder[1]);

  auto t2 = base, t4 = base;
  t4.t = 4;
  CHECK(count_flops(v, t4).encoder_total() == 2 * count_flops(v, t2).encoder_total());

  double prev = 0;
  for (double a : {0.1, 0.2, 0.5, 1.0}) {
    CHECK(at(a).total() > prev);
    prev = at(a).total();
  }
  prev = 0;
  for (int t : {1, 2, 3, 4}) {
    auto c = base;
    c.t = t;
    CHECK(count_flops(v, c).total() > prev);
    prev = count_flops(v, c).total();
  }
  auto r1 = base;
  r1.angles = {0.0};
  CHECK(count_flops(v, r1).total() < count_flops(v, base).total());
  auto wide = base;
  wide.block.d = 48;
  CHECK(count_flops(v, wide).total() > count_flops(v, base).total());

  std::ostringstream os;
  lo.write_csv(os);
  CHECK(os.str().rfind("component,flops\n", 0) == 0);
}
