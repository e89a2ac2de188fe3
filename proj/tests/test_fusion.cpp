#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "fms/fusion.hpp"
#include "support/gradcheck.hpp"

using namespace fms;
using fms::testing::grad_check;
using fms::testing::random_param;

namespace {

SsmSteps random_steps(std::mt19937_64& rng, std::size_t n, std::size_t d,
                      std::size_t s) {
  return make_steps(d, s, random_param(rng, {n, d * s}, 0.05, 0.999),
                    random_param(rng, {n, d * s}), random_param(rng, {n, s}));
}

std::vector<int> random_classes(std::mt19937_64& rng, std::size_t n, int c) {
  std::uniform_int_distribution<int> u(0, c - 1);
  std::vector<int> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Window neighbors computed from scratch: list the rows of each class in
// order, concatenate classes in ascending id, and step k places along it.
std::vector<std::vector<long>> brute_neighbors(const std::vector<int>& cls, int taps,
                                               bool per_group) {
  std::vector<long> order;
  for (int c = *std::min_element(cls.begin(), cls.end());
       c <= *std::max_element(cls.begin(), cls.end()); ++c)
    for (std::size_t i = 0; i < cls.size(); ++i)
      if (cls[i] == c) order.push_back(long(i));
  const int half = taps / 2;
  std::vector<std::vector<long>> nb(taps, std::vector<long>(cls.size(), -1));
  for (std::size_t p = 0; p < order.size(); ++p)
    for (int k = -half; k <= half; ++k) {
      const long q = long(p) + k;
      if (q < 0 || q >= long(order.size())) continue;
      if (per_group && cls[order[q]] != cls[order[p]]) continue;
      nb[k + half][order[p]] = order[q];
    }
  return nb;
}

Tensor copy_of(const Tensor& t) {
  return Tensor::from(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
}

}  // namespace

TEST_CASE("semantic prediction argmax with low-id ties") {
  CHECK(predict_semantics(Tensor::from({1, 2}, {0.1, 0.9})) == std::vector<int>{1});
  CHECK(predict_semantics(Tensor::from({1, 2}, {0.3, 0.3})) == std::vector<int>{0});
}

TEST_CASE("rearrangement is a stable two-key sort") {
  auto h = Tensor::from({4, 1}, {10, 11, 12, 13});
  auto r = semantic_rearrange(h, {1, 0, 1, 0});
  CHECK(r.perm == Index{1, 3, 0, 2});
  CHECK(r.sorted.at(0, 0) == 11.0);
  CHECK(semantic_rearrange(h, {2, 2, 2, 2}).perm == Index{0, 1, 2, 3});
  auto back = reverse_rearrange(r.sorted, r.perm, 4);
  CHECK(std::equal(back.data().begin(), back.data().end(), h.data().begin()));
}

TEST_CASE("saf identity and constant averaging") {
  std::mt19937_64 rng(1);
  auto h = random_param(rng, {9, 3});
  auto same = saf(h, random_classes(rng, 9, 3), saf_uniform_weights(1, 3));
  CHECK(std::equal(same.data().begin(), same.data().end(), h.data().begin()));

  auto c = Tensor::full({10, 2}, 2.0);
  auto out = saf(c, std::vector<int>(10, 1), saf_uniform_weights(3, 2));
  for (std::size_t i = 1; i < 9; ++i) CHECK(out.at(i, 0) == doctest::Approx(2.0));
  CHECK(out.at(0, 0) == doctest::Approx(4.0 / 3));
  CHECK(out.at(9, 1) == doctest::Approx(4.0 / 3));
}

TEST_CASE("saf equals direct window evaluation") {
  std::mt19937_64 rng(2);
  for (int inst = 0; inst < 40; ++inst) {
    const std::size_t n = 1 + inst % 30;
    const int taps = 1 + 2 * (inst % 4);
    const bool per_group = inst % 2 == 1;
    auto h = random_param(rng, {n, 4});
    auto w = random_param(rng, {std::size_t(taps), 4});
    auto cls = random_classes(rng, n, 3);
    auto out = saf(h, cls, w, {}, per_group);
    auto nb = brute_neighbors(cls, taps, per_group);
    double worst = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < 4; ++c) {
        double ref = 0;
        for (int k = 0; k < taps; ++k)
          if (nb[k][i] >= 0) ref += w.at(k, c) * h.at(std::size_t(nb[k][i]), c);
        worst = std::max(worst, std::abs(ref - out.at(i, c)));
      }
    CHECK(worst <= 1e-9);
    auto table = saf_neighbors(cls, taps, {}, per_group);
    for (int k = 0; k < taps; ++k)
      for (std::size_t i = 0; i < n; ++i) CHECK(table[k][i] == nb[k][i]);
  }
}

TEST_CASE("saf output depends on ids only through the induced order") {
  std::mt19937_64 rng(3);
  auto h = random_param(rng, {8, 2});
  auto w = random_param(rng, {3, 2});
  std::vector<int> a{0, 1, 0, 2, 1, 2, 0, 1};
  std::vector<int> b{5, 7, 5, 9, 7, 9, 5, 7};  // same ranking of ids
  auto oa = saf(h, a, w), ob = saf(h, b, w);
  CHECK(std::equal(oa.data().begin(), oa.data().end(), ob.data().begin()));
}

TEST_CASE("end-to-end saf association equals C saf(h)") {
  std::mt19937_64 rng(4);
  for (int inst = 0; inst < 40; ++inst) {
    const std::size_t n = 1 + inst % 32, s = 1 + inst % 4, d = 2;
    const int taps = 1 + 2 * (inst % 4);
    auto st = random_steps(rng, n, d, s);
    auto x = random_param(rng, {n, d});
    auto cls = random_classes(rng, n, 3);
    auto w = random_param(rng, {std::size_t(taps), d * s});
    auto y = observe(saf(scan_states(x, st), cls, w), st);
    double worst = 0;
    for (std::size_t c = 0; c < d; ++c) {
      auto m = saf_association(st, cls, w, c);
      for (std::size_t i = 0; i < n; ++i) {
        double mx = 0;
        for (std::size_t j = 0; j < n; ++j) mx += m[i * n + j] * x.at(j, c);
        worst = std::max(worst, std::abs(mx - y.at(i, c)));
      }
    }
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("single tap saf association is the vanilla matrix") {
  std::mt19937_64 rng(5);
  auto st = random_steps(rng, 12, 1, 3);
  auto m = association_matrix(st, 0);
  auto mp = saf_association(st, random_classes(rng, 12, 3), saf_uniform_weights(1, 3), 0);
  for (std::size_t k = 0; k < m.size(); ++k) CHECK(mp[k] == doctest::Approx(m[k]).epsilon(1e-12));
}

TEST_CASE("interleaved categories make the association non-causal") {
  std::mt19937_64 rng(6);
  auto st = random_steps(rng, 4, 1, 2);
  auto m = saf_association(st, {0, 1, 0, 1}, saf_uniform_weights(3, 2), 0);
  bool upper = false;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) upper = upper || m[i * 4 + j] != 0.0;
  CHECK(upper);
  // One category and a single tap: strictly lower-triangular support.
  auto m1 = saf_association(st, {2, 2, 2, 2}, saf_uniform_weights(1, 2), 0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) CHECK(m1[i * 4 + j] == 0.0);
}

TEST_CASE("upper-triangular support matches the combinatorial set") {
  std::mt19937_64 rng(7);
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t n = 4 + inst;
    // Positive steps and weights rule out accidental cancellation.
    auto st = make_steps(1, 1, random_param(rng, {n, 1}, 0.2, 0.9),
                         random_param(rng, {n, 1}, 0.2, 1.0),
                         random_param(rng, {n, 1}, 0.2, 1.0));
    auto cls = random_classes(rng, n, 3);
    const int taps = 3 + 2 * (inst % 3);
    auto m = saf_association(st, cls, random_param(rng, {std::size_t(taps), 1}, 0.1, 1), 0);
    auto nb = brute_neighbors(cls, taps, false);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        bool expect = false;
        for (int k = 0; k < taps; ++k) expect = expect || nb[k][i] >= long(j);
        CHECK((m[i * n + j] != 0.0) == expect);
      }
  }
}

TEST_CASE("association similarity") {
  std::vector<Cell> coords{{0, 0, 0}, {1, 0, 0}, {5, 5, 0}, {6, 5, 0}};
  std::vector<int> cls{1, 1, 2, 2};
  std::vector<double> label(16);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double d2 = 0;
      for (int a = 0; a < 3; ++a) d2 += double((coords[i][a] - coords[j][a]) * (coords[i][a] - coords[j][a]));
      label[i * 4 + j] = cls[i] == cls[j] ? 3.0 * std::exp(-d2 / 18) : 0.0;
    }
  CHECK(association_similarity(label, coords, cls) == doctest::Approx(1.0));
  std::vector<double> off(16, 0.0);
  off[0 * 4 + 2] = 1.0;  // different classes only
  CHECK(association_similarity(off, coords, cls) == 0.0);
  CHECK_THROWS_AS(association_similarity(label, coords, cls, 0.0), ContractError);
}

TEST_CASE("saf raises similarity on an interleaved scene") {
  // Two classes interleaved along a line; same-class cells are near each
  // other in space but alternate in the sequence.
  std::mt19937_64 rng(8);
  const std::size_t n = 24;
  std::vector<Cell> coords;
  std::vector<int> cls;
  for (std::size_t i = 0; i < n; ++i) {
    coords.push_back({std::int64_t(i / 2), std::int64_t(i % 2) * 8, 0});
    cls.push_back(int(i % 2));
  }
  auto st = make_steps(1, 2, Tensor::full({n, 2}, 0.6), Tensor::full({n, 2}, 1.0),
                       Tensor::full({n, 2}, 1.0));
  auto m = association_matrix(st, 0);
  auto mp = saf_association(st, cls, saf_uniform_weights(7, 2), 0);
  CHECK(association_similarity(mp, coords, cls) > association_similarity(m, coords, cls));
}

TEST_CASE("ssf identity, hand convolution, and duplicates") {
  std::mt19937_64 rng(9);
  SeqLayout lay;
  lay.coords = {{0, 0, 0}, {1, 0, 0}, {3, 2, 1}};
  auto h = random_param(rng, {3, 2});
  std::array<Tensor, 3> id{ssf_identity_weights(9, 2), ssf_identity_weights(9, 2),
                           ssf_identity_weights(9, 2)};
  auto out = ssf(h, id, ssf_tables(lay, 3, 9));
  CHECK(std::equal(out.data().begin(), out.data().end(), h.data().begin()));

  SeqLayout two;
  two.coords = {{4, 4, 4}, {5, 4, 4}};
  auto onehot = Tensor::from({2, 2}, {1, 0, 0, 1});
  std::array<Tensor, 3> wx{Tensor::from({3, 2}, {1, 1, 1, 1, 1, 1}),
                           ssf_identity_weights(3, 2), ssf_identity_weights(3, 2)};
  auto o2 = ssf(onehot, wx, ssf_tables(two, 2, 3));
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(o2.at(i, 0) == 1.0);
    CHECK(o2.at(i, 1) == 1.0);
  }
  SeqLayout dup;
  dup.coords = {{1, 1, 1}, {1, 1, 1}};
  CHECK_THROWS_AS(ssf_tables(dup, 2, 9), ContractError);
}

TEST_CASE("ssf hand convolution along every axis matches a dense oracle") {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<std::int64_t> u(0, 5);
  std::set<Cell> cells;
  while (cells.size() < 40) cells.insert({u(rng), u(rng), u(rng)});
  SeqLayout lay;
  lay.coords.assign(cells.begin(), cells.end());
  const std::size_t n = lay.coords.size();
  auto h = random_param(rng, {n, 2});
  std::array<Tensor, 3> w{random_param(rng, {5, 2}), random_param(rng, {5, 2}),
                          random_param(rng, {5, 2})};
  auto out = ssf(h, w, ssf_tables(lay, n, 5));
  // Dense 6x6x6 volume, zero where empty, convolved axis by axis.
  std::vector<double> vol(216 * 2, 0.0);
  auto at = [](Cell c) { return std::size_t(c[0] + 6 * c[1] + 36 * c[2]); };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < 2; ++k) vol[at(lay.coords[i]) * 2 + k] = h.at(i, k);
  for (int axis = 0; axis < 3; ++axis) {
    std::vector<double> next(vol.size(), 0.0);
    for (const auto& c : lay.coords)
      for (int t = 0; t < 5; ++t) {
        Cell q = c;
        q[axis] += t - 2;
        if (q[axis] < 0 || q[axis] > 5) continue;
        for (std::size_t k = 0; k < 2; ++k)
          next[at(c) * 2 + k] += w[axis].at(t, k) * vol[at(q) * 2 + k];
      }
    vol = next;
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < 2; ++k)
      CHECK(out.at(i, k) == doctest::Approx(vol[at(lay.coords[i]) * 2 + k]).epsilon(1e-12));
}

TEST_CASE("ssf is equivariant to joint permutations") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::int64_t> u(0, 4);
  std::set<Cell> cells;
  while (cells.size() < 30) cells.insert({u(rng), u(rng), u(rng)});
  SeqLayout lay;
  lay.coords.assign(cells.begin(), cells.end());
  const std::size_t n = lay.coords.size();
  auto h = random_param(rng, {n, 3});
  std::array<Tensor, 3> w{random_param(rng, {9, 3}), random_param(rng, {9, 3}),
                          random_param(rng, {9, 3})};
  auto out = ssf(h, w, ssf_tables(lay, n, 9));
  Index perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  SeqLayout pl;
  for (auto p : perm) pl.coords.push_back(lay.coords[std::size_t(p)]);
  auto pout = ssf(gather(h, 0, perm), w, ssf_tables(pl, n, 9));
  auto expect = gather(out, 0, perm);
  for (std::size_t k = 0; k < expect.numel(); ++k)
    CHECK(pout.data()[k] == doctest::Approx(expect.data()[k]).epsilon(1e-12));
}

TEST_CASE("block degenerates to the plain scan") {
  ParamStore store;
  Rng rng(12);
  BlockConfig cfg;
  cfg.d = 4;
  cfg.s = 3;
  cfg.saf_taps = 1;
  cfg.use_gate = false;
  auto blk = SasfBlock::make(store, "blk", rng, cfg);
  std::mt19937_64 r(13);
  auto x = random_param(r, {10, 4});
  SeqLayout lay;
  for (std::int64_t i = 0; i < 10; ++i) lay.coords.push_back({i, 0, 0});
  auto y = blk(x, lay);
  auto ref = scan(x, discretize(blk.ssm, x));
  for (std::size_t k = 0; k < y.numel(); ++k)
    CHECK(y.data()[k] == doctest::Approx(ref.data()[k]).epsilon(1e-12));

  // N = 1: C^T Bbar x through the gate.
  BlockConfig g = cfg;
  g.use_gate = true;
  g.saf_taps = 7;
  auto gb = SasfBlock::make(store, "gated", rng, g);
  auto x1 = random_param(r, {1, 4});
  auto st = discretize(gb.ssm, x1);
  auto y1 = gb(x1);
  auto gate = sigmoid(gb.gate(x1));
  for (std::size_t c = 0; c < 4; ++c) {
    double v = 0;
    // A single row only sees the centre tap of its window.
    for (std::size_t k = 0; k < 3; ++k)
      v += st.c.at(0, k) * gb.saf_w.at(3, c * 3 + k) * st.b_bar.at(0, c * 3 + k);
    CHECK(y1.at(0, c) == doctest::Approx(v * x1.at(0, c) * gate.at(0, c)).epsilon(1e-12));
  }
}

TEST_CASE("segments behave like separate sequences") {
  ParamStore store;
  Rng rng(14);
  BlockConfig cfg;
  cfg.d = 4;
  cfg.s = 2;
  cfg.saf_taps = 3;
  auto blk = SasfBlock::make(store, "blk", rng, cfg);
  std::mt19937_64 r(15);
  auto a = random_param(r, {7, 4}), b = random_param(r, {5, 4});
  SeqLayout la, lb, lab;
  for (std::int64_t i = 0; i < 7; ++i) la.coords.push_back({i, 1, 0});
  for (std::int64_t i = 0; i < 5; ++i) lb.coords.push_back({i, 2, 0});
  lab.coords = la.coords;
  lab.coords.insert(lab.coords.end(), lb.coords.begin(), lb.coords.end());
  // Shared cells across segments must not meet.
  lab.coords[8] = la.coords[1];
  lb.coords[1] = la.coords[1];
  lab.segment.assign(7, 0);
  lab.segment.resize(12, 1);
  auto ya = blk(a, la), yb = blk(b, lb);
  auto yab = blk(concat({a, b}, 0), lab);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t c = 0; c < 4; ++c) CHECK(yab.at(i, c) == doctest::Approx(ya.at(i, c)).epsilon(1e-12));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 4; ++c) CHECK(yab.at(7 + i, c) == doctest::Approx(yb.at(i, c)).epsilon(1e-12));
}

TEST_CASE("padding rows never reach real rows") {
  ParamStore store;
  Rng rng(16);
  BlockConfig cfg;
  cfg.d = 3;
  cfg.s = 2;
  auto blk = SasfBlock::make(store, "blk", rng, cfg);
  std::mt19937_64 r(17);
  auto x = random_param(r, {8, 3});
  SeqLayout lay;
  lay.active = {1, 1, 1, 0, 0, 1, 1, 1};
  for (std::int64_t i = 0; i < 8; ++i) lay.coords.push_back({i, 0, 0});
  auto y = blk(x, lay);
  auto xp = copy_of(x);
  for (std::size_t k = 0; k < 3; ++k) {
    xp.mutable_data()[3 * 3 + k] = 100.0 + k;
    xp.mutable_data()[4 * 3 + k] = -7.0;
  }
  auto yp = blk(xp, lay);
  for (std::size_t i : {0, 1, 2, 5, 6, 7})
    for (std::size_t c = 0; c < 3; ++c) CHECK(yp.at(i, c) == y.at(i, c));
}

TEST_CASE("block gradients match finite differences for every parameter") {
  for (int inst = 0; inst < 4; ++inst) {
    ParamStore store;
    Rng rng(300 + inst);
    BlockConfig cfg;
    cfg.d = 3;
    cfg.s = 2;
    cfg.head_hidden = 4;
    cfg.saf_taps = 3;
    cfg.ssf_kernel = 3;
    auto blk = SasfBlock::make(store, "blk", rng, cfg);
    // Perturb the identity-initialized kernels so every tap matters.
    std::mt19937_64 r(400 + inst);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (auto& w : blk.ssf_w)
      for (double& v : w.mutable_data()) v += u(r);
    auto x = random_param(r, {6, 3});
    SeqLayout lay;
    lay.coords = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 1, 1}, {2, 0, 0}};
    std::vector<Tensor> inputs{x};
    for (const auto& [_, t] : store.items()) inputs.push_back(t);
    auto rep = grad_check(inputs, [&] { return sum(blk(x, lay)); }, inst, 200);
    INFO(rep.worst);
    CHECK(rep.max_rel_err <= 1e-3);
  }
}
