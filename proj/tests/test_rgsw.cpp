#include <doctest.h>

#include <cmath>
#include <random>

#include "fms/rgsw.hpp"
#include "support/gradcheck.hpp"

using namespace fms;
using fms::testing::grad_check;
using fms::testing::random_param;

namespace {

struct Fixture {
  ParamStore store;
  SasfBlock block;
  Tensor token;

  explicit Fixture(std::uint64_t seed, std::size_t d = 4) {
    Rng rng(seed);
    BlockConfig cfg;
    cfg.d = d;
    cfg.s = 2;
    cfg.head_hidden = 8;
    cfg.saf_taps = 3;
    block = SasfBlock::make(store, "blk", rng, cfg);
    token = store.add("token", Tensor::param({1, d}, std::vector<double>(d, 0.0)));
  }

  SeqEncoder encoder() const {
    return [this](const Tensor& x, const SeqLayout& l) { return block(x, l); };
  }
  SeqEncoder residual() const {
    return [this](const Tensor& x, const SeqLayout& l) { return add(x, block(x, l)); };
  }
};

// Which output rows move when input row `j` is perturbed.
std::vector<char> influence(const Tensor& x, std::size_t j,
                            const std::function<Tensor(const Tensor&)>& f) {
  auto base = f(x);
  std::vector<double> v(x.data().begin(), x.data().end());
  for (std::size_t c = 0; c < x.cols(); ++c) v[j * x.cols() + c] += 0.3;
  auto moved = f(Tensor::from(x.shape(), v));
  // Influence fades with every hop while unreached rows stay bit-identical,
  // so a tight threshold relative to the output scale separates the two.
  double scale = 0;
  for (double b : base.data()) scale = std::max(scale, std::abs(b));
  const double tol = 1e-12 * std::max(scale, 1e-300);
  std::vector<char> hit(x.rows(), 0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t c = 0; c < x.cols(); ++c)
      if (std::abs(moved.at(i, c) - base.at(i, c)) > tol) hit[i] = 1;
  return hit;
}

}  // namespace

TEST_CASE("split and insert examples") {
  auto x = Tensor::from({4, 1}, {1, 2, 3, 4});
  auto tok = Tensor::from({1, 1}, {9});
  auto w = split_and_insert(x, 2, tok);
  CHECK(std::vector<double>(w.rows.data().begin(), w.rows.data().end()) ==
        std::vector<double>{1, 2, 9, 3, 4, 9});
  CHECK(w.layout.segment == std::vector<int>{0, 0, 0, 1, 1, 1});

  auto one = split_and_insert(x, 1, tok);
  CHECK(one.rows.rows() == 5);
  CHECK(one.rows.at(4, 0) == 9.0);

  auto five = split_and_insert(Tensor::from({5, 1}, {1, 2, 3, 4, 5}), 2, tok);
  CHECK(five.len == 3);
  CHECK(std::vector<double>(five.rows.data().begin(), five.rows.data().end()) ==
        std::vector<double>{1, 2, 3, 9, 4, 5, 0, 9});
  CHECK(five.layout.active == std::vector<char>{1, 1, 1, 1, 1, 1, 0, 1});
}

TEST_CASE("token propagation examples") {
  auto tok = Tensor::from({1, 2}, {0, 0});
  auto x = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto w = split_and_insert(x, 1, tok);
  // Encoded token is zero: rows unchanged.
  auto same = propagate_token(w.rows, w);
  CHECK(std::vector<double>(same.data().begin(), same.data().end()) ==
        std::vector<double>{1, 2, 3, 4});
  // Row identical to the token doubles; an orthogonal row is unchanged.
  auto enc = Tensor::from({3, 2}, {1, 2, -2, 1, 1, 2});
  auto out = propagate_token(enc, w);
  CHECK(out.at(0, 0) == doctest::Approx(2.0));
  CHECK(out.at(0, 1) == doctest::Approx(4.0));
  CHECK(out.at(1, 0) == doctest::Approx(-2.0));
  CHECK(out.at(1, 1) == doctest::Approx(1.0));
}

TEST_CASE("slide examples") {
  std::vector<double> v(8);
  for (int i = 0; i < 8; ++i) v[i] = i;
  auto s = slide(Tensor::from({8, 1}, v), 2);
  CHECK(std::vector<double>(s.data().begin(), s.data().end()) ==
        std::vector<double>{2, 3, 4, 5});
  CHECK(slide(Tensor::from({8, 1}, v), 1).rows() == 0);
  CHECK_THROWS_AS(slide(Tensor::zeros({6, 1}), 2), ContractError);
}

TEST_CASE("rgsw preserves length and maps zero to zero") {
  Fixture f(1);
  std::mt19937_64 rng(2);
  for (std::size_t n : {1, 5, 13, 32})
    for (std::size_t m : {1, 2, 3, 4})
      for (int t : {1, 2, 3}) {
        auto x = random_param(rng, {n, 4});
        auto y = rgsw_encode(x, f.encoder(), f.token, {m, t, true});
        CHECK(y.shape() == x.shape());
      }
  auto z = rgsw_encode(Tensor::zeros({10, 4}), f.encoder(), f.token, {4, 2, true});
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("t=1, M=1 is one block pass plus propagation") {
  Fixture f(3);
  std::mt19937_64 rng(4);
  auto x = random_param(rng, {6, 4});
  auto y = rgsw_encode(x, f.encoder(), f.token, {1, 1, true});
  auto w = split_and_insert(x, 1, f.token);
  auto ref = propagate_token(f.block(w.rows, w.layout), w);
  for (std::size_t k = 0; k < y.numel(); ++k) CHECK(y.data()[k] == ref.data()[k]);
}

TEST_CASE("padding content never reaches real rows") {
  Fixture f(5);
  std::mt19937_64 rng(6);
  auto x = random_param(rng, {5, 4});
  auto w = split_and_insert(x, 2, f.token);
  auto base = propagate_token(f.block(w.rows, w.layout), w);
  std::vector<double> rows(w.rows.data().begin(), w.rows.data().end());
  for (std::size_t c = 0; c < 4; ++c) rows[6 * 4 + c] = 50.0 - c;  // the pad row
  auto noisy = propagate_token(f.block(Tensor::from(w.rows.shape(), rows), w.layout), w);
  for (std::size_t k = 0; k < base.numel(); ++k) CHECK(base.data()[k] == noisy.data()[k]);
}

TEST_CASE("receptive field: regional only, then across patches") {
  Fixture f(7);
  std::mt19937_64 rng(8);
  const std::size_t n = 32, m = 4;
  auto x = random_param(rng, {n, 4});
  std::vector<Cell> coords;
  for (std::int64_t i = 0; i < std::int64_t(n); ++i) coords.push_back({i % 8, i / 8, 0});
  auto run = [&](int t, bool res = false) {
    return [&, t, res](const Tensor& in) {
      return rgsw_encode(in, res ? f.residual() : f.encoder(), f.token, {m, t, true},
                         coords);
    };
  };
  const std::size_t len1 = n / m;
  for (std::size_t j = 0; j < n; ++j) {
    auto hit = influence(x, j, run(1));
    for (std::size_t i = 0; i < n; ++i)
      CHECK(bool(hit[i]) == (i / len1 == j / len1));
  }
  // t = 2: every patch is reached from some other patch, and every adjacent
  // pair influences each other.
  const std::size_t len2 = PatchLayout::make(n, m, true).len;
  std::vector<std::vector<char>> reach(m, std::vector<char>(m, 0));
  for (std::size_t j = 0; j < n; ++j) {
    auto hit = influence(x, j, run(2));
    for (std::size_t i = 0; i < n; ++i)
      if (hit[i]) reach[j / len2][i / len2] = 1;
  }
  for (std::size_t p = 0; p + 1 < m; ++p) {
    CHECK(reach[p][p + 1]);
    CHECK(reach[p + 1][p]);
  }
  // Position 0 reaches every patch once enough slides have chained. Plain
  // untrained blocks shrink the signal below rounding after a few passes, so
  // this uses residual passes as the backbone does.
  auto far = influence(x, 0, run(6, true));
  for (std::size_t p = 0; p < m; ++p) {
    bool any = false;
    for (std::size_t i = p * len2; i < (p + 1) * len2; ++i) any = any || far[i];
    CHECK(any);
  }
}

TEST_CASE("the token receives gradient") {
  Fixture f(9);
  std::mt19937_64 rng(10);
  auto x = random_param(rng, {12, 4});
  f.store.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    auto y = rgsw_encode(x, f.encoder(), f.token, {3, 2, true});
    tape.backward(sum(mul(y, y)));
  }
  double norm = 0;
  for (double g : f.token.grad()) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("rgsw gradients match finite differences") {
  Fixture f(11, 3);
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (double& v : f.token.mutable_data()) v = u(rng);
  auto x = random_param(rng, {9, 3});
  std::vector<Tensor> inputs{x};
  for (const auto& [_, t] : f.store.items()) inputs.push_back(t);
  auto rep = grad_check(inputs, [&] {
    return sum(rgsw_encode(x, f.encoder(), f.token, {2, 2, true}));
  }, 1, 150);
  INFO(rep.worst);
  CHECK(rep.max_rel_err <= 1e-3);
}
