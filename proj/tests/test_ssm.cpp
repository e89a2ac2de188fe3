#include <doctest.h>

#include <cmath>
#include <random>

#include "fms/ssm.hpp"
#include "support/gradcheck.hpp"

using namespace fms;
using fms::testing::grad_check;
using fms::testing::random_param;

namespace {

SsmSteps random_steps(std::mt19937_64& rng, std::size_t n, std::size_t d,
                      std::size_t s) {
  auto a = random_param(rng, {n, d * s}, 0.05, 0.999);
  auto b = random_param(rng, {n, d * s}, -1, 1);
  auto c = random_param(rng, {n, s}, -1, 1);
  return make_steps(d, s, a, b, c);
}

// Plain loops over the recursion, no tensors.
std::vector<double> recurse(const SsmSteps& st, const Tensor& x) {
  const std::size_t n = st.length(), d = st.d, s = st.s;
  std::vector<double> h(d * s, 0.0), y(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t k = 0; k < s; ++k) {
        const std::size_t col = c * s + k;
        h[col] = st.a_bar.at(i, col) * h[col] + st.b_bar.at(i, col) * x.at(i, c);
        y[i * d + c] += st.c.at(i, k) * h[col];
      }
  return y;
}

}  // namespace

TEST_CASE("scalar hand recursion") {
  auto st = make_steps(1, 1, Tensor::full({3, 1}, 0.5), Tensor::full({3, 1}, 1.0),
                       Tensor::full({3, 1}, 1.0));
  auto y = scan(Tensor::full({3, 1}, 1.0), st);
  CHECK(y.data()[0] == 1.0);
  CHECK(y.data()[1] == 1.5);
  CHECK(y.data()[2] == 1.75);
  auto m = association_matrix(st, 0);
  CHECK(m == std::vector<double>{1, 0, 0, 0.5, 1, 0, 0.25, 0.5, 1});
}

TEST_CASE("zero input gives zero output") {
  std::mt19937_64 rng(1);
  auto st = random_steps(rng, 8, 2, 3);
  auto y = scan(Tensor::zeros({8, 2}), st);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("single position association") {
  std::mt19937_64 rng(2);
  auto st = random_steps(rng, 1, 1, 4);
  double expect = 0;
  for (std::size_t k = 0; k < 4; ++k) expect += st.c.at(0, k) * st.b_bar.at(0, k);
  CHECK(association_matrix(st, 0)[0] == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("scan equals association matrix times x and the plain recursion") {
  std::mt19937_64 rng(3);
  for (int inst = 0; inst < 50; ++inst) {
    std::uniform_int_distribution<std::size_t> un(1, 64), us(1, 8), ud(1, 3);
    const std::size_t n = un(rng), s = us(rng), d = ud(rng);
    auto st = random_steps(rng, n, d, s);
    auto x = random_param(rng, {n, d});
    auto y = scan(x, st);
    auto ref = recurse(st, x);
    double worst = 0;
    for (std::size_t c = 0; c < d; ++c) {
      auto m = association_matrix(st, c);
      for (std::size_t i = 0; i < n; ++i) {
        double mx = 0;
        for (std::size_t j = 0; j < n; ++j) {
          if (j > i) CHECK(m[i * n + j] == 0.0);
          mx += m[i * n + j] * x.at(j, c);
        }
        worst = std::max({worst, std::abs(mx - y.at(i, c)),
                          std::abs(ref[i * d + c] - y.at(i, c))});
      }
    }
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("discretize examples") {
  ParamStore store;
  Rng rng(4);
  auto p = SsmParams::make(store, "ssm", rng, 1, 1);
  for (double& v : p.a_log.mutable_data()) v = 0.0;  // A = -1
  for (double& v : p.delta.weight.mutable_data()) v = 0.0;
  for (double& v : p.delta.bias.mutable_data()) v = 0.0;  // softplus(0) = ln 2
  auto st = discretize(p, Tensor::full({3, 1}, 0.7));
  for (double v : st.a_bar.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-14));

  for (double& v : p.delta.bias.mutable_data()) v = -40.0;
  st = discretize(p, Tensor::full({3, 1}, 0.7));
  for (double v : st.a_bar.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
  for (double v : st.b_bar.data()) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("discretized transitions lie in (0,1)") {
  ParamStore store;
  Rng rng(5);
  auto p = SsmParams::make(store, "ssm", rng, 6, 4);
  std::mt19937_64 r(6);
  auto x = random_param(r, {20, 6}, -2, 2);
  auto st = discretize(p, x);
  for (double v : st.a_bar.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  // Initial A is -(1..S).
  auto a = p.a_log.data();
  for (std::size_t k = 0; k < 4; ++k) CHECK(-std::exp(a[k]) == doctest::Approx(-(k + 1.0)));
}

TEST_CASE("masks: padding rows hold the state, reset rows restart it") {
  ParamStore store;
  Rng rng(7);
  auto p = SsmParams::make(store, "ssm", rng, 3, 2);
  std::mt19937_64 r(8);
  auto x = random_param(r, {6, 3});
  StepMask m;
  m.active = {1, 1, 0, 1, 1, 1};
  m.reset = {1, 0, 0, 1, 0, 0};
  auto st = discretize(p, x, m);
  auto h = scan_states(x, st);
  for (std::size_t k = 0; k < 6; ++k) CHECK(h.at(2, k) == h.at(1, k));
  // Rows 3..5 equal an independent scan of those rows.
  auto tail = slice(x, 0, 3, 6);
  auto h2 = scan_states(tail, discretize(p, tail));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 6; ++k) CHECK(h.at(3 + i, k) == doctest::Approx(h2.at(i, k)).epsilon(1e-14));
}

TEST_CASE("causality under perturbation") {
  ParamStore store;
  Rng rng(9);
  auto p = SsmParams::make(store, "ssm", rng, 2, 3);
  std::mt19937_64 r(10);
  auto x = random_param(r, {12, 2});
  auto base = scan(x, discretize(p, x));
  for (std::size_t j = 0; j < 12; ++j) {
    auto xp = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
    xp.mutable_data()[j * 2] += 0.5;
    auto y = scan(xp, discretize(p, xp));
    for (std::size_t i = 0; i < 12; ++i) {
      const double delta = std::abs(y.at(i, 0) - base.at(i, 0)) + std::abs(y.at(i, 1) - base.at(i, 1));
      if (i < j) CHECK(delta == 0.0);
      else CHECK(delta > 1e-12);
    }
  }
}

TEST_CASE("gradients of sum(scan) match finite differences") {
  for (int inst = 0; inst < 10; ++inst) {
    ParamStore store;
    Rng rng(100 + inst);
    auto p = SsmParams::make(store, "ssm", rng, 3, 2);
    std::mt19937_64 r(200 + inst);
    auto x = random_param(r, {7, 3});
    std::vector<Tensor> inputs{x};
    for (const auto& [_, t] : store.items()) inputs.push_back(t);
    auto rep = grad_check(inputs, [&] { return sum(scan(x, discretize(p, x))); }, inst);
    INFO(rep.worst);
    CHECK(rep.max_rel_err <= 1e-3);
  }
}

TEST_CASE("make_steps rejects inconsistent shapes") {
  CHECK_THROWS_AS(make_steps(2, 2, Tensor::zeros({3, 4}), Tensor::zeros({3, 3}),
                             Tensor::zeros({3, 2})),
                  ContractError);
}
