#include <doctest.h>

#include "enma/nn.hpp"
#include "enma/tensor.hpp"

using namespace enma;

namespace {

Tensor<double> leaf(ParamStore<double>& s, const std::string& name, const Shape& shape,
                    std::vector<double> v) {
  return s.add(name, Tensor<double>::from(shape, std::move(v)));
}

}  // namespace

TEST_CASE("rng stream is deterministic and seed-sensitive") {
  RngStream a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const double x = a.uniform();
    CHECK(x == b.uniform());
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
  }
  bool differs = false;
  RngStream a2(42);
  for (int i = 0; i < 10; ++i) differs = differs || (a2.uniform() != c.uniform());
  CHECK(differs);
}

TEST_CASE("rng normal moments and bounded-range draws") {
  RngStream r(7);
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  CHECK(std::abs(s / n) < 0.05);
  CHECK(std::abs(s2 / n - 1.0) < 0.05);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform(-3.0, 5.0);
    CHECK(u >= -3.0);
    CHECK(u < 5.0);
  }
}

TEST_CASE("sample_without_replacement yields distinct in-range indices") {
  RngStream r(11);
  auto idx = r.sample_without_replacement(50, 20);
  REQUIRE(idx.size() == 20);
  std::vector<bool> seen(50, false);
  for (auto i : idx) {
    REQUIRE(i >= 0);
    REQUIRE(i < 50);
    CHECK(!seen[static_cast<size_t>(i)]);
    seen[static_cast<size_t>(i)] = true;
  }
  // k == n is a permutation
  auto perm = r.sample_without_replacement(8, 8);
  std::vector<bool> seen2(8, false);
  for (auto i : perm) seen2[static_cast<size_t>(i)] = true;
  for (bool b : seen2) CHECK(b);
}

TEST_CASE("elementwise and reduction values") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2, 2}, {10, 20, 30, 40});
  auto c = add(mul(a, b), a);
  CHECK(c.values() == std::vector<double>{11, 42, 93, 164});
  CHECK(sum(c).item() == doctest::Approx(310));
  CHECK(mean(a).item() == doctest::Approx(2.5));
  CHECK(scale(a, 2.0).values() == std::vector<double>{2, 4, 6, 8});
  CHECK(sub(b, a).values() == std::vector<double>{9, 18, 27, 36});
}

TEST_CASE("shape ops round-trip values") {
  auto a = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto t = transpose_last(a);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.values() == std::vector<double>{1, 4, 2, 5, 3, 6});
  auto s = slice(a, 1, 1, 2);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.values() == std::vector<double>{2, 3, 5, 6});
  auto cat = concat(std::vector<Tensor<double>>{a, a}, 0);
  CHECK(cat.shape() == Shape{4, 3});
  auto cat1 = concat(std::vector<Tensor<double>>{a, s}, 1);
  CHECK(cat1.shape() == Shape{2, 5});
  CHECK(cat1.values() == std::vector<double>{1, 2, 3, 2, 3, 4, 5, 6, 5, 6});
  auto g = gather_rows(a, {1, 0, 1});
  CHECK(g.shape() == Shape{3, 3});
  CHECK(g.values() == std::vector<double>{4, 5, 6, 1, 2, 3, 4, 5, 6});
  CHECK_THROWS(reshape(a, {4, 2}));
  CHECK_THROWS(slice(a, 1, 2, 2));
}

TEST_CASE("matmul and bmm against hand results") {
  auto a = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor<double>::from({3, 2}, {7, 8, 9, 10, 11, 12});
  auto c = matmul(a, b);
  CHECK(c.values() == std::vector<double>{58, 64, 139, 154});
  // batched: two stacked copies, shared left operand
  auto bb = Tensor<double>::from({2, 3, 2}, {7, 8, 9, 10, 11, 12, 1, 0, 0, 1, 1, 1});
  auto cb = bmm(a, bb);
  CHECK(cb.shape() == Shape{2, 2, 2});
  CHECK(cb.values()[0] == doctest::Approx(58));
  CHECK(cb.values()[4] == doctest::Approx(1 + 3));  // [1 2 3] . [1 0 1]
  CHECK_THROWS(matmul(a, a));
}

TEST_CASE("masked_softmax: exact zeros, renormalization, full-mask error") {
  auto x = Tensor<double>::from({2, 3}, {1, 2, 3, 0, 0, 0});
  auto y = masked_softmax(x);
  for (int r = 0; r < 2; ++r) {
    double s = 0;
    for (int j = 0; j < 3; ++j) s += y.values()[static_cast<size_t>(r * 3 + j)];
    CHECK(s == doctest::Approx(1.0));
  }
  auto mask = std::make_shared<const std::vector<std::uint8_t>>(
      std::vector<std::uint8_t>{1, 0, 1, 1, 1, 1});
  auto ym = masked_softmax(x, mask, 2);
  CHECK(ym.values()[1] == 0.0);  // exactly zero, not merely small
  const double e1 = std::exp(1.0), e3 = std::exp(3.0);
  CHECK(ym.values()[0] == doctest::Approx(e1 / (e1 + e3)));
  CHECK(ym.values()[2] == doctest::Approx(e3 / (e1 + e3)));
  CHECK(ym.values()[3] == doctest::Approx(1.0 / 3));
  auto dead = std::make_shared<const std::vector<std::uint8_t>>(
      std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1});
  CHECK_THROWS_AS(masked_softmax(x, dead, 2), std::domain_error);
}

TEST_CASE("rmsnorm matches direct formula") {
  auto x = Tensor<double>::from({1, 4}, {1, 2, 3, 4});
  auto y = rmsnorm(x);
  const double rms = std::sqrt((1 + 4 + 9 + 16) / 4.0 + 1e-6);
  for (int j = 0; j < 4; ++j)
    CHECK(y.values()[static_cast<size_t>(j)] == doctest::Approx((j + 1) / rms));
}

TEST_CASE("pairwise_periodic_dist wraps around the torus") {
  auto a = Tensor<double>::from({2, 1}, {0.05, 0.4});
  auto b = Tensor<double>::from({2, 1}, {0.95, 0.5});
  auto d = pairwise_periodic_dist(a, b, {1.0});
  CHECK(d.values()[0] == doctest::Approx(0.1));   // wraps: 0.05 vs 0.95
  CHECK(d.values()[1] == doctest::Approx(0.45));
  CHECK(d.values()[2] == doctest::Approx(0.45));  // 0.4 vs 0.95: shorter way wraps
  CHECK(d.values()[3] == doctest::Approx(0.1));
  // 2-D case: per-axis wrap
  auto p = Tensor<double>::from({1, 2}, {0.1, 0.9});
  auto q = Tensor<double>::from({1, 2}, {0.9, 0.1});
  auto d2 = pairwise_periodic_dist(p, q, {1.0, 1.0});
  CHECK(d2.values()[0] == doctest::Approx(std::sqrt(0.04 + 0.04)));
}

TEST_CASE("NoGrad suppresses graph construction") {
  auto a = Tensor<double>::from({2}, {1, 2}, true);
  {
    NoGrad off;
    auto y = mul(a, a);
    CHECK(!y.requires_grad());
  }
  auto y = mul(a, a);
  CHECK(y.requires_grad());
}

TEST_CASE("backward accumulates through a reused node") {
  auto a = Tensor<double>::from({1}, {3.0}, true);
  auto y = add(mul(a, a), a);  // y = a^2 + a, dy/da = 2a + 1 = 7
  y.backward();
  CHECK(a.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("gradient check: elementwise chains") {
  ParamStore<double> s;
  RngStream r(3);
  auto a = s.add("a", Tensor<double>::randn({3, 4}, r, 0.5));
  auto b = s.add("b", Tensor<double>::randn({3, 4}, r, 0.5));
  auto f = [&]() {
    auto h = mul(silu(a), sigmoid(b));
    h = add(h, enma::exp(scale(b, 0.3)));
    h = add(h, enma::sin(a));
    h = add(h, enma::cos(b));
    h = add(h, square(sub(a, b)));
    return mean(h);
  };
  CHECK(grad_check(s, f) < 1e-4);
}

TEST_CASE("gradient check: log and sqrt on positive inputs") {
  ParamStore<double> s;
  auto a = leaf(s, "a", {4}, {0.5, 1.5, 2.5, 3.5});
  auto f = [&]() { return mean(add(enma::log(a), enma::sqrt(a))); };
  CHECK(grad_check(s, f) < 1e-4);
}

TEST_CASE("gradient check: matmul, bmm, broadcast helpers") {
  ParamStore<double> s;
  RngStream r(5);
  auto a = s.add("a", Tensor<double>::randn({3, 4}, r, 0.7));
  auto b = s.add("b", Tensor<double>::randn({4, 2}, r, 0.7));
  auto v = s.add("v", Tensor<double>::randn({2}, r, 0.7));
  auto m = s.add("m", Tensor<double>::randn({3}, r, 0.7));
  auto bb = s.add("bb", Tensor<double>::randn({2, 4, 2}, r, 0.7));
  auto f = [&]() {
    auto h = matmul(a, b);                 // [3,2]
    h = add_rows(h, v);
    h = mul_rows(h, v);
    h = mul_cols(h, m);
    auto g = bmm(a, bb);                   // [2,3,2]
    g = add_bcast2(g, h);
    return mean(g);
  };
  CHECK(grad_check(s, f) < 1e-4);
}

TEST_CASE("gradient check: shape ops and gather") {
  ParamStore<double> s;
  RngStream r(9);
  auto a = s.add("a", Tensor<double>::randn({4, 3}, r, 1.0));
  auto f = [&]() {
    auto t = transpose_last(a);                       // [3,4]
    auto sl = slice(t, 1, 1, 2);                      // [3,2]
    auto cc = concat(std::vector<Tensor<double>>{sl, sl}, 0);  // [6,2]
    auto g = gather_rows(cc, {0, 5, 2, 2});
    return mean(square(reshape(g, {8})));
  };
  CHECK(grad_check(s, f) < 1e-4);
}

TEST_CASE("gradient check: softmax, masked softmax, rmsnorm") {
  ParamStore<double> s;
  RngStream r(13);
  auto a = s.add("a", Tensor<double>::randn({2, 3, 4}, r, 1.0));
  auto mask = std::make_shared<const std::vector<std::uint8_t>>(
      std::vector<std::uint8_t>{1, 1, 0, 0, 1, 1, 1, 0, 1, 1, 1, 1});
  auto f = [&]() {
    auto h = masked_softmax(a, mask, 3);
    h = add(h, masked_softmax(a));
    h = add(h, rmsnorm(a));
    return mean(mul(h, h));
  };
  CHECK(grad_check(s, f) < 1e-4);
}

TEST_CASE("gradient check: periodic distance (away from wrap boundary)") {
  ParamStore<double> s;
  auto a = leaf(s, "a", {2, 2}, {0.1, 0.2, 0.6, 0.7});
  // no coordinate sits exactly midway between the two query points, so no
  // gradient entry cancels to zero (where finite differences lose precision)
  auto b = leaf(s, "b", {3, 2}, {0.3, 0.9, 0.5, 0.42, 0.85, 0.15});
  auto f = [&]() { return mean(square(pairwise_periodic_dist(a, b, {1.0, 1.0}))); };
  CHECK(grad_check(s, f) < 1e-4);
}
