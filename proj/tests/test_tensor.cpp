#include <cmath>

#include "aligndet/rten.hpp"
#include "aligndet/tensor.hpp"
#include "doctest.h"

using namespace aligndet;

namespace {

// Independent triple-loop reference for gemm.
Tensor naive_gemm(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += a.at2(i, l) * b.at2(l, j);
      c.at2(i, j) = acc;
    }
  return c;
}

Tensor identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at2(i, i) = 1.0;
  return t;
}

}  // namespace

TEST_CASE("gemm hand example") {
  const Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from_values({2, 2}, {5, 6, 7, 8});
  const Tensor c = gemm(a, b);
  CHECK(c.at2(0, 0) == 19.0);
  CHECK(c.at2(0, 1) == 22.0);
  CHECK(c.at2(1, 0) == 43.0);
  CHECK(c.at2(1, 1) == 50.0);
}

TEST_CASE("gemm identity and annihilator") {
  Rng rng(11);
  Tensor b({3, 5});
  rng.fill_uniform(b, -1.0, 1.0);
  const Tensor ib = gemm(identity(3), b);
  for (std::size_t i = 0; i < b.numel(); ++i) CHECK(ib[i] == b[i]);

  Tensor a({4, 3});
  rng.fill_uniform(a, -1.0, 1.0);
  const Tensor ai = gemm(a, identity(3));
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(ai[i] == a[i]);

  const Tensor z = gemm(Tensor({2, 3}), b);
  for (std::size_t i = 0; i < z.numel(); ++i) CHECK(z[i] == 0.0);
}

TEST_CASE("gemm matches naive oracle on random cases") {
  Rng rng(42);
  for (int t = 0; t < 50; ++t) {
    const std::size_t m = std::size_t(rng.uniform_int(1, 16));
    const std::size_t k = std::size_t(rng.uniform_int(1, 16));
    const std::size_t n = std::size_t(rng.uniform_int(1, 16));
    Tensor a({m, k}), b({k, n});
    rng.fill_uniform(a, -2.0, 2.0);
    rng.fill_uniform(b, -2.0, 2.0);
    const Tensor got = gemm(a, b);
    const Tensor want = naive_gemm(a, b);
    for (std::size_t i = 0; i < got.numel(); ++i) {
      const double denom = std::max(1.0, std::abs(want[i]));
      CHECK(std::abs(got[i] - want[i]) / denom <= 1e-12);
    }
  }
}

TEST_CASE("gemm rejects dimension mismatch") {
  CHECK_THROWS_AS(gemm(Tensor({2, 3}), Tensor({4, 2})), std::invalid_argument);
}

TEST_CASE("index round-trip on random shapes") {
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    const std::size_t rank = std::size_t(rng.uniform_int(1, 4));
    std::vector<std::size_t> shape;
    for (std::size_t i = 0; i < rank; ++i)
      shape.push_back(std::size_t(rng.uniform_int(1, 5)));
    const Tensor t0(shape);
    for (std::size_t lin = 0; lin < t0.numel(); ++lin) {
      const auto coord = t0.coordinate(lin);
      CHECK(t0.linear_index(coord) == lin);
    }
  }
}

TEST_CASE("elementwise basics") {
  const Tensor x = Tensor::from_values({3}, {-1, 0, 2});
  const Tensor r = elementwise(UnaryOp::kRelu, x);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 2.0);

  const Tensor s = elementwise(UnaryOp::kSigmoid, Tensor({1}));
  CHECK(s[0] == doctest::Approx(0.5));

  const Tensor a = Tensor::from_values({2}, {1, 2});
  const Tensor b = Tensor::from_values({2}, {3, 4});
  const Tensor sum = elementwise(BinaryOp::kAdd, a, b);
  CHECK(sum[0] == 4.0);
  CHECK(sum[1] == 6.0);

  CHECK_THROWS_AS(elementwise(BinaryOp::kAdd, a, Tensor({3})),
                  std::invalid_argument);
  CHECK_THROWS_AS(elementwise(UnaryOp::kLog, Tensor::from_values({1}, {-1.0})),
                  std::domain_error);
}

TEST_CASE("reduce semantics") {
  CHECK(reduce_all(Tensor::from_values({3}, {1, 2, 3}), ReduceOp::kSum) == 6.0);
  const Tensor m = Tensor::from_values({2, 2}, {1, 5, 3, 2});
  const Tensor mx = reduce_axis(m, ReduceOp::kMax, 1);
  CHECK(mx[0] == 5.0);
  CHECK(mx[1] == 3.0);
  CHECK_THROWS_AS(reduce_axis(m, ReduceOp::kSum, 2), std::invalid_argument);
}

TEST_CASE("seeded uniform mean sanity") {
  Rng rng(1234);
  Tensor t({100});
  rng.fill_uniform(t, 0.0, 1.0);
  const double mean = reduce_all(t, ReduceOp::kMean);
  CHECK(mean > 0.3);
  CHECK(mean < 0.7);
}

TEST_CASE("rng determinism") {
  Rng a(987654321), b(987654321);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(987654321), d(987654322);
  bool any_diff = false;
  for (int i = 0; i < 10; ++i) any_diff |= (c.next_u64() != d.next_u64());
  CHECK(any_diff);
}

TEST_CASE("rten round-trip both dtypes") {
  Rng rng(5);
  Tensor t({2, 3, 4});
  rng.fill_uniform(t, -10.0, 10.0);
  save_rten("rt_f64.rten", t);
  const Tensor back = load_rten("rt_f64.rten");
  REQUIRE(back.shape() == t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) CHECK(back[i] == t[i]);

  TensorF tf({5});
  for (std::size_t i = 0; i < 5; ++i) tf[i] = float(i) * 1.5f;
  save_rten("rt_f32.rten", tf);
  const Tensor backf = load_rten("rt_f32.rten");
  for (std::size_t i = 0; i < 5; ++i) CHECK(backf[i] == double(tf[i]));
}
