#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gradcheck.hpp"
#include "nre/error.hpp"
#include "nre/optim.hpp"
#include "nre/tensor.hpp"
#include "oracles.hpp"
#include "suites.hpp"

using namespace nre;
using nre::testing::random_tensor;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an nre::Error");
  return ErrorCode::kContract;
}

}  // namespace

TEST_CASE("matmul examples") {
  Rng rng(1);
  const Tensor a = random_tensor({3, 3}, rng);
  const Tensor eye = Tensor::from_vector({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(vals(matmul(a, eye)) == vals(a));
  const Tensor z = matmul(Tensor::zeros({2, 4}), random_tensor({4, 5}, rng));
  CHECK(z.shape() == Shape{2, 5});
  for (double v : z.data()) CHECK(v == 0.0);
  const Tensor c = matmul(Tensor::from_vector({2, 2}, {1, 2, 3, 4}), Tensor::from_vector({2, 2}, {5, 6, 7, 8}));
  CHECK(vals(c) == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul agrees with a triple loop") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const std::size_t m = 1 + rng.below(5), k = 1 + rng.below(5), n = 1 + rng.below(5);
    const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    const Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t l = 0; l < k; ++l) s += a.at(i, l) * b.at(l, j);
        CHECK(c.at(i, j) == doctest::Approx(s).epsilon(1e-12));
      }
  }
}

TEST_CASE("matmul rejects mismatched shapes with both shapes in the message") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kDimension);
    const std::string msg = e.what();
    CHECK(msg.find(shape_string({2, 3})) != std::string::npos);
    CHECK(msg.find(shape_string({4, 2})) != std::string::npos);
  }
}

TEST_CASE("softmax_rows examples and properties") {
  const Tensor u = softmax_rows(Tensor::zeros({1, 4}));
  for (double v : u.data()) CHECK(v == doctest::Approx(0.25));
  const Tensor p = softmax_rows(Tensor::from_vector({1, 2}, {0.0, std::log(3.0)}));
  CHECK(p.at(0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p.at(1) == doctest::Approx(0.75).epsilon(1e-12));

  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t m = 1 + rng.below(4), n = 1 + rng.below(6);
    const Tensor x = random_tensor({m, n}, rng, -30.0, 30.0);
    const Tensor s = softmax_rows(x);
    const Tensor shifted = softmax_rows(add(x, Tensor::full({m, n}, rng.uniform(-50.0, 50.0))));
    for (std::size_t i = 0; i < m; ++i) {
      double row = 0;
      for (std::size_t j = 0; j < n; ++j) {
        CHECK(s.at(i, j) > 0.0);
        CHECK(s.at(i, j) <= 1.0);
        CHECK(std::abs(s.at(i, j) - shifted.at(i, j)) < 1e-12);
        row += s.at(i, j);
      }
      CHECK(std::abs(row - 1.0) < 1e-9);
    }
  }
  const Tensor big = softmax_rows(Tensor::from_vector({1, 2}, {1e300, -1e300}));
  CHECK(big.at(0) == 1.0);
}

TEST_CASE("cross_entropy examples") {
  const std::size_t zero[] = {0};
  CHECK(cross_entropy(Tensor::zeros({1, 5}), zero).item() == doctest::Approx(std::log(5.0)));
  CHECK(cross_entropy(Tensor::from_vector({1, 3}, {50, 0, 0}), zero).item() < 1e-9);
  CHECK(cross_entropy(Tensor::from_vector({1, 2}, {0, std::log(3.0)}), zero).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
  const std::size_t bad[] = {3};
  CHECK(code_of([&] { cross_entropy(Tensor::zeros({1, 3}), bad); }) == ErrorCode::kIndex);
}

TEST_CASE("cross_entropy gradient is (softmax - onehot) / m") {
  Rng rng(4);
  const Tensor x = random_tensor({3, 4}, rng);
  const std::size_t labels[] = {1, 0, 3};
  cross_entropy(x, labels).backward();
  const Tensor s = softmax_rows(x.detach());
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(x.grad()[i * 4 + j] == doctest::Approx((s.at(i, j) - (labels[i] == j)) / 3.0).epsilon(1e-12));
}

TEST_CASE("piecewise_max_pool examples") {
  const int s1[] = {1, 2, 3};
  CHECK(vals(piecewise_max_pool(Tensor::from_vector({3, 1}, {5, 2, 9}), s1)) == std::vector<double>{5, 2, 9});
  const int s2[] = {1, 1, 2, 3};
  CHECK(vals(piecewise_max_pool(Tensor::from_vector({4, 2}, {1, 8, 3, 2, 7, 0, 2, 9}), s2)) ==
        std::vector<double>{3, 8, 7, 0, 2, 9});
  const int s3[] = {1, 1, 3, 3};
  const auto out = vals(piecewise_max_pool(Tensor::from_vector({4, 2}, {1, 8, 3, 2, 7, 0, 2, 9}), s3));
  CHECK(out[2] == kPoolFloor);
  CHECK(out[3] == kPoolFloor);
  const int pad[] = {0, 0};
  CHECK(code_of([&] { piecewise_max_pool(Tensor::zeros({2, 1}), pad); }) == ErrorCode::kDegenerateInput);
}

TEST_CASE("piecewise_max_pool routes gradient to the argmax only") {
  const Tensor h = Tensor::from_vector({4, 1}, {1, 3, 2, 0}, true);
  const int segs[] = {1, 1, 2, 0};
  sum(piecewise_max_pool(h, segs)).backward();
  CHECK(vals(Tensor::from_vector({4}, {h.grad().begin(), h.grad().end()})) == std::vector<double>{0, 1, 1, 0});
}

TEST_CASE("backward examples") {
  Rng rng(5);
  const Tensor w = random_tensor({2, 3}, rng);
  sum(w).backward();
  for (double g : w.grad()) CHECK(g == 1.0);
  const Tensor v = random_tensor({3, 2}, rng);
  sum(multiply(v, v)).backward();
  for (std::size_t i = 0; i < v.numel(); ++i) CHECK(v.grad()[i] == doctest::Approx(2 * v.at(i)));
  CHECK(code_of([&] { v.backward(); }) == ErrorCode::kContract);
}

TEST_CASE("leaf gradients accumulate across backward calls") {
  Tensor w = Tensor::from_vector({2}, {1.0, -2.0}, true);
  const Tensor loss = sum(multiply(w, w));
  loss.backward();
  loss.backward();
  CHECK(w.grad()[0] == doctest::Approx(4.0));
  CHECK(w.grad()[1] == doctest::Approx(-8.0));
  w.zero_grad();
  loss.backward();
  CHECK(w.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("tape is topologically ordered with each node once") {
  Rng rng(6);
  const Tensor a = random_tensor({2, 2}, rng);
  const Tensor b = tanh(a);
  const Tensor c = add(matmul(b, b), a);
  const auto tape = record_tape(sum(c));
  std::set<std::uint64_t> seen;
  for (const auto& e : tape) {
    for (auto p : e.parents) CHECK(seen.count(p) == 1);
    CHECK(seen.insert(e.id).second);
  }
  CHECK(seen.count(a.id()) == 1);
}

TEST_CASE("no-grad guard records nothing") {
  const Tensor w = Tensor::from_vector({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  const Tensor y = multiply(w, w);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("structural op examples") {
  Rng rng(7);
  const Tensor x = random_tensor({3, 4}, rng);
  CHECK(vals(dropout(x, 0.0, rng, true)) == vals(x));
  CHECK(vals(dropout(x, 0.5, rng, false)) == vals(x));
  const Tensor d = dropout(x, 0.5, rng, true);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK((d.at(i) == 0.0 || d.at(i) == doctest::Approx(2 * x.at(i))));

  const Tensor table = random_tensor({4, 3}, rng);
  const std::size_t ids[] = {2, 2};
  const Tensor g = embedding_gather(table, ids);
  sum(multiply(g, Tensor::from_vector({2, 3}, {1, 2, 3, 1, 2, 3}))).backward();
  CHECK(vals(Tensor::from_vector({12}, {table.grad().begin(), table.grad().end()})) ==
        std::vector<double>{0, 0, 0, 0, 0, 0, 2, 4, 6, 0, 0, 0});
  const std::size_t bad[] = {4};
  CHECK(code_of([&] { embedding_gather(table, bad); }) == ErrorCode::kIndex);
}

TEST_CASE("conv1d_window matches explicit sliding windows") {
  Rng rng(8);
  const Tensor x = random_tensor({7, 4}, rng);
  const Tensor f = random_tensor({12, 5}, rng);
  const Tensor b = random_tensor({5}, rng);
  const Tensor y = conv1d_window(x, f, b, 3, 7);
  REQUIRE(y.shape() == Shape{5, 5});
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t h = 0; h < 5; ++h) {
      double s = b.at(h);
      for (std::size_t w = 0; w < 3; ++w)
        for (std::size_t c = 0; c < 4; ++c) s += x.at(t + w, c) * f.at(w * 4 + c, h);
      CHECK(y.at(t, h) == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("max_pool_rows and l2_norm values") {
  const Tensor x = Tensor::from_vector({2, 3}, {1, -5, 2, 0, 4, -1});
  CHECK(vals(max_pool_rows(x)) == std::vector<double>{1, 4, 2});
  CHECK(l2_norm(Tensor::from_vector({2}, {3, 4})).item() == doctest::Approx(5.0));
}

TEST_CASE("concat and slices round trip") {
  Rng rng(9);
  const Tensor a = random_tensor({2, 3}, rng), b = random_tensor({1, 3}, rng);
  const Tensor rows = concat({a, b}, 0);
  CHECK(vals(slice_rows(rows, 0, 2)) == vals(a));
  CHECK(vals(slice_rows(rows, 2, 3)) == vals(b));
  const Tensor c = random_tensor({2, 2}, rng);
  const Tensor cols = concat({a, c}, 1);
  CHECK(vals(slice_cols(cols, 3, 5)) == vals(c));
  CHECK(code_of([&] { concat({a, c}, 0); }) == ErrorCode::kDimension);
}

TEST_CASE("forward passes are bit-identical for a fixed seed") {
  auto run = [] {
    Rng rng(10);
    const Tensor x = random_tensor({4, 6}, rng);
    const Tensor w = random_tensor({6, 3}, rng);
    return vals(softmax_rows(tanh(dropout(matmul(x, w), 0.3, rng, true))));
  };
  CHECK(run() == run());
}

TEST_CASE("every differentiable op passes finite differences") {
  for (const auto& check : nre::testing::gradient_checks(20)) {
    const auto out = check.run();
    INFO(out.name << ": " << out.detail);
    CHECK(out.cases == 20);
    CHECK(out.worst < 1e-4);
  }
}

TEST_CASE("piecewise_max_pool matches the per-segment scan on random inputs") {
  for (const auto& check : nre::testing::oracle_checks(200)) {
    if (check.name != "piecewise_max_pool") continue;
    const auto out = check.run();
    INFO(out.detail);
    CHECK(out.worst == 0.0);
  }
}

TEST_CASE("adam: zero gradient leaves parameters and counts the step") {
  std::vector<double> p{1.0, -2.0};
  const std::vector<double> g{0.0, 0.0};
  AdamState s;
  adam_step(p, g, s);
  CHECK(p == std::vector<double>{1.0, -2.0});
  CHECK(s.t == 1);
}

TEST_CASE("adam: first step moves by lr in the gradient's sign") {
  std::vector<double> p{0.5};
  const std::vector<double> g{-3.0};
  AdamState s;
  s.lr = 0.01;
  adam_step(p, g, s);
  CHECK(p[0] - 0.5 == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("adam: two steps follow a scalar reference") {
  std::vector<double> p{1.0};
  const std::vector<double> g{1.0};
  AdamState s;
  s.lr = 0.1;
  double ref = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    adam_step(p, g, s);
    m = 0.9 * m + 0.1 * 1.0;
    v = 0.999 * v + 0.001 * 1.0;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    ref -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    CHECK(p[0] == doctest::Approx(ref).epsilon(1e-12));
    CHECK(s.t == static_cast<std::uint64_t>(t));
  }
  std::vector<double> wrong{1.0, 2.0};
  const std::vector<double> wg{1.0, 1.0};
  CHECK(code_of([&] { adam_step(wrong, wg, s); }) == ErrorCode::kDimension);
}

TEST_CASE("sgd folds weight decay into the gradient") {
  std::vector<double> p{2.0};
  const std::vector<double> g{0.5};
  sgd_step(p, g, 0.1, 0.01);
  CHECK(p[0] == doctest::Approx(2.0 - 0.1 * (0.5 + 0.01 * 2.0)));
}
