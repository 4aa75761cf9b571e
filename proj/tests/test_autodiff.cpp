#include <doctest.h>

#include <cmath>
#include <limits>

#include "spiboter/autodiff.hpp"
#include "support.hpp"

using namespace spiboter::ad;
using testing::probe;
using testing::random_array;

namespace {

constexpr double kEps = 1e-5;
constexpr double kTol = 1e-6;

double check_unary(const std::function<Value(const Value&)>& f, const Shape& shape, std::uint64_t seed,
                   double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  const Array x = random_array(shape, rng, lo, hi);
  return grad_check([&](std::span<const Value> v) { return probe(f(v[0]), seed + 1); }, {x}, kEps);
}

double check_binary(const std::function<Value(const Value&, const Value&)>& f, const Shape& sa, const Shape& sb,
                    std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  const Array a = random_array(sa, rng, lo, hi);
  const Array b = random_array(sb, rng, lo, hi);
  return grad_check([&](std::span<const Value> v) { return probe(f(v[0], v[1]), seed + 1); }, {a, b}, kEps);
}

}  // namespace

TEST_CASE("array construction checks data length") {
  CHECK_THROWS_AS(Array({2, 3}, std::vector<double>(5)), ShapeError);
  const Array a = Array::matrix(2, 2, {1, 2, 3, 4});
  CHECK(a.at(1, 0) == 3.0);
  CHECK_THROWS_AS(a.item(), ShapeError);
  CHECK(Array::scalar(2.5).item() == 2.5);
}

TEST_CASE("non-finite leaves and results are rejected") {
  CHECK_THROWS_AS(constant(std::numeric_limits<double>::quiet_NaN()), NonFiniteError);
  CHECK_THROWS_AS(log(constant(0.0)), NonFiniteError);
  CHECK_THROWS_AS(div(constant(1.0), constant(0.0)), NonFiniteError);
  CHECK_THROWS_AS(exp(constant(1000.0)), NonFiniteError);
}

TEST_CASE("broadcasting follows trailing-dimension rules") {
  const Value a = constant(Array({2, 3}, {1, 2, 3, 4, 5, 6}));
  const Value row = constant(Array::vector({10, 20, 30}));
  const Value col = constant(Array({2, 1}, {100, 200}));
  CHECK((a + row).value() == Array({2, 3}, {11, 22, 33, 14, 25, 36}));
  CHECK((a + col).value() == Array({2, 3}, {101, 102, 103, 204, 205, 206}));
  CHECK((a * constant(2.0)).value() == Array({2, 3}, {2, 4, 6, 8, 10, 12}));
  CHECK_THROWS_AS(a + constant(Array::vector({1, 2})), ShapeError);
}

TEST_CASE("matmul matches a loop product") {
  std::mt19937_64 rng(3);
  const Array a = random_array({2, 3, 4}, rng);
  const Array b = random_array({4, 5}, rng);
  const Array c = matmul(constant(a), constant(b)).value();
  REQUIRE(c.shape() == Shape{2, 3, 5});
  double worst = 0.0;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k) s += a[(n * 3 + i) * 4 + k] * b[k * 5 + j];
        worst = std::max(worst, std::abs(s - c[(n * 3 + i) * 5 + j]));
      }
  CHECK(worst < 1e-12);
  CHECK_THROWS_AS(matmul(constant(a), constant(random_array({3, 5}, rng))), ShapeError);
}

TEST_CASE("permute, transpose, reshape, concat move entries as indexed") {
  const Array a({2, 3, 4}, [] {
    std::vector<double> v(24);
    for (std::size_t i = 0; i < 24; ++i) v[i] = static_cast<double>(i);
    return v;
  }());
  const Array p = permute(constant(a), {2, 0, 1}).value();
  REQUIRE(p.shape() == Shape{4, 2, 3});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) CHECK(p[(k * 2 + i) * 3 + j] == a[(i * 3 + j) * 4 + k]);
  const Array t = transpose(constant(a)).value();
  CHECK(t.shape() == Shape{2, 4, 3});
  CHECK(t[(1 * 4 + 2) * 3 + 1] == a[(1 * 3 + 1) * 4 + 2]);
  CHECK(reshape(constant(a), {6, 4}).value().data()[13] == 13.0);
  CHECK_THROWS_AS(reshape(constant(a), {5, 5}), ShapeError);
  const Array c = concat({constant(Array::matrix(1, 2, {1, 2})), constant(Array::matrix(1, 2, {3, 4}))}, 0).value();
  CHECK(c == Array::matrix(2, 2, {1, 2, 3, 4}));
  const Array d = concat({constant(Array::matrix(2, 1, {1, 2})), constant(Array::matrix(2, 1, {3, 4}))}, 1).value();
  CHECK(d == Array::matrix(2, 2, {1, 3, 2, 4}));
}

TEST_CASE("reductions") {
  const Value a = constant(Array({2, 3}, {1, 5, 3, 4, 2, 6}));
  CHECK(sum(a).item() == 21.0);
  CHECK(mean(a).item() == 3.5);
  CHECK(max(a).item() == 6.0);
  CHECK(sum(a, 0).value() == Array::vector({5, 7, 9}));
  CHECK(mean(a, 1).value() == Array::vector({3, 4}));
  CHECK(max(a, 1).value() == Array::vector({5, 6}));
  CHECK(sq_norm(a).value() == Array::vector({35, 56}));
}

TEST_CASE("relu subgradient at zero is zero") {
  const Value x = parameter(Array::vector({-1.0, 0.0, 2.0}));
  backward(sum(relu(x)));
  CHECK(x.grad() == Array::vector({0.0, 0.0, 1.0}));
}

TEST_CASE("max sends its gradient to the first maximal entry") {
  const Value x = parameter(Array::vector({1.0, 3.0, 3.0}));
  backward(max(x));
  CHECK(x.grad() == Array::vector({0.0, 1.0, 0.0}));
}

TEST_CASE("backward needs a scalar root and accumulates shared subgraphs") {
  const Value x = parameter(Array::vector({1.0, 2.0}));
  CHECK_THROWS_AS(backward(x * x), ShapeError);
  const Value y = x * x;
  backward(sum(y + y));
  CHECK(x.grad() == Array::vector({4.0, 8.0}));
  // A second pass resets rather than accumulates.
  backward(sum(y + y));
  CHECK(x.grad() == Array::vector({4.0, 8.0}));
}

TEST_CASE("constants never receive gradients") {
  const Value c = constant(Array::vector({1.0, 2.0}));
  const Value p = parameter(Array::vector({3.0, 4.0}));
  backward(sum(c * p));
  CHECK(c.grad() == Array::vector({0.0, 0.0}));
  CHECK(p.grad() == Array::vector({1.0, 2.0}));
}

TEST_CASE("masked softmax") {
  const Array mask = Array::matrix(2, 3, {0, 1, 0, 1, 1, 0});
  std::mt19937_64 rng(11);
  const Array scores = random_array({4, 2, 3}, rng, -5, 5);
  const Array w = softmax_masked(constant(scores), mask).value();
  for (std::size_t r = 0; r < 8; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = w[r * 3 + c];
      if (mask[(r % 2) * 3 + c] == 1.0) CHECK(v == 0.0);
      total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
  }
  CHECK(w[(1 * 2 + 1) * 3 + 2] == 1.0);
  CHECK_THROWS_AS(softmax_masked(constant(scores), Array::matrix(2, 3, {1, 1, 1, 0, 0, 0})), ShapeError);
  CHECK_THROWS_AS(softmax_masked(constant(scores), Array::matrix(3, 2, {0, 0, 0, 0, 0, 0})), ShapeError);
}

TEST_CASE("layer norm standardises the last axis") {
  std::mt19937_64 rng(5);
  const Array x = random_array({3, 7}, rng, -4, 9);
  const Array y = layer_norm(constant(x), 0.0).value();
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 7; ++c) m += y[r * 7 + c] / 7.0;
    for (std::size_t c = 0; c < 7; ++c) v += (y[r * 7 + c] - m) * (y[r * 7 + c] - m) / 7.0;
    CHECK(std::abs(m) < 1e-12);
    CHECK(std::abs(v - 1.0) < 1e-9);
  }
  // With the default epsilon the variance shrinks to var / (var + eps).
  const Array z = layer_norm(constant(x)).value();
  double m = 0.0, v = 0.0, raw_m = 0.0, raw_v = 0.0;
  for (std::size_t c = 0; c < 7; ++c) raw_m += x[c] / 7.0;
  for (std::size_t c = 0; c < 7; ++c) raw_v += (x[c] - raw_m) * (x[c] - raw_m) / 7.0;
  for (std::size_t c = 0; c < 7; ++c) m += z[c] / 7.0;
  for (std::size_t c = 0; c < 7; ++c) v += (z[c] - m) * (z[c] - m) / 7.0;
  CHECK(std::abs(v - raw_v / (raw_v + 1e-5)) < 1e-12);
}

TEST_CASE("pairwise squared distances match a loop") {
  std::mt19937_64 rng(8);
  const Array p = random_array({5, 3}, rng, -10, 10);
  const Array d = pairwise_sq_dist(constant(p)).value();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c) s += (p.at(i, c) - p.at(j, c)) * (p.at(i, c) - p.at(j, c));
      CHECK(std::abs(d.at(i, j) - s) < 1e-10);
    }
  for (std::size_t i = 0; i < 5; ++i) CHECK(d.at(i, i) == 0.0);
}

TEST_CASE("gradient checks for every primitive over 20 seeds") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    CAPTURE(seed);
    CHECK(check_binary([](auto& a, auto& b) { return a + b; }, {3, 4}, {4}, seed) < kTol);
    CHECK(check_binary([](auto& a, auto& b) { return a - b; }, {3, 1}, {2, 3, 4}, seed) < kTol);
    CHECK(check_binary([](auto& a, auto& b) { return a * b; }, {2, 3, 4}, {3, 4}, seed) < kTol);
    CHECK(check_binary([](auto& a, auto& b) { return a / b; }, {3, 4}, {3, 1}, seed, 0.5, 2.0) < kTol);
    CHECK(check_binary([](auto& a, auto& b) { return matmul(a, b); }, {2, 3, 4}, {4, 5}, seed) < kTol);
    CHECK(check_binary([](auto& a, auto& b) { return matmul(a, b); }, {2, 3, 4}, {2, 4, 2}, seed) < kTol);
    CHECK(check_binary([](auto& a, auto& b) { return concat({a, b}, 1); }, {2, 3}, {2, 2}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return scale(a, -2.5); }, {5}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return add_scalar(a, 0.7); }, {5}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return transpose(a); }, {2, 3, 4}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return permute(a, {1, 2, 0}); }, {2, 3, 4}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return reshape(a, {4, 6}); }, {2, 3, 4}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return relu(a); }, {4, 5}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return exp(a); }, {4, 5}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return log(a); }, {4, 5}, seed, 0.2, 3.0) < kTol);
    CHECK(check_unary([](auto& a) { return sqrt(a); }, {4, 5}, seed, 0.2, 3.0) < kTol);
    CHECK(check_unary([](auto& a) { return sin(a); }, {4, 5}, seed, -3.0, 3.0) < kTol);
    CHECK(check_unary([](auto& a) { return cos(a); }, {4, 5}, seed, -3.0, 3.0) < kTol);
    CHECK(check_unary([](auto& a) { return sum(a, 1); }, {3, 4}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return mean(a); }, {3, 4}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return mean(a, 0); }, {3, 4}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return max(a); }, {3, 4}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return max(a, 1); }, {3, 4}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return sq_norm(a); }, {3, 4}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return layer_norm(a); }, {3, 8}, seed) < kTol);
    CHECK(check_unary([](auto& a) { return pairwise_sq_dist(a); }, {5, 3}, seed) < kTol);
    const Array mask = Array::matrix(3, 3, {0, 1, 0, 0, 0, 0, 1, 1, 0});
    CHECK(check_unary([&](auto& a) { return softmax_masked(a, mask); }, {2, 3, 3}, seed, -2, 2) < kTol);
  }
}

TEST_CASE("grad_check flags a wrong gradient") {
  // The constant copy hides half of the true derivative from backward().
  const double err = grad_check(
      [](std::span<const Value> v) {
        const Value frozen = constant(v[0].value());
        return sum(v[0] * frozen);
      },
      {Array::vector({1.0, 2.0})}, 1e-6);
  CHECK(err > 0.4);
  CHECK_THROWS_AS(grad_check([](std::span<const Value> v) { return sum(v[0]); }, {Array::vector({1.0})}, 0.0),
                  std::invalid_argument);
}

TEST_CASE("set_trainable only applies to leaves") {
  Value p = parameter(Array::vector({1.0}));
  CHECK(p.trainable());
  p.set_trainable(false);
  CHECK_FALSE(p.requires_grad());
  Value q = p + p;
  CHECK_THROWS_AS(q.set_trainable(true), std::logic_error);
}
