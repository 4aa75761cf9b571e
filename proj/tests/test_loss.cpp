#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Geometry>

#include "spiboter/loss.hpp"
#include "support.hpp"

using namespace spiboter;
using ad::Array;
using testing::random_array;

namespace {

// Loop oracle for the physics term.
double oracle_physics(const Array& pred, const Array& theory) {
  const std::size_t n = pred.dim(0);
  std::vector<double> dp(n * n), dt(n * n);
  double mp = 0.0, mt = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double sp = 0.0, st = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        sp += std::pow(pred.at(i, c) - pred.at(j, c), 2);
        st += std::pow(theory.at(i, c) - theory.at(j, c), 2);
      }
      dp[i * n + j] = sp;
      dt[i * n + j] = st;
      mp = std::max(mp, sp);
      mt = std::max(mt, st);
    }
  double total = 0.0;
  for (std::size_t k = 0; k < n * n; ++k) total += std::pow(dp[k] / mp - dt[k] / mt, 2);
  return total / static_cast<double>(n * n);
}

Array transform(const Array& p, const Eigen::Matrix3d& r, const Eigen::Vector3d& t, double s) {
  Array out(p.shape());
  for (std::size_t i = 0; i < p.dim(0); ++i) {
    const Eigen::Vector3d x(p.at(i, 0), p.at(i, 1), p.at(i, 2));
    const Eigen::Vector3d y = s * (r * x) + t;
    for (std::size_t c = 0; c < 3; ++c) out.at(i, c) = y[static_cast<Eigen::Index>(c)];
  }
  return out;
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  return q.normalized().toRotationMatrix();
}

double physics(const Array& pred, const Array& theory) {
  return loss::physics_loss(ad::constant(pred), ad::constant(theory)).item();
}

}  // namespace

TEST_CASE("data loss is the mean squared residual norm") {
  const Array p = Array::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const Array g = Array::matrix(2, 3, {1, 2, 4, 2, 5, 6});
  CHECK(loss::data_loss(ad::constant(p), ad::constant(g)).item() == doctest::Approx((1.0 + 4.0) / 2.0));
  CHECK_THROWS_AS(loss::data_loss(ad::constant(p), ad::constant(Array::matrix(1, 3, {0, 0, 0}))), ad::ShapeError);
}

TEST_CASE("physics loss matches the loop oracle") {
  std::mt19937_64 rng(31);
  for (std::size_t n = 2; n <= 6; ++n) {
    for (int rep = 0; rep < 20; ++rep) {
      const Array p = random_array({n, 3}, rng, -500, 500);
      const Array t = random_array({n, 3}, rng, -500, 500);
      CHECK(std::abs(physics(p, t) - oracle_physics(p, t)) < 1e-12);
    }
  }
}

TEST_CASE("physics loss vanishes under similarity transforms") {
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> u(-300, 300), s(0.2, 5.0);
  for (int rep = 0; rep < 50; ++rep) {
    const Array t = random_array({8, 3}, rng, -800, 800);
    CHECK(physics(t, t) == 0.0);
    const Eigen::Matrix3d r = random_rotation(rng);
    const Eigen::Vector3d shift(u(rng), u(rng), u(rng));
    CHECK(physics(transform(t, r, shift, 1.0), t) < 1e-12);
    CHECK(physics(transform(t, Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero(), s(rng)), t) < 1e-12);
    CHECK(physics(transform(t, r, shift, s(rng)), t) < 1e-12);
  }
}

TEST_CASE("physics loss is invariant to batch order") {
  std::mt19937_64 rng(33);
  for (int rep = 0; rep < 20; ++rep) {
    const Array p = random_array({7, 3}, rng, -100, 100);
    const Array t = random_array({7, 3}, rng, -100, 100);
    std::vector<std::size_t> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Array pp(p.shape()), tp(t.shape());
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t c = 0; c < 3; ++c) {
        pp.at(i, c) = p.at(perm[i], c);
        tp.at(i, c) = t.at(perm[i], c);
      }
    CHECK(std::abs(physics(p, t) - physics(pp, tp)) < 1e-14);
  }
}

TEST_CASE("physics loss is bounded and positive for distorted batches") {
  std::mt19937_64 rng(34);
  const Array t = random_array({6, 3}, rng, -100, 100);
  Array p = t;
  p.at(0, 0) += 40.0;
  const double l = physics(p, t);
  CHECK(l > 0.0);
  CHECK(l <= 1.0);
}

TEST_CASE("degenerate batches") {
  const Array same = Array::matrix(3, 3, {1, 2, 3, 1, 2, 3, 1, 2, 3});
  const Array spread = Array::matrix(3, 3, {0, 0, 0, 1, 0, 0, 0, 1, 0});
  CHECK_THROWS_AS(physics(spread, same), loss::DegenerateBatchError);
  // A collapsed prediction is guarded rather than rejected.
  const double l = physics(same, spread);
  CHECK(std::isfinite(l));
  // Collapsed distances stay 0; theory normalises to {0.5, 0.5, 1} off the
  // diagonal, each twice, over 9 entries.
  CHECK(l == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(loss::distance_matrix(ad::constant(Array::matrix(1, 3, {0, 0, 0}))), std::invalid_argument);
}

TEST_CASE("loss gradients") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(seed);
    const Array p = random_array({5, 3}, rng, -10, 10);
    const Array t = random_array({5, 3}, rng, -10, 10);
    const Array g = random_array({5, 3}, rng, -10, 10);
    const Array lam = Array::vector({0.3, -0.2});
    const double err = ad::grad_check(
        [&](std::span<const ad::Value> v) {
          const auto ld = ad::reshape(ad::sum(v[1] * ad::constant(Array::vector({1, 0}))), {});
          const auto lp = ad::reshape(ad::sum(v[1] * ad::constant(Array::vector({0, 1}))), {});
          return loss::hybrid_loss(v[0], ad::constant(g), ad::constant(t), ld, lp, loss::LossMode::spi).total;
        },
        {p, lam}, 1e-5);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("hybrid loss weighting and modes") {
  std::mt19937_64 rng(40);
  const auto p = ad::constant(random_array({4, 3}, rng));
  const auto g = ad::constant(random_array({4, 3}, rng));
  const auto t = ad::constant(random_array({4, 3}, rng));
  const auto ld = ad::constant(std::log(2.0));
  const auto lp = ad::constant(std::log(3.0));
  const auto h = loss::hybrid_loss(p, g, t, ld, lp, loss::LossMode::spi);
  const double l_data = loss::data_loss(p, g).item();
  const double l_phys = loss::physics_loss(p, t).item();
  CHECK(h.parts.l_data == l_data);
  CHECK(h.parts.l_physics == l_phys);
  CHECK(h.parts.lambda_data == doctest::Approx(2.0));
  CHECK(h.parts.lambda_physics == doctest::Approx(3.0));
  CHECK(h.total.item() == doctest::Approx(2.0 * l_data + 3.0 * l_phys).epsilon(1e-14));

  const auto d = loss::hybrid_loss(p, g, t, ld, lp, loss::LossMode::data_only);
  CHECK(d.parts.l_physics == 0.0);
  CHECK(d.total.item() == doctest::Approx(2.0 * l_data).epsilon(1e-14));

  const auto p1 = ad::constant(Array::matrix(1, 3, {1, 2, 3}));
  const auto single = loss::hybrid_loss(p1, p1, p1, ld, lp, loss::LossMode::spi);
  CHECK(single.parts.l_physics == 0.0);
  CHECK(single.total.item() == 0.0);
}
