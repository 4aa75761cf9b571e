#include <doctest.h>

#include <array>
#include <cmath>
#include <random>

#include "spiboter/kinematics.hpp"

using namespace spiboter;
using kin::kPi;

namespace {

using Mat = std::array<std::array<double, 4>, 4>;

// Independent route: plain nested arrays, each link written out from the
// DH convention Rot_z(theta) Trans_z(d) Trans_x(a) Rot_x(alpha).
Mat link(double d, double a, double alpha, double th) {
  const double ct = std::cos(th), st = std::sin(th), ca = std::cos(alpha), sa = std::sin(alpha);
  return {{{ct, -st * ca, st * sa, a * ct}, {st, ct * ca, -ct * sa, a * st}, {0, sa, ca, d}, {0, 0, 0, 1}}};
}

Mat mul(const Mat& x, const Mat& y) {
  Mat r{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      for (int k = 0; k < 4; ++k) r[i][j] += x[i][k] * y[k][j];
  return r;
}

std::array<double, 3> oracle_fk(const kin::DHTable& t, const std::array<double, 6>& q) {
  Mat m{{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}}};
  for (int i = 0; i < 6; ++i) {
    const auto& r = t.rows[static_cast<std::size_t>(i)];
    m = mul(m, link(r.d, r.a, r.alpha, q[static_cast<std::size_t>(i)] + r.theta_offset));
  }
  return {m[0][3], m[1][3], m[2][3]};
}

std::array<double, 6> random_pose(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-kPi, kPi);
  std::array<double, 6> q{};
  for (auto& x : q) x = u(rng);
  return q;
}

}  // namespace

TEST_CASE("ur5 zero pose") {
  const auto p = kin::forward_kinematics(kin::ur5_table(), kin::JointAngles{});
  CHECK(std::abs(p.x() - -817.25) < 1e-6);
  CHECK(std::abs(p.y() - -191.45) < 1e-6);
  CHECK(std::abs(p.z() - -5.4910) < 1e-6);
  const auto o = oracle_fk(kin::ur5_table(), {});
  CHECK(std::abs(o[0] - -817.25) < 1e-9);
  CHECK(std::abs(o[1] - -191.45) < 1e-9);
  CHECK(std::abs(o[2] - -5.4910) < 1e-9);
}

TEST_CASE("ur5 table entries") {
  const auto t = kin::ur5_table();
  CHECK(t.name == "ur5");
  const double d[] = {89.159, 0, 0, 109.15, 94.65, 82.3};
  const double a[] = {0, -425, -392.25, 0, 0, 0};
  const double alpha[] = {kPi / 2, 0, 0, kPi / 2, -kPi / 2, 0};
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(t.rows[i].d == d[i]);
    CHECK(t.rows[i].a == a[i]);
    CHECK(t.rows[i].alpha == alpha[i]);
    CHECK(t.rows[i].theta_offset == 0.0);
  }
  CHECK(t.tool == kin::Transform::Identity());
}

TEST_CASE("fk agrees with the chained-matrix oracle at random poses") {
  std::mt19937_64 rng(21);
  for (int n = 0; n < 200; ++n) {
    const auto q = random_pose(rng);
    const auto p = kin::forward_kinematics(kin::ur5_table(), q);
    const auto o = oracle_fk(kin::ur5_table(), q);
    CHECK(std::abs(p.x() - o[0]) < 1e-9);
    CHECK(std::abs(p.y() - o[1]) < 1e-9);
    CHECK(std::abs(p.z() - o[2]) < 1e-9);
  }
}

TEST_CASE("joint transform of a single link") {
  const kin::DHRow row{10.0, 5.0, kPi / 2, 0.0};
  const auto t = kin::joint_transform(row, 0.0);
  CHECK(t(0, 3) == doctest::Approx(5.0));
  CHECK(t(2, 3) == doctest::Approx(10.0));
  CHECK(std::abs(t(1, 2) - -1.0) < 1e-15);
  const kin::DHRow shifted{10.0, 5.0, kPi / 2, 0.3};
  CHECK((kin::joint_transform(shifted, 0.2) - kin::joint_transform(row, 0.5)).norm() < 1e-15);
}

TEST_CASE("rotating joint 1 rotates the end point about base z") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int n = 0; n < 50; ++n) {
    auto q = random_pose(rng);
    const double delta = u(rng);
    const auto p = kin::forward_kinematics(kin::ur5_table(), q);
    q[0] += delta;
    const auto r = kin::forward_kinematics(kin::ur5_table(), q);
    const double c = std::cos(delta), s = std::sin(delta);
    CHECK(std::abs(r.x() - (c * p.x() - s * p.y())) < 1e-9);
    CHECK(std::abs(r.y() - (s * p.x() + c * p.y())) < 1e-9);
    CHECK(std::abs(r.z() - p.z()) < 1e-9);
  }
}

TEST_CASE("graph and batch forms agree with the plain form") {
  std::mt19937_64 rng(9);
  const auto table = kin::ur5_table();
  Eigen::MatrixXd q(16, 6);
  ad::Array qa({16, 6});
  for (int i = 0; i < 16; ++i) {
    const auto pose = random_pose(rng);
    for (int j = 0; j < 6; ++j) q(i, j) = qa.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = pose[static_cast<std::size_t>(j)];
  }
  const auto batch = kin::forward_kinematics_batch(table, q);
  const auto graph = kin::forward_kinematics_graph(table, ad::constant(qa)).value();
  for (int i = 0; i < 16; ++i) {
    std::array<double, 6> pose{};
    for (int j = 0; j < 6; ++j) pose[static_cast<std::size_t>(j)] = q(i, j);
    const auto p = kin::forward_kinematics(table, pose);
    for (int c = 0; c < 3; ++c) {
      CHECK(std::abs(batch(i, c) - p[c]) < 1e-10);
      CHECK(std::abs(graph.at(static_cast<std::size_t>(i), static_cast<std::size_t>(c)) - p[c]) < 1e-10);
    }
  }
}

TEST_CASE("graph form differentiates correctly") {
  std::mt19937_64 rng(13);
  for (int n = 0; n < 5; ++n) {
    const auto pose = random_pose(rng);
    const ad::Array q = ad::Array::matrix(1, 6, {pose.begin(), pose.end()});
    const double err = ad::grad_check(
        [](std::span<const ad::Value> v) {
          const auto p = kin::forward_kinematics_graph(kin::ur5_table(), v[0]);
          return ad::sum(p * ad::constant(ad::Array::matrix(1, 3, {0.3, -0.7, 1.1})));
        },
        {q}, 1e-5);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("tool offset is applied after the last link") {
  auto table = kin::ur5_table();
  table.tool(2, 3) = 50.0;
  const auto q = std::array<double, 6>{0.1, -1.2, 0.4, 0.3, -0.5, 0.9};
  const auto base = kin::ur5_table();
  Eigen::Matrix4d end = kin::chain_transform(base, q);
  const Eigen::Vector3d expected = end.topRightCorner<3, 1>() + 50.0 * end.block<3, 1>(0, 2);
  CHECK((kin::forward_kinematics(table, q) - expected).norm() < 1e-9);
}

TEST_CASE("angle wrapping and conversion") {
  CHECK(kin::wrap_angle(3 * kPi / 2) == doctest::Approx(-kPi / 2));
  CHECK(kin::wrap_angle(-3 * kPi / 2) == doctest::Approx(kPi / 2));
  CHECK(kin::wrap_angle(0.25) == 0.25);
  CHECK(kin::deg_to_rad(180.0) == doctest::Approx(kPi));
  CHECK(kin::rad_to_deg(kPi / 2) == doctest::Approx(90.0));
  const auto q = kin::JointAngles::from_degrees({270, 0, 0, 0, 0, -540});
  CHECK(q[0] == doctest::Approx(-kPi / 2));
  CHECK(std::abs(std::abs(q[5]) - kPi) < 1e-12);
  // Wrapping never changes the reached position.
  const std::array<double, 6> raw{kin::deg_to_rad(270), 0.2, 0.3, 0.4, 0.5, kin::deg_to_rad(-400)};
  const auto p1 = kin::forward_kinematics(kin::ur5_table(), raw);
  const auto p2 = kin::forward_kinematics(kin::ur5_table(), kin::JointAngles(raw));
  CHECK((p1 - p2).norm() < 1e-9);
}

TEST_CASE("table validation") {
  auto t = kin::ur5_table();
  CHECK_NOTHROW(t.validate());
  t.rows[2].alpha = 4.0;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  t = kin::ur5_table();
  t.rows[0].d = std::nan("");
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  t = kin::ur5_table();
  t.tool(0, 0) = 2.0;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
}
