#include "spiboter/kinematics.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

namespace spiboter::kin {

void DHTable::validate() const {
  for (std::size_t i = 0; i < kJoints; ++i) {
    const auto& r = rows[i];
    if (!std::isfinite(r.d) || !std::isfinite(r.a) || !std::isfinite(r.alpha) || !std::isfinite(r.theta_offset)) {
      throw std::invalid_argument("DH row " + std::to_string(i + 1) + " has a non-finite entry");
    }
    if (r.alpha < -kPi || r.alpha > kPi) {
      throw std::invalid_argument("DH row " + std::to_string(i + 1) + " twist outside [-pi, pi]");
    }
  }
  if (!tool.allFinite()) throw std::invalid_argument("tool offset has non-finite entries");
  if (tool.row(3) != Eigen::RowVector4d(0, 0, 0, 1)) {
    throw std::invalid_argument("tool offset bottom row must be (0, 0, 0, 1)");
  }
  const Eigen::Matrix3d rot = tool.topLeftCorner<3, 3>();
  if (!(rot.transpose() * rot).isApprox(Eigen::Matrix3d::Identity(), 1e-9) || std::abs(rot.determinant() - 1.0) > 1e-9) {
    throw std::invalid_argument("tool offset rotation block is not orthonormal");
  }
}

DHTable ur5_table() {
  DHTable t;
  t.name = "ur5";
  t.rows = {{
      {89.159, 0.0, kPi / 2, 0.0},
      {0.0, -425.0, 0.0, 0.0},
      {0.0, -392.25, 0.0, 0.0},
      {109.15, 0.0, kPi / 2, 0.0},
      {94.65, 0.0, -kPi / 2, 0.0},
      {82.3, 0.0, 0.0, 0.0},
  }};
  return t;
}

double wrap_angle(double rad) {
  if (rad >= -kPi && rad <= kPi) return rad;
  double w = std::remainder(rad, 2.0 * kPi);
  return w;
}

double deg_to_rad(double deg) { return deg * kPi / 180.0; }
double rad_to_deg(double rad) { return rad * 180.0 / kPi; }

JointAngles::JointAngles(const std::array<double, kJoints>& rad) {
  for (std::size_t i = 0; i < kJoints; ++i) {
    if (!std::isfinite(rad[i])) throw std::invalid_argument("joint angle " + std::to_string(i + 1) + " is not finite");
    rad_[i] = wrap_angle(rad[i]);
  }
}

JointAngles JointAngles::from_degrees(const std::array<double, kJoints>& deg) {
  std::array<double, kJoints> rad{};
  for (std::size_t i = 0; i < kJoints; ++i) rad[i] = deg_to_rad(deg[i]);
  return JointAngles(rad);
}

std::array<double, kJoints> JointAngles::degrees() const {
  std::array<double, kJoints> deg{};
  for (std::size_t i = 0; i < kJoints; ++i) deg[i] = rad_to_deg(rad_[i]);
  return deg;
}

Transform joint_transform(const DHRow& row, double theta) {
  const double th = theta + row.theta_offset;
  const double ct = std::cos(th), st = std::sin(th);
  const double ca = std::cos(row.alpha), sa = std::sin(row.alpha);
  Transform t;
  t << ct, -st * ca, st * sa, row.a * ct,
       st, ct * ca, -ct * sa, row.a * st,
       0.0, sa, ca, row.d,
       0.0, 0.0, 0.0, 1.0;
  return t;
}

Transform chain_transform(const DHTable& table, const std::array<double, kJoints>& theta) {
  Transform t = Transform::Identity();
  for (std::size_t i = 0; i < kJoints; ++i) t = t * joint_transform(table.rows[i], theta[i]);
  return t * table.tool;
}

Position3 forward_kinematics(const DHTable& table, const std::array<double, kJoints>& theta) {
  return chain_transform(table, theta).topRightCorner<3, 1>();
}

Position3 forward_kinematics(const DHTable& table, const JointAngles& q) {
  return forward_kinematics(table, q.rad());
}

Eigen::MatrixX3d forward_kinematics_batch(const DHTable& table, const Eigen::MatrixXd& q) {
  if (q.cols() != static_cast<Eigen::Index>(kJoints)) throw std::invalid_argument("joint batch must have 6 columns");
  Eigen::MatrixX3d out(q.rows(), 3);
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    std::array<double, kJoints> th{};
    for (std::size_t j = 0; j < kJoints; ++j) th[j] = q(i, static_cast<Eigen::Index>(j));
    out.row(i) = forward_kinematics(table, th).transpose();
  }
  return out;
}

ad::Value forward_kinematics_graph(const DHTable& table, const ad::Value& theta) {
  using namespace ad;
  const Shape& s = theta.shape();
  if (s.size() != 2 || s[1] != kJoints) {
    throw ShapeError("forward_kinematics_graph: expected (B, 6) joint angles, got " + shape_str(s));
  }
  const std::size_t batch = s[0];

  // Each link transform is cos(th) * A + sin(th) * B + C with constant A, B, C,
  // so one (B, 3) x (3, 16) product yields all B flattened matrices.
  Array pick({kJoints, 1});
  Value chain;
  for (std::size_t j = 0; j < kJoints; ++j) {
    const DHRow& r = table.rows[j];
    const double ca = std::cos(r.alpha), sa = std::sin(r.alpha);
    Array basis({3, 16});
    // cos(th) coefficients
    basis.at(0, 0) = 1.0;
    basis.at(0, 3) = r.a;
    basis.at(0, 5) = ca;
    basis.at(0, 6) = -sa;
    // sin(th) coefficients
    basis.at(1, 1) = -ca;
    basis.at(1, 2) = sa;
    basis.at(1, 4) = 1.0;
    basis.at(1, 7) = r.a;
    // constant part
    basis.at(2, 9) = sa;
    basis.at(2, 10) = ca;
    basis.at(2, 11) = r.d;
    basis.at(2, 15) = 1.0;

    pick.fill(0.0);
    pick[j] = 1.0;
    const Value th = add_scalar(matmul(theta, constant(pick)), r.theta_offset);  // (B, 1)
    const Value coeff = concat({cos(th), sin(th), constant(Array({batch, 1}, 1.0))}, 1);
    const Value link = reshape(matmul(coeff, constant(basis)), {batch, 4, 4});
    chain = j == 0 ? link : matmul(chain, link);
  }
  Array tool({4, 4});
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) tool.at(r, c) = table.tool(r, c);
  // Translation column of chain * tool, as (B, 3).
  Array column({4, 1});
  column[3] = 1.0;
  const Value last = matmul(chain, constant(std::move(tool)));
  const Value translation = reshape(matmul(last, constant(column)), {batch, 4});
  Array drop_w({4, 3});
  drop_w.at(0, 0) = drop_w.at(1, 1) = drop_w.at(2, 2) = 1.0;
  return matmul(translation, constant(std::move(drop_w)));
}

}  // namespace spiboter::kin
