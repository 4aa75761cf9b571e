#pragma once

// Physics branch: standard Denavit-Hartenberg forward kinematics of a
// six-axis serial arm, in plain arithmetic and as an autodiff graph.

#include <array>
#include <string>

#include <Eigen/Core>

#include "spiboter/autodiff.hpp"

namespace spiboter::kin {

inline constexpr std::size_t kJoints = 6;
inline constexpr double kPi = 3.14159265358979323846;

struct DHRow {
  double d = 0.0;             // link offset, mm
  double a = 0.0;             // link length, mm
  double alpha = 0.0;         // twist, rad
  double theta_offset = 0.0;  // joint angle offset, rad
};

using Position3 = Eigen::Vector3d;
using Transform = Eigen::Matrix4d;

struct DHTable {
  std::string name = "custom";
  std::array<DHRow, kJoints> rows{};
  Transform tool = Transform::Identity();

  /// Throws std::invalid_argument when a row is non-finite, a twist leaves
  /// [-pi, pi], or the tool matrix is not a rigid homogeneous transform.
  void validate() const;
};

/// Nominal UR5 parameters (mm / rad), identity tool.
DHTable ur5_table();

/// Wraps an angle into [-pi, pi].
double wrap_angle(double rad);
double deg_to_rad(double deg);
double rad_to_deg(double rad);

/// Six joint angles in radians, wrapped into [-pi, pi] at construction.
class JointAngles {
 public:
  JointAngles() = default;
  explicit JointAngles(const std::array<double, kJoints>& rad);
  static JointAngles from_degrees(const std::array<double, kJoints>& deg);

  const std::array<double, kJoints>& rad() const { return rad_; }
  double operator[](std::size_t i) const { return rad_[i]; }
  std::array<double, kJoints> degrees() const;

 private:
  std::array<double, kJoints> rad_{};
};

/// Homogeneous transform of one link at joint angle `theta` (rad); the
/// row's theta_offset is added before evaluation.
Transform joint_transform(const DHRow& row, double theta);

/// Cumulative base-to-flange transform including the tool offset.
Transform chain_transform(const DHTable& table, const std::array<double, kJoints>& theta);

Position3 forward_kinematics(const DHTable& table, const JointAngles& q);

/// Same as above without wrapping; `theta` is used as given.
Position3 forward_kinematics(const DHTable& table, const std::array<double, kJoints>& theta);

/// N x 6 radians -> N x 3 millimetres.
Eigen::MatrixX3d forward_kinematics_batch(const DHTable& table, const Eigen::MatrixXd& q);

/// Differentiable form: (B, 6) radians -> (B, 3) millimetres.
ad::Value forward_kinematics_graph(const DHTable& table, const ad::Value& theta);

}  // namespace spiboter::kin
