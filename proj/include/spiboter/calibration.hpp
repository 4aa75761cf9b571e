#pragma once

// Rigid base-to-world registration from corresponding point pairs.

#include <stdexcept>

#include <Eigen/Core>

namespace spiboter::calib {

class DegenerateError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  /// this after `first`: x -> R2 (R1 x + T1) + T2.
  RigidTransform compose(const RigidTransform& first) const;
};

struct Svd3 {
  Eigen::Matrix3d u, v;
  Eigen::Vector3d sigma;  // descending, non-negative
};

/// One-sided Jacobi SVD of a 3x3 matrix: a = u * diag(sigma) * v^T.
Svd3 jacobi_svd(const Eigen::Matrix3d& a, double tol = 1e-14, int max_sweeps = 60);

/// Least-squares R, T with P_i ~ R Q_i + T. `base` and `world` are N x 3.
/// Throws DegenerateError for N < 3 or (near) collinear base points.
RigidTransform fit_rigid_transform(const Eigen::MatrixX3d& base, const Eigen::MatrixX3d& world);

Eigen::MatrixX3d apply_transform(const RigidTransform& t, const Eigen::MatrixX3d& points);

/// Root-mean-square of the per-point residual distance after applying `t`.
double rms_residual(const RigidTransform& t, const Eigen::MatrixX3d& base, const Eigen::MatrixX3d& world);

}  // namespace spiboter::calib
