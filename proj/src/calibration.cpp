#include "spiboter/calibration.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>

#include <Eigen/Geometry>
#include <Eigen/LU>

namespace spiboter::calib {

RigidTransform RigidTransform::compose(const RigidTransform& first) const {
  return {rotation * first.rotation, rotation * first.translation + translation};
}

Svd3 jacobi_svd(const Eigen::Matrix3d& a, double tol, int max_sweeps) {
  // Orthogonalise the columns of W = A V by plane rotations; at convergence
  // the column norms are the singular values and U = W diag(1/sigma).
  Eigen::Matrix3d w = a;
  Eigen::Matrix3d v = Eigen::Matrix3d::Identity();
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        const double alpha = w.col(p).squaredNorm();
        const double beta = w.col(q).squaredNorm();
        const double gamma = w.col(p).dot(w.col(q));
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (int i = 0; i < 3; ++i) {
          const double wp = w(i, p), wq = w(i, q);
          w(i, p) = c * wp - s * wq;
          w(i, q) = s * wp + c * wq;
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  std::array<int, 3> order{0, 1, 2};
  Eigen::Vector3d norms(w.col(0).norm(), w.col(1).norm(), w.col(2).norm());
  std::sort(order.begin(), order.end(), [&](int x, int y) { return norms[x] > norms[y]; });

  Svd3 out;
  for (int k = 0; k < 3; ++k) {
    out.sigma[k] = norms[order[k]];
    out.v.col(k) = v.col(order[k]);
    out.u.col(k) = w.col(order[k]);
  }
  // Normalise U's columns; rank-deficient columns are completed to an
  // orthonormal basis.
  const double top = out.sigma[0];
  int rank = 0;
  for (int k = 0; k < 3; ++k) {
    if (out.sigma[k] > 1e-300 && out.sigma[k] > top * 1e-15) {
      out.u.col(k) /= out.sigma[k];
      ++rank;
    }
  }
  if (rank == 0) {
    out.u = Eigen::Matrix3d::Identity();
  } else if (rank == 1) {
    const Eigen::Vector3d u0 = out.u.col(0);
    Eigen::Vector3d helper = std::abs(u0.x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
    out.u.col(1) = (helper - helper.dot(u0) * u0).normalized();
    out.u.col(2) = u0.cross(out.u.col(1));
  } else if (rank == 2) {
    out.u.col(2) = out.u.col(0).cross(out.u.col(1));
  }
  return out;
}

RigidTransform fit_rigid_transform(const Eigen::MatrixX3d& base, const Eigen::MatrixX3d& world) {
  if (base.rows() != world.rows()) {
    throw std::invalid_argument("fit_rigid_transform: " + std::to_string(base.rows()) + " base points vs " +
                                std::to_string(world.rows()) + " world points");
  }
  const Eigen::Index n = base.rows();
  if (n < 3) throw DegenerateError("fit_rigid_transform: need at least 3 point pairs, got " + std::to_string(n));
  if (!base.allFinite() || !world.allFinite()) throw std::invalid_argument("fit_rigid_transform: non-finite point");

  const Eigen::RowVector3d q_bar = base.colwise().mean();
  const Eigen::RowVector3d p_bar = world.colwise().mean();
  const Eigen::MatrixX3d q_c = base.rowwise() - q_bar;
  const Eigen::MatrixX3d p_c = world.rowwise() - p_bar;

  // Rank of the centred base cloud from its own scatter matrix.
  const Svd3 scatter = jacobi_svd(q_c.transpose() * q_c);
  if (!(scatter.sigma[1] > 1e-18 * std::max(scatter.sigma[0], 1e-300)) || scatter.sigma[0] == 0.0) {
    throw DegenerateError("fit_rigid_transform: base points are collinear or coincident");
  }

  const Eigen::Matrix3d h = (q_c.transpose() * p_c) / static_cast<double>(n);
  const Svd3 svd = jacobi_svd(h);
  if (!(svd.sigma[1] >= 1e-9 * svd.sigma[0]) || svd.sigma[0] == 0.0) {
    throw DegenerateError("fit_rigid_transform: covariance is rank-deficient (sigma ratio " +
                          std::to_string(svd.sigma[1] / std::max(svd.sigma[0], 1e-300)) + ")");
  }
  Eigen::Matrix3d correction = Eigen::Matrix3d::Identity();
  correction(2, 2) = (svd.v * svd.u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;

  RigidTransform t;
  t.rotation = svd.v * correction * svd.u.transpose();
  t.translation = p_bar.transpose() - t.rotation * q_bar.transpose();
  return t;
}

Eigen::MatrixX3d apply_transform(const RigidTransform& t, const Eigen::MatrixX3d& points) {
  Eigen::MatrixX3d out = points * t.rotation.transpose();
  out.rowwise() += t.translation.transpose();
  return out;
}

double rms_residual(const RigidTransform& t, const Eigen::MatrixX3d& base, const Eigen::MatrixX3d& world) {
  if (base.rows() == 0) return 0.0;
  const Eigen::MatrixX3d diff = apply_transform(t, base) - world;
  return std::sqrt(diff.rowwise().squaredNorm().mean());
}

}  // namespace spiboter::calib
