#include "spiboter/loss.hpp"

#include <cmath>

namespace spiboter::loss {

namespace {
void require_points(const Value& v, const char* what) {
  const auto& s = v.shape();
  if (s.size() != 2 || s[1] != 3) {
    throw ad::ShapeError(std::string(what) + ": expected N x 3 positions, got " + ad::shape_str(s));
  }
}
}  // namespace

Value data_loss(const Value& pred, const Value& gt) {
  require_points(pred, "data_loss");
  if (pred.shape() != gt.shape()) {
    throw ad::ShapeError("data_loss: shapes " + ad::shape_str(pred.shape()) + " and " + ad::shape_str(gt.shape()) +
                         " differ");
  }
  if (pred.shape()[0] == 0) throw std::invalid_argument("data_loss: empty batch");
  return ad::mean(ad::sq_norm(pred - gt));
}

Value distance_matrix(const Value& points) {
  require_points(points, "distance_matrix");
  if (points.shape()[0] < 2) throw std::invalid_argument("distance_matrix: need at least 2 points");
  return ad::pairwise_sq_dist(points);
}

Value normalized_distance_matrix(const Value& points, bool guard) {
  const Value d = distance_matrix(points);
  const Value top = ad::max(d);
  if (top.item() < kNormGuard) {
    if (!guard) throw DegenerateBatchError("distance matrix is degenerate: all points coincide");
    return ad::scale(d, 1.0 / kNormGuard);
  }
  return d / top;
}

Value physics_loss(const Value& pred, const Value& theory) {
  if (pred.shape() != theory.shape()) {
    throw ad::ShapeError("physics_loss: shapes " + ad::shape_str(pred.shape()) + " and " +
                         ad::shape_str(theory.shape()) + " differ");
  }
  const Value theory_norm = normalized_distance_matrix(theory, false);
  const Value pred_norm = normalized_distance_matrix(pred, true);
  const Value diff = pred_norm - theory_norm;
  return ad::mean(diff * diff);
}

Value total_loss(const Value& l_data, const Value& l_physics, const Value& log_lambda_data,
                 const Value& log_lambda_physics) {
  return ad::exp(log_lambda_data) * l_data + ad::exp(log_lambda_physics) * l_physics;
}

HybridLoss hybrid_loss(const Value& pred, const Value& gt, const Value& theory, const Value& log_lambda_data,
                       const Value& log_lambda_physics, LossMode mode) {
  const Value l_data = data_loss(pred, gt);
  const bool with_physics = mode == LossMode::spi && pred.shape()[0] >= 2;
  const Value l_physics = with_physics ? physics_loss(pred, theory) : ad::constant(0.0);
  HybridLoss out;
  out.total = total_loss(l_data, l_physics, log_lambda_data, log_lambda_physics);
  out.parts.l_data = l_data.item();
  out.parts.l_physics = l_physics.item();
  out.parts.lambda_data = std::exp(log_lambda_data.item());
  out.parts.lambda_physics = std::exp(log_lambda_physics.item());
  out.parts.l_total = out.total.item();
  return out;
}

}  // namespace spiboter::loss
