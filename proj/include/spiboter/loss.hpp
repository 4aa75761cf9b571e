#pragma once

// Hybrid loss: coordinate residual, distance-matrix topology residual, and
// log-parameterised adaptive weights.

#include "spiboter/autodiff.hpp"

namespace spiboter::loss {

using ad::Value;

class DegenerateBatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Denominator used when the predicted distance matrix collapses.
inline constexpr double kNormGuard = 1e-12;

/// Mean over samples of the squared Euclidean residual, mm^2.
Value data_loss(const Value& pred, const Value& gt);

/// N x 3 -> N x N squared pairwise distances. Requires N >= 2.
Value distance_matrix(const Value& points);

/// Distance matrix divided by its own maximum.
Value normalized_distance_matrix(const Value& points, bool guard);

/// Mean squared difference of the max-normalised distance matrices.
/// Throws DegenerateBatchError when every theory point coincides.
Value physics_loss(const Value& pred, const Value& theory);

/// exp(log_lambda_data) * l_data + exp(log_lambda_physics) * l_physics.
Value total_loss(const Value& l_data, const Value& l_physics, const Value& log_lambda_data,
                 const Value& log_lambda_physics);

struct LossBreakdown {
  double l_data = 0.0;
  double l_physics = 0.0;
  double lambda_data = 1.0;
  double lambda_physics = 1.0;
  double l_total = 0.0;
};

enum class LossMode { spi, data_only };

struct HybridLoss {
  Value total;
  LossBreakdown parts;
};

/// Loss for one batch. The physics term is dropped for data_only mode and
/// for single-sample batches.
HybridLoss hybrid_loss(const Value& pred, const Value& gt, const Value& theory, const Value& log_lambda_data,
                       const Value& log_lambda_physics, LossMode mode);

}  // namespace spiboter::loss
