#pragma once

// Joint-angle compensation by gradient descent through a frozen model.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "spiboter/dataset.hpp"
#include "spiboter/model.hpp"

namespace spiboter::inverse {

using data::JointsDeg;
using kin::Position3;

struct SolverConfig {
  double learning_rate = 1e-4;
  std::size_t max_iterations = 500;
  double loss_threshold = 1e-4;  // mm^2

  void validate() const;
};

struct CompensationResult {
  JointsDeg theta_initial_deg{};
  JointsDeg theta_final_deg{};
  JointsDeg delta_theta_deg{};
  std::size_t iterations = 0;  // optimizer steps taken
  double initial_loss = 0.0;
  double final_loss = 0.0;
  bool converged = false;
  bool within_limits = true;
};

/// Mean squared error between the model prediction at `theta_rad` and
/// `target`, in mm^2.
double prediction_loss(const model::BoTERModel& model, const std::array<double, kin::kJoints>& theta_rad,
                       const Position3& target);

/// Starting at `theta_initial_deg`, adjusts the joint angles so the model
/// predicts `target`. The model must be frozen.
CompensationResult compensate(const model::BoTERModel& model, const JointsDeg& theta_initial_deg,
                              const Position3& target, const SolverConfig& cfg,
                              const data::JointRanges& limits = {});

struct Target {
  Position3 position = Position3::Zero();
  JointsDeg theta_initial_deg{};
};

/// `count` test-split samples chosen by a seeded shuffle; each target is the
/// nominal position of the sample's angles.
std::vector<Target> pick_targets(const data::SampleSet& set, std::size_t count, std::uint64_t seed);

struct Verification {
  Position3 residual = Position3::Zero();  // achieved minus target
  double residual_norm = 0.0;
  double uncompensated_norm = 0.0;
};

/// Evaluates the commanded angles on the true arm.
Verification verify(const data::ErrorWorld& world, const CompensationResult& result, const Position3& target);

struct AxisSummary {
  double stddev = 0.0;
  double max = 0.0;
  double min = 0.0;
};

struct VerificationSummary {
  std::array<AxisSummary, 3> axes{};  // absolute residual per axis
  double mean_norm = 0.0;
  double mean_uncompensated_norm = 0.0;
  double max_norm = 0.0;
  std::size_t count = 0;
  std::size_t converged = 0;
};

VerificationSummary summarize(const std::vector<Verification>& checks, const std::vector<CompensationResult>& results);

std::string format_summary(const VerificationSummary& summary);

}  // namespace spiboter::inverse
