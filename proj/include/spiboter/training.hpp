#pragma once

// AdamW training with global-norm clipping, best-validation checkpoint
// selection, the metric suite, and ablation runs.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "spiboter/dataset.hpp"
#include "spiboter/loss.hpp"
#include "spiboter/model.hpp"

namespace spiboter::train {

using ad::Value;
using model::BoTERModel;

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-6;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 150;
  double clip_threshold = 1.0;
  std::uint64_t seed = 139;
  loss::LossMode loss_mode = loss::LossMode::spi;

  void validate() const;
};

std::string to_string(loss::LossMode mode);
loss::LossMode parse_loss_mode(const std::string& s);

/// Adam with decoupled weight decay; weight_decay = 0 gives plain Adam.
class AdamW {
 public:
  AdamW(std::vector<Value> params, double learning_rate, double weight_decay = 0.0, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8);

  void zero_grad();
  void step();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Value> params_;
  std::vector<ad::Array> m_, v_;
  double lr_, wd_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `threshold`.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<const Value> params, double threshold);

struct AxisMetrics {
  double mae = 0.0;
  double mse = 0.0;
  double rmse = 0.0;
  double r2 = 0.0;
};

enum Axis : std::size_t { kX = 0, kY = 1, kZ = 2, k3D = 3 };

struct MetricsReport {
  std::array<AxisMetrics, 4> axes{};  // X, Y, Z, 3D
  std::size_t count = 0;
};

/// MAE/MSE/RMSE between predicted and measured coordinates; R^2 in error
/// space (errors relative to the theoretical positions), with the mean
/// absolute real error as the baseline.
MetricsReport compute_metrics(const Eigen::MatrixX3d& pred, const Eigen::MatrixX3d& measured,
                              const Eigen::MatrixX3d& theoretical);

MetricsReport evaluate(const BoTERModel& model, const std::vector<data::Sample>& samples);
/// Metrics of the uncompensated theoretical positions.
MetricsReport evaluate_baseline(const std::vector<data::Sample>& samples);

std::string format_report(const MetricsReport& report, const std::string& title);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double l_data = 0.0;
  double l_physics = 0.0;
  double lambda_data = 1.0;
  double lambda_physics = 1.0;
  double val_mae_3d = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_mae = 0.0;
};

std::string format_history_csv(const TrainHistory& history, const std::string& header = {});

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t last_finite_epoch)
      : std::runtime_error(what), last_finite_epoch_(last_finite_epoch) {}
  std::size_t last_finite_epoch() const { return last_finite_epoch_; }

 private:
  std::size_t last_finite_epoch_;
};

struct TrainResult {
  BoTERModel best;
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains on the train split and keeps the parameters of the epoch with the
/// lowest validation 3D MAE.
TrainResult train(BoTERModel model, const data::SampleSet& set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

struct AblationGroup {
  std::string name;
  model::ModelConfig model;
  loss::LossMode loss_mode = loss::LossMode::spi;
};

/// Baseline, no_mask, body_mask, no_resnet, no_transformer from `base`.
std::vector<AblationGroup> structure_groups(const model::ModelConfig& base);
/// Baseline and data_only.
std::vector<AblationGroup> loss_groups(const model::ModelConfig& base);

struct AblationResult {
  std::string name;
  std::size_t best_epoch = 0;
  std::size_t encoder_parameters = 0;
  MetricsReport test;
};

std::vector<AblationResult> run_ablation(const std::vector<AblationGroup>& groups, const data::SampleSet& set,
                                         const TrainConfig& cfg, const kin::DHTable& nominal = kin::ur5_table());

std::string format_ablation_table(const std::vector<AblationResult>& results);

}  // namespace spiboter::train
