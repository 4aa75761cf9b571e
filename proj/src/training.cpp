#include "spiboter/training.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "spiboter/textio.hpp"

namespace spiboter::train {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !(weight_decay >= 0.0) || batch_size == 0 || max_epochs == 0 ||
      !(clip_threshold > 0.0)) {
    throw std::invalid_argument("train config: learning_rate, batch_size, max_epochs and clip_threshold must be "
                                "positive and weight_decay non-negative");
  }
}

std::string to_string(loss::LossMode mode) { return mode == loss::LossMode::spi ? "spi" : "data_only"; }

loss::LossMode parse_loss_mode(const std::string& s) {
  if (s == "spi") return loss::LossMode::spi;
  if (s == "data_only") return loss::LossMode::data_only;
  throw std::invalid_argument("unknown loss mode '" + s + "' (expected spi or data_only)");
}

AdamW::AdamW(std::vector<Value> params, double learning_rate, double weight_decay, double beta1, double beta2,
             double eps)
    : params_(std::move(params)), lr_(learning_rate), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& value = params_[i].mutable_value();
    const ad::Array g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < value.size(); ++k) {
      value[k] -= lr_ * wd_ * value[k];
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      value[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

double clip_grad_norm(std::span<const Value> params, double threshold) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.node()->grad.data()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > threshold) {
    const double s = threshold / norm;
    for (const auto& p : params)
      for (double& g : p.node()->grad.data()) g *= s;
  }
  return norm;
}

MetricsReport compute_metrics(const Eigen::MatrixX3d& pred, const Eigen::MatrixX3d& measured,
                              const Eigen::MatrixX3d& theoretical) {
  const Eigen::Index n = pred.rows();
  if (n == 0) throw std::invalid_argument("compute_metrics: no samples");
  if (measured.rows() != n || theoretical.rows() != n) throw std::invalid_argument("compute_metrics: row mismatch");
  MetricsReport r;
  r.count = static_cast<std::size_t>(n);
  const double inv_n = 1.0 / static_cast<double>(n);

  const Eigen::MatrixX3d err = pred - measured;
  const Eigen::MatrixX3d d_pred = pred - theoretical;
  const Eigen::MatrixX3d d_real = measured - theoretical;
  const Eigen::RowVector3d baseline = d_real.cwiseAbs().colwise().sum() * inv_n;

  double num_3d = 0.0, den_3d = 0.0;
  for (int c = 0; c < 3; ++c) {
    auto& a = r.axes[static_cast<std::size_t>(c)];
    a.mae = err.col(c).cwiseAbs().sum() * inv_n;
    a.mse = err.col(c).squaredNorm() * inv_n;
    a.rmse = std::sqrt(a.mse);
    const double num = (d_pred.col(c) - d_real.col(c)).squaredNorm();
    const double den = (d_real.col(c).array() - baseline[c]).matrix().squaredNorm();
    a.r2 = den > 0.0 ? 1.0 - num / den : (num == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity());
    num_3d += num;
    den_3d += den;
  }
  auto& t = r.axes[k3D];
  t.mae = err.rowwise().norm().sum() * inv_n;
  t.mse = err.rowwise().squaredNorm().sum() * inv_n;
  t.rmse = std::sqrt(t.mse);
  t.r2 = den_3d > 0.0 ? 1.0 - num_3d / den_3d : (num_3d == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity());
  return r;
}

MetricsReport evaluate(const BoTERModel& model, const std::vector<data::Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  const Eigen::MatrixXd q = data::joints_rad(samples);
  Eigen::MatrixX3d pred(q.rows(), 3);
  constexpr Eigen::Index kChunk = 256;
  for (Eigen::Index at = 0; at < q.rows(); at += kChunk) {
    const Eigen::Index len = std::min(kChunk, q.rows() - at);
    pred.middleRows(at, len) = model.predict(Eigen::MatrixXd(q.middleRows(at, len)));
  }
  return compute_metrics(pred, data::measured_matrix(samples), data::theoretical_matrix(samples));
}

MetricsReport evaluate_baseline(const std::vector<data::Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("evaluate_baseline: no samples");
  const Eigen::MatrixX3d theory = data::theoretical_matrix(samples);
  return compute_metrics(theory, data::measured_matrix(samples), theory);
}

std::string format_report(const MetricsReport& report, const std::string& title) {
  static const char* names[] = {"X", "Y", "Z", "3D"};
  std::ostringstream os;
  char line[160];
  os << title << " (samples: " << report.count << ")\n";
  std::snprintf(line, sizeof line, "%-4s %12s %12s %12s %12s\n", "Axis", "MAE(mm)", "MSE(mm2)", "RMSE(mm)", "R2");
  os << line;
  for (std::size_t a = 0; a < 4; ++a) {
    const auto& m = report.axes[a];
    std::snprintf(line, sizeof line, "%-4s %12.6f %12.6f %12.6f %12.6f\n", names[a], m.mae, m.mse, m.rmse, m.r2);
    os << line;
  }
  return os.str();
}

std::string format_history_csv(const TrainHistory& history, const std::string& header) {
  std::ostringstream os;
  if (!header.empty()) os << header << '\n';
  os << "epoch,l_data,l_physics,lambda_data,lambda_physics,val_mae_3d\n";
  for (const auto& e : history.epochs) {
    os << e.epoch << ',' << io::format_double(e.l_data) << ',' << io::format_double(e.l_physics) << ','
       << io::format_double(e.lambda_data) << ',' << io::format_double(e.lambda_physics) << ','
       << io::format_double(e.val_mae_3d) << '\n';
  }
  return os.str();
}

namespace {

struct Batch {
  Value joints, measured, theory;
};

Batch make_batch(const std::vector<data::Sample>& samples, std::span<const std::size_t> idx) {
  const std::size_t b = idx.size();
  ad::Array q({b, kin::kJoints}), m({b, 3}), t({b, 3});
  for (std::size_t i = 0; i < b; ++i) {
    const auto& s = samples[idx[i]];
    const auto angles = kin::JointAngles::from_degrees(s.theta_deg);
    for (std::size_t j = 0; j < kin::kJoints; ++j) q.at(i, j) = angles[j];
    for (std::size_t c = 0; c < 3; ++c) {
      m.at(i, c) = s.measured[static_cast<Eigen::Index>(c)];
      t.at(i, c) = s.theoretical[static_cast<Eigen::Index>(c)];
    }
  }
  return {ad::constant(std::move(q)), ad::constant(std::move(m)), ad::constant(std::move(t))};
}

void shuffle(std::vector<std::size_t>& order, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::uint64_t bound = i;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = rng();
    } while (x >= limit);
    std::swap(order[i - 1], order[x % bound]);
  }
}

}  // namespace

TrainResult train(BoTERModel model, const data::SampleSet& set, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (model.frozen()) throw std::invalid_argument("train: model is frozen");
  const auto train_samples = set.subset(data::Split::train);
  const auto val_samples = set.subset(data::Split::val);
  if (train_samples.empty() || val_samples.empty()) {
    throw std::invalid_argument("train: dataset needs non-empty train and val splits");
  }

  const auto params = model.parameters();
  AdamW optimizer(params, cfg.learning_rate, cfg.weight_decay);
  TrainHistory history;
  std::vector<ad::Array> best = model.snapshot();
  double best_mae = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(train_samples.size());
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, data::stream_seed(cfg.seed, epoch));

    EpochRecord rec;
    rec.epoch = epoch;
    try {
      double sum_data = 0.0, sum_physics = 0.0;
      for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
        const std::size_t len = std::min(cfg.batch_size, order.size() - at);
        const Batch batch = make_batch(train_samples, std::span<const std::size_t>(order).subspan(at, len));
        const Value pred = model.predict(batch.joints);
        const auto loss = loss::hybrid_loss(pred, batch.measured, batch.theory, model.log_lambda_data(),
                                            model.log_lambda_physics(), cfg.loss_mode);
        optimizer.zero_grad();
        ad::backward(loss.total);
        clip_grad_norm(params, cfg.clip_threshold);
        optimizer.step();
        for (const auto& p : params) {
          if (!p.value().all_finite()) throw ad::NonFiniteError("parameter update produced non-finite values");
        }
        sum_data += loss.parts.l_data * static_cast<double>(len);
        sum_physics += loss.parts.l_physics * static_cast<double>(len);
      }
      rec.l_data = sum_data / static_cast<double>(order.size());
      rec.l_physics = sum_physics / static_cast<double>(order.size());
      rec.lambda_data = std::exp(model.log_lambda_data().item());
      rec.lambda_physics = std::exp(model.log_lambda_physics().item());
      rec.val_mae_3d = evaluate(model, val_samples).axes[k3D].mae;
      if (!std::isfinite(rec.val_mae_3d) || !std::isfinite(rec.lambda_data) || !std::isfinite(rec.lambda_physics)) {
        throw ad::NonFiniteError("non-finite validation metrics");
      }
    } catch (const ad::NonFiniteError& e) {
      throw DivergenceError("training diverged in epoch " + std::to_string(epoch) + " (" + e.what() +
                                "); last finite epoch " + std::to_string(epoch - 1),
                            epoch - 1);
    }

    history.epochs.push_back(rec);
    if (rec.val_mae_3d < best_mae) {
      best_mae = rec.val_mae_3d;
      history.best_epoch = epoch;
      best = model.snapshot();
    }
    if (on_epoch) on_epoch(rec);
  }
  history.best_val_mae = best_mae;
  model.restore(best);
  return {std::move(model), std::move(history)};
}

std::vector<AblationGroup> structure_groups(const model::ModelConfig& base) {
  std::vector<AblationGroup> g;
  auto cfg = base;
  cfg.mask = model::MaskKind::spi;
  cfg.head = model::HeadKind::residual;
  cfg.use_encoder = true;
  g.push_back({"baseline", cfg, loss::LossMode::spi});
  auto no_mask = cfg;
  no_mask.mask = model::MaskKind::none;
  g.push_back({"no_mask", no_mask, loss::LossMode::spi});
  auto body = cfg;
  body.mask = model::MaskKind::body;
  g.push_back({"body_mask", body, loss::LossMode::spi});
  auto no_resnet = cfg;
  no_resnet.head = model::HeadKind::linear;
  g.push_back({"no_resnet", no_resnet, loss::LossMode::spi});
  auto no_transformer = cfg;
  no_transformer.use_encoder = false;
  g.push_back({"no_transformer", no_transformer, loss::LossMode::spi});
  return g;
}

std::vector<AblationGroup> loss_groups(const model::ModelConfig& base) {
  return {{"baseline", base, loss::LossMode::spi}, {"data_only", base, loss::LossMode::data_only}};
}

std::vector<AblationResult> run_ablation(const std::vector<AblationGroup>& groups, const data::SampleSet& set,
                                         const TrainConfig& cfg, const kin::DHTable& nominal) {
  const auto test = set.subset(data::Split::test);
  std::vector<AblationResult> out;
  for (const auto& group : groups) {
    TrainConfig group_cfg = cfg;
    group_cfg.loss_mode = group.loss_mode;
    BoTERModel m(group.model, nominal, cfg.seed);
    auto result = train(std::move(m), set, group_cfg);
    AblationResult r;
    r.name = group.name;
    r.best_epoch = result.history.best_epoch;
    r.encoder_parameters = result.best.encoder_parameter_count();
    r.test = evaluate(result.best, test);
    out.push_back(r);
  }
  return out;
}

std::string format_ablation_table(const std::vector<AblationResult>& results) {
  static const char* names[] = {"X", "Y", "Z", "3D"};
  std::ostringstream os;
  char line[200];
  std::snprintf(line, sizeof line, "%-16s %7s %-4s %12s %12s %12s %12s\n", "Group", "Epochs", "Axis", "MAE(mm)",
                "MSE(mm2)", "RMSE(mm)", "R2");
  os << line;
  for (const auto& r : results) {
    for (std::size_t a = 0; a < 4; ++a) {
      const auto& m = r.test.axes[a];
      std::snprintf(line, sizeof line, "%-16s %7zu %-4s %12.6f %12.6f %12.6f %12.6f\n", a == 0 ? r.name.c_str() : "",
                    r.best_epoch, names[a], m.mae, m.mse, m.rmse, m.r2);
      os << line;
    }
  }
  return os.str();
}

}  // namespace spiboter::train
