#include "spiboter/inverse.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "spiboter/training.hpp"

namespace spiboter::inverse {

void SolverConfig::validate() const {
  if (!(learning_rate > 0.0) || max_iterations == 0 || !(loss_threshold >= 0.0)) {
    throw std::invalid_argument("solver config: learning_rate and max_iterations must be positive and "
                                "loss_threshold non-negative");
  }
}

namespace {

ad::Value mse(const model::BoTERModel& model, const ad::Value& theta, const Position3& target) {
  const ad::Value pred = model.predict(theta);
  const ad::Value goal = ad::constant(ad::Array::matrix(1, 3, {target.x(), target.y(), target.z()}));
  const ad::Value d = pred - goal;
  return ad::mean(d * d);
}

}  // namespace

double prediction_loss(const model::BoTERModel& model, const std::array<double, kin::kJoints>& theta_rad,
                       const Position3& target) {
  const ad::Value theta = ad::constant(ad::Array::matrix(1, kin::kJoints, {theta_rad.begin(), theta_rad.end()}));
  return mse(model, theta, target).item();
}

CompensationResult compensate(const model::BoTERModel& model, const JointsDeg& theta_initial_deg,
                              const Position3& target, const SolverConfig& cfg, const data::JointRanges& limits) {
  cfg.validate();
  if (!model.frozen()) throw std::logic_error("compensate: model must be frozen");
  if (!target.allFinite()) throw std::invalid_argument("compensate: target is not finite");

  CompensationResult r;
  r.theta_initial_deg = theta_initial_deg;
  const auto start = kin::JointAngles::from_degrees(theta_initial_deg).rad();
  ad::Value theta = ad::parameter(ad::Array::matrix(1, kin::kJoints, {start.begin(), start.end()}));
  train::AdamW solver({theta}, cfg.learning_rate);

  double loss = 0.0;
  // Each pass evaluates the current angles first, so the recorded loss
  // always belongs to the returned angles.
  for (std::size_t it = 0;; ++it) {
    const ad::Value l = mse(model, theta, target);
    loss = l.item();
    if (it == 0) r.initial_loss = loss;
    if (loss < cfg.loss_threshold) {
      r.converged = true;
      break;
    }
    if (it == cfg.max_iterations) break;
    solver.zero_grad();
    ad::backward(l);
    solver.step();
    r.iterations = it + 1;
  }
  r.final_loss = loss;

  for (std::size_t j = 0; j < kin::kJoints; ++j) {
    r.theta_final_deg[j] = theta.value()[j] * 180.0 / kin::kPi;
    r.delta_theta_deg[j] = r.theta_final_deg[j] - theta_initial_deg[j];
  }
  r.within_limits = limits.contains(r.theta_final_deg);
  return r;
}

std::vector<Target> pick_targets(const data::SampleSet& set, std::size_t count, std::uint64_t seed) {
  auto idx = set.indices(data::Split::test);
  if (count > idx.size()) {
    throw std::invalid_argument("pick_targets: asked for " + std::to_string(count) + " targets but the test split has " +
                                std::to_string(idx.size()));
  }
  std::mt19937_64 rng(data::stream_seed(seed, 0x7A56));
  for (std::size_t i = idx.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(data::unit_uniform(rng) * static_cast<double>(i));
    std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
  }
  std::vector<Target> out;
  for (std::size_t k = 0; k < count; ++k) {
    const auto& s = set.samples[idx[k]];
    out.push_back({s.theoretical, s.theta_deg});
  }
  return out;
}

Verification verify(const data::ErrorWorld& world, const CompensationResult& result, const Position3& target) {
  Verification v;
  v.residual = data::true_position(world, result.theta_final_deg) - target;
  v.residual_norm = v.residual.norm();
  v.uncompensated_norm = (data::true_position(world, result.theta_initial_deg) - target).norm();
  return v;
}

VerificationSummary summarize(const std::vector<Verification>& checks, const std::vector<CompensationResult>& results) {
  if (checks.empty()) throw std::invalid_argument("summarize: no verifications");
  VerificationSummary s;
  s.count = checks.size();
  const double n = static_cast<double>(checks.size());
  for (int a = 0; a < 3; ++a) {
    double sum = 0.0, sq = 0.0;
    double hi = 0.0, lo = std::numeric_limits<double>::infinity();
    for (const auto& c : checks) {
      const double e = std::abs(c.residual[a]);
      sum += e;
      sq += e * e;
      hi = std::max(hi, e);
      lo = std::min(lo, e);
    }
    const double mean = sum / n;
    auto& ax = s.axes[static_cast<std::size_t>(a)];
    ax.stddev = std::sqrt(std::max(0.0, sq / n - mean * mean));
    ax.max = hi;
    ax.min = lo;
  }
  for (const auto& c : checks) {
    s.mean_norm += c.residual_norm / n;
    s.mean_uncompensated_norm += c.uncompensated_norm / n;
    s.max_norm = std::max(s.max_norm, c.residual_norm);
  }
  s.converged = static_cast<std::size_t>(std::count_if(results.begin(), results.end(),
                                                       [](const CompensationResult& r) { return r.converged; }));
  return s;
}

std::string format_summary(const VerificationSummary& s) {
  static const char* names[] = {"X", "Y", "Z"};
  std::ostringstream os;
  char line[160];
  os << "targets: " << s.count << ", converged: " << s.converged << '\n';
  std::snprintf(line, sizeof line, "%-4s %12s %12s %12s\n", "Axis", "StdDev(mm)", "Max(mm)", "Min(mm)");
  os << line;
  for (std::size_t a = 0; a < 3; ++a) {
    std::snprintf(line, sizeof line, "%-4s %12.6f %12.6f %12.6f\n", names[a], s.axes[a].stddev, s.axes[a].max,
                  s.axes[a].min);
    os << line;
  }
  std::snprintf(line, sizeof line, "mean |residual| %.6f mm (uncompensated %.6f mm), max %.6f mm\n", s.mean_norm,
                s.mean_uncompensated_norm, s.max_norm);
  os << line;
  return os.str();
}

}  // namespace spiboter::inverse
