#pragma once

// Run configuration: a sectioned key = value text file.
//
//   [world]   seed, link_mm, angle_deg, compliance_deg, tool_mm,
//             noise_sigma_mm, compliance_shape (cos|sin)
//   [joints]  j1 .. j6 = "<lo_deg> <hi_deg>"
//   [dh]      table = ur5 | custom; joint1 .. joint6 = "<d_mm> <a_mm> <alpha_rad> <offset_rad>"
//   [model]   d_model, n_layer, n_head, d_hidden, mask, head, encoder (on|off), alpha_init
//   [train]   learning_rate, weight_decay, batch_size, max_epochs, clip_threshold, seed, loss_mode
//   [solver]  learning_rate, max_iterations, loss_threshold
//   [data]    n, split_seed
//   [targets] count, seed
//   [paths]   data, world, out, checkpoint
//
// '#' starts a comment. Unknown sections or keys are errors.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "spiboter/dataset.hpp"
#include "spiboter/inverse.hpp"
#include "spiboter/model.hpp"
#include "spiboter/training.hpp"

namespace spiboter::config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Paths {
  std::string data, world, out, checkpoint;
};

struct RunConfig {
  std::uint64_t world_seed = 1;
  data::WorldBounds bounds;
  data::ComplianceShape compliance_shape = data::ComplianceShape::cosine;
  data::JointRanges joints;
  kin::DHTable nominal = kin::ur5_table();
  model::ModelConfig model;
  train::TrainConfig train;
  inverse::SolverConfig solver;
  std::size_t n_samples = 724;
  std::uint64_t split_seed = 7;
  std::size_t target_count = 50;
  std::uint64_t target_seed = 18;
  Paths paths;

  void validate() const;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Every setting except paths, one per line in a fixed order.
std::string canonical_text(const RunConfig& cfg);
std::uint64_t config_hash(const RunConfig& cfg);

}  // namespace spiboter::config
