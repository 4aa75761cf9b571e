#pragma once

// Synthetic error world, sampling, deterministic 8:1:1 splitting, and the
// dataset / world file formats.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "spiboter/kinematics.hpp"

namespace spiboter::data {

using kin::kJoints;
using kin::Position3;
using JointsDeg = std::array<double, kJoints>;

/// Half-widths of the uniform perturbations applied to the nominal arm.
struct WorldBounds {
  double link_mm = 0.5;          // per-link a and d
  double angle_deg = 0.1;        // per-link twist and joint offset
  double compliance_deg = 0.05;  // per-joint deflection coefficient
  double tool_mm = 0.0;          // tool translation per axis
  double noise_sigma_mm = 0.02;  // isotropic measurement noise

  void validate() const;
};

enum class ComplianceShape { cosine, sine };

struct ErrorWorld {
  kin::DHTable true_table;
  std::array<double, kJoints> compliance_rad{};
  ComplianceShape shape = ComplianceShape::cosine;
  double noise_sigma = 0.02;
  std::uint64_t seed = 0;
};

/// Per-joint sampling interval in degrees.
struct JointRanges {
  std::array<std::pair<double, double>, kJoints> deg{{
      {-90.0, 90.0},
      {-120.0, -60.0},
      {-60.0, 60.0},
      {-120.0, 120.0},
      {-120.0, 120.0},
      {-180.0, 180.0},
  }};

  void validate() const;
  bool contains(const JointsDeg& q) const;
};

enum class Split { train, val, test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct Sample {
  JointsDeg theta_deg{};
  Position3 measured = Position3::Zero();
  Position3 theoretical = Position3::Zero();
  Split split = Split::train;

  bool operator==(const Sample&) const = default;
};

struct SampleSet {
  std::vector<Sample> samples;
  std::uint64_t seed = 0;

  std::vector<std::size_t> indices(Split s) const;
  std::vector<Sample> subset(Split s) const;
};

/// Stream seed for item `index` of a run seeded with `seed`.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index);
/// Uniform double in [0, 1) from the top 53 bits.
double unit_uniform(std::mt19937_64& rng);
double standard_normal(std::mt19937_64& rng);

ErrorWorld generate_world(std::uint64_t seed, const WorldBounds& bounds,
                          const kin::DHTable& nominal = kin::ur5_table(),
                          ComplianceShape shape = ComplianceShape::cosine);

/// Noise-free position reached by the world's arm at the commanded angles.
Position3 true_position(const ErrorWorld& world, const JointsDeg& theta_deg);
/// True position plus isotropic Gaussian noise drawn from `rng`.
Position3 measure(const ErrorWorld& world, const JointsDeg& theta_deg, std::mt19937_64& rng);

/// Split sizes (train, val, test) for n samples: val = test = floor(n / 10).
std::array<std::size_t, 3> split_sizes(std::size_t n);
/// Labels from a seeded Fisher-Yates shuffle of the sample indices.
std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed);

SampleSet sample_dataset(const ErrorWorld& world, std::size_t n, std::uint64_t seed,
                         const JointRanges& ranges = {}, const kin::DHTable& nominal = kin::ur5_table());

/// Joint matrix in radians, one row per sample.
Eigen::MatrixXd joints_rad(const std::vector<Sample>& samples);
Eigen::MatrixX3d measured_matrix(const std::vector<Sample>& samples);
Eigen::MatrixX3d theoretical_matrix(const std::vector<Sample>& samples);

void write_dataset(const SampleSet& set, const std::filesystem::path& path, const std::string& header = {});
/// Reads the dataset CSV and recomputes theoretical positions from `nominal`.
/// Optional tx_mm,ty_mm,tz_mm columns are checked against the recomputation.
SampleSet read_dataset(const std::filesystem::path& path, const kin::DHTable& nominal = kin::ur5_table());

void write_world(const ErrorWorld& world, const std::filesystem::path& path, const std::string& header = {});
ErrorWorld read_world(const std::filesystem::path& path);

}  // namespace spiboter::data
