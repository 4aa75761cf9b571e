#pragma once

// Data branch (per-joint embedding, masked transformer encoder, residual
// head) and its fusion with the DH physics branch.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "spiboter/autodiff.hpp"
#include "spiboter/kinematics.hpp"

namespace spiboter::model {

using ad::Array;
using ad::Value;

/// Which joint pairs may not attend to each other.
enum class MaskKind { spi, body, none };
/// Prediction head: residual block or plain stacked linear layers.
enum class HeadKind { residual, linear };

std::string to_string(MaskKind kind);
std::string to_string(HeadKind kind);
MaskKind parse_mask_kind(const std::string& s);
HeadKind parse_head_kind(const std::string& s);

struct ModelConfig {
  std::size_t d_model = 126;
  std::size_t n_layer = 4;
  std::size_t n_head = 9;
  std::size_t d_hidden = 512;
  MaskKind mask = MaskKind::spi;
  double alpha_init = 0.1;
  HeadKind head = HeadKind::residual;
  bool use_encoder = true;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// 6 x 6 matrix, row = query joint, column = key joint, 1 = blocked.
Array build_mask(MaskKind kind);

struct Linear {
  Value weight;  // (in, out)
  Value bias;    // (out)
};

Value apply(const Linear& layer, const Value& x);

struct Embedding {
  Value weight;  // (6, d_model), row i maps joint i
  Value bias;    // (6, d_model)
};

struct EncoderLayer {
  Linear query, key, value, output;
  Linear ff_in, ff_out;  // d_model -> 4 d_model -> d_model
  Value norm1_gain, norm1_bias, norm2_gain, norm2_bias;
};

struct Head {
  Linear hidden;    // 6 d_model -> d_hidden
  Linear inner;     // d_hidden -> d_hidden
  Linear shortcut;  // 6 d_model -> d_hidden, residual head only
  Linear out;       // d_hidden -> 3
};

/// (B, 6) radians -> (B, 6, d_model) tokens, each joint through its own map.
Value embed_joints(const Embedding& embedding, const Value& joints);

/// One post-norm encoder layer. When `attention` is non-null the
/// (B, heads, 6, 6) attention weights are appended to it.
Value encoder_layer(const EncoderLayer& layer, const Value& x, const Array& mask, std::size_t n_head,
                    std::vector<Array>* attention = nullptr);

Value encode(const std::vector<EncoderLayer>& layers, const Value& x, const Array& mask, std::size_t n_head,
             std::vector<Array>* attention = nullptr);

/// (B, 6, d_model) -> (B, 3) compensation.
Value head_predict(const Head& head, HeadKind kind, const Value& encoded);

class BoTERModel {
 public:
  BoTERModel(ModelConfig config, kin::DHTable nominal, std::uint64_t seed);

  BoTERModel(BoTERModel&&) = default;
  BoTERModel& operator=(BoTERModel&&) = default;
  BoTERModel(const BoTERModel&) = delete;
  BoTERModel& operator=(const BoTERModel&) = delete;

  /// Deep copy with independent parameter storage.
  BoTERModel clone() const;

  const ModelConfig& config() const { return config_; }
  const kin::DHTable& nominal() const { return nominal_; }
  const Array& mask() const { return mask_; }

  /// Learned compensation for (B, 6) radians.
  Value delta(const Value& joints, std::vector<Array>* attention = nullptr) const;
  /// Physics branch plus scaled compensation, (B, 6) radians -> (B, 3) mm.
  Value predict(const Value& joints, std::vector<Array>* attention = nullptr) const;
  /// Gradient-free convenience over an N x 6 radian matrix.
  Eigen::MatrixX3d predict(const Eigen::MatrixXd& joints_rad) const;

  const Value& alpha() const { return alpha_; }
  const Value& log_lambda_data() const { return log_lambda_data_; }
  const Value& log_lambda_physics() const { return log_lambda_physics_; }

  /// Every trainable tensor with a stable dotted name.
  std::vector<std::pair<std::string, Value>> named_parameters() const;
  std::vector<Value> parameters() const;
  std::size_t encoder_parameter_count() const;

  std::vector<Array> snapshot() const;
  void restore(const std::vector<Array>& values);

  void freeze();
  bool frozen() const { return frozen_; }

  void save(const std::filesystem::path& path, const std::string& header = {}) const;
  static BoTERModel load(const std::filesystem::path& path);

 private:
  ModelConfig config_;
  kin::DHTable nominal_;
  Array mask_;
  Embedding embedding_;
  std::vector<EncoderLayer> layers_;
  Head head_;
  Value alpha_, log_lambda_data_, log_lambda_physics_;
  bool frozen_ = false;
};

}  // namespace spiboter::model
