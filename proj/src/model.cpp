#include "spiboter/model.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

#include "spiboter/textio.hpp"

namespace spiboter::model {

using ad::Shape;

std::string to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::spi: return "spi";
    case MaskKind::body: return "body";
    case MaskKind::none: return "none";
  }
  return "?";
}

std::string to_string(HeadKind kind) { return kind == HeadKind::residual ? "residual" : "linear"; }

MaskKind parse_mask_kind(const std::string& s) {
  if (s == "spi") return MaskKind::spi;
  if (s == "body") return MaskKind::body;
  if (s == "none") return MaskKind::none;
  throw std::invalid_argument("unknown mask kind '" + s + "' (expected spi, body or none)");
}

HeadKind parse_head_kind(const std::string& s) {
  if (s == "residual") return HeadKind::residual;
  if (s == "linear") return HeadKind::linear;
  throw std::invalid_argument("unknown head kind '" + s + "' (expected residual or linear)");
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_layer == 0 || n_head == 0 || d_hidden == 0) {
    throw std::invalid_argument("model dimensions must be positive");
  }
  if (d_model % n_head != 0) {
    throw std::invalid_argument("d_model " + std::to_string(d_model) + " is not divisible by n_head " +
                                std::to_string(n_head));
  }
  if (!std::isfinite(alpha_init)) throw std::invalid_argument("alpha_init must be finite");
}

Array build_mask(MaskKind kind) {
  static constexpr double spi[36] = {
      0, 0, 0, 0, 0, 0,  //
      0, 0, 0, 0, 0, 0,  //
      0, 0, 0, 0, 0, 0,  //
      1, 1, 0, 0, 0, 0,  //
      1, 1, 1, 0, 0, 0,  //
      1, 1, 1, 0, 0, 0,
  };
  static constexpr double body[36] = {
      0, 0, 1, 1, 1, 1,  //
      0, 0, 0, 1, 1, 1,  //
      1, 0, 0, 0, 1, 1,  //
      1, 1, 0, 0, 0, 1,  //
      1, 1, 1, 0, 0, 0,  //
      1, 1, 1, 1, 0, 0,
  };
  Array m({6, 6});
  if (kind == MaskKind::spi) std::copy(std::begin(spi), std::end(spi), m.data().begin());
  if (kind == MaskKind::body) std::copy(std::begin(body), std::end(body), m.data().begin());
  return m;
}

Value apply(const Linear& layer, const Value& x) { return ad::matmul(x, layer.weight) + layer.bias; }

Value embed_joints(const Embedding& embedding, const Value& joints) {
  const Shape& s = joints.shape();
  if (s.size() != 2 || s[1] != kin::kJoints) {
    throw ad::ShapeError("embed_joints: expected (B, 6) joint angles, got " + ad::shape_str(s));
  }
  const Value column = ad::reshape(joints, {s[0], kin::kJoints, 1});
  return ad::relu(column * embedding.weight + embedding.bias);
}

Value encoder_layer(const EncoderLayer& layer, const Value& x, const Array& mask, std::size_t n_head,
                    std::vector<Array>* attention) {
  const Shape& s = x.shape();
  const std::size_t batch = s[0], tokens = s[1], width = s[2];
  const std::size_t head_width = width / n_head;

  auto split_heads = [&](const Value& t) {
    return ad::permute(ad::reshape(t, {batch, tokens, n_head, head_width}), {0, 2, 1, 3});
  };
  const Value q = split_heads(apply(layer.query, x));
  const Value k = split_heads(apply(layer.key, x));
  const Value v = split_heads(apply(layer.value, x));

  const Value scores = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(head_width)));
  const Value weights = ad::softmax_masked(scores, mask);
  if (attention) attention->push_back(weights.value());

  const Value context = ad::reshape(ad::permute(ad::matmul(weights, v), {0, 2, 1, 3}), {batch, tokens, width});
  const Value attended = apply(layer.output, context);

  const Value x1 = ad::layer_norm(x + attended) * layer.norm1_gain + layer.norm1_bias;
  const Value ff = apply(layer.ff_out, ad::relu(apply(layer.ff_in, x1)));
  return ad::layer_norm(x1 + ff) * layer.norm2_gain + layer.norm2_bias;
}

Value encode(const std::vector<EncoderLayer>& layers, const Value& x, const Array& mask, std::size_t n_head,
             std::vector<Array>* attention) {
  Value h = x;
  for (const auto& layer : layers) h = encoder_layer(layer, h, mask, n_head, attention);
  return h;
}

Value head_predict(const Head& head, HeadKind kind, const Value& encoded) {
  const Shape& s = encoded.shape();
  if (s.size() != 3 || s[1] != kin::kJoints) {
    throw ad::ShapeError("head_predict: expected (B, 6, d_model), got " + ad::shape_str(s));
  }
  const Value flat = ad::reshape(encoded, {s[0], s[1] * s[2]});
  const Value a = ad::relu(apply(head.hidden, flat));
  const Value b = apply(head.inner, a);
  const Value z = kind == HeadKind::residual ? ad::relu(b + apply(head.shortcut, flat)) : ad::relu(b);
  return apply(head.out, ad::relu(z));
}

namespace {

// Uniform doubles in [-bound, bound] from the top 53 bits of a 64-bit engine.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : engine_(seed) {}

  Value uniform(Shape shape, double bound) {
    Array a(std::move(shape));
    for (double& v : a.data()) {
      const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
      v = (2.0 * u - 1.0) * bound;
    }
    return ad::parameter(std::move(a));
  }

  Linear linear(std::size_t in, std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l;
    l.weight = uniform({in, out}, bound);
    l.bias = uniform({out}, bound);
    return l;
  }

 private:
  std::mt19937_64 engine_;
};

Value filled(Shape shape, double v) { return ad::parameter(Array(std::move(shape), v)); }

}  // namespace

BoTERModel::BoTERModel(ModelConfig config, kin::DHTable nominal, std::uint64_t seed)
    : config_(config), nominal_(std::move(nominal)), mask_(build_mask(config.mask)) {
  config_.validate();
  nominal_.validate();
  Initializer init(seed);
  const std::size_t d = config_.d_model;
  // Embedding fan-in is one scalar angle per joint.
  embedding_.weight = init.uniform({kin::kJoints, d}, 1.0);
  embedding_.bias = init.uniform({kin::kJoints, d}, 1.0);
  if (config_.use_encoder) {
    for (std::size_t l = 0; l < config_.n_layer; ++l) {
      EncoderLayer layer;
      layer.query = init.linear(d, d);
      layer.key = init.linear(d, d);
      layer.value = init.linear(d, d);
      layer.output = init.linear(d, d);
      layer.ff_in = init.linear(d, 4 * d);
      layer.ff_out = init.linear(4 * d, d);
      layer.norm1_gain = filled({d}, 1.0);
      layer.norm1_bias = filled({d}, 0.0);
      layer.norm2_gain = filled({d}, 1.0);
      layer.norm2_bias = filled({d}, 0.0);
      layers_.push_back(std::move(layer));
    }
  }
  const std::size_t flat = kin::kJoints * d;
  head_.hidden = init.linear(flat, config_.d_hidden);
  head_.inner = init.linear(config_.d_hidden, config_.d_hidden);
  if (config_.head == HeadKind::residual) head_.shortcut = init.linear(flat, config_.d_hidden);
  head_.out = init.linear(config_.d_hidden, 3);
  alpha_ = ad::parameter(Array::scalar(config_.alpha_init));
  log_lambda_data_ = ad::parameter(Array::scalar(0.0));
  log_lambda_physics_ = ad::parameter(Array::scalar(0.0));
}

std::vector<std::pair<std::string, Value>> BoTERModel::named_parameters() const {
  std::vector<std::pair<std::string, Value>> out;
  auto add_linear = [&](const std::string& name, const Linear& l) {
    out.emplace_back(name + ".weight", l.weight);
    out.emplace_back(name + ".bias", l.bias);
  };
  out.emplace_back("embed.weight", embedding_.weight);
  out.emplace_back("embed.bias", embedding_.bias);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& layer = layers_[i];
    const std::string p = "encoder." + std::to_string(i) + ".";
    add_linear(p + "query", layer.query);
    add_linear(p + "key", layer.key);
    add_linear(p + "value", layer.value);
    add_linear(p + "output", layer.output);
    add_linear(p + "ff_in", layer.ff_in);
    add_linear(p + "ff_out", layer.ff_out);
    out.emplace_back(p + "norm1.gain", layer.norm1_gain);
    out.emplace_back(p + "norm1.bias", layer.norm1_bias);
    out.emplace_back(p + "norm2.gain", layer.norm2_gain);
    out.emplace_back(p + "norm2.bias", layer.norm2_bias);
  }
  add_linear("head.hidden", head_.hidden);
  add_linear("head.inner", head_.inner);
  if (config_.head == HeadKind::residual) add_linear("head.shortcut", head_.shortcut);
  add_linear("head.out", head_.out);
  out.emplace_back("alpha", alpha_);
  out.emplace_back("log_lambda_data", log_lambda_data_);
  out.emplace_back("log_lambda_physics", log_lambda_physics_);
  return out;
}

std::vector<Value> BoTERModel::parameters() const {
  std::vector<Value> out;
  for (auto& [name, v] : named_parameters()) out.push_back(v);
  return out;
}

std::size_t BoTERModel::encoder_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : named_parameters())
    if (name.rfind("encoder.", 0) == 0) n += v.size();
  return n;
}

std::vector<Array> BoTERModel::snapshot() const {
  std::vector<Array> out;
  for (const auto& v : parameters()) out.push_back(v.value());
  return out;
}

void BoTERModel::restore(const std::vector<Array>& values) {
  auto params = parameters();
  if (values.size() != params.size()) throw std::invalid_argument("restore: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (values[i].shape() != params[i].shape()) {
      throw ad::ShapeError("restore: shape mismatch for parameter " + std::to_string(i));
    }
    params[i].mutable_value() = values[i];
  }
}

BoTERModel BoTERModel::clone() const {
  BoTERModel copy(config_, nominal_, 0);
  copy.restore(snapshot());
  if (frozen_) copy.freeze();
  return copy;
}

void BoTERModel::freeze() {
  for (auto& v : parameters()) v.set_trainable(false);
  frozen_ = true;
}

Value BoTERModel::delta(const Value& joints, std::vector<Array>* attention) const {
  Value h = embed_joints(embedding_, joints);
  if (config_.use_encoder) h = encode(layers_, h, mask_, config_.n_head, attention);
  return head_predict(head_, config_.head, h);
}

Value BoTERModel::predict(const Value& joints, std::vector<Array>* attention) const {
  const Value theory = kin::forward_kinematics_graph(nominal_, joints);
  return theory + alpha_ * delta(joints, attention);
}

Eigen::MatrixX3d BoTERModel::predict(const Eigen::MatrixXd& joints_rad) const {
  const std::size_t n = static_cast<std::size_t>(joints_rad.rows());
  Array q({n, kin::kJoints});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < kin::kJoints; ++j)
      q.at(i, j) = joints_rad(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  const Value p = predict(ad::constant(std::move(q)));
  Eigen::MatrixX3d out(static_cast<Eigen::Index>(n), 3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = p.value().at(i, c);
  return out;
}

// Checkpoint layout, one record per line:
//   spiboter-checkpoint
//   format_version 1
//   dh_table <name>
//   dh_row <d> <a> <alpha> <theta_offset>      (x6)
//   tool <16 row-major values>
//   <config key> <value>                       (model config)
//   param <name> <rank> <dims...>
//   <values>
//   end
namespace {
constexpr int kFormatVersion = 1;

std::string join_values(std::span<const double> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ' ';
    s += io::format_double(v[i]);
  }
  return s;
}
}  // namespace

void BoTERModel::save(const std::filesystem::path& path, const std::string& header) const {
  std::ostringstream os;
  if (!header.empty()) os << header << '\n';
  os << "spiboter-checkpoint\n";
  os << "format_version " << kFormatVersion << '\n';
  os << "dh_table " << nominal_.name << '\n';
  for (const auto& r : nominal_.rows) {
    const double row[4] = {r.d, r.a, r.alpha, r.theta_offset};
    os << "dh_row " << join_values(row) << '\n';
  }
  std::vector<double> tool;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) tool.push_back(nominal_.tool(r, c));
  os << "tool " << join_values(tool) << '\n';
  os << "d_model " << config_.d_model << '\n';
  os << "n_layer " << config_.n_layer << '\n';
  os << "n_head " << config_.n_head << '\n';
  os << "d_hidden " << config_.d_hidden << '\n';
  os << "mask " << to_string(config_.mask) << '\n';
  os << "head " << to_string(config_.head) << '\n';
  os << "encoder " << (config_.use_encoder ? "on" : "off") << '\n';
  os << "alpha_init " << io::format_double(config_.alpha_init) << '\n';
  for (const auto& [name, v] : named_parameters()) {
    os << "param " << name << ' ' << v.shape().size();
    for (auto d : v.shape()) os << ' ' << d;
    os << '\n' << join_values(v.value().data()) << '\n';
  }
  os << "end\n";
  io::write_file(path, os.str());
}

BoTERModel BoTERModel::load(const std::filesystem::path& path) {
  const std::string text = io::read_file(path);
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto next = [&]() -> std::string {
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line[0] == '#') continue;
      return line;
    }
    throw io::ParseError(path.string() + ": unexpected end of checkpoint after line " + std::to_string(line_no));
  };
  auto where = [&] { return path.string() + ":" + std::to_string(line_no); };
  auto fields = [](const std::string& s) {
    std::vector<std::string> out;
    std::istringstream ss(s);
    for (std::string w; ss >> w;) out.push_back(w);
    return out;
  };
  auto expect_key = [&](const std::string& key) {
    auto f = fields(next());
    if (f.empty() || f[0] != key) throw io::ParseError(where() + ": expected '" + key + "'");
    return f;
  };

  if (io::trim(next()) != "spiboter-checkpoint") throw io::ParseError(where() + ": not a spiboter checkpoint");
  auto version = expect_key("format_version");
  if (version.size() != 2 || io::parse_int(version[1], where()) != kFormatVersion) {
    throw io::ParseError(where() + ": unsupported checkpoint format version");
  }
  kin::DHTable table;
  auto name = expect_key("dh_table");
  if (name.size() != 2) throw io::ParseError(where() + ": malformed dh_table record");
  table.name = name[1];
  for (auto& r : table.rows) {
    auto f = expect_key("dh_row");
    if (f.size() != 5) throw io::ParseError(where() + ": dh_row needs 4 values");
    r = {io::parse_double(f[1], where()), io::parse_double(f[2], where()), io::parse_double(f[3], where()),
         io::parse_double(f[4], where())};
  }
  auto tool = expect_key("tool");
  if (tool.size() != 17) throw io::ParseError(where() + ": tool needs 16 values");
  for (int i = 0; i < 16; ++i) table.tool(i / 4, i % 4) = io::parse_double(tool[static_cast<std::size_t>(i + 1)], where());

  ModelConfig cfg;
  auto size_field = [&](const std::string& key) {
    auto f = expect_key(key);
    if (f.size() != 2) throw io::ParseError(where() + ": malformed " + key);
    const long long v = io::parse_int(f[1], where());
    if (v <= 0) throw io::ParseError(where() + ": " + key + " must be positive");
    return static_cast<std::size_t>(v);
  };
  auto word_field = [&](const std::string& key) {
    auto f = expect_key(key);
    if (f.size() != 2) throw io::ParseError(where() + ": malformed " + key);
    return f[1];
  };
  cfg.d_model = size_field("d_model");
  cfg.n_layer = size_field("n_layer");
  cfg.n_head = size_field("n_head");
  cfg.d_hidden = size_field("d_hidden");
  try {
    cfg.mask = parse_mask_kind(word_field("mask"));
    cfg.head = parse_head_kind(word_field("head"));
  } catch (const std::invalid_argument& e) {
    throw io::ParseError(where() + ": " + e.what());
  }
  const std::string enc = word_field("encoder");
  if (enc != "on" && enc != "off") throw io::ParseError(where() + ": encoder must be on or off");
  cfg.use_encoder = enc == "on";
  cfg.alpha_init = io::parse_double(word_field("alpha_init"), where());

  BoTERModel model(cfg, table, 0);
  for (auto& [pname, value] : model.named_parameters()) {
    auto f = expect_key("param");
    if (f.size() < 3 || f[1] != pname) throw io::ParseError(where() + ": expected parameter '" + pname + "'");
    const auto rank = static_cast<std::size_t>(io::parse_int(f[2], where()));
    if (f.size() != 3 + rank) throw io::ParseError(where() + ": malformed shape for '" + pname + "'");
    Shape shape;
    for (std::size_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(io::parse_int(f[3 + i], where())));
    if (shape != value.shape()) {
      throw io::ParseError(where() + ": parameter '" + pname + "' has shape " + ad::shape_str(shape) + ", expected " +
                           ad::shape_str(value.shape()));
    }
    const std::string data = next();
    Array& dst = value.mutable_value();
    std::size_t i = 0;
    std::string_view rest(data);
    for (auto tok : io::split(rest, ' ')) {
      if (tok.empty()) continue;
      if (i >= dst.size()) throw io::ParseError(where() + ": too many values for '" + pname + "'");
      dst[i++] = io::parse_double(tok, where());
    }
    if (i != dst.size()) throw io::ParseError(where() + ": too few values for '" + pname + "'");
    if (!dst.all_finite()) throw io::ParseError(where() + ": non-finite values in '" + pname + "'");
  }
  if (io::trim(next()) != "end") throw io::ParseError(where() + ": expected 'end'");
  return model;
}

}  // namespace spiboter::model
