#include "spiboter/config.hpp"

#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <vector>

#include "spiboter/textio.hpp"

namespace spiboter::config {

namespace {

using Setter = std::function<void(RunConfig&, const std::string&)>;

std::uint64_t to_u64(const std::string& v, const std::string& what) {
  const long long x = io::parse_int(v, what);
  if (x < 0) throw ConfigError(what + ": expected a non-negative integer, got '" + v + "'");
  return static_cast<std::uint64_t>(x);
}

std::vector<double> numbers(const std::string& v, std::size_t count, const std::string& what) {
  std::vector<double> out;
  std::istringstream is(v);
  std::string tok;
  while (is >> tok) out.push_back(io::parse_double(tok, what));
  if (out.size() != count) {
    throw ConfigError(what + ": expected " + std::to_string(count) + " numbers, got " + std::to_string(out.size()));
  }
  return out;
}

bool on_off(const std::string& v, const std::string& what) {
  if (v == "on" || v == "true") return true;
  if (v == "off" || v == "false") return false;
  throw ConfigError(what + ": expected on or off, got '" + v + "'");
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto num = [](auto member_of) {
      return [member_of](RunConfig& c, const std::string& v) { *member_of(c) = io::parse_double(v, "value"); };
    };
    auto count = [](auto member_of) {
      return [member_of](RunConfig& c, const std::string& v) {
        *member_of(c) = static_cast<std::size_t>(to_u64(v, "value"));
      };
    };
    auto seed = [](auto member_of) {
      return [member_of](RunConfig& c, const std::string& v) { *member_of(c) = to_u64(v, "value"); };
    };

    t["world.seed"] = seed([](RunConfig& c) { return &c.world_seed; });
    t["world.link_mm"] = num([](RunConfig& c) { return &c.bounds.link_mm; });
    t["world.angle_deg"] = num([](RunConfig& c) { return &c.bounds.angle_deg; });
    t["world.compliance_deg"] = num([](RunConfig& c) { return &c.bounds.compliance_deg; });
    t["world.tool_mm"] = num([](RunConfig& c) { return &c.bounds.tool_mm; });
    t["world.noise_sigma_mm"] = num([](RunConfig& c) { return &c.bounds.noise_sigma_mm; });
    t["world.compliance_shape"] = [](RunConfig& c, const std::string& v) {
      if (v == "cos") {
        c.compliance_shape = data::ComplianceShape::cosine;
      } else if (v == "sin") {
        c.compliance_shape = data::ComplianceShape::sine;
      } else {
        throw ConfigError("expected cos or sin, got '" + v + "'");
      }
    };
    for (std::size_t j = 0; j < kin::kJoints; ++j) {
      t["joints.j" + std::to_string(j + 1)] = [j](RunConfig& c, const std::string& v) {
        const auto r = numbers(v, 2, "range");
        c.joints.deg[j] = {r[0], r[1]};
      };
      t["dh.joint" + std::to_string(j + 1)] = [j](RunConfig& c, const std::string& v) {
        const auto r = numbers(v, 4, "dh row");
        c.nominal.rows[j] = {r[0], r[1], r[2], r[3]};
        // Rows identical to the stock table keep its name.
        const auto& ur5 = kin::ur5_table().rows;
        bool stock = true;
        for (std::size_t i = 0; i < kin::kJoints; ++i) {
          const auto& a = c.nominal.rows[i];
          stock = stock && a.d == ur5[i].d && a.a == ur5[i].a && a.alpha == ur5[i].alpha &&
                  a.theta_offset == ur5[i].theta_offset;
        }
        c.nominal.name = stock ? "ur5" : "custom";
      };
    }
    t["dh.table"] = [](RunConfig& c, const std::string& v) {
      if (v == "ur5") {
        c.nominal = kin::ur5_table();
      } else if (v != "custom") {
        throw ConfigError("unknown dh table '" + v + "' (expected ur5 or custom)");
      }
    };

    t["model.d_model"] = count([](RunConfig& c) { return &c.model.d_model; });
    t["model.n_layer"] = count([](RunConfig& c) { return &c.model.n_layer; });
    t["model.n_head"] = count([](RunConfig& c) { return &c.model.n_head; });
    t["model.d_hidden"] = count([](RunConfig& c) { return &c.model.d_hidden; });
    t["model.alpha_init"] = num([](RunConfig& c) { return &c.model.alpha_init; });
    t["model.mask"] = [](RunConfig& c, const std::string& v) { c.model.mask = model::parse_mask_kind(v); };
    t["model.head"] = [](RunConfig& c, const std::string& v) { c.model.head = model::parse_head_kind(v); };
    t["model.encoder"] = [](RunConfig& c, const std::string& v) { c.model.use_encoder = on_off(v, "encoder"); };

    t["train.learning_rate"] = num([](RunConfig& c) { return &c.train.learning_rate; });
    t["train.weight_decay"] = num([](RunConfig& c) { return &c.train.weight_decay; });
    t["train.batch_size"] = count([](RunConfig& c) { return &c.train.batch_size; });
    t["train.max_epochs"] = count([](RunConfig& c) { return &c.train.max_epochs; });
    t["train.clip_threshold"] = num([](RunConfig& c) { return &c.train.clip_threshold; });
    t["train.seed"] = seed([](RunConfig& c) { return &c.train.seed; });
    t["train.loss_mode"] = [](RunConfig& c, const std::string& v) { c.train.loss_mode = train::parse_loss_mode(v); };

    t["solver.learning_rate"] = num([](RunConfig& c) { return &c.solver.learning_rate; });
    t["solver.max_iterations"] = count([](RunConfig& c) { return &c.solver.max_iterations; });
    t["solver.loss_threshold"] = num([](RunConfig& c) { return &c.solver.loss_threshold; });

    t["data.n"] = count([](RunConfig& c) { return &c.n_samples; });
    t["data.split_seed"] = seed([](RunConfig& c) { return &c.split_seed; });
    t["targets.count"] = count([](RunConfig& c) { return &c.target_count; });
    t["targets.seed"] = seed([](RunConfig& c) { return &c.target_seed; });

    t["paths.data"] = [](RunConfig& c, const std::string& v) { c.paths.data = v; };
    t["paths.world"] = [](RunConfig& c, const std::string& v) { c.paths.world = v; };
    t["paths.out"] = [](RunConfig& c, const std::string& v) { c.paths.out = v; };
    t["paths.checkpoint"] = [](RunConfig& c, const std::string& v) { c.paths.checkpoint = v; };
    return t;
  }();
  return table;
}

}  // namespace

void RunConfig::validate() const {
  bounds.validate();
  joints.validate();
  nominal.validate();
  model.validate();
  train.validate();
  solver.validate();
  if (n_samples < 10) throw ConfigError("data.n must be at least 10");
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::string section;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  for (std::size_t line_no = 1; std::getline(in, raw); ++line_no) {
    const std::string where = "config line " + std::to_string(line_no);
    std::string line(io::trim(raw.substr(0, raw.find('#'))));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = std::string(io::trim(std::string_view(line).substr(1, line.size() - 2)));
      static const std::set<std::string> known = {"world", "joints", "dh",      "model", "train",
                                                  "solver", "data",  "targets", "paths"};
      if (!known.count(section)) throw ConfigError(where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside of a section");
    const std::string key = section + "." + std::string(io::trim(std::string_view(line).substr(0, eq)));
    const std::string value(io::trim(std::string_view(line).substr(eq + 1)));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    try {
      it->second(cfg, value);
    } catch (const std::exception& e) {
      throw ConfigError(where + " (" + key + "): " + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) { return parse_config(io::read_file(path)); }

std::string canonical_text(const RunConfig& c) {
  using io::format_double;
  std::ostringstream os;
  os << "[world]\n"
     << "seed = " << c.world_seed << '\n'
     << "link_mm = " << format_double(c.bounds.link_mm) << '\n'
     << "angle_deg = " << format_double(c.bounds.angle_deg) << '\n'
     << "compliance_deg = " << format_double(c.bounds.compliance_deg) << '\n'
     << "tool_mm = " << format_double(c.bounds.tool_mm) << '\n'
     << "noise_sigma_mm = " << format_double(c.bounds.noise_sigma_mm) << '\n'
     << "compliance_shape = " << (c.compliance_shape == data::ComplianceShape::cosine ? "cos" : "sin") << '\n';
  os << "[joints]\n";
  for (std::size_t j = 0; j < kin::kJoints; ++j) {
    os << 'j' << j + 1 << " = " << format_double(c.joints.deg[j].first) << ' '
       << format_double(c.joints.deg[j].second) << '\n';
  }
  os << "[dh]\n"
     << "table = " << c.nominal.name << '\n';
  for (std::size_t j = 0; j < kin::kJoints; ++j) {
    const auto& r = c.nominal.rows[j];
    os << "joint" << j + 1 << " = " << format_double(r.d) << ' ' << format_double(r.a) << ' '
       << format_double(r.alpha) << ' ' << format_double(r.theta_offset) << '\n';
  }
  os << "[model]\n"
     << "d_model = " << c.model.d_model << '\n'
     << "n_layer = " << c.model.n_layer << '\n'
     << "n_head = " << c.model.n_head << '\n'
     << "d_hidden = " << c.model.d_hidden << '\n'
     << "mask = " << model::to_string(c.model.mask) << '\n'
     << "head = " << model::to_string(c.model.head) << '\n'
     << "encoder = " << (c.model.use_encoder ? "on" : "off") << '\n'
     << "alpha_init = " << format_double(c.model.alpha_init) << '\n';
  os << "[train]\n"
     << "learning_rate = " << format_double(c.train.learning_rate) << '\n'
     << "weight_decay = " << format_double(c.train.weight_decay) << '\n'
     << "batch_size = " << c.train.batch_size << '\n'
     << "max_epochs = " << c.train.max_epochs << '\n'
     << "clip_threshold = " << format_double(c.train.clip_threshold) << '\n'
     << "seed = " << c.train.seed << '\n'
     << "loss_mode = " << train::to_string(c.train.loss_mode) << '\n';
  os << "[solver]\n"
     << "learning_rate = " << format_double(c.solver.learning_rate) << '\n'
     << "max_iterations = " << c.solver.max_iterations << '\n'
     << "loss_threshold = " << format_double(c.solver.loss_threshold) << '\n';
  os << "[data]\n"
     << "n = " << c.n_samples << '\n'
     << "split_seed = " << c.split_seed << '\n';
  os << "[targets]\n"
     << "count = " << c.target_count << '\n'
     << "seed = " << c.target_seed << '\n';
  return os.str();
}

std::uint64_t config_hash(const RunConfig& cfg) { return io::fnv1a(canonical_text(cfg)); }

}  // namespace spiboter::config
