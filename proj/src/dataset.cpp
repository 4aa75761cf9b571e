#include "spiboter/dataset.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "spiboter/textio.hpp"

namespace spiboter::data {

void WorldBounds::validate() const {
  for (double v : {link_mm, angle_deg, compliance_deg, tool_mm, noise_sigma_mm}) {
    if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument("world bounds must be finite and non-negative");
  }
  if (angle_deg >= 90.0) throw std::invalid_argument("world angle bound must stay below 90 degrees");
}

void JointRanges::validate() const {
  for (std::size_t j = 0; j < kJoints; ++j) {
    const auto [lo, hi] = deg[j];
    if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi || lo < -180.0 || hi > 180.0) {
      throw std::invalid_argument("joint range " + std::to_string(j + 1) + " must satisfy -180 <= lo <= hi <= 180");
    }
  }
}

bool JointRanges::contains(const JointsDeg& q) const {
  for (std::size_t j = 0; j < kJoints; ++j)
    if (q[j] < deg[j].first || q[j] > deg[j].second) return false;
  return true;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "' (expected train, val or test)");
}

std::vector<std::size_t> SampleSet::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == s) out.push_back(i);
  return out;
}

std::vector<Sample> SampleSet::subset(Split s) const {
  std::vector<Sample> out;
  for (const auto& smp : samples)
    if (smp.split == s) out.push_back(smp);
  return out;
}

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Unbiased integer in [0, bound) by rejection.
std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

double symmetric(std::mt19937_64& rng, double half_width) { return (2.0 * unit_uniform(rng) - 1.0) * half_width; }
}  // namespace

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index) { return splitmix64(splitmix64(seed) ^ index); }

double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double standard_normal(std::mt19937_64& rng) {
  // Box-Muller; u1 in (0, 1].
  const double u1 = 1.0 - unit_uniform(rng);
  const double u2 = unit_uniform(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kin::kPi * u2);
}

ErrorWorld generate_world(std::uint64_t seed, const WorldBounds& bounds, const kin::DHTable& nominal,
                          ComplianceShape shape) {
  bounds.validate();
  nominal.validate();
  std::mt19937_64 rng(stream_seed(seed, 0xD1CEULL));
  ErrorWorld w;
  w.seed = seed;
  w.shape = shape;
  w.noise_sigma = bounds.noise_sigma_mm;
  w.true_table = nominal;
  w.true_table.name = nominal.name + "-perturbed";
  const double angle = kin::deg_to_rad(bounds.angle_deg);
  for (auto& row : w.true_table.rows) {
    row.d += symmetric(rng, bounds.link_mm);
    row.a += symmetric(rng, bounds.link_mm);
    row.alpha = kin::wrap_angle(row.alpha + symmetric(rng, angle));
    row.theta_offset += symmetric(rng, angle);
  }
  for (auto& c : w.compliance_rad) c = symmetric(rng, kin::deg_to_rad(bounds.compliance_deg));
  for (int i = 0; i < 3; ++i) w.true_table.tool(i, 3) += symmetric(rng, bounds.tool_mm);
  return w;
}

Position3 true_position(const ErrorWorld& world, const JointsDeg& theta_deg) {
  std::array<double, kJoints> eff{};
  for (std::size_t j = 0; j < kJoints; ++j) {
    const double th = kin::deg_to_rad(theta_deg[j]);
    const double bend = world.shape == ComplianceShape::cosine ? std::cos(th) : std::sin(th);
    eff[j] = th + world.compliance_rad[j] * bend;
  }
  return kin::forward_kinematics(world.true_table, eff);
}

Position3 measure(const ErrorWorld& world, const JointsDeg& theta_deg, std::mt19937_64& rng) {
  Position3 p = true_position(world, theta_deg);
  if (world.noise_sigma > 0.0) {
    for (int i = 0; i < 3; ++i) p[i] += world.noise_sigma * standard_normal(rng);
  }
  return p;
}

std::array<std::size_t, 3> split_sizes(std::size_t n) {
  const std::size_t tenth = n / 10;
  return {n - 2 * tenth, tenth, tenth};
}

std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(stream_seed(seed, 0x5B117ULL));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[bounded(rng, i)]);
  const auto sizes = split_sizes(n);
  std::vector<Split> labels(n, Split::train);
  for (std::size_t k = 0; k < n; ++k) {
    if (k >= sizes[0] + sizes[1]) {
      labels[order[k]] = Split::test;
    } else if (k >= sizes[0]) {
      labels[order[k]] = Split::val;
    }
  }
  return labels;
}

SampleSet sample_dataset(const ErrorWorld& world, std::size_t n, std::uint64_t seed, const JointRanges& ranges,
                         const kin::DHTable& nominal) {
  if (n < 10) throw std::invalid_argument("sample_dataset: need at least 10 samples, got " + std::to_string(n));
  ranges.validate();
  SampleSet set;
  set.seed = seed;
  set.samples.resize(n);
  const auto labels = assign_splits(n, seed);
  // Each sample owns an RNG stream, so the result does not depend on order.
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(stream_seed(seed, i + 1));
    Sample& s = set.samples[i];
    for (std::size_t j = 0; j < kJoints; ++j) {
      const auto [lo, hi] = ranges.deg[j];
      s.theta_deg[j] = lo + (hi - lo) * unit_uniform(rng);
    }
    s.measured = measure(world, s.theta_deg, rng);
    s.theoretical = kin::forward_kinematics(nominal, kin::JointAngles::from_degrees(s.theta_deg));
    s.split = labels[i];
  }
  return set;
}

Eigen::MatrixXd joints_rad(const std::vector<Sample>& samples) {
  Eigen::MatrixXd q(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(kJoints));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto angles = kin::JointAngles::from_degrees(samples[i].theta_deg);
    for (std::size_t j = 0; j < kJoints; ++j) q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = angles[j];
  }
  return q;
}

Eigen::MatrixX3d measured_matrix(const std::vector<Sample>& samples) {
  Eigen::MatrixX3d m(static_cast<Eigen::Index>(samples.size()), 3);
  for (std::size_t i = 0; i < samples.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = samples[i].measured.transpose();
  return m;
}

Eigen::MatrixX3d theoretical_matrix(const std::vector<Sample>& samples) {
  Eigen::MatrixX3d m(static_cast<Eigen::Index>(samples.size()), 3);
  for (std::size_t i = 0; i < samples.size(); ++i)
    m.row(static_cast<Eigen::Index>(i)) = samples[i].theoretical.transpose();
  return m;
}

namespace {
constexpr const char* kDatasetHeader = "j1_deg,j2_deg,j3_deg,j4_deg,j5_deg,j6_deg,x_mm,y_mm,z_mm,split";
constexpr const char* kDatasetHeaderWithTheory =
    "j1_deg,j2_deg,j3_deg,j4_deg,j5_deg,j6_deg,x_mm,y_mm,z_mm,tx_mm,ty_mm,tz_mm,split";
constexpr double kTheoryTolerance = 1e-9;
}  // namespace

void write_dataset(const SampleSet& set, const std::filesystem::path& path, const std::string& header) {
  std::ostringstream os;
  if (!header.empty()) os << header << '\n';
  os << kDatasetHeader << '\n';
  for (const auto& s : set.samples) {
    for (double a : s.theta_deg) os << io::format_double(a) << ',';
    for (int i = 0; i < 3; ++i) os << io::format_double(s.measured[i]) << ',';
    os << to_string(s.split) << '\n';
  }
  io::write_file(path, os.str());
}

SampleSet read_dataset(const std::filesystem::path& path, const kin::DHTable& nominal) {
  const std::string text = io::read_file(path);
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  bool with_theory = false;
  SampleSet set;
  static const char* kNames[] = {"j1_deg", "j2_deg", "j3_deg", "j4_deg", "j5_deg", "j6_deg", "x_mm",
                                 "y_mm",   "z_mm",   "tx_mm",  "ty_mm",  "tz_mm"};
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view row = io::trim(line);
    if (row.empty() || row.front() == '#') continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    const auto cells = io::split(row, ',');
    if (!have_header) {
      if (cells.size() != 10 && cells.size() != 13) {
        throw io::ParseError(where + ": line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                             " columns, expected 10 (" + kDatasetHeader + ")");
      }
      with_theory = cells.size() == 13;
      const std::string_view expected = with_theory ? kDatasetHeaderWithTheory : kDatasetHeader;
      if (row != expected) {
        throw io::ParseError(where + ": line " + std::to_string(line_no) + " header must read '" +
                             std::string(expected) + "'");
      }
      have_header = true;
      continue;
    }
    const std::size_t expected_cols = with_theory ? 13 : 10;
    if (cells.size() != expected_cols) {
      throw io::ParseError(where + ": line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                           " columns, expected " + std::to_string(expected_cols));
    }
    Sample s;
    auto cell = [&](std::size_t c) {
      return io::parse_double(cells[c], where + ": line " + std::to_string(line_no) + " column " + kNames[c]);
    };
    for (std::size_t j = 0; j < kJoints; ++j) s.theta_deg[j] = cell(j);
    for (std::size_t c = 0; c < 3; ++c) s.measured[static_cast<Eigen::Index>(c)] = cell(6 + c);
    for (double v : s.theta_deg)
      if (!std::isfinite(v)) throw io::ParseError(where + ": non-finite joint angle");
    if (!s.measured.allFinite()) throw io::ParseError(where + ": non-finite position");
    s.theoretical = kin::forward_kinematics(nominal, kin::JointAngles::from_degrees(s.theta_deg));
    if (with_theory) {
      const Position3 stored(cell(9), cell(10), cell(11));
      if ((stored - s.theoretical).cwiseAbs().maxCoeff() > kTheoryTolerance) {
        throw io::ParseError(where + ": theoretical position does not match the nominal table");
      }
    }
    try {
      s.split = parse_split(std::string(io::trim(cells.back())));
    } catch (const std::invalid_argument& e) {
      throw io::ParseError(where + ": line " + std::to_string(line_no) + " column split: " + e.what());
    }
    set.samples.push_back(s);
  }
  if (!have_header) throw io::ParseError(path.string() + ": missing header row");
  return set;
}

void write_world(const ErrorWorld& world, const std::filesystem::path& path, const std::string& header) {
  std::ostringstream os;
  if (!header.empty()) os << header << '\n';
  os << "spiboter-world\nformat_version 1\n";
  os << "seed " << world.seed << '\n';
  os << "noise_sigma_mm " << io::format_double(world.noise_sigma) << '\n';
  os << "compliance_shape " << (world.shape == ComplianceShape::cosine ? "cos" : "sin") << '\n';
  os << "compliance_rad";
  for (double c : world.compliance_rad) os << ' ' << io::format_double(c);
  os << "\ndh_table " << world.true_table.name << '\n';
  for (const auto& r : world.true_table.rows) {
    os << "dh_row " << io::format_double(r.d) << ' ' << io::format_double(r.a) << ' ' << io::format_double(r.alpha)
       << ' ' << io::format_double(r.theta_offset) << '\n';
  }
  os << "tool";
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) os << ' ' << io::format_double(world.true_table.tool(r, c));
  os << "\nend\n";
  io::write_file(path, os.str());
}

ErrorWorld read_world(const std::filesystem::path& path) {
  const std::string text = io::read_file(path);
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::vector<std::string>> records;
  std::vector<std::size_t> lines;
  while (std::getline(in, line)) {
    ++line_no;
    if (io::trim(line).empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::vector<std::string> f;
    for (std::string w; ss >> w;) f.push_back(w);
    records.push_back(f);
    lines.push_back(line_no);
  }
  std::size_t at = 0;
  auto where = [&] { return path.string() + ":" + std::to_string(at < lines.size() ? lines[at] : line_no); };
  auto take = [&](const std::string& key, std::size_t values) {
    if (at >= records.size() || records[at].empty() || records[at][0] != key) {
      throw io::ParseError(where() + ": expected '" + key + "'");
    }
    if (records[at].size() != values + 1) throw io::ParseError(where() + ": '" + key + "' needs " + std::to_string(values) + " values");
    return records[at++];
  };
  if (at >= records.size() || records[at] != std::vector<std::string>{"spiboter-world"}) {
    throw io::ParseError(where() + ": not a spiboter world file");
  }
  ++at;
  if (take("format_version", 1)[1] != "1") throw io::ParseError(where() + ": unsupported world format version");
  ErrorWorld w;
  w.seed = static_cast<std::uint64_t>(io::parse_int(take("seed", 1)[1], where()));
  w.noise_sigma = io::parse_double(take("noise_sigma_mm", 1)[1], where());
  const auto shape = take("compliance_shape", 1)[1];
  if (shape != "cos" && shape != "sin") throw io::ParseError(where() + ": compliance_shape must be cos or sin");
  w.shape = shape == "cos" ? ComplianceShape::cosine : ComplianceShape::sine;
  const auto comp = take("compliance_rad", kJoints);
  for (std::size_t j = 0; j < kJoints; ++j) w.compliance_rad[j] = io::parse_double(comp[j + 1], where());
  w.true_table.name = take("dh_table", 1)[1];
  for (auto& r : w.true_table.rows) {
    const auto f = take("dh_row", 4);
    r = {io::parse_double(f[1], where()), io::parse_double(f[2], where()), io::parse_double(f[3], where()),
         io::parse_double(f[4], where())};
  }
  const auto tool = take("tool", 16);
  for (int i = 0; i < 16; ++i) w.true_table.tool(i / 4, i % 4) = io::parse_double(tool[static_cast<std::size_t>(i + 1)], where());
  take("end", 0);
  try {
    w.true_table.validate();
  } catch (const std::invalid_argument& e) {
    throw io::ParseError(path.string() + ": " + e.what());
  }
  if (!(w.noise_sigma >= 0.0)) throw io::ParseError(path.string() + ": noise_sigma_mm must be non-negative");
  return w;
}

}  // namespace spiboter::data
