#include "spiboter/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "spiboter/calibration.hpp"
#include "spiboter/config.hpp"
#include "spiboter/dataset.hpp"
#include "spiboter/inverse.hpp"
#include "spiboter/loss.hpp"
#include "spiboter/model.hpp"
#include "spiboter/textio.hpp"
#include "spiboter/training.hpp"

namespace spiboter::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flags shared by the pipeline subcommands; unset optionals leave the
// config file value in place.
struct Common {
  std::string config;
  std::string data, world, out, checkpoint;
};

config::RunConfig load(const Common& c) {
  config::RunConfig cfg = c.config.empty() ? config::RunConfig{} : config::load_config(c.config);
  if (!c.data.empty()) cfg.paths.data = c.data;
  if (!c.world.empty()) cfg.paths.world = c.world;
  if (!c.out.empty()) cfg.paths.out = c.out;
  if (!c.checkpoint.empty()) cfg.paths.checkpoint = c.checkpoint;
  return cfg;
}

const std::string& require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string("missing ") + flag + " (flag or [paths] entry)");
  return value;
}

std::vector<data::Sample> select(const data::SampleSet& set, const std::string& split) {
  if (split == "all") return set.samples;
  return set.subset(data::parse_split(split));
}

std::string matrix_csv(const ad::Array& m, const std::string& header) {
  std::ostringstream os;
  os << header << '\n';
  const std::size_t n = m.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) os << (j ? "," : "") << io::format_double(m.at(i, j));
    os << '\n';
  }
  return os.str();
}

ad::Value positions(const Eigen::MatrixX3d& p) {
  ad::Array a({static_cast<std::size_t>(p.rows()), 3});
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (int c = 0; c < 3; ++c) a.at(static_cast<std::size_t>(i), static_cast<std::size_t>(c)) = p(i, c);
  return ad::constant(std::move(a));
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"SPI-BoTER robot positioning error compensation", "spiboter"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(io::kToolVersion));

  Common common;
  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", common.config, "run configuration file"); };

  // gen-data
  std::optional<std::uint64_t> gen_seed, gen_world_seed;
  std::optional<std::size_t> gen_n;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic error world and dataset");
  add_config(gen);
  gen->add_option("--seed", gen_seed, "sampling and split seed");
  gen->add_option("--world-seed", gen_world_seed, "error world seed");
  gen->add_option("--n", gen_n, "number of samples");
  gen->add_option("--out", common.data, "dataset CSV to write");
  gen->add_option("--world", common.world, "world file to write (default: <out>.world)");

  // train
  std::optional<std::size_t> tr_epochs;
  std::optional<std::string> tr_loss;
  auto* tr = app.add_subcommand("train", "train a model and keep the best validation checkpoint");
  add_config(tr);
  tr->add_option("--data", common.data, "dataset CSV");
  tr->add_option("--out", common.out, "output directory");
  tr->add_option("--epochs", tr_epochs, "override train.max_epochs");
  tr->add_option("--loss-mode", tr_loss, "spi or data_only");

  // eval
  std::string ev_split = "test";
  auto* ev = app.add_subcommand("eval", "report metrics of a checkpoint on a dataset split");
  add_config(ev);
  ev->add_option("--checkpoint", common.checkpoint, "checkpoint file");
  ev->add_option("--data", common.data, "dataset CSV");
  ev->add_option("--split", ev_split, "train, val, test or all");
  ev->add_option("--out", common.out, "also write the report to this file");

  // compensate
  std::optional<std::size_t> cp_count;
  std::optional<std::uint64_t> cp_seed;
  std::string cp_targets;
  auto* cp = app.add_subcommand("compensate", "solve joint corrections for target positions");
  add_config(cp);
  cp->add_option("--checkpoint", common.checkpoint, "checkpoint file");
  cp->add_option("--data", common.data, "dataset CSV; targets are drawn from its test split");
  cp->add_option("--targets", cp_targets, "CSV of x_mm,y_mm,z_mm,j1_deg..j6_deg instead of --data");
  cp->add_option("--count", cp_count, "number of targets drawn from --data");
  cp->add_option("--seed", cp_seed, "target selection seed");
  cp->add_option("--world", common.world, "world file used to verify the corrections");
  cp->add_option("--out", common.out, "result CSV");

  // calibrate
  std::string cal_pairs;
  auto* cal = app.add_subcommand("calibrate", "fit the base-to-world rigid transform from point pairs");
  cal->add_option("--pairs", cal_pairs, "CSV of base_x,base_y,base_z,world_x,world_y,world_z (mm)")->required();
  cal->add_option("--out", common.out, "transform file to write");

  // export-dm
  std::size_t dm_batch = 32;
  std::string dm_split = "test";
  auto* dm = app.add_subcommand("export-dm", "export normalized distance matrices of one batch");
  add_config(dm);
  dm->add_option("--checkpoint", common.checkpoint, "checkpoint file");
  dm->add_option("--data", common.data, "dataset CSV");
  dm->add_option("--split", dm_split, "train, val, test or all");
  dm->add_option("--batch", dm_batch, "number of leading samples of the split");
  dm->add_option("--out", common.out, "output prefix; writes <prefix>_theory.csv, _pred.csv, _diff.csv");

  // ablate
  std::string ab_suite = "structure";
  auto* ab = app.add_subcommand("ablate", "train the ablation groups and compare them on the test split");
  add_config(ab);
  ab->add_option("--data", common.data, "dataset CSV");
  ab->add_option("--suite", ab_suite, "structure or loss");
  ab->add_option("--out", common.out, "table file to write");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << io::kToolVersion << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "spiboter: " << e.what() << '\n' << app.help();
    return 2;
  }

  try {
    config::RunConfig cfg = load(common);

    if (gen->parsed()) {
      if (gen_seed) cfg.split_seed = *gen_seed;
      if (gen_world_seed) cfg.world_seed = *gen_world_seed;
      if (gen_n) cfg.n_samples = *gen_n;
      cfg.validate();
      const fs::path data_path = require(cfg.paths.data, "--out");
      const fs::path world_path = cfg.paths.world.empty() ? fs::path(data_path.string() + ".world") : fs::path(cfg.paths.world);
      const std::string header = io::header_line(config::config_hash(cfg));
      const auto world = data::generate_world(cfg.world_seed, cfg.bounds, cfg.nominal, cfg.compliance_shape);
      const auto set = data::sample_dataset(world, cfg.n_samples, cfg.split_seed, cfg.joints, cfg.nominal);
      data::write_dataset(set, data_path, header);
      data::write_world(world, world_path, header);
      const auto sizes = data::split_sizes(cfg.n_samples);
      out << "wrote " << cfg.n_samples << " samples (" << sizes[0] << " train, " << sizes[1] << " val, " << sizes[2]
          << " test) to " << data_path.string() << "\n";
      return 0;
    }

    if (tr->parsed()) {
      if (tr_epochs) cfg.train.max_epochs = *tr_epochs;
      if (tr_loss) cfg.train.loss_mode = train::parse_loss_mode(*tr_loss);
      cfg.validate();
      const auto set = data::read_dataset(require(cfg.paths.data, "--data"), cfg.nominal);
      const fs::path dir = require(cfg.paths.out, "--out");
      const std::string header = io::header_line(config::config_hash(cfg));
      model::BoTERModel m(cfg.model, cfg.nominal, cfg.train.seed);
      train::TrainResult result = [&] {
        try {
          return train::train(std::move(m), set, cfg.train, [&](const train::EpochRecord& e) {
            if (e.epoch % 10 == 0 || e.epoch == 1 || e.epoch == cfg.train.max_epochs) {
              out << "epoch " << e.epoch << " l_data " << e.l_data << " l_physics " << e.l_physics << " val_mae_3d "
                  << e.val_mae_3d << "\n";
            }
          });
        } catch (const train::DivergenceError& e) {
          throw std::runtime_error(e.what());
        }
      }();
      result.best.save(dir / "best", header);
      io::write_file(dir / "history.csv", train::format_history_csv(result.history, header));
      std::ostringstream report;
      report << header << '\n'
             << "best epoch " << result.history.best_epoch << '\n';
      for (auto split : {data::Split::train, data::Split::val, data::Split::test}) {
        const auto samples = set.subset(split);
        report << '\n'
               << train::format_report(train::evaluate(result.best, samples), data::to_string(split)) << '\n'
               << train::format_report(train::evaluate_baseline(samples), data::to_string(split) + " (DH only)");
      }
      io::write_file(dir / "metrics.txt", report.str());
      out << "best epoch " << result.history.best_epoch << ", checkpoint " << (dir / "best").string() << "\n";
      return 0;
    }

    if (ev->parsed()) {
      const auto m = model::BoTERModel::load(require(cfg.paths.checkpoint, "--checkpoint"));
      const auto set = data::read_dataset(require(cfg.paths.data, "--data"), m.nominal());
      const auto samples = select(set, ev_split);
      if (samples.empty()) throw std::invalid_argument("split '" + ev_split + "' is empty");
      const std::string text = train::format_report(train::evaluate(m, samples), ev_split) + '\n' +
                               train::format_report(train::evaluate_baseline(samples), ev_split + " (DH only)");
      out << text;
      if (!cfg.paths.out.empty()) io::write_file(cfg.paths.out, io::header_line(config::config_hash(cfg)) + '\n' + text);
      return 0;
    }

    if (cp->parsed()) {
      if (cp_count) cfg.target_count = *cp_count;
      if (cp_seed) cfg.target_seed = *cp_seed;
      cfg.validate();
      auto m = model::BoTERModel::load(require(cfg.paths.checkpoint, "--checkpoint"));
      m.freeze();
      std::vector<inverse::Target> targets;
      if (!cp_targets.empty()) {
        const std::string text = io::read_file(cp_targets);
        std::istringstream in(text);
        std::string line;
        bool header_seen = false;
        for (std::size_t no = 1; std::getline(in, line); ++no) {
          if (line.empty() || line.front() == '#') continue;
          if (!header_seen) {
            header_seen = true;
            continue;
          }
          const auto cells = io::split(line, ',');
          if (cells.size() != 9) {
            throw io::ParseError("targets line " + std::to_string(no) + " has " + std::to_string(cells.size()) +
                                 " columns, expected 9");
          }
          inverse::Target t;
          for (int c = 0; c < 3; ++c)
            t.position[c] = io::parse_double(cells[static_cast<std::size_t>(c)], "line " + std::to_string(no));
          for (std::size_t j = 0; j < kin::kJoints; ++j)
            t.theta_initial_deg[j] = io::parse_double(cells[3 + j], "line " + std::to_string(no));
          targets.push_back(t);
        }
      } else {
        const auto set = data::read_dataset(require(cfg.paths.data, "--data or --targets"), m.nominal());
        targets = inverse::pick_targets(set, cfg.target_count, cfg.target_seed);
      }
      std::optional<data::ErrorWorld> world;
      if (!cfg.paths.world.empty()) world = data::read_world(cfg.paths.world);

      const std::string header = io::header_line(config::config_hash(cfg));
      std::ostringstream csv;
      csv << header << '\n'
          << "x_mm,y_mm,z_mm,j1_deg,j2_deg,j3_deg,j4_deg,j5_deg,j6_deg,"
             "d1_deg,d2_deg,d3_deg,d4_deg,d5_deg,d6_deg,iterations,final_loss,converged,within_limits";
      if (world) csv << ",residual_mm,uncompensated_mm";
      csv << '\n';
      std::vector<inverse::CompensationResult> results;
      std::vector<inverse::Verification> checks;
      for (const auto& t : targets) {
        const auto r = inverse::compensate(m, t.theta_initial_deg, t.position, cfg.solver, cfg.joints);
        results.push_back(r);
        for (int c = 0; c < 3; ++c) csv << io::format_double(t.position[c]) << ',';
        for (double v : t.theta_initial_deg) csv << io::format_double(v) << ',';
        for (double v : r.delta_theta_deg) csv << io::format_double(v) << ',';
        csv << r.iterations << ',' << io::format_double(r.final_loss) << ',' << (r.converged ? 1 : 0) << ','
            << (r.within_limits ? 1 : 0);
        if (world) {
          checks.push_back(inverse::verify(*world, r, t.position));
          csv << ',' << io::format_double(checks.back().residual_norm) << ','
              << io::format_double(checks.back().uncompensated_norm);
        }
        csv << '\n';
      }
      const fs::path out_path = require(cfg.paths.out, "--out");
      io::write_file(out_path, csv.str());
      const auto converged = std::count_if(results.begin(), results.end(), [](const auto& r) { return r.converged; });
      out << "converged " << converged << " of " << results.size() << "\n";
      if (world) {
        const std::string summary = inverse::format_summary(inverse::summarize(checks, results));
        io::write_file(out_path.string() + ".summary.txt", header + '\n' + summary);
        out << summary;
      }
      return 0;
    }

    if (cal->parsed()) {
      const std::string text = io::read_file(cal_pairs);
      std::istringstream in(text);
      std::string line;
      std::vector<Eigen::RowVector3d> base, world;
      bool header_seen = false;
      for (std::size_t no = 1; std::getline(in, line); ++no) {
        if (line.empty() || line.front() == '#') continue;
        if (!header_seen) {
          header_seen = true;
          continue;
        }
        const auto cells = io::split(line, ',');
        if (cells.size() != 6) {
          throw io::ParseError("pairs line " + std::to_string(no) + " has " + std::to_string(cells.size()) +
                               " columns, expected 6");
        }
        Eigen::RowVector3d b, w;
        for (int c = 0; c < 3; ++c) {
          b[c] = io::parse_double(cells[static_cast<std::size_t>(c)], "line " + std::to_string(no));
          w[c] = io::parse_double(cells[static_cast<std::size_t>(c) + 3], "line " + std::to_string(no));
        }
        base.push_back(b);
        world.push_back(w);
      }
      Eigen::MatrixX3d bm(static_cast<Eigen::Index>(base.size()), 3), wm(bm.rows(), 3);
      for (std::size_t i = 0; i < base.size(); ++i) {
        bm.row(static_cast<Eigen::Index>(i)) = base[i];
        wm.row(static_cast<Eigen::Index>(i)) = world[i];
      }
      const auto t = calib::fit_rigid_transform(bm, wm);
      std::ostringstream os;
      os << io::header_line(config::config_hash(cfg)) << '\n';
      for (int r = 0; r < 3; ++r) {
        os << "rotation";
        for (int c = 0; c < 3; ++c) os << ' ' << io::format_double(t.rotation(r, c));
        os << '\n';
      }
      os << "translation_mm";
      for (int c = 0; c < 3; ++c) os << ' ' << io::format_double(t.translation[c]);
      os << "\nrms_residual_mm " << io::format_double(calib::rms_residual(t, bm, wm)) << '\n';
      if (!cfg.paths.out.empty()) io::write_file(cfg.paths.out, os.str());
      out << os.str();
      return 0;
    }

    if (dm->parsed()) {
      const auto m = model::BoTERModel::load(require(cfg.paths.checkpoint, "--checkpoint"));
      const auto set = data::read_dataset(require(cfg.paths.data, "--data"), m.nominal());
      auto samples = select(set, dm_split);
      if (dm_batch < 2 || dm_batch > samples.size()) {
        throw std::invalid_argument("--batch must be between 2 and " + std::to_string(samples.size()));
      }
      samples.resize(dm_batch);
      const auto theory = loss::normalized_distance_matrix(positions(data::theoretical_matrix(samples)), false);
      const auto pred = loss::normalized_distance_matrix(
          positions(m.predict(data::joints_rad(samples))), true);
      const ad::Value diff = pred - theory;
      const std::string prefix = require(cfg.paths.out, "--out");
      const std::string header = io::header_line(config::config_hash(cfg));
      std::string cols;
      for (std::size_t j = 0; j < dm_batch; ++j) cols += (j ? ",s" : "s") + std::to_string(j);
      io::write_file(prefix + "_theory.csv", matrix_csv(theory.value(), header + '\n' + cols));
      io::write_file(prefix + "_pred.csv", matrix_csv(pred.value(), header + '\n' + cols));
      io::write_file(prefix + "_diff.csv", matrix_csv(diff.value(), header + '\n' + cols));
      out << "wrote " << dm_batch << "x" << dm_batch << " matrices with prefix " << prefix << "\n";
      return 0;
    }

    if (ab->parsed()) {
      cfg.validate();
      const auto set = data::read_dataset(require(cfg.paths.data, "--data"), cfg.nominal);
      std::vector<train::AblationGroup> groups;
      if (ab_suite == "structure") {
        groups = train::structure_groups(cfg.model);
      } else if (ab_suite == "loss") {
        groups = train::loss_groups(cfg.model);
      } else {
        throw UsageError("unknown --suite '" + ab_suite + "' (expected structure or loss)");
      }
      const auto table = train::format_ablation_table(train::run_ablation(groups, set, cfg.train, cfg.nominal));
      out << table;
      if (!cfg.paths.out.empty()) io::write_file(cfg.paths.out, io::header_line(config::config_hash(cfg)) + '\n' + table);
      return 0;
    }
  } catch (const UsageError& e) {
    err << "spiboter: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "spiboter: error: " << e.what() << '\n';
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace spiboter::cli
