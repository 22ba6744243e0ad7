// pgt: experiment runner, invariant checker and field exporter.
//
//   pgt run [SUITE] [--config PATH] [--set KEY=VALUE]... [--out DIR] [--seeds N]
//   pgt check [--level fast|full] [--config PATH] [--set KEY=VALUE]...
//   pgt export (CHECKPOINT | --oracle PROBLEM) [--grid N] [--config PATH] [--out DIR]
//
// Exit codes: 0 success, 2 training divergence, 64 usage, 65 config or data, 70 internal.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pgt/benchmarks.hpp"
#include "pgt/checkpoint.hpp"
#include "pgt/checks.hpp"
#include "pgt/config.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit : int { kOk = 0, kDiverged = 2, kUsage = 64, kConfig = 65, kInternal = 70 };

std::string cell_stem(const pgt::bench::CellResult& c) {
  std::string eta = pgt::text::format_double(c.spec.eta);
  return c.spec.suite + "_" + c.spec.problem.name() + "_" + c.spec.variant + "_n" + std::to_string(c.spec.n_obs) +
         "_eta" + eta + "_seed" + std::to_string(c.spec.seed);
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw pgt::Error("cannot write '" + path.string() + "'");
  out << content;
}

nlohmann::json summarize(const pgt::ExperimentConfig& cfg, const std::vector<pgt::bench::CellResult>& cells) {
  using nlohmann::json;
  json groups = json::array();
  std::vector<std::string> keys;
  std::map<std::string, std::vector<const pgt::bench::CellResult*>> by_group;
  for (const auto& c : cells) {
    const std::string k = c.spec.variant + "|" + std::to_string(c.spec.n_obs) + "|" + pgt::text::format_double(c.spec.eta);
    if (!by_group.count(k)) keys.push_back(k);
    by_group[k].push_back(&c);
  }
  for (const auto& k : keys) {
    const auto& members = by_group[k];
    std::vector<double> rel, res;
    bool diverged = false;
    for (const auto* c : members) {
      diverged = diverged || c->diverged;
      rel.push_back(c->report.rel_l2_total);
      res.push_back(c->report.pde_residual);
    }
    json g{{"model", members.front()->spec.variant},
           {"variant_flags", pgt::bench::variant_flags(members.front()->config)},
           {"M_or_Ntrain", members.front()->spec.n_obs},
           {"eta", members.front()->spec.eta},
           {"seeds", members.size()},
           {"params_count", members.front()->params_count},
           {"diverged", diverged}};
    if (!diverged) {
      g["median_rel_l2_total"] = pgt::bench::median(rel);
      g["median_pde_residual"] = pgt::bench::median(res);
    }
    groups.push_back(g);
  }
  std::vector<std::string> diverged;
  for (const auto& c : cells) {
    if (c.diverged) diverged.push_back(cell_stem(c));
  }
  return json{{"suite", cfg.suite},
              {"cells", cells.size()},
              {"seeds", cfg.seed_list()},
              {"steps", cfg.train.steps},
              {"groups", groups},
              {"diverged_cells", diverged}};
}

int cmd_run(pgt::ExperimentConfig cfg) {
  const fs::path out = cfg.out;
  fs::create_directories(out / "logs");
  fs::create_directories(out / "checkpoints");
  write_text(out / "config.resolved.txt", cfg.echo());

  const auto specs = pgt::bench::suite_cells(cfg.suite, cfg.plan());
  std::cerr << "running " << specs.size() << " " << cfg.suite << " cells\n";
  std::size_t finished = 0;
  const auto cells = pgt::bench::run_cells(specs, nullptr, [&](const pgt::bench::CellResult& c) {
    ++finished;
    std::cerr << "[" << finished << "/" << specs.size() << "] " << cell_stem(c) << " rel_l2="
              << (c.diverged ? std::string("diverged") : pgt::text::format_double(c.report.rel_l2_total))
              << " residual=" << pgt::text::format_double(c.report.pde_residual) << " (" << c.wall_seconds << " s)\n";
  });

  std::ostringstream csv;
  pgt::bench::write_results_header(csv);
  std::optional<std::string> first_divergence;
  for (const auto& c : cells) {
    pgt::bench::write_results_row(csv, c);
    std::ostringstream log;
    pgt::train::write_log_header(log);
    for (const auto& r : c.log) pgt::train::write_log_row(log, r);
    write_text(out / "logs" / (cell_stem(c) + ".csv"), log.str());
    const auto model = pgt::bench::restore_model(c);
    const fs::path ckpt = out / "checkpoints" / (cell_stem(c) + ".ckpt");
    pgt::checkpoint::save(ckpt.string(), pgt::checkpoint::make_checkpoint(*model, c.spec.problem));
    if (c.diverged && !first_divergence) {
      first_divergence = c.diagnostic + "; last good checkpoint: " + ckpt.string();
    }
  }
  write_text(out / "results.csv", csv.str());
  write_text(out / "summary.json", summarize(cfg, cells).dump(2) + "\n");
  std::cerr << "wrote " << (out / "results.csv").string() << "\n";
  if (first_divergence) {
    std::cerr << "error: training diverged: " << *first_divergence << "\n";
    return kDiverged;
  }
  return kOk;
}

int cmd_check(const std::string& level, const pgt::ExperimentConfig& cfg) {
  const auto results = pgt::checks::run(level == "full", cfg, std::cout);
  std::size_t failed = 0;
  for (const auto& r : results) failed += r.passed ? 0 : 1;
  std::cout << (failed == 0 ? "all " + std::to_string(results.size()) + " invariants passed"
                            : std::to_string(failed) + " of " + std::to_string(results.size()) + " invariants failed")
            << std::endl;
  return failed == 0 ? kOk : 1;
}

/// Fields of the run configuration that must agree with a checkpoint.
void check_compatible(const pgt::ExperimentConfig& cfg, const pgt::model::ModelConfig& stored, const pgt::Problem& problem) {
  static const std::set<std::string> variant_keys{"kind",          "use_gamma",     "use_pde_loss", "use_bc_ic",
                                                  "decoder_kind",  "variance_head", "pde_family",   "pde_alpha",
                                                  "pde_wave_speed", "spatial_dim",  "out_channels", "coord_lo",
                                                  "coord_hi",      "gamma_causal",  "gamma_normalized"};
  std::vector<std::string> diff;
  const auto expected = cfg.model.entries();
  const auto actual = stored.entries();
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (!variant_keys.count(expected[i].first) && expected[i].second != actual[i].second) {
      diff.push_back("model." + expected[i].first + ": config " + expected[i].second + ", checkpoint " + actual[i].second);
    }
  }
  const bool heat = problem.kind() == pgt::Problem::Kind::heat;
  const pgt::Problem configured = heat ? cfg.heat() : cfg.flow();
  if (configured.nu() != problem.nu()) {
    diff.push_back(std::string(heat ? "heat.alpha" : "ns.nu") + ": config " + pgt::text::format_double(configured.nu()) +
                   ", checkpoint " + pgt::text::format_double(problem.nu()));
  }
  if (configured.hi().back() != problem.hi().back()) {
    diff.push_back(std::string(heat ? "heat.t_end" : "ns.t_end") + ": config " +
                   pgt::text::format_double(configured.hi().back()) + ", checkpoint " +
                   pgt::text::format_double(problem.hi().back()));
  }
  if (heat && configured.mode() != problem.mode()) {
    diff.push_back("heat.mode: config " + std::to_string(configured.mode()) + ", checkpoint " +
                   std::to_string(problem.mode()));
  }
  if (!diff.empty()) {
    std::string msg = "configuration does not match the checkpoint:";
    for (const auto& d : diff) msg += "\n  " + d;
    throw pgt::CompatibilityError(msg);
  }
}

int cmd_export(const std::string& checkpoint_path, const std::string& oracle, std::size_t grid,
               const std::optional<pgt::ExperimentConfig>& cfg, const fs::path& out) {
  if (checkpoint_path.empty() == oracle.empty()) throw pgt::UsageError("export needs exactly one of CHECKPOINT or --oracle");
  if (grid == 1) throw pgt::UsageError("--grid needs at least 2 points per axis");
  pgt::checkpoint::Checkpoint ck;
  if (!oracle.empty()) {
    pgt::Problem problem = oracle == "heat"           ? (cfg ? cfg->heat() : pgt::Problem::heat())
                           : oracle == "taylor_green" ? (cfg ? cfg->flow() : pgt::Problem::taylor_green())
                                                      : throw pgt::UsageError("unknown oracle problem '" + oracle + "'");
    ck = pgt::checkpoint::make_checkpoint(problem.oracle(), problem);
    fs::create_directories(out);
    pgt::checkpoint::save((out / "oracle.ckpt").string(), ck);
  } else {
    ck = pgt::checkpoint::load(checkpoint_path);
  }
  const pgt::Problem problem = pgt::checkpoint::problem_from(ck);
  const auto model = pgt::checkpoint::restore(ck);
  if (cfg && oracle.empty()) check_compatible(*cfg, model->config(), problem);

  const pgt::Tensor q = problem.eval_grid(grid);
  fs::create_directories(out);
  const pgt::Tensor pred = model->predict(q);
  const pgt::Tensor truth = problem.exact(q);
  const auto names = problem.channel_names();
  std::ostringstream csv;
  csv << (problem.kind() == pgt::Problem::Kind::heat ? "x,t" : "x,y,t");
  for (const auto& n : names) csv << ',' << n;
  for (const auto& n : names) csv << ',' << n << "_true";
  csv << ",abs_error\n";
  using pgt::text::format_double;
  for (std::size_t r = 0; r < q.rows(); ++r) {
    for (std::size_t c = 0; c < q.cols(); ++c) csv << (c ? "," : "") << format_double(q(r, c));
    double err = 0.0;
    for (std::size_t c = 0; c < names.size(); ++c) csv << ',' << format_double(pred(r, c));
    for (std::size_t c = 0; c < names.size(); ++c) {
      csv << ',' << format_double(truth(r, c));
      err = std::max(err, std::abs(pred(r, c) - truth(r, c)));
    }
    csv << ',' << format_double(err) << '\n';
  }
  write_text(out / "field.csv", csv.str());
  std::cerr << "wrote " << q.rows() << " rows to " << (out / "field.csv").string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Physics-guided transformer experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, level = "fast", mutate, checkpoint_path, oracle, suite;
  std::vector<std::string> overrides;
  std::optional<std::size_t> seeds;
  std::size_t grid = 0;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Configuration file (key = value lines)");
    cmd->add_option("--set", overrides, "Override KEY=VALUE (repeatable)");
  };
  auto* run = app.add_subcommand("run", "Run an experiment suite");
  run->add_option("suite", suite, "heat, ns, ablation or noise (overrides the config)");
  add_config(run);
  run->add_option("--out", out_dir, "Output directory");
  run->add_option("--seeds", seeds, "Number of seeds");

  auto* check = app.add_subcommand("check", "Run the invariant suite");
  check->add_option("--level", level, "fast or full")->check(CLI::IsMember({"fast", "full"}));
  add_config(check);
  check->add_option("--mutate", mutate, "Inject a known defect to exercise the checker")
      ->check(CLI::IsMember({"leaky_softmax"}))
      ->group("");

  auto* exp = app.add_subcommand("export", "Dump a trained field on a grid");
  exp->add_option("checkpoint", checkpoint_path, "Checkpoint file");
  exp->add_option("--oracle", oracle, "Export the analytic solution of heat or taylor_green instead");
  exp->add_option("--grid", grid, "Points per axis (default: the suite evaluation grid)");
  add_config(exp);
  exp->add_option("--out", out_dir, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (!suite.empty() && std::find(pgt::ExperimentConfig::suites().begin(), pgt::ExperimentConfig::suites().end(),
                                    suite) == pgt::ExperimentConfig::suites().end()) {
      throw pgt::UsageError("unknown suite '" + suite + "' (expected heat, ns, ablation or noise)");
    }
    std::vector<std::string> all = overrides;
    if (!suite.empty()) all.push_back("suite=" + suite);
    if (seeds) all.push_back("seeds=" + std::to_string(*seeds));
    if (!out_dir.empty()) all.push_back("out=" + out_dir);

    if (*run) return cmd_run(pgt::parse_config(config_path, all));
    if (*check) {
      if (!mutate.empty()) pgt::ad::testing_hooks::leaky_softmax = true;
      return cmd_check(level, pgt::parse_config(config_path, overrides));
    }
    std::optional<pgt::ExperimentConfig> cfg;
    if (!config_path.empty() || !overrides.empty()) cfg = pgt::parse_config(config_path, overrides);
    return cmd_export(checkpoint_path, oracle, grid, cfg, out_dir.empty() ? fs::path("pgt_export") : fs::path(out_dir));
  } catch (const pgt::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const pgt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const pgt::CompatibilityError& e) {
    std::cerr << "compatibility error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}
