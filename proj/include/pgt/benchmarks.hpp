#pragma once

// Evaluation metrics, sparse sampling, noise injection and the experiment suites.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "pgt/model.hpp"
#include "pgt/physics.hpp"
#include "pgt/problem.hpp"
#include "pgt/text.hpp"
#include "pgt/training.hpp"

namespace pgt::bench {

using model::FieldModel;
using model::ModelConfig;
using model::Observations;
using train::relative_l2;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct EvalReport {
  double rel_l2_total = 0.0;
  std::vector<double> rel_l2_channel;
  double pde_residual = 0.0;
  double data_loss = 0.0;
  double train_error = 0.0;
};

/// Mean absolute PDE residual over `points`, computed with the reference stencil
/// operators (one-sided at the domain edges). Model evaluations are deduplicated and
/// batched: a first sweep records the stencil points, a second replays them.
inline double mean_abs_residual(const FieldModel& model, const Problem& problem, const Tensor& points, double h) {
  const std::size_t w = problem.coord_dim(), channels = problem.channels();
  std::map<std::vector<double>, std::size_t> index;
  std::vector<std::vector<double>> visited;
  Tensor values;
  bool replay = false;

  auto key = [&](const physics::Coordinates& c) {
    std::vector<double> k(c.x);
    k.push_back(c.t);
    return k;
  };
  auto lookup = [&](const physics::Coordinates& c, std::size_t channel) {
    auto k = key(c);
    if (!replay) {
      if (index.emplace(k, visited.size()).second) visited.push_back(std::move(k));
      return 0.0;
    }
    return values(index.at(k), channel);
  };
  auto field = [&](std::size_t channel) {
    return physics::Field([&lookup, channel](const physics::Coordinates& c) { return lookup(c, channel); });
  };
  const auto coords = model::to_coordinates(points);
  const physics::Box box = problem.box();

  auto sweep = [&] {
    double total = 0.0;
    if (problem.kind() == Problem::Kind::heat) {
      const auto u = field(0);
      for (const auto& c : coords) total += std::abs(physics::heat_residual_1d(u, c, problem.nu(), h, box));
      return total / static_cast<double>(coords.size());
    }
    const physics::NsFields f{field(0), field(1), field(2)};
    for (const auto& c : coords) {
      for (double r : physics::ns_residual_2d(f, c, problem.nu(), h, box)) total += std::abs(r);
    }
    return total / static_cast<double>(3 * coords.size());
  };

  sweep();
  Tensor batch({visited.size(), w});
  for (std::size_t i = 0; i < visited.size(); ++i) std::copy(visited[i].begin(), visited[i].end(), &batch(i, 0));
  values = model.predict(batch);
  if (values.cols() != channels) throw DimensionError("model channel count does not match the problem");
  replay = true;
  return sweep();
}

inline EvalReport evaluate(const FieldModel& model, const Problem& problem, const Observations& train_obs,
                           double h) {
  EvalReport r;
  const Tensor grid = problem.eval_grid();
  const Tensor truth = problem.exact(grid);
  const Tensor pred = model.predict(grid);
  r.rel_l2_total = relative_l2(pred.data(), truth.data());
  const std::size_t c = problem.channels();
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::vector<double> p, t;
    for (std::size_t i = 0; i < grid.rows(); ++i) {
      p.push_back(pred(i, ch));
      t.push_back(truth(i, ch));
    }
    r.rel_l2_channel.push_back(relative_l2(p, t));
  }
  r.pde_residual = mean_abs_residual(model, problem, grid, h);
  if (train_obs.size() > 0) {
    const Tensor fit = model.predict(train_obs.coords);
    double s = 0.0;
    for (std::size_t i = 0; i < fit.size(); ++i) s += (fit[i] - train_obs.values[i]) * (fit[i] - train_obs.values[i]);
    r.data_loss = s / static_cast<double>(train_obs.size());
    r.train_error = relative_l2(fit.data(), train_obs.values.data());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

/// M uniform interior points with exact values, drawn from the run's sampling stream.
inline Observations sample_sparse_observations(const Problem& problem, std::size_t m, std::uint64_t seed) {
  if (m == 0) throw InputError("at least one observation is required");
  Rng rng = make_stream(seed, "sampling");
  Observations obs;
  obs.coords = problem.sample_interior(rng, m);
  obs.values = problem.exact(obs.coords);
  return obs;
}

/// Adds N(0, (eta * std_c)^2) to each velocity channel c; eta = 0 leaves values untouched.
inline Observations add_observation_noise(Observations obs, const Problem& problem, double eta, std::uint64_t seed) {
  if (eta < 0.0) throw InputError("noise level eta must be >= 0");
  if (eta == 0.0) return obs;
  Rng rng = make_stream(seed, "noise");
  const std::size_t n = obs.size();
  for (std::size_t ch = 0; ch < problem.noisy_channels(); ++ch) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += obs.values(i, ch);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) var += (obs.values(i, ch) - mean) * (obs.values(i, ch) - mean);
    const double sd = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
    std::normal_distribution<double> noise(0.0, eta * sd);
    for (std::size_t i = 0; i < n; ++i) obs.values(i, ch) += noise(rng);
  }
  return obs;
}

// ---------------------------------------------------------------------------
// Variants
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"pgt",         "pgt_uw",        "pinn",     "siren",    "full",
                                              "no_pde_loss", "no_gamma",      "no_physics", "siren_no_film",
                                              "film_mlp",    "plain_mlp"};
  return names;
}

inline const std::vector<std::string>& ablation_rows() {
  static const std::vector<std::string> rows{"full",          "no_pde_loss", "no_gamma", "no_physics",
                                             "siren_no_film", "film_mlp",    "plain_mlp"};
  return rows;
}

/// Applies a named model variant on top of a base configuration.
inline ModelConfig apply_variant(ModelConfig cfg, const std::string& variant) {
  using model::DecoderKind;
  using model::ModelKind;
  cfg.kind = ModelKind::pgt;
  if (variant == "pgt" || variant == "full") {
  } else if (variant == "pgt_uw") {
    cfg.variance_head = true;
  } else if (variant == "pinn") {
    cfg.kind = ModelKind::pinn;
  } else if (variant == "siren") {
    cfg.kind = ModelKind::siren;
    cfg.use_pde_loss = false;
    cfg.use_bc_ic = false;
  } else if (variant == "no_pde_loss") {
    cfg.use_pde_loss = false;
  } else if (variant == "no_gamma") {
    cfg.use_gamma = false;
  } else if (variant == "no_physics") {
    cfg.use_gamma = false;
    cfg.use_pde_loss = false;
    cfg.use_bc_ic = false;
  } else if (variant == "siren_no_film") {
    cfg.decoder_kind = DecoderKind::siren_no_film;
  } else if (variant == "film_mlp") {
    cfg.decoder_kind = DecoderKind::film_mlp;
  } else if (variant == "plain_mlp") {
    cfg.decoder_kind = DecoderKind::plain_mlp;
  } else {
    throw ConfigError("unknown model variant '" + variant + "'");
  }
  return cfg;
}

inline std::string variant_flags(const ModelConfig& cfg) {
  auto b = [](bool v) { return v ? "1" : "0"; };
  std::string s = std::string("gamma=") + b(cfg.kind == model::ModelKind::pgt && cfg.use_gamma) +
                  ";pde=" + b(cfg.use_pde_loss) + ";bcic=" + b(cfg.use_bc_ic);
  if (cfg.kind == model::ModelKind::pgt) {
    s += ";decoder=" + model::decoder_name(cfg.decoder_kind) + ";uw=" + b(cfg.variance_head);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Cells
// ---------------------------------------------------------------------------

struct CellSpec {
  std::string suite;
  Problem problem = Problem::heat();
  std::string variant;
  std::size_t n_obs = 100;
  double eta = 0.0;
  std::uint64_t seed = 0;
  ModelConfig base;
  train::TrainConfig train;

  ModelConfig model_config() const {
    ModelConfig cfg = apply_variant(problem.configure(base), variant);
    cfg.validate();
    return cfg;
  }

  /// Everything that determines a cell's outcome, independent of the suite label.
  std::string key() const {
    std::string k = problem.name() + "|" + text::format_double(problem.nu()) + "|" + std::to_string(problem.mode()) +
                    "|" + text::format_double(problem.hi().back()) + "|" + std::to_string(n_obs) + "|" +
                    text::format_double(eta) + "|" + std::to_string(seed);
    for (const auto& [name, value] : model_config().entries()) k += "|" + name + "=" + value;
    k += "|steps=" + std::to_string(train.steps) + "|lr=" + text::format_double(train.adam.lr) +
         "|b1=" + text::format_double(train.adam.beta1) + "|b2=" + text::format_double(train.adam.beta2) +
         "|eps=" + text::format_double(train.adam.eps) + "|nr=" + std::to_string(train.n_r) +
         "|nb=" + std::to_string(train.n_b) + "|n0=" + std::to_string(train.n_0) + "|h=" + text::format_double(train.h) +
         "|reg=" + std::to_string(train.log_regularizer) + "|ev=" + std::to_string(train.eval_every);
    return k;
  }
};

struct CellResult {
  CellSpec spec;
  ModelConfig config;
  EvalReport report;
  std::size_t params_count = 0;
  double wall_seconds = 0.0;
  std::vector<train::LossReport> log;
  model::ParamStore params;
  Observations context;
  bool diverged = false;
  std::string diagnostic;
};

inline CellResult run_cell(const CellSpec& spec) {
  CellResult out;
  out.spec = spec;
  out.config = spec.model_config();
  const Problem& problem = spec.problem;
  const Observations clean = sample_sparse_observations(problem, spec.n_obs, spec.seed);
  out.context = add_observation_noise(clean, problem, spec.eta, spec.seed);

  auto model = model::make_model(out.config, spec.seed);
  if (auto* pgt = dynamic_cast<model::PgtModel*>(model.get())) pgt->set_context(out.context);
  out.params_count = model->params().scalar_count();

  train::EvalSet eval{problem.eval_grid(), {}};
  eval.truth = problem.exact(eval.queries);
  const auto start = std::chrono::steady_clock::now();
  try {
    out.log = train::train(*model, problem, out.context, spec.train, spec.seed, &eval).log;
  } catch (const train::DivergenceError& e) {
    out.diverged = true;
    out.diagnostic = e.what();
    model->params() = e.last_good();
  }
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.params = model->params();
  if (!out.diverged) out.report = evaluate(*model, problem, out.context, spec.train.h);
  return out;
}

/// Rebuilds the trained model of a finished cell.
inline std::unique_ptr<FieldModel> restore_model(const CellResult& cell) {
  auto model = model::make_model(cell.config, cell.spec.seed);
  if (auto* pgt = dynamic_cast<model::PgtModel*>(model.get())) pgt->set_context(cell.context);
  model->params() = cell.params;
  return model;
}

/// Worker count: PGT_THREADS if set, else the hardware concurrency.
inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("PGT_THREADS")) {
    try {
      n = std::max<std::size_t>(1, static_cast<std::size_t>(text::parse_uint(env, "PGT_THREADS")));
    } catch (const ConfigError&) {
    }
  }
  return n;
}

/// Memo of finished cells keyed by CellSpec::key(), shared across suites in one process.
/// A hit is relabelled with the requesting spec (suite and variant name).
class CellCache {
 public:
  std::shared_ptr<const CellResult> find(const std::string& key) const {
    std::lock_guard lock(mutex_);
    auto it = cells_.find(key);
    return it == cells_.end() ? nullptr : it->second;
  }
  void store(const std::string& key, std::shared_ptr<const CellResult> cell) {
    std::lock_guard lock(mutex_);
    cells_[key] = std::move(cell);
  }

 private:
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const CellResult>> cells_;
};

using Progress = std::function<void(const CellResult&)>;

/// Runs independent cells on a worker pool; results keep the input order.
inline std::vector<CellResult> run_cells(const std::vector<CellSpec>& specs, CellCache* cache = nullptr,
                                         const Progress& progress = {}) {
  std::vector<CellResult> results(specs.size());
  std::atomic<std::size_t> next{0};
  std::mutex report_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < specs.size(); i = next++) {
      const std::string key = specs[i].key();
      std::shared_ptr<const CellResult> hit = cache ? cache->find(key) : nullptr;
      if (hit) {
        results[i] = *hit;
        results[i].spec = specs[i];
        results[i].config = specs[i].model_config();
      } else {
        results[i] = run_cell(specs[i]);
        if (cache) cache->store(key, std::make_shared<const CellResult>(results[i]));
      }
      if (progress) {
        std::lock_guard lock(report_mutex);
        progress(results[i]);
      }
    }
  };
  const std::size_t n = std::min(worker_count(), std::max<std::size_t>(1, specs.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return results;
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

struct SuitePlan {
  Problem heat = Problem::heat();
  Problem flow = Problem::taylor_green();
  ModelConfig heat_model;
  ModelConfig flow_model;
  train::TrainConfig heat_train;
  train::TrainConfig flow_train;
  std::vector<std::uint64_t> seeds{0};
  std::vector<std::size_t> heat_m{100};
  std::vector<std::string> heat_models{"pgt", "pinn", "siren"};
  std::size_t flow_n = 1500;
  std::vector<std::string> flow_models{"pgt", "no_gamma", "pinn", "siren"};
  std::vector<std::string> ablation{ablation_rows()};
  std::vector<double> etas{0.0, 0.01, 0.02, 0.05, 0.10, 0.20};
  std::vector<std::string> noise_variants{"pgt", "pgt_uw"};
};

inline std::vector<CellSpec> heat_cells(const SuitePlan& plan) {
  std::vector<CellSpec> cells;
  for (std::size_t m : plan.heat_m) {
    for (const auto& v : plan.heat_models) {
      for (auto seed : plan.seeds) cells.push_back({"heat", plan.heat, v, m, 0.0, seed, plan.heat_model, plan.heat_train});
    }
  }
  return cells;
}

inline std::vector<CellSpec> ns_cells(const SuitePlan& plan) {
  std::vector<CellSpec> cells;
  for (const auto& v : plan.flow_models) {
    for (auto seed : plan.seeds) {
      cells.push_back({"ns", plan.flow, v, plan.flow_n, 0.0, seed, plan.flow_model, plan.flow_train});
    }
  }
  return cells;
}

inline std::vector<CellSpec> ablation_cells(const SuitePlan& plan) {
  std::vector<CellSpec> cells;
  for (const auto& row : plan.ablation) {
    for (auto seed : plan.seeds) {
      cells.push_back({"ablation", plan.flow, row, plan.flow_n, 0.0, seed, plan.flow_model, plan.flow_train});
    }
  }
  return cells;
}

inline std::vector<CellSpec> noise_cells(const SuitePlan& plan) {
  std::vector<CellSpec> cells;
  for (double eta : plan.etas) {
    for (const auto& v : plan.noise_variants) {
      for (auto seed : plan.seeds) {
        cells.push_back({"noise", plan.flow, v, plan.flow_n, eta, seed, plan.flow_model, plan.flow_train});
      }
    }
  }
  return cells;
}

inline std::vector<CellSpec> suite_cells(const std::string& suite, const SuitePlan& plan) {
  if (suite == "heat") return heat_cells(plan);
  if (suite == "ns") return ns_cells(plan);
  if (suite == "ablation") return ablation_cells(plan);
  if (suite == "noise") return noise_cells(plan);
  throw UsageError("unknown suite '" + suite + "' (expected heat, ns, ablation or noise)");
}

inline std::vector<CellResult> run_heat_suite(const SuitePlan& plan, CellCache* cache = nullptr) {
  return run_cells(heat_cells(plan), cache);
}
inline std::vector<CellResult> run_ns_suite(const SuitePlan& plan, CellCache* cache = nullptr) {
  return run_cells(ns_cells(plan), cache);
}
inline std::vector<CellResult> run_ablation(const SuitePlan& plan, CellCache* cache = nullptr) {
  return run_cells(ablation_cells(plan), cache);
}
inline std::vector<CellResult> run_noise_suite(const SuitePlan& plan, CellCache* cache = nullptr) {
  return run_cells(noise_cells(plan), cache);
}

// ---------------------------------------------------------------------------
// Results table
// ---------------------------------------------------------------------------

inline void write_results_header(std::ostream& os) {
  os << "suite,problem,model,variant_flags,M_or_Ntrain,eta,seed,rel_l2_total,rel_l2_u,rel_l2_v,rel_l2_p,"
        "pde_residual,data_loss,train_error,params_count,steps,wall_seconds\n";
}

inline void write_results_row(std::ostream& os, const CellResult& c) {
  using text::format_double;
  const auto& r = c.report;
  auto channel = [&](std::size_t i) -> std::string {
    if (i >= c.spec.problem.channels()) return "";
    return c.diverged ? "nan" : format_double(r.rel_l2_channel[i]);
  };
  auto metric = [&](double v) { return c.diverged ? std::string("nan") : format_double(v); };
  os << c.spec.suite << ',' << c.spec.problem.name() << ',' << c.spec.variant << ',' << variant_flags(c.config) << ','
     << c.spec.n_obs << ',' << format_double(c.spec.eta) << ',' << c.spec.seed << ',' << metric(r.rel_l2_total) << ','
     << channel(0) << ',' << channel(1) << ',' << channel(2) << ',' << metric(r.pde_residual) << ','
     << metric(r.data_loss) << ',' << metric(r.train_error) << ',' << c.params_count << ',' << c.log.size() << ','
     << format_double(c.wall_seconds) << '\n';
}

/// Median of a non-empty sample.
inline double median(std::vector<double> v) {
  if (v.empty()) throw InputError("median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Median of `metric` over the cells matching a variant (and optionally M and eta).
inline double median_of(const std::vector<CellResult>& cells, const std::string& variant,
                        const std::function<double(const CellResult&)>& metric,
                        const std::function<bool(const CellResult&)>& filter = {}) {
  std::vector<double> v;
  for (const auto& c : cells) {
    if (c.spec.variant == variant && (!filter || filter(c))) v.push_back(c.diverged ? INFINITY : metric(c));
  }
  return median(v);
}

}  // namespace pgt::bench
