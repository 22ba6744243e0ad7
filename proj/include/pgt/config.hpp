#pragma once

// Flat `section.key = value` experiment configuration. Unknown keys are rejected and
// every error names the offending key and its source line.

#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "pgt/benchmarks.hpp"
#include "pgt/errors.hpp"
#include "pgt/model.hpp"
#include "pgt/problem.hpp"
#include "pgt/text.hpp"
#include "pgt/training.hpp"

namespace pgt {

struct ExperimentConfig {
  std::string suite = "heat";
  std::size_t seeds = 1;
  std::uint64_t seed_base = 0;
  std::string out = "pgt_out";

  double heat_alpha = 0.1;
  int heat_mode = 1;
  double heat_t_end = 1.0;
  double ns_nu = 0.01;
  double ns_t_end = 1.0;

  std::vector<std::size_t> budget_m{100};
  std::size_t budget_n = 1500;

  std::vector<std::string> heat_models{"pgt", "pinn", "siren"};
  std::vector<std::string> ns_models{"pgt", "no_gamma", "pinn", "siren"};
  std::vector<std::string> ablation_rows = bench::ablation_rows();
  std::vector<double> noise_eta{0.0, 0.01, 0.02, 0.05, 0.10, 0.20};
  std::vector<std::string> noise_variants{"pgt", "pgt_uw"};

  model::ModelConfig model;
  train::TrainConfig train;

  static const std::vector<std::string>& suites() {
    static const std::vector<std::string> s{"heat", "ns", "ablation", "noise"};
    return s;
  }

  /// Model keys a config may set; the rest follow from the problem and the variant.
  static bool is_model_key(const std::string& k) {
    static const std::vector<std::string> problem_owned{"kind",           "pde_family",  "pde_alpha", "pde_wave_speed",
                                                        "spatial_dim",    "out_channels", "coord_lo", "coord_hi"};
    return std::find(problem_owned.begin(), problem_owned.end(), k) == problem_owned.end();
  }

  std::vector<std::pair<std::string, std::string>> entries() const {
    using text::format_double;
    auto list_str = [](const std::vector<std::string>& v) { return text::join(v, [](const std::string& s) { return s; }); };
    std::vector<std::pair<std::string, std::string>> e{
        {"suite", suite},
        {"seeds", std::to_string(seeds)},
        {"seed_base", std::to_string(seed_base)},
        {"out", out},
        {"heat.alpha", format_double(heat_alpha)},
        {"heat.mode", std::to_string(heat_mode)},
        {"heat.t_end", format_double(heat_t_end)},
        {"ns.nu", format_double(ns_nu)},
        {"ns.t_end", format_double(ns_t_end)},
        {"budget.M", text::join(budget_m, [](std::size_t m) { return std::to_string(m); })},
        {"budget.N", std::to_string(budget_n)},
        {"budget.n_r", std::to_string(train.n_r)},
        {"budget.n_b", std::to_string(train.n_b)},
        {"budget.n_0", std::to_string(train.n_0)},
        {"heat.models", list_str(heat_models)},
        {"ns.models", list_str(ns_models)},
        {"ablation.rows", list_str(ablation_rows)},
        {"noise.eta", text::join(noise_eta, [](double d) { return text::format_double(d); })},
        {"noise.variants", list_str(noise_variants)},
        {"train.steps", std::to_string(train.steps)},
        {"train.lr", format_double(train.adam.lr)},
        {"train.beta1", format_double(train.adam.beta1)},
        {"train.beta2", format_double(train.adam.beta2)},
        {"train.eps", format_double(train.adam.eps)},
        {"train.h", format_double(train.h)},
        {"train.eval_every", std::to_string(train.eval_every)},
        {"train.log_regularizer", train.log_regularizer ? "true" : "false"},
    };
    for (const auto& [k, v] : model.entries()) {
      if (is_model_key(k)) e.emplace_back("model." + k, v);
    }
    return e;
  }

  /// Canonical text form; parsing it reproduces this configuration.
  std::string echo() const {
    std::string s;
    for (const auto& [k, v] : entries()) s += k + " = " + v + "\n";
    return s;
  }

  bool operator==(const ExperimentConfig& o) const { return entries() == o.entries(); }

  /// Sets one key; every error message names the full dotted key.
  void set(const std::string& key, const std::string& raw) {
    try {
      set_unchecked(key, raw);
    } catch (const ConfigError& e) {
      std::string msg = e.what();
      if (msg.find("'" + key + "'") != std::string::npos) throw;
      if (msg.rfind("key '", 0) == 0) msg = msg.substr(msg.find("': ") + 3);
      throw ConfigError("key '" + key + "': " + msg);
    }
  }

 private:
  void set_unchecked(const std::string& key, const std::string& raw) {
    const std::string_view value = text::trim(raw);
    auto names = [&] {
      std::vector<std::string> v;
      for (const auto& s : text::split(value, ',')) {
        if (!s.empty()) v.emplace_back(s);
      }
      if (v.empty()) throw ConfigError("key '" + key + "' needs at least one entry");
      return v;
    };
    auto variants = [&] {
      auto v = names();
      for (const auto& n : v) bench::apply_variant({}, n);
      return v;
    };
    auto positive = [&](double v) {
      if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("key '" + key + "' must be a positive number");
      return v;
    };

    if (key == "suite") {
      if (std::find(suites().begin(), suites().end(), value) == suites().end()) {
        throw ConfigError("key 'suite': unknown suite '" + std::string(value) + "'");
      }
      suite = value;
    } else if (key == "seeds") {
      seeds = text::parse_uint(value, key);
      if (seeds == 0) throw ConfigError("key 'seeds' must be >= 1");
    } else if (key == "seed_base") {
      seed_base = text::parse_uint(value, key);
    } else if (key == "out") {
      if (value.empty()) throw ConfigError("key 'out' must not be empty");
      out = value;
    } else if (key == "heat.alpha") {
      heat_alpha = positive(text::parse_double(value, key));
    } else if (key == "heat.mode") {
      heat_mode = static_cast<int>(text::parse_uint(value, key));
      if (heat_mode < 1) throw ConfigError("key 'heat.mode' must be >= 1");
    } else if (key == "heat.t_end") {
      heat_t_end = positive(text::parse_double(value, key));
    } else if (key == "ns.nu") {
      ns_nu = positive(text::parse_double(value, key));
    } else if (key == "ns.t_end") {
      ns_t_end = positive(text::parse_double(value, key));
    } else if (key == "budget.M") {
      budget_m.clear();
      for (const auto& s : names()) {
        budget_m.push_back(text::parse_uint(s, key));
        if (budget_m.back() == 0) throw ConfigError("key 'budget.M' entries must be >= 1");
      }
    } else if (key == "budget.N") {
      budget_n = text::parse_uint(value, key);
      if (budget_n == 0) throw ConfigError("key 'budget.N' must be >= 1");
    } else if (key == "budget.n_r") {
      train.n_r = text::parse_uint(value, key);
    } else if (key == "budget.n_b") {
      train.n_b = text::parse_uint(value, key);
    } else if (key == "budget.n_0") {
      train.n_0 = text::parse_uint(value, key);
    } else if (key == "heat.models") {
      heat_models = variants();
    } else if (key == "ns.models") {
      ns_models = variants();
    } else if (key == "ablation.rows") {
      ablation_rows = variants();
    } else if (key == "noise.variants") {
      noise_variants = variants();
    } else if (key == "noise.eta") {
      noise_eta.clear();
      for (const auto& s : names()) {
        noise_eta.push_back(text::parse_double(s, key));
        if (!(noise_eta.back() >= 0.0)) throw ConfigError("key 'noise.eta' entries must be >= 0");
      }
    } else if (key == "train.steps") {
      train.steps = text::parse_uint(value, key);
    } else if (key == "train.lr") {
      train.adam.lr = positive(text::parse_double(value, key));
    } else if (key == "train.beta1" || key == "train.beta2") {
      const double b = text::parse_double(value, key);
      if (!(b >= 0.0 && b < 1.0)) throw ConfigError("key '" + key + "' must lie in [0, 1)");
      (key == "train.beta1" ? train.adam.beta1 : train.adam.beta2) = b;
    } else if (key == "train.eps") {
      train.adam.eps = positive(text::parse_double(value, key));
    } else if (key == "train.h") {
      train.h = positive(text::parse_double(value, key));
    } else if (key == "train.eval_every") {
      train.eval_every = text::parse_uint(value, key);
      if (train.eval_every == 0) throw ConfigError("key 'train.eval_every' must be >= 1");
    } else if (key == "train.log_regularizer") {
      train.log_regularizer = text::parse_bool(value, key);
    } else if (key.rfind("model.", 0) == 0 && is_model_key(key.substr(6))) {
      if (!model.set(key.substr(6), value)) throw ConfigError("unknown key '" + key + "'");
    } else {
      throw ConfigError("unknown key '" + key + "'");
    }
  }

 public:
  /// Cross-field checks after all keys are applied.
  void validate() const {
    heat().validate();
    flow().validate();
    heat().configure(bench::apply_variant(model, "pgt")).validate();
    flow().configure(bench::apply_variant(model, "pgt")).validate();
    train.validate();
  }

  Problem heat() const { return Problem::heat(heat_alpha, heat_mode, heat_t_end); }
  Problem flow() const { return Problem::taylor_green(ns_nu, ns_t_end); }

  std::vector<std::uint64_t> seed_list() const {
    std::vector<std::uint64_t> s(seeds);
    std::iota(s.begin(), s.end(), seed_base);
    return s;
  }

  bench::SuitePlan plan() const {
    bench::SuitePlan p;
    p.heat = heat();
    p.flow = flow();
    p.heat_model = model;
    p.flow_model = model;
    p.heat_train = train;
    p.flow_train = train;
    p.seeds = seed_list();
    p.heat_m = budget_m;
    p.heat_models = heat_models;
    p.flow_n = budget_n;
    p.flow_models = ns_models;
    p.ablation = ablation_rows;
    p.etas = noise_eta;
    p.noise_variants = noise_variants;
    return p;
  }
};

/// Applies `key = value` lines; `source` labels diagnostics (a path or "--set").
inline void apply_config_text(ExperimentConfig& cfg, std::string_view content, const std::string& source) {
  std::istringstream in{std::string(content)};
  std::string line;
  std::size_t number = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++number;
    std::string_view body = line;
    if (auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
    body = text::trim(body);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(number);
    if (eq == std::string_view::npos) {
      throw ConfigError(where + ": expected 'key = value', got '" + std::string(body) + "'");
    }
    const std::string key(text::trim(body.substr(0, eq)));
    if (key.empty()) throw ConfigError(where + ": missing key before '='");
    if (auto prev = seen.find(key); prev != seen.end()) {
      throw ConfigError(where + ": key '" + key + "' already set on line " + std::to_string(prev->second));
    }
    seen.emplace(key, number);
    try {
      cfg.set(key, std::string(body.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

/// Overrides of the form KEY=VALUE, applied in order.
inline void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides) {
  for (std::size_t i = 0; i < overrides.size(); ++i) {
    const auto& o = overrides[i];
    const auto eq = o.find('=');
    const std::string where = "--set #" + std::to_string(i + 1);
    if (eq == std::string::npos) throw ConfigError(where + ": expected KEY=VALUE, got '" + o + "'");
    const std::string key(text::trim(std::string_view(o).substr(0, eq)));
    try {
      cfg.set(key, o.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

inline ExperimentConfig parse_config_text(std::string_view content, const std::string& source = "<config>") {
  ExperimentConfig cfg;
  apply_config_text(cfg, content, source);
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  ExperimentConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    apply_config_text(cfg, buf.str(), path);
  }
  apply_overrides(cfg, overrides);
  cfg.validate();
  return cfg;
}

}  // namespace pgt
