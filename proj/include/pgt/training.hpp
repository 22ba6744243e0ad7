#pragma once

// Composite objective with learnable uncertainty weights, stencil-based PDE residuals
// over batched model evaluations, Adam, and the training loop.

#include <array>
#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pgt/autodiff.hpp"
#include "pgt/errors.hpp"
#include "pgt/model.hpp"
#include "pgt/problem.hpp"
#include "pgt/rng.hpp"
#include "pgt/tensor.hpp"
#include "pgt/text.hpp"

namespace pgt::train {

using ad::Tape;
using ad::Var;
using model::Bound;
using model::FieldModel;
using model::Observations;
using model::ParamStore;

enum Term : std::size_t { kData = 0, kPde = 1, kBc = 2, kIc = 3 };
inline constexpr std::size_t kTerms = 4;
inline const std::array<std::string, kTerms> kTermNames{"data", "PDE", "BC", "IC"};

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

/// Mean over points of the squared error norm across channels.
inline Var data_loss(Var pred, const Tensor& target) {
  if (target.rank() != 2 || target.rows() == 0) throw InputError("data_loss: empty observation set");
  if (pred.shape() != target.shape()) {
    throw DimensionError("data_loss: predictions " + shape_str(pred.shape()) + " vs observations " +
                         shape_str(target.shape()));
  }
  Var err = ad::sub(pred, pred.tape().constant(target));
  return ad::mean(ad::rowwise_sum(ad::square(err)));
}

/// mean_i [ log s_i + |err_i|^2 / s_i ] with s_i = exp(log_var_i).
inline Var heteroscedastic_data_loss(Var pred, Var log_var, const Tensor& target) {
  if (target.rank() != 2 || target.rows() == 0) throw InputError("heteroscedastic_data_loss: empty observation set");
  if (pred.shape() != target.shape() || log_var.shape() != Shape{target.rows(), 1}) {
    throw DimensionError("heteroscedastic_data_loss: inconsistent shapes " + shape_str(pred.shape()) + ", " +
                         shape_str(log_var.shape()) + ", " + shape_str(target.shape()));
  }
  Var err2 = ad::rowwise_sum(ad::square(ad::sub(pred, pred.tape().constant(target))));
  return ad::mean(ad::add(ad::mul(err2, ad::exp(ad::scale(log_var, -1.0))), log_var));
}

/// sum_k L_k / (2 sigma_k^2) [+ log sigma_k] with sigma_k = exp(s_k).
inline Var total_loss(std::span<const Var> losses, std::span<const Var> log_sigma, bool regularizer = true) {
  if (losses.empty() || losses.size() != log_sigma.size()) {
    throw InputError("total_loss needs one log-sigma per loss term");
  }
  std::optional<Var> total;
  for (std::size_t k = 0; k < losses.size(); ++k) {
    Var term = ad::scale(ad::mul(losses[k], ad::exp(ad::scale(log_sigma[k], -2.0))), 0.5);
    if (regularizer) term = ad::add(term, log_sigma[k]);
    total = total ? ad::add(*total, term) : term;
  }
  return *total;
}

// ---------------------------------------------------------------------------
// Stencil residuals
// ---------------------------------------------------------------------------

/// Central-difference stencil layout: block 0 holds the centres, then a (+h, -h) pair per axis.
inline std::size_t stencil_blocks(const Problem& problem) { return 1 + 2 * problem.coord_dim(); }

inline Tensor stencil_queries(const Tensor& points, double h) {
  const std::size_t n = points.rows(), w = points.cols();
  Tensor q({n * (1 + 2 * w), w});
  auto put = [&](std::size_t block, std::size_t axis, double delta) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < w; ++c) q(block * n + r, c) = points(r, c) + (c == axis ? delta : 0.0);
    }
  };
  put(0, w, 0.0);
  for (std::size_t a = 0; a < w; ++a) {
    put(1 + 2 * a, a, h);
    put(2 + 2 * a, a, -h);
  }
  return q;
}

/// Residuals [N x R] from model outputs on the stencil queries ([blocks*N x C]).
inline Var stencil_residuals(const Problem& problem, Var out, std::size_t n, double h) {
  const std::size_t w = problem.coord_dim();
  auto block = [&](std::size_t b) { return ad::slice_rows(out, b * n, (b + 1) * n); };
  Var centre = block(0);
  std::vector<Var> d1, d2;
  for (std::size_t a = 0; a < w; ++a) {
    Var plus = block(1 + 2 * a), minus = block(2 + 2 * a);
    d1.push_back(ad::scale(ad::sub(plus, minus), 1.0 / (2.0 * h)));
    d2.push_back(ad::scale(ad::add(ad::sub(plus, ad::scale(centre, 2.0)), minus), 1.0 / (h * h)));
  }
  const double nu = problem.nu();
  if (problem.kind() == Problem::Kind::heat) {
    return ad::sub(d1[1], ad::scale(d2[0], nu));
  }
  auto ch = [](Var v, std::size_t c) { return ad::slice_cols(v, c, c + 1); };
  Var u = ch(centre, 0), v = ch(centre, 1);
  Var ux = ch(d1[0], 0), uy = ch(d1[1], 0), ut = ch(d1[2], 0);
  Var vx = ch(d1[0], 1), vy = ch(d1[1], 1), vt = ch(d1[2], 1);
  Var px = ch(d1[0], 2), py = ch(d1[1], 2);
  Var lap_u = ad::add(ch(d2[0], 0), ch(d2[1], 0));
  Var lap_v = ad::add(ch(d2[0], 1), ch(d2[1], 1));
  Var ru = ut + u * ux + v * uy + px - ad::scale(lap_u, nu);
  Var rv = vt + u * vx + v * vy + py - ad::scale(lap_v, nu);
  Var rdiv = ux + vy;
  return ad::concat_cols({ru, rv, rdiv});
}

/// Mean squared residual (averaged over residual channels) at the collocation points.
inline Var pde_loss(const FieldModel& model, Tape& tape, const Bound& params, const Problem& problem,
                    const Tensor& points, double h) {
  Var out = model.forward(tape, params, stencil_queries(points, h)).value;
  return ad::mean(ad::square(stencil_residuals(problem, out, points.rows(), h)));
}

struct BcIcLosses {
  Var bc;
  Var ic;
};

inline BcIcLosses bc_ic_losses(const FieldModel& model, Tape& tape, const Bound& params, const Problem& problem,
                               const Tensor& boundary, const Tensor& initial) {
  auto mse = [&](const Tensor& pts) {
    Var pred = model.forward(tape, params, pts).value;
    return ad::mean(ad::square(ad::sub(pred, tape.constant(problem.exact(pts)))));
  };
  return {mse(boundary), mse(initial)};
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, ParamStore last_good = {}, std::size_t step = 0)
      : Error(what), last_good_(std::move(last_good)), step_(step) {}

  const ParamStore& last_good() const { return last_good_; }
  std::size_t step() const { return step_; }

 private:
  ParamStore last_good_;
  std::size_t step_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::size_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

inline void adam_step(ParamStore& params, const std::vector<Tensor>& grads, OptimizerState& state,
                      const AdamConfig& cfg) {
  if (grads.size() != params.size()) throw DimensionError("adam_step: gradient count does not match parameters");
  if (state.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m.emplace_back(params.value(i).shape(), 0.0);
      state.v.emplace_back(params.value(i).shape(), 0.0);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params.value(i).shape()) {
      throw DimensionError("adam_step: gradient of '" + params.name(i) + "' has shape " + shape_str(grads[i].shape()));
    }
    for (double g : grads[i].data()) {
      if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in parameter '" + params.name(i) + "'");
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params.value(i).data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      p[j] -= cfg.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t steps = 1000;
  AdamConfig adam;
  std::size_t n_r = 256;
  std::size_t n_b = 64;
  std::size_t n_0 = 64;
  double h = 1e-3;
  std::size_t eval_every = 100;
  bool log_regularizer = true;

  void validate() const {
    if (!(adam.lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("train.beta1 must lie in [0, 1)");
    if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("train.beta2 must lie in [0, 1)");
    if (!(adam.eps > 0.0)) throw ConfigError("train.eps must be > 0");
    if (!(h > 0.0)) throw ConfigError("train.h must be > 0");
    if (eval_every == 0) throw ConfigError("train.eval_every must be > 0");
  }
};

struct LossReport {
  std::size_t step = 0;
  std::array<double, kTerms> loss{};
  std::array<double, kTerms> sigma{};
  double total = 0.0;
  std::optional<double> rel_l2_eval;
};

inline void write_log_header(std::ostream& os) {
  os << "step,L_data,L_PDE,L_BC,L_IC,sigma_data,sigma_PDE,sigma_BC,sigma_IC,total,rel_l2_eval\n";
}

inline void write_log_row(std::ostream& os, const LossReport& r) {
  os << r.step;
  for (double v : r.loss) os << ',' << text::format_double(v);
  for (double v : r.sigma) os << ',' << text::format_double(v);
  os << ',' << text::format_double(r.total) << ',';
  if (r.rel_l2_eval) os << text::format_double(*r.rel_l2_eval);
  os << '\n';
}

/// Which loss terms a model's configuration enables.
inline std::array<bool, kTerms> active_terms(const model::ModelConfig& cfg) {
  return {true, cfg.use_pde_loss, cfg.use_bc_ic, cfg.use_bc_ic};
}

inline double relative_l2(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw DimensionError("relative_l2: sample counts differ");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    num += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    den += truth[i] * truth[i];
  }
  if (den == 0.0) throw MetricError("relative L2 is undefined for an all-zero reference field");
  return std::sqrt(num) / std::sqrt(den);
}

struct EvalSet {
  Tensor queries;
  Tensor truth;
};

struct TrainResult {
  std::vector<LossReport> log;
  ParamStore loss_weights;
};

/// Trains `model` in place. Observations are both the data-loss targets and (for PGT,
/// installed by the caller) the context set. Each step draws fresh collocation,
/// boundary and initial samples from the run's collocation stream.
inline TrainResult train(FieldModel& model, const Problem& problem, const Observations& obs, const TrainConfig& cfg,
                         std::uint64_t seed, const EvalSet* eval = nullptr) {
  cfg.validate();
  const auto active = active_terms(model.config());
  const bool uw = model.config().variance_head;
  ParamStore weights;
  for (std::size_t k = 0; k < kTerms; ++k) weights.add("log_sigma_" + kTermNames[k], Tensor({}, 0.0));

  OptimizerState model_state, weight_state;
  Rng rng = make_stream(seed, "collocation");
  TrainResult result;
  const std::size_t n_d = obs.size();
  if (n_d == 0) throw InputError("training needs at least one observation");

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Tensor colloc = problem.sample_interior(rng, cfg.n_r, cfg.h);
    const Tensor boundary = problem.sample_boundary(rng, cfg.n_b);
    const Tensor initial = problem.sample_initial(rng, cfg.n_0);

    // One batched forward over every point the active terms need.
    std::vector<Tensor> blocks{obs.coords};
    if (active[kPde] && cfg.n_r > 0) blocks.push_back(stencil_queries(colloc, cfg.h));
    if (active[kBc] && cfg.n_b > 0) blocks.push_back(boundary);
    if (active[kIc] && cfg.n_0 > 0) blocks.push_back(initial);
    std::size_t rows = 0;
    for (const auto& b : blocks) rows += b.rows();
    Tensor queries({rows, problem.coord_dim()});
    std::size_t offset = 0;
    for (const auto& b : blocks) {
      std::copy(b.storage().begin(), b.storage().end(), queries.storage().begin() + static_cast<std::ptrdiff_t>(offset));
      offset += b.size();
    }

    Tape tape;
    Bound p = model::bind(tape, model.params());
    Bound w = model::bind(tape, weights);
    model::Prediction pred = model.forward(tape, p, queries);

    std::size_t row = 0;
    auto take = [&](std::size_t n) {
      Var v = ad::slice_rows(pred.value, row, row + n);
      row += n;
      return v;
    };
    std::vector<Var> losses, sigmas;
    std::array<double, kTerms> loss_values{};
    auto push = [&](Term k, Var v) {
      losses.push_back(v);
      sigmas.push_back(w.vars[k]);
      loss_values[k] = v.value().item();
    };

    Var data_pred = take(n_d);
    if (uw && pred.log_variance) {
      push(kData, heteroscedastic_data_loss(data_pred, ad::slice_rows(*pred.log_variance, 0, n_d), obs.values));
    } else {
      push(kData, data_loss(data_pred, obs.values));
    }
    if (active[kPde] && cfg.n_r > 0) {
      Var out = take(cfg.n_r * stencil_blocks(problem));
      push(kPde, ad::mean(ad::square(stencil_residuals(problem, out, cfg.n_r, cfg.h))));
    }
    auto mse = [&](std::size_t n, const Tensor& pts) {
      return ad::mean(ad::square(ad::sub(take(n), tape.constant(problem.exact(pts)))));
    };
    if (active[kBc] && cfg.n_b > 0) push(kBc, mse(cfg.n_b, boundary));
    if (active[kIc] && cfg.n_0 > 0) push(kIc, mse(cfg.n_0, initial));

    Var total = total_loss(losses, sigmas, cfg.log_regularizer);
    LossReport report;
    report.step = step;
    report.loss = loss_values;
    for (std::size_t k = 0; k < kTerms; ++k) report.sigma[k] = std::exp(weights.value(k).item());
    report.total = total.value().item();
    if (!std::isfinite(report.total)) {
      throw DivergenceError("total loss became non-finite at step " + std::to_string(step), model.params(), step);
    }
    if (eval && step % cfg.eval_every == 0) {
      report.rel_l2_eval = relative_l2(model.predict(eval->queries).data(), eval->truth.data());
    }

    tape.backward(total);
    const ParamStore last_good = model.params();
    try {
      adam_step(model.params(), model::gradients(tape, p), model_state, cfg.adam);
      adam_step(weights, model::gradients(tape, w), weight_state, cfg.adam);
    } catch (const DivergenceError& e) {
      model.params() = last_good;
      throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step), last_good, step);
    }
    result.log.push_back(report);
  }
  result.loss_weights = std::move(weights);
  return result;
}

}  // namespace pgt::train
