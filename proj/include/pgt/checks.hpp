#pragma once

// Invariant suite behind `pgt check`. Each check is deterministic and self-contained;
// the full level adds the multi-seed statistical checks, which train real models.

#include <cmath>
#include <functional>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "pgt/autodiff.hpp"
#include "pgt/benchmarks.hpp"
#include "pgt/config.hpp"
#include "pgt/model.hpp"
#include "pgt/physics.hpp"
#include "pgt/problem.hpp"
#include "pgt/rng.hpp"
#include "pgt/training.hpp"

namespace pgt::checks {

using ad::Tape;
using ad::Var;

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Pinned tolerances.
inline constexpr double kFdStep = 1e-5;
inline constexpr double kGradTol = 1e-4;
inline constexpr double kExactTol = 1e-12;
inline constexpr double kKernelTol = 1e-6;
inline constexpr double kVanillaTol = 1e-3;
inline constexpr double kStencilStep = 1e-3;

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Largest per-input relative error ||analytic - fd|| / max(||analytic||, ||fd||, 1e-6).
inline double gradient_error(const std::vector<Tensor>& inputs, const ScalarFn& f, double h = kFdStep) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
  Var root = f(tape, leaves);
  tape.backward(root);

  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape t;
    std::vector<Var> ls;
    for (const auto& x : xs) ls.push_back(t.leaf(x, false));
    return f(t, ls).value().item();
  };
  double worst = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = tape.has_grad(leaves[k]) ? tape.grad(leaves[k]) : Tensor(inputs[k].shape(), 0.0);
    double num = 0.0, na = 0.0, nf = 0.0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + h;
      const double up = eval(probe);
      probe[k][i] = x0 - h;
      const double down = eval(probe);
      probe[k][i] = x0;
      const double fd = (up - down) / (2.0 * h);
      num += (analytic[i] - fd) * (analytic[i] - fd);
      na += analytic[i] * analytic[i];
      nf += fd * fd;
    }
    worst = std::max(worst, std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nf), 1e-6}));
  }
  return worst;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

/// Reduces any tensor to a scalar with fixed random weights so no adjoint is uniform.
inline Var weighted_sum(Var x, std::uint64_t salt = 7) {
  Rng rng = make_stream(salt, "probe");
  return ad::sum(ad::mul(x, x.tape().constant(random_tensor(rng, x.shape()))));
}

inline CheckResult check_primitive_gradients() {
  Rng rng = make_stream(11, "check");
  auto m = [&](std::size_t r, std::size_t c) { return random_tensor(rng, {r, c}); };
  auto pos = [&](std::size_t r, std::size_t c) { return random_tensor(rng, {r, c}, 0.5, 2.0); };
  struct Case {
    std::string name;
    std::vector<Tensor> inputs;
    ScalarFn fn;
  };
  Tensor masked = m(3, 4);
  masked(0, 1) = ad::kMaskSentinel;
  masked(2, 3) = ad::kMaskSentinel;
  std::vector<Case> cases{
      {"matmul", {m(3, 4), m(4, 2)}, [](Tape&, auto& v) { return weighted_sum(ad::matmul(v[0], v[1])); }},
      {"transpose", {m(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::transpose(v[0])); }},
      {"add_broadcast", {m(3, 4), random_tensor(rng, {4})},
       [](Tape&, auto& v) { return weighted_sum(ad::add(v[0], v[1])); }},
      {"sub", {m(3, 4), m(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::sub(v[0], v[1])); }},
      {"mul_broadcast", {m(3, 4), random_tensor(rng, {4})}, [](Tape&, auto& v) { return weighted_sum(ad::mul(v[0], v[1])); }},
      {"div", {m(3, 4), pos(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::div(v[0], v[1])); }},
      {"scale_shift", {m(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::shift(ad::scale(v[0], -1.7), 0.3)); }},
      {"sin", {m(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::sin(v[0])); }},
      {"exp", {m(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::exp(v[0])); }},
      {"log", {pos(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::log(v[0])); }},
      {"square", {m(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::square(v[0])); }},
      {"gelu", {m(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::gelu(v[0])); }},
      {"tanh", {m(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::tanh(v[0])); }},
      {"softplus", {m(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::softplus(v[0])); }},
      {"softmax_rows", {m(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::softmax_rows(v[0])); }},
      {"softmax_rows_masked", {m(3, 4)},
       [masked](Tape& t, auto& v) { return weighted_sum(ad::softmax_rows(ad::add(v[0], t.constant(masked)))); }},
      {"layernorm_rows", {m(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::layernorm_rows(v[0])); }},
      {"sum_mean", {m(3, 4)},
       [](Tape&, auto& v) { return ad::add(ad::sum(ad::square(v[0])), ad::mean(ad::sin(v[0]))); }},
      {"rowwise_sum", {m(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::rowwise_sum(v[0])); }},
      {"reshape", {m(3, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::reshape(v[0], {2, 6})); }},
      {"slices", {m(4, 5)},
       [](Tape&, auto& v) { return weighted_sum(ad::slice_cols(ad::slice_rows(v[0], 1, 3), 2, 5)); }},
      {"concat", {m(3, 2), m(3, 4), m(1, 6)},
       [](Tape&, auto& v) { return weighted_sum(ad::concat_rows({ad::concat_cols({v[0], v[1]}), v[2]})); }},
      {"tile_rows", {m(1, 4)}, [](Tape&, auto& v) { return weighted_sum(ad::tile_rows(v[0], 3)); }},
  };
  std::ostringstream detail;
  bool ok = true;
  double worst = 0.0;
  for (const auto& c : cases) {
    const double e = gradient_error(c.inputs, c.fn);
    worst = std::max(worst, e);
    if (!(e < kGradTol)) {
      ok = false;
      detail << c.name << " rel.err " << e << "; ";
    }
  }
  detail << cases.size() << " primitives, worst rel.err " << worst;
  return {"autodiff.gradients.primitives", ok, detail.str()};
}

// ---------------------------------------------------------------------------
// Toy models
// ---------------------------------------------------------------------------

inline model::ModelConfig toy_config() {
  model::ModelConfig c = Problem::heat().configure({});
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.ffn_mult = 2;
  c.decoder_layers = 3;
  c.decoder_width = 8;
  c.pinn_depth = 2;
  c.pinn_width = 8;
  return c;
}

/// Toy observations with distinct times plus one equal-time pair.
inline model::Observations toy_observations(std::size_t n = 6, std::uint64_t seed = 3) {
  Rng rng = make_stream(seed, "toy");
  model::Observations obs{Tensor({n, 2}), Tensor({n, 1})};
  for (std::size_t i = 0; i < n; ++i) {
    obs.coords(i, 0) = uniform(rng, 0.0, 1.0);
    obs.coords(i, 1) = uniform(rng, 0.05, 1.0);
    obs.values(i, 0) = uniform(rng, -1.0, 1.0);
  }
  if (n >= 3) obs.coords(n - 1, 1) = obs.coords(n - 2, 1);
  return obs;
}

inline Tensor toy_queries(std::size_t n = 3, std::uint64_t seed = 5) {
  Rng rng = make_stream(seed, "toy");
  return Problem::heat().sample_interior(rng, n);
}

/// Perturbs every parameter so zero-initialized heads take part in gradient checks.
inline void jitter(model::ParamStore& ps, double scale, std::uint64_t seed) {
  Rng rng = make_stream(seed, "jitter");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (double& v : ps.value(i).data()) v += uniform(rng, -scale, scale);
  }
}

/// Relative FD error of d mean(pred [+ log variance]) / d params, over all parameters.
inline double model_gradient_error(const model::FieldModel& m, const Tensor& queries) {
  const auto& ps = m.params();
  std::vector<Tensor> inputs;
  for (std::size_t i = 0; i < ps.size(); ++i) inputs.push_back(ps.value(i));
  return gradient_error(inputs, [&](Tape& tape, const std::vector<Var>& leaves) {
    model::Bound b{&ps, leaves};
    auto pred = m.forward(tape, b, queries);
    Var root = weighted_sum(pred.value, 13);
    if (pred.log_variance) root = ad::add(root, weighted_sum(*pred.log_variance, 17));
    return root;
  });
}

inline CheckResult check_model_gradients() {
  auto cfg = toy_config();
  cfg.omega0 = 3.0;
  cfg.variance_head = true;
  std::ostringstream detail;
  bool ok = true;
  for (auto kind : {model::DecoderKind::film_siren, model::DecoderKind::siren_no_film}) {
    cfg.decoder_kind = kind;
    model::PgtModel m(cfg, 1);
    m.set_context(toy_observations(4));
    jitter(m.params(), 0.1, 2);
    const double e = model_gradient_error(m, toy_queries(3));
    ok = ok && e < kGradTol;
    detail << model::decoder_name(kind) << " rel.err " << e << "; ";
  }
  auto base = toy_config();
  base.kind = model::ModelKind::pinn;
  const double pinn = model_gradient_error(model::PinnModel(base, 1), toy_queries(3));
  base.kind = model::ModelKind::siren;
  base.omega0 = 3.0;
  const double siren = model_gradient_error(model::SirenModel(base, 1), toy_queries(3));
  ok = ok && pinn < kGradTol && siren < kGradTol;
  detail << "pinn rel.err " << pinn << "; siren rel.err " << siren;
  return {"autodiff.gradients.end_to_end", ok, detail.str()};
}

inline CheckResult check_softmax_rows() {
  Rng rng = make_stream(21, "check");
  Tensor x = random_tensor(rng, {6, 9}, -20.0, 20.0);
  for (std::size_t r = 0; r < 6; ++r) x(r, (r * 2) % 9) = ad::kMaskSentinel;
  Tape t;
  const Tensor y = ad::softmax_rows(t.constant(x)).value();
  double worst = 0.0;
  bool ok = true;
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 9; ++c) {
      ok = ok && y(r, c) >= 0.0 && y(r, c) <= 1.0;
      if (ad::is_masked_logit(x(r, c))) ok = ok && y(r, c) == 0.0;
      s += y(r, c);
    }
    worst = std::max(worst, std::abs(s - 1.0));
  }
  ok = ok && worst <= kExactTol;
  return {"autodiff.softmax.rows", ok, "max |row sum - 1| = " + text::format_double(worst)};
}

// ---------------------------------------------------------------------------
// Physics bias
// ---------------------------------------------------------------------------

/// Runs a toy PGT encoder and checks that every layer and head gives exactly zero weight
/// to the pairs `forbidden(i, j)` flags (context indices, 0-based).
inline bool zero_weight_everywhere(const model::PgtModel& m, const Tensor& queries,
                                   const std::function<bool(std::size_t, std::size_t)>& forbidden,
                                   std::size_t& violations) {
  Tape tape;
  auto b = model::bind(tape, m.params(), false);
  model::ForwardTrace trace;
  m.forward(tape, b, queries, &trace);
  violations = 0;
  for (const auto& w : trace.self_attention) {
    for (std::size_t i = 1; i < w.rows(); ++i) {
      for (std::size_t j = 1; j < w.cols(); ++j) {
        if (i != j && forbidden(i - 1, j - 1) && w(i, j) != 0.0) ++violations;
      }
    }
  }
  return violations == 0 && !trace.self_attention.empty();
}

inline CheckResult check_causality() {
  auto cfg = toy_config();
  const auto obs = toy_observations(10, 8);
  const auto queries = toy_queries(2);
  std::size_t bad_parabolic = 0, bad_hyperbolic = 0;
  model::PgtModel parabolic(cfg, 4);
  jitter(parabolic.params(), 0.2, 4);
  parabolic.set_context(obs);
  const bool p_ok = zero_weight_everywhere(
      parabolic, queries, [&](std::size_t i, std::size_t j) { return obs.coords(j, 1) >= obs.coords(i, 1); },
      bad_parabolic);

  cfg.pde_family = physics::PdeFamily::hyperbolic(0.5, 1);
  model::PgtModel hyperbolic(cfg, 4);
  hyperbolic.params() = parabolic.params();
  hyperbolic.set_context(obs);
  const bool h_ok = zero_weight_everywhere(
      hyperbolic, queries,
      [&](std::size_t i, std::size_t j) {
        const double dt = obs.coords(i, 1) - obs.coords(j, 1);
        return dt <= 0.0 || std::abs(obs.coords(i, 0) - obs.coords(j, 0)) > 0.5 * dt;
      },
      bad_hyperbolic);
  return {"physics.causality", p_ok && h_ok,
          "non-zero forbidden weights: parabolic " + std::to_string(bad_parabolic) + ", hyperbolic " +
              std::to_string(bad_hyperbolic)};
}

/// Trapezoid integral of exp(Gamma) over x in [-20 sigma, 20 sigma].
inline double heat_kernel_mass(double alpha, double dt, std::size_t n = 40001) {
  const double sigma = std::sqrt(2.0 * alpha * dt);
  const double a = -20.0 * sigma, step = 40.0 * sigma / static_cast<double>(n - 1);
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double x = a + step * static_cast<double>(k);
    const double f = std::exp(physics::parabolic_log_kernel(x * x, dt, alpha, 1));
    s += (k == 0 || k + 1 == n) ? 0.5 * f : f;
  }
  return s * step;
}

inline CheckResult check_kernel_normalization() {
  double worst = 0.0;
  for (double alpha : {0.01, 0.1, 1.0}) {
    for (double dt : {0.01, 0.1, 1.0}) worst = std::max(worst, std::abs(heat_kernel_mass(alpha, dt) - 1.0));
  }
  return {"physics.kernel_normalization", worst < kKernelTol, "max |mass - 1| = " + text::format_double(worst)};
}

inline CheckResult check_monotone_locality() {
  bool ok = true;
  for (double dt : {0.05, 0.5, 1.0}) {
    double prev = INFINITY;
    for (int k = 0; k <= 200; ++k) {
      const double r = 0.0025 * k;  // stays inside the clamp range
      std::vector<physics::Coordinates> tokens{{{0.0}, 0.0}, {{r}, dt}};
      const double g = physics::gamma_parabolic(tokens, 0.1, 1).matrix(2, 1);
      ok = ok && g < prev;
      prev = g;
    }
  }
  return {"physics.monotone_locality", ok, "Gamma strictly decreasing in distance for fixed dt"};
}

// ---------------------------------------------------------------------------
// Model invariants
// ---------------------------------------------------------------------------

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

inline CheckResult check_shift_invariance() {
  model::PgtModel m(toy_config(), 6);
  jitter(m.params(), 0.2, 6);
  m.set_context(toy_observations(8));
  const Tensor q = toy_queries(5);
  const Tensor base = m.predict(q);
  Tensor shifted = m.gamma().matrix;
  for (std::size_t i = 0; i < shifted.rows(); ++i) {
    for (std::size_t j = 0; j < shifted.cols(); ++j) {
      if (!m.gamma().is_masked(i, j)) shifted(i, j) += 2.5;
    }
  }
  model::PgtModel s = m;
  s.set_gamma_matrix(shifted);
  const double d = max_abs_diff(base, s.predict(q));
  return {"model.shift_invariance", d <= kExactTol, "max output change = " + text::format_double(d)};
}

/// Output deviation between use_gamma on (causal mask and normalization off) and off.
inline double vanilla_deviation(double alpha) {
  auto cfg = toy_config();
  cfg.gamma_causal = false;
  cfg.gamma_normalized = false;
  cfg.pde_family.alpha = alpha;
  model::PgtModel with(cfg, 9);
  jitter(with.params(), 0.2, 9);
  cfg.use_gamma = false;
  model::PgtModel without(cfg, 9);
  without.params() = with.params();
  auto obs = toy_observations(8, 12);
  obs.coords(7, 1) += 0.013;  // distinct times: equal-time pairs stay masked without causality
  with.set_context(obs);
  without.set_context(obs);
  const Tensor q = toy_queries(5);
  return max_abs_diff(with.predict(q), without.predict(q));
}

inline CheckResult check_vanilla_recovery() {
  const double d3 = vanilla_deviation(1e3), d6 = vanilla_deviation(1e6), d9 = vanilla_deviation(1e9);
  const bool ok = d9 <= kVanillaTol && d6 <= d3 && d9 <= d6;
  return {"model.vanilla_recovery", ok,
          "deviation at alpha 1e3/1e6/1e9 = " + text::format_double(d3) + " / " + text::format_double(d6) + " / " +
              text::format_double(d9)};
}

inline CheckResult check_identity_film() {
  auto cfg = toy_config();
  model::SirenModel siren(cfg, 14);
  Rng rng = make_stream(15, "toy");
  const Tensor coords = model::normalize_coords(toy_queries(6), cfg);

  Tape tape;
  auto b = model::bind(tape, siren.params(), false);
  const auto film = model::identity_film(tape, coords.rows(), cfg.decoder_width, cfg.film_layers());
  auto film_cfg = cfg;
  film_cfg.decoder_kind = model::DecoderKind::film_siren;
  const Tensor with_film = model::decode(b, film_cfg, tape.constant(coords), &film).value();
  const Tensor plain = model::decode(b, siren.config(), tape.constant(coords), nullptr).value();
  const double d_exact = max_abs_diff(with_film, plain);

  // The zero-initialized hypernetwork yields the same identity modulation.
  model::PgtModel pgt(cfg, 14);
  pgt.set_context(toy_observations(5));
  Tape t2;
  auto pb = model::bind(t2, pgt.params(), false);
  const Tensor qc = model::normalize_coords(toy_queries(6), cfg);
  auto enc = model::encoder_forward(pb, model::embed_context(pb, t2.constant(pgt.context().values),
                                                             t2.constant(model::normalize_coords(
                                                                 pgt.context().coords, cfg))),
                                    &pgt.gamma().matrix, cfg.n_layers, cfg.n_heads);
  auto g = model::query_attend(pb, model::query_embed(pb, t2.constant(qc)), enc.context, cfg.n_heads);
  auto hyper = model::hypernetwork(pb, g, enc.global, cfg.film_layers(), cfg.decoder_width);
  auto id = model::identity_film(t2, qc.rows(), cfg.decoder_width, cfg.film_layers());
  double d_init = 0.0;
  for (std::size_t l = 0; l < cfg.film_layers(); ++l) {
    d_init = std::max({d_init, max_abs_diff(hyper.alpha[l].value(), id.alpha[l].value()),
                       max_abs_diff(hyper.beta[l].value(), id.beta[l].value()),
                       max_abs_diff(hyper.omega[l].value(), id.omega[l].value())});
  }
  (void)rng;
  const bool ok = d_exact <= kExactTol && d_init <= kExactTol;
  return {"model.identity_film", ok,
          "film vs siren max diff " + text::format_double(d_exact) + "; initial modulation offset " +
              text::format_double(d_init)};
}

inline CheckResult check_permutation_equivariance() {
  auto obs = toy_observations(9, 30);
  model::PgtModel m(toy_config(), 16);
  jitter(m.params(), 0.2, 16);
  m.set_context(obs);
  const Tensor q = toy_queries(4);
  const Tensor base = m.predict(q);
  model::Observations perm{Tensor(obs.coords.shape()), Tensor(obs.values.shape())};
  const std::vector<std::size_t> order{4, 0, 8, 2, 7, 1, 6, 3, 5};
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (std::size_t c = 0; c < 2; ++c) perm.coords(i, c) = obs.coords(order[i], c);
    perm.values(i, 0) = obs.values(order[i], 0);
  }
  model::PgtModel p = m;
  p.set_context(perm);
  const double d = max_abs_diff(base, p.predict(q));
  return {"model.permutation_equivariance", d <= kExactTol, "max output change = " + text::format_double(d)};
}

// ---------------------------------------------------------------------------
// Training invariants
// ---------------------------------------------------------------------------

inline CheckResult check_heteroscedastic_reduction() {
  Rng rng = make_stream(40, "check");
  const Tensor pred = random_tensor(rng, {17, 3}), obs = random_tensor(rng, {17, 3});
  Tape t;
  const double mse = train::data_loss(t.constant(pred), obs).value().item();
  const double uw =
      train::heteroscedastic_data_loss(t.constant(pred), t.constant(Tensor({17, 1}, 0.0)), obs).value().item();
  const double d = std::abs(mse - uw);
  return {"training.heteroscedastic_reduction", d <= kExactTol, "|UW - MSE| = " + text::format_double(d)};
}

inline CheckResult check_sigma_gradient() {
  Rng rng = make_stream(41, "check");
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> L, s;
    for (int k = 0; k < 4; ++k) {
      L.push_back(uniform(rng, 0.01, 3.0));
      s.push_back(uniform(rng, -1.0, 1.0));
    }
    Tape t;
    std::vector<Var> lv, sv;
    for (int k = 0; k < 4; ++k) {
      lv.push_back(t.constant(Tensor::scalar(L[k])));
      sv.push_back(t.leaf(Tensor::scalar(s[k]), true));
    }
    t.backward(train::total_loss(lv, sv));
    for (int k = 0; k < 4; ++k) {
      const double sigma = std::exp(s[k]);
      const double analytic = t.grad(sv[k]).item() / sigma;  // d/dsigma = (d/ds) / sigma
      const double closed = -L[k] / (sigma * sigma * sigma) + 1.0 / sigma;
      worst = std::max(worst, std::abs(analytic - closed) / std::max(std::abs(closed), 1e-12));
    }
  }
  return {"training.sigma_gradient", worst < 1e-6, "max rel.err vs closed form " + text::format_double(worst)};
}

// ---------------------------------------------------------------------------
// Analytic oracles
// ---------------------------------------------------------------------------

inline CheckResult check_oracle(const Problem& problem) {
  const auto oracle = problem.oracle();
  const auto obs = bench::sample_sparse_observations(problem, 50, 0);
  const auto report = bench::evaluate(oracle, problem, obs, kStencilStep);
  Rng rng = make_stream(50, "check");
  const Tensor pts = problem.sample_interior(rng, 1000, kStencilStep);
  double worst = 0.0;
  for (const auto& c : model::to_coordinates(pts)) {
    if (problem.kind() == Problem::Kind::heat) {
      const physics::Field u = [&](const physics::Coordinates& p) {
        return physics::heat_solution_1d(p, problem.nu(), problem.mode());
      };
      worst = std::max(worst, std::abs(physics::heat_residual_1d(u, c, problem.nu(), kStencilStep)));
    } else {
      auto ch = [&](std::size_t k) {
        return physics::Field([&, k](const physics::Coordinates& p) { return physics::taylor_green(p, problem.nu())[k]; });
      };
      for (double r : physics::ns_residual_2d({ch(0), ch(1), ch(2)}, c, problem.nu(), kStencilStep)) {
        worst = std::max(worst, std::abs(r));
      }
    }
  }
  const double bound = 10.0 * kStencilStep * kStencilStep;
  const bool ok = report.rel_l2_total < kExactTol && worst < bound && report.pde_residual < bound;
  return {"oracle." + problem.name(), ok,
          "rel-L2 " + text::format_double(report.rel_l2_total) + ", max interior |r| " + text::format_double(worst) +
              ", grid mean |r| " + text::format_double(report.pde_residual) + " (bound " + text::format_double(bound) +
              ")"};
}

// ---------------------------------------------------------------------------
// Determinism
// ---------------------------------------------------------------------------

/// CSV row with the wall-clock column removed.
inline std::string row_without_time(const bench::CellResult& c) {
  std::ostringstream os;
  bench::write_results_row(os, c);
  std::string row = os.str();
  return row.substr(0, row.rfind(','));
}

inline bench::CellSpec tiny_cell(const Problem& problem, const std::string& variant, std::size_t n_obs) {
  bench::CellSpec s;
  s.suite = "check";
  s.problem = problem;
  s.variant = variant;
  s.n_obs = n_obs;
  s.seed = 3;
  s.base = toy_config();
  s.train.steps = 3;
  s.train.n_r = 8;
  s.train.n_b = 4;
  s.train.n_0 = 4;
  s.train.eval_every = 2;
  return s;
}

inline CheckResult check_determinism() {
  bool ok = true;
  std::string detail;
  for (const auto& spec : {tiny_cell(Problem::heat(), "pgt", 12), tiny_cell(Problem::taylor_green(), "pgt_uw", 12),
                           tiny_cell(Problem::heat(), "pinn", 12)}) {
    const auto a = bench::run_cell(spec), b = bench::run_cell(spec);
    const bool same = row_without_time(a) == row_without_time(b) && a.params == b.params;
    ok = ok && same;
    detail += spec.problem.name() + "/" + spec.variant + (same ? " identical; " : " DIFFERS; ");
  }
  return {"determinism.cells", ok, detail};
}

// ---------------------------------------------------------------------------
// Statistical (full level)
// ---------------------------------------------------------------------------

struct AblationSummary {
  std::map<std::string, double> rel_l2;
  std::map<std::string, double> residual;
};

inline AblationSummary summarize_ablation(const std::vector<bench::CellResult>& cells) {
  AblationSummary s;
  for (const auto& row : bench::ablation_rows()) {
    s.rel_l2[row] = bench::median_of(cells, row, [](const auto& c) { return c.report.rel_l2_total; });
    s.residual[row] = bench::median_of(cells, row, [](const auto& c) { return c.report.pde_residual; });
  }
  return s;
}

/// Ordering checks on ablation medians: returns {reconstruction, decoder, residual} results.
inline std::vector<CheckResult> ablation_ordering(const AblationSummary& s) {
  auto chain = [&](const std::vector<std::string>& rows) {
    bool ok = true;
    std::string d;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i) {
        ok = ok && s.rel_l2.at(rows[i - 1]) < s.rel_l2.at(rows[i]);
        d += " < ";
      }
      d += rows[i] + " " + text::format_double(s.rel_l2.at(rows[i]));
    }
    return std::pair{ok, d};
  };
  auto [rec_ok, rec] = chain({"full", "no_pde_loss", "no_gamma", "no_physics"});
  auto [dec_ok, dec] = chain({"full", "film_mlp", "siren_no_film", "plain_mlp"});
  const double ratio = s.residual.at("no_pde_loss") / s.residual.at("full");
  return {{"ablation.reconstruction_order", rec_ok, rec},
          {"ablation.decoder_hierarchy", dec_ok, dec},
          {"ablation.residual_factor", ratio >= 2.0, "no_pde_loss / full residual = " + text::format_double(ratio)}};
}

/// Median final rel-L2 over seeds is below the median at 10% of the step budget.
inline CheckResult check_training_progress(const std::vector<bench::CellResult>& cells) {
  std::vector<double> early, final;
  for (const auto& c : cells) {
    if (c.diverged || c.log.empty()) continue;
    const std::size_t target = c.log.size() / 10;
    std::optional<double> e;
    for (const auto& r : c.log) {
      if (r.rel_l2_eval && r.step <= target) e = r.rel_l2_eval;
    }
    if (!e) continue;
    early.push_back(*e);
    final.push_back(c.report.rel_l2_total);
  }
  if (early.empty()) return {"training.median_progress", false, "no cell logged an early evaluation"};
  const double me = bench::median(early), mf = bench::median(final);
  return {"training.median_progress", mf < me,
          "median rel-L2 at 10% budget " + text::format_double(me) + ", final " + text::format_double(mf)};
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

inline std::vector<std::function<CheckResult()>> fast_checks() {
  return {check_primitive_gradients,
          check_model_gradients,
          check_softmax_rows,
          check_causality,
          check_kernel_normalization,
          check_monotone_locality,
          check_shift_invariance,
          check_vanilla_recovery,
          check_identity_film,
          check_permutation_equivariance,
          check_heteroscedastic_reduction,
          check_sigma_gradient,
          [] { return check_oracle(Problem::heat()); },
          [] { return check_oracle(Problem::taylor_green()); },
          check_determinism};
}

inline CheckResult guarded(const std::function<CheckResult()>& fn, const std::string& fallback_name) {
  try {
    return fn();
  } catch (const std::exception& e) {
    return {fallback_name, false, std::string("threw: ") + e.what()};
  }
}

inline void print(std::ostream& os, const CheckResult& r) {
  os << (r.passed ? "PASS " : "FAIL ") << r.name << " : " << r.detail << std::endl;
}

/// Runs the suite and prints one line per invariant. `full` adds the 3-seed ablation
/// and training-progress checks driven by `cfg`.
inline std::vector<CheckResult> run(bool full, const ExperimentConfig& cfg, std::ostream& os) {
  std::vector<CheckResult> results;
  std::size_t index = 0;
  for (const auto& fn : fast_checks()) {
    results.push_back(guarded(fn, "check#" + std::to_string(index++)));
    print(os, results.back());
  }
  if (full) {
    auto plan = cfg.plan();
    if (plan.seeds.size() < 3) plan.seeds = {plan.seeds.front(), plan.seeds.front() + 1, plan.seeds.front() + 2};
    try {
      const auto ablation = bench::run_ablation(plan);
      for (auto& r : ablation_ordering(summarize_ablation(ablation))) {
        results.push_back(r);
        print(os, r);
      }
      auto heat_plan = plan;
      heat_plan.heat_models = {"pgt"};
      results.push_back(check_training_progress(bench::run_heat_suite(heat_plan)));
    } catch (const std::exception& e) {
      results.push_back({"statistical", false, std::string("threw: ") + e.what()});
    }
    print(os, results.back());
  }
  return results;
}

}  // namespace pgt::checks
