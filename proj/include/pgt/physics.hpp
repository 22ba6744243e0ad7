#pragma once

// Green's-function attention biases, PDE residual stencils and analytic reference
// solutions.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pgt/autodiff.hpp"
#include "pgt/errors.hpp"
#include "pgt/tensor.hpp"

namespace pgt::physics {

/// A spatiotemporal location: spatial vector x (d components) and time t.
struct Coordinates {
  std::vector<double> x;
  double t = 0.0;
};

struct PdeFamily {
  enum class Kind { parabolic, hyperbolic, elliptic };

  Kind kind = Kind::parabolic;
  double alpha = 1.0;  // diffusivity, parabolic only
  double c = 1.0;      // wave speed, hyperbolic only
  std::size_t dim = 1;

  static PdeFamily parabolic(double alpha, std::size_t d) { return {Kind::parabolic, alpha, 1.0, d}; }
  static PdeFamily hyperbolic(double c, std::size_t d) { return {Kind::hyperbolic, 1.0, c, d}; }
  static PdeFamily elliptic(std::size_t d) { return {Kind::elliptic, 1.0, 1.0, d}; }

  void validate() const {
    if (dim < 1 || dim > 3) throw InputError("PDE spatial dimension must be 1, 2 or 3");
    if (kind == Kind::parabolic && !(alpha > 0.0)) throw InputError("parabolic diffusivity alpha must be > 0");
    if (kind == Kind::hyperbolic && !(c > 0.0)) throw InputError("hyperbolic wave speed c must be > 0");
  }

  bool operator==(const PdeFamily&) const = default;
};

inline std::string kind_name(PdeFamily::Kind k) {
  switch (k) {
    case PdeFamily::Kind::parabolic: return "parabolic";
    case PdeFamily::Kind::hyperbolic: return "hyperbolic";
    case PdeFamily::Kind::elliptic: return "elliptic";
  }
  return "?";
}

inline PdeFamily::Kind parse_kind(const std::string& s) {
  if (s == "parabolic") return PdeFamily::Kind::parabolic;
  if (s == "hyperbolic") return PdeFamily::Kind::hyperbolic;
  if (s == "elliptic") return PdeFamily::Kind::elliptic;
  throw ConfigError("unknown PDE family '" + s + "'");
}

struct GammaOptions {
  // Mask non-past (parabolic) and off-cone (hyperbolic) pairs. When false, |dt| is used.
  bool causal = true;
  // Keep the -(d/2) log(4 pi alpha dt) normalization of the heat kernel. Without it
  // the bias vanishes as alpha grows, which is the vanilla-attention limit.
  bool normalized = true;
  double clamp = 30.0;
  double elliptic_eps = 1e-6;
};

/// Additive attention-logit bias over the global token (index 0) and P context tokens.
struct GammaBias {
  Tensor matrix;                      // (P+1) x (P+1), masked entries hold ad::kMaskSentinel
  std::vector<std::uint8_t> masked;   // row-major, same layout as matrix

  std::size_t size() const { return matrix.rows(); }
  bool is_masked(std::size_t i, std::size_t j) const { return masked[i * size() + j] != 0; }
};

/// log of the d-dimensional heat kernel, unclamped: -r^2/(4 a dt) - (d/2) log(4 pi a dt).
inline double parabolic_log_kernel(double dist2, double dt, double alpha, std::size_t d) {
  return -dist2 / (4.0 * alpha * dt) - 0.5 * static_cast<double>(d) * std::log(4.0 * std::numbers::pi * alpha * dt);
}

namespace detail {

inline void check_tokens(std::span<const Coordinates> tokens, std::size_t d) {
  if (tokens.empty()) throw InputError("attention bias needs at least one context token");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& c = tokens[i];
    if (c.x.size() != d) {
      throw InputError("token " + std::to_string(i) + " has " + std::to_string(c.x.size()) +
                       " spatial components, expected " + std::to_string(d));
    }
    bool finite = std::isfinite(c.t);
    for (double v : c.x) finite = finite && std::isfinite(v);
    if (!finite) throw InputError("token " + std::to_string(i) + " has a non-finite coordinate");
  }
}

inline double dist2(const Coordinates& a, const Coordinates& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.x.size(); ++k) s += (a.x[k] - b.x[k]) * (a.x[k] - b.x[k]);
  return s;
}

// Fills the (P+1)x(P+1) bias; entry(i, j) gets token indices and returns nullopt for masked.
template <class Entry>
GammaBias build(std::size_t p, double clamp, Entry entry) {
  const std::size_t n = p + 1;
  GammaBias g{Tensor(Shape{n, n}, 0.0), std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t j = 1; j < n; ++j) {
      if (i == j) continue;  // self-attention stays neutral
      const std::optional<double> v = entry(i - 1, j - 1);
      if (v) {
        g.matrix(i, j) = std::clamp(*v, -clamp, clamp);
      } else {
        g.matrix(i, j) = ad::kMaskSentinel;
        g.masked[i * n + j] = 1;
      }
    }
  }
  return g;
}

}  // namespace detail

/// Heat-kernel bias: token i attends to token j only if t_j < t_i.
inline GammaBias gamma_parabolic(std::span<const Coordinates> tokens, double alpha, std::size_t d,
                                 const GammaOptions& opts = {}) {
  if (!(alpha > 0.0)) throw InputError("gamma_parabolic: alpha must be > 0");
  detail::check_tokens(tokens, d);
  return detail::build(tokens.size(), opts.clamp, [&](std::size_t i, std::size_t j) -> std::optional<double> {
    double dt = tokens[i].t - tokens[j].t;
    const double r2 = detail::dist2(tokens[i], tokens[j]);
    if (opts.causal) {
      if (dt <= 0.0) return std::nullopt;
    } else {
      dt = std::abs(dt);
      if (dt == 0.0) return r2 == 0.0 ? std::optional<double>(0.0) : std::nullopt;
    }
    if (opts.normalized) return parabolic_log_kernel(r2, dt, alpha, d);
    return -r2 / (4.0 * alpha * dt);
  });
}

/// 1D wave-equation bias: -log(2c) inside the forward light cone, masked outside.
inline GammaBias gamma_hyperbolic(std::span<const Coordinates> tokens, double c, std::size_t d,
                                  const GammaOptions& opts = {}) {
  if (!(c > 0.0)) throw InputError("gamma_hyperbolic: wave speed must be > 0");
  if (d != 1) {
    throw UnsupportedError("gamma_hyperbolic: only the 1D wave kernel is implemented (d=" + std::to_string(d) + ")");
  }
  detail::check_tokens(tokens, d);
  const double inside = -std::log(2.0 * c);
  return detail::build(tokens.size(), opts.clamp, [&](std::size_t i, std::size_t j) -> std::optional<double> {
    double dt = tokens[i].t - tokens[j].t;
    if (!opts.causal) dt = std::abs(dt);
    if (dt <= 0.0) return std::nullopt;
    if (std::sqrt(detail::dist2(tokens[i], tokens[j])) > c * dt) return std::nullopt;
    return inside;
  });
}

/// Spatial-only bias -log(r + eps); symmetric and never masked. The diagonal uses r = 0.
inline GammaBias gamma_elliptic(std::span<const Coordinates> tokens, std::size_t d, const GammaOptions& opts = {}) {
  if (d < 1 || d > 3) throw InputError("gamma_elliptic: d must be 1, 2 or 3");
  detail::check_tokens(tokens, d);
  GammaBias g = detail::build(tokens.size(), opts.clamp, [&](std::size_t i, std::size_t j) -> std::optional<double> {
    return -std::log(std::sqrt(detail::dist2(tokens[i], tokens[j])) + opts.elliptic_eps);
  });
  const double self = std::clamp(-std::log(opts.elliptic_eps), -opts.clamp, opts.clamp);
  for (std::size_t i = 1; i < g.size(); ++i) g.matrix(i, i) = self;
  return g;
}

inline GammaBias build_gamma(std::span<const Coordinates> tokens, const PdeFamily& family,
                             const GammaOptions& opts = {}) {
  family.validate();
  switch (family.kind) {
    case PdeFamily::Kind::parabolic: return gamma_parabolic(tokens, family.alpha, family.dim, opts);
    case PdeFamily::Kind::hyperbolic: return gamma_hyperbolic(tokens, family.c, family.dim, opts);
    case PdeFamily::Kind::elliptic: return gamma_elliptic(tokens, family.dim, opts);
  }
  throw InputError("unknown PDE family");
}

// ---------------------------------------------------------------------------
// Finite-difference residuals
// ---------------------------------------------------------------------------

using Field = std::function<double(const Coordinates&)>;

/// Axis-aligned bounds over (x_1..x_d, t). Empty means unbounded.
struct Box {
  std::vector<double> lo;
  std::vector<double> hi;

  bool bounded() const { return !lo.empty(); }
};

namespace detail {

inline double coord(const Coordinates& p, std::size_t axis) { return axis < p.x.size() ? p.x[axis] : p.t; }

inline Coordinates moved(Coordinates p, std::size_t axis, double delta) {
  if (axis < p.x.size()) {
    p.x[axis] += delta;
  } else {
    p.t += delta;
  }
  return p;
}

// -1: forward one-sided, +1: backward one-sided, 0: central
inline int stencil_side(const Coordinates& p, std::size_t axis, double h, const Box& domain) {
  if (!domain.bounded()) return 0;
  const double v = coord(p, axis);
  if (v - h < domain.lo.at(axis)) return -1;
  if (v + h > domain.hi.at(axis)) return 1;
  return 0;
}

}  // namespace detail

/// Second-order first derivative along an axis (spatial index, or x.size() for time).
inline double first_derivative(const Field& f, const Coordinates& p, std::size_t axis, double h,
                               const Box& domain = {}) {
  if (!(h > 0.0)) throw InputError("stencil step h must be > 0");
  using detail::moved;
  switch (detail::stencil_side(p, axis, h, domain)) {
    case -1: return (-3.0 * f(p) + 4.0 * f(moved(p, axis, h)) - f(moved(p, axis, 2 * h))) / (2.0 * h);
    case 1: return (3.0 * f(p) - 4.0 * f(moved(p, axis, -h)) + f(moved(p, axis, -2 * h))) / (2.0 * h);
    default: return (f(moved(p, axis, h)) - f(moved(p, axis, -h))) / (2.0 * h);
  }
}

/// Second-order second derivative along an axis.
inline double second_derivative(const Field& f, const Coordinates& p, std::size_t axis, double h,
                                const Box& domain = {}) {
  if (!(h > 0.0)) throw InputError("stencil step h must be > 0");
  using detail::moved;
  const double h2 = h * h;
  switch (detail::stencil_side(p, axis, h, domain)) {
    case -1:
      return (2.0 * f(p) - 5.0 * f(moved(p, axis, h)) + 4.0 * f(moved(p, axis, 2 * h)) - f(moved(p, axis, 3 * h))) / h2;
    case 1:
      return (2.0 * f(p) - 5.0 * f(moved(p, axis, -h)) + 4.0 * f(moved(p, axis, -2 * h)) -
              f(moved(p, axis, -3 * h))) /
             h2;
    default: return (f(moved(p, axis, h)) - 2.0 * f(p) + f(moved(p, axis, -h))) / h2;
  }
}

/// u_t - nu u_xx at a point of a 1D field.
inline double heat_residual_1d(const Field& u, const Coordinates& p, double nu, double h, const Box& domain = {}) {
  if (p.x.size() != 1) throw InputError("heat_residual_1d expects a 1D point");
  return first_derivative(u, p, 1, h, domain) - nu * second_derivative(u, p, 0, h, domain);
}

struct NsFields {
  Field u, v, p;
};

/// (momentum-x, momentum-y, continuity) residuals of 2D incompressible Navier-Stokes.
inline std::array<double, 3> ns_residual_2d(const NsFields& f, const Coordinates& pt, double nu, double h,
                                            const Box& domain = {}) {
  if (pt.x.size() != 2) throw InputError("ns_residual_2d expects a 2D point");
  const double u = f.u(pt), v = f.v(pt);
  const double ut = first_derivative(f.u, pt, 2, h, domain);
  const double ux = first_derivative(f.u, pt, 0, h, domain);
  const double uy = first_derivative(f.u, pt, 1, h, domain);
  const double vt = first_derivative(f.v, pt, 2, h, domain);
  const double vx = first_derivative(f.v, pt, 0, h, domain);
  const double vy = first_derivative(f.v, pt, 1, h, domain);
  const double px = first_derivative(f.p, pt, 0, h, domain);
  const double py = first_derivative(f.p, pt, 1, h, domain);
  const double lap_u = second_derivative(f.u, pt, 0, h, domain) + second_derivative(f.u, pt, 1, h, domain);
  const double lap_v = second_derivative(f.v, pt, 0, h, domain) + second_derivative(f.v, pt, 1, h, domain);
  return {ut + u * ux + v * uy + px - nu * lap_u, vt + u * vx + v * vy + py - nu * lap_v, ux + vy};
}

// ---------------------------------------------------------------------------
// Analytic solutions
// ---------------------------------------------------------------------------

/// exp(-nu (n pi)^2 t) sin(n pi x)
inline double heat_solution_1d(const Coordinates& p, double nu, int n) {
  const double k = n * std::numbers::pi;
  return std::exp(-nu * k * k * p.t) * std::sin(k * p.x.at(0));
}

/// Taylor-Green vortex (u, v, p).
inline std::array<double, 3> taylor_green(const Coordinates& pt, double nu) {
  const double x = pt.x.at(0), y = pt.x.at(1);
  const double decay = std::exp(-2.0 * nu * pt.t);
  return {-std::cos(x) * std::sin(y) * decay, std::sin(x) * std::cos(y) * decay,
          -0.25 * (std::cos(2 * x) + std::cos(2 * y)) * decay * decay};
}

// ---------------------------------------------------------------------------
// Vanilla-attention limit
// ---------------------------------------------------------------------------

/// max |softmax(logits + bias) - softmax(logits)| over rows of the bias with no masked entry.
inline double attention_bias_deviation(const Tensor& logits, const GammaBias& bias) {
  if (logits.shape() != bias.matrix.shape()) {
    throw DimensionError("logits " + shape_str(logits.shape()) + " vs bias " + shape_str(bias.matrix.shape()));
  }
  ad::Tape tape;
  auto plain = ad::softmax_rows(tape.constant(logits));
  auto biased = ad::softmax_rows(ad::add(tape.constant(logits), tape.constant(bias.matrix)));
  const std::size_t n = logits.rows();
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    bool row_masked = false;
    for (std::size_t j = 0; j < n; ++j) row_masked = row_masked || bias.is_masked(i, j);
    if (row_masked) continue;
    for (std::size_t j = 0; j < n; ++j) {
      worst = std::max(worst, std::abs(biased.value()(i, j) - plain.value()(i, j)));
    }
  }
  return worst;
}

/// Deviation between heat-kernel-biased and unbiased attention for a large diffusivity,
/// with the causal mask disabled. Tends to 0 as alpha grows.
inline double vanilla_limit_check(std::span<const Coordinates> tokens, double alpha_large, std::size_t d,
                                  const Tensor& logits) {
  GammaOptions opts;
  opts.causal = false;
  opts.normalized = false;
  return attention_bias_deviation(logits, gamma_parabolic(tokens, alpha_large, d, opts));
}

}  // namespace pgt::physics
