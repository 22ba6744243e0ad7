#pragma once

// Benchmark problems with closed-form solutions: 1D heat diffusion with a sinusoidal
// initial condition and the 2D Taylor-Green vortex.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "pgt/errors.hpp"
#include "pgt/model.hpp"
#include "pgt/physics.hpp"
#include "pgt/rng.hpp"
#include "pgt/tensor.hpp"

namespace pgt {

class Problem {
 public:
  enum class Kind { heat, taylor_green };

  /// u_t = nu u_xx on [0,1] x [0,t_end], u(x,0) = sin(n pi x), u = 0 at x = 0, 1.
  static Problem heat(double nu = 0.1, int mode = 1, double t_end = 1.0) {
    Problem p;
    p.kind_ = Kind::heat;
    p.nu_ = nu;
    p.mode_ = mode;
    p.lo_ = {0.0, 0.0};
    p.hi_ = {1.0, t_end};
    p.validate();
    return p;
  }

  /// Incompressible Navier-Stokes on [0,2pi]^2 x [0,t_end] with the Taylor-Green vortex.
  static Problem taylor_green(double nu = 0.01, double t_end = 1.0) {
    Problem p;
    p.kind_ = Kind::taylor_green;
    p.nu_ = nu;
    p.lo_ = {0.0, 0.0, 0.0};
    const double two_pi = 2.0 * std::numbers::pi;
    p.hi_ = {two_pi, two_pi, t_end};
    p.validate();
    return p;
  }

  Kind kind() const { return kind_; }
  std::string name() const { return kind_ == Kind::heat ? "heat" : "taylor_green"; }
  double nu() const { return nu_; }
  int mode() const { return mode_; }
  std::size_t spatial_dim() const { return kind_ == Kind::heat ? 1 : 2; }
  std::size_t coord_dim() const { return spatial_dim() + 1; }
  std::size_t channels() const { return kind_ == Kind::heat ? 1 : 3; }
  std::vector<std::string> channel_names() const {
    return kind_ == Kind::heat ? std::vector<std::string>{"u"} : std::vector<std::string>{"u", "v", "p"};
  }
  /// Channels corrupted by observation noise (the velocity components).
  std::size_t noisy_channels() const { return kind_ == Kind::heat ? 1 : 2; }

  const std::vector<double>& lo() const { return lo_; }
  const std::vector<double>& hi() const { return hi_; }
  physics::Box box() const { return {lo_, hi_}; }

  /// The bias family: diffusion with the problem's diffusivity or viscosity.
  physics::PdeFamily gamma_family() const { return physics::PdeFamily::parabolic(nu_, spatial_dim()); }

  void validate() const {
    if (!(nu_ > 0.0) || !std::isfinite(nu_)) throw ConfigError("problem.nu must be a positive finite number");
    if (kind_ == Kind::heat && mode_ < 1) throw ConfigError("problem.mode must be >= 1");
    if (!(hi_.back() > lo_.back())) throw ConfigError("problem.t_end must be > 0");
  }

  /// Fills a model config's problem-dependent fields.
  model::ModelConfig configure(model::ModelConfig cfg) const {
    cfg.spatial_dim = spatial_dim();
    cfg.out_channels = channels();
    cfg.coord_lo = lo_;
    cfg.coord_hi = hi_;
    cfg.pde_family = gamma_family();
    return cfg;
  }

  void exact(std::span<const double> coords, std::span<double> out) const {
    physics::Coordinates c;
    c.x.assign(coords.begin(), coords.end() - 1);
    c.t = coords.back();
    if (kind_ == Kind::heat) {
      out[0] = physics::heat_solution_1d(c, nu_, mode_);
    } else {
      const auto f = physics::taylor_green(c, nu_);
      std::copy(f.begin(), f.end(), out.begin());
    }
  }

  Tensor exact(const Tensor& coords) const {
    Tensor out({coords.rows(), channels()});
    for (std::size_t r = 0; r < coords.rows(); ++r) {
      exact(coords.data().subspan(r * coords.cols(), coords.cols()), out.data().subspan(r * channels(), channels()));
    }
    return out;
  }

  /// Closed-form solution wrapped as a model.
  model::AnalyticModel oracle() const {
    Problem self = *this;
    return model::AnalyticModel(configure({}), [self](std::span<const double> c, std::span<double> o) {
      self.exact(c, o);
    });
  }

  /// Uniform points in the open box shrunk by `margin` on every side.
  Tensor sample_interior(Rng& rng, std::size_t n, double margin = 0.0) const {
    Tensor out({n, coord_dim()});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < coord_dim(); ++c) out(r, c) = uniform(rng, lo_[c] + margin, hi_[c] - margin);
    }
    return out;
  }

  /// Points on the spatial boundary at uniform times.
  Tensor sample_boundary(Rng& rng, std::size_t n) const {
    Tensor out({n, coord_dim()});
    const std::size_t d = spatial_dim();
    std::uniform_int_distribution<std::size_t> face(0, 2 * d - 1);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < coord_dim(); ++c) out(r, c) = uniform(rng, lo_[c], hi_[c]);
      const std::size_t f = face(rng);
      out(r, f / 2) = f % 2 == 0 ? lo_[f / 2] : hi_[f / 2];
    }
    return out;
  }

  /// Points at t = t_0 with uniform spatial position.
  Tensor sample_initial(Rng& rng, std::size_t n) const {
    Tensor out({n, coord_dim()});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < spatial_dim(); ++c) out(r, c) = uniform(rng, lo_[c], hi_[c]);
      out(r, spatial_dim()) = lo_.back();
    }
    return out;
  }

  /// Heat: n x n uniform (x, t) grid, n = 101 by default. Taylor-Green: n x n spatial
  /// snapshot at t = 0.5 (or t_end if earlier), n = 64 by default.
  Tensor eval_grid(std::size_t size = 0) const {
    if (size == 1) throw InputError("an evaluation grid needs at least 2 points per axis");
    auto lin = [](double a, double b, std::size_t n, std::size_t i) {
      return i + 1 == n ? b : a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1);
    };
    if (kind_ == Kind::heat) {
      const std::size_t n = size ? size : 101;
      Tensor g({n * n, 2});
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          g(i * n + j, 0) = lin(lo_[0], hi_[0], n, j);
          g(i * n + j, 1) = lin(lo_[1], hi_[1], n, i);
        }
      }
      return g;
    }
    const std::size_t n = size ? size : 64;
    Tensor g({n * n, 3});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        g(i * n + j, 0) = lin(lo_[0], hi_[0], n, j);
        g(i * n + j, 1) = lin(lo_[1], hi_[1], n, i);
        g(i * n + j, 2) = std::min(0.5, hi_[2]);
      }
    }
    return g;
  }

 private:
  Problem() = default;

  Kind kind_ = Kind::heat;
  double nu_ = 0.1;
  int mode_ = 1;
  std::vector<double> lo_;
  std::vector<double> hi_;
};

}  // namespace pgt
