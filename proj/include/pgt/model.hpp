#pragma once

// The physics-guided transformer: context embedding, Gamma-biased encoder stack, query
// cross-attention and a FiLM-modulated implicit decoder. Also the two coordinate-network
// baselines (tanh MLP and plain SIREN) and an analytic wrapper used as an oracle.

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pgt/autodiff.hpp"
#include "pgt/physics.hpp"
#include "pgt/rng.hpp"
#include "pgt/tensor.hpp"
#include "pgt/text.hpp"

namespace pgt::model {

using ad::Tape;
using ad::Var;

enum class ModelKind { pgt, pinn, siren, oracle };
enum class DecoderKind { film_siren, siren_no_film, film_mlp, plain_mlp };

inline std::string kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::pgt: return "pgt";
    case ModelKind::pinn: return "pinn";
    case ModelKind::siren: return "siren";
    case ModelKind::oracle: return "oracle";
  }
  return "?";
}

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "pgt") return ModelKind::pgt;
  if (s == "pinn") return ModelKind::pinn;
  if (s == "siren") return ModelKind::siren;
  if (s == "oracle") return ModelKind::oracle;
  throw ConfigError("unknown model kind '" + std::string(s) + "'");
}

inline std::string decoder_name(DecoderKind k) {
  switch (k) {
    case DecoderKind::film_siren: return "film_siren";
    case DecoderKind::siren_no_film: return "siren_no_film";
    case DecoderKind::film_mlp: return "film_mlp";
    case DecoderKind::plain_mlp: return "plain_mlp";
  }
  return "?";
}

inline DecoderKind parse_decoder_kind(std::string_view s) {
  if (s == "film_siren") return DecoderKind::film_siren;
  if (s == "siren_no_film") return DecoderKind::siren_no_film;
  if (s == "film_mlp") return DecoderKind::film_mlp;
  if (s == "plain_mlp") return DecoderKind::plain_mlp;
  throw ConfigError("unknown decoder kind '" + std::string(s) + "'");
}

inline bool uses_film(DecoderKind k) { return k == DecoderKind::film_siren || k == DecoderKind::film_mlp; }
inline bool uses_sine(DecoderKind k) { return k == DecoderKind::film_siren || k == DecoderKind::siren_no_film; }

struct ModelConfig {
  ModelKind kind = ModelKind::pgt;

  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_mult = 2;
  std::size_t decoder_layers = 3;
  std::size_t decoder_width = 128;
  double omega0 = 30.0;

  bool use_gamma = true;
  bool gamma_causal = true;
  bool gamma_normalized = true;
  bool use_pde_loss = true;
  bool use_bc_ic = true;
  DecoderKind decoder_kind = DecoderKind::film_siren;
  bool variance_head = false;

  std::size_t pinn_depth = 4;
  std::size_t pinn_width = 64;
  // Context tokens are the first max_context observations (0: all of them).
  std::size_t max_context = 0;

  physics::PdeFamily pde_family = physics::PdeFamily::parabolic(0.1, 1);
  std::size_t spatial_dim = 1;
  std::size_t out_channels = 1;
  // Network inputs are mapped affinely from [coord_lo, coord_hi] onto [-1, 1].
  std::vector<double> coord_lo{0.0, 0.0};
  std::vector<double> coord_hi{1.0, 1.0};

  std::size_t coord_dim() const { return spatial_dim + 1; }
  std::size_t d_k() const { return d_model / n_heads; }
  std::size_t film_layers() const { return decoder_layers - 1; }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                        std::to_string(n_heads) + ")");
    }
    if (decoder_layers == 0 || decoder_width == 0) throw ConfigError("decoder needs at least one layer of width > 0");
    if (pinn_depth == 0 || pinn_width == 0) throw ConfigError("pinn depth and width must be > 0");
    if (ffn_mult == 0) throw ConfigError("ffn_mult must be > 0");
    if (!(omega0 > 0.0)) throw ConfigError("omega0 must be > 0");
    if (spatial_dim < 1 || spatial_dim > 3) throw ConfigError("spatial_dim must be 1, 2 or 3");
    if (out_channels == 0) throw ConfigError("out_channels must be > 0");
    if (coord_lo.size() != coord_dim() || coord_hi.size() != coord_dim()) {
      throw ConfigError("coord_lo/coord_hi need spatial_dim + 1 entries");
    }
    for (std::size_t i = 0; i < coord_dim(); ++i) {
      if (!(coord_lo[i] < coord_hi[i])) throw ConfigError("coord_lo must be below coord_hi");
    }
    try {
      pde_family.validate();
    } catch (const InputError& e) {
      throw ConfigError(e.what());
    }
    if (pde_family.dim != spatial_dim) throw ConfigError("pde_family dimension must equal spatial_dim");
  }

  /// Flat key/value view (keys without section prefix), in a fixed order.
  std::vector<std::pair<std::string, std::string>> entries() const {
    using text::format_double;
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    auto list = [](const std::vector<double>& v) { return text::join(v, [](double d) { return format_double(d); }); };
    return {
        {"kind", kind_name(kind)},
        {"d_model", std::to_string(d_model)},
        {"n_layers", std::to_string(n_layers)},
        {"n_heads", std::to_string(n_heads)},
        {"ffn_mult", std::to_string(ffn_mult)},
        {"decoder_layers", std::to_string(decoder_layers)},
        {"decoder_width", std::to_string(decoder_width)},
        {"omega0", format_double(omega0)},
        {"use_gamma", b(use_gamma)},
        {"gamma_causal", b(gamma_causal)},
        {"gamma_normalized", b(gamma_normalized)},
        {"use_pde_loss", b(use_pde_loss)},
        {"use_bc_ic", b(use_bc_ic)},
        {"decoder_kind", decoder_name(decoder_kind)},
        {"variance_head", b(variance_head)},
        {"pinn_depth", std::to_string(pinn_depth)},
        {"pinn_width", std::to_string(pinn_width)},
        {"max_context", std::to_string(max_context)},
        {"pde_family", physics::kind_name(pde_family.kind)},
        {"pde_alpha", format_double(pde_family.alpha)},
        {"pde_wave_speed", format_double(pde_family.c)},
        {"spatial_dim", std::to_string(spatial_dim)},
        {"out_channels", std::to_string(out_channels)},
        {"coord_lo", list(coord_lo)},
        {"coord_hi", list(coord_hi)},
    };
  }

  /// Applies one entry; returns false for an unknown key.
  bool set(std::string_view key, std::string_view value) {
    const std::string k(key);
    auto sz = [&] { return static_cast<std::size_t>(text::parse_uint(value, k)); };
    auto dbl = [&] { return text::parse_double(value, k); };
    auto bl = [&] { return text::parse_bool(value, k); };
    auto list = [&] {
      std::vector<double> v;
      for (const auto& s : text::split(value, ',')) v.push_back(text::parse_double(s, k));
      return v;
    };
    if (k == "kind") kind = parse_model_kind(text::trim(value));
    else if (k == "d_model") d_model = sz();
    else if (k == "n_layers") n_layers = sz();
    else if (k == "n_heads") n_heads = sz();
    else if (k == "ffn_mult") ffn_mult = sz();
    else if (k == "decoder_layers") decoder_layers = sz();
    else if (k == "decoder_width") decoder_width = sz();
    else if (k == "omega0") omega0 = dbl();
    else if (k == "use_gamma") use_gamma = bl();
    else if (k == "gamma_causal") gamma_causal = bl();
    else if (k == "gamma_normalized") gamma_normalized = bl();
    else if (k == "use_pde_loss") use_pde_loss = bl();
    else if (k == "use_bc_ic") use_bc_ic = bl();
    else if (k == "decoder_kind") decoder_kind = parse_decoder_kind(text::trim(value));
    else if (k == "variance_head") variance_head = bl();
    else if (k == "pinn_depth") pinn_depth = sz();
    else if (k == "pinn_width") pinn_width = sz();
    else if (k == "max_context") max_context = sz();
    else if (k == "pde_family") pde_family.kind = physics::parse_kind(std::string(text::trim(value)));
    else if (k == "pde_alpha") pde_family.alpha = dbl();
    else if (k == "pde_wave_speed") pde_family.c = dbl();
    else if (k == "spatial_dim") {
      spatial_dim = sz();
      pde_family.dim = spatial_dim;
    } else if (k == "out_channels") out_channels = sz();
    else if (k == "coord_lo") coord_lo = list();
    else if (k == "coord_hi") coord_hi = list();
    else return false;
    return true;
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Named parameter arrays in insertion order.
class ParamStore {
 public:
  Tensor& add(std::string name, Tensor value) {
    if (index_.count(name)) throw InputError("duplicate parameter '" + name + "'");
    index_.emplace(name, names_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return values_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InputError("unknown parameter '" + name + "'");
    return it->second;
  }

  Tensor& at(const std::string& name) { return values_[index(name)]; }
  const Tensor& at(const std::string& name) const { return values_[index(name)]; }

  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& value(std::size_t i) { return values_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  bool operator==(const ParamStore& o) const { return names_ == o.names_ && values_ == o.values_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// Parameters placed on a tape as leaves.
struct Bound {
  const ParamStore* store = nullptr;
  std::vector<Var> vars;

  Var operator[](const std::string& name) const { return vars[store->index(name)]; }
};

inline Bound bind(Tape& tape, const ParamStore& store, bool requires_grad = true) {
  Bound b{&store, {}};
  b.vars.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) b.vars.push_back(tape.leaf(store.value(i), requires_grad));
  return b;
}

/// Adjoints of every bound parameter; zeros for parameters the root does not reach.
inline std::vector<Tensor> gradients(const Tape& tape, const Bound& b) {
  std::vector<Tensor> g;
  g.reserve(b.vars.size());
  for (const Var& v : b.vars) g.push_back(tape.has_grad(v) ? tape.grad(v) : Tensor(v.shape(), 0.0));
  return g;
}

namespace init {

inline Tensor uniform(Rng& rng, Shape shape, double bound) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  return uniform(rng, {fan_in, fan_out}, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
}

inline Tensor siren_first(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  return uniform(rng, {fan_in, fan_out}, 1.0 / static_cast<double>(fan_in));
}

// Hidden sine layer whose pre-activation is multiplied by `omega`.
inline Tensor siren_hidden(Rng& rng, std::size_t fan_in, std::size_t fan_out, double omega) {
  return uniform(rng, {fan_in, fan_out}, std::sqrt(6.0 / static_cast<double>(fan_in)) / omega);
}

inline Tensor siren_bias(Rng& rng, std::size_t fan_in, std::size_t width) {
  return uniform(rng, {width}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

}  // namespace init

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// Sparse observations: coordinates [P x (d+1)] with time in the last column, values [P x C].
struct Observations {
  Tensor coords;
  Tensor values;

  std::size_t size() const { return coords.rank() == 2 ? coords.rows() : 0; }
};

inline Tensor normalize_coords(const Tensor& coords, const ModelConfig& cfg) {
  if (coords.rank() != 2 || coords.cols() != cfg.coord_dim()) {
    throw DimensionError("coordinates " + shape_str(coords.shape()) + " do not have " +
                         std::to_string(cfg.coord_dim()) + " columns");
  }
  Tensor out(coords.shape());
  for (std::size_t r = 0; r < coords.rows(); ++r) {
    for (std::size_t c = 0; c < coords.cols(); ++c) {
      out(r, c) = 2.0 * (coords(r, c) - cfg.coord_lo[c]) / (cfg.coord_hi[c] - cfg.coord_lo[c]) - 1.0;
    }
  }
  return out;
}

inline std::vector<physics::Coordinates> to_coordinates(const Tensor& coords) {
  std::vector<physics::Coordinates> out(coords.rows());
  const std::size_t d = coords.cols() - 1;
  for (std::size_t r = 0; r < coords.rows(); ++r) {
    out[r].x.resize(d);
    for (std::size_t c = 0; c < d; ++c) out[r].x[c] = coords(r, c);
    out[r].t = coords(r, d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// Attention weights captured during a forward pass, one matrix per (layer, head).
struct ForwardTrace {
  std::vector<Tensor> self_attention;
  std::vector<Tensor> cross_attention;
};

inline Var linear(const Bound& p, Var x, const std::string& w, const std::string& b) {
  return ad::add(ad::matmul(x, p[w]), p[b]);
}

/// Context tokens: row 0 is the learnable global token, row i the embedding of
/// observation i: u_i W_u + [x_i, t_i] W_p + b.
inline Var embed_context(const Bound& p, Var values, Var coords) {
  if (values.value().rows() == 0) throw InputError("embed_context: empty observation set");
  Var tokens = ad::add(ad::add(ad::matmul(values, p["embed.W_u"]), ad::matmul(coords, p["embed.W_p"])), p["embed.b"]);
  return ad::concat_rows({p["embed.global"], tokens});
}

/// Multi-head softmax(Q K^T / sqrt(d_k) + bias) V. The same bias is added to every head.
inline Var multi_head_attention(Var q, Var k, Var v, std::size_t heads, const Tensor* bias,
                                std::vector<Tensor>* trace) {
  const std::size_t d = q.value().cols();
  const std::size_t dk = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  std::optional<Var> bias_var;
  if (bias) bias_var = q.tape().constant(*bias);
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : ad::slice_cols(q, h * dk, (h + 1) * dk);
    Var kh = heads == 1 ? k : ad::slice_cols(k, h * dk, (h + 1) * dk);
    Var vh = heads == 1 ? v : ad::slice_cols(v, h * dk, (h + 1) * dk);
    Var logits = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv);
    if (bias_var) logits = ad::add(logits, *bias_var);
    Var weights = ad::softmax_rows(logits);
    if (trace) trace->push_back(weights.value());
    outs.push_back(ad::matmul(weights, vh));
  }
  return heads == 1 ? outs[0] : ad::concat_cols(outs);
}

struct EncoderOutput {
  Var global;   // [1 x D]
  Var context;  // [P x D]
};

/// Pre-norm blocks C <- C + Attn(LN(C)) + MLP(LN(C)); the result is split at row 0.
inline EncoderOutput encoder_forward(const Bound& p, Var tokens, const Tensor* gamma, std::size_t layers,
                                     std::size_t heads, ForwardTrace* trace = nullptr) {
  const std::size_t n = tokens.value().rows();
  if (gamma && (gamma->rank() != 2 || gamma->rows() != n || gamma->cols() != n)) {
    throw DimensionError("attention bias " + shape_str(gamma->shape()) + " does not match " + std::to_string(n) +
                         " tokens");
  }
  Var c = tokens;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string pre = "enc" + std::to_string(l) + ".";
    Var ln = ad::add(ad::mul(ad::layernorm_rows(c), p[pre + "ln_g"]), p[pre + "ln_b"]);
    Var q = ad::matmul(ln, p[pre + "Wq"]);
    Var k = ad::matmul(ln, p[pre + "Wk"]);
    Var v = ad::matmul(ln, p[pre + "Wv"]);
    Var attn = ad::matmul(multi_head_attention(q, k, v, heads, gamma, trace ? &trace->self_attention : nullptr),
                          p[pre + "Wo"]);
    Var ffn = linear(p, ad::gelu(linear(p, ln, pre + "W1", pre + "b1")), pre + "W2", pre + "b2");
    c = ad::add(ad::add(c, attn), ffn);
  }
  return {ad::slice_rows(c, 0, 1), ad::slice_rows(c, 1, n)};
}

/// phi(q): two gelu hidden layers of width d_model and a linear read-out.
inline Var query_embed(const Bound& p, Var coords) {
  Var h = ad::gelu(linear(p, coords, "query.W0", "query.b0"));
  h = ad::gelu(linear(p, h, "query.W1", "query.b1"));
  return linear(p, h, "query.W2", "query.b2");
}

/// g(q): cross-attention of query embeddings over the encoded context tokens.
inline Var query_attend(const Bound& p, Var phi, Var context, std::size_t heads, ForwardTrace* trace = nullptr) {
  if (context.value().rows() == 0) throw InputError("query_attend: empty context");
  Var q = ad::matmul(phi, p["cross.Wq"]);
  Var k = ad::matmul(context, p["cross.Wk"]);
  Var v = ad::matmul(context, p["cross.Wv"]);
  return multi_head_attention(q, k, v, heads, nullptr, trace ? &trace->cross_attention : nullptr);
}

/// Per-layer modulation (scale alpha, shift beta, frequency omega), each [Q x width].
struct FilmParams {
  std::vector<Var> alpha;
  std::vector<Var> beta;
  std::vector<Var> omega;
};

// softplus(kOmegaOffset) == 0.5, so a zero raw output gives omega = 1.
inline const double kOmegaOffset = std::log(std::exp(0.5) - 1.0);

/// Hypernetwork H([g(q), c_glob]): one gelu hidden layer of width 2 d_model.
inline FilmParams hypernetwork(const Bound& p, Var g, Var global, std::size_t film_layers, std::size_t width) {
  const std::size_t q = g.value().rows();
  Var in = ad::concat_cols({g, ad::tile_rows(global, q)});
  Var h = ad::gelu(linear(p, in, "hyper.W1", "hyper.b1"));
  Var raw = linear(p, h, "hyper.W2", "hyper.b2");
  FilmParams f;
  for (std::size_t l = 0; l < film_layers; ++l) {
    const std::size_t base = 3 * l * width;
    f.alpha.push_back(ad::shift(ad::slice_cols(raw, base, base + width), 1.0));
    f.beta.push_back(ad::slice_cols(raw, base + width, base + 2 * width));
    f.omega.push_back(ad::shift(ad::softplus(ad::shift(ad::slice_cols(raw, base + 2 * width, base + 3 * width),
                                                       kOmegaOffset)),
                                0.5));
  }
  return f;
}

inline FilmParams identity_film(Tape& tape, std::size_t rows, std::size_t width, std::size_t layers) {
  FilmParams f;
  for (std::size_t l = 0; l < layers; ++l) {
    f.alpha.push_back(tape.constant(Tensor({rows, width}, 1.0)));
    f.beta.push_back(tape.constant(Tensor({rows, width}, 0.0)));
    f.omega.push_back(tape.constant(Tensor({rows, width}, 1.0)));
  }
  return f;
}

/// Implicit decoder. `input` is the normalized coordinate matrix for FiLM variants and
/// [coords, g(q), c_glob] for the concatenating variants; `film` is required for FiLM
/// variants and ignored otherwise.
inline Var decode(const Bound& p, const ModelConfig& cfg, Var input, const FilmParams* film) {
  const DecoderKind kind = cfg.decoder_kind;
  const bool sine = uses_sine(kind);
  if (uses_film(kind) && (!film || film->alpha.size() != cfg.film_layers())) {
    throw ConfigError("decoder '" + decoder_name(kind) + "' needs FiLM parameters for every hidden layer");
  }
  Var z0 = linear(p, input, "dec.W0", "dec.b0");
  Var h = sine ? ad::sin(ad::scale(z0, cfg.omega0)) : ad::gelu(z0);
  for (std::size_t l = 1; l < cfg.decoder_layers; ++l) {
    const std::string i = std::to_string(l);
    Var z = linear(p, h, "dec.W" + i, "dec.b" + i);
    if (uses_film(kind)) z = ad::mul(film->omega[l - 1], ad::add(ad::mul(film->alpha[l - 1], z), film->beta[l - 1]));
    h = sine ? ad::sin(z) : ad::gelu(z);
  }
  return linear(p, h, "dec.Wout", "dec.bout");
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

struct Prediction {
  Var value;                        // [Q x C]
  std::optional<Var> log_variance;  // [Q x 1], heteroscedastic head only
};

class FieldModel {
 public:
  virtual ~FieldModel() = default;

  virtual const ModelConfig& config() const = 0;
  virtual ParamStore& params() = 0;
  virtual const ParamStore& params() const = 0;

  /// Predictions at physical query coordinates [Q x (d+1)].
  virtual Prediction forward(Tape& tape, const Bound& params, const Tensor& queries,
                             ForwardTrace* trace = nullptr) const = 0;

  virtual std::unique_ptr<FieldModel> clone() const = 0;

  /// Gradient-free evaluation in chunks of at most `chunk` queries.
  Tensor predict(const Tensor& queries, std::size_t chunk = 2048) const {
    const std::size_t q = queries.rows();
    const std::size_t c = config().out_channels;
    Tensor out({q, c});
    for (std::size_t begin = 0; begin < q; begin += chunk) {
      const std::size_t end = std::min(q, begin + chunk);
      const std::size_t w = queries.cols();
      Tensor part({end - begin, w}, std::vector<double>(queries.storage().begin() + static_cast<std::ptrdiff_t>(begin * w),
                                                        queries.storage().begin() + static_cast<std::ptrdiff_t>(end * w)));
      Tape tape;
      Bound b = bind(tape, params(), false);
      Prediction pred = forward(tape, b, part);
      std::copy(pred.value.value().storage().begin(), pred.value.value().storage().end(),
                out.storage().begin() + static_cast<std::ptrdiff_t>(begin * c));
    }
    return out;
  }
};

/// Physics-guided transformer conditioned on a fixed context set.
class PgtModel : public FieldModel {
 public:
  PgtModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = make_stream(seed, "init");
    initialize(rng);
  }

  const ModelConfig& config() const override { return cfg_; }
  ParamStore& params() override { return params_; }
  const ParamStore& params() const override { return params_; }

  /// Installs the observations used as context tokens and precomputes Gamma.
  void set_context(Observations obs) {
    if (obs.size() == 0) throw InputError("PGT context needs at least one observation");
    if (obs.values.rank() != 2 || obs.values.rows() != obs.size() || obs.values.cols() != cfg_.out_channels) {
      throw DimensionError("observation values " + shape_str(obs.values.shape()) + " do not match " +
                           std::to_string(obs.size()) + " x " + std::to_string(cfg_.out_channels));
    }
    if (cfg_.max_context > 0 && obs.size() > cfg_.max_context) {
      const std::size_t k = cfg_.max_context, w = obs.coords.cols(), c = obs.values.cols();
      obs.coords = Tensor({k, w}, std::vector<double>(obs.coords.storage().begin(),
                                                       obs.coords.storage().begin() + static_cast<std::ptrdiff_t>(k * w)));
      obs.values = Tensor({k, c}, std::vector<double>(obs.values.storage().begin(),
                                                       obs.values.storage().begin() + static_cast<std::ptrdiff_t>(k * c)));
    }
    context_coords_ = normalize_coords(obs.coords, cfg_);
    physics::GammaOptions opts;
    opts.causal = cfg_.gamma_causal;
    opts.normalized = cfg_.gamma_normalized;
    gamma_ = physics::build_gamma(to_coordinates(obs.coords), cfg_.pde_family, opts);
    context_ = std::move(obs);
  }

  const Observations& context() const { return context_; }
  const physics::GammaBias& gamma() const { return gamma_; }

  /// Overrides the bias used by the encoder (must match P+1 tokens).
  void set_gamma_matrix(Tensor m) { gamma_.matrix = std::move(m); }

  Prediction forward(Tape& tape, const Bound& p, const Tensor& queries, ForwardTrace* trace = nullptr) const override {
    if (context_.size() == 0) throw InputError("PGT forward called before set_context");
    Var tokens = embed_context(p, tape.constant(context_.values), tape.constant(context_coords_));
    EncoderOutput enc = encoder_forward(p, tokens, cfg_.use_gamma ? &gamma_.matrix : nullptr, cfg_.n_layers,
                                        cfg_.n_heads, trace);
    Var coords = tape.constant(normalize_coords(queries, cfg_));
    Var g = query_attend(p, query_embed(p, coords), enc.context, cfg_.n_heads, trace);
    Var out;
    if (uses_film(cfg_.decoder_kind)) {
      FilmParams film = hypernetwork(p, g, enc.global, cfg_.film_layers(), cfg_.decoder_width);
      out = decode(p, cfg_, coords, &film);
    } else {
      Var in = ad::concat_cols({coords, g, ad::tile_rows(enc.global, queries.rows())});
      out = decode(p, cfg_, in, nullptr);
    }
    Prediction pred{out, std::nullopt};
    if (cfg_.variance_head) pred.log_variance = linear(p, g, "var.W", "var.b");
    return pred;
  }

  std::unique_ptr<FieldModel> clone() const override { return std::make_unique<PgtModel>(*this); }

 private:
  void initialize(Rng& rng) {
    const std::size_t d = cfg_.d_model, c = cfg_.out_channels, in = cfg_.coord_dim();
    const std::size_t f = cfg_.ffn_mult * d, w = cfg_.decoder_width;
    params_.add("embed.W_u", init::xavier(rng, c, d));
    params_.add("embed.W_p", init::xavier(rng, in, d));
    params_.add("embed.b", Tensor({d}, 0.0));
    params_.add("embed.global", init::uniform(rng, {1, d}, std::sqrt(6.0 / static_cast<double>(1 + d))));
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string pre = "enc" + std::to_string(l) + ".";
      params_.add(pre + "ln_g", Tensor({d}, 1.0));
      params_.add(pre + "ln_b", Tensor({d}, 0.0));
      for (const char* name : {"Wq", "Wk", "Wv", "Wo"}) params_.add(pre + name, init::xavier(rng, d, d));
      params_.add(pre + "W1", init::xavier(rng, d, f));
      params_.add(pre + "b1", Tensor({f}, 0.0));
      params_.add(pre + "W2", init::xavier(rng, f, d));
      params_.add(pre + "b2", Tensor({d}, 0.0));
    }
    params_.add("query.W0", init::xavier(rng, in, d));
    params_.add("query.b0", Tensor({d}, 0.0));
    params_.add("query.W1", init::xavier(rng, d, d));
    params_.add("query.b1", Tensor({d}, 0.0));
    params_.add("query.W2", init::xavier(rng, d, d));
    params_.add("query.b2", Tensor({d}, 0.0));
    for (const char* name : {"cross.Wq", "cross.Wk", "cross.Wv"}) params_.add(name, init::xavier(rng, d, d));

    if (uses_film(cfg_.decoder_kind)) {
      params_.add("hyper.W1", init::xavier(rng, 2 * d, 2 * d));
      params_.add("hyper.b1", Tensor({2 * d}, 0.0));
      params_.add("hyper.W2", Tensor({2 * d, 3 * w * cfg_.film_layers()}, 0.0));
      params_.add("hyper.b2", Tensor({3 * w * cfg_.film_layers()}, 0.0));
    }
    const std::size_t dec_in = uses_film(cfg_.decoder_kind) ? in : in + 2 * d;
    add_decoder(params_, rng, cfg_, dec_in);
    if (cfg_.variance_head) {
      params_.add("var.W", Tensor({d, 1}, 0.0));
      params_.add("var.b", Tensor({1}, 0.0));
    }
  }

 public:
  /// Decoder parameters dec.W0..dec.W{L-1}, dec.Wout, dec.bout for any decoder kind.
  static void add_decoder(ParamStore& ps, Rng& rng, const ModelConfig& cfg, std::size_t fan_in) {
    const std::size_t w = cfg.decoder_width;
    const bool sine = uses_sine(cfg.decoder_kind);
    ps.add("dec.W0", sine ? init::siren_first(rng, fan_in, w) : init::xavier(rng, fan_in, w));
    ps.add("dec.b0", sine ? init::siren_bias(rng, fan_in, w) : Tensor({w}, 0.0));
    for (std::size_t l = 1; l < cfg.decoder_layers; ++l) {
      const std::string i = std::to_string(l);
      // hidden sine layers run at unit frequency (omega_l = 1 at initialization)
      ps.add("dec.W" + i, sine ? init::siren_hidden(rng, w, w, 1.0) : init::xavier(rng, w, w));
      ps.add("dec.b" + i, sine ? init::siren_bias(rng, w, w) : Tensor({w}, 0.0));
    }
    ps.add("dec.Wout", init::xavier(rng, w, cfg.out_channels));
    ps.add("dec.bout", Tensor({cfg.out_channels}, 0.0));
  }

 private:
  ModelConfig cfg_;
  ParamStore params_;
  Observations context_;
  Tensor context_coords_;
  physics::GammaBias gamma_;
};

/// Coordinate MLP with tanh activations.
class PinnModel : public FieldModel {
 public:
  PinnModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = make_stream(seed, "init");
    std::size_t fan_in = cfg_.coord_dim();
    for (std::size_t l = 0; l < cfg_.pinn_depth; ++l) {
      params_.add("pinn.W" + std::to_string(l), init::xavier(rng, fan_in, cfg_.pinn_width));
      params_.add("pinn.b" + std::to_string(l), Tensor({cfg_.pinn_width}, 0.0));
      fan_in = cfg_.pinn_width;
    }
    params_.add("pinn.Wout", init::xavier(rng, fan_in, cfg_.out_channels));
    params_.add("pinn.bout", Tensor({cfg_.out_channels}, 0.0));
  }

  const ModelConfig& config() const override { return cfg_; }
  ParamStore& params() override { return params_; }
  const ParamStore& params() const override { return params_; }

  Prediction forward(Tape& tape, const Bound& p, const Tensor& queries, ForwardTrace* = nullptr) const override {
    Var h = tape.constant(normalize_coords(queries, cfg_));
    for (std::size_t l = 0; l < cfg_.pinn_depth; ++l) {
      h = ad::tanh(linear(p, h, "pinn.W" + std::to_string(l), "pinn.b" + std::to_string(l)));
    }
    return {linear(p, h, "pinn.Wout", "pinn.bout"), std::nullopt};
  }

  std::unique_ptr<FieldModel> clone() const override { return std::make_unique<PinnModel>(*this); }

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

/// Plain SIREN on coordinates, sharing the decoder's parameter names and layout.
class SirenModel : public FieldModel {
 public:
  SirenModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.decoder_kind = DecoderKind::siren_no_film;
    cfg_.validate();
    Rng rng = make_stream(seed, "init");
    PgtModel::add_decoder(params_, rng, cfg_, cfg_.coord_dim());
  }

  const ModelConfig& config() const override { return cfg_; }
  ParamStore& params() override { return params_; }
  const ParamStore& params() const override { return params_; }

  Prediction forward(Tape& tape, const Bound& p, const Tensor& queries, ForwardTrace* = nullptr) const override {
    return {decode(p, cfg_, tape.constant(normalize_coords(queries, cfg_)), nullptr), std::nullopt};
  }

  std::unique_ptr<FieldModel> clone() const override { return std::make_unique<SirenModel>(*this); }

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

/// Wraps a closed-form field as a parameter-free model.
class AnalyticModel : public FieldModel {
 public:
  using Fn = std::function<void(std::span<const double> coords, std::span<double> out)>;

  AnalyticModel(ModelConfig cfg, Fn fn) : cfg_(std::move(cfg)), fn_(std::move(fn)) { cfg_.kind = ModelKind::oracle; }

  const ModelConfig& config() const override { return cfg_; }
  ParamStore& params() override { return params_; }
  const ParamStore& params() const override { return params_; }

  Prediction forward(Tape& tape, const Bound&, const Tensor& queries, ForwardTrace* = nullptr) const override {
    const std::size_t c = cfg_.out_channels, w = queries.cols();
    Tensor out({queries.rows(), c});
    for (std::size_t r = 0; r < queries.rows(); ++r) {
      fn_(queries.data().subspan(r * w, w), out.data().subspan(r * c, c));
    }
    return {tape.constant(std::move(out)), std::nullopt};
  }

  std::unique_ptr<FieldModel> clone() const override { return std::make_unique<AnalyticModel>(*this); }

 private:
  ModelConfig cfg_;
  ParamStore params_;
  Fn fn_;
};

/// Builds a trainable model of the configured kind. PGT models still need set_context.
inline std::unique_ptr<FieldModel> make_model(const ModelConfig& cfg, std::uint64_t seed) {
  switch (cfg.kind) {
    case ModelKind::pgt: return std::make_unique<PgtModel>(cfg, seed);
    case ModelKind::pinn: return std::make_unique<PinnModel>(cfg, seed);
    case ModelKind::siren: return std::make_unique<SirenModel>(cfg, seed);
    case ModelKind::oracle: throw ConfigError("oracle models are built from a problem, not from parameters");
  }
  throw ConfigError("unknown model kind");
}

}  // namespace pgt::model
