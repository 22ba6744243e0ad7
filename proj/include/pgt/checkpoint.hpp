#pragma once

// Binary checkpoint archive. Layout (all integers and floats little-endian):
//
//   magic        8 bytes  "PGTCKPT1"
//   meta_len     u32      byte length of the metadata text
//   meta         bytes    "key=value\n" lines: model.* entries and problem.* entries
//   n_arrays     u32
//   per array:   u32 name_len, name bytes, u32 rank, rank x u64 dims,
//                numel x f64 values (row-major)
//
// Arrays are the model parameters in construction order followed, for PGT models, by
// "context.coords" and "context.values".

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pgt/errors.hpp"
#include "pgt/model.hpp"
#include "pgt/problem.hpp"
#include "pgt/tensor.hpp"
#include "pgt/text.hpp"

namespace pgt::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kMagic[8] = {'P', 'G', 'T', 'C', 'K', 'P', 'T', '1'};

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Tensor>> arrays;

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CompatibilityError("checkpoint is truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  std::string meta;
  for (const auto& [k, v] : ck.meta) meta += k + "=" + v + "\n";
  std::string out(kMagic, sizeof(kMagic));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.arrays.size()));
  for (const auto& [name, t] : ck.arrays) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put<std::uint64_t>(out, d);
    for (double v : t.data()) detail::put<double>(out, v);
  }
  return out;
}

inline Checkpoint deserialize(std::string_view bytes) {
  detail::Reader r(bytes);
  if (r.take(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) {
    throw CompatibilityError("not a checkpoint file (bad magic)");
  }
  Checkpoint ck;
  const std::string meta(r.take(r.get<std::uint32_t>()));
  std::istringstream lines(meta);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CompatibilityError("malformed checkpoint metadata line '" + line + "'");
    ck.meta.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name(r.take(r.get<std::uint32_t>()));
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    Tensor t(shape);
    for (double& v : t.data()) v = r.get<double>();
    ck.arrays.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw CompatibilityError("trailing bytes after checkpoint arrays");
  return ck;
}

inline void save(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  const std::string bytes = serialize(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CompatibilityError("cannot read checkpoint '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint
// ---------------------------------------------------------------------------

inline std::vector<std::pair<std::string, std::string>> problem_entries(const Problem& p) {
  return {{"problem.name", p.name()},
          {"problem.nu", text::format_double(p.nu())},
          {"problem.mode", std::to_string(p.mode())},
          {"problem.t_end", text::format_double(p.hi().back())}};
}

inline Problem problem_from(const Checkpoint& ck) {
  std::map<std::string, std::string> m(ck.meta.begin(), ck.meta.end());
  auto need = [&](const std::string& k) {
    auto it = m.find(k);
    if (it == m.end()) throw CompatibilityError("checkpoint metadata lacks '" + k + "'");
    return it->second;
  };
  const std::string name = need("problem.name");
  const double nu = text::parse_double(need("problem.nu"), "problem.nu");
  const double t_end = text::parse_double(need("problem.t_end"), "problem.t_end");
  if (name == "heat") {
    return Problem::heat(nu, static_cast<int>(text::parse_uint(need("problem.mode"), "problem.mode")), t_end);
  }
  if (name == "taylor_green") return Problem::taylor_green(nu, t_end);
  throw CompatibilityError("unknown problem '" + name + "' in checkpoint");
}

inline model::ModelConfig config_from(const Checkpoint& ck) {
  model::ModelConfig cfg;
  for (const auto& [k, v] : ck.meta) {
    if (k.rfind("model.", 0) == 0 && !cfg.set(k.substr(6), v)) {
      throw CompatibilityError("unknown model key '" + k + "' in checkpoint");
    }
  }
  return cfg;
}

inline Checkpoint make_checkpoint(const model::FieldModel& m, const Problem& problem) {
  Checkpoint ck;
  for (const auto& [k, v] : m.config().entries()) ck.meta.emplace_back("model." + k, v);
  for (auto& e : problem_entries(problem)) ck.meta.push_back(std::move(e));
  const auto& ps = m.params();
  for (std::size_t i = 0; i < ps.size(); ++i) ck.arrays.emplace_back(ps.name(i), ps.value(i));
  if (const auto* pgt = dynamic_cast<const model::PgtModel*>(&m)) {
    ck.arrays.emplace_back("context.coords", pgt->context().coords);
    ck.arrays.emplace_back("context.values", pgt->context().values);
  }
  return ck;
}

/// Lists configuration fields that differ between two model configs.
inline std::vector<std::string> config_differences(const model::ModelConfig& a, const model::ModelConfig& b) {
  std::vector<std::string> diff;
  const auto ea = a.entries(), eb = b.entries();
  for (std::size_t i = 0; i < ea.size(); ++i) {
    if (ea[i].second != eb[i].second) diff.push_back(ea[i].first + " (" + ea[i].second + " vs " + eb[i].second + ")");
  }
  return diff;
}

/// Rebuilds the model stored in a checkpoint.
inline std::unique_ptr<model::FieldModel> restore(const Checkpoint& ck) {
  const model::ModelConfig cfg = config_from(ck);
  const Problem problem = problem_from(ck);
  if (cfg.kind == model::ModelKind::oracle) {
    if (!ck.arrays.empty()) throw CompatibilityError("oracle checkpoints carry no arrays");
    return std::make_unique<model::AnalyticModel>(problem.oracle());
  }
  auto m = model::make_model(cfg, 0);
  auto& ps = m->params();
  std::map<std::string, const Tensor*> arrays;
  for (const auto& [name, t] : ck.arrays) arrays.emplace(name, &t);
  std::vector<std::string> problems;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto it = arrays.find(ps.name(i));
    if (it == arrays.end()) {
      problems.push_back("missing array '" + ps.name(i) + "'");
    } else if (it->second->shape() != ps.value(i).shape()) {
      problems.push_back("'" + ps.name(i) + "' has shape " + shape_str(it->second->shape()) + ", expected " +
                         shape_str(ps.value(i).shape()));
    } else {
      ps.value(i) = *it->second;
    }
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match its model configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw CompatibilityError(msg);
  }
  if (auto* pgt = dynamic_cast<model::PgtModel*>(m.get())) {
    auto c = arrays.find("context.coords");
    auto v = arrays.find("context.values");
    if (c == arrays.end() || v == arrays.end()) throw CompatibilityError("PGT checkpoint lacks its context arrays");
    pgt->set_context({*c->second, *v->second});
  }
  return m;
}

}  // namespace pgt::checkpoint
