#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "qis/array.hpp"
#include "qis/rng.hpp"
#include "qis/tape.hpp"

namespace qis {

// Named parameter blocks; map keeps iteration order deterministic.
class ParamStore {
 public:
  Array& at(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("no parameter '" + name + "'");
    return it->second;
  }

  const Array& at(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("no parameter '" + name + "'");
    return it->second;
  }

  bool has(const std::string& name) const { return values_.count(name) != 0; }

  void set(const std::string& name, Array a) { values_[name] = std::move(a); }

  std::map<std::string, Array>& all() { return values_; }
  const std::map<std::string, Array>& all() const { return values_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (auto& [k, v] : values_) n += v.size();
    return n;
  }

 private:
  std::map<std::string, Array> values_;
};

inline Array xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Array w({fan_in, fan_out});
  for (double& v : w.data) v = rng.uniform(-bound, bound);
  return w;
}

inline void init_linear(ParamStore& ps, const std::string& prefix, std::size_t in,
                        std::size_t out, Rng& rng) {
  ps.set(prefix + ".W", xavier_uniform(in, out, rng));
  ps.set(prefix + ".b", Array({1, out}));
}

inline Var linear(Tape& t, Var x, ParamStore& ps, const std::string& prefix) {
  Var w = t.param(prefix + ".W", ps.at(prefix + ".W"));
  Var b = t.param(prefix + ".b", ps.at(prefix + ".b"));
  return t.add_rowvec(t.matmul(x, w), b);
}

inline void init_layernorm(ParamStore& ps, const std::string& prefix, std::size_t c) {
  ps.set(prefix + ".gain", Array::full(1, c, 1.0));
  ps.set(prefix + ".bias", Array({1, c}));
}

inline Var layernorm(Tape& t, Var x, ParamStore& ps, const std::string& prefix) {
  Var g = t.param(prefix + ".gain", ps.at(prefix + ".gain"));
  Var b = t.param(prefix + ".bias", ps.at(prefix + ".bias"));
  return t.add_rowvec(t.mul_rowvec(t.layernorm_rows(x), g), b);
}

// Affine -> ReLU stack; dims = {in, hidden..., out}, no activation after the last.
inline void init_mlp(ParamStore& ps, const std::string& prefix,
                     const std::vector<std::size_t>& dims, Rng& rng) {
  if (dims.size() < 2) throw std::invalid_argument("init_mlp: need at least 2 dims");
  for (std::size_t l = 0; l + 1 < dims.size(); ++l)
    init_linear(ps, prefix + ".l" + std::to_string(l), dims[l], dims[l + 1], rng);
}

inline Var mlp_forward(Tape& t, Var x, ParamStore& ps, const std::string& prefix,
                       std::size_t num_layers) {
  Var h = x;
  for (std::size_t l = 0; l < num_layers; ++l) {
    h = linear(t, h, ps, prefix + ".l" + std::to_string(l));
    if (l + 1 < num_layers) h = t.relu(h);
  }
  return h;
}

}  // namespace qis
