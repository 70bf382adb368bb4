#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "qis/nn.hpp"
#include "qis/sampler.hpp"
#include "qis/tape.hpp"

namespace qis {

enum class QueryMode { learned, nonparam_fps };

inline const char* to_string(QueryMode m) {
  return m == QueryMode::learned ? "learned" : "nonparam_fps";
}

inline QueryMode query_mode_from(const std::string& s) {
  if (s == "learned") return QueryMode::learned;
  if (s == "nonparam_fps") return QueryMode::nonparam_fps;
  throw std::invalid_argument("unknown query mode '" + s + "'");
}

struct DecoderConfig {
  std::size_t layers = 3;       // L
  std::size_t heads = 4;        // H
  std::size_t queries = 32;     // K
  std::size_t channels = 32;    // C
  QueryMode query_mode = QueryMode::learned;
  bool self_attention = true;

  void validate() const {
    if (queries < 1) throw std::invalid_argument("decoder: K must be >= 1");
    if (heads < 1) throw std::invalid_argument("decoder: H must be >= 1");
    if (channels % heads != 0)
      throw std::invalid_argument("decoder: C=" + std::to_string(channels) +
                                  " not divisible by H=" + std::to_string(heads));
  }
};

struct QuerySetVars {
  Var initial;              // Q0, K x C
  std::vector<Var> layers;  // Q_l for l = 1..L
  Var final_queries;        // Q_L

  Var at(std::size_t l) const { return l == 0 ? initial : layers[l - 1]; }
};

inline void init_decoder(ParamStore& ps, const DecoderConfig& cfg, Rng& rng) {
  cfg.validate();
  std::size_t c = cfg.channels;
  if (cfg.query_mode == QueryMode::learned)
    ps.set("decoder.query", xavier_uniform(cfg.queries, c, rng));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    std::string p = "decoder.layer" + std::to_string(l);
    if (cfg.self_attention) {
      for (const char* w : {".self.Wq", ".self.Wk", ".self.Wv", ".self.Wo"})
        ps.set(p + w, xavier_uniform(c, c, rng));
      init_layernorm(ps, p + ".norm1", c);
    }
    for (const char* w : {".cross.Wq", ".cross.Wk", ".cross.Wv", ".cross.Wo"})
      ps.set(p + w, xavier_uniform(c, c, rng));
    init_layernorm(ps, p + ".norm2", c);
    init_mlp(ps, p + ".ffn", {c, 2 * c, c}, rng);
    init_layernorm(ps, p + ".norm3", c);
  }
}

// Multi-head attention with per-head scale sqrt(C/H). Softmax rows are pushed
// onto `attn_trace` when provided (one entry per head).
inline Var multihead_attention(Tape& t, Var queries, Var memory, ParamStore& ps,
                               const std::string& prefix, std::size_t heads,
                               std::vector<Var>* attn_trace = nullptr) {
  std::size_t c = t.val(queries).cols();
  if (c % heads != 0) throw std::invalid_argument("attention: C not divisible by H");
  std::size_t dh = c / heads;
  Var q = t.matmul(queries, t.param(prefix + ".Wq", ps.at(prefix + ".Wq")));
  Var k = t.matmul(memory, t.param(prefix + ".Wk", ps.at(prefix + ".Wk")));
  Var v = t.matmul(memory, t.param(prefix + ".Wv", ps.at(prefix + ".Wv")));
  std::vector<Var> head_outs;
  double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = t.slice_cols(q, h * dh, dh);
    Var kh = t.slice_cols(k, h * dh, dh);
    Var vh = t.slice_cols(v, h * dh, dh);
    Var probs = t.softmax_rows(t.scale(t.matmul_nt(qh, kh), inv_scale));
    if (attn_trace) attn_trace->push_back(probs);
    head_outs.push_back(t.matmul(probs, vh));
  }
  Var merged = heads == 1 ? head_outs[0] : t.concat_cols(head_outs);
  return t.matmul(merged, t.param(prefix + ".Wo", ps.at(prefix + ".Wo")));
}

// L pre-norm decoder layers: self-attention among queries, cross-attention
// against the representative points, position-wise FFN, each with a residual.
inline QuerySetVars decode(Tape& t, Var q0, Var representative, const DecoderConfig& cfg,
                           ParamStore& ps, std::vector<Var>* attn_trace = nullptr) {
  cfg.validate();
  if (t.val(q0).cols() != cfg.channels || t.val(representative).cols() != cfg.channels)
    throw std::invalid_argument("decode: channel width mismatch");

  QuerySetVars out;
  out.initial = q0;
  Var x = q0;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    std::string p = "decoder.layer" + std::to_string(l);
    if (cfg.self_attention) {
      Var a = layernorm(t, x, ps, p + ".norm1");
      x = t.add(x, multihead_attention(t, a, a, ps, p + ".self", cfg.heads, attn_trace));
    }
    Var a = layernorm(t, x, ps, p + ".norm2");
    x = t.add(x, multihead_attention(t, a, representative, ps, p + ".cross", cfg.heads,
                                     attn_trace));
    Var f = layernorm(t, x, ps, p + ".norm3");
    x = t.add(x, mlp_forward(t, f, ps, p + ".ffn", 2));
    out.layers.push_back(x);
  }
  out.final_queries = x;
  return out;
}

// Initial queries: the learned parameter block, or FPS over the point cloud
// gathering rows of F (the non-parametric ablation).
inline Var init_queries(Tape& t, const DecoderConfig& cfg, ParamStore& ps, Var f,
                        const Array& point_coords) {
  cfg.validate();
  if (cfg.query_mode == QueryMode::learned)
    return t.param("decoder.query", ps.at("decoder.query"));
  std::size_t n = point_coords.rows();
  if (cfg.queries > n)
    throw std::invalid_argument("init_queries: K=" + std::to_string(cfg.queries) +
                                " exceeds N=" + std::to_string(n));
  return t.gather_rows(f, fps_indices(point_coords, cfg.queries));
}

}  // namespace qis
