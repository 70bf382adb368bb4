#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "qis/nn.hpp"
#include "qis/tape.hpp"

namespace qis {

enum class SamplerVariant { rpg, random_sel, fps, none };

inline const char* to_string(SamplerVariant v) {
  switch (v) {
    case SamplerVariant::rpg: return "rpg";
    case SamplerVariant::random_sel: return "random";
    case SamplerVariant::fps: return "fps";
    case SamplerVariant::none: return "none";
  }
  return "?";
}

inline SamplerVariant sampler_variant_from(const std::string& s) {
  if (s == "rpg") return SamplerVariant::rpg;
  if (s == "random") return SamplerVariant::random_sel;
  if (s == "fps") return SamplerVariant::fps;
  if (s == "none") return SamplerVariant::none;
  throw std::invalid_argument("unknown sampler variant '" + s + "'");
}

struct SamplerConfig {
  std::size_t representative_count = 256;  // J
  SamplerVariant variant = SamplerVariant::rpg;
  bool normalize_activations = false;  // z_j / ||z_j||_1 before the weighted sum
  bool positional = true;              // add projected voxel centers to O first

  void validate() const {
    if (representative_count < 1) throw std::invalid_argument("sampler: J must be >= 1");
  }
};

struct RepresentativeVars {
  Var S;                  // J x C
  Var activations;        // M x J (transposed Z), valid only for the rpg variant
  SamplerVariant source = SamplerVariant::none;
};

inline void init_sampler(ParamStore& ps, const SamplerConfig& cfg, std::size_t channels,
                         Rng& rng) {
  cfg.validate();
  if (cfg.positional) ps.set("sampler.pos.W", xavier_uniform(3, channels, rng));
  if (cfg.variant == SamplerVariant::rpg)
    init_mlp(ps, "sampler.e", {channels, channels, cfg.representative_count}, rng);
}

// O plus a learned linear projection of the voxel centers.
inline Var sampler_positional(Tape& t, Var o, const Array& centers, ParamStore& ps,
                              const SamplerConfig& cfg) {
  if (!cfg.positional) return o;
  Var w = t.param("sampler.pos.W", ps.at("sampler.pos.W"));
  return t.add(o, t.matmul(t.constant(centers), w));
}

// S from a given activation matrix (M x J, column j = z_j over voxels).
inline Var representative_from_activations(Tape& t, Var activations_t, Var o,
                                           bool normalize) {
  Var s = t.matmul_tn(activations_t, o);  // J x C
  if (normalize) {
    std::size_t m = t.val(o).rows();
    Var ones = t.constant(Array::full(m, 1, 1.0));
    Var mass = t.matmul_tn(activations_t, ones);  // J x 1 column sums
    s = t.div_rowscalar(s, mass);
  }
  return s;
}

// Activation maps Z = sigmoid(E(O))^T followed by s_j = z_j . O.
inline RepresentativeVars sampler_rpg(Tape& t, Var o, ParamStore& ps,
                                      const SamplerConfig& cfg) {
  if (t.val(o).rows() < 1) throw std::invalid_argument("rpg: need at least one voxel");
  Var act = t.sigmoid(mlp_forward(t, o, ps, "sampler.e", 2));  // M x J
  Var s = representative_from_activations(t, act, o, cfg.normalize_activations);
  return {s, act, SamplerVariant::rpg};
}

// Greedy farthest point sampling over row vectors; seed pick is index 0,
// ties broken by lowest index.
inline std::vector<std::size_t> fps_indices(const Array& coords, std::size_t j) {
  std::size_t m = coords.rows();
  if (j > m) throw std::invalid_argument("fps: J=" + std::to_string(j) + " exceeds M=" +
                                         std::to_string(m));
  std::size_t dim = coords.cols();
  std::vector<std::size_t> picked;
  picked.reserve(j);
  std::vector<double> best(m, std::numeric_limits<double>::infinity());
  std::size_t cur = 0;
  for (std::size_t step = 0; step < j; ++step) {
    picked.push_back(cur);
    for (std::size_t i = 0; i < m; ++i) {
      double d2 = 0.0;
      for (std::size_t a = 0; a < dim; ++a) {
        double d = coords(i, a) - coords(cur, a);
        d2 += d * d;
      }
      if (d2 < best[i]) best[i] = d2;
    }
    std::size_t next = 0;
    double far = -1.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (best[i] > far) {
        far = best[i];
        next = i;
      }
    }
    cur = next;
  }
  return picked;
}

inline RepresentativeVars sampler_fps(Tape& t, const Array& centers, Var o,
                                      std::size_t j) {
  auto idx = fps_indices(centers, j);
  return {t.gather_rows(o, idx), Var{}, SamplerVariant::fps};
}

inline std::vector<std::size_t> random_indices(std::size_t m, std::size_t j,
                                               std::uint64_t seed) {
  if (j > m) throw std::invalid_argument("random_sample: J exceeds M");
  Rng rng(seed ^ 0xa02bdbf7bb3c0a7ULL);
  return rng.sample_without_replacement(m, j);
}

inline RepresentativeVars sampler_random(Tape& t, Var o, std::size_t j,
                                         std::uint64_t seed) {
  return {t.gather_rows(o, random_indices(t.val(o).rows(), j, seed)), Var{},
          SamplerVariant::random_sel};
}

// Dispatch on the configured variant; `none` passes all M voxels through.
inline RepresentativeVars representative_points(Tape& t, Var o, const Array& centers,
                                                ParamStore& ps, const SamplerConfig& cfg,
                                                std::uint64_t seed) {
  cfg.validate();
  Var o_in = sampler_positional(t, o, centers, ps, cfg);
  switch (cfg.variant) {
    case SamplerVariant::rpg: return sampler_rpg(t, o_in, ps, cfg);
    case SamplerVariant::fps:
      return sampler_fps(t, centers, o_in, cfg.representative_count);
    case SamplerVariant::random_sel:
      return sampler_random(t, o_in, cfg.representative_count, seed);
    case SamplerVariant::none: return {o_in, Var{}, SamplerVariant::none};
  }
  throw std::logic_error("unreachable");
}

}  // namespace qis
