#pragma once

#include <map>
#include <stdexcept>
#include <vector>

#include "qis/nn.hpp"
#include "qis/scene.hpp"
#include "qis/tape.hpp"

namespace qis {

struct BackboneConfig {
  std::size_t channels = 32;   // C: 16 for the small variant, 32 for the large
  std::size_t coarse_factor = 4;
  int o_stage = 1;  // 0: O = skip-fused voxel features, 1: O after the fine MLP

  void validate() const {
    if (channels == 0) throw std::invalid_argument("backbone: channels must be > 0");
    if (coarse_factor < 2)
      throw std::invalid_argument("backbone: coarse_factor must be >= 2");
    if (o_stage != 0 && o_stage != 1)
      throw std::invalid_argument("backbone: o_stage must be 0 or 1");
  }
};

struct EmbeddingSet {
  Array F;              // N x C per-point embeddings
  Array O;              // M x C voxel embeddings
  Array voxel_centers;  // M x 3
};

struct EmbeddingVars {
  Var F;
  Var O;
};

inline void init_backbone(ParamStore& ps, const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  std::size_t c = cfg.channels;
  init_mlp(ps, "backbone.point", {6, c, c}, rng);
  init_mlp(ps, "backbone.coarse", {c, c, c}, rng);
  init_mlp(ps, "backbone.fine", {c, c, c}, rng);
  init_mlp(ps, "backbone.out", {2 * c, c, c}, rng);
}

namespace detail {

inline long long floor_div(long long a, long long b) {
  long long q = a / b, r = a % b;
  return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}

// Group fine voxels into coarse cells of coarse_factor^3 fine voxels.
inline std::pair<std::vector<std::size_t>, std::size_t> coarse_segments(
    const VoxelGrid& grid, std::size_t factor) {
  std::map<std::array<long long, 3>, std::size_t> coarse_ids;
  std::vector<std::size_t> seg(grid.voxel_count());
  for (std::size_t m = 0; m < grid.voxel_count(); ++m) {
    std::array<long long, 3> ck;
    for (int a = 0; a < 3; ++a)
      ck[a] = floor_div(grid.keys[m][a], static_cast<long long>(factor));
    auto [it, inserted] = coarse_ids.emplace(ck, coarse_ids.size());
    seg[m] = it->second;
  }
  // emplace order is discovery order; remap to sorted-key order for determinism
  std::vector<std::size_t> remap(coarse_ids.size());
  std::size_t next = 0;
  for (auto& [key, id] : coarse_ids) remap[id] = next++;
  for (auto& s : seg) s = remap[s];
  return {seg, coarse_ids.size()};
}

}  // namespace detail

inline Array point_attributes(const Scene& scene) {
  Array x({scene.size(), 6});
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const Point& p = scene.points[i];
    x(i, 0) = p.x;
    x(i, 1) = p.y;
    x(i, 2) = p.z;
    x(i, 3) = p.r;
    x(i, 4) = p.g;
    x(i, 5) = p.b;
  }
  return x;
}

// Per-point MLP -> mean-pool to fine voxels -> mean-pool to coarse cells ->
// coarse MLP -> unpool + skip -> fine MLP (emits O) -> broadcast to points,
// concat with point features -> final MLP emits F.
inline EmbeddingVars backbone_extract(Tape& t, const Scene& scene, const VoxelGrid& grid,
                                      const BackboneConfig& cfg, ParamStore& ps) {
  cfg.validate();
  if (grid.point_to_voxel.size() != scene.size())
    throw std::invalid_argument("backbone: grid was not built from this scene");

  Var x = t.constant(point_attributes(scene));
  Var h = mlp_forward(t, x, ps, "backbone.point", 2);

  std::size_t m = grid.voxel_count();
  Var v = t.segment_mean(h, grid.point_to_voxel, m);

  auto [seg, mc] = detail::coarse_segments(grid, cfg.coarse_factor);
  Var u = t.segment_mean(v, seg, mc);
  Var u2 = mlp_forward(t, u, ps, "backbone.coarse", 2);
  Var fused = t.add(v, t.gather_rows(u2, seg));

  Var o = cfg.o_stage == 0 ? fused : mlp_forward(t, fused, ps, "backbone.fine", 2);

  Var per_point_voxel = t.gather_rows(o, grid.point_to_voxel);
  Var f = mlp_forward(t, t.concat_cols({h, per_point_voxel}), ps, "backbone.out", 2);
  return {f, o};
}

inline EmbeddingSet backbone_embed(const Scene& scene, const VoxelGrid& grid,
                                   const BackboneConfig& cfg, ParamStore& ps) {
  Tape t;
  EmbeddingVars vars = backbone_extract(t, scene, grid, cfg, ps);
  return {t.val(vars.F), t.val(vars.O), grid.centers};
}

}  // namespace qis
