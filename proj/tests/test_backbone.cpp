#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "qis/backbone.hpp"
#include "qis/gradcheck.hpp"

using namespace qis;

namespace {

std::pair<Scene, GroundTruth> tiny_scene(std::uint64_t seed, int points = 24) {
  GenConfig cfg;
  cfg.instances_min = cfg.instances_max = 2;
  cfg.points_per_instance = points / 3;
  cfg.background_points = points / 3;
  auto result = generate_scene(cfg, seed);
  return result;
}

}  // namespace

TEST_CASE("all-zero parameters propagate only biases") {
  auto [scene, gt] = tiny_scene(1);
  VoxelGrid grid = voxelize(scene, 0.1);
  BackboneConfig cfg;
  cfg.channels = 8;
  Rng rng(2);
  ParamStore ps;
  init_backbone(ps, cfg, rng);
  for (auto& [name, a] : ps.all())
    std::fill(a.data.begin(), a.data.end(), 0.0);
  ps.at("backbone.out.l1.b") = Array({1, 8}, {1, 2, 3, 4, 5, 6, 7, 8});

  Tape t;
  EmbeddingVars vars = backbone_extract(t, scene, grid, cfg, ps);
  const Array& f = t.val(vars.F);
  REQUIRE(f.rows() == scene.size());
  for (std::size_t i = 0; i < f.rows(); ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(f(i, j) == doctest::Approx(static_cast<double>(j + 1)).epsilon(1e-12));
}

TEST_CASE("identical points in one voxel produce identical F rows") {
  Scene s;
  s.num_classes = 1;
  s.points.push_back({0.21, 0.33, 0.12, 0.5, 0.4, 0.3, -1, -1});
  s.points.push_back({0.21, 0.33, 0.12, 0.5, 0.4, 0.3, -1, -1});
  s.points.push_back({0.61, 0.72, 0.55, 0.1, 0.9, 0.2, -1, -1});
  VoxelGrid grid = voxelize(s, 0.1);
  BackboneConfig cfg;
  cfg.channels = 8;
  Rng rng(5);
  ParamStore ps;
  init_backbone(ps, cfg, rng);
  Tape t;
  EmbeddingVars vars = backbone_extract(t, s, grid, cfg, ps);
  const Array& f = t.val(vars.F);
  for (std::size_t j = 0; j < 8; ++j) CHECK(f(0, j) == f(1, j));
}

TEST_CASE("backbone gradients match finite differences") {
  auto [scene, gt] = tiny_scene(3, 18);
  VoxelGrid grid = voxelize(scene, 0.15);
  BackboneConfig cfg;
  cfg.channels = 4;
  cfg.coarse_factor = 2;
  Rng rng(7);
  ParamStore ps;
  init_backbone(ps, cfg, rng);
  auto rep = grad_check(
      ps,
      [&](Tape& t, ParamStore& p) {
        EmbeddingVars v = backbone_extract(t, scene, grid, cfg, p);
        return t.sum(t.sigmoid(v.F));
      },
      1e-5, 1e-4);
  CAPTURE(rep.worst_param);
  CAPTURE(rep.max_rel_error);
  CHECK(rep.pass);
}

TEST_CASE("o_stage 0 skips the fine MLP") {
  auto [scene, gt] = tiny_scene(4, 12);
  VoxelGrid grid = voxelize(scene, 0.2);
  BackboneConfig a;
  a.channels = 8;
  a.o_stage = 0;
  BackboneConfig b = a;
  b.o_stage = 1;
  Rng rng(9);
  ParamStore ps;
  init_backbone(ps, b, rng);
  Tape t;
  const Array& oa = t.val(backbone_extract(t, scene, grid, a, ps).O);
  Tape t2;
  const Array& ob = t2.val(backbone_extract(t2, scene, grid, b, ps).O);
  CHECK(oa.shape == ob.shape);
  CHECK(oa.data != ob.data);
}

TEST_CASE("permuting points permutes F and leaves O fixed") {
  auto [scene, gt] = tiny_scene(11, 30);
  VoxelGrid grid = voxelize(scene, 0.1);
  BackboneConfig cfg;
  cfg.channels = 8;
  Rng rng(13);
  ParamStore ps;
  init_backbone(ps, cfg, rng);

  Tape t;
  EmbeddingVars base = backbone_extract(t, scene, grid, cfg, ps);

  std::vector<std::size_t> perm(scene.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng shuffle_rng(17);
  for (std::size_t i = perm.size(); i > 1; --i)
    std::swap(perm[i - 1], perm[shuffle_rng.below(i)]);
  Scene permuted;
  permuted.num_classes = scene.num_classes;
  for (std::size_t i : perm) permuted.points.push_back(scene.points[i]);
  VoxelGrid pgrid = voxelize(permuted, 0.1);

  Tape t2;
  EmbeddingVars moved = backbone_extract(t2, permuted, pgrid, cfg, ps);
  const Array& f0 = t.val(base.F);
  const Array& f1 = t2.val(moved.F);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(f1(i, j) == doctest::Approx(f0(perm[i], j)).epsilon(1e-12));
  CHECK(t.val(base.O).data == t2.val(moved.O).data);
  CHECK(t.val(base.O).shape == t2.val(moved.O).shape);
}

TEST_CASE("integer-voxel translation preserves grid sizes") {
  auto [scene, gt] = tiny_scene(21, 30);
  double voxel = 0.1;
  VoxelGrid g0 = voxelize(scene, voxel);
  Scene shifted = scene;
  for (Point& p : shifted.points) {
    p.x += 3 * voxel;
    p.y += 5 * voxel;
    p.z += 2 * voxel;
  }
  VoxelGrid g1 = voxelize(shifted, voxel);
  CHECK(g0.voxel_count() == g1.voxel_count());
}

TEST_CASE("config validation") {
  BackboneConfig bad;
  bad.coarse_factor = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  BackboneConfig bad2;
  bad2.channels = 0;
  CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);
}
