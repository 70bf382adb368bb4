#include <set>
#include <sstream>

#include "doctest.h"
#include "qis/scene.hpp"

using namespace qis;

TEST_CASE("voxelize groups points by floored cell key") {
  Scene s;
  s.num_classes = 1;
  s.points.push_back({0.05, 0.05, 0.05, 0, 0, 0, -1, -1});
  s.points.push_back({0.07, 0.02, 0.01, 0, 0, 0, -1, -1});
  VoxelGrid g = voxelize(s, 0.1);
  CHECK(g.voxel_count() == 1);
  CHECK(g.keys[0] == std::array<long long, 3>{0, 0, 0});
  CHECK(g.members[0].size() == 2);
  CHECK(g.centers(0, 0) == doctest::Approx(0.05));
}

TEST_CASE("voxelize single point gives its cell center") {
  Scene s;
  s.num_classes = 1;
  s.points.push_back({0.34, -0.18, 1.21, 0, 0, 0, -1, -1});
  VoxelGrid g = voxelize(s, 0.1);
  CHECK(g.voxel_count() == 1);
  CHECK(g.centers(0, 0) == doctest::Approx(0.35));
  CHECK(g.centers(0, 1) == doctest::Approx(-0.15));
  CHECK(g.centers(0, 2) == doctest::Approx(1.25));
  CHECK_THROWS_AS(voxelize(s, 0.0), std::invalid_argument);
}

TEST_CASE("voxelize approaches one voxel per point as size shrinks") {
  GenConfig cfg;
  cfg.instances_min = cfg.instances_max = 3;
  cfg.points_per_instance = 200;
  cfg.background_points = 400;
  auto [scene, gt] = generate_scene(cfg, 5);

  // brute-force distinct key count oracle
  auto distinct = [&](double size) {
    std::set<std::array<long long, 3>> keys;
    for (const Point& p : scene.points)
      keys.insert({static_cast<long long>(std::floor(p.x / size)),
                   static_cast<long long>(std::floor(p.y / size)),
                   static_cast<long long>(std::floor(p.z / size))});
    return keys.size();
  };
  for (double size : {0.2, 0.05, 0.001, 1e-6}) {
    VoxelGrid g = voxelize(scene, size);
    CHECK(g.voxel_count() == distinct(size));
  }
  CHECK(voxelize(scene, 1e-6).voxel_count() == scene.size());
}

TEST_CASE("voxelize is a partition of point indices") {
  GenConfig cfg;
  auto [scene, gt] = generate_scene(cfg, 77);
  VoxelGrid g = voxelize(scene, 0.05);
  std::set<std::size_t> seen;
  for (std::size_t m = 0; m < g.voxel_count(); ++m)
    for (std::size_t i : g.members[m]) {
      CHECK(!seen.count(i));
      seen.insert(i);
      CHECK(g.point_to_voxel[i] == m);
    }
  CHECK(seen.size() == scene.size());
}

TEST_CASE("generate_scene determinism and structure") {
  GenConfig cfg;
  auto [a, gta] = generate_scene(cfg, 42);
  auto [b, gtb] = generate_scene(cfg, 42);
  std::ostringstream sa, sb;
  write_scene(a, sa);
  write_scene(b, sb);
  CHECK(sa.str() == sb.str());

  auto [c, gtc] = generate_scene(cfg, 43);
  std::ostringstream sc;
  write_scene(c, sc);
  CHECK(sa.str() != sc.str());
}

TEST_CASE("generate_scene with zero instances") {
  GenConfig cfg;
  cfg.instances_min = cfg.instances_max = 0;
  auto [scene, gt] = generate_scene(cfg, 1);
  CHECK(gt.count() == 0);
  for (const Point& p : scene.points) {
    CHECK(p.instance_id == -1);
    CHECK(p.class_id == -1);
  }
}

TEST_CASE("generate_scene rejects infeasible specs") {
  GenConfig cfg;
  cfg.instances_min = cfg.instances_max = 0;
  cfg.background_points = 0;
  CHECK_THROWS_AS(generate_scene(cfg, 1), std::invalid_argument);
  GenConfig bad;
  bad.points_per_instance = 0;
  CHECK_THROWS_AS(generate_scene(bad, 1), std::invalid_argument);
}

TEST_CASE("5-instance spec yields 5 disjoint nonempty masks over 100 seeds") {
  GenConfig cfg;
  cfg.instances_min = cfg.instances_max = 5;
  cfg.points_per_instance = 40;
  cfg.background_points = 64;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto [scene, gt] = generate_scene(cfg, seed);
    REQUIRE(gt.count() == 5);
    std::vector<int> coverage(scene.size(), 0);
    for (const auto& inst : gt.instances) {
      CHECK(inst.mask_size() == 40);
      CHECK(inst.class_id >= 0);
      CHECK(inst.class_id < cfg.num_classes);
      for (std::size_t i = 0; i < scene.size(); ++i) coverage[i] += inst.mask[i];
    }
    for (int c : coverage) CHECK(c <= 1);
  }
}

TEST_CASE("scene invariants hold over many seeds") {
  GenConfig cfg;
  for (std::uint64_t seed = 0; seed < 1000; seed += 7) {
    auto [scene, gt] = generate_scene(cfg, seed);
    REQUIRE(scene.size() >= 1);
    std::map<int, int> instance_class;
    for (const Point& p : scene.points) {
      CHECK(p.x >= 0.0);
      CHECK(p.x <= cfg.extent);
      CHECK(p.y >= 0.0);
      CHECK(p.y <= cfg.extent);
      CHECK(p.z >= 0.0);
      CHECK(p.z <= cfg.extent);
      CHECK(p.r >= 0.0);
      CHECK(p.r <= 1.0);
      if (p.instance_id >= 0) {
        auto [it, fresh] = instance_class.emplace(p.instance_id, p.class_id);
        CHECK(it->second == p.class_id);
      } else {
        CHECK(p.class_id == -1);
      }
    }
    CHECK(gt.count() >= static_cast<std::size_t>(cfg.instances_min));
    CHECK(gt.count() <= static_cast<std::size_t>(cfg.instances_max));
  }
}

TEST_CASE("scene file round trip is exact") {
  GenConfig cfg;
  auto [scene, gt] = generate_scene(cfg, 9);
  std::ostringstream os;
  write_scene(scene, os);
  std::istringstream is(os.str());
  auto [back, gt2] = read_scene(is);
  REQUIRE(back.size() == scene.size());
  CHECK(back.num_classes == scene.num_classes);
  for (std::size_t i = 0; i < scene.size(); ++i) {
    CHECK(back.points[i].x == scene.points[i].x);
    CHECK(back.points[i].y == scene.points[i].y);
    CHECK(back.points[i].z == scene.points[i].z);
    CHECK(back.points[i].r == scene.points[i].r);
    CHECK(back.points[i].g == scene.points[i].g);
    CHECK(back.points[i].b == scene.points[i].b);
    CHECK(back.points[i].instance_id == scene.points[i].instance_id);
    CHECK(back.points[i].class_id == scene.points[i].class_id);
  }
  CHECK(gt2.count() == gt.count());

  std::ostringstream os2;
  write_scene(back, os2);
  CHECK(os.str() == os2.str());
}

TEST_CASE("scene parse errors name the offending line") {
  {
    std::istringstream is("QIS1 N=1 G=2\n0 0 0 0 0 0 0\n");  // 7 fields
    CHECK_THROWS_WITH_AS(read_scene(is), doctest::Contains("line 2"),
                         std::runtime_error);
  }
  {
    std::istringstream is("QIS1 N=0 G=2\n");
    CHECK_THROWS_WITH_AS(read_scene(is), doctest::Contains("N must be >= 1"),
                         std::runtime_error);
  }
  {
    std::istringstream is("NOPE N=1 G=2\n0 0 0 0 0 0 -1 -1\n");
    CHECK_THROWS_AS(read_scene(is), std::runtime_error);
  }
  {
    std::istringstream is("QIS1 N=2 G=2\n0 0 0 0 0 0 -1 -1\n");  // truncated
    CHECK_THROWS_AS(read_scene(is), std::runtime_error);
  }
}
