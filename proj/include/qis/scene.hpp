#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qis/array.hpp"
#include "qis/rng.hpp"

namespace qis {

struct Point {
  double x = 0, y = 0, z = 0;
  double r = 0, g = 0, b = 0;
  int instance_id = -1;  // -1 = background
  int class_id = -1;     // -1 = background
};

struct Scene {
  std::vector<Point> points;
  int num_classes = 0;  // G

  std::size_t size() const { return points.size(); }
};

struct GtInstance {
  int class_id = -1;
  std::vector<std::uint8_t> mask;  // length N, 0/1

  std::size_t mask_size() const {
    std::size_t n = 0;
    for (auto v : mask) n += v;
    return n;
  }
};

struct GroundTruth {
  std::vector<GtInstance> instances;

  std::size_t count() const { return instances.size(); }  // K'
};

inline GroundTruth build_ground_truth(const Scene& scene) {
  std::map<int, GtInstance> by_id;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const Point& p = scene.points[i];
    if (p.instance_id < 0) continue;
    auto& inst = by_id[p.instance_id];
    if (inst.mask.empty()) {
      inst.mask.assign(scene.size(), 0);
      inst.class_id = p.class_id;
    } else if (inst.class_id != p.class_id) {
      throw std::invalid_argument("instance " + std::to_string(p.instance_id) +
                                  " spans multiple classes");
    }
    inst.mask[i] = 1;
  }
  GroundTruth gt;
  for (auto& [id, inst] : by_id) gt.instances.push_back(std::move(inst));
  return gt;
}

// ---- voxelization ----

struct VoxelGrid {
  double voxel_size = 0.0;
  std::vector<std::array<long long, 3>> keys;       // sorted, one per occupied voxel
  std::vector<std::vector<std::size_t>> members;    // point indices per voxel
  std::vector<std::size_t> point_to_voxel;          // length N
  Array centers;                                    // M x 3

  std::size_t voxel_count() const { return keys.size(); }  // M
};

inline VoxelGrid voxelize(const Scene& scene, double voxel_size) {
  if (voxel_size <= 0.0) throw std::invalid_argument("voxelize: voxel_size must be > 0");
  std::map<std::array<long long, 3>, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const Point& p = scene.points[i];
    std::array<long long, 3> key = {
        static_cast<long long>(std::floor(p.x / voxel_size)),
        static_cast<long long>(std::floor(p.y / voxel_size)),
        static_cast<long long>(std::floor(p.z / voxel_size))};
    cells[key].push_back(i);
  }
  VoxelGrid grid;
  grid.voxel_size = voxel_size;
  grid.point_to_voxel.assign(scene.size(), 0);
  grid.centers = Array({cells.size(), 3});
  std::size_t m = 0;
  for (auto& [key, idxs] : cells) {
    grid.keys.push_back(key);
    for (std::size_t i : idxs) grid.point_to_voxel[i] = m;
    for (int a = 0; a < 3; ++a)
      grid.centers(m, a) = (static_cast<double>(key[a]) + 0.5) * voxel_size;
    grid.members.push_back(std::move(idxs));
    ++m;
  }
  return grid;
}

// ---- synthetic scene generator ----

struct GenConfig {
  int instances_min = 2;
  int instances_max = 4;
  int points_per_instance = 128;
  int background_points = 256;
  double noise_sigma = 0.005;
  int num_classes = 3;  // G; class g uses primitive g % 3 (box/sphere/cylinder)
  double extent = 1.0;  // scene bounding box [0, extent]^3
};

namespace detail {

inline void class_color(int class_id, int num_classes, double& r, double& g, double& b) {
  double h = static_cast<double>(class_id) / static_cast<double>(num_classes);
  r = 0.5 + 0.45 * std::cos(2.0 * M_PI * h);
  g = 0.5 + 0.45 * std::cos(2.0 * M_PI * (h + 1.0 / 3.0));
  b = 0.5 + 0.45 * std::cos(2.0 * M_PI * (h + 2.0 / 3.0));
}

inline double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace detail

inline std::pair<Scene, GroundTruth> generate_scene(const GenConfig& cfg,
                                                    std::uint64_t seed) {
  if (cfg.instances_min < 0 || cfg.instances_max < cfg.instances_min)
    throw std::invalid_argument("generate_scene: bad instance count range");
  if (cfg.num_classes < 1) throw std::invalid_argument("generate_scene: G must be >= 1");
  if (cfg.instances_max > 0 && cfg.points_per_instance < 1)
    throw std::invalid_argument("generate_scene: points_per_instance must be >= 1");
  if (cfg.instances_max == 0 && cfg.background_points < 1)
    throw std::invalid_argument("generate_scene: empty spec generates no points");
  if (cfg.extent <= 0.0) throw std::invalid_argument("generate_scene: extent must be > 0");

  Rng rng(seed * 0x9e3779b97f4a7c15ULL + 1);
  Scene scene;
  scene.num_classes = cfg.num_classes;

  int num_inst = cfg.instances_min +
                 static_cast<int>(rng.below(
                     static_cast<std::uint64_t>(cfg.instances_max - cfg.instances_min) + 1));

  double radius = 0.12 * cfg.extent;
  std::vector<std::array<double, 3>> centers;
  for (int k = 0; k < num_inst; ++k) {
    std::array<double, 3> c{};
    for (int attempt = 0; attempt < 32; ++attempt) {
      c = {rng.uniform(radius, cfg.extent - radius),
           rng.uniform(radius, cfg.extent - radius),
           rng.uniform(0.15 * cfg.extent + radius, cfg.extent - radius)};
      bool ok = true;
      for (auto& o : centers) {
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) d2 += (c[a] - o[a]) * (c[a] - o[a]);
        if (d2 < 4.0 * radius * radius) ok = false;
      }
      if (ok) break;
    }
    centers.push_back(c);

    int class_id = static_cast<int>(rng.below(cfg.num_classes));
    int shape = class_id % 3;
    double cr, cg, cb;
    detail::class_color(class_id, cfg.num_classes, cr, cg, cb);

    for (int i = 0; i < cfg.points_per_instance; ++i) {
      Point p;
      double dx = 0, dy = 0, dz = 0;
      if (shape == 0) {  // box
        dx = rng.uniform(-radius, radius);
        dy = rng.uniform(-radius, radius);
        dz = rng.uniform(-radius, radius);
      } else if (shape == 1) {  // ball
        do {
          dx = rng.uniform(-radius, radius);
          dy = rng.uniform(-radius, radius);
          dz = rng.uniform(-radius, radius);
        } while (dx * dx + dy * dy + dz * dz > radius * radius);
      } else {  // cylinder, axis z
        do {
          dx = rng.uniform(-0.7 * radius, 0.7 * radius);
          dy = rng.uniform(-0.7 * radius, 0.7 * radius);
        } while (dx * dx + dy * dy > 0.49 * radius * radius);
        dz = rng.uniform(-radius, radius);
      }
      p.x = c[0] + dx + rng.normal(0.0, cfg.noise_sigma);
      p.y = c[1] + dy + rng.normal(0.0, cfg.noise_sigma);
      p.z = c[2] + dz + rng.normal(0.0, cfg.noise_sigma);
      p.x = std::min(cfg.extent, std::max(0.0, p.x));
      p.y = std::min(cfg.extent, std::max(0.0, p.y));
      p.z = std::min(cfg.extent, std::max(0.0, p.z));
      p.r = detail::clamp01(cr + rng.normal(0.0, 0.02));
      p.g = detail::clamp01(cg + rng.normal(0.0, 0.02));
      p.b = detail::clamp01(cb + rng.normal(0.0, 0.02));
      p.instance_id = k;
      p.class_id = class_id;
      scene.points.push_back(p);
    }
  }

  for (int i = 0; i < cfg.background_points; ++i) {  // floor plane
    Point p;
    p.x = rng.uniform(0.0, cfg.extent);
    p.y = rng.uniform(0.0, cfg.extent);
    p.z = std::min(cfg.extent, std::max(0.0, 0.02 * cfg.extent * rng.uniform() +
                                                 rng.normal(0.0, cfg.noise_sigma)));
    double gray = detail::clamp01(0.5 + rng.normal(0.0, 0.03));
    p.r = p.g = p.b = gray;
    scene.points.push_back(p);
  }

  if (scene.points.empty())
    throw std::invalid_argument("generate_scene: spec produces zero points");

  // Deterministic shuffle so instance points are not index-contiguous.
  for (std::size_t i = scene.points.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(scene.points[i - 1], scene.points[j]);
  }

  return {scene, build_ground_truth(scene)};
}

// ---- on-disk format ----
// Header `QIS1 N=<int> G=<int>`, then one `x y z r g b instance_id class_id`
// line per point, floats in shortest round-trip decimal form.

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& tok, std::size_t line_no) {
  double v;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size())
    throw std::runtime_error("scene parse error at line " + std::to_string(line_no) +
                             ": bad float '" + tok + "'");
  return v;
}

inline long parse_int(const std::string& tok, std::size_t line_no) {
  long v;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size())
    throw std::runtime_error("scene parse error at line " + std::to_string(line_no) +
                             ": bad integer '" + tok + "'");
  return v;
}

}  // namespace detail

inline void write_scene(const Scene& scene, std::ostream& os) {
  os << "QIS1 N=" << scene.size() << " G=" << scene.num_classes << "\n";
  for (const Point& p : scene.points) {
    os << detail::format_double(p.x) << ' ' << detail::format_double(p.y) << ' '
       << detail::format_double(p.z) << ' ' << detail::format_double(p.r) << ' '
       << detail::format_double(p.g) << ' ' << detail::format_double(p.b) << ' '
       << p.instance_id << ' ' << p.class_id << "\n";
  }
}

inline void write_scene(const Scene& scene, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  write_scene(scene, f);
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::pair<Scene, GroundTruth> read_scene(std::istream& is,
                                                const std::string& what = "<stream>") {
  std::string line;
  if (!std::getline(is, line))
    throw std::runtime_error(what + ": empty scene file");
  std::size_t line_no = 1;
  long n = -1, g = -1;
  {
    std::istringstream hs(line);
    std::string magic, ntok, gtok;
    hs >> magic >> ntok >> gtok;
    if (magic != "QIS1" || ntok.rfind("N=", 0) != 0 || gtok.rfind("G=", 0) != 0)
      throw std::runtime_error(what + ": bad header at line 1: '" + line + "'");
    n = detail::parse_int(ntok.substr(2), 1);
    g = detail::parse_int(gtok.substr(2), 1);
  }
  if (n < 1) throw std::runtime_error(what + ": N must be >= 1");
  if (g < 1) throw std::runtime_error(what + ": G must be >= 1");

  Scene scene;
  scene.num_classes = static_cast<int>(g);
  scene.points.reserve(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    if (!std::getline(is, line))
      throw std::runtime_error(what + ": truncated after line " + std::to_string(line_no));
    ++line_no;
    std::istringstream ls(line);
    std::vector<std::string> toks;
    std::string tok;
    while (ls >> tok) toks.push_back(tok);
    if (toks.size() != 8)
      throw std::runtime_error(what + ": line " + std::to_string(line_no) + " has " +
                               std::to_string(toks.size()) + " fields, expected 8");
    Point p;
    p.x = detail::parse_double(toks[0], line_no);
    p.y = detail::parse_double(toks[1], line_no);
    p.z = detail::parse_double(toks[2], line_no);
    p.r = detail::parse_double(toks[3], line_no);
    p.g = detail::parse_double(toks[4], line_no);
    p.b = detail::parse_double(toks[5], line_no);
    p.instance_id = static_cast<int>(detail::parse_int(toks[6], line_no));
    p.class_id = static_cast<int>(detail::parse_int(toks[7], line_no));
    if (p.instance_id >= 0 && (p.class_id < 0 || p.class_id >= scene.num_classes))
      throw std::runtime_error(what + ": line " + std::to_string(line_no) +
                               ": class_id out of range");
    scene.points.push_back(p);
  }
  return {scene, build_ground_truth(scene)};
}

inline std::pair<Scene, GroundTruth> read_scene(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open scene file: " + path);
  return read_scene(f, path);
}

}  // namespace qis
