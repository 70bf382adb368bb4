#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "qis/backbone.hpp"
#include "qis/decoder.hpp"
#include "qis/eval.hpp"
#include "qis/heads.hpp"
#include "qis/matcher.hpp"
#include "qis/sampler.hpp"
#include "qis/scene.hpp"

namespace qis {

struct PipelineConfig {
  double voxel_size = 0.05;
  BackboneConfig backbone;
  SamplerConfig sampler;
  DecoderConfig decoder;
  double tau = 0.5;
  CostWeights loss_weights;
  double no_object_weight = 0.1;

  void validate() const {
    if (voxel_size <= 0.0) throw std::invalid_argument("voxel_size must be > 0");
    backbone.validate();
    sampler.validate();
    decoder.validate();
    if (decoder.channels != backbone.channels)
      throw std::invalid_argument("decoder and backbone channel widths must agree");
    loss_weights.validate();
  }
};

struct TrainConfig {
  std::size_t iterations = 2000;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  double decay_power = 0.9;
  double weight_decay = 0.05;
  std::uint64_t seed = 1;
  std::size_t checkpoint_interval = 0;  // 0 = only final
  double clip_norm = 1.0;
  PipelineConfig pipeline;

  void validate() const {
    if (iterations < 1) throw std::invalid_argument("iterations must be >= 1");
    if (lr <= 0.0) throw std::invalid_argument("lr must be > 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    pipeline.validate();
  }
};

inline ParamStore init_pipeline_params(const PipelineConfig& cfg, std::size_t num_classes,
                                       std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed ^ 0x8c52fb7e03c2dd1dULL);
  ParamStore ps;
  init_backbone(ps, cfg.backbone, rng);
  init_sampler(ps, cfg.sampler, cfg.backbone.channels, rng);
  init_decoder(ps, cfg.decoder, rng);
  init_heads(ps, cfg.backbone.channels, num_classes, rng);
  return ps;
}

struct ForwardOutput {
  EmbeddingVars embeddings;
  RepresentativeVars representative;
  QuerySetVars queries;
  PredictionVars pred;
};

inline Array point_coordinates(const Scene& scene) {
  Array x({scene.size(), 3});
  for (std::size_t i = 0; i < scene.size(); ++i) {
    x(i, 0) = scene.points[i].x;
    x(i, 1) = scene.points[i].y;
    x(i, 2) = scene.points[i].z;
  }
  return x;
}

inline ForwardOutput forward_scene(Tape& t, const Scene& scene, const VoxelGrid& grid,
                                   const PipelineConfig& cfg, ParamStore& ps,
                                   std::uint64_t sample_seed) {
  ForwardOutput out;
  out.embeddings = backbone_extract(t, scene, grid, cfg.backbone, ps);
  out.representative = representative_points(t, out.embeddings.O, grid.centers, ps,
                                             cfg.sampler, sample_seed);
  Var q0 = init_queries(t, cfg.decoder, ps, out.embeddings.F, point_coordinates(scene));
  out.queries = decode(t, q0, out.representative.S, cfg.decoder, ps);
  out.pred = predict(t, out.queries.final_queries, out.embeddings.F, ps);
  return out;
}

// Match then score one scene's predictions on the tape.
inline LossVars scene_loss(Tape& t, const ForwardOutput& fwd, const GroundTruth& gt,
                           const PipelineConfig& cfg) {
  Assignment assign;
  if (gt.count() > 0) {
    PredictionSet values{t.val(fwd.pred.class_probs), t.val(fwd.pred.soft_masks)};
    assign = hungarian(cost_matrix(values, gt, cfg.loss_weights).combined);
  }
  return set_prediction_loss(t, fwd.pred, gt, assign, cfg.loss_weights,
                             cfg.no_object_weight);
}

// ---- optimizer ----

struct AdamState {
  std::map<std::string, Array> m, v;
  std::size_t step = 0;
};

// Decoupled weight decay AdamW with bias correction.
inline void adamw_step(ParamStore& params, const std::map<std::string, Array>& grads,
                       AdamState& state, double lr, double beta1 = 0.9,
                       double beta2 = 0.999, double eps = 1e-8,
                       double weight_decay = 0.05) {
  ++state.step;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& [name, g] : grads) {
    for (double gv : g.data)
      if (!std::isfinite(gv))
        throw std::runtime_error("adamw: non-finite gradient for '" + name + "'");
    Array& p = params.at(name);
    if (!state.m.count(name)) {
      state.m[name] = Array(p.shape);
      state.v[name] = Array(p.shape);
    }
    Array& m = state.m[name];
    Array& v = state.v[name];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p[i]);
    }
  }
}

// Polynomial decay: base * (1 - iter/total)^power.
inline double lr_at(std::size_t iteration, std::size_t total, double base, double power) {
  if (iteration > total) throw std::invalid_argument("lr_at: iteration beyond total");
  double frac = 1.0 - static_cast<double>(iteration) / static_cast<double>(total);
  return base * std::pow(frac, power);
}

// ---- checkpoint ----
// magic `QISCKPT1`, then records: u32 name_len | name | u32 rank | u64 dims[]
// | float64 payload, little-endian. Scalars are rank-0 records.

struct Checkpoint {
  ParamStore params;
  AdamState opt;
  std::size_t iteration = 0;
  std::size_t num_classes = 0;
  PipelineConfig pipeline;
};

namespace detail {

inline void put_record(std::ostream& os, const std::string& name, const Array& a) {
  std::uint32_t nl = static_cast<std::uint32_t>(name.size());
  os.write(reinterpret_cast<const char*>(&nl), 4);
  os.write(name.data(), nl);
  std::uint32_t rank = static_cast<std::uint32_t>(a.shape.size());
  os.write(reinterpret_cast<const char*>(&rank), 4);
  for (std::size_t d : a.shape) {
    std::uint64_t dd = d;
    os.write(reinterpret_cast<const char*>(&dd), 8);
  }
  os.write(reinterpret_cast<const char*>(a.data.data()),
           static_cast<std::streamsize>(a.data.size() * 8));
}

inline void put_scalar(std::ostream& os, const std::string& name, double v) {
  put_record(os, name, Array({}, {v}));
}

inline bool get_record(std::istream& is, std::string& name, Array& a) {
  std::uint32_t nl;
  if (!is.read(reinterpret_cast<char*>(&nl), 4)) return false;
  name.resize(nl);
  if (!is.read(name.data(), nl)) throw std::runtime_error("checkpoint: truncated name");
  std::uint32_t rank;
  if (!is.read(reinterpret_cast<char*>(&rank), 4))
    throw std::runtime_error("checkpoint: truncated rank");
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) {
    std::uint64_t dd;
    if (!is.read(reinterpret_cast<char*>(&dd), 8))
      throw std::runtime_error("checkpoint: truncated dims");
    d = static_cast<std::size_t>(dd);
  }
  a = Array(shape);
  if (!is.read(reinterpret_cast<char*>(a.data.data()),
               static_cast<std::streamsize>(a.data.size() * 8)))
    throw std::runtime_error("checkpoint: truncated payload for '" + name + "'");
  return true;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write("QISCKPT1", 8);
  const PipelineConfig& c = ck.pipeline;
  detail::put_scalar(f, "meta.iteration", static_cast<double>(ck.iteration));
  detail::put_scalar(f, "meta.num_classes", static_cast<double>(ck.num_classes));
  detail::put_scalar(f, "config.voxel_size", c.voxel_size);
  detail::put_scalar(f, "config.backbone.C", static_cast<double>(c.backbone.channels));
  detail::put_scalar(f, "config.backbone.coarse_factor",
                     static_cast<double>(c.backbone.coarse_factor));
  detail::put_scalar(f, "config.backbone.o_stage", static_cast<double>(c.backbone.o_stage));
  detail::put_scalar(f, "config.sampler.J",
                     static_cast<double>(c.sampler.representative_count));
  detail::put_scalar(f, "config.sampler.variant",
                     static_cast<double>(static_cast<int>(c.sampler.variant)));
  detail::put_scalar(f, "config.sampler.normalize",
                     c.sampler.normalize_activations ? 1.0 : 0.0);
  detail::put_scalar(f, "config.sampler.positional", c.sampler.positional ? 1.0 : 0.0);
  detail::put_scalar(f, "config.decoder.L", static_cast<double>(c.decoder.layers));
  detail::put_scalar(f, "config.decoder.H", static_cast<double>(c.decoder.heads));
  detail::put_scalar(f, "config.decoder.K", static_cast<double>(c.decoder.queries));
  detail::put_scalar(f, "config.decoder.query_mode",
                     static_cast<double>(static_cast<int>(c.decoder.query_mode)));
  detail::put_scalar(f, "config.decoder.self_attention",
                     c.decoder.self_attention ? 1.0 : 0.0);
  detail::put_scalar(f, "config.tau", c.tau);
  detail::put_scalar(f, "config.loss.lambda_ce", c.loss_weights.ce);
  detail::put_scalar(f, "config.loss.lambda_bce", c.loss_weights.bce);
  detail::put_scalar(f, "config.loss.lambda_dice", c.loss_weights.dice);
  detail::put_scalar(f, "config.loss.no_object_weight", c.no_object_weight);
  detail::put_scalar(f, "adam.step", static_cast<double>(ck.opt.step));
  for (auto& [name, a] : ck.params.all()) detail::put_record(f, "param." + name, a);
  for (auto& [name, a] : ck.opt.m) detail::put_record(f, "adam.m." + name, a);
  for (auto& [name, a] : ck.opt.v) detail::put_record(f, "adam.v." + name, a);
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  if (!f.read(magic, 8) || std::string(magic, 8) != "QISCKPT1")
    throw std::runtime_error("bad checkpoint magic in " + path);
  Checkpoint ck;
  std::map<std::string, double> scalars;
  std::string name;
  Array a;
  while (detail::get_record(f, name, a)) {
    if (a.shape.empty()) {
      scalars[name] = a.data[0];
    } else if (name.rfind("param.", 0) == 0) {
      ck.params.set(name.substr(6), std::move(a));
    } else if (name.rfind("adam.m.", 0) == 0) {
      ck.opt.m[name.substr(7)] = std::move(a);
    } else if (name.rfind("adam.v.", 0) == 0) {
      ck.opt.v[name.substr(7)] = std::move(a);
    } else {
      throw std::runtime_error("checkpoint: unknown record '" + name + "'");
    }
  }
  auto need = [&](const std::string& k) {
    auto it = scalars.find(k);
    if (it == scalars.end())
      throw std::runtime_error("checkpoint missing scalar '" + k + "'");
    return it->second;
  };
  ck.iteration = static_cast<std::size_t>(need("meta.iteration"));
  ck.num_classes = static_cast<std::size_t>(need("meta.num_classes"));
  PipelineConfig& c = ck.pipeline;
  c.voxel_size = need("config.voxel_size");
  c.backbone.channels = static_cast<std::size_t>(need("config.backbone.C"));
  c.backbone.coarse_factor =
      static_cast<std::size_t>(need("config.backbone.coarse_factor"));
  c.backbone.o_stage = static_cast<int>(need("config.backbone.o_stage"));
  c.sampler.representative_count = static_cast<std::size_t>(need("config.sampler.J"));
  c.sampler.variant = static_cast<SamplerVariant>(static_cast<int>(need("config.sampler.variant")));
  c.sampler.normalize_activations = need("config.sampler.normalize") != 0.0;
  c.sampler.positional = need("config.sampler.positional") != 0.0;
  c.decoder.layers = static_cast<std::size_t>(need("config.decoder.L"));
  c.decoder.heads = static_cast<std::size_t>(need("config.decoder.H"));
  c.decoder.queries = static_cast<std::size_t>(need("config.decoder.K"));
  c.decoder.channels = c.backbone.channels;
  c.decoder.query_mode = static_cast<QueryMode>(static_cast<int>(need("config.decoder.query_mode")));
  c.decoder.self_attention = need("config.decoder.self_attention") != 0.0;
  c.tau = need("config.tau");
  c.loss_weights.ce = need("config.loss.lambda_ce");
  c.loss_weights.bce = need("config.loss.lambda_bce");
  c.loss_weights.dice = need("config.loss.lambda_dice");
  c.no_object_weight = need("config.loss.no_object_weight");
  ck.opt.step = static_cast<std::size_t>(need("adam.step"));
  return ck;
}

// ---- training ----

struct LabeledScene {
  Scene scene;
  GroundTruth gt;
  std::string name;
};

inline Checkpoint train(const std::vector<LabeledScene>& data, const TrainConfig& cfg,
                        std::ostream* log = nullptr,
                        std::vector<LossBreakdown>* trace = nullptr,
                        const std::string& checkpoint_path = "") {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: no scenes");
  std::size_t num_classes = 0;
  for (const auto& d : data)
    num_classes = std::max(num_classes, static_cast<std::size_t>(d.scene.num_classes));
  for (const auto& d : data) {
    if (d.gt.count() > cfg.pipeline.decoder.queries)
      throw std::runtime_error("train: scene '" + d.name + "' has K'=" +
                               std::to_string(d.gt.count()) + " instances but only K=" +
                               std::to_string(cfg.pipeline.decoder.queries) +
                               " queries are configured");
  }

  std::vector<VoxelGrid> grids;
  for (const auto& d : data) grids.push_back(voxelize(d.scene, cfg.pipeline.voxel_size));

  ParamStore params = init_pipeline_params(cfg.pipeline, num_classes, cfg.seed);
  AdamState opt;
  Rng batch_rng(cfg.seed ^ 0x51e2c7a93fd3ab5cULL);

  for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
    double lr = lr_at(iter, cfg.iterations, cfg.lr, cfg.decay_power);

    Tape tape;
    std::vector<Var> totals;
    LossBreakdown sum{};
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      std::size_t s = static_cast<std::size_t>(batch_rng.below(data.size()));
      ForwardOutput fwd = forward_scene(tape, data[s].scene, grids[s], cfg.pipeline,
                                        params, cfg.seed + iter * 131 + b);
      LossVars lv = scene_loss(tape, fwd, data[s].gt, cfg.pipeline);
      LossBreakdown bd = breakdown(tape, lv);
      sum.ce += bd.ce;
      sum.bce += bd.bce;
      sum.dice += bd.dice;
      sum.total += bd.total;
      totals.push_back(lv.total);
    }
    Var batch_loss = totals[0];
    for (std::size_t i = 1; i < totals.size(); ++i)
      batch_loss = tape.add(batch_loss, totals[i]);
    batch_loss = tape.scale(batch_loss, 1.0 / static_cast<double>(cfg.batch_size));
    tape.backward(batch_loss);

    // gather + clip by global norm
    std::map<std::string, Array> grads;
    double norm2 = 0.0;
    for (auto& [name, id] : tape.params()) {
      Array g = tape.grad(Var{id});
      for (double gv : g.data) norm2 += gv * gv;
      grads[name] = std::move(g);
    }
    double norm = std::sqrt(norm2);
    if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) {
      double scale = cfg.clip_norm / norm;
      for (auto& [name, g] : grads)
        for (double& gv : g.data) gv *= scale;
    }
    adamw_step(params, grads, opt, lr, 0.9, 0.999, 1e-8, cfg.weight_decay);

    double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
    LossBreakdown avg{sum.ce * inv_b, sum.bce * inv_b, sum.dice * inv_b,
                      sum.total * inv_b};
    if (trace) trace->push_back(avg);
    if (log)
      (*log) << "iter=" << iter << " lr=" << lr << " ce=" << avg.ce << " bce=" << avg.bce
             << " dice=" << avg.dice << " total=" << avg.total << "\n";

    if (cfg.checkpoint_interval > 0 && !checkpoint_path.empty() &&
        (iter + 1) % cfg.checkpoint_interval == 0) {
      save_checkpoint({params, opt, iter + 1, num_classes, cfg.pipeline},
                      checkpoint_path);
    }
  }

  return {std::move(params), std::move(opt), cfg.iterations, num_classes, cfg.pipeline};
}

inline std::vector<InstanceResult> infer(const Scene& scene, Checkpoint& ck,
                                         std::uint64_t sample_seed = 0) {
  if (static_cast<std::size_t>(scene.num_classes) != ck.num_classes)
    throw std::runtime_error("infer: scene has G=" + std::to_string(scene.num_classes) +
                             " classes but checkpoint was trained with G=" +
                             std::to_string(ck.num_classes));
  VoxelGrid grid = voxelize(scene, ck.pipeline.voxel_size);
  Tape t;
  ForwardOutput fwd = forward_scene(t, scene, grid, ck.pipeline, ck.params, sample_seed);
  PredictionSet values{t.val(fwd.pred.class_probs), t.val(fwd.pred.soft_masks)};
  return assemble(values, ck.pipeline.tau);
}

}  // namespace qis
