#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "qis/engine.hpp"
#include "qis/scene.hpp"

namespace qis {

// Flat key-value run configuration: `key = value` lines, `#` comments.
// Unknown keys are rejected; every run can dump the fully resolved map.
class RunConfig {
 public:
  RunConfig() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d = {
        {"gen.instances_min", "2"},
        {"gen.instances_max", "4"},
        {"gen.points_per_instance", "128"},
        {"gen.background_points", "256"},
        {"gen.noise_sigma", "0.005"},
        {"gen.classes", "3"},
        {"gen.extent", "1.0"},
        {"scene.voxel_size", "0.05"},
        {"backbone.C", "32"},
        {"backbone.coarse_factor", "4"},
        {"backbone.o_stage", "1"},
        {"sampler.variant", "rpg"},
        {"sampler.J", "256"},
        {"sampler.normalize", "false"},
        {"sampler.positional", "true"},
        {"decoder.L", "3"},
        {"decoder.H", "4"},
        {"decoder.K", "32"},
        {"decoder.query_mode", "learned"},
        {"decoder.self_attention", "true"},
        {"heads.tau", "0.5"},
        {"loss.lambda_ce", "2"},
        {"loss.lambda_bce", "5"},
        {"loss.lambda_dice", "5"},
        {"loss.no_object_weight", "0.1"},
        {"train.iterations", "2000"},
        {"train.batch_size", "4"},
        {"train.lr", "0.001"},
        {"train.decay_power", "0.9"},
        {"train.weight_decay", "0.05"},
        {"train.seed", "1"},
        {"train.checkpoint_interval", "0"},
        {"train.clip_norm", "1.0"},
    };
    return d;
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw std::invalid_argument("unknown config key '" + key + "'");
    values_[key] = value;
  }

  void load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file: " + path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
      ++line_no;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      std::string trimmed;
      for (char c : line)
        if (!std::isspace(static_cast<unsigned char>(c)) || !trimmed.empty()) trimmed += c;
      while (!trimmed.empty() && std::isspace(static_cast<unsigned char>(trimmed.back())))
        trimmed.pop_back();
      if (trimmed.empty()) continue;
      auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                 ": expected 'key = value'");
      auto strip = [](std::string s) {
        std::size_t a = s.find_first_not_of(" \t");
        std::size_t b = s.find_last_not_of(" \t");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      set(strip(trimmed.substr(0, eq)), strip(trimmed.substr(eq + 1)));
    }
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("unknown config key '" + key + "'");
    return it->second;
  }

  double num(const std::string& key) const {
    try {
      std::size_t pos = 0;
      double v = std::stod(str(key), &pos);
      if (pos != str(key).size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw std::invalid_argument("config key '" + key + "': bad number '" + str(key) + "'");
    }
  }

  long integer(const std::string& key) const {
    double v = num(key);
    long i = static_cast<long>(v);
    if (static_cast<double>(i) != v)
      throw std::invalid_argument("config key '" + key + "' must be an integer");
    return i;
  }

  bool boolean(const std::string& key) const {
    const std::string& s = str(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw std::invalid_argument("config key '" + key + "': bad bool '" + s + "'");
  }

  GenConfig gen_config() const {
    GenConfig g;
    g.instances_min = static_cast<int>(integer("gen.instances_min"));
    g.instances_max = static_cast<int>(integer("gen.instances_max"));
    g.points_per_instance = static_cast<int>(integer("gen.points_per_instance"));
    g.background_points = static_cast<int>(integer("gen.background_points"));
    g.noise_sigma = num("gen.noise_sigma");
    g.num_classes = static_cast<int>(integer("gen.classes"));
    g.extent = num("gen.extent");
    return g;
  }

  PipelineConfig pipeline_config() const {
    PipelineConfig p;
    p.voxel_size = num("scene.voxel_size");
    p.backbone.channels = static_cast<std::size_t>(integer("backbone.C"));
    p.backbone.coarse_factor = static_cast<std::size_t>(integer("backbone.coarse_factor"));
    p.backbone.o_stage = static_cast<int>(integer("backbone.o_stage"));
    p.sampler.variant = sampler_variant_from(str("sampler.variant"));
    p.sampler.representative_count = static_cast<std::size_t>(integer("sampler.J"));
    p.sampler.normalize_activations = boolean("sampler.normalize");
    p.sampler.positional = boolean("sampler.positional");
    p.decoder.layers = static_cast<std::size_t>(integer("decoder.L"));
    p.decoder.heads = static_cast<std::size_t>(integer("decoder.H"));
    p.decoder.queries = static_cast<std::size_t>(integer("decoder.K"));
    p.decoder.channels = p.backbone.channels;
    p.decoder.query_mode = query_mode_from(str("decoder.query_mode"));
    p.decoder.self_attention = boolean("decoder.self_attention");
    p.tau = num("heads.tau");
    p.loss_weights.ce = num("loss.lambda_ce");
    p.loss_weights.bce = num("loss.lambda_bce");
    p.loss_weights.dice = num("loss.lambda_dice");
    p.no_object_weight = num("loss.no_object_weight");
    p.validate();
    return p;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.iterations = static_cast<std::size_t>(integer("train.iterations"));
    t.batch_size = static_cast<std::size_t>(integer("train.batch_size"));
    t.lr = num("train.lr");
    t.decay_power = num("train.decay_power");
    t.weight_decay = num("train.weight_decay");
    t.seed = static_cast<std::uint64_t>(integer("train.seed"));
    t.checkpoint_interval = static_cast<std::size_t>(integer("train.checkpoint_interval"));
    t.clip_norm = num("train.clip_norm");
    t.pipeline = pipeline_config();
    t.validate();
    return t;
  }

  void dump(std::ostream& os) const {
    for (auto& [k, v] : values_) os << k << " = " << v << "\n";
  }

  const std::map<std::string, std::string>& all() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace qis
