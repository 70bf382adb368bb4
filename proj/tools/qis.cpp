// qis: scene generation, training, inference, evaluation and the sampling
// ablation harness for the query-based 3D instance segmentation pipeline.

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qis/config.hpp"
#include "qis/engine.hpp"

namespace fs = std::filesystem;
using namespace qis;

namespace {

struct CliArgs {
  std::string command;
  RunConfig config;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::map<std::string, std::string> named;  // --out DIR style arguments
};

[[noreturn]] void usage(const std::string& msg = "") {
  if (!msg.empty()) std::cerr << "error: " << msg << "\n\n";
  std::cerr <<
      "usage: qis <command> [options]\n"
      "\n"
      "commands:\n"
      "  gen     --out DIR --count N [--seed S]        generate synthetic scenes\n"
      "  train   --data DIR --out CKPT                 train on a scene directory\n"
      "  infer   --ckpt CKPT --scene FILE --out FILE   run inference on one scene\n"
      "  eval    --ckpt CKPT --data DIR --out FILE     evaluate AP / AP50\n"
      "  ablate  --data DIR --out DIR                  train+eval the five sampling variants\n"
      "\n"
      "global options:\n"
      "  --config PATH     key-value config file\n"
      "  --seed N          override train.seed / generation base seed\n"
      "  --threads N       accepted for compatibility; runs are serial\n"
      "  --<key>=<value>   override any config key, e.g. --decoder.K=16\n";
  std::exit(2);
}

CliArgs parse_args(int argc, char** argv) {
  if (argc < 2) usage();
  CliArgs args;
  args.command = argv[1];
  std::vector<std::string> argv_rest(argv + 2, argv + argc);
  for (std::size_t i = 0; i < argv_rest.size(); ++i) {
    const std::string& a = argv_rest[i];
    auto value_of = [&](const char* flag) {
      if (i + 1 >= argv_rest.size()) usage(std::string(flag) + " needs a value");
      return argv_rest[++i];
    };
    if (a == "--config") {
      args.config.load_file(value_of("--config"));
    } else if (a == "--seed") {
      args.seed = std::stoull(value_of("--seed"));
    } else if (a == "--threads") {
      args.threads = std::stoi(value_of("--threads"));
    } else if (a == "--out" || a == "--data" || a == "--ckpt" || a == "--scene" ||
               a == "--count") {
      args.named[a.substr(2)] = value_of(a.c_str());
    } else if (a.rfind("--", 0) == 0 && a.find('=') != std::string::npos) {
      auto eq = a.find('=');
      args.config.set(a.substr(2, eq - 2), a.substr(eq + 1));
    } else {
      usage("unrecognized argument '" + a + "'");
    }
  }
  if (args.seed) args.config.set("train.seed", std::to_string(*args.seed));
  return args;
}

std::string require(const CliArgs& args, const std::string& key) {
  auto it = args.named.find(key);
  if (it == args.named.end()) usage(args.command + " requires --" + key);
  return it->second;
}

std::vector<LabeledScene> load_scene_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
  std::vector<std::string> files;
  for (auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".qis")
      files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .qis scenes in " + dir);
  std::vector<LabeledScene> out;
  for (auto& f : files) {
    auto [scene, gt] = read_scene(f);
    out.push_back({std::move(scene), std::move(gt), fs::path(f).filename().string()});
  }
  return out;
}

void log_resolved_config(const RunConfig& cfg) {
  std::cout << "# resolved configuration\n";
  std::ostringstream ss;
  cfg.dump(ss);
  std::string line;
  std::istringstream is(ss.str());
  while (std::getline(is, line)) std::cout << "#   " << line << "\n";
}

int cmd_gen(const CliArgs& args) {
  std::string out_dir = require(args, "out");
  std::size_t count = std::stoull(require(args, "count"));
  std::uint64_t base_seed = args.seed.value_or(
      static_cast<std::uint64_t>(args.config.integer("train.seed")));
  fs::create_directories(out_dir);
  GenConfig gen = args.config.gen_config();
  log_resolved_config(args.config);
  for (std::size_t i = 0; i < count; ++i) {
    auto [scene, gt] = generate_scene(gen, base_seed + i);
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%03zu.qis", i);
    std::string path = (fs::path(out_dir) / name).string();
    write_scene(scene, path);
    std::cout << path << " N=" << scene.size() << " K'=" << gt.count() << "\n";
  }
  return 0;
}

int cmd_train(const CliArgs& args) {
  std::string data_dir = require(args, "data");
  std::string out_ckpt = require(args, "out");
  auto data = load_scene_dir(data_dir);
  TrainConfig cfg = args.config.train_config();
  log_resolved_config(args.config);
  Checkpoint ck = train(data, cfg, &std::cout, nullptr, out_ckpt);
  save_checkpoint(ck, out_ckpt);
  std::cout << "checkpoint written: " << out_ckpt << "\n";
  return 0;
}

int cmd_infer(const CliArgs& args) {
  Checkpoint ck = load_checkpoint(require(args, "ckpt"));
  auto [scene, gt] = read_scene(require(args, "scene"));
  std::string out = require(args, "out");
  auto results = infer(scene, ck);
  write_results(results, scene.size(), out);
  std::cout << "instances: " << results.size() << " -> " << out << "\n";
  return 0;
}

int cmd_eval(const CliArgs& args) {
  Checkpoint ck = load_checkpoint(require(args, "ckpt"));
  auto data = load_scene_dir(require(args, "data"));
  std::string out = require(args, "out");
  std::vector<std::vector<InstanceResult>> results;
  std::vector<GroundTruth> gts;
  for (auto& d : data) {
    results.push_back(infer(d.scene, ck));
    gts.push_back(d.gt);
  }
  EvalReport rep = evaluate(results, gts);
  write_report(rep, out);
  std::cout << "mean AP = " << rep.mean_ap << "\nmean AP50 = " << rep.mean_ap50 << "\n";
  return 0;
}

struct AblationRow {
  std::string name;
  double ap = 0.0, ap50 = 0.0;
};

int cmd_ablate(const CliArgs& args) {
  auto data = load_scene_dir(require(args, "data"));
  std::string out_dir = require(args, "out");
  fs::create_directories(out_dir);
  log_resolved_config(args.config);

  const std::vector<std::pair<std::string, std::pair<std::string, std::string>>>
      variants = {
          {"rpg", {"rpg", "learned"}},        {"wo_rpg", {"none", "learned"}},
          {"random", {"random", "learned"}},  {"fps", {"fps", "learned"}},
          {"nonparam", {"rpg", "nonparam_fps"}},
      };

  std::vector<AblationRow> rows;
  for (auto& [name, sel] : variants) {
    RunConfig cfg = args.config;
    cfg.set("sampler.variant", sel.first);
    cfg.set("decoder.query_mode", sel.second);
    TrainConfig tc = cfg.train_config();
    std::cout << "== variant " << name << " ==\n";
    Checkpoint ck = train(data, tc);
    std::vector<std::vector<InstanceResult>> results;
    std::vector<GroundTruth> gts;
    for (auto& d : data) {
      results.push_back(infer(d.scene, ck));
      gts.push_back(d.gt);
    }
    EvalReport rep = evaluate(results, gts);
    rows.push_back({name, rep.mean_ap, rep.mean_ap50});
    std::cout << name << " AP=" << rep.mean_ap << " AP50=" << rep.mean_ap50 << "\n";
    save_checkpoint(ck, (fs::path(out_dir) / (name + ".ckpt")).string());
  }

  std::string table_path = (fs::path(out_dir) / "ablation.txt").string();
  std::ofstream tf(table_path);
  if (!tf) throw std::runtime_error("cannot open for writing: " + table_path);
  tf << "variant    AP        AP50\n";
  for (auto& r : rows)
    tf << std::left << std::setw(10) << r.name << " " << std::setw(9)
       << detail::format_double(r.ap) << " " << detail::format_double(r.ap50) << "\n";
  std::cout << "ablation table written: " << table_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    CliArgs args = parse_args(argc, argv);
    if (args.command == "gen") return cmd_gen(args);
    if (args.command == "train") return cmd_train(args);
    if (args.command == "infer") return cmd_infer(args);
    if (args.command == "eval") return cmd_eval(args);
    if (args.command == "ablate") return cmd_ablate(args);
    usage("unknown command '" + args.command + "'");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
