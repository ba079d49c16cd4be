// Copyright 2026 The APViT-Desk Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "apvit/apvit.hpp"

namespace fs = std::filesystem;
using namespace apvit;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kConfigError = 2 };

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string data_dir;

  CliConfig load() const { return parse_config(config_path, overrides); }
};

void add_common(CLI::App* cmd, Common& c, bool with_data) {
  cmd->add_option("--config", c.config_path, "key = value config file");
  cmd->add_option("--set", c.overrides, "override, key=value (repeatable)");
  if (with_data) {
    cmd->add_option("--data", c.data_dir,
                    "dataset directory with train/ and test/ (default: synthetic data from the data_* keys)");
  }
}

std::pair<Dataset, Dataset> load_splits(const Common& c, const CliConfig& cfg) {
  if (c.data_dir.empty()) return generate_synthetic(cfg.data);
  return {load_dataset(fs::path(c.data_dir) / "train"), load_dataset(fs::path(c.data_dir) / "test")};
}

Dataset load_test(const Common& c, const CliConfig& cfg) {
  if (c.data_dir.empty()) return generate_synthetic(cfg.data).second;
  return load_dataset(fs::path(c.data_dir) / "test");
}

void check_dataset(const Dataset& ds, const ApvitConfig& model) {
  const Shape want{model.stem.input_channels, model.stem.input_side, model.stem.input_side};
  if (ds.samples.front().image.shape() != want) {
    throw ConfigError("dataset images are " + shape_string(ds.samples.front().image.shape()) + ", model expects " +
                      shape_string(want));
  }
  if (ds.num_classes() > model.num_classes) {
    throw ConfigError("dataset has " + std::to_string(ds.num_classes()) + " classes, model has " +
                      std::to_string(model.num_classes));
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError(path.string() + ": cannot open for writing");
  out << text;
}

nlohmann::json metrics_json(const Metrics& m) {
  return {{"overall_acc", m.overall_acc},
          {"mean_class_acc", m.mean_class_acc},
          {"per_class_acc", m.per_class_acc},
          {"confusion", m.confusion},
          {"total", m.total}};
}

int run_train(const Common& c, const std::string& out, std::string metrics_path) {
  const CliConfig cfg = c.load();
  auto [train, test] = load_splits(c, cfg);
  check_dataset(train, cfg.model);
  if (metrics_path.empty()) metrics_path = out + ".metrics.jsonl";
  std::string log;
  const TrainResult result = train_loop(cfg.model, cfg.train, train, &test, [&](const EvalRecord& rec) {
    log += rec.to_json().dump() + "\n";
    std::fprintf(stderr, "step %zu loss %.4f acc %.4f mean-class %.4f\n", rec.step, rec.loss,
                 rec.metrics.overall_acc, rec.metrics.mean_class_acc);
  });
  save_checkpoint(out, result.params);
  write_text(metrics_path, log);
  return kOk;
}

int run_eval(const Common& c, const std::string& checkpoint) {
  const CliConfig cfg = c.load();
  const Dataset test = load_test(c, cfg);
  check_dataset(test, cfg.model);
  const ApvitParams params = load_checkpoint(checkpoint, cfg.model);
  std::cout << metrics_json(evaluate(params, cfg.model, test)).dump(2) << "\n";
  return kOk;
}

int run_flops(const Common& c, bool json) {
  const CliConfig cfg = c.load();
  const FlopsReport rep = count_flops(cfg.model);
  std::cout << (json ? rep.to_json().dump(2) + "\n" : rep.to_text());
  return kOk;
}

int run_gradcheck(const Common& c, double eps, double threshold) {
  const CliConfig cfg = c.load();
  GradCheckOptions opt;
  opt.eps = eps;
  opt.threshold = threshold;
  const GradCheckReport rep = grad_check(cfg.model, cfg.train.seed, opt);
  std::cout << rep.to_text();
  return rep.passed ? kOk : kCheckFailed;
}

OverlaySpec parse_stage(const std::string& stage, const fs::path& dir, std::size_t index) {
  OverlaySpec spec;
  if (stage != "app") {
    if (stage.rfind("block", 0) != 0) throw ConfigError("stage must be 'app' or 'blockN', got '" + stage + "'");
    try {
      spec.block = std::stoul(stage.substr(5));
    } catch (const std::exception&) {
      throw ConfigError("stage must be 'app' or 'blockN', got '" + stage + "'");
    }
  }
  char name[64];
  std::snprintf(name, sizeof(name), "overlay_%05zu_%s.pgm", index, overlay_stage_name(spec).c_str());
  spec.output = dir / name;
  return spec;
}

int run_visualize(const Common& c, const std::string& checkpoint, const std::string& out_dir,
                  const std::vector<std::string>& stages, const std::vector<std::size_t>& indices) {
  const CliConfig cfg = c.load();
  const Dataset test = load_test(c, cfg);
  check_dataset(test, cfg.model);
  const ApvitParams params = checkpoint.empty() ? init_params(cfg.model, cfg.train.seed)
                                                : load_checkpoint(checkpoint, cfg.model);
  fs::create_directories(out_dir);
  for (std::size_t index : indices) {
    if (index >= test.size()) throw ConfigError("image index " + std::to_string(index) + " out of range");
    const Tensor& image = test.samples[index].image;
    const ForwardResult res = forward(image, params, cfg.model);
    for (const std::string& stage : stages) {
      const OverlaySpec spec = parse_stage(stage, out_dir, index);
      render_overlay(image, res.diagnostics, cfg.model.stem, spec);
      std::cout << spec.output.string() << "\n";
    }
  }
  return kOk;
}

int run_ablate(const Common& c, const std::string& metrics_path) {
  const CliConfig cfg = c.load();
  auto [train, test] = load_splits(c, cfg);
  check_dataset(train, cfg.model);
  struct Row {
    bool app, atp;
    HeadKind head;
  };
  const std::vector<Row> rows{{false, false, HeadKind::Gap}, {false, false, HeadKind::Clt},
                              {false, true, HeadKind::Clt},  {true, false, HeadKind::Gap},
                              {true, false, HeadKind::Clt},  {true, true, HeadKind::Clt}};
  ApvitConfig base = cfg.model;
  base.pooling = PoolingMode::None;
  base.r = 1.0;
  const double base_flops = static_cast<double>(count_flops(base).total);
  std::printf("%-4s %-4s %-4s %9s %10s %7s\n", "APP", "ATP", "Head", "Acc", "MeanAcc", "FLOPs");
  std::string log;
  for (const Row& row : rows) {
    ApvitConfig m = cfg.model;
    if (!row.app) m.pooling = PoolingMode::None;
    if (!row.atp) m.r = 1.0;
    m.head = row.head;
    const TrainResult result = train_loop(m, cfg.train, train, &test);
    const Metrics& met = result.history.back().metrics;
    const double ratio = static_cast<double>(count_flops(m).total) / base_flops;
    std::printf("%-4s %-4s %-4s %8.2f%% %9.2f%% %6.1f%%\n", row.app ? "yes" : "-", row.atp ? "yes" : "-",
                std::string(to_string(row.head)).c_str(), 100.0 * met.overall_acc, 100.0 * met.mean_class_acc,
                100.0 * ratio);
    std::fflush(stdout);
    log += nlohmann::json{{"app", row.app},
                          {"atp", row.atp},
                          {"head", to_string(row.head)},
                          {"overall_acc", met.overall_acc},
                          {"mean_class_acc", met.mean_class_acc},
                          {"flops_ratio", ratio}}
               .dump() +
           "\n";
  }
  if (!metrics_path.empty()) write_text(metrics_path, log);
  return kOk;
}

int run_gen_data(const Common& c, const std::string& out) {
  const CliConfig cfg = c.load();
  auto [train, test] = generate_synthetic(cfg.data);
  write_dataset(fs::path(out) / "train", train);
  write_dataset(fs::path(out) / "test", test);
  std::cout << "wrote " << train.size() << " train and " << test.size() << " test images to " << out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"APViT desk-scale trainer and analysis tool"};
  app.require_subcommand(1);
  Common common;
  std::string out, checkpoint, metrics;
  bool json = false;
  double eps = 1e-5, threshold = 1e-4;
  std::vector<std::string> stages{"app"};
  std::vector<std::size_t> indices{0};

  auto* train = app.add_subcommand("train", "train a model; writes a checkpoint and a metrics JSONL file");
  add_common(train, common, true);
  train->add_option("--out", out, "checkpoint path")->required();
  train->add_option("--metrics", metrics, "metrics JSONL path (default: <out>.metrics.jsonl)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split; prints metrics JSON");
  add_common(eval, common, true);
  eval->add_option("--checkpoint", checkpoint, "checkpoint path")->required();

  auto* flops = app.add_subcommand("flops", "analytic FLOPs report");
  add_common(flops, common, false);
  flops->add_flag("--json", json, "print JSON instead of a table");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check; exit 1 on failure");
  add_common(gradcheck, common, false);
  gradcheck->add_option("--eps", eps, "central-difference step");
  gradcheck->add_option("--threshold", threshold, "maximum relative error");

  auto* visualize = app.add_subcommand("visualize", "write patch-survival overlays (PGM)");
  add_common(visualize, common, true);
  visualize->add_option("--checkpoint", checkpoint, "checkpoint path (default: freshly initialized)");
  visualize->add_option("--out", out, "output directory")->required();
  visualize->add_option("--stage", stages, "app or blockN (repeatable)");
  visualize->add_option("--index", indices, "test image index (repeatable)");

  auto* ablate = app.add_subcommand("ablate", "APP x ATP x head ablation table");
  add_common(ablate, common, true);
  ablate->add_option("--metrics", metrics, "also write rows as JSONL");

  auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset as PGM files + labels.csv");
  add_common(gen, common, false);
  gen->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*train) return run_train(common, out, metrics);
    if (*eval) return run_eval(common, checkpoint);
    if (*flops) return run_flops(common, json);
    if (*gradcheck) return run_gradcheck(common, eps, threshold);
    if (*visualize) return run_visualize(common, checkpoint, out, stages, indices);
    if (*ablate) return run_ablate(common, metrics);
    if (*gen) return run_gen_data(common, out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const LoadError& e) {
    std::fprintf(stderr, "load error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kCheckFailed;
  }
  return kOk;
}
