// VPD command-line interface. Talks to the library exclusively through the
// C API in vpd_c.h.
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vpd/vpd_c.h"

namespace {

struct ConfigDeleter {
  void operator()(vpd_config* c) const { vpd_config_destroy(c); }
};
using ConfigPtr = std::unique_ptr<vpd_config, ConfigDeleter>;

int die(const char* op) {
  std::fprintf(stderr, "vpd %s failed: %s\n", op, vpd_last_error());
  return 1;
}

int apply(vpd_config* cfg, const std::string& key, const std::string& value) {
  if (vpd_config_set(cfg, key.c_str(), value.c_str()) != VPD_OK) {
    std::fprintf(stderr, "bad config value %s=%s: %s\n", key.c_str(), value.c_str(),
                 vpd_last_error());
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Volumetric probability diffusion for synthetic depth scenes"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  std::string config_file, data_root, preset = "default";
  std::vector<std::string> sets;
  uint64_t seed = 0;
  bool seed_given = false;
  app.add_option("--config", config_file, "JSON config file overriding the defaults");
  app.add_option("--preset", preset, "Config preset: default | desk")
      ->check(CLI::IsMember({"default", "desk"}));
  app.add_option("--set", sets, "Override one config field, e.g. --set optim.lr=1e-3");
  app.add_option("--data-root", data_root, "Root for relative paths (or env VPD_DATA_ROOT)");
  app.add_option("--seed", seed, "Run seed")->each([&](const std::string&) { seed_given = true; });

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic scene dataset + manifest");
  std::string synth_out = "data";
  int64_t synth_count = 64;
  uint64_t synth_seed_base = 0;
  bool synth_semantic = false;
  synth->add_option("--out", synth_out, "Output directory");
  synth->add_option("--count", synth_count, "Number of scenes");
  synth->add_option("--seed-base", synth_seed_base, "First scene seed");
  synth->add_flag("--semantic", synth_semantic, "Emit semantic voxel grids (SSC mode)");

  // train
  auto* train = app.add_subcommand("train", "Train the diffusion model on a manifest");
  std::string train_manifest, train_out = "run";
  train->add_option("--manifest", train_manifest, "Dataset manifest path")->required();
  train->add_option("--out", train_out, "Output directory for checkpoint + losses");

  // sample
  auto* sample = app.add_subcommand("sample", "Run one scene end to end and write volumes");
  std::string sample_ckpt, sample_prefix = "sample";
  uint64_t sample_scene_seed = 0;
  sample->add_option("--checkpoint", sample_ckpt, "Checkpoint path")->required();
  sample->add_option("--scene-seed", sample_scene_seed, "Scene seed");
  sample->add_option("--out", sample_prefix, "Output path prefix");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  std::string eval_ckpt, eval_manifest, eval_report = "report.json";
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint path")->required();
  eval->add_option("--manifest", eval_manifest, "Dataset manifest path")->required();
  eval->add_option("--report", eval_report, "Where to write the metrics report (JSON)");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Component ladder + reverse-step sweep tables");
  std::string ab_ckpt, ab_manifest, ab_out = "ablation";
  ablate->add_option("--checkpoint", ab_ckpt, "Checkpoint path")->required();
  ablate->add_option("--manifest", ab_manifest, "Dataset manifest path")->required();
  ablate->add_option("--out", ab_out, "Output directory for tables + reports");

  // schedule-dump
  auto* sched = app.add_subcommand("schedule-dump", "Emit (t, alpha, alpha_bar) as CSV");
  std::string sched_out = "-";
  sched->add_option("--out", sched_out, "Output path ('-' for stdout)");

  // plot
  auto* plot = app.add_subcommand("plot", "Re-emit losses.csv / report.json as CSV curves");
  std::string plot_in, plot_out = "-";
  plot->add_option("--input", plot_in, "Input artifact")->required();
  plot->add_option("--out", plot_out, "Output path ('-' for stdout)");

  CLI11_PARSE(app, argc, argv);

  ConfigPtr cfg(preset == "desk" ? vpd_config_create_desk() : vpd_config_create());
  if (!config_file.empty() && vpd_config_load_file(cfg.get(), config_file.c_str()) != VPD_OK)
    return die("config");
  if (!data_root.empty() && apply(cfg.get(), "data_root", data_root)) return 1;
  if (seed_given && apply(cfg.get(), "seed", std::to_string(seed))) return 1;
  for (const auto& kv : sets) {
    auto pos = kv.find('=');
    if (pos == std::string::npos) {
      std::fprintf(stderr, "--set expects key=value, got %s\n", kv.c_str());
      return 1;
    }
    if (apply(cfg.get(), kv.substr(0, pos), kv.substr(pos + 1))) return 1;
  }

  char buf[4096];
  if (synth->parsed()) {
    if (synth_semantic && apply(cfg.get(), "scene.semantic", "true")) return 1;
    if (vpd_synth(cfg.get(), synth_count, synth_seed_base, synth_out.c_str(), buf,
                  sizeof(buf)) != VPD_OK)
      return die("synth");
    std::printf("manifest: %s\n", buf);
  } else if (train->parsed()) {
    if (vpd_train(cfg.get(), train_manifest.c_str(), train_out.c_str(), buf, sizeof(buf)) !=
        VPD_OK)
      return die("train");
    std::printf("checkpoint: %s\n", buf);
  } else if (sample->parsed()) {
    if (vpd_sample(cfg.get(), sample_ckpt.c_str(), sample_scene_seed, sample_prefix.c_str()) !=
        VPD_OK)
      return die("sample");
    std::printf("wrote %s_depth.vpdvol and %s_summary.json\n", sample_prefix.c_str(),
                sample_prefix.c_str());
  } else if (eval->parsed()) {
    if (vpd_evaluate(cfg.get(), eval_ckpt.c_str(), eval_manifest.c_str(), eval_report.c_str()) !=
        VPD_OK)
      return die("eval");
    std::printf("report: %s\n", eval_report.c_str());
  } else if (ablate->parsed()) {
    if (vpd_ablate(cfg.get(), ab_ckpt.c_str(), ab_manifest.c_str(), ab_out.c_str()) != VPD_OK)
      return die("ablate");
    std::printf("tables: %s/ablation_ladder.csv %s/step_sweep.csv\n", ab_out.c_str(),
                ab_out.c_str());
  } else if (sched->parsed()) {
    if (vpd_schedule_dump(cfg.get(), sched_out.c_str()) != VPD_OK) return die("schedule-dump");
  } else if (plot->parsed()) {
    if (vpd_plot(plot_in.c_str(), plot_out.c_str()) != VPD_OK) return die("plot");
  }
  return 0;
}
