#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vpd/diffusion.hpp"
#include "vpd/losses.hpp"
#include "vpd/metrics.hpp"
#include "vpd/serialize.hpp"
#include "vpd/synth.hpp"
#include "vpd/unet.hpp"

namespace vpd {

enum class TaskKind { Mvs, Ssc };
enum class LossKind { Regression, Classification, Unification };

TaskKind task_from_string(const std::string& s);
LossKind loss_from_string(const std::string& s);
std::string to_string(TaskKind t);
std::string to_string(LossKind l);

struct OptimConfig {
  double lr = 2.5e-5;  // conservative default; the desk preset overrides it
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; used by the SSC preset
  int64_t steps = 2000;
  int64_t batch_size = 1;
};

struct RunConfig {
  TaskKind task = TaskKind::Mvs;
  LossKind loss = LossKind::Classification;
  bool use_cvp = true;
  bool use_cacc = true;
  bool use_of = true;
  int64_t reverse_steps = 4;

  int64_t schedule_steps = 1000;
  ScheduleKind schedule_kind = ScheduleKind::Linear;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  OptimConfig optim;
  LossConfig loss_cfg;
  // probability of bypassing CACC blocks for one training step, so a single
  // checkpoint stays usable when evaluation disables them
  double cacc_drop_prob = 0.3;

  uint64_t seed = 0;
  SceneConfig scene;
  int64_t unet_base_channels = 16;
  int64_t unet_groups = 8;
  int64_t unet_time_width = 32;
  std::string data_root;  // empty: use VPD_DATA_ROOT or cwd

  UNetConfig unet_config() const;
  NoiseSchedule schedule() const;
  // Desk-scale training preset: classification/WTA regime, lr 2e-3.
  static RunConfig desk_default();

  void validate() const;
};

nlohmann::json run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);
// Set one field by its dotted JSON path, value parsed from text.
void run_config_set(RunConfig& cfg, const std::string& key, const std::string& value);
std::string resolve_path(const RunConfig& cfg, const std::string& path);

// Trainable model: the diffusion UNet plus the SSC occupancy projection.
struct Model {
  UNet3D<float> unet;
  Tensorf ssc_w, ssc_b;  // [num_classes,1,1,1,1] head over the estimated volume

  Model() = default;
  Model(const UNetConfig& cfg, Rng& rng);
  std::vector<std::pair<std::string, Tensorf>> params() const;
  void load(const Checkpoint& ckpt);
};

class Adam {
 public:
  Adam(const OptimConfig& cfg, const std::vector<std::pair<std::string, Tensorf>>& params);
  void zero_grad();
  void step();

 private:
  OptimConfig cfg_;
  std::vector<Tensorf> params_;
  std::vector<std::vector<float>> m_, v_;
  int64_t t_ = 0;
};

// ---- pipeline operations ----

// Generate `count` scene samples + manifest under out_dir.
std::string synth_dataset(const RunConfig& cfg, int64_t count, uint64_t seed_base,
                          const std::string& out_dir);

struct TrainResult {
  std::string checkpoint_path;
  std::string losses_path;
  std::vector<double> losses;
};

TrainResult train(const RunConfig& cfg, const std::string& manifest_path,
                  const std::string& out_dir);

struct EvalResult {
  DepthMetricsReport depth;
  std::optional<SemanticReport> semantic;
  double sample_seconds = 0;  // wall clock spent in diffusion sampling + heads
  int64_t scenes = 0;
};

nlohmann::json eval_report_json(const RunConfig& cfg, const EvalResult& r);

EvalResult evaluate(const RunConfig& cfg, const Model& model, const std::string& manifest_path);
// Convenience: load the checkpoint, evaluate, optionally write the report.
EvalResult evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path,
                               const std::string& manifest_path,
                               const std::string& report_path = "");

struct AblateRow {
  std::string label;
  RunConfig cfg;
  EvalResult result;
};

struct AblateResult {
  std::vector<AblateRow> ladder;  // base, +CVP, +CVP+CACC, +CVP+CACC+OF
  std::vector<AblateRow> sweep;   // reverse steps 1, 2, 4, 8
  std::string ladder_csv;
  std::string sweep_csv;
};

AblateResult ablate(const RunConfig& cfg, const std::string& checkpoint_path,
                    const std::string& manifest_path, const std::string& out_dir);

// One scene end to end; writes depth/confidence (and SSC labels) volumes
// plus a JSON summary under out_prefix.
nlohmann::json sample_scene(const RunConfig& cfg, const std::string& checkpoint_path,
                            uint64_t scene_seed, const std::string& out_prefix);

std::string schedule_dump_csv(const RunConfig& cfg);

// Re-emit an artifact as comma-separated curves: .csv passes through,
// report .json flattens to key,value rows.
std::string plot_csv(const std::string& input_path);

}  // namespace vpd
