#include "vpd/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <sstream>

namespace vpd {

namespace fs = std::filesystem;

TaskKind task_from_string(const std::string& s) {
  if (s == "mvs") return TaskKind::Mvs;
  if (s == "ssc") return TaskKind::Ssc;
  fail("unknown task: " + s);
}

LossKind loss_from_string(const std::string& s) {
  if (s == "regression") return LossKind::Regression;
  if (s == "classification") return LossKind::Classification;
  if (s == "unification") return LossKind::Unification;
  fail("unknown loss kind: " + s);
}

std::string to_string(TaskKind t) { return t == TaskKind::Mvs ? "mvs" : "ssc"; }

std::string to_string(LossKind l) {
  switch (l) {
    case LossKind::Regression: return "regression";
    case LossKind::Classification: return "classification";
    default: return "unification";
  }
}

UNetConfig RunConfig::unet_config() const {
  UNetConfig u;
  u.base_channels = unet_base_channels;
  u.depth = scene.num_planes;
  u.height = scene.height;
  u.width = scene.width;
  u.groups = unet_groups;
  u.time_embed_width = unet_time_width;
  u.context_channels = SceneConfig::kContextChannels;
  return u;
}

NoiseSchedule RunConfig::schedule() const {
  return NoiseSchedule::make(schedule_steps, schedule_kind, beta_start, beta_end);
}

RunConfig RunConfig::desk_default() {
  RunConfig cfg;
  cfg.optim.lr = 2e-3;  // CPU-scale training needs a far larger rate than 2.5e-5
  return cfg;
}

void RunConfig::validate() const {
  require(reverse_steps >= 0, "RunConfig: reverse_steps must be >= 0 (0 = coarse-prior bypass)");
  require(optim.lr > 0.0, "RunConfig: learning rate must be > 0");
  require(optim.steps >= 1 && optim.batch_size >= 1, "RunConfig: bad optimizer sizes");
  require(cacc_drop_prob >= 0.0 && cacc_drop_prob < 1.0,
          "RunConfig: cacc_drop_prob outside [0, 1)");
  loss_cfg.validate();
  scene.validate();
  unet_config().validate();
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  return {{"task", to_string(c.task)},
          {"loss", to_string(c.loss)},
          {"use_cvp", c.use_cvp},
          {"use_cacc", c.use_cacc},
          {"use_of", c.use_of},
          {"reverse_steps", c.reverse_steps},
          {"schedule",
           {{"steps", c.schedule_steps},
            {"kind", to_string(c.schedule_kind)},
            {"beta_start", c.beta_start},
            {"beta_end", c.beta_end}}},
          {"optim",
           {{"lr", c.optim.lr},
            {"beta1", c.optim.beta1},
            {"beta2", c.optim.beta2},
            {"eps", c.optim.eps},
            {"weight_decay", c.optim.weight_decay},
            {"steps", c.optim.steps},
            {"batch_size", c.optim.batch_size}}},
          {"loss_cfg",
           {{"smooth_l1_beta_bins", c.loss_cfg.smooth_l1_beta},
            {"focal_gamma", c.loss_cfg.focal_gamma},
            {"unify_alpha", c.loss_cfg.unify_alpha},
            {"unify_gamma", c.loss_cfg.unify_gamma},
            {"unify_b", c.loss_cfg.unify_b}}},
          {"cacc_drop_prob", c.cacc_drop_prob},
          {"seed", c.seed},
          {"scene", scene_config_to_json(c.scene)},
          {"unet",
           {{"base_channels", c.unet_base_channels},
            {"groups", c.unet_groups},
            {"time_embed_width", c.unet_time_width}}},
          {"data_root", c.data_root}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.task = task_from_string(j.at("task").get<std::string>());
  c.loss = loss_from_string(j.at("loss").get<std::string>());
  c.use_cvp = j.at("use_cvp").get<bool>();
  c.use_cacc = j.at("use_cacc").get<bool>();
  c.use_of = j.at("use_of").get<bool>();
  c.reverse_steps = j.at("reverse_steps").get<int64_t>();
  const auto& s = j.at("schedule");
  c.schedule_steps = s.at("steps").get<int64_t>();
  c.schedule_kind = schedule_kind_from_string(s.at("kind").get<std::string>());
  c.beta_start = s.at("beta_start").get<double>();
  c.beta_end = s.at("beta_end").get<double>();
  const auto& o = j.at("optim");
  c.optim.lr = o.at("lr").get<double>();
  c.optim.beta1 = o.at("beta1").get<double>();
  c.optim.beta2 = o.at("beta2").get<double>();
  c.optim.eps = o.at("eps").get<double>();
  c.optim.weight_decay = o.at("weight_decay").get<double>();
  c.optim.steps = o.at("steps").get<int64_t>();
  c.optim.batch_size = o.at("batch_size").get<int64_t>();
  const auto& l = j.at("loss_cfg");
  c.loss_cfg.smooth_l1_beta = l.at("smooth_l1_beta_bins").get<double>();
  c.loss_cfg.focal_gamma = l.at("focal_gamma").get<double>();
  c.loss_cfg.unify_alpha = l.at("unify_alpha").get<double>();
  c.loss_cfg.unify_gamma = l.at("unify_gamma").get<double>();
  c.loss_cfg.unify_b = l.at("unify_b").get<double>();
  c.cacc_drop_prob = j.at("cacc_drop_prob").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  c.scene = scene_config_from_json(j.at("scene"));
  const auto& u = j.at("unet");
  c.unet_base_channels = u.at("base_channels").get<int64_t>();
  c.unet_groups = u.at("groups").get<int64_t>();
  c.unet_time_width = u.at("time_embed_width").get<int64_t>();
  c.data_root = j.value("data_root", std::string());
  return c;
}

void run_config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto j = run_config_to_json(cfg);
  std::string ptr = "/" + key;
  for (auto& ch : ptr)
    if (ch == '.') ch = '/';
  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded()) parsed = value;  // plain string
  try {
    j.at(nlohmann::json::json_pointer(ptr)) = parsed;
  } catch (const nlohmann::json::exception&) {
    fail("unknown config key: " + key);
  }
  cfg = run_config_from_json(j);
}

std::string resolve_path(const RunConfig& cfg, const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  std::string root = cfg.data_root;
  if (root.empty()) {
    if (const char* env = std::getenv("VPD_DATA_ROOT")) root = env;
  }
  if (root.empty()) return path;
  return (fs::path(root) / path).string();
}

// ---- model ----

Model::Model(const UNetConfig& cfg, Rng& rng) : unet(cfg, rng) {
  ssc_w = Tensorf::randn({kNumSemClasses, 1, 1, 1, 1}, rng);
  for (auto& w : ssc_w.data()) w *= 0.1f;
  ssc_b = Tensorf::zeros({kNumSemClasses});
  ssc_w.set_requires_grad(true);
  ssc_b.set_requires_grad(true);
}

std::vector<std::pair<std::string, Tensorf>> Model::params() const {
  auto p = unet.params();
  p.emplace_back("ssc.w", ssc_w);
  p.emplace_back("ssc.b", ssc_b);
  return p;
}

void Model::load(const Checkpoint& ckpt) {
  Rng rng(0);
  *this = Model(ckpt.config, rng);
  auto mine = params();
  require(mine.size() == ckpt.params.size(),
          "checkpoint: parameter count mismatch (" + std::to_string(ckpt.params.size()) +
              " stored, " + std::to_string(mine.size()) + " expected)");
  for (size_t i = 0; i < mine.size(); ++i) {
    const auto& [name, stored] = ckpt.params[i];
    require(name == mine[i].first, "checkpoint: parameter name mismatch at index " +
                                       std::to_string(i) + ": " + name + " vs " + mine[i].first);
    require(stored.shape() == mine[i].second.shape(),
            "checkpoint: shape mismatch for " + name);
    mine[i].second.data() = stored.data();
  }
}

// ---- Adam ----

Adam::Adam(const OptimConfig& cfg, const std::vector<std::pair<std::string, Tensorf>>& params)
    : cfg_(cfg) {
  for (const auto& [name, t] : params) {
    params_.push_back(t);
    m_.emplace_back(t.data().size(), 0.0f);
    v_.emplace_back(t.data().size(), 0.0f);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  t_++;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& value = params_[i].data();
    const auto& grad = params_[i].node()->grad;
    if (grad.size() != value.size()) continue;  // parameter unused this step
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t k = 0; k < value.size(); ++k) {
      if (cfg_.weight_decay > 0.0)
        value[k] -= static_cast<float>(cfg_.lr * cfg_.weight_decay) * value[k];
      const double g = grad[k];
      m[k] = static_cast<float>(cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g);
      v[k] = static_cast<float>(cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g * g);
      const double mh = m[k] / bc1, vh = v[k] / bc2;
      value[k] -= static_cast<float>(cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
    }
  }
}

// ---- shared helpers ----

namespace {

ProbabilityVolumeT<float> uniform_prior(int64_t d, int64_t h, int64_t w) {
  return {Tensorf::full({1, d, h, w}, 1.0f / static_cast<float>(d))};
}

ProbabilityVolumeT<float> make_prior(const RunConfig& cfg, const SceneSample& s) {
  if (!cfg.use_cvp)
    return uniform_prior(cfg.scene.num_planes, cfg.scene.height, cfg.scene.width);
  return probabilize(s.coarse_cost);
}

DenoiseFn<float> denoiser(const Model& model, const std::vector<ContextFeaturesT<float>>& ctx,
                          bool use_cacc) {
  return [&model, &ctx, use_cacc](const Tensorf& in, int64_t t) {
    auto y = slice(in, 0, 0, 1);
    auto prior = slice(in, 0, 1, 1);
    return sigmoid(model.unet.forward(y, prior, t, ctx, use_cacc));
  };
}

// Cross-entropy of the occupancy head against the voxel labels,
// averaged over non-ignored voxels.
Tensorf ssc_cross_entropy(const Tensorf& probs, const std::vector<int32_t>& gt) {
  const int64_t K = probs.dim(0);
  const int64_t vox = probs.numel() / K;
  std::vector<float> onehot(probs.data().size(), 0.0f);
  int64_t count = 0;
  for (int64_t i = 0; i < vox; ++i) {
    int32_t c = gt[static_cast<size_t>(i)];
    if (c == kSemIgnore) continue;
    onehot[static_cast<size_t>(c * vox + i)] = 1.0f;
    count++;
  }
  require(count > 0, "ssc_cross_entropy: every voxel is ignored");
  auto sel = Tensorf::from(probs.shape(), std::move(onehot));
  auto ce = neg(sum_all(sel * vpd::log(vpd::clamp(probs, 1e-7, 1.0))));
  return mul_scalar(ce, 1.0f / static_cast<float>(count));
}

DepthMapT<float> task_head(const RunConfig& cfg, const ProbabilityVolumeT<float>& final_volume,
                           const HypothesisPlanes& planes, bool bypass) {
  if (bypass || cfg.loss == LossKind::Classification)
    return wta(final_volume, planes).depth;
  if (cfg.loss == LossKind::Regression) return soft_argmin_depth(final_volume, planes);
  return unity_regress_depth(final_volume.values, planes);
}

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

// ---- dataset generation ----

std::string synth_dataset(const RunConfig& cfg, int64_t count, uint64_t seed_base,
                          const std::string& out_dir) {
  cfg.scene.validate();
  require(count >= 1, "synth_dataset: need at least one scene");
  std::string dir = resolve_path(cfg, out_dir);
  fs::create_directories(dir);
  DatasetManifest m;
  m.scene = cfg.scene;
  m.config_hash = scene_config_hash(cfg.scene);
  for (int64_t i = 0; i < count; ++i) {
    uint64_t seed = seed_base + static_cast<uint64_t>(i);
    m.seeds.push_back(seed);
    write_scene_sample(dir, generate_scene(cfg.scene, seed));
  }
  std::string manifest_path = dir + "/manifest.json";
  write_manifest(manifest_path, m);
  return manifest_path;
}

namespace {

std::vector<SceneSample> load_dataset(const RunConfig& cfg, const std::string& manifest_path,
                                      DatasetManifest* manifest_out = nullptr) {
  std::string path = resolve_path(cfg, manifest_path);
  auto manifest = read_manifest(path);
  require(manifest.scene.height == cfg.scene.height && manifest.scene.width == cfg.scene.width &&
              manifest.scene.num_planes == cfg.scene.num_planes,
          "dataset manifest extents do not match the run config");
  std::string dir = fs::path(path).parent_path().string();
  if (dir.empty()) dir = ".";
  std::vector<SceneSample> samples;
  samples.reserve(manifest.seeds.size());
  for (uint64_t seed : manifest.seeds)
    samples.push_back(read_scene_sample(dir, manifest.scene, seed));
  if (manifest_out) *manifest_out = manifest;
  return samples;
}

}  // namespace

// ---- training ----

TrainResult train(const RunConfig& cfg, const std::string& manifest_path,
                  const std::string& out_dir) {
  cfg.validate();
  auto schedule = cfg.schedule();
  require(schedule.terminal_noise_ok(),
          "train: schedule does not decay to noise (alpha_bar(T) >= 0.01)");
  auto samples = load_dataset(cfg, manifest_path);
  require(!samples.empty(), "train: empty dataset");
  if (cfg.task == TaskKind::Ssc)
    for (const auto& s : samples)
      require(!s.semantic_grid.empty(), "train: SSC task needs semantic grids in the dataset");

  auto planes = planes_for(cfg.scene);
  const double bin = (cfg.scene.d_max - cfg.scene.d_min) /
                     static_cast<double>(cfg.scene.num_planes - 1);
  const double beta_m = cfg.loss_cfg.smooth_l1_beta * bin;  // plane-widths -> meters

  Rng init_rng(Rng::derive(cfg.seed, 1));
  Model model(cfg.unet_config(), init_rng);
  Adam opt(cfg.optim, model.params());
  Rng rng(Rng::derive(cfg.seed, 2));

  const ProjectionMode target_mode =
      cfg.loss == LossKind::Classification ? ProjectionMode::OneHot : ProjectionMode::TwoBin;

  std::vector<double> losses;
  losses.reserve(static_cast<size_t>(cfg.optim.steps));
  for (int64_t step = 1; step <= cfg.optim.steps; ++step) {
    opt.zero_grad();
    double step_loss = 0;
    for (int64_t b = 0; b < cfg.optim.batch_size; ++b) {
      const auto& s = samples[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(samples.size()) - 1))];
      auto y0 = project_unimodal(s.gt_depth, planes, target_mode);
      auto prior = make_prior(cfg, s);
      const int64_t t = rng.uniform_int(1, schedule.steps());
      auto noise = Tensorf::randn(y0.values.shape(), rng);
      auto y_t = forward_sample(y0.values, t, schedule, noise);
      const bool cacc_on = cfg.use_cacc && !(rng.uniform() < cfg.cacc_drop_prob);

      auto logits = model.unet.forward(y_t, prior.values, t, s.contexts, cacc_on);
      auto y0_hat = sigmoid(logits);
      const auto n_valid = static_cast<float>(s.gt_depth.valid_count());

      Tensorf loss;
      switch (cfg.loss) {
        case LossKind::Classification: {
          auto p = renormalize(y0_hat);
          loss = mul_scalar(classification_loss(p, s.gt_depth, planes, cfg.loss_cfg.focal_gamma),
                            1.0f / n_valid);
          break;
        }
        case LossKind::Regression: {
          auto pred = soft_argmin_depth(renormalize(y0_hat), planes);
          pred.mask = s.gt_depth.mask;
          loss = regression_loss(pred, s.gt_depth, beta_m);
          break;
        }
        case LossKind::Unification: {
          auto q = build_unity_target(s.gt_depth, planes);
          loss = mul_scalar(unification_loss(y0_hat, q, s.gt_depth.mask, cfg.loss_cfg),
                            1.0f / n_valid);
          break;
        }
      }
      if (cfg.task == TaskKind::Ssc) {
        auto occ = occupancy_head(y0_hat, 1, kNumSemClasses, model.ssc_w, model.ssc_b);
        loss = loss + ssc_cross_entropy(occ, s.semantic_grid);
      }
      loss = mul_scalar(loss, 1.0f / static_cast<float>(cfg.optim.batch_size));
      const double lv = static_cast<double>(loss.item());
      require(std::isfinite(lv),
              "train: loss diverged (non-finite) at step " + std::to_string(step));
      loss.backward();
      step_loss += lv;
    }
    opt.step();
    losses.push_back(step_loss);
  }

  std::string dir = resolve_path(cfg, out_dir);
  fs::create_directories(dir);
  TrainResult r;
  r.losses = std::move(losses);
  r.checkpoint_path = dir + "/model.vpdckpt";
  r.losses_path = dir + "/losses.csv";
  nlohmann::json extra{{"run_config", run_config_to_json(cfg)}};
  write_checkpoint(r.checkpoint_path, model.unet.config(), model.params(), extra);
  std::ostringstream csv;
  csv << "step,loss\n";
  csv.precision(10);
  for (size_t i = 0; i < r.losses.size(); ++i) csv << (i + 1) << ',' << r.losses[i] << '\n';
  write_text_file(r.losses_path, csv.str());
  return r;
}

// ---- evaluation ----

EvalResult evaluate(const RunConfig& cfg, const Model& model, const std::string& manifest_path) {
  cfg.validate();
  NoGradGuard ng;
  auto samples = load_dataset(cfg, manifest_path);
  require(!samples.empty(), "evaluate: empty dataset");
  if (cfg.task == TaskKind::Ssc)
    for (const auto& s : samples)
      require(!s.semantic_grid.empty(), "evaluate: SSC task needs semantic grids in the dataset");
  auto planes = planes_for(cfg.scene);
  auto schedule = cfg.schedule();
  require(model.unet.config().depth == cfg.scene.num_planes &&
              model.unet.config().height == cfg.scene.height &&
              model.unet.config().width == cfg.scene.width,
          "evaluate: checkpoint extents are incompatible with the scene config");

  const int64_t hw = cfg.scene.height * cfg.scene.width;
  std::vector<float> all_pred, all_gt;
  std::vector<uint8_t> all_mask;
  std::vector<int32_t> all_sem_pred, all_sem_gt;
  EvalResult r;

  for (const auto& s : samples) {
    auto prior = make_prior(cfg, s);
    const double t0 = now_seconds();
    ProbabilityVolumeT<float> final_volume;
    const bool bypass = cfg.reverse_steps == 0;
    if (bypass) {
      final_volume = probabilize(s.coarse_cost);
    } else {
      SampleOptions opts;
      opts.num_iterations = cfg.reverse_steps;
      opts.seed = Rng::derive(cfg.seed, s.seed);
      opts.use_online_filter = cfg.use_of;
      auto fn = denoiser(model, s.contexts, cfg.use_cacc);
      final_volume = sample(prior, planes, fn, schedule, opts);
    }
    auto pred = task_head(cfg, final_volume, planes, bypass);
    if (cfg.task == TaskKind::Ssc) {
      auto occ = occupancy_head(final_volume.values, 1, kNumSemClasses, model.ssc_w, model.ssc_b);
      auto labels = argmax_axis(occ, 0);
      for (size_t i = 0; i < labels.size(); ++i) {
        all_sem_pred.push_back(static_cast<int32_t>(labels[i]));
        all_sem_gt.push_back(s.semantic_grid[i]);
      }
    }
    r.sample_seconds += now_seconds() - t0;

    for (int64_t i = 0; i < hw; ++i) {
      all_pred.push_back(pred.depths.data()[i]);
      all_gt.push_back(s.gt_depth.depths.data()[i]);
      all_mask.push_back(s.gt_depth.mask[static_cast<size_t>(i)]);
    }
    r.scenes++;
  }

  DepthMapT<float> pm, gm;
  const int64_t total = static_cast<int64_t>(all_pred.size());
  pm.depths = Tensorf::from({1, total}, std::move(all_pred));
  gm.depths = Tensorf::from({1, total}, std::move(all_gt));
  pm.mask.assign(static_cast<size_t>(total), 1);
  gm.mask = all_mask;
  r.depth = depth_metrics(pm, gm);
  if (cfg.task == TaskKind::Ssc)
    r.semantic = semantic_metrics(all_sem_pred, all_sem_gt,
                                  {static_cast<int64_t>(all_sem_pred.size()), 1, 1},
                                  kNumSemClasses, kSemIgnore);
  return r;
}

nlohmann::json eval_report_json(const RunConfig& cfg, const EvalResult& r) {
  // deliberately excludes timings so reports are bit-identical across runs
  nlohmann::json j{{"abs", r.depth.abs},
                   {"abs_rel", r.depth.abs_rel},
                   {"sq_rel", r.depth.sq_rel},
                   {"rmse", r.depth.rmse},
                   {"pixel_count", r.depth.pixel_count},
                   {"scenes", r.scenes},
                   {"settings",
                    {{"use_cvp", cfg.use_cvp},
                     {"use_cacc", cfg.use_cacc},
                     {"use_of", cfg.use_of},
                     {"reverse_steps", cfg.reverse_steps},
                     {"task", to_string(cfg.task)},
                     {"loss", to_string(cfg.loss)},
                     {"seed", cfg.seed}}}};
  for (const auto& [k, v] : r.depth.th) j["th_mm"][std::to_string(static_cast<int>(k))] = v;
  for (const auto& [i, v] : r.depth.delta) j["delta"][std::to_string(i)] = v;
  if (r.semantic) {
    j["miou"] = r.semantic->miou;
    for (size_t c = 0; c < r.semantic->iou.size(); ++c)
      if (r.semantic->evaluated[c]) j["iou"][std::to_string(c)] = r.semantic->iou[c];
  }
  return j;
}

EvalResult evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path,
                               const std::string& manifest_path,
                               const std::string& report_path) {
  Model model;
  model.load(read_checkpoint(resolve_path(cfg, checkpoint_path)));
  auto r = evaluate(cfg, model, manifest_path);
  if (!report_path.empty())
    write_text_file(resolve_path(cfg, report_path), eval_report_json(cfg, r).dump(2) + "\n");
  return r;
}

// ---- ablation harness ----

AblateResult ablate(const RunConfig& cfg, const std::string& checkpoint_path,
                    const std::string& manifest_path, const std::string& out_dir) {
  Model model;
  model.load(read_checkpoint(resolve_path(cfg, checkpoint_path)));
  std::string dir = resolve_path(cfg, out_dir);
  fs::create_directories(dir);

  auto with = [&](const char* label, bool cvp, bool cacc, bool of, int64_t steps) {
    AblateRow row;
    row.label = label;
    row.cfg = cfg;
    row.cfg.use_cvp = cvp;
    row.cfg.use_cacc = cacc;
    row.cfg.use_of = of;
    row.cfg.reverse_steps = steps;
    row.result = evaluate(row.cfg, model, manifest_path);
    write_text_file(dir + "/report_" + row.label + ".json",
                    eval_report_json(row.cfg, row.result).dump(2) + "\n");
    return row;
  };

  AblateResult r;
  r.ladder.push_back(with("base", false, false, false, 0));
  r.ladder.push_back(with("cvp", true, false, false, cfg.reverse_steps));
  r.ladder.push_back(with("cvp_cacc", true, true, false, cfg.reverse_steps));
  r.ladder.push_back(with("cvp_cacc_of", true, true, true, cfg.reverse_steps));
  for (int64_t steps : {1, 2, 4, 8})
    r.sweep.push_back(with(("steps" + std::to_string(steps)).c_str(), true, true, true, steps));

  std::ostringstream lad;
  lad.precision(8);
  lad << "setting,use_cvp,use_cacc,use_of,reverse_steps,abs_rel,abs,sq_rel,rmse,wall_clock_s\n";
  for (const auto& row : r.ladder)
    lad << row.label << ',' << row.cfg.use_cvp << ',' << row.cfg.use_cacc << ','
        << row.cfg.use_of << ',' << row.cfg.reverse_steps << ',' << row.result.depth.abs_rel
        << ',' << row.result.depth.abs << ',' << row.result.depth.sq_rel << ','
        << row.result.depth.rmse << ',' << row.result.sample_seconds << '\n';
  r.ladder_csv = lad.str();

  std::ostringstream sw;
  sw.precision(8);
  sw << "reverse_steps,abs_rel,abs,rmse,wall_clock_s\n";
  for (const auto& row : r.sweep)
    sw << row.cfg.reverse_steps << ',' << row.result.depth.abs_rel << ',' << row.result.depth.abs
       << ',' << row.result.depth.rmse << ',' << row.result.sample_seconds << '\n';
  r.sweep_csv = sw.str();

  write_text_file(dir + "/ablation_ladder.csv", r.ladder_csv);
  write_text_file(dir + "/step_sweep.csv", r.sweep_csv);
  return r;
}

// ---- single-scene sampling ----

nlohmann::json sample_scene(const RunConfig& cfg, const std::string& checkpoint_path,
                            uint64_t scene_seed, const std::string& out_prefix) {
  cfg.validate();
  NoGradGuard ng;
  Model model;
  model.load(read_checkpoint(resolve_path(cfg, checkpoint_path)));
  auto s = generate_scene(cfg.scene, scene_seed);
  auto planes = planes_for(cfg.scene);
  auto schedule = cfg.schedule();

  auto prior = make_prior(cfg, s);
  ProbabilityVolumeT<float> final_volume;
  if (cfg.reverse_steps == 0) {
    final_volume = probabilize(s.coarse_cost);
  } else {
    SampleOptions opts;
    opts.num_iterations = cfg.reverse_steps;
    opts.seed = Rng::derive(cfg.seed, scene_seed);
    opts.use_online_filter = cfg.use_of;
    auto fn = denoiser(model, s.contexts, cfg.use_cacc);
    final_volume = sample(prior, planes, fn, schedule, opts);
  }
  auto wta_result = wta(final_volume, planes);
  auto pred = task_head(cfg, final_volume, planes, cfg.reverse_steps == 0);

  std::string prefix = resolve_path(cfg, out_prefix);
  fs::create_directories(fs::path(prefix).parent_path());
  const int64_t H = cfg.scene.height, W = cfg.scene.width;
  write_volume_file(prefix + "_depth.vpdvol", reshape(pred.depths, Shape{1, 1, H, W}));
  write_volume_file(prefix + "_conf.vpdvol",
                    reshape(wta_result.confidence.values, Shape{1, 1, H, W}));
  if (cfg.task == TaskKind::Ssc) {
    auto occ = occupancy_head(final_volume.values, 1, kNumSemClasses, model.ssc_w, model.ssc_b);
    auto labels = argmax_axis(occ, 0);
    std::vector<float> lf(labels.begin(), labels.end());
    write_volume_file(prefix + "_occupancy.vpdvol",
                      Tensorf::from({1, cfg.scene.num_planes, H, W}, std::move(lf)));
  }

  DepthMapT<float> pm = pred;
  pm.mask = s.gt_depth.mask;
  auto metrics = depth_metrics(pm, s.gt_depth);
  nlohmann::json summary{{"scene_seed", scene_seed},
                         {"abs", metrics.abs},
                         {"abs_rel", metrics.abs_rel},
                         {"rmse", metrics.rmse},
                         {"reverse_steps", cfg.reverse_steps},
                         {"outputs",
                          {{"depth", prefix + "_depth.vpdvol"},
                           {"confidence", prefix + "_conf.vpdvol"}}}};
  write_text_file(prefix + "_summary.json", summary.dump(2) + "\n");
  return summary;
}

std::string schedule_dump_csv(const RunConfig& cfg) { return cfg.schedule().to_csv(); }

std::string plot_csv(const std::string& input_path) {
  auto text = read_text_file(input_path);
  if (input_path.size() >= 5 && input_path.substr(input_path.size() - 5) == ".json") {
    auto j = nlohmann::json::parse(text);
    std::ostringstream os;
    os << "key,value\n";
    std::function<void(const nlohmann::json&, const std::string&)> walk =
        [&](const nlohmann::json& node, const std::string& prefix) {
          if (node.is_object()) {
            for (auto it = node.begin(); it != node.end(); ++it)
              walk(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key());
          } else if (node.is_array()) {
            for (size_t i = 0; i < node.size(); ++i)
              walk(node[i], prefix + "[" + std::to_string(i) + "]");
          } else {
            os << prefix << ',' << node.dump() << '\n';
          }
        };
    walk(j, "");
    return os.str();
  }
  return text;  // already comma-separated
}

}  // namespace vpd
