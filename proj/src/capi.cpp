#include "vpd/vpd_c.h"

#include <cstdio>
#include <cstring>
#include <string>

#include "vpd/pipeline.hpp"

namespace {

thread_local std::string g_last_error;

struct ConfigHandle {
  vpd::RunConfig cfg;
};

struct VolumeHandle {
  vpd::Tensorf tensor;
};

vpd_status set_error(vpd_status code, const std::string& msg) {
  g_last_error = msg;
  return code;
}

template <class F>
vpd_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return VPD_OK;
  } catch (const vpd::Error& e) {
    return set_error(VPD_ERR_RUNTIME, e.what());
  } catch (const std::exception& e) {
    return set_error(VPD_ERR_RUNTIME, e.what());
  }
}

vpd_status copy_out(const std::string& s, char* buf, size_t cap) {
  if (!buf) return VPD_OK;
  if (s.size() + 1 > cap)
    return set_error(VPD_ERR_INVALID_ARGUMENT,
                     "output buffer too small (" + std::to_string(s.size() + 1) + " bytes needed)");
  std::memcpy(buf, s.c_str(), s.size() + 1);
  return VPD_OK;
}

const vpd::RunConfig& cfg_of(const vpd_config* cfg) {
  return reinterpret_cast<const ConfigHandle*>(cfg)->cfg;
}

}  // namespace

extern "C" {

const char* vpd_version(void) { return "vpd 1.0.0"; }

const char* vpd_last_error(void) { return g_last_error.c_str(); }

vpd_config* vpd_config_create(void) { return reinterpret_cast<vpd_config*>(new ConfigHandle{}); }

vpd_config* vpd_config_create_desk(void) {
  return reinterpret_cast<vpd_config*>(new ConfigHandle{vpd::RunConfig::desk_default()});
}

void vpd_config_destroy(vpd_config* cfg) { delete reinterpret_cast<ConfigHandle*>(cfg); }

vpd_status vpd_config_load_file(vpd_config* cfg, const char* path) {
  if (!cfg || !path) return set_error(VPD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    auto& c = reinterpret_cast<ConfigHandle*>(cfg)->cfg;
    c = vpd::run_config_from_json(nlohmann::json::parse(vpd::read_text_file(path)));
  });
}

vpd_status vpd_config_set(vpd_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) return set_error(VPD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded(
      [&] { vpd::run_config_set(reinterpret_cast<ConfigHandle*>(cfg)->cfg, key, value); });
}

vpd_status vpd_config_dump(const vpd_config* cfg, char* buf, size_t cap) {
  if (!cfg || !buf) return set_error(VPD_ERR_INVALID_ARGUMENT, "null argument");
  std::string out;
  vpd_status st = guarded([&] { out = vpd::run_config_to_json(cfg_of(cfg)).dump(2) + "\n"; });
  if (st != VPD_OK) return st;
  return copy_out(out, buf, cap);
}

vpd_status vpd_synth(const vpd_config* cfg, int64_t count, uint64_t seed_base,
                     const char* out_dir, char* manifest_path_buf, size_t cap) {
  if (!cfg || !out_dir) return set_error(VPD_ERR_INVALID_ARGUMENT, "null argument");
  std::string manifest;
  vpd_status st =
      guarded([&] { manifest = vpd::synth_dataset(cfg_of(cfg), count, seed_base, out_dir); });
  if (st != VPD_OK) return st;
  return copy_out(manifest, manifest_path_buf, cap);
}

vpd_status vpd_train(const vpd_config* cfg, const char* manifest_path, const char* out_dir,
                     char* checkpoint_path_buf, size_t cap) {
  if (!cfg || !manifest_path || !out_dir)
    return set_error(VPD_ERR_INVALID_ARGUMENT, "null argument");
  std::string ckpt;
  vpd_status st = guarded(
      [&] { ckpt = vpd::train(cfg_of(cfg), manifest_path, out_dir).checkpoint_path; });
  if (st != VPD_OK) return st;
  return copy_out(ckpt, checkpoint_path_buf, cap);
}

vpd_status vpd_evaluate(const vpd_config* cfg, const char* checkpoint_path,
                        const char* manifest_path, const char* report_path) {
  if (!cfg || !checkpoint_path || !manifest_path || !report_path)
    return set_error(VPD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    vpd::evaluate_checkpoint(cfg_of(cfg), checkpoint_path, manifest_path, report_path);
  });
}

vpd_status vpd_ablate(const vpd_config* cfg, const char* checkpoint_path,
                      const char* manifest_path, const char* out_dir) {
  if (!cfg || !checkpoint_path || !manifest_path || !out_dir)
    return set_error(VPD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] { vpd::ablate(cfg_of(cfg), checkpoint_path, manifest_path, out_dir); });
}

vpd_status vpd_sample(const vpd_config* cfg, const char* checkpoint_path, uint64_t scene_seed,
                      const char* out_prefix) {
  if (!cfg || !checkpoint_path || !out_prefix)
    return set_error(VPD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded(
      [&] { vpd::sample_scene(cfg_of(cfg), checkpoint_path, scene_seed, out_prefix); });
}

vpd_status vpd_schedule_dump(const vpd_config* cfg, const char* out_path) {
  if (!cfg || !out_path) return set_error(VPD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    std::string csv = vpd::schedule_dump_csv(cfg_of(cfg));
    if (std::strcmp(out_path, "-") == 0)
      std::fwrite(csv.data(), 1, csv.size(), stdout);
    else
      vpd::write_text_file(out_path, csv);
  });
}

vpd_status vpd_plot(const char* input_path, const char* out_path) {
  if (!input_path || !out_path) return set_error(VPD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    std::string csv = vpd::plot_csv(input_path);
    if (std::strcmp(out_path, "-") == 0)
      std::fwrite(csv.data(), 1, csv.size(), stdout);
    else
      vpd::write_text_file(out_path, csv);
  });
}

vpd_volume* vpd_volume_load(const char* path) {
  if (!path) {
    set_error(VPD_ERR_INVALID_ARGUMENT, "null path");
    return nullptr;
  }
  try {
    auto* h = new VolumeHandle{vpd::read_volume_file(path)};
    g_last_error.clear();
    return reinterpret_cast<vpd_volume*>(h);
  } catch (const std::exception& e) {
    set_error(VPD_ERR_IO, e.what());
    return nullptr;
  }
}

vpd_status vpd_volume_extents(const vpd_volume* vol, int64_t extents[4]) {
  if (!vol || !extents) return set_error(VPD_ERR_INVALID_ARGUMENT, "null argument");
  const auto& t = reinterpret_cast<const VolumeHandle*>(vol)->tensor;
  for (int i = 0; i < 4; ++i) extents[i] = t.dim(i);
  return VPD_OK;
}

const float* vpd_volume_data(const vpd_volume* vol) {
  if (!vol) {
    set_error(VPD_ERR_INVALID_ARGUMENT, "null volume");
    return nullptr;
  }
  return reinterpret_cast<const VolumeHandle*>(vol)->tensor.data().data();
}

void vpd_volume_destroy(vpd_volume* vol) { delete reinterpret_cast<VolumeHandle*>(vol); }

}  // extern "C"
