/* C API for the VPD library: opaque handles + status codes. The CLI and
 *external callers link against this surface only. */
#ifndef VPD_C_H
#define VPD_C_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define VPD_API __declspec(dllexport)
#else
#define VPD_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum vpd_status {
  VPD_OK = 0,
  VPD_ERR_INVALID_ARGUMENT = 1,
  VPD_ERR_IO = 2,
  VPD_ERR_RUNTIME = 3
} vpd_status;

VPD_API const char* vpd_version(void);
/* Message for the most recent failing call on this thread ("" if none). */
VPD_API const char* vpd_last_error(void);

/* ---- run configuration ---- */
typedef struct vpd_config vpd_config;

VPD_API vpd_config* vpd_config_create(void);       /* library defaults */
VPD_API vpd_config* vpd_config_create_desk(void);  /* desk-scale training preset */
VPD_API void vpd_config_destroy(vpd_config* cfg);
/* Structured-text (JSON) config file; overrides the current values. */
VPD_API vpd_status vpd_config_load_file(vpd_config* cfg, const char* path);
/* Set one field by dotted key, e.g. "optim.lr", "scene.num_planes",
 * "use_of". The value is parsed as JSON, falling back to a string. */
VPD_API vpd_status vpd_config_set(vpd_config* cfg, const char* key, const char* value);
/* Serialize the full config as JSON into buf (cap bytes incl. NUL). */
VPD_API vpd_status vpd_config_dump(const vpd_config* cfg, char* buf, size_t cap);

/* ---- pipeline operations ---- */
/* Generate `count` scenes + manifest under out_dir; writes the manifest path
 * into manifest_path_buf when given. */
VPD_API vpd_status vpd_synth(const vpd_config* cfg, int64_t count, uint64_t seed_base,
                             const char* out_dir, char* manifest_path_buf, size_t cap);
VPD_API vpd_status vpd_train(const vpd_config* cfg, const char* manifest_path,
                             const char* out_dir, char* checkpoint_path_buf, size_t cap);
VPD_API vpd_status vpd_evaluate(const vpd_config* cfg, const char* checkpoint_path,
                                const char* manifest_path, const char* report_path);
VPD_API vpd_status vpd_ablate(const vpd_config* cfg, const char* checkpoint_path,
                              const char* manifest_path, const char* out_dir);
VPD_API vpd_status vpd_sample(const vpd_config* cfg, const char* checkpoint_path,
                              uint64_t scene_seed, const char* out_prefix);
/* (t, alpha_t, alpha_bar_t) rows as comma-separated text; "-" for stdout. */
VPD_API vpd_status vpd_schedule_dump(const vpd_config* cfg, const char* out_path);
/* Re-emit losses.csv / report.json artifacts as comma-separated curves. */
VPD_API vpd_status vpd_plot(const char* input_path, const char* out_path);

/* ---- volume file access ---- */
typedef struct vpd_volume vpd_volume;

VPD_API vpd_volume* vpd_volume_load(const char* path);
VPD_API vpd_status vpd_volume_extents(const vpd_volume* vol, int64_t extents[4]);
VPD_API const float* vpd_volume_data(const vpd_volume* vol);
VPD_API void vpd_volume_destroy(vpd_volume* vol);

#ifdef __cplusplus
}
#endif

#endif /* VPD_C_H */
