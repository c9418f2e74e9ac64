#ifndef DSNET_H
#define DSNET_H

/* Generated by cbindgen from the dsnet-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes returned by every API call.
typedef enum DsnetStatus {
  DSNET_STATUS_OK = 0,
  DSNET_STATUS_INVALID_ARGUMENT = 1,
  DSNET_STATUS_PARSE_ERROR = 2,
  DSNET_STATUS_VALIDATION_ERROR = 3,
  DSNET_STATUS_SHAPE_ERROR = 4,
  DSNET_STATUS_IO_ERROR = 5,
  DSNET_STATUS_RUNTIME_ERROR = 6,
} DsnetStatus;

// Opaque model-configuration handle.
typedef struct DsnetConfig DsnetConfig;

// Opaque built-model handle.
typedef struct DsnetModel DsnetModel;

// Geometry of one convolution layer for receptive-field queries.
typedef struct DsnetConvSpec {
  uint32_t kernel;
  uint32_t dilation;
  uint32_t stride;
  uint32_t in_channels;
  uint32_t out_channels;
} DsnetConvSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread. The pointer
// stays valid until the next failing call on the same thread.
const char *dsnet_last_error(void);

// Release a string returned through a `char**` out-parameter.
//
// # Safety
// `s` must be a pointer previously returned by this library and not yet
// freed; null is accepted and ignored.
void dsnet_string_free(char *s);

// Parse a TOML config document into a new handle.
//
// # Safety
// `toml_text` must be a valid NUL-terminated string and `out` a valid
// pointer to receive the handle.
enum DsnetStatus dsnet_config_parse(const char *toml_text, struct DsnetConfig **out);

// Load a config file from disk.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum DsnetStatus dsnet_config_load(const char *path, struct DsnetConfig **out);

// Construct a named preset: "dsnet", "dsnet_base", or "toy".
//
// # Safety
// `name` must be a valid NUL-terminated string and `out` a valid pointer.
enum DsnetStatus dsnet_config_preset(const char *name,
                                     uint32_t num_classes,
                                     struct DsnetConfig **out);

// Serialize a config handle back to TOML (caller frees via
// `dsnet_string_free`).
//
// # Safety
// `cfg` must be a live handle from this library; `out` a valid pointer.
enum DsnetStatus dsnet_config_to_toml(const struct DsnetConfig *cfg, char **out);

// Release a config handle.
//
// # Safety
// `cfg` must be a handle from this library, not yet freed; null is ignored.
void dsnet_config_free(struct DsnetConfig *cfg);

// Canonicalize dilation-schedule notation (e.g. "d2×6+d3x6" ->
// "d2x6+d3x6"); rejects malformed schedules.
//
// # Safety
// `text` must be a valid NUL-terminated string and `out` a valid pointer.
enum DsnetStatus dsnet_schedule_canonicalize(const char *text, char **out);

// Total learnable parameters of the configured segmentation network.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum DsnetStatus dsnet_param_count(const struct DsnetConfig *cfg, uint64_t *out);

// Multiply-accumulate count of the segmentation network at `h x w` input.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum DsnetStatus dsnet_macs(const struct DsnetConfig *cfg, uint32_t h, uint32_t w, uint64_t *out);

// FLOPs (two per multiply-accumulate) at `h x w` input.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum DsnetStatus dsnet_flops(const struct DsnetConfig *cfg, uint32_t h, uint32_t w, uint64_t *out);

// Per-layer receptive fields of a serial conv chain; writes `len` values.
//
// # Safety
// `chain` must point to `len` readable specs and `rf_out` to `len`
// writable u64 slots.
enum DsnetStatus dsnet_receptive_field(const struct DsnetConvSpec *chain,
                                       uintptr_t len,
                                       uint64_t *rf_out);

// Average fraction of kernel taps landing in padding on a square
// `feature_hw` map.
//
// # Safety
// `spec` and `out` must be valid pointers.
enum DsnetStatus dsnet_padding_fraction(const struct DsnetConvSpec *spec,
                                        uint32_t feature_hw,
                                        double *out);

// Run the dilation guidelines; returns the findings as a JSON document and
// the number of disaster-severity findings.
//
// # Safety
// `cfg` must be a live handle; `json_out` and `disaster_count` valid
// pointers.
enum DsnetStatus dsnet_lint_json(const struct DsnetConfig *cfg,
                                 uint32_t pretrain_size,
                                 char **json_out,
                                 int32_t *disaster_count);

// Receptive-field ledger plus parameter/MAC counts as a JSON document.
//
// # Safety
// `cfg` must be a live handle and `json_out` a valid pointer.
enum DsnetStatus dsnet_analyze_json(const struct DsnetConfig *cfg,
                                    uint32_t h,
                                    uint32_t w,
                                    char **json_out);

// Build a model from a config. `classification` nonzero selects the
// encoder + classification-head layout; zero the segmentation layout.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum DsnetStatus dsnet_model_build(const struct DsnetConfig *cfg,
                                   int32_t classification,
                                   uint64_t seed,
                                   struct DsnetModel **out);

// Load a checkpoint (the embedded config decides the layout).
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum DsnetStatus dsnet_checkpoint_load(const char *path, struct DsnetModel **out);

// Write a checkpoint for the model.
//
// # Safety
// `model` must be a live handle; `path` a valid NUL-terminated string.
enum DsnetStatus dsnet_checkpoint_save(const struct DsnetModel *model, const char *path);

// Number of f64 values `dsnet_model_forward` writes for an `n x 3 x h x w`
// input batch.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum DsnetStatus dsnet_model_output_len(const struct DsnetModel *model,
                                        uint32_t n,
                                        uint32_t h,
                                        uint32_t w,
                                        uintptr_t *out);

// Inference on a row-major NCHW f64 batch (c must be 3). Writes logits:
// `n x classes x h x w` for segmentation, `n x classes` for
// classification.
//
// # Safety
// `input` must point to `n*c*h*w` readable f64 values and `output` to
// `output_len` writable ones (query via `dsnet_model_output_len`).
enum DsnetStatus dsnet_model_forward(const struct DsnetModel *model,
                                     const double *input,
                                     uint32_t n,
                                     uint32_t c,
                                     uint32_t h,
                                     uint32_t w,
                                     double *output,
                                     uintptr_t output_len);

// Release a model handle.
//
// # Safety
// `model` must be a handle from this library, not yet freed; null is
// ignored.
void dsnet_model_free(struct DsnetModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSNET_H */
