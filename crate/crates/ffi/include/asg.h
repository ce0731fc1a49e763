#ifndef ASG_H
#define ASG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum AsgStatus {
  ASG_STATUS_OK = 0,
  ASG_STATUS_NULL_POINTER = 1,
  ASG_STATUS_INVALID_ARGUMENT = 2,
  ASG_STATUS_CONFIG = 3,
  ASG_STATUS_FORMAT = 4,
  ASG_STATUS_IO = 5,
  ASG_STATUS_RUNTIME = 6,
  ASG_STATUS_PANIC = 7,
} AsgStatus;

// Domain selector for [`asg_dataset_generate`].
typedef enum AsgDomain {
  ASG_DOMAIN_BASE = 0,
  ASG_DOMAIN_SYNTHETIC_SOURCE = 1,
  ASG_DOMAIN_REAL_TARGET = 2,
} AsgDomain;

// Rendered image set.
typedef struct AsgDataset AsgDataset;

// Dual-head model: live backbone, new head, frozen reference.
typedef struct AsgModel AsgModel;

// Recurrent learning-rate policy.
typedef struct AsgPolicy AsgPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next call into this library on the same thread.
const char *asg_last_error(void);

// Library version as a static NUL-terminated string.
const char *asg_version(void);

// Side length of the square single-channel images.
uintptr_t asg_image_size(void);

// Randomly initialized model of a registered architecture.
//
// # Safety
// `arch` must be a NUL-terminated string; `out` must be writable.
enum AsgStatus asg_model_new(const char *arch, uint64_t seed, struct AsgModel **out);

// Model around a saved reference classifier (as written by `asg pretrain`)
// with a fresh new head.
//
// # Safety
// `arch` and `path` must be NUL-terminated strings; `out` must be writable.
enum AsgStatus asg_model_from_reference(const char *arch,
                                        const char *path,
                                        uint64_t new_head_seed,
                                        struct AsgModel **out);

// # Safety
// `model` must be NULL or a handle from this library, not used afterwards.
void asg_model_free(struct AsgModel *model);

// Number of optimization coordinates.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum AsgStatus asg_model_num_coordinates(const struct AsgModel *model, uintptr_t *out);

// Number of new-head logits per image (classes × output positions).
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum AsgStatus asg_model_new_logits_per_image(const struct AsgModel *model, uintptr_t *out);

// New-head logits for `n` images of `asg_image_size()²` pixels each.
//
// # Safety
// `images` must hold `n · size²` floats and `out` `out_len` floats.
enum AsgStatus asg_model_forward_new(const struct AsgModel *model,
                                     const float *images,
                                     uintptr_t n,
                                     float *out,
                                     uintptr_t out_len);

// Old-task logits through the live backbone (`n × old_classes`).
//
// # Safety
// As [`asg_model_forward_new`].
enum AsgStatus asg_model_forward_old(const struct AsgModel *model,
                                     const float *images,
                                     uintptr_t n,
                                     float *out,
                                     uintptr_t out_len);

// Save every named model tensor as an ASG1 checkpoint.
//
// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum AsgStatus asg_model_save(const struct AsgModel *model, const char *path);

// Render samples `start .. start + count` of a domain.
//
// # Safety
// `out` must be writable.
enum AsgStatus asg_dataset_generate(enum AsgDomain domain,
                                    uint64_t seed,
                                    uint64_t start,
                                    uint64_t count,
                                    struct AsgDataset **out);

// # Safety
// `data` must be NULL or a handle from this library, not used afterwards.
void asg_dataset_free(struct AsgDataset *data);

// # Safety
// `data` must be a live handle; `out` must be writable.
enum AsgStatus asg_dataset_len(const struct AsgDataset *data, uintptr_t *out);

// Copy image `index` (`size²` floats) and its class label.
//
// # Safety
// `pixels` must hold `pixels_len` floats; `class_out` must be writable.
enum AsgStatus asg_dataset_sample(const struct AsgDataset *data,
                                  uintptr_t index,
                                  float *pixels,
                                  uintptr_t pixels_len,
                                  uint32_t *class_out);

// Load a policy saved by an `l2o_train` run.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AsgStatus asg_policy_load(const char *path, uint64_t seed, struct AsgPolicy **out);

// # Safety
// `policy` must be NULL or a handle from this library, not used afterwards.
void asg_policy_free(struct AsgPolicy *policy);

// Observation length and number of controlled coordinates.
//
// # Safety
// `policy` must be a live handle; outputs must be writable.
enum AsgStatus asg_policy_dims(const struct AsgPolicy *policy,
                               uintptr_t *obs_dim,
                               uintptr_t *coordinates);

// Zero the recurrent state.
//
// # Safety
// `policy` must be a live handle.
enum AsgStatus asg_policy_reset(struct AsgPolicy *policy);

// One frozen policy step: writes one action index in 0..categories per
// coordinate. `greedy` != 0 takes the argmax, otherwise samples.
//
// # Safety
// `obs` must hold `obs_len` floats and `actions` `actions_len` entries.
enum AsgStatus asg_policy_act(struct AsgPolicy *policy,
                              const float *obs,
                              uintptr_t obs_len,
                              int32_t greedy,
                              uint32_t *actions,
                              uintptr_t actions_len);

// Run the experiment described by a config file, writing its logs.
//
// # Safety
// `config_path` must be a NUL-terminated string.
enum AsgStatus asg_run_config(const char *config_path);

// Run the invariant checks; `failed` receives the number of failures.
//
// # Safety
// `failed` must be writable.
enum AsgStatus asg_verify(uint64_t seed, uintptr_t *failed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASG_H */
