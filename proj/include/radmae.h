#ifndef RADMAE_H
#define RADMAE_H

/* C interface to the radmae library.
 *
 * Every call returns an rmae_status. On failure rmae_last_error() describes
 * the most recent error raised on the calling thread. Strings returned through
 * `char**` out-parameters are owned by the caller and released with
 * rmae_free_string(). Workflow calls take and return JSON documents; the
 * accepted keys are listed in docs/cli.md. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define RMAE_API __declspec(dllexport)
#else
#define RMAE_API __attribute__((visibility("default")))
#endif

typedef enum rmae_status {
  RMAE_OK = 0,
  RMAE_INVALID_ARGUMENT = 1,
  RMAE_IO = 2,
  RMAE_PARSE = 3,
  RMAE_NUMERIC = 4,
  RMAE_NOT_FOUND = 5,
  RMAE_INTERNAL = 6
} rmae_status;

typedef struct rmae_model rmae_model;

RMAE_API const char* rmae_version(void);
RMAE_API const char* rmae_status_name(rmae_status status);
RMAE_API const char* rmae_last_error(void);
RMAE_API void rmae_free_string(char* s);

/* Progress lines (one JSON object each) emitted by long-running workflows. */
typedef void (*rmae_log_fn)(const char* line, void* user);
RMAE_API void rmae_set_log(rmae_log_fn fn, void* user);

/* Workflows. `config_json` is the merged run configuration; `result_json`
 * receives a summary of what was written. */
RMAE_API rmae_status rmae_synth(const char* config_json, char** result_json);
RMAE_API rmae_status rmae_pretrain(const char* config_json, char** result_json);
RMAE_API rmae_status rmae_finetune(const char* config_json, char** result_json);
RMAE_API rmae_status rmae_sweep(const char* config_json, char** result_json);
RMAE_API rmae_status rmae_errormap(const char* config_json, char** result_json);
RMAE_API rmae_status rmae_evaluate(const char* config_json, char** result_json);

/* Lists the builtin downstream tasks. */
RMAE_API rmae_status rmae_tasks(char** result_json);

/* Multi-head inference. A loaded model is immutable and safe to share across
 * threads. `options_json` may be NULL or hold {"detections": path,
 * "min_score": x, "include_whole_image": bool}. */
RMAE_API rmae_status rmae_model_load(const char* checkpoint, const char* options_json, rmae_model** model);
RMAE_API void rmae_model_free(rmae_model* model);
RMAE_API rmae_status rmae_model_info(const rmae_model* model, char** info_json);

/* Runs region proposal, crop classification and aggregation on an encoded
 * PNG or JPEG. `options_json` may be NULL or hold {"image_id": s,
 * "threshold": x, "trigger": "subtype-argmax" | "abnormality"}.
 * Undecodable bytes yield RMAE_PARSE. */
RMAE_API rmae_status rmae_model_predict(const rmae_model* model, const uint8_t* bytes, size_t size,
                                        const char* options_json, char** prediction_json);

#ifdef __cplusplus
}
#endif

#endif
