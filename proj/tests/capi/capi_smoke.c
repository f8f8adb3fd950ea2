/* Drives the shared library through its C header only. */
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "radmae.h"

static int failures = 0;

#define EXPECT(cond)                                              \
  do {                                                            \
    if (!(cond)) {                                                \
      fprintf(stderr, "%s:%d: expected %s\n", __FILE__, __LINE__, #cond); \
      ++failures;                                                 \
    }                                                             \
  } while (0)

static int lines = 0;
static void count_line(const char* line, void* user) {
  (void)line;
  ++*(int*)user;
}

int main(int argc, char** argv) {
  const char* dir = argc > 1 ? argv[1] : "capi_smoke_out";
  char config[1024];
  char* out = NULL;
  rmae_model* model = NULL;

  EXPECT(rmae_version() != NULL && strlen(rmae_version()) > 0);
  EXPECT(strcmp(rmae_status_name(RMAE_PARSE), "parse") == 0);
  EXPECT(strcmp(rmae_status_name(RMAE_NOT_FOUND), "not_found") == 0);

  EXPECT(rmae_finetune("{not json", &out) == RMAE_PARSE);
  EXPECT(out == NULL);
  EXPECT(rmae_finetune("{\"task\": \"bogus\"}", &out) == RMAE_NOT_FOUND);
  EXPECT(strstr(rmae_last_error(), "unknown task") != NULL);
  EXPECT(rmae_finetune(NULL, &out) == RMAE_INVALID_ARGUMENT);

  EXPECT(rmae_tasks(&out) == RMAE_OK);
  EXPECT(out != NULL && strstr(out, "abnormality") != NULL);
  rmae_free_string(out);
  out = NULL;

  rmae_set_log(count_line, &lines);
  snprintf(config, sizeof config, "{\"out\": \"%s\", \"corpus\": {\"n_normal\": 3, \"n_abnormal\": 3, \"size\": 32}}", dir);
  EXPECT(rmae_synth(config, &out) == RMAE_OK);
  EXPECT(out != NULL && strstr(out, "manifest") != NULL);
  rmae_free_string(out);
  out = NULL;
  rmae_set_log(NULL, NULL);

  EXPECT(rmae_model_load("/nonexistent/checkpoint", NULL, &model) != RMAE_OK);
  EXPECT(model == NULL);
  EXPECT(rmae_model_predict(NULL, (const uint8_t*)"x", 1, NULL, &out) == RMAE_INVALID_ARGUMENT);
  rmae_model_free(NULL);

  if (failures == 0) printf("capi smoke: ok\n");
  return failures == 0 ? EXIT_SUCCESS : EXIT_FAILURE;
}
