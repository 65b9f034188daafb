#ifndef TTE_H
#define TTE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum TteStatus {
  TTE_STATUS_OK = 0,
  /*
   A pointer was null, a string was not UTF-8, or a size was zero.
   */
  TTE_STATUS_INVALID_ARGUMENT = 1,
  /*
   Input or configuration rejected by validation.
   */
  TTE_STATUS_VALIDATION = 2,
  /*
   A file could not be read or written.
   */
  TTE_STATUS_IO = 3,
  /*
   Any other failure while running.
   */
  TTE_STATUS_RUNTIME = 4,
  /*
   The library panicked; the handle involved should be freed.
   */
  TTE_STATUS_PANIC = 5,
} TteStatus;

/*
 A trained recognizer with its feature settings and optional language model.
 */
typedef struct TteRecognizer TteRecognizer;

/*
 A trained text-to-encoder model.
 */
typedef struct TteTextEncoder TteTextEncoder;

/*
 Beam search settings; obtain defaults from [`tte_decode_options_default`].
 */
typedef struct TteDecodeOptions {
  size_t beam_size;
  /*
   Shortest output as a fraction of the encoder length.
   */
  double min_ratio;
  /*
   Longest output as a fraction of the encoder length.
   */
  double max_ratio;
  /*
   Language model weight; ignored without a language model.
   */
  double lm_weight;
} TteDecodeOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on this thread.
 */
const char *tte_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *tte_version(void);

struct TteDecodeOptions tte_decode_options_default(void);

/*
 Loads a recognizer checkpoint. `config_path` may be null; otherwise it
 names a run configuration whose feature settings are used (a run
 directory's `config.json` works). `lm_path` may be null.

 # Safety
 String arguments are null or NUL-terminated; `out` is a valid pointer.
 */
enum TteStatus tte_recognizer_load(const char *model_path,
                                   const char *config_path,
                                   const char *lm_path,
                                   struct TteRecognizer **out);

/*
 # Safety
 `rec` is null or was returned by [`tte_recognizer_load`] and not freed.
 */
void tte_recognizer_free(struct TteRecognizer *rec);

/*
 Transcribes mono samples in [-1, 1]. The text is returned through
 `out_text` and released with [`tte_string_free`].

 # Safety
 `rec` is a live handle, `samples` points to `len` floats, `options` is
 null or valid, and `out_text` is a valid pointer.
 */
enum TteStatus tte_recognizer_transcribe(const struct TteRecognizer *rec,
                                         const float *samples,
                                         size_t len,
                                         uint32_t sample_rate_hz,
                                         const struct TteDecodeOptions *options,
                                         char **out_text);

/*
 Loads a text-to-encoder checkpoint.

 # Safety
 `model_path` is null or NUL-terminated; `out` is a valid pointer.
 */
enum TteStatus tte_text_encoder_load(const char *model_path, struct TteTextEncoder **out);

/*
 # Safety
 `enc` is null or was returned by [`tte_text_encoder_load`] and not freed.
 */
void tte_text_encoder_free(struct TteTextEncoder *enc);

/*
 Generates encoder states for `text` with a budget of `frames_per_char`
 frames per character. The row-major `rows × cols` buffer is returned
 through `out_data` and released with [`tte_floats_free`];
 `out_truncated` is set to 1 when the budget ran out before the stop
 token fired.

 # Safety
 `enc` is a live handle, `text` is NUL-terminated and every out-pointer
 is valid.
 */
enum TteStatus tte_text_encoder_generate(const struct TteTextEncoder *enc,
                                         const char *text_utf8,
                                         double frames_per_char,
                                         uint64_t seed,
                                         float **out_data,
                                         size_t *out_rows,
                                         size_t *out_cols,
                                         int32_t *out_truncated);

/*
 # Safety
 `data` is null or was returned by [`tte_text_encoder_generate`] with
 `rows * cols == len`, and not freed.
 */
void tte_floats_free(float *data, size_t len);

/*
 Character and word error rates of `hypothesis` against `reference`.

 # Safety
 Strings are NUL-terminated; out-pointers are valid.
 */
enum TteStatus tte_error_rates(const char *reference,
                               const char *hypothesis,
                               double *out_cer,
                               double *out_wer);

/*
 Runs the full pipeline. `config_path` may be null for the defaults and
 `run_dir` may be null for the configured run directory. The report is
 returned as JSON through `out_report` (release with
 [`tte_string_free`]).

 # Safety
 String arguments are null or NUL-terminated; `out_report` is valid.
 */
enum TteStatus tte_run_pipeline(const char *config_path, const char *run_dir, char **out_report);

/*
 # Safety
 `s` is null or a string returned by this library and not freed.
 */
void tte_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TTE_H */
