#ifndef FACETEX_H
#define FACETEX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum FacetexStatus {
  FACETEX_STATUS_OK = 0,
  FACETEX_STATUS_NULL_ARGUMENT = 1,
  FACETEX_STATUS_INVALID_ARGUMENT = 2,
  FACETEX_STATUS_DIMENSION = 3,
  FACETEX_STATUS_NON_FINITE = 4,
  FACETEX_STATUS_IO = 5,
  FACETEX_STATUS_LOAD = 6,
  FACETEX_STATUS_BACKEND_UNAVAILABLE = 7,
  FACETEX_STATUS_INVALID_PROMPT = 8,
  FACETEX_STATUS_DEGENERATE_PROMPT = 9,
  FACETEX_STATUS_ABORTED = 10,
  FACETEX_STATUS_BUFFER_TOO_SMALL = 11,
  FACETEX_STATUS_INTERNAL = 12,
} FacetexStatus;

/**
 * Opaque image/text embedding backend.
 */
typedef struct FacetexBackend FacetexBackend;

/**
 * Opaque trained texture generator.
 */
typedef struct FacetexGenerator FacetexGenerator;

/**
 * Opaque morphable face model.
 */
typedef struct FacetexModel FacetexModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *facetex_last_error_message(void);

void facetex_clear_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *facetex_version(void);

/**
 * Fixed parameter sizes: shape, expression, pose, camera.
 */
enum FacetexStatus facetex_param_dims(size_t *shape,
                                      size_t *expression,
                                      size_t *pose,
                                      size_t *camera);

/**
 * Procedural toy head with about `n_vertices` vertices.
 */
enum FacetexStatus facetex_model_toy(uint64_t seed, size_t n_vertices, struct FacetexModel **out);

/**
 * Loads a model container written by `facetex_model_save` or the CLI.
 */
enum FacetexStatus facetex_model_load(const char *path, struct FacetexModel **out);

enum FacetexStatus facetex_model_save(const struct FacetexModel *model, const char *path);

void facetex_model_free(struct FacetexModel *model);

enum FacetexStatus facetex_model_num_vertices(const struct FacetexModel *model, size_t *out);

enum FacetexStatus facetex_model_num_faces(const struct FacetexModel *model, size_t *out);

/**
 * Deformed vertices, `3 * num_vertices` doubles row-major. `shape`,
 * `expression` and `pose` must hold the sizes from `facetex_param_dims`.
 */
enum FacetexStatus facetex_model_decode(const struct FacetexModel *model,
                                        const double *shape,
                                        const double *expression,
                                        const double *pose,
                                        double *out_vertices,
                                        size_t capacity);

/**
 * Generator from a training checkpoint.
 */
enum FacetexStatus facetex_generator_load(const char *path, struct FacetexGenerator **out);

void facetex_generator_free(struct FacetexGenerator *gen);

/**
 * Texture side length R; textures are `R * R * 3` doubles.
 */
enum FacetexStatus facetex_generator_resolution(const struct FacetexGenerator *gen, size_t *out);

/**
 * Texture for the code drawn from `seed`, RGB in [0,1], row-major.
 */
enum FacetexStatus facetex_generator_sample(const struct FacetexGenerator *gen,
                                            uint64_t seed,
                                            double *out_rgb,
                                            size_t capacity);

/**
 * Offline stub embedding backend.
 */
enum FacetexStatus facetex_backend_stub(uint64_t seed, size_t dim, struct FacetexBackend **out);

void facetex_backend_free(struct FacetexBackend *backend);

enum FacetexStatus facetex_backend_dim(const struct FacetexBackend *backend, size_t *out);

enum FacetexStatus facetex_embed_text(const struct FacetexBackend *backend,
                                      const char *text_in,
                                      double *out,
                                      size_t capacity);

/**
 * Image embedding of an `height * width * 3` RGB buffer in [0,1].
 */
enum FacetexStatus facetex_embed_image(const struct FacetexBackend *backend,
                                       const double *rgb,
                                       size_t height,
                                       size_t width,
                                       double *out,
                                       size_t capacity);

/**
 * Cosine similarity between one image and a text.
 */
enum FacetexStatus facetex_clip_score(const struct FacetexBackend *backend,
                                      const double *rgb,
                                      size_t height,
                                      size_t width,
                                      const char *text_in,
                                      double *out);

/**
 * `1 - cos(di, dt)` over `n`-vectors, 1 when `di` is near zero.
 */
enum FacetexStatus facetex_directional_loss(const double *di,
                                            const double *dt,
                                            size_t n,
                                            double *out);

/**
 * Fréchet distance between two row-major feature matrices of width `d`.
 */
enum FacetexStatus facetex_fid(const double *a,
                               size_t na,
                               const double *b,
                               size_t nb,
                               size_t d,
                               double *out);

/**
 * Unbiased cubic-kernel MMD² between two feature matrices.
 */
enum FacetexStatus facetex_kid(const double *a,
                               size_t na,
                               const double *b,
                               size_t nb,
                               size_t d,
                               double *out);

/**
 * Per-frame importance weights in [0,1]. `poses` is `frames * 6`,
 * `expressions` is `frames * expr_dim`, both row-major.
 */
enum FacetexStatus facetex_importance_weights(const double *poses,
                                              const double *expressions,
                                              size_t frames,
                                              size_t expr_dim,
                                              const double *neutral_pose,
                                              const double *neutral_expression,
                                              double *out,
                                              size_t capacity);

/**
 * Runs a command-line invocation in-process (`argv[0]` is the program
 * name) and returns its exit code: 0 success, 2 validation, 3 abort.
 */
int32_t facetex_run_cli(size_t argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FACETEX_H */
