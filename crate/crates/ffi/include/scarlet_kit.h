#ifndef SCARLET_KIT_H
#define SCARLET_KIT_H

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

/**
 * Status codes.
 */
typedef enum SkStatus {
  SK_STATUS_OK = 0,
  SK_STATUS_NULL_POINTER = 1,
  SK_STATUS_INVALID_ARGUMENT = 2,
  SK_STATUS_DIMENSION = 3,
  SK_STATUS_CONFIG = 4,
  SK_STATUS_IO = 5,
  SK_STATUS_INTERNAL = 6,
} SkStatus;

/**
 * A search space.
 */
typedef struct SkSpace SkSpace;

/**
 * A weight-sharing supernet.
 */
typedef struct SkSupernet SkSupernet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. Valid until the next
 * failing call on the same thread; never null.
 */
const char *sk_last_error(void);

/**
 * Resolves a preset name (`t1`, `s1`, `s2`) or a space file path.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SkStatus sk_space_resolve(const char *name, struct SkSpace **out);

/**
 * Swaps skip choices for stabilizers (or back) in a new space.
 *
 * # Safety
 * `space` must come from this library; `out` must be writable.
 */
enum SkStatus sk_space_with_stabilizers(const struct SkSpace *space, bool on, struct SkSpace **out);

/**
 * # Safety
 * `space` must come from this library or be null.
 */
void sk_space_free(struct SkSpace *space);

/**
 * # Safety
 * `space` must come from this library; `out` must be writable.
 */
enum SkStatus sk_space_num_layers(const struct SkSpace *space, size_t *out);

/**
 * Multiply-adds and parameter count of one architecture.
 *
 * # Safety
 * `genes` must point to `len` values; `madds` and `params` must be writable.
 */
enum SkStatus sk_arch_cost(const struct SkSpace *space,
                           const size_t *genes,
                           size_t len,
                           uint64_t *madds,
                           uint64_t *params);

/**
 * Kendall tau-b of two equally long score vectors.
 *
 * # Safety
 * `a` and `b` must each point to `len` values; `out` must be writable.
 */
enum SkStatus sk_kendall_tau(const double *a, const double *b, size_t len, double *out);

/**
 * Composes a pointwise convolution `w1` (c1, c0, 1, 1) followed by `w2`
 * (m, c1, k, k) into `out` (m, c0, k, k), all row-major.
 *
 * # Safety
 * `w1` holds `c1*c0` values, `w2` holds `m*c1*k*k` and `out` has room for
 * `m*c0*k*k`.
 */
enum SkStatus sk_fold_pointwise(const float *w1,
                                size_t c1,
                                size_t c0,
                                const float *w2,
                                size_t m,
                                size_t k,
                                float *out);

/**
 * A freshly initialized supernet over `space`.
 *
 * # Safety
 * `space` must come from this library; `out` must be writable.
 */
enum SkStatus sk_supernet_new(const struct SkSpace *space, uint64_t seed, struct SkSupernet **out);

/**
 * Loads `<dir>/<name>.scnt` and `<dir>/<name>.toml`.
 *
 * # Safety
 * `dir` and `name` must be NUL-terminated; `out` must be writable.
 */
enum SkStatus sk_supernet_load(const char *dir, const char *name, struct SkSupernet **out);

/**
 * # Safety
 * `net` must come from this library or be null.
 */
void sk_supernet_free(struct SkSupernet *net);

/**
 * Inference-mode logits of one path for `n` images in NCHW layout.
 * `logits` receives `n * classes` values.
 *
 * # Safety
 * `input` holds `n*channels*size*size` values; `logits` has room for
 * `logits_len` values.
 */
enum SkStatus sk_supernet_infer(const struct SkSupernet *net,
                                const size_t *genes,
                                size_t len,
                                const float *input,
                                size_t n,
                                float *logits,
                                size_t logits_len);

/**
 * One-shot top-1 accuracy of a path on `n` labelled images.
 *
 * # Safety
 * `input` holds `n*channels*size*size` values and `labels` holds `n`.
 */
enum SkStatus sk_supernet_accuracy(const struct SkSupernet *net,
                                   const size_t *genes,
                                   size_t len,
                                   const float *input,
                                   const uint32_t *labels,
                                   size_t n,
                                   float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCARLET_KIT_H */
