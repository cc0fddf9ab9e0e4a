#ifndef EVOLOSS_H
#define EVOLOSS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Number of coordinates in a weight vector.
#define EVL_NUM_WEIGHTS 16

typedef enum EvlStatus {
  EVL_STATUS_OK = 0,
  EVL_STATUS_NULL_POINTER = 1,
  EVL_STATUS_INVALID_ARGUMENT = 2,
  EVL_STATUS_INVALID_WEIGHTS = 3,
  EVL_STATUS_FORMAT = 4,
  EVL_STATUS_IO = 5,
  EVL_STATUS_RUNTIME = 6,
  EVL_STATUS_BUFFER_TOO_SMALL = 7,
  EVL_STATUS_PANIC = 8,
} EvlStatus;

typedef struct EvlDataset EvlDataset;

typedef struct EvlHistory EvlHistory;

typedef struct EvlWeights EvlWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message (empty after a success)
// into `buf`. Returns the size needed including the terminator; nothing is
// written when `len` is too small.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t evl_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *evl_version(void);

// All-zero weight vector.
struct EvlWeights *evl_weights_zeros(void);

// Weight vector with coordinates drawn uniformly from `[0, 1]`.
struct EvlWeights *evl_weights_random(uint64_t seed);

// Parses canonical `KEY = value` text.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum EvlStatus evl_weights_parse(const char *text, struct EvlWeights **out);

// Canonical text of `w`; see [`evl_last_error`] for the buffer protocol.
//
// # Safety
// `w` must be a live handle; `buf` null or valid for `len` bytes.
enum EvlStatus evl_weights_to_string(const struct EvlWeights *w,
                                     char *buf,
                                     size_t len,
                                     size_t *needed);

// Copies the sixteen coordinates, in canonical order, into `values`.
//
// # Safety
// `w` must be a live handle; `values` valid for `EVL_NUM_WEIGHTS` doubles.
enum EvlStatus evl_weights_values(const struct EvlWeights *w, double *values);

// # Safety
// `w` must be a live handle; `key` NUL-terminated; `out` writable.
enum EvlStatus evl_weights_get(const struct EvlWeights *w, const char *key, double *out);

// Sets one coordinate. The value is stored as given; use
// [`evl_weights_validate`] to check the box constraint.
//
// # Safety
// `w` must be a live handle; `key` NUL-terminated.
enum EvlStatus evl_weights_set(struct EvlWeights *w, const char *key, double value);

// `EVL_STATUS_OK` when every coordinate is finite and in `[0, 1]`.
//
// # Safety
// `w` must be a live handle.
enum EvlStatus evl_weights_validate(const struct EvlWeights *w);

// # Safety
// `w` must be null or a handle not yet freed.
void evl_weights_free(struct EvlWeights *w);

// Weighted total `Σ w_k · components_k` over the sixteen components.
//
// # Safety
// `w` must be a live handle; `components` valid for `EVL_NUM_WEIGHTS`
// doubles; `out` writable.
enum EvlStatus evl_total_loss(const struct EvlWeights *w, const double *components, double *out);

// k-means with k-means++ seeding on `n × d` row-major `points`.
//
// # Safety
// `points` valid for `n·d` doubles; `assignments` for `n` entries; `wcss`
// writable or null.
enum EvlStatus evl_kmeans(const double *points,
                          size_t n,
                          size_t d,
                          size_t k,
                          uint64_t seed,
                          size_t restarts,
                          size_t *assignments,
                          double *wcss);

// Normalized mutual information of two labelings of length `n`.
//
// # Safety
// `a` and `b` valid for `n` entries; `out` writable.
enum EvlStatus evl_nmi(const size_t *a, const size_t *b, size_t n, double *out);

// Adjusted Rand index of two labelings of length `n`.
//
// # Safety
// `a` and `b` valid for `n` entries; `out` writable.
enum EvlStatus evl_ari(const size_t *a, const size_t *b, size_t n, double *out);

// Generates a synthetic dataset.
//
// # Safety
// `out` must be writable.
enum EvlStatus evl_dataset_generate(size_t n_clips,
                                    size_t classes,
                                    size_t frames,
                                    size_t height,
                                    size_t width,
                                    size_t audio_len,
                                    uint64_t seed,
                                    struct EvlDataset **out);

// # Safety
// `ds` must be a live handle.
size_t evl_dataset_len(const struct EvlDataset *ds);

// Class of clip `index`.
//
// # Safety
// `ds` must be a live handle; `out` writable.
enum EvlStatus evl_dataset_class(const struct EvlDataset *ds, size_t index, size_t *out);

// Writes the dataset in the binary exchange format.
//
// # Safety
// `ds` must be a live handle; `path` NUL-terminated.
enum EvlStatus evl_dataset_write(const struct EvlDataset *ds, const char *path);

// Reads a dataset written by [`evl_dataset_write`].
//
// # Safety
// `path` NUL-terminated; `out` writable.
enum EvlStatus evl_dataset_read(const char *path, struct EvlDataset **out);

// # Safety
// `ds` must be null or a handle not yet freed.
void evl_dataset_free(struct EvlDataset *ds);

// Trains under `w` with the settings of a TOML run configuration (null or
// empty for defaults) and returns the clustering fitness and ARI.
//
// # Safety
// `w` must be a live handle; `config_toml` null or NUL-terminated;
// `fitness` writable; `ari` writable or null.
enum EvlStatus evl_evaluate_fitness(const struct EvlWeights *w,
                                    const char *config_toml,
                                    double *fitness,
                                    double *ari);

// Runs the evolutionary search with the stub fitness `f(w) = w[key]`.
//
// # Safety
// `key` NUL-terminated; `out` writable.
enum EvlStatus evl_evolve_stub(size_t population_size,
                               size_t rounds,
                               double top_fraction,
                               uint64_t seed,
                               size_t workers,
                               const char *key,
                               struct EvlHistory **out);

// Number of evaluated individuals.
//
// # Safety
// `h` must be a live handle.
size_t evl_history_len(const struct EvlHistory *h);

// Number of best-so-far entries (rounds + 1).
//
// # Safety
// `h` must be a live handle.
size_t evl_history_rounds(const struct EvlHistory *h);

// Best-so-far fitness after round `round` (0 is the initial population).
//
// # Safety
// `h` must be a live handle; `out` writable.
enum EvlStatus evl_history_best_so_far(const struct EvlHistory *h, size_t round, double *out);

// Weights of the fittest individual, as a new handle.
//
// # Safety
// `h` must be a live handle; `out` writable.
enum EvlStatus evl_history_best_weights(const struct EvlHistory *h, struct EvlWeights **out);

// # Safety
// `h` must be null or a handle not yet freed.
void evl_history_free(struct EvlHistory *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVOLOSS_H */
