#ifndef BLOCKPRUNE_H
#define BLOCKPRUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum BpStatus {
  BP_STATUS_OK = 0,
  BP_STATUS_NULL_POINTER = 1,
  BP_STATUS_INVALID_UTF8 = 2,
  BP_STATUS_BUFFER_TOO_SMALL = 3,
  BP_STATUS_CONFIG = 10,
  BP_STATUS_PARSE = 11,
  BP_STATUS_SPEC = 12,
  BP_STATUS_BUILD = 13,
  BP_STATUS_VALIDITY = 14,
  BP_STATUS_RANGE = 15,
  BP_STATUS_BUDGET = 16,
  BP_STATUS_FORMAT = 17,
  BP_STATUS_CORRUPT_RECORD = 18,
  BP_STATUS_DATASET = 19,
  BP_STATUS_CHECKPOINT = 20,
  BP_STATUS_DIMENSION = 21,
  BP_STATUS_CONTRACT = 22,
  BP_STATUS_DIVERGED = 23,
  BP_STATUS_IO = 24,
  BP_STATUS_PANIC = 99,
} BpStatus;

/*
 Opaque dataset handle.
 */
typedef struct BpDataset BpDataset;

/*
 Opaque network handle.
 */
typedef struct BpNetwork BpNetwork;

typedef struct BpLatency {
  size_t runs;
  double mean_us;
  double median_us;
  double p95_us;
  double min_us;
  double max_us;
} BpLatency;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or an empty string. The
 pointer stays valid until the next call on this thread.
 */
const char *bp_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *bp_version(void);

/*
 Builds a named preset (`resnet20`, `resnet56`, `desk`, `mini`) with
 seeded initialization.

 # Safety
 `name` must be a NUL-terminated string; `out` must be writable.
 */
enum BpStatus bp_network_new(const char *name, uint64_t seed, struct BpNetwork **out);

/*
 Builds a network from a text spec file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum BpStatus bp_network_from_spec_file(const char *path, uint64_t seed, struct BpNetwork **out);

/*
 # Safety
 `net` must be NULL or a handle from this library not yet freed.
 */
void bp_network_free(struct BpNetwork *net);

/*
 # Safety
 `net` must be a live handle; `path` a NUL-terminated string.
 */
enum BpStatus bp_network_load_checkpoint(struct BpNetwork *net, const char *path);

/*
 # Safety
 `net` must be a live handle; `path` a NUL-terminated string.
 */
enum BpStatus bp_network_save_checkpoint(const struct BpNetwork *net, const char *path);

/*
 # Safety
 `net` must be a live handle; `params` and `flops` must be writable.
 */
enum BpStatus bp_network_cost(const struct BpNetwork *net, uint64_t *params, uint64_t *flops);

/*
 Writes the per-sample input shape `[C, H, W]` and the class count.

 # Safety
 `net` must be a live handle; `shape` must hold 3 values; `classes` must be
 writable.
 */
enum BpStatus bp_network_shape(const struct BpNetwork *net, size_t *shape, size_t *classes);

/*
 Copies the removable block indices into `indices` (capacity `cap`) and
 their count into `len`. With too small a buffer, `len` still receives the
 required count and `BufferTooSmall` is returned.

 # Safety
 `net` must be a live handle; `indices` must hold `cap` values; `len` must
 be writable.
 */
enum BpStatus bp_network_valid_blocks(const struct BpNetwork *net,
                                      size_t *indices,
                                      size_t cap,
                                      size_t *len);

/*
 Returns a new network with the listed blocks removed; `net` is untouched.

 # Safety
 `net` must be a live handle; `indices` must hold `n` values (or be NULL
 when `n` is 0); `out` must be writable.
 */
enum BpStatus bp_network_prune(const struct BpNetwork *net,
                               const size_t *indices,
                               size_t n,
                               struct BpNetwork **out);

/*
 Eval-mode forward pass over `batch` images laid out `[N, C, H, W]`;
 writes `N × classes` logits.

 # Safety
 `input` must hold `batch·C·H·W` floats; `logits` must hold `cap` floats.
 */
enum BpStatus bp_network_logits(const struct BpNetwork *net,
                                const float *input,
                                size_t batch,
                                float *logits,
                                size_t cap);

/*
 # Safety
 `net` must be a live handle; `report` must be writable.
 */
enum BpStatus bp_measure_latency(const struct BpNetwork *net,
                                 size_t runs,
                                 size_t warmup,
                                 struct BpLatency *report);

/*
 Seeded synthetic dataset of `classes × per_class` images of shape
 `[c, h, w]`.

 # Safety
 `out` must be writable.
 */
enum BpStatus bp_dataset_synth(size_t classes,
                               size_t per_class,
                               size_t c,
                               size_t h,
                               size_t w,
                               uint64_t seed,
                               struct BpDataset **out);

/*
 Loads one CIFAR-10 binary batch file (pixels scaled to `[0, 1]`).

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum BpStatus bp_dataset_load_cifar10(const char *path, struct BpDataset **out);

/*
 # Safety
 `ds` must be a live handle; `len` must be writable.
 */
enum BpStatus bp_dataset_len(const struct BpDataset *ds, size_t *len);

/*
 # Safety
 `ds` must be NULL or a handle from this library not yet freed.
 */
void bp_dataset_free(struct BpDataset *ds);

/*
 # Safety
 `net` and `ds` must be live handles; `accuracy` must be writable.
 */
enum BpStatus bp_evaluate_accuracy(const struct BpNetwork *net,
                                   const struct BpDataset *ds,
                                   double *accuracy);

/*
 Direct-removal importance: for every valid block (in index order) writes
 its index and the validation accuracy with that block removed.

 # Safety
 `indices` and `accuracies` must each hold `cap` values; `len` and
 `base_accuracy` must be writable.
 */
enum BpStatus bp_importance_direct(const struct BpNetwork *net,
                                   const struct BpDataset *ds,
                                   size_t *indices,
                                   double *accuracies,
                                   size_t cap,
                                   size_t *len,
                                   double *base_accuracy);

/*
 Greedy pruning of `k` blocks without fine-tuning. Writes the removal
 order and the accuracy after each step, and the pruned network to `out`.

 # Safety
 `removed` and `accuracies` must hold `k` values; `out` must be writable.
 */
enum BpStatus bp_greedy_prune(const struct BpNetwork *net,
                              const struct BpDataset *ds,
                              size_t k,
                              size_t *removed,
                              double *accuracies,
                              struct BpNetwork **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLOCKPRUNE_H */
