#ifndef QKDNET_H
#define QKDNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QkdStatus {
  QKD_STATUS_OK = 0,
  // A scenario ran but an expectation failed, or two traces differ.
  QKD_STATUS_EXPECTATION_FAILED = 1,
  // Invalid topology, scenario or trace input.
  QKD_STATUS_CONFIG_ERROR = 2,
  QKD_STATUS_NULL_ARGUMENT = 3,
  QKD_STATUS_INVALID_UTF8 = 4,
  QKD_STATUS_NOT_FOUND = 5,
  QKD_STATUS_LENGTH_MISMATCH = 6,
  QKD_STATUS_PANIC = 7,
} QkdStatus;

// Opaque finished scenario run.
typedef struct QkdRun QkdRun;

// Opaque loaded topology.
typedef struct QkdTopology QkdTopology;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. The pointer
// stays valid until the next call into this library from the same thread.
const char *qkd_last_error(void);

// # Safety
// `s` must come from this library and not have been freed.
void qkd_string_free(char *s);

// Parses and validates a topology JSON document.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a writable pointer.
enum QkdStatus qkd_topology_load(const char *json, struct QkdTopology **out);

// # Safety
// `topo` must come from [`qkd_topology_load`] and not have been freed.
void qkd_topology_free(struct QkdTopology *topo);

// Writes the node hosting `app` to `node_out`.
//
// # Safety
// Pointers must be valid; `app` NUL-terminated.
enum QkdStatus qkd_topology_resolve_app(const struct QkdTopology *topo,
                                        const char *app,
                                        char **node_out);

// Computes the relay path between two nodes as JSON
// (`{"nodes":[..],"links":[..],"kms":[..],"cost":..}`). `policy` may be NULL
// to use the topology's own weight policy.
//
// # Safety
// Pointers must be valid; strings NUL-terminated.
enum QkdStatus qkd_compute_path(const struct QkdTopology *topo,
                                const char *src,
                                const char *dst,
                                const char *policy,
                                char **json_out);

// Runs a scenario on `topo`. On `Ok` or `ExpectationFailed` a run handle is
// written to `out`; inspect it with the `qkd_run_*` functions. Relative
// paths inside the scenario resolve against the working directory.
//
// # Safety
// Pointers must be valid; `scenario_json` NUL-terminated.
enum QkdStatus qkd_run_scenario(const struct QkdTopology *topo,
                                const char *scenario_json,
                                uint64_t seed,
                                struct QkdRun **out);

// Raw JSON-lines trace of a run.
//
// # Safety
// `run` must come from [`qkd_run_scenario`]; `out` must be writable.
enum QkdStatus qkd_run_trace(const struct QkdRun *run, char **out);

// Final report of a run as JSON.
//
// # Safety
// `run` must come from [`qkd_run_scenario`]; `out` must be writable.
enum QkdStatus qkd_run_report(const struct QkdRun *run, char **out);

// 0 when every expectation held, 1 otherwise, -1 for a null handle.
//
// # Safety
// `run` must be null or come from [`qkd_run_scenario`].
int32_t qkd_run_exit_code(const struct QkdRun *run);

// # Safety
// `run` must come from [`qkd_run_scenario`] and not have been freed.
void qkd_run_free(struct QkdRun *run);

// `out[i] = a[i] ^ b[i]` for `i < len`. `out` may alias `a` or `b`.
//
// # Safety
// All three buffers must hold `len` bytes.
enum QkdStatus qkd_otp_xor(const uint8_t *a, const uint8_t *b, size_t len, uint8_t *out);

// Compares two JSON-lines traces after canonicalization. Returns `Ok` when
// they match and `ExpectationFailed` otherwise; if `diff_out` is not NULL the
// diff is written there as JSON.
//
// # Safety
// `expected` and `actual` must be NUL-terminated; `diff_out` null or writable.
enum QkdStatus qkd_trace_diff(const char *expected, const char *actual, char **diff_out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* QKDNET_H */
