#ifndef HIERAKEY_H
#define HIERAKEY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum HkStatus {
  HK_STATUS_OK = 0,
  HK_STATUS_NULL_POINTER = 1,
  HK_STATUS_INVALID_UTF8 = 2,
  HK_STATUS_INVALID_ARGUMENT = 3,
  HK_STATUS_HIERARCHY = 4,
  HK_STATUS_PROTOCOL = 5,
  HK_STATUS_IO = 6,
  HK_STATUS_FORMAT = 7,
  HK_STATUS_BUFFER_TOO_SMALL = 8,
  HK_STATUS_PARSE = 9,
  HK_STATUS_PANIC = 10,
} HkStatus;

/**
 * Opaque simulator handle.
 */
typedef struct HkSim HkSim;

typedef struct HkEstablishResult {
  bool complete;
  /**
   * Wire error code, 0 if none.
   */
  uint16_t error_code;
  uint32_t links;
  uint32_t exchange_msgs;
  uint32_t head_link_msgs;
  uint32_t handshake_msgs;
  uint64_t initiator_aead;
  uint64_t responder_aead;
  uint64_t mediator_aead;
} HkEstablishResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *hk_version(void);

/**
 * Copies the last error message of this thread (without NUL) into `buf`.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes; `len` must be a valid pointer.
 */
enum HkStatus hk_last_error(uint8_t *buf, uintptr_t cap, uintptr_t *len);

/**
 * New simulator with an empty topology. Never returns null.
 */
struct HkSim *hk_sim_new(uint64_t seed, uint64_t latency);

/**
 * # Safety
 * `sim` must come from [`hk_sim_new`] and not be used afterwards. Null is ignored.
 */
void hk_sim_free(struct HkSim *sim);

/**
 * Installs a root entity. Role codes: 0 node, 1 cluster head, 2 head, 3 district mediator.
 *
 * # Safety
 * `sim` must be a live handle and `id` a NUL-terminated string.
 */
enum HkStatus hk_sim_install_root(struct HkSim *sim, const char *id, uint8_t role_code);

/**
 * # Safety
 * `sim` must be a live handle; strings must be NUL-terminated.
 */
enum HkStatus hk_sim_register(struct HkSim *sim,
                              const char *registrar,
                              const char *child,
                              uint8_t role_code);

/**
 * # Safety
 * `sim` must be a live handle; strings must be NUL-terminated.
 */
enum HkStatus hk_sim_associate(struct HkSim *sim, const char *node, const char *ch);

/**
 * # Safety
 * `sim` must be a live handle; `id` must be NUL-terminated.
 */
enum HkStatus hk_sim_revoke(struct HkSim *sim, const char *id);

/**
 * # Safety
 * `sim` must be a live handle.
 */
enum HkStatus hk_sim_seal(struct HkSim *sim);

/**
 * Runs one key establishment. A protocol-level failure is still `Ok`;
 * inspect `result->complete` and `result->error_code`.
 *
 * # Safety
 * `sim` must be a live handle, strings NUL-terminated, `result` writable.
 */
enum HkStatus hk_sim_establish(struct HkSim *sim,
                               const char *initiator,
                               const char *responder,
                               struct HkEstablishResult *result);

/**
 * Sends application bytes over an established session.
 *
 * # Safety
 * `sim` must be a live handle, strings NUL-terminated, `payload` valid
 * for `len` bytes and `delivered` writable.
 */
enum HkStatus hk_sim_send(struct HkSim *sim,
                          const char *from,
                          const char *to,
                          const uint8_t *payload,
                          uintptr_t len,
                          bool *delivered);

/**
 * Copies the transcript as tab-separated text (one record per line).
 *
 * # Safety
 * `sim` must be a live handle, `buf` valid for `cap` bytes, `len` writable.
 */
enum HkStatus hk_sim_transcript(struct HkSim *sim, uint8_t *buf, uintptr_t cap, uintptr_t *len);

/**
 * # Safety
 * `sim` must be a live handle and `path` NUL-terminated.
 */
enum HkStatus hk_sim_save_keystore(struct HkSim *sim, const char *path);

/**
 * Loads a keystore written by [`hk_sim_save_keystore`] and reports its
 * entity and peer-key counts.
 *
 * # Safety
 * `path` must be NUL-terminated; the count pointers must be writable.
 */
enum HkStatus hk_keystore_counts(const char *path, uintptr_t *entities, uintptr_t *peer_keys);

/**
 * Checks that `bytes` is one well-formed wire message.
 *
 * # Safety
 * `bytes` must be valid for `len` bytes.
 */
enum HkStatus hk_wire_check(const uint8_t *bytes, uintptr_t len);

/**
 * Parses and runs a scenario. A scenario whose expectations fail is
 * still `Ok`; `*passed` says whether they all held.
 *
 * # Safety
 * `scenario` must be NUL-terminated; `out_dir` may be null; `passed` must be writable.
 */
enum HkStatus hk_run_scenario(const char *scenario,
                              uint64_t seed,
                              const char *out_dir,
                              bool *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HIERAKEY_H */
