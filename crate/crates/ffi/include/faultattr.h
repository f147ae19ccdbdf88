#ifndef FAULTATTR_H
#define FAULTATTR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FaStatus {
  FA_STATUS_OK = 0,
  FA_STATUS_NULL_ARGUMENT = 1,
  FA_STATUS_INVALID_UTF8 = 2,
  FA_STATUS_MALFORMED_RECORD = 3,
  FA_STATUS_INVALID_SCENARIO = 4,
  FA_STATUS_NO_DECISIVE_FAULT = 5,
  FA_STATUS_INVALID_ARGUMENT = 6,
  FA_STATUS_METHOD_FAILED = 7,
  FA_STATUS_METRICS_FAILED = 8,
  FA_STATUS_PANIC = 9,
} FaStatus;

/**
 * Opaque parsed dataset record.
 */
typedef struct FaRecord FaRecord;

/**
 * Opaque fault-lab scenario.
 */
typedef struct FaScenario FaScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *fa_last_error(void);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void fa_string_free(char *s);

/**
 * Parses one dataset record from its JSON text.
 *
 * # Safety
 * `json` and `record_id` must be nul-terminated; `out` must be writable.
 */
enum FaStatus fa_record_parse(const char *json, const char *record_id, struct FaRecord **out);

/**
 * # Safety
 * `rec` must come from [`fa_record_parse`] or be null.
 */
void fa_record_free(struct FaRecord *rec);

/**
 * Number of steps; 0 for a null handle.
 *
 * # Safety
 * `rec` must be a live handle or null.
 */
size_t fa_record_num_steps(const struct FaRecord *rec);

/**
 * Ground-truth label. `out_agent` receives an owned string.
 *
 * # Safety
 * `rec` must be a live handle; outputs must be writable.
 */
enum FaStatus fa_record_label(const struct FaRecord *rec, char **out_agent, size_t *out_step);

/**
 * Whether the labeled step exists and was taken by the labeled agent.
 *
 * # Safety
 * `rec` must be a live handle; `out_consistent` must be writable.
 */
enum FaStatus fa_record_validate(const struct FaRecord *rec, bool *out_consistent);

/**
 * The rule-based fourth evaluator's score for a candidate, default scores.
 *
 * # Safety
 * `rec` must be a live handle; `agent` nul-terminated; `out_score` writable.
 */
enum FaStatus fa_evaluator4(const struct FaRecord *rec,
                            const char *agent,
                            size_t step,
                            uint8_t *out_score);

/**
 * Runs a method on one record against a JSON-lines script of
 * `{"record_id", "tag", "text"}` entries and returns the result as JSON.
 * `method` is a method name such as `raffles`; `config_json` is a method
 * config object or null for defaults.
 *
 * # Safety
 * String arguments must be nul-terminated (`config_json` may be null);
 * `out_json` must be writable.
 */
enum FaStatus fa_attribute_scripted(const struct FaRecord *rec,
                                    const char *method,
                                    const char *script_jsonl,
                                    const char *config_json,
                                    char **out_json);

/**
 * Scores results against records. `results_jsonl` holds one result per
 * line and `records_json` a JSON array of dataset records. Writes the
 * report as JSON.
 *
 * # Safety
 * String arguments must be nul-terminated; `out_json` must be writable.
 */
enum FaStatus fa_report_json(const char *results_jsonl,
                             const char *records_json,
                             size_t max_k,
                             bool require_agent_for_step,
                             char **out_json);

/**
 * Parses a fault-lab scenario from TOML text.
 *
 * # Safety
 * `toml` must be nul-terminated; `out` must be writable.
 */
enum FaStatus fa_scenario_parse(const char *toml, struct FaScenario **out);

/**
 * # Safety
 * `s` must come from [`fa_scenario_parse`] or be null.
 */
void fa_scenario_free(struct FaScenario *s);

/**
 * Rolls the scenario out under its own policy and finds the decisive fault.
 * Returns `NoDecisiveFault` when the run succeeds or no fault is curable.
 *
 * # Safety
 * `s` must be a live handle; outputs must be writable.
 */
enum FaStatus fa_scenario_decisive_fault(const struct FaScenario *s,
                                         char **out_agent,
                                         size_t *out_step);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FAULTATTR_H */
