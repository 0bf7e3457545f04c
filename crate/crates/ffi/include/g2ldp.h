#ifndef G2LDP_H
#define G2LDP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum G2Status {
  G2_STATUS_OK = 0,
  G2_STATUS_NULL_POINTER = 1,
  G2_STATUS_INVALID_PARAMETER = 2,
  G2_STATUS_GRID_MISALIGNED = 3,
  G2_STATUS_BLOW_UP = 4,
  G2_STATUS_NOISE_MISMATCH = 5,
  G2_STATUS_NOT_CONVERGED = 6,
  G2_STATUS_PARSE = 7,
  G2_STATUS_IO = 8,
  G2_STATUS_PANIC = 9,
  G2_STATUS_OTHER = 10,
} G2Status;

/**
 * Coefficient set.
 */
typedef struct G2Coefficients G2Coefficients;

/**
 * Spectral velocity field.
 */
typedef struct G2Field G2Field;

/**
 * Fluid parameters.
 */
typedef struct G2Params G2Params;

/**
 * Solution trajectory sampled at every step node.
 */
typedef struct G2Trajectory G2Trajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *g2_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *g2_version(void);

/**
 * Frees a string returned by this library.
 *
 * # Safety
 * `s` must come from this library or be NULL.
 */
void g2_string_free(char *s);

/**
 * Creates fluid parameters for the torus of side `domain_side` with mode cutoff `modes`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum G2Status g2_params_new(double alpha,
                            double kappa,
                            double domain_side,
                            size_t modes,
                            struct G2Params **out);

/**
 * # Safety
 * `p` must come from `g2_params_new` or be NULL.
 */
void g2_params_free(struct G2Params *p);

/**
 * Built-in initial state with unit `V` norm.
 *
 * # Safety
 * Pointers must be valid.
 */
enum G2Status g2_field_default_initial(const struct G2Params *params, struct G2Field **out);

/**
 * Zero field with mode cutoff `modes`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum G2Status g2_field_zeros(size_t modes, struct G2Field **out);

/**
 * Parses a field from the CSV format written by `g2_field_to_csv`.
 *
 * # Safety
 * `csv` must be a NUL-terminated string and `out` a valid pointer.
 */
enum G2Status g2_field_from_csv(const char *csv, struct G2Field **out);

/**
 * Serializes a field as CSV; release the result with `g2_string_free`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum G2Status g2_field_to_csv(const struct G2Field *field,
                              const struct G2Params *params,
                              char **out);

/**
 * `||u||_V` and `||u||_W` of a field.
 *
 * # Safety
 * Pointers must be valid.
 */
enum G2Status g2_field_norms(const struct G2Field *field,
                             const struct G2Params *params,
                             double *norm_v_out,
                             double *norm_w_out);

/**
 * # Safety
 * `f` must come from this library or be NULL.
 */
void g2_field_free(struct G2Field *f);

/**
 * Default coefficient family.
 *
 * # Safety
 * Pointers must be valid.
 */
enum G2Status g2_coefficients_default(const struct G2Params *params, struct G2Coefficients **out);

/**
 * Coefficient family described by TOML text, for example
 * `diffusion = "zero"\njump_amplitudes = [1.0, 0.5]`.
 *
 * # Safety
 * `spec` must be a NUL-terminated string and pointers valid.
 */
enum G2Status g2_coefficients_from_toml(const struct G2Params *params,
                                        const char *spec,
                                        struct G2Coefficients **out);

/**
 * Number of marks of a coefficient set.
 *
 * # Safety
 * `c` must be valid or NULL (returns 0).
 */
size_t g2_coefficients_marks(const struct G2Coefficients *c);

/**
 * # Safety
 * `c` must come from this library or be NULL.
 */
void g2_coefficients_free(struct G2Coefficients *c);

/**
 * Control cost `Q1(f) + Q2(g)` for uniform cell values as in `g2_solve_skeleton`.
 *
 * # Safety
 * Arrays must hold the stated number of values; pointers must be valid.
 */
enum G2Status g2_control_cost(const struct G2Coefficients *coeffs,
                              double horizon,
                              const double *f,
                              size_t f_len,
                              const double *g,
                              size_t g_len,
                              double *out);

/**
 * Solves the controlled skeleton equation on `[0, horizon]`.
 *
 * # Safety
 * Arrays must hold the stated number of values; pointers must be valid.
 */
enum G2Status g2_solve_skeleton(const struct G2Params *params,
                                const struct G2Coefficients *coeffs,
                                const struct G2Field *x0,
                                double horizon,
                                double dt,
                                bool nonlinear,
                                const double *f,
                                size_t f_len,
                                const double *g,
                                size_t g_len,
                                struct G2Trajectory **out);

/**
 * Simulates one path of the uncontrolled stochastic equation at noise level `eps`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum G2Status g2_simulate(const struct G2Params *params,
                          const struct G2Coefficients *coeffs,
                          const struct G2Field *x0,
                          double eps,
                          double horizon,
                          double dt,
                          bool nonlinear,
                          uint64_t seed,
                          struct G2Trajectory **out);

/**
 * Number of stored nodes (steps + 1).
 *
 * # Safety
 * `t` must be valid or NULL (returns 0).
 */
size_t g2_trajectory_len(const struct G2Trajectory *t);

/**
 * Time, `V` norm and `W` norm at node `index`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum G2Status g2_trajectory_node(const struct G2Trajectory *t,
                                 size_t index,
                                 double *time,
                                 double *norm_v_out,
                                 double *norm_w_out);

/**
 * Copies the terminal state into a new field handle.
 *
 * # Safety
 * Pointers must be valid.
 */
enum G2Status g2_trajectory_final_state(const struct G2Trajectory *t, struct G2Field **out);

/**
 * # Safety
 * `t` must come from this library or be NULL.
 */
void g2_trajectory_free(struct G2Trajectory *t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* G2LDP_H */
