/* C interface for the qafdon interval predictor.
 *
 * Load a checkpoint (plus an optional calibration artifact) into an opaque
 * predictor handle, then query order-fixed (lower, upper) voltage bounds at
 * post-fault times. All functions return a qaf_status code.
 *
 * Kept in sync with crates/qafdon-ffi/src/lib.rs; regenerate with
 *   cbindgen --config cbindgen.toml --crate qafdon-ffi --output include/qafdon.h
 */

#ifndef QAFDON_H
#define QAFDON_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes returned by every FFI entry point. */
typedef enum QafStatus {
  QAF_STATUS_OK = 0,
  QAF_STATUS_NULL_ARGUMENT = 1,
  QAF_STATUS_INVALID_UTF8 = 2,
  QAF_STATUS_IO_ERROR = 3,
  QAF_STATUS_BAD_ARTIFACT = 4,
  QAF_STATUS_CHECKPOINT_MISMATCH = 5,
  QAF_STATUS_BAD_INPUT = 6,
  QAF_STATUS_DOMAIN_ERROR = 7,
} QafStatus;

/* Opaque predictor handle: a loaded model plus an optional conformal offset. */
typedef struct QafPredictor QafPredictor;

/* Loads a predictor from a checkpoint file, optionally applying a
 * calibration artifact (pass NULL for raw intervals). The artifact must
 * hash-match the checkpoint. On success *out owns the handle; release it
 * with qaf_predictor_free. */
QafStatus qaf_predictor_load(const char *checkpoint_path,
                             const char *calibration_path,
                             QafPredictor **out);

/* Releases a predictor. NULL is a no-op. */
void qaf_predictor_free(QafPredictor *predictor);

/* Sensor count m the predictor expects. */
QafStatus qaf_predictor_sensor_count(const QafPredictor *predictor,
                                     size_t *out_m);

/* Prediction horizon T in seconds; query times must lie in (0, T]. */
QafStatus qaf_predictor_horizon(const QafPredictor *predictor,
                                double *out_horizon);

/* Interval at a single query time. sensors holds the padded input function
 * (n_sensors == model sensor count, zeros beyond valid_len). */
QafStatus qaf_predictor_interval(const QafPredictor *predictor,
                                 const double *sensors,
                                 size_t n_sensors,
                                 size_t valid_len,
                                 double t,
                                 double *out_lo,
                                 double *out_hi);

/* Intervals at n_times query times, written into caller buffers of the
 * same length. */
QafStatus qaf_predictor_interval_curve(const QafPredictor *predictor,
                                       const double *sensors,
                                       size_t n_sensors,
                                       size_t valid_len,
                                       const double *times,
                                       size_t n_times,
                                       double *out_lo,
                                       double *out_hi);

/* Human-readable description of a status code (static storage). */
const char *qaf_status_message(QafStatus status);

/* Library version (static storage). */
const char *qaf_version(void);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* QAFDON_H */
