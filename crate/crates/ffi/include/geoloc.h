#ifndef GEOLOC_H
#define GEOLOC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Configuration and data-format errors use the same values
 * as the command-line exit codes.
 */
typedef enum GeolocStatus {
  GEOLOC_STATUS_OK = 0,
  GEOLOC_STATUS_FAILURE = 1,
  GEOLOC_STATUS_CONFIG = 2,
  GEOLOC_STATUS_DATA_FORMAT = 3,
  GEOLOC_STATUS_NULL_ARGUMENT = 4,
  GEOLOC_STATUS_INVALID_ARGUMENT = 5,
  GEOLOC_STATUS_IO = 6,
  GEOLOC_STATUS_PANIC = 7,
} GeolocStatus;

/**
 * How a frame's position was obtained.
 */
typedef enum GeolocFrameStatus {
  /**
   * Fine homography.
   */
  GEOLOC_FRAME_STATUS_OK = 0,
  /**
   * Center of the coarse satellite region.
   */
  GEOLOC_FRAME_STATUS_FINE_FAIL = 1,
  /**
   * Center of the best retrieved tile.
   */
  GEOLOC_FRAME_STATUS_RETRIEVAL_ONLY = 2,
  /**
   * The image could not be read; no position.
   */
  GEOLOC_FRAME_STATUS_INPUT_ERROR = 3,
} GeolocFrameStatus;

/**
 * Loaded tile database, models and pipeline settings.
 */
typedef struct GeolocEngine GeolocEngine;

/**
 * Position estimate for one frame. Coordinates are NaN and `tile_id` is
 * -1 when `has_estimate` is false.
 */
typedef struct GeolocFix {
  enum GeolocFrameStatus status;
  bool has_estimate;
  double lat;
  double lon;
  /**
   * Frame center in map pixels.
   */
  double map_x;
  double map_y;
  int64_t tile_id;
  size_t inliers;
} GeolocFix;

typedef struct GeolocMetrics {
  size_t frames;
  double success_rate;
  /**
   * Mean error over non-drift frames in meters; NaN when all drifted.
   */
  double mle_m;
  size_t drift_frames;
} GeolocMetrics;

/**
 * Geographic anchor of a map: latitude and longitude of the top-left
 * pixel and meters per pixel along x (east) and y (south).
 */
typedef struct GeolocGeoRef {
  double lat0;
  double lon0;
  double gx;
  double gy;
} GeolocGeoRef;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *geoloc_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *geoloc_version(void);

/**
 * Opens the tile database in `db_dir`. `config_json` is null for the
 * defaults, or a JSON object with pipeline settings.
 *
 * # Safety
 * String arguments are null or NUL-terminated; `out` is null or writable.
 */
enum GeolocStatus geoloc_engine_open(const char *db_dir,
                                     const char *config_json,
                                     struct GeolocEngine **out);

/**
 * Releases an engine. Null is ignored.
 *
 * # Safety
 * `engine` is null or came from [`geoloc_engine_open`] and is not used afterwards.
 */
void geoloc_engine_free(struct GeolocEngine *engine);

/**
 * Localizes the PNG frame at `image_path`. An unreadable image is not an
 * error: it yields a fix with status `INPUT_ERROR` and no estimate.
 *
 * # Safety
 * `engine` came from [`geoloc_engine_open`]; `image_path` is null or
 * NUL-terminated; `out` is null or writable.
 */
enum GeolocStatus geoloc_localize(const struct GeolocEngine *engine,
                                  const char *image_path,
                                  struct GeolocFix *out);

/**
 * Trajectory metrics for `len` per-frame localization errors in meters.
 *
 * # Safety
 * `errors` points to `len` readable values; `out` is null or writable.
 */
enum GeolocStatus geoloc_evaluate(const double *errors, size_t len, struct GeolocMetrics *out);

/**
 * Latitude and longitude of map pixel `(x, y)`.
 *
 * # Safety
 * `lat` and `lon` are null or writable.
 */
enum GeolocStatus geoloc_pixel_to_geo(struct GeolocGeoRef anchor,
                                      double x,
                                      double y,
                                      double *lat,
                                      double *lon);

/**
 * Map pixel of a latitude and longitude.
 *
 * # Safety
 * `x` and `y` are null or writable.
 */
enum GeolocStatus geoloc_geo_to_pixel(struct GeolocGeoRef anchor,
                                      double lat,
                                      double lon,
                                      double *x,
                                      double *y);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOLOC_H */
