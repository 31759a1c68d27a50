#ifndef ECHOSPLAT_H
#define ECHOSPLAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum EchosplatStatus {
  ECHOSPLAT_STATUS_OK = 0,
  ECHOSPLAT_STATUS_NULL_POINTER = 1,
  ECHOSPLAT_STATUS_INVALID_ARGUMENT = 2,
  ECHOSPLAT_STATUS_IO = 3,
  ECHOSPLAT_STATUS_FORMAT = 4,
  ECHOSPLAT_STATUS_SHAPE_MISMATCH = 5,
  ECHOSPLAT_STATUS_OUT_OF_RANGE = 6,
  ECHOSPLAT_STATUS_EMPTY = 7,
  ECHOSPLAT_STATUS_NON_FINITE = 8,
  ECHOSPLAT_STATUS_DEGENERATE = 9,
  ECHOSPLAT_STATUS_PANIC = 10,
} EchosplatStatus;

// A trained run directory with its dataset.
typedef struct EchosplatRun EchosplatRun;

// A set of 3D Gaussians.
typedef struct EchosplatScene EchosplatScene;

// Sonar intrinsics.
typedef struct EchosplatSensor EchosplatSensor;

// Sensor pose: row-major rotation and translation of the world-to-sonar
// transform `p_s = R p + t`.
typedef struct EchosplatPose {
  double rotation[9];
  double translation[3];
} EchosplatPose;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *echosplat_version(void);

// Copies the last error message of this thread into `buf` (truncated
// and NUL-terminated) and returns the buffer size needed for all of it,
// or 0 when there is no error.
//
// # Safety
// `buf` must be null or valid for `capacity` bytes.
size_t echosplat_last_error_message(char *buf, size_t capacity);

// Sonar with the given fields of view (radians), range window (metres)
// and polar image size.
//
// # Safety
// `out` must be valid for a write.
enum EchosplatStatus echosplat_sensor_new(double azimuth_fov,
                                          double elevation_fov,
                                          double min_range,
                                          double max_range,
                                          size_t rows,
                                          size_t columns,
                                          struct EchosplatSensor **out);

// # Safety
// `sensor` must be null or a handle from [`echosplat_sensor_new`] not yet freed.
void echosplat_sensor_free(struct EchosplatSensor *sensor);

// Polar image size.
//
// # Safety
// `sensor` must be a live handle; `rows` and `columns` valid for writes.
enum EchosplatStatus echosplat_sensor_shape(const struct EchosplatSensor *sensor,
                                            size_t *rows,
                                            size_t *columns);

// Empty scene.
//
// # Safety
// `out` must be valid for a write.
enum EchosplatStatus echosplat_scene_new(struct EchosplatScene **out);

// Reads a scene PLY file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` valid for a write.
enum EchosplatStatus echosplat_scene_load(const char *path, struct EchosplatScene **out);

// Writes a scene PLY file.
//
// # Safety
// `scene` must be a live handle and `path` a NUL-terminated string.
enum EchosplatStatus echosplat_scene_save(const struct EchosplatScene *scene, const char *path);

// # Safety
// `scene` must be null or a live handle.
void echosplat_scene_free(struct EchosplatScene *scene);

// Number of Gaussians.
//
// # Safety
// `scene` must be a live handle and `len` valid for a write.
enum EchosplatStatus echosplat_scene_len(const struct EchosplatScene *scene, size_t *len);

// Appends an isotropic Gaussian. `intensity` and `opacity` lie in (0, 1).
//
// # Safety
// `scene` must be a live handle and `mean` point to three doubles.
enum EchosplatStatus echosplat_scene_add_isotropic(struct EchosplatScene *scene,
                                                   const double *mean,
                                                   double scale,
                                                   double intensity,
                                                   double opacity);

// Renders the polar image seen from `pose` into `out` (`len` must equal
// rows × columns).
//
// # Safety
// Handles must be live, `pose` valid for a read and `out` for `len` writes.
enum EchosplatStatus echosplat_render(const struct EchosplatScene *scene,
                                      const struct EchosplatSensor *sensor,
                                      const struct EchosplatPose *pose_in,
                                      double *out,
                                      size_t len);

// Simulates a dataset from the `[simulate]` section of `config_path`
// (defaults when null) into `out_dir`.
//
// # Safety
// `config_path` must be null or NUL-terminated; `out_dir` NUL-terminated.
enum EchosplatStatus echosplat_simulate(const char *config_path, const char *out_dir);

// Trains both stages on the dataset in `data_dir`, writing a run
// directory to `out_dir`.
//
// # Safety
// `config_path` must be null or NUL-terminated; the directories NUL-terminated.
enum EchosplatStatus echosplat_train(const char *data_dir,
                                     const char *config_path,
                                     const char *out_dir);

// Loads a trained run directory.
//
// # Safety
// `dir` must be NUL-terminated and `out` valid for a write.
enum EchosplatStatus echosplat_run_load(const char *dir, struct EchosplatRun **out);

// # Safety
// `run` must be null or a live handle.
void echosplat_run_free(struct EchosplatRun *run);

// Number of frames in the run's dataset.
//
// # Safety
// `run` must be a live handle and `count` valid for a write.
enum EchosplatStatus echosplat_run_frame_count(const struct EchosplatRun *run, size_t *count);

// Copy of the run's trained scene; free it with [`echosplat_scene_free`].
//
// # Safety
// `run` must be a live handle and `out` valid for a write.
enum EchosplatStatus echosplat_run_scene(const struct EchosplatRun *run,
                                         struct EchosplatScene **out);

// Renders dataset frame `index`. Non-zero `noisy` adds the learned noise.
//
// # Safety
// `run` must be a live handle and `out` valid for `len` writes.
enum EchosplatStatus echosplat_run_render(const struct EchosplatRun *run,
                                          size_t index,
                                          int noisy,
                                          double *out,
                                          size_t len);

// Peak signal-to-noise ratio in dB of two images with values in [0, 1].
//
// # Safety
// `a` and `b` must hold `rows * columns` doubles; `out` valid for a write.
enum EchosplatStatus echosplat_psnr(const double *a,
                                    const double *b,
                                    size_t rows,
                                    size_t columns,
                                    double *out);

// Mean structural similarity of two images.
//
// # Safety
// `a` and `b` must hold `rows * columns` doubles; `out` valid for a write.
enum EchosplatStatus echosplat_ssim(const double *a,
                                    const double *b,
                                    size_t rows,
                                    size_t columns,
                                    double *out);

// Chamfer distance between point sets of `na` and `nb` xyz triples.
//
// # Safety
// `a` must hold `3 * na` doubles, `b` `3 * nb`; `out` valid for a write.
enum EchosplatStatus echosplat_chamfer_distance(const double *a,
                                                size_t na,
                                                const double *b,
                                                size_t nb,
                                                double *out);

// Hausdorff distance between point sets of `na` and `nb` xyz triples.
//
// # Safety
// `a` must hold `3 * na` doubles, `b` `3 * nb`; `out` valid for a write.
enum EchosplatStatus echosplat_hausdorff_distance(const double *a,
                                                  size_t na,
                                                  const double *b,
                                                  size_t nb,
                                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECHOSPLAT_H */
