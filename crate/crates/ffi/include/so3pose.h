#ifndef SO3POSE_H
#define SO3POSE_H

#include <stddef.h>
#include <stdint.h>

#define SO3POSE_NUM_JOINTS 24

#define SO3POSE_NUM_PARTS 23

#define SO3POSE_SHAPE_DIM 10

typedef enum So3poseStatus {
  SO3POSE_STATUS_OK = 0,
  SO3POSE_STATUS_NULL_POINTER = 1,
  SO3POSE_STATUS_INVALID_ARGUMENT = 2,
  SO3POSE_STATUS_IO = 3,
  SO3POSE_STATUS_CHECKPOINT = 4,
  SO3POSE_STATUS_NUMERICAL = 5,
  SO3POSE_STATUS_PANIC = 6,
} So3poseStatus;

// Opaque model handle.
typedef struct So3poseModel So3poseModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint written by the `so3pose` tool.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum So3poseStatus so3pose_model_load(const char *path, struct So3poseModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from `so3pose_model_load` and not be used afterwards.
void so3pose_model_free(struct So3poseModel *model);

// Mode-seeking point estimate of rotations and shape.
//
// # Safety
// Pointers must reference buffers of the documented sizes.
enum So3poseStatus so3pose_point_estimate(const struct So3poseModel *model,
                                          const double *points,
                                          const uint8_t *visible,
                                          double *rots_out,
                                          double *beta_out);

// `n` ancestral samples with their log-densities; reproducible per `seed`.
// `log_prob_out` may be null.
//
// # Safety
// Output buffers must hold `n` times the documented sizes.
enum So3poseStatus so3pose_sample(const struct So3poseModel *model,
                                  const double *points,
                                  const uint8_t *visible,
                                  uint64_t seed,
                                  size_t n,
                                  double *rots_out,
                                  double *beta_out,
                                  double *log_prob_out);

// `ln p(rots, beta | keypoints)` with rotations measured against the
// probability Haar measure.
//
// # Safety
// Pointers must reference buffers of the documented sizes.
enum So3poseStatus so3pose_log_prob(const struct So3poseModel *model,
                                    const double *points,
                                    const uint8_t *visible,
                                    const double *rots,
                                    const double *beta,
                                    double *out);

// Root-relative 3D joints in the camera frame for a pose and shape.
//
// # Safety
// Pointers must reference buffers of the documented sizes.
enum So3poseStatus so3pose_joints3d(const struct So3poseModel *model,
                                    const double *points,
                                    const uint8_t *visible,
                                    const double *rots,
                                    const double *beta,
                                    double *joints_out);

// Copies the calling thread's last error message, NUL-terminated and
// truncated to `len`. Returns the full message length in bytes.
//
// # Safety
// `buf` must hold `len` bytes, or be null to query the length.
size_t so3pose_last_error(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SO3POSE_H */
