/* C interface to the susceptibility-mapping pipeline.
 *
 * Every function returns a qsm_status; on failure a message describing the
 * problem is available from qsm_last_error() on the calling thread. Objects
 * are opaque handles released with the matching *_free function. Volumes are
 * stored z fastest: index = (i * ny + j) * nz + k.
 */
#ifndef QSM_QSM_H
#define QSM_QSM_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#if defined(QSM_BUILDING_LIBRARY)
#define QSM_API __declspec(dllexport)
#else
#define QSM_API __declspec(dllimport)
#endif
#else
#define QSM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum qsm_status {
    QSM_OK = 0,
    QSM_ERR_INVALID_INPUT = 1,
    QSM_ERR_DIMENSION_MISMATCH = 2,
    QSM_ERR_NUMERICAL = 3,
    QSM_ERR_DEGENERATE = 4,
    QSM_ERR_DIVERGED = 5,
    QSM_ERR_PLACEMENT = 6,
    QSM_ERR_IO = 7,
    QSM_ERR_BAD_MAGIC = 8,
    QSM_ERR_TRUNCATED = 9,
    QSM_ERR_VERSION = 10,
    QSM_ERR_SHAPE_MISMATCH = 11,
    QSM_ERR_MISSING_ENTRY = 12,
    QSM_ERR_CONFIG = 13,
    QSM_ERR_INTERNAL = 99
} qsm_status;

typedef enum qsm_dtype { QSM_F32 = 1, QSM_F64 = 2, QSM_U8_MASK = 3 } qsm_dtype;

typedef struct qsm_volume qsm_volume;
typedef struct qsm_mask qsm_mask;
typedef struct qsm_model qsm_model;
typedef struct qsm_dataset qsm_dataset;

QSM_API const char *qsm_last_error(void);
QSM_API const char *qsm_status_name(qsm_status s);
/* 0 ok, 2 configuration, 3 data, 4 numerical failure. */
QSM_API int qsm_exit_code(qsm_status s);
QSM_API const char *qsm_version(void);
/* Strings returned through char** outputs are released with this. */
QSM_API void qsm_string_free(char *s);

/* Volumes. `data` may be NULL for a zero volume. */
QSM_API qsm_status qsm_volume_create(const size_t dims[3], const double voxel[3], const double *data,
                                     qsm_volume **out);
QSM_API qsm_status qsm_volume_clone(const qsm_volume *v, qsm_volume **out);
QSM_API void qsm_volume_free(qsm_volume *v);
QSM_API qsm_status qsm_volume_shape(const qsm_volume *v, size_t dims[3], double voxel[3]);
QSM_API const double *qsm_volume_data(const qsm_volume *v);
QSM_API double *qsm_volume_data_mut(qsm_volume *v);
QSM_API qsm_status qsm_volume_read(const char *path, qsm_volume **out);
QSM_API qsm_status qsm_volume_write(const qsm_volume *v, const char *path, qsm_dtype dtype);
QSM_API qsm_status qsm_volume_scale(qsm_volume *v, double factor);
/* v := mask * v */
QSM_API qsm_status qsm_volume_apply_mask(qsm_volume *v, const qsm_mask *m);

/* Masks. */
QSM_API qsm_status qsm_mask_from_volume(const qsm_volume *v, qsm_mask **out);
QSM_API qsm_status qsm_mask_read(const char *path, qsm_mask **out);
QSM_API qsm_status qsm_mask_write(const qsm_mask *m, const char *path);
QSM_API qsm_status qsm_mask_count(const qsm_mask *m, size_t *count);
QSM_API qsm_status qsm_mask_get(const qsm_mask *m, size_t index, int *value);
QSM_API qsm_status qsm_mask_erode(const qsm_mask *m, size_t radius, qsm_mask **out);
QSM_API void qsm_mask_free(qsm_mask *m);

/* Physics and classical inversions. `b0` may be NULL for (0, 0, 1). */
QSM_API qsm_status qsm_dipole_forward(const qsm_volume *chi, const double b0[3], int pad, qsm_volume **out);
QSM_API qsm_status qsm_add_noise(const qsm_volume *v, double mean, double variance, uint64_t seed,
                                 qsm_volume **out);
QSM_API qsm_status qsm_tkd(const qsm_volume *field, const double b0[3], double threshold, qsm_volume **out);
QSM_API qsm_status qsm_cg_tikhonov(const qsm_volume *field, const double b0[3], double mu, size_t max_iterations,
                                   double tolerance, qsm_volume **out, size_t *iterations, int *converged);

/* Metrics in percent (nrmse, ddnrmse) and SSIM, all inside the mask. */
QSM_API qsm_status qsm_metrics(const qsm_volume *x, const qsm_volume *gt, const qsm_mask *mask, double *nrmse,
                               double *ddnrmse, double *ssim);

/* Synthetic data. `config_json` is a synth config object (NULL for defaults).
 * Writes one set of volumes per sample plus manifest.json into out_dir. */
QSM_API qsm_status qsm_synth_generate(const char *config_json, const char *out_dir, size_t *n_samples,
                                      char **effective_config_json);
QSM_API qsm_status qsm_dataset_load(const char *manifest_path, qsm_dataset **out);
QSM_API size_t qsm_dataset_size(const qsm_dataset *d);
/* Any output pointer may be NULL. Returned handles belong to the caller. */
QSM_API qsm_status qsm_dataset_sample(const qsm_dataset *d, size_t index, qsm_volume **chi, qsm_volume **local_field,
                                      qsm_volume **total_field, qsm_mask **mask);
QSM_API void qsm_dataset_free(qsm_dataset *d);

/* Models. `model_config_json` is a model config object (NULL for defaults). */
QSM_API qsm_status qsm_model_create(const char *model_config_json, uint64_t seed, qsm_model **out);
/* Restores topology from the checkpoint metadata. */
QSM_API qsm_status qsm_model_load(const char *checkpoint_path, qsm_model **out);
QSM_API qsm_status qsm_model_save(const qsm_model *m, const char *checkpoint_path);
QSM_API qsm_status qsm_model_config(const qsm_model *m, char **json);
QSM_API qsm_status qsm_model_checksum(const qsm_model *m, uint64_t *checksum);
QSM_API void qsm_model_free(qsm_model *m);

/* TF -> LF_pred -> chi. `residual` is ||Phi chi - LF_pred|| / ||LF_pred|| in-mask. */
QSM_API qsm_status qsm_infer(const qsm_model *m, const qsm_volume *total_field, const qsm_mask *mask,
                             qsm_volume **chi, qsm_volume **lf_pred, double *residual, double *seconds);

/* Clean vs noisy-input reconstruction of one sample, reported as JSON. */
QSM_API qsm_status qsm_noise_robustness(const qsm_model *m, const qsm_volume *total_field, const qsm_mask *mask,
                                        const qsm_volume *chi_true, double variance, uint64_t seed, char **json);

typedef void (*qsm_epoch_callback)(const char *json_line, void *user);

/* Trains on every sample of the dataset. With a non-NULL resume_checkpoint the
 * run continues from it. The final model is returned through `out` (optional)
 * and the report as JSON through `report_json` (optional). */
QSM_API qsm_status qsm_train(const char *train_config_json, const qsm_dataset *data, const char *resume_checkpoint,
                             qsm_epoch_callback cb, void *user, qsm_model **out, char **report_json);

#ifdef __cplusplus
}
#endif

#endif
