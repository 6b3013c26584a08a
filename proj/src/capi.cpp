#include "qsm/qsm.h"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <memory>
#include <new>

#include "qsm/baselines.hpp"
#include "qsm/config.hpp"
#include "qsm/metrics.hpp"
#include "qsm/trainer.hpp"
#include "qsm/volio.hpp"

struct qsm_volume {
    qsm::Volume3D v;
};
struct qsm_mask {
    qsm::Mask3D m;
    qsm::VoxelSize voxel;
};
struct qsm_model {
    qsm::ModelConfig cfg;
    qsm::ModelParams params;
    qsm::TrainConfig train;
    bool has_train = false;
};
struct qsm_dataset {
    std::vector<qsm::TrainingSample> samples;
};

namespace {

thread_local std::string g_last_error;

qsm_status to_status(qsm::ErrorCode c) {
    using qsm::ErrorCode;
    switch (c) {
    case ErrorCode::InvalidInput: return QSM_ERR_INVALID_INPUT;
    case ErrorCode::DimensionMismatch: return QSM_ERR_DIMENSION_MISMATCH;
    case ErrorCode::NumericalConsistency: return QSM_ERR_NUMERICAL;
    case ErrorCode::DegenerateDistribution: return QSM_ERR_DEGENERATE;
    case ErrorCode::TrainingDiverged: return QSM_ERR_DIVERGED;
    case ErrorCode::PlacementFailed: return QSM_ERR_PLACEMENT;
    case ErrorCode::Io: return QSM_ERR_IO;
    case ErrorCode::BadMagic: return QSM_ERR_BAD_MAGIC;
    case ErrorCode::Truncated: return QSM_ERR_TRUNCATED;
    case ErrorCode::UnsupportedVersion: return QSM_ERR_VERSION;
    case ErrorCode::ShapeMismatch: return QSM_ERR_SHAPE_MISMATCH;
    case ErrorCode::MissingEntry: return QSM_ERR_MISSING_ENTRY;
    case ErrorCode::Config: return QSM_ERR_CONFIG;
    }
    return QSM_ERR_INTERNAL;
}

template <class F> qsm_status guard(F &&f) {
    try {
        f();
        g_last_error.clear();
        return QSM_OK;
    } catch (const qsm::Error &e) {
        g_last_error = e.what();
        return to_status(e.code());
    } catch (const nlohmann::json::exception &e) {
        g_last_error = std::string("invalid JSON: ") + e.what();
        return QSM_ERR_CONFIG;
    } catch (const std::filesystem::filesystem_error &e) {
        g_last_error = e.what();
        return QSM_ERR_IO;
    } catch (const std::bad_alloc &) {
        g_last_error = "out of memory";
        return QSM_ERR_INTERNAL;
    } catch (const std::exception &e) {
        g_last_error = e.what();
        return QSM_ERR_INTERNAL;
    }
}

void need(const void *p, const char *what) {
    if (!p) qsm::fail(qsm::ErrorCode::InvalidInput, std::string(what) + " must not be NULL");
}

char *dup_string(const std::string &s) {
    char *out = static_cast<char *>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

qsm::Axis3 axis(const double b0[3]) { return b0 ? qsm::Axis3{b0[0], b0[1], b0[2]} : qsm::Axis3{0.0, 0.0, 1.0}; }

qsm::Json parse_or_empty(const char *text) {
    if (!text || !*text) return qsm::Json::object();
    try {
        return qsm::Json::parse(text);
    } catch (const nlohmann::json::exception &e) {
        qsm::fail(qsm::ErrorCode::Config, std::string("invalid JSON: ") + e.what());
    }
}

qsm::ModelConfig model_config_from_metadata(const std::string &metadata) {
    const qsm::Json meta = parse_or_empty(metadata.c_str());
    if (!meta.contains("model")) qsm::fail(qsm::ErrorCode::MissingEntry, "checkpoint metadata has no model config");
    return qsm::config_from_json<qsm::ModelConfig>(meta.at("model"));
}

} // namespace

extern "C" {

const char *qsm_last_error(void) { return g_last_error.c_str(); }

const char *qsm_status_name(qsm_status s) {
    switch (s) {
    case QSM_OK: return "ok";
    case QSM_ERR_INVALID_INPUT: return "invalid-input";
    case QSM_ERR_DIMENSION_MISMATCH: return "dimension-mismatch";
    case QSM_ERR_NUMERICAL: return "numerical-consistency";
    case QSM_ERR_DEGENERATE: return "degenerate-distribution";
    case QSM_ERR_DIVERGED: return "training-diverged";
    case QSM_ERR_PLACEMENT: return "placement-failed";
    case QSM_ERR_IO: return "io";
    case QSM_ERR_BAD_MAGIC: return "bad-magic";
    case QSM_ERR_TRUNCATED: return "truncated";
    case QSM_ERR_VERSION: return "unsupported-version";
    case QSM_ERR_SHAPE_MISMATCH: return "shape-mismatch";
    case QSM_ERR_MISSING_ENTRY: return "missing-entry";
    case QSM_ERR_CONFIG: return "config";
    case QSM_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

int qsm_exit_code(qsm_status s) {
    switch (s) {
    case QSM_OK: return 0;
    case QSM_ERR_CONFIG: return 2;
    case QSM_ERR_INVALID_INPUT:
    case QSM_ERR_DIMENSION_MISMATCH:
    case QSM_ERR_IO:
    case QSM_ERR_BAD_MAGIC:
    case QSM_ERR_TRUNCATED:
    case QSM_ERR_VERSION:
    case QSM_ERR_SHAPE_MISMATCH:
    case QSM_ERR_MISSING_ENTRY:
    case QSM_ERR_PLACEMENT: return 3;
    case QSM_ERR_NUMERICAL:
    case QSM_ERR_DEGENERATE:
    case QSM_ERR_DIVERGED:
    case QSM_ERR_INTERNAL: return 4;
    }
    return 4;
}

const char *qsm_version(void) { return "1.0.0"; }

void qsm_string_free(char *s) { std::free(s); }

// --- volumes -----------------------------------------------------------------

qsm_status qsm_volume_create(const size_t dims[3], const double voxel[3], const double *data, qsm_volume **out) {
    return guard([&] {
        need(dims, "dims");
        need(out, "out");
        const qsm::Dims d{dims[0], dims[1], dims[2]};
        const qsm::VoxelSize v = voxel ? qsm::VoxelSize{voxel[0], voxel[1], voxel[2]} : qsm::VoxelSize{};
        auto h = std::make_unique<qsm_volume>();
        h->v = data ? qsm::Volume3D(d, v, std::vector<double>(data, data + d.size())) : qsm::Volume3D(d, v, 0.0);
        *out = h.release();
    });
}

qsm_status qsm_volume_clone(const qsm_volume *v, qsm_volume **out) {
    return guard([&] {
        need(v, "volume");
        need(out, "out");
        *out = new qsm_volume{v->v};
    });
}

void qsm_volume_free(qsm_volume *v) { delete v; }

qsm_status qsm_volume_shape(const qsm_volume *v, size_t dims[3], double voxel[3]) {
    return guard([&] {
        need(v, "volume");
        if (dims)
            for (std::size_t a = 0; a < 3; ++a) dims[a] = v->v.dims()[a];
        if (voxel)
            for (std::size_t a = 0; a < 3; ++a) voxel[a] = v->v.voxel_size()[a];
    });
}

const double *qsm_volume_data(const qsm_volume *v) { return v ? v->v.values().data() : nullptr; }
double *qsm_volume_data_mut(qsm_volume *v) { return v ? v->v.values().data() : nullptr; }

qsm_status qsm_volume_read(const char *path, qsm_volume **out) {
    return guard([&] {
        need(path, "path");
        need(out, "out");
        *out = new qsm_volume{qsm::read_volume(path)};
    });
}

qsm_status qsm_volume_write(const qsm_volume *v, const char *path, qsm_dtype dtype) {
    return guard([&] {
        need(v, "volume");
        need(path, "path");
        if (dtype != QSM_F32 && dtype != QSM_F64 && dtype != QSM_U8_MASK)
            qsm::fail(qsm::ErrorCode::InvalidInput, "unknown dtype");
        qsm::write_volume(path, v->v, static_cast<qsm::VolumeDtype>(dtype));
    });
}

qsm_status qsm_volume_scale(qsm_volume *v, double factor) {
    return guard([&] {
        need(v, "volume");
        if (!std::isfinite(factor)) qsm::fail(qsm::ErrorCode::InvalidInput, "scale factor must be finite");
        for (auto &x : v->v.values()) x *= factor;
    });
}

qsm_status qsm_volume_apply_mask(qsm_volume *v, const qsm_mask *m) {
    return guard([&] {
        need(v, "volume");
        need(m, "mask");
        v->v = qsm::apply_mask(v->v, m->m);
    });
}

// --- masks -------------------------------------------------------------------

qsm_status qsm_mask_from_volume(const qsm_volume *v, qsm_mask **out) {
    return guard([&] {
        need(v, "volume");
        need(out, "out");
        *out = new qsm_mask{qsm::mask_from_nonzero(v->v), v->v.voxel_size()};
    });
}

qsm_status qsm_mask_read(const char *path, qsm_mask **out) {
    return guard([&] {
        need(path, "path");
        need(out, "out");
        const qsm::Volume3D v = qsm::read_volume(path);
        *out = new qsm_mask{qsm::mask_from_nonzero(v), v.voxel_size()};
    });
}

qsm_status qsm_mask_write(const qsm_mask *m, const char *path) {
    return guard([&] {
        need(m, "mask");
        need(path, "path");
        qsm::write_mask(path, m->m, m->voxel);
    });
}

qsm_status qsm_mask_count(const qsm_mask *m, size_t *count) {
    return guard([&] {
        need(m, "mask");
        need(count, "count");
        *count = m->m.count();
    });
}

qsm_status qsm_mask_get(const qsm_mask *m, size_t index, int *value) {
    return guard([&] {
        need(m, "mask");
        need(value, "value");
        if (index >= m->m.size()) qsm::fail(qsm::ErrorCode::InvalidInput, "mask index out of range");
        *value = m->m[index] ? 1 : 0;
    });
}

qsm_status qsm_mask_erode(const qsm_mask *m, size_t radius, qsm_mask **out) {
    return guard([&] {
        need(m, "mask");
        need(out, "out");
        *out = new qsm_mask{qsm::erode_mask(m->m, radius), m->voxel};
    });
}

void qsm_mask_free(qsm_mask *m) { delete m; }

// --- physics -----------------------------------------------------------------

qsm_status qsm_dipole_forward(const qsm_volume *chi, const double b0[3], int pad, qsm_volume **out) {
    return guard([&] {
        need(chi, "chi");
        need(out, "out");
        const qsm::DipoleOperator op(qsm::KGrid(chi->v.dims(), chi->v.voxel_size()), axis(b0),
                                     qsm::DipoleOptions{pad != 0});
        *out = new qsm_volume{op.forward(chi->v)};
    });
}

qsm_status qsm_add_noise(const qsm_volume *v, double mean, double variance, uint64_t seed, qsm_volume **out) {
    return guard([&] {
        need(v, "volume");
        need(out, "out");
        *out = new qsm_volume{qsm::add_gaussian_noise(v->v, mean, variance, seed)};
    });
}

qsm_status qsm_tkd(const qsm_volume *field, const double b0[3], double threshold, qsm_volume **out) {
    return guard([&] {
        need(field, "field");
        need(out, "out");
        const qsm::DipoleOperator op(qsm::KGrid(field->v.dims(), field->v.voxel_size()), axis(b0));
        *out = new qsm_volume{qsm::tkd_invert(op, field->v, qsm::TkdConfig{threshold})};
    });
}

qsm_status qsm_cg_tikhonov(const qsm_volume *field, const double b0[3], double mu, size_t max_iterations,
                           double tolerance, qsm_volume **out, size_t *iterations, int *converged) {
    return guard([&] {
        need(field, "field");
        need(out, "out");
        const qsm::DipoleOperator op(qsm::KGrid(field->v.dims(), field->v.voxel_size()), axis(b0));
        qsm::CgResult r = qsm::cg_tikhonov_invert(op, field->v, qsm::CgConfig{mu, max_iterations, tolerance});
        if (iterations) *iterations = r.iterations;
        if (converged) *converged = r.converged ? 1 : 0;
        *out = new qsm_volume{std::move(r.chi)};
    });
}

qsm_status qsm_metrics(const qsm_volume *x, const qsm_volume *gt, const qsm_mask *mask, double *nrmse,
                       double *ddnrmse, double *ssim) {
    return guard([&] {
        need(x, "x");
        need(gt, "gt");
        need(mask, "mask");
        if (nrmse) *nrmse = qsm::nrmse(x->v, gt->v, mask->m);
        if (ddnrmse) *ddnrmse = qsm::ddnrmse(x->v, gt->v, mask->m);
        if (ssim) *ssim = qsm::ssim(x->v, gt->v, mask->m);
    });
}

// --- synthetic data ----------------------------------------------------------

qsm_status qsm_synth_generate(const char *config_json, const char *out_dir, size_t *n_samples,
                              char **effective_config_json) {
    return guard([&] {
        need(out_dir, "out_dir");
        const auto cfg = qsm::config_from_json<qsm::SynthConfig>(parse_or_empty(config_json));
        const std::filesystem::path dir(out_dir);
        std::filesystem::create_directories(dir);
        qsm::DatasetGenerator gen(cfg);
        qsm::Manifest man;
        man.seed = cfg.seed;
        man.config = qsm::Json(cfg).dump();
        std::size_t k = 0;
        while (auto s = gen.next()) {
            char stem[32];
            std::snprintf(stem, sizeof stem, "sample_%05zu", k);
            qsm::ManifestEntry e;
            e.index = k;
            e.seed = s->seed;
            e.chi = std::string(stem) + "_chi.nxq";
            e.local_field = std::string(stem) + "_lf.nxq";
            e.total_field = std::string(stem) + "_tf.nxq";
            e.mask = std::string(stem) + "_mask.nxq";
            qsm::write_volume(dir / e.chi, s->chi);
            qsm::write_volume(dir / e.local_field, s->local_field);
            qsm::write_volume(dir / e.total_field, s->total_field);
            qsm::write_mask(dir / e.mask, s->mask, cfg.voxel);
            man.samples.push_back(std::move(e));
            ++k;
        }
        qsm::write_manifest(dir / "manifest.json", man);
        if (n_samples) *n_samples = k;
        if (effective_config_json) *effective_config_json = dup_string(man.config);
    });
}

qsm_status qsm_dataset_load(const char *manifest_path, qsm_dataset **out) {
    return guard([&] {
        need(manifest_path, "manifest_path");
        need(out, "out");
        const std::filesystem::path path(manifest_path);
        const qsm::Manifest man = qsm::read_manifest(path);
        const auto dir = path.parent_path();
        auto ds = std::make_unique<qsm_dataset>();
        for (const auto &e : man.samples) {
            qsm::TrainingSample s;
            s.chi = qsm::read_volume(dir / e.chi);
            s.local_field = qsm::read_volume(dir / e.local_field);
            s.total_field = qsm::read_volume(dir / e.total_field);
            s.mask = qsm::read_mask(dir / e.mask);
            s.seed = e.seed;
            qsm::require_same_dims(s.chi.dims(), s.mask.dims(), "dataset sample");
            qsm::require_same_dims(s.chi.dims(), s.total_field.dims(), "dataset sample");
            qsm::require_same_dims(s.chi.dims(), s.local_field.dims(), "dataset sample");
            ds->samples.push_back(std::move(s));
        }
        *out = ds.release();
    });
}

size_t qsm_dataset_size(const qsm_dataset *d) { return d ? d->samples.size() : 0; }

qsm_status qsm_dataset_sample(const qsm_dataset *d, size_t index, qsm_volume **chi, qsm_volume **local_field,
                              qsm_volume **total_field, qsm_mask **mask) {
    return guard([&] {
        need(d, "dataset");
        if (index >= d->samples.size()) qsm::fail(qsm::ErrorCode::InvalidInput, "sample index out of range");
        const auto &s = d->samples[index];
        std::unique_ptr<qsm_volume> a, b, c;
        std::unique_ptr<qsm_mask> m;
        if (chi) a.reset(new qsm_volume{s.chi});
        if (local_field) b.reset(new qsm_volume{s.local_field});
        if (total_field) c.reset(new qsm_volume{s.total_field});
        if (mask) m.reset(new qsm_mask{s.mask, s.chi.voxel_size()});
        if (chi) *chi = a.release();
        if (local_field) *local_field = b.release();
        if (total_field) *total_field = c.release();
        if (mask) *mask = m.release();
    });
}

void qsm_dataset_free(qsm_dataset *d) { delete d; }

// --- models ------------------------------------------------------------------

qsm_status qsm_model_create(const char *model_config_json, uint64_t seed, qsm_model **out) {
    return guard([&] {
        need(out, "out");
        auto m = std::make_unique<qsm_model>();
        m->cfg = qsm::config_from_json<qsm::ModelConfig>(parse_or_empty(model_config_json));
        m->params = qsm::init_model(m->cfg, seed);
        *out = m.release();
    });
}

qsm_status qsm_model_load(const char *checkpoint_path, qsm_model **out) {
    return guard([&] {
        need(checkpoint_path, "checkpoint_path");
        need(out, "out");
        const qsm::Checkpoint c = qsm::read_checkpoint(checkpoint_path);
        auto m = std::make_unique<qsm_model>();
        m->cfg = model_config_from_metadata(c.metadata);
        m->params = qsm::init_model(m->cfg, 0);
        qsm::load_params_into(c, m->params);
        *out = m.release();
    });
}

qsm_status qsm_model_save(const qsm_model *m, const char *checkpoint_path) {
    return guard([&] {
        need(m, "model");
        need(checkpoint_path, "checkpoint_path");
        qsm::Checkpoint c;
        c.params = m->params;
        qsm::Json meta;
        meta["model"] = m->cfg;
        c.metadata = meta.dump();
        qsm::write_checkpoint(checkpoint_path, c);
    });
}

qsm_status qsm_model_config(const qsm_model *m, char **json) {
    return guard([&] {
        need(m, "model");
        need(json, "json");
        *json = dup_string(qsm::Json(m->cfg).dump());
    });
}

qsm_status qsm_model_checksum(const qsm_model *m, uint64_t *checksum) {
    return guard([&] {
        need(m, "model");
        need(checksum, "checksum");
        *checksum = m->params.checksum();
    });
}

void qsm_model_free(qsm_model *m) { delete m; }

qsm_status qsm_infer(const qsm_model *m, const qsm_volume *total_field, const qsm_mask *mask, qsm_volume **chi,
                     qsm_volume **lf_pred, double *residual, double *seconds) {
    return guard([&] {
        need(m, "model");
        need(total_field, "total_field");
        need(mask, "mask");
        qsm::InferResult r = qsm::infer(m->params, m->cfg, total_field->v, mask->m);
        std::unique_ptr<qsm_volume> a(new qsm_volume{std::move(r.chi)});
        std::unique_ptr<qsm_volume> b(new qsm_volume{std::move(r.lf_pred)});
        if (residual) *residual = r.residual;
        if (seconds) *seconds = r.seconds;
        if (chi) *chi = a.release();
        if (lf_pred) *lf_pred = b.release();
    });
}

qsm_status qsm_noise_robustness(const qsm_model *m, const qsm_volume *total_field, const qsm_mask *mask,
                                const qsm_volume *chi_true, double variance, uint64_t seed, char **json) {
    return guard([&] {
        need(m, "model");
        need(total_field, "total_field");
        need(mask, "mask");
        need(chi_true, "chi_true");
        need(json, "json");
        qsm::TrainingSample s;
        s.total_field = total_field->v;
        s.mask = mask->m;
        s.chi = chi_true->v;
        const qsm::NoiseReport r = qsm::evaluate_noise_robustness(m->params, m->cfg, s, variance, seed);
        const qsm::Json j{{"variance", variance},
                          {"nrmse_clean", r.nrmse_clean},
                          {"nrmse_noisy", r.nrmse_noisy},
                          {"ddnrmse_clean", r.ddnrmse_clean},
                          {"ddnrmse_noisy", r.ddnrmse_noisy},
                          {"residual_clean", r.residual_clean},
                          {"residual_noisy", r.residual_noisy},
                          {"delta_nrmse", r.delta_nrmse},
                          {"delta_residual", r.delta_residual}};
        *json = dup_string(j.dump());
    });
}

qsm_status qsm_train(const char *train_config_json, const qsm_dataset *data, const char *resume_checkpoint,
                     qsm_epoch_callback cb, void *user, qsm_model **out, char **report_json) {
    return guard([&] {
        need(data, "dataset");
        const auto cfg = qsm::config_from_json<qsm::TrainConfig>(parse_or_empty(train_config_json));
        qsm::validate(cfg, data->samples.size());
        qsm::TrainState state = resume_checkpoint && *resume_checkpoint
                                    ? qsm::from_checkpoint(qsm::read_checkpoint(resume_checkpoint), cfg)
                                    : qsm::initial_state(cfg);
        qsm::EpochCallback hook;
        if (cb)
            hook = [&](const qsm::EpochRecord &r, const qsm::TrainState &) { cb(qsm::Json(r).dump().c_str(), user); };
        const qsm::TrainReport rep = qsm::train(state, cfg, data->samples, hook);
        if (report_json) {
            qsm::Json j;
            j["epochs"] = rep.epochs;
            j["checkpoint_path"] = rep.checkpoint_path;
            j["config"] = cfg;
            j["final_param_norm"] = state.params.norm();
            j["checksum"] = state.params.checksum();
            *report_json = dup_string(j.dump());
        }
        if (out) {
            auto m = std::make_unique<qsm_model>();
            m->cfg = cfg.model;
            m->params = std::move(state.params);
            *out = m.release();
        }
    });
}

} // extern "C"
