#include "qsm/config.hpp"

#include <fstream>
#include <initializer_list>

namespace qsm {

namespace {

void check_keys(const Json &j, std::initializer_list<const char *> keys, const char *what) {
    if (!j.is_object()) fail(ErrorCode::Config, std::string(what) + " must be a JSON object");
    for (const auto &[k, v] : j.items()) {
        bool known = false;
        for (const char *key : keys) known = known || k == key;
        if (!known) fail(ErrorCode::Config, std::string("unknown key '") + k + "' in " + what);
    }
}

template <class T> void opt(const Json &j, const char *key, T &field) {
    if (j.contains(key)) field = j.at(key).get<T>();
}

} // namespace

void to_json(Json &j, const Dims &d) { j = Json::array({d.nx, d.ny, d.nz}); }
void from_json(const Json &j, Dims &d) {
    if (!j.is_array() || j.size() != 3) fail(ErrorCode::Config, "dims must be an array of three integers");
    d = Dims{j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>()};
}

void to_json(Json &j, const VoxelSize &v) { j = Json::array({v.dx, v.dy, v.dz}); }
void from_json(const Json &j, VoxelSize &v) {
    if (!j.is_array() || j.size() != 3) fail(ErrorCode::Config, "voxel_size must be an array of three numbers");
    v = VoxelSize{j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
    if (!(v.dx > 0 && v.dy > 0 && v.dz > 0)) fail(ErrorCode::Config, "voxel sizes must be positive");
}

void to_json(Json &j, const UNetConfig &c) {
    j = Json{{"depth", c.depth},
             {"base_channels", c.base_channels},
             {"kernel", c.kernel},
             {"convs_per_level", c.convs_per_level},
             {"alpha", c.alpha}};
}
void from_json(const Json &j, UNetConfig &c) {
    check_keys(j, {"depth", "base_channels", "kernel", "convs_per_level", "alpha"}, "unet config");
    opt(j, "depth", c.depth);
    opt(j, "base_channels", c.base_channels);
    opt(j, "kernel", c.kernel);
    opt(j, "convs_per_level", c.convs_per_level);
    opt(j, "alpha", c.alpha);
    if (c.base_channels == 0 || c.kernel % 2 == 0 || c.convs_per_level == 0)
        fail(ErrorCode::Config, "unet needs base_channels >= 1, an odd kernel and convs_per_level >= 1");
}

void to_json(Json &j, const BgNetConfig &c) { j = Json{{"unet", c.unet}}; }
void from_json(const Json &j, BgNetConfig &c) {
    check_keys(j, {"unet"}, "bgnet config");
    opt(j, "unet", c.unet);
    if (c.unet.depth == 0) fail(ErrorCode::Config, "bgnet depth must be at least 1");
}

void to_json(Json &j, const VarNetConfig &c) {
    j = Json{{"steps", c.steps},
             {"regularizer", c.regularizer},
             {"lambda_schedule", c.lambda_schedule == VarNetConfig::LambdaSchedule::Constant ? "constant" : "chebyshev"},
             {"lambda_init", c.lambda_init},
             {"lambda_band_min", c.lambda_band_min},
             {"mask_data_term", c.mask_data_term},
             {"mask_iterates", c.mask_iterates}};
}
void from_json(const Json &j, VarNetConfig &c) {
    check_keys(j, {"steps", "regularizer", "lambda_schedule", "lambda_init", "lambda_band_min", "mask_data_term", "mask_iterates"},
               "varnet config");
    opt(j, "steps", c.steps);
    opt(j, "regularizer", c.regularizer);
    std::string schedule = c.lambda_schedule == VarNetConfig::LambdaSchedule::Constant ? "constant" : "chebyshev";
    opt(j, "lambda_schedule", schedule);
    if (schedule == "constant")
        c.lambda_schedule = VarNetConfig::LambdaSchedule::Constant;
    else if (schedule == "chebyshev")
        c.lambda_schedule = VarNetConfig::LambdaSchedule::Chebyshev;
    else
        fail(ErrorCode::Config, "lambda_schedule must be 'constant' or 'chebyshev'");
    opt(j, "lambda_init", c.lambda_init);
    opt(j, "lambda_band_min", c.lambda_band_min);
    opt(j, "mask_data_term", c.mask_data_term);
    opt(j, "mask_iterates", c.mask_iterates);
    if (c.steps == 0) fail(ErrorCode::Config, "varnet steps must be at least 1");
    if (!(c.lambda_init > 0.0)) fail(ErrorCode::Config, "lambda_init must be positive");
    if (!(c.lambda_band_min > 0.0 && c.lambda_band_min < 2.0 / 3.0))
        fail(ErrorCode::Config, "lambda_band_min must lie in (0, 2/3)");
}

void to_json(Json &j, const ModelConfig &c) {
    j = Json{{"bgnet", c.bgnet}, {"varnet", c.varnet}, {"b0", c.b0}};
}
void from_json(const Json &j, ModelConfig &c) {
    check_keys(j, {"bgnet", "varnet", "b0"}, "model config");
    opt(j, "bgnet", c.bgnet);
    opt(j, "varnet", c.varnet);
    opt(j, "b0", c.b0);
}

void to_json(Json &j, const GmmPrior &c) {
    j = Json{{"mean_min", c.mean_min}, {"mean_max", c.mean_max}, {"sigma_min", c.sigma_min}, {"sigma_max", c.sigma_max}};
}
void from_json(const Json &j, GmmPrior &c) {
    check_keys(j, {"mean_min", "mean_max", "sigma_min", "sigma_max"}, "gmm config");
    opt(j, "mean_min", c.mean_min);
    opt(j, "mean_max", c.mean_max);
    opt(j, "sigma_min", c.sigma_min);
    opt(j, "sigma_max", c.sigma_max);
}

void to_json(Json &j, const AffineRanges &c) {
    j = Json{{"max_rotation_deg", c.max_rotation_deg},
             {"min_scale", c.min_scale},
             {"max_scale", c.max_scale},
             {"max_shear", c.max_shear},
             {"max_translation_fraction", c.max_translation_fraction}};
}
void from_json(const Json &j, AffineRanges &c) {
    check_keys(j, {"max_rotation_deg", "min_scale", "max_scale", "max_shear", "max_translation_fraction"},
               "affine config");
    opt(j, "max_rotation_deg", c.max_rotation_deg);
    opt(j, "min_scale", c.min_scale);
    opt(j, "max_scale", c.max_scale);
    opt(j, "max_shear", c.max_shear);
    opt(j, "max_translation_fraction", c.max_translation_fraction);
}

void to_json(Json &j, const BackgroundSourceSpec &c) {
    j = Json{{"count_mean", c.count_mean},
             {"fixed_count", c.fixed_count},
             {"amplitude_mean", c.amplitude_mean},
             {"amplitude_sd", c.amplitude_sd},
             {"volume_fraction", c.volume_fraction},
             {"axis_log_sd", c.axis_log_sd},
             {"min_distance_factor", c.min_distance_factor},
             {"max_distance_factor", c.max_distance_factor},
             {"gap_voxels", c.gap_voxels},
             {"smoothing_voxels", c.smoothing_voxels},
             {"padding_fraction", c.padding_fraction},
             {"max_attempts_per_source", c.max_attempts_per_source}};
}
void from_json(const Json &j, BackgroundSourceSpec &c) {
    check_keys(j,
               {"count_mean", "fixed_count", "amplitude_mean", "amplitude_sd", "volume_fraction", "axis_log_sd",
                "min_distance_factor", "max_distance_factor", "gap_voxels", "smoothing_voxels", "padding_fraction",
                "max_attempts_per_source"},
               "background config");
    opt(j, "count_mean", c.count_mean);
    opt(j, "fixed_count", c.fixed_count);
    opt(j, "amplitude_mean", c.amplitude_mean);
    opt(j, "amplitude_sd", c.amplitude_sd);
    opt(j, "volume_fraction", c.volume_fraction);
    opt(j, "axis_log_sd", c.axis_log_sd);
    opt(j, "min_distance_factor", c.min_distance_factor);
    opt(j, "max_distance_factor", c.max_distance_factor);
    opt(j, "gap_voxels", c.gap_voxels);
    opt(j, "smoothing_voxels", c.smoothing_voxels);
    opt(j, "padding_fraction", c.padding_fraction);
    opt(j, "max_attempts_per_source", c.max_attempts_per_source);
}

void to_json(Json &j, const SynthConfig &c) {
    j = Json{{"dims", c.dims},
             {"voxel_size", c.voxel},
             {"n_classes", c.n_classes},
             {"n_subjects", c.n_subjects},
             {"n_deformations", c.n_deformations},
             {"seed", c.seed},
             {"b0", c.b0},
             {"gmm", c.gmm},
             {"affine", c.affine},
             {"background", c.background}};
}
void from_json(const Json &j, SynthConfig &c) {
    check_keys(j,
               {"dims", "voxel_size", "n_classes", "n_subjects", "n_deformations", "seed", "b0", "gmm", "affine",
                "background"},
               "synth config");
    opt(j, "dims", c.dims);
    opt(j, "voxel_size", c.voxel);
    opt(j, "n_classes", c.n_classes);
    opt(j, "n_subjects", c.n_subjects);
    opt(j, "n_deformations", c.n_deformations);
    opt(j, "seed", c.seed);
    opt(j, "b0", c.b0);
    opt(j, "gmm", c.gmm);
    opt(j, "affine", c.affine);
    opt(j, "background", c.background);
}

void to_json(Json &j, const TrainConfig &c) {
    j = Json{{"epochs", c.epochs},
             {"batch_size", c.batch_size},
             {"lr", c.lr},
             {"betas", Json::array({c.beta1, c.beta2})},
             {"eps", c.eps},
             {"seed", c.seed},
             {"pretrain", c.pretrain},
             {"pretrain_epochs", c.pretrain_epochs},
             {"checkpoint_every", c.checkpoint_every},
             {"checkpoint_path", c.checkpoint_path},
             {"threads", c.threads},
             {"model", c.model}};
}
void from_json(const Json &j, TrainConfig &c) {
    check_keys(j,
               {"epochs", "batch_size", "lr", "betas", "eps", "seed", "pretrain", "pretrain_epochs",
                "checkpoint_every", "checkpoint_path", "threads", "model"},
               "train config");
    opt(j, "epochs", c.epochs);
    opt(j, "batch_size", c.batch_size);
    opt(j, "lr", c.lr);
    if (j.contains("betas")) {
        const auto &b = j.at("betas");
        if (!b.is_array() || b.size() != 2) fail(ErrorCode::Config, "betas must be an array of two numbers");
        c.beta1 = b[0].get<double>();
        c.beta2 = b[1].get<double>();
    }
    opt(j, "eps", c.eps);
    opt(j, "seed", c.seed);
    opt(j, "pretrain", c.pretrain);
    opt(j, "pretrain_epochs", c.pretrain_epochs);
    opt(j, "checkpoint_every", c.checkpoint_every);
    opt(j, "checkpoint_path", c.checkpoint_path);
    opt(j, "threads", c.threads);
    opt(j, "model", c.model);
}

void to_json(Json &j, const EpochRecord &r) {
    j = Json{{"stage", stage_name(r.stage)},
             {"epoch", r.epoch},
             {"loss", r.loss},
             {"chi_term", r.chi_term},
             {"lf_term", r.lf_term},
             {"seconds", r.seconds},
             {"param_norm", r.param_norm},
             {"steps", r.steps},
             {"min_bgnet_grad_norm", r.min_bgnet_grad_norm},
             {"min_varnet_grad_norm", r.min_varnet_grad_norm}};
}

Json load_json_file(const std::string &path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::Io, "cannot open config file " + path);
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::exception &e) {
        fail(ErrorCode::Config, path + ": " + e.what());
    }
}

} // namespace qsm
