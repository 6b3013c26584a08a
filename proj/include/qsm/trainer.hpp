#pragma once

#include <functional>
#include <string>
#include <vector>

#include "qsm/pipeline.hpp"
#include "qsm/synth.hpp"
#include "qsm/volio.hpp"

namespace qsm {

enum class Stage { BgNet = 0, VarNet = 1, EndToEnd = 2 };

const char *stage_name(Stage s) noexcept;
Stage stage_from_name(const std::string &name);

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 2;
    double lr = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;
    // Separate bgnet and varnet stages before the joint one.
    bool pretrain = true;
    std::size_t pretrain_epochs = 10;
    // Write a checkpoint every n epochs (0: only at the end of each stage).
    std::size_t checkpoint_every = 0;
    std::string checkpoint_path;
    // Samples of one batch are evaluated on this many threads.
    std::size_t threads = 1;
    ModelConfig model{};
};

// Throws Config on invalid values or if batch_size exceeds the dataset.
void validate(const TrainConfig &cfg, std::size_t dataset_size);

struct LossParts {
    double total = 0.0;
    double chi = 0.0; // in-mask mean |x_S - X|
    double lf = 0.0;  // in-mask mean |LF_pred - LF|
};

// Batch mean of the per-sample reconstruction error.
LossParts loss_recon(const std::vector<Volume3D> &x_hat, const std::vector<Volume3D> &x,
                     const std::vector<Volume3D> &lf_pred, const std::vector<Volume3D> &lf,
                     const std::vector<Mask3D> &masks);
LossParts loss_recon(const Volume3D &x_hat, const Volume3D &x, const Volume3D &lf_pred, const Volume3D &lf,
                     const Mask3D &mask);

struct EpochRecord {
    Stage stage = Stage::EndToEnd;
    std::size_t epoch = 0; // 1-based within the stage
    double loss = 0.0;
    double chi_term = 0.0;
    double lf_term = 0.0;
    double seconds = 0.0;
    double param_norm = 0.0;
    std::size_t steps = 0;
    // Smallest per-step gradient norm of each group during the epoch.
    double min_bgnet_grad_norm = 0.0;
    double min_varnet_grad_norm = 0.0;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
    std::string checkpoint_path;
};

struct TrainState {
    ModelParams params;
    AdamState adam;
    Stage stage = Stage::BgNet;
    std::size_t epoch = 0; // epochs completed in `stage`
};

TrainState initial_state(const TrainConfig &cfg);
Checkpoint to_checkpoint(const TrainState &s, const TrainConfig &cfg);
// Restores params, optimiser and position; the topology comes from cfg.model.
TrainState from_checkpoint(const Checkpoint &c, const TrainConfig &cfg);

using EpochCallback = std::function<void(const EpochRecord &, const TrainState &)>;

// Runs the remaining epochs of one stage (from state.epoch up to `epochs`).
// Entering a new stage resets the optimiser. Pretraining stages only update
// their own parameter group; the varnet stage feeds mask * LF as input.
TrainReport run_stage(TrainState &state, Stage stage, std::size_t epochs, const TrainConfig &cfg,
                      const std::vector<TrainingSample> &data, const EpochCallback &cb = {});

TrainReport pretrain_stage(TrainState &state, Stage which, const TrainConfig &cfg,
                           const std::vector<TrainingSample> &data, const EpochCallback &cb = {});

TrainReport train_end_to_end(TrainState &state, const TrainConfig &cfg, const std::vector<TrainingSample> &data,
                             const EpochCallback &cb = {});

// Full schedule: optional pretraining, then joint training, continuing from
// `state`. Checkpoints go to cfg.checkpoint_path when set.
TrainReport train(TrainState &state, const TrainConfig &cfg, const std::vector<TrainingSample> &data,
                  const EpochCallback &cb = {});

struct NoiseReport {
    double nrmse_clean = 0.0;
    double nrmse_noisy = 0.0;
    double ddnrmse_clean = 0.0;
    double ddnrmse_noisy = 0.0;
    double residual_clean = 0.0;
    double residual_noisy = 0.0;
    double delta_nrmse = 0.0;
    double delta_residual = 0.0;
};

// Runs the pipeline on sample.total_field with and without N(0, variance)
// noise added inside the mask.
NoiseReport evaluate_noise_robustness(const ModelParams &params, const ModelConfig &cfg, const TrainingSample &sample,
                                      double variance, std::uint64_t seed);

} // namespace qsm
