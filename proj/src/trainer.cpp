#include "qsm/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

#include "qsm/config.hpp"
#include "qsm/metrics.hpp"

namespace qsm {

const char *stage_name(Stage s) noexcept {
    switch (s) {
    case Stage::BgNet: return "bgnet";
    case Stage::VarNet: return "varnet";
    case Stage::EndToEnd: return "end_to_end";
    }
    return "?";
}

Stage stage_from_name(const std::string &name) {
    for (Stage s : {Stage::BgNet, Stage::VarNet, Stage::EndToEnd})
        if (name == stage_name(s)) return s;
    fail(ErrorCode::Config, "unknown training stage '" + name + "'");
}

void validate(const TrainConfig &cfg, std::size_t dataset_size) {
    if (cfg.batch_size == 0) fail(ErrorCode::Config, "batch_size must be positive");
    if (cfg.lr < 0.0 || !std::isfinite(cfg.lr)) fail(ErrorCode::Config, "lr must be finite and non-negative");
    if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
        fail(ErrorCode::Config, "Adam betas must lie in [0, 1)");
    if (!(cfg.eps > 0.0)) fail(ErrorCode::Config, "Adam epsilon must be positive");
    if (cfg.threads == 0) fail(ErrorCode::Config, "threads must be positive");
    if (cfg.model.varnet.steps == 0) fail(ErrorCode::Config, "varnet needs at least one step");
    if (cfg.model.bgnet.unet.depth == 0) fail(ErrorCode::Config, "bgnet depth must be at least 1");
    if (dataset_size == 0) fail(ErrorCode::Config, "training dataset is empty");
    if (cfg.batch_size > dataset_size)
        fail(ErrorCode::Config, "batch_size " + std::to_string(cfg.batch_size) + " exceeds dataset size " +
                                    std::to_string(dataset_size));
}

// ---------------------------------------------------------------------------

namespace {

double masked_mean_abs(const Volume3D &a, const Volume3D &b, const Mask3D &m) {
    require_same_dims(a.dims(), b.dims(), "loss_recon");
    require_same_dims(a.dims(), m.dims(), "loss_recon");
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (m[i]) {
            s += std::abs(a[i] - b[i]);
            ++n;
        }
    if (n == 0) fail(ErrorCode::InvalidInput, "loss_recon: empty mask");
    return s / static_cast<double>(n);
}

} // namespace

LossParts loss_recon(const Volume3D &x_hat, const Volume3D &x, const Volume3D &lf_pred, const Volume3D &lf,
                     const Mask3D &mask) {
    LossParts p;
    p.chi = masked_mean_abs(x_hat, x, mask);
    p.lf = masked_mean_abs(lf_pred, lf, mask);
    p.total = p.chi + p.lf;
    return p;
}

LossParts loss_recon(const std::vector<Volume3D> &x_hat, const std::vector<Volume3D> &x,
                     const std::vector<Volume3D> &lf_pred, const std::vector<Volume3D> &lf,
                     const std::vector<Mask3D> &masks) {
    const std::size_t n = x_hat.size();
    if (n == 0 || x.size() != n || lf_pred.size() != n || lf.size() != n || masks.size() != n)
        fail(ErrorCode::DimensionMismatch, "loss_recon: batch sizes differ or are zero");
    LossParts acc;
    for (std::size_t i = 0; i < n; ++i) {
        const LossParts p = loss_recon(x_hat[i], x[i], lf_pred[i], lf[i], masks[i]);
        acc.chi += p.chi;
        acc.lf += p.lf;
    }
    acc.chi /= static_cast<double>(n);
    acc.lf /= static_cast<double>(n);
    acc.total = acc.chi + acc.lf;
    return acc;
}

// ---------------------------------------------------------------------------

TrainState initial_state(const TrainConfig &cfg) {
    TrainState s;
    s.params = init_model(cfg.model, cfg.seed);
    s.stage = cfg.pretrain ? Stage::BgNet : Stage::EndToEnd;
    s.adam.lr = cfg.lr;
    s.adam.beta1 = cfg.beta1;
    s.adam.beta2 = cfg.beta2;
    s.adam.eps = cfg.eps;
    return s;
}

Checkpoint to_checkpoint(const TrainState &s, const TrainConfig &cfg) {
    Checkpoint c;
    c.params = s.params;
    c.adam = s.adam;
    Json meta;
    meta["stage"] = stage_name(s.stage);
    meta["epoch"] = s.epoch;
    meta["model"] = cfg.model;
    meta["train"] = cfg;
    c.metadata = meta.dump();
    return c;
}

TrainState from_checkpoint(const Checkpoint &c, const TrainConfig &cfg) {
    TrainState s;
    s.params = init_model(cfg.model, cfg.seed);
    load_params_into(c, s.params);
    s.adam = c.adam;
    Json meta;
    try {
        meta = Json::parse(c.metadata);
    } catch (const nlohmann::json::exception &e) {
        fail(ErrorCode::Config, std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    s.stage = meta.contains("stage") ? stage_from_name(meta["stage"].get<std::string>()) : Stage::EndToEnd;
    s.epoch = meta.value("epoch", std::size_t{0});
    return s;
}

// ---------------------------------------------------------------------------

namespace {

struct SampleResult {
    Gradients grads;
    LossParts loss;
};

SampleResult run_sample(const ModelParams &params, Stage stage, const ModelConfig &mc, const DipoleOperator &op,
                        const TrainingSample &s) {
    nn::Tape tape;
    ParamBinder bind(tape, params);
    SampleResult r;
    nn::Tensor loss;
    switch (stage) {
    case Stage::BgNet: {
        nn::Tensor lf_pred = bgnet_forward(bind, mc.bgnet, s.total_field, s.mask);
        loss = nn::masked_mean_abs_diff(lf_pred, nn::from_volume(tape, s.local_field), s.mask);
        r.loss.lf = loss.item();
        break;
    }
    case Stage::VarNet: {
        nn::Tensor y = nn::from_volume(tape, apply_mask(s.local_field, s.mask));
        nn::Tensor x = varnet_reconstruct(bind, mc.varnet, op, y, y, s.mask);
        loss = nn::masked_mean_abs_diff(x, nn::from_volume(tape, s.chi), s.mask);
        r.loss.chi = loss.item();
        break;
    }
    case Stage::EndToEnd: {
        const PipelineOutput o = pipeline_forward(bind, mc, op, s.total_field, s.mask);
        nn::Tensor chi_term = nn::masked_mean_abs_diff(o.chi, nn::from_volume(tape, s.chi), s.mask);
        nn::Tensor lf_term = nn::masked_mean_abs_diff(o.lf_pred, nn::from_volume(tape, s.local_field), s.mask);
        loss = nn::add(chi_term, lf_term);
        r.loss.chi = chi_term.item();
        r.loss.lf = lf_term.item();
        break;
    }
    }
    r.loss.total = loss.item();
    if (!std::isfinite(r.loss.total))
        fail(ErrorCode::TrainingDiverged, std::string("non-finite loss in stage ") + stage_name(stage) + " (sample seed " +
                                              std::to_string(s.seed) + ")");
    r.grads = backward(tape, loss, bind);
    return r;
}

std::vector<SampleResult> run_batch(const ModelParams &params, Stage stage, const ModelConfig &mc,
                                    const DipoleOperator &op, const std::vector<TrainingSample> &data,
                                    const std::vector<std::size_t> &idx, std::size_t threads) {
    std::vector<SampleResult> out(idx.size());
    if (threads <= 1 || idx.size() == 1) {
        for (std::size_t i = 0; i < idx.size(); ++i) out[i] = run_sample(params, stage, mc, op, data[idx[i]]);
        return out;
    }
    std::vector<std::exception_ptr> errors(idx.size());
    std::vector<std::thread> pool;
    const std::size_t nt = std::min(threads, idx.size());
    for (std::size_t t = 0; t < nt; ++t)
        pool.emplace_back([&, t] {
            for (std::size_t i = t; i < idx.size(); i += nt) {
                try {
                    out[i] = run_sample(params, stage, mc, op, data[idx[i]]);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto &th : pool) th.join();
    for (auto &e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

Gradients restrict_to(const Gradients &g, const std::string &prefix) {
    Gradients out;
    for (const auto &[name, v] : g)
        if (name.compare(0, prefix.size(), prefix) == 0 && name.size() > prefix.size() && name[prefix.size()] == '.')
            out.emplace(name, v);
    return out;
}

void maybe_checkpoint(const TrainState &s, const TrainConfig &cfg, bool force) {
    if (cfg.checkpoint_path.empty()) return;
    if (!force && (cfg.checkpoint_every == 0 || s.epoch % cfg.checkpoint_every != 0)) return;
    write_checkpoint(cfg.checkpoint_path, to_checkpoint(s, cfg));
}

} // namespace

TrainReport run_stage(TrainState &state, Stage stage, std::size_t epochs, const TrainConfig &cfg,
                      const std::vector<TrainingSample> &data, const EpochCallback &cb) {
    validate(cfg, data.size());
    const Dims dims = data.front().chi.dims();
    const VoxelSize voxel = data.front().chi.voxel_size();
    for (const auto &s : data)
        if (s.chi.dims() != dims || s.chi.voxel_size() != voxel)
            fail(ErrorCode::DimensionMismatch, "all training samples must share one grid");
    const DipoleOperator op(KGrid(dims, voxel), cfg.model.b0);

    if (state.stage != stage) {
        if (static_cast<int>(state.stage) > static_cast<int>(stage))
            fail(ErrorCode::Config, std::string("state is already past stage ") + stage_name(stage));
        state.stage = stage;
        state.epoch = 0;
        state.adam = AdamState{};
    }
    state.adam.lr = cfg.lr;
    state.adam.beta1 = cfg.beta1;
    state.adam.beta2 = cfg.beta2;
    state.adam.eps = cfg.eps;

    TrainReport report;
    report.checkpoint_path = cfg.checkpoint_path;
    while (state.epoch < epochs) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(data.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::mt19937_64 rng(mix_seed(mix_seed(cfg.seed, 0x7A11 + static_cast<std::uint64_t>(stage)), state.epoch));
        std::shuffle(order.begin(), order.end(), rng);

        EpochRecord rec;
        rec.stage = stage;
        rec.epoch = state.epoch + 1;
        rec.min_bgnet_grad_norm = INFINITY;
        rec.min_varnet_grad_norm = INFINITY;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                               order.begin() + static_cast<long>(std::min(order.size(), start + cfg.batch_size)));
            const auto results = run_batch(state.params, stage, cfg.model, op, data, idx, cfg.threads);
            Gradients g;
            for (const auto &r : results) {
                accumulate(g, r.grads, 1.0 / static_cast<double>(idx.size()));
                rec.loss += r.loss.total;
                rec.chi_term += r.loss.chi;
                rec.lf_term += r.loss.lf;
            }
            if (stage == Stage::BgNet) g = restrict_to(g, kBgNetPrefix);
            if (stage == Stage::VarNet) g = restrict_to(g, kVarNetPrefix);
            rec.min_bgnet_grad_norm = std::min(rec.min_bgnet_grad_norm, gradient_norm(g, std::string(kBgNetPrefix) + "."));
            rec.min_varnet_grad_norm =
                std::min(rec.min_varnet_grad_norm, gradient_norm(g, std::string(kVarNetPrefix) + "."));
            adam_step(state.params, g, state.adam);
            ++rec.steps;
        }
        const double n = static_cast<double>(data.size());
        rec.loss /= n;
        rec.chi_term /= n;
        rec.lf_term /= n;
        rec.param_norm = state.params.norm();
        if (!std::isfinite(rec.param_norm)) fail(ErrorCode::TrainingDiverged, "parameters became non-finite");
        ++state.epoch;
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.epochs.push_back(rec);
        maybe_checkpoint(state, cfg, state.epoch == epochs);
        if (cb) cb(rec, state);
    }
    return report;
}

TrainReport pretrain_stage(TrainState &state, Stage which, const TrainConfig &cfg,
                           const std::vector<TrainingSample> &data, const EpochCallback &cb) {
    if (which == Stage::EndToEnd) fail(ErrorCode::Config, "pretraining applies to bgnet or varnet only");
    return run_stage(state, which, cfg.pretrain_epochs, cfg, data, cb);
}

TrainReport train_end_to_end(TrainState &state, const TrainConfig &cfg, const std::vector<TrainingSample> &data,
                             const EpochCallback &cb) {
    return run_stage(state, Stage::EndToEnd, cfg.epochs, cfg, data, cb);
}

TrainReport train(TrainState &state, const TrainConfig &cfg, const std::vector<TrainingSample> &data,
                  const EpochCallback &cb) {
    TrainReport all;
    all.checkpoint_path = cfg.checkpoint_path;
    auto append = [&](const TrainReport &r) { all.epochs.insert(all.epochs.end(), r.epochs.begin(), r.epochs.end()); };
    if (cfg.pretrain && cfg.pretrain_epochs > 0) {
        if (state.stage == Stage::BgNet) append(pretrain_stage(state, Stage::BgNet, cfg, data, cb));
        if (state.stage != Stage::EndToEnd) append(pretrain_stage(state, Stage::VarNet, cfg, data, cb));
    }
    append(train_end_to_end(state, cfg, data, cb));
    return all;
}

// ---------------------------------------------------------------------------

NoiseReport evaluate_noise_robustness(const ModelParams &params, const ModelConfig &cfg, const TrainingSample &sample,
                                      double variance, std::uint64_t seed) {
    const InferResult clean = infer(params, cfg, sample.total_field, sample.mask);
    const Volume3D noisy_tf = apply_mask(add_gaussian_noise(sample.total_field, 0.0, variance, seed), sample.mask);
    const InferResult noisy = infer(params, cfg, noisy_tf, sample.mask);
    NoiseReport r;
    r.nrmse_clean = nrmse(clean.chi, sample.chi, sample.mask);
    r.nrmse_noisy = nrmse(noisy.chi, sample.chi, sample.mask);
    r.ddnrmse_clean = ddnrmse(clean.chi, sample.chi, sample.mask);
    r.ddnrmse_noisy = ddnrmse(noisy.chi, sample.chi, sample.mask);
    r.residual_clean = clean.residual;
    r.residual_noisy = noisy.residual;
    r.delta_nrmse = r.nrmse_noisy - r.nrmse_clean;
    r.delta_residual = r.residual_noisy - r.residual_clean;
    return r;
}

} // namespace qsm
