#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <unistd.h>

#include "model_fixtures.hpp"
#include "oracles.hpp"
#include "qsm/config.hpp"
#include "qsm/trainer.hpp"

using namespace qsm;
namespace fs = std::filesystem;

namespace {

const std::vector<TrainingSample> &tiny_data() {
    static const std::vector<TrainingSample> data = generate_dataset(fixtures::tiny_synth(8, 4, 17));
    return data;
}

TrainConfig tiny_train(std::size_t epochs) {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = 2;
    tc.seed = 5;
    tc.pretrain = false;
    tc.model = fixtures::tiny_model(2);
    return tc;
}

double loss_ref(const Volume3D &xh, const Volume3D &x, const Volume3D &lp, const Volume3D &lf, const Mask3D &m) {
    double a = 0, b = 0, n = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (m[i]) {
            a += std::abs(xh[i] - x[i]);
            b += std::abs(lp[i] - lf[i]);
            n += 1;
        }
    return a / n + b / n;
}

} // namespace

TEST_CASE("loss_recon examples") {
    const Dims d{6, 6, 6};
    Mask3D m(d, false);
    for (std::size_t n = 0; n < d.size(); n += 2) m.set(n, true);
    const auto x = oracle::random_volume(d, 1), lf = oracle::random_volume(d, 2);
    CHECK(loss_recon(x, x, lf, lf, m).total == 0.0);

    Volume3D shifted = x;
    for (std::size_t n = 0; n < d.size(); ++n)
        if (m[n]) shifted[n] += 1.0;
    const auto l = loss_recon(shifted, x, lf, lf, m);
    CHECK(l.total == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(l.chi == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(l.lf == 0.0);

    const auto xh = oracle::random_volume(d, 3), lp = oracle::random_volume(d, 4);
    CHECK(std::abs(loss_recon(xh, x, lp, lf, m).total - loss_ref(xh, x, lp, lf, m)) < 1e-12);

    const auto x2 = oracle::random_volume(d, 5);
    const auto batch = loss_recon({xh, x2}, {x, x}, {lp, lf}, {lf, lf}, {m, m});
    CHECK(batch.total == doctest::Approx((loss_ref(xh, x, lp, lf, m) + loss_ref(x2, x, lf, lf, m)) / 2).epsilon(1e-12));
    CHECK_THROWS_AS(loss_recon({xh}, {x, x}, {lp}, {lf}, {m}), Error);
    CHECK_THROWS_AS(loss_recon(xh, x, lp, lf, Mask3D(d, false)), Error);
}

TEST_CASE("configuration validation") {
    TrainConfig paper;
    paper.epochs = 50;
    paper.batch_size = 2;
    paper.lr = 4e-4;
    CHECK_NOTHROW(validate(paper, 840));
    auto bad = paper;
    bad.batch_size = 0;
    CHECK_THROWS_AS(validate(bad, 10), Error);
    bad = paper;
    bad.lr = -1;
    CHECK_THROWS_AS(validate(bad, 10), Error);
    bad = paper;
    bad.beta2 = 1.0;
    CHECK_THROWS_AS(validate(bad, 10), Error);
    CHECK_THROWS_AS(validate(paper, 1), Error);
    CHECK_THROWS_AS(validate(paper, 0), Error);
    CHECK(stage_from_name(stage_name(Stage::VarNet)) == Stage::VarNet);
    CHECK_THROWS_AS(stage_from_name("warmup"), Error);
}

TEST_CASE("configuration JSON round trip and unknown keys") {
    TrainConfig tc = tiny_train(3);
    tc.lr = 1e-3;
    tc.beta2 = 0.99;
    tc.model.varnet.lambda_init = 1.5;
    tc.model.varnet.lambda_schedule = VarNetConfig::LambdaSchedule::Constant;
    const Json j = tc;
    CHECK(j.at("betas") == Json::array({0.9, 0.99}));
    const auto back = config_from_json<TrainConfig>(j);
    CHECK(Json(back) == j);

    SynthConfig sc = fixtures::tiny_synth(12, 3, 9);
    sc.background.count_mean = 20;
    CHECK(Json(config_from_json<SynthConfig>(Json(sc))) == Json(sc));

    CHECK(config_from_json<TrainConfig>(Json::parse(R"({"epochs": 7})")).epochs == 7);
    CHECK_THROWS_AS(config_from_json<TrainConfig>(Json::parse(R"({"epochz": 7})")), Error);
    CHECK_THROWS_AS(config_from_json<TrainConfig>(Json::parse(R"({"epochs": "many"})")), Error);
    CHECK_THROWS_AS(config_from_json<SynthConfig>(Json::parse(R"({"dims": [8, 8]})")), Error);
    CHECK_THROWS_AS(config_from_json<ModelConfig>(Json::parse(R"({"varnet": {"lambda_schedule": "cosine"}})")), Error);
}

TEST_CASE("one epoch on two samples reports one entry") {
    const std::vector<TrainingSample> two(tiny_data().begin(), tiny_data().begin() + 2);
    TrainConfig tc = tiny_train(1);
    TrainState st = initial_state(tc);
    const auto rep = train(st, tc, two);
    REQUIRE(rep.epochs.size() == 1);
    CHECK(rep.epochs[0].steps == 1);
    CHECK(rep.epochs[0].chi_term > 0.0);
    CHECK(rep.epochs[0].lf_term > 0.0);
    CHECK(rep.epochs[0].loss == doctest::Approx(rep.epochs[0].chi_term + rep.epochs[0].lf_term));
}

TEST_CASE("lr = 0 leaves parameters and loss unchanged") {
    TrainConfig tc = tiny_train(3);
    tc.lr = 0.0;
    TrainState st = initial_state(tc);
    const auto before = st.params;
    const auto rep = train(st, tc, tiny_data());
    CHECK(st.params == before);
    REQUIRE(rep.epochs.size() == 3);
    for (const auto &e : rep.epochs) CHECK(std::abs(e.loss - rep.epochs[0].loss) < 1e-12);
}

TEST_CASE("training is deterministic, also across thread counts") {
    auto run = [](std::size_t threads) {
        TrainConfig tc = tiny_train(2);
        tc.threads = threads;
        TrainState st = initial_state(tc);
        const auto rep = train(st, tc, tiny_data());
        std::vector<double> losses;
        for (const auto &e : rep.epochs) losses.push_back(e.loss);
        return std::make_pair(st.params.checksum(), losses);
    };
    const auto a = run(1);
    CHECK(a == run(1));
    CHECK(a == run(2));
}

TEST_CASE("checkpoint reload reproduces the uninterrupted run") {
    const fs::path dir = fs::temp_directory_path() / ("qsm_trainer_" + std::to_string(::getpid()));
    TrainConfig full = tiny_train(4);
    TrainState a = initial_state(full);
    const auto rep_a = train(a, full, tiny_data());

    TrainConfig first = tiny_train(2);
    first.checkpoint_path = (dir / "ck.nxc").string();
    TrainState b = initial_state(first);
    train(b, first, tiny_data());
    const auto ck = read_checkpoint(first.checkpoint_path);
    TrainConfig rest = tiny_train(4);
    TrainState c = from_checkpoint(ck, rest);
    CHECK(c.epoch == 2);
    CHECK(c.stage == Stage::EndToEnd);
    const auto rep_c = train(c, rest, tiny_data());
    REQUIRE(rep_c.epochs.size() == 2);
    CHECK(rep_c.epochs[0].loss == rep_a.epochs[2].loss);
    CHECK(rep_c.epochs[1].loss == rep_a.epochs[3].loss);
    CHECK(c.params == a.params);
    CHECK(c.adam == a.adam);
    fs::remove_all(dir);
}

TEST_CASE("both parameter groups receive gradient in joint training") {
    TrainConfig tc = tiny_train(1);
    TrainState st = initial_state(tc);
    const auto rep = train(st, tc, tiny_data());
    CHECK(rep.epochs[0].min_bgnet_grad_norm > 0.0);
    CHECK(rep.epochs[0].min_varnet_grad_norm > 0.0);
}

TEST_CASE("pretraining stages touch only their own group") {
    TrainConfig tc = tiny_train(0);
    tc.pretrain = true;
    tc.pretrain_epochs = 1;
    TrainState st = initial_state(tc);
    const auto p0 = st.params;
    pretrain_stage(st, Stage::BgNet, tc, tiny_data());
    CHECK(st.params.group_norm("varnet.") == p0.group_norm("varnet."));
    CHECK(st.params.group_norm("bgnet.") != p0.group_norm("bgnet."));
    const auto p1 = st.params;
    pretrain_stage(st, Stage::VarNet, tc, tiny_data());
    CHECK(st.params.group_norm("bgnet.") == p1.group_norm("bgnet."));
    CHECK(st.params.group_norm("varnet.") != p1.group_norm("varnet."));
    CHECK_THROWS_AS(pretrain_stage(st, Stage::BgNet, tc, tiny_data()), Error);
    CHECK_THROWS_AS(pretrain_stage(st, Stage::EndToEnd, tc, tiny_data()), Error);
}

TEST_CASE("bgnet pretraining on 20 samples at 16^3 lowers the loss") {
    const auto data = generate_dataset(fixtures::tiny_synth(16, 20, 23));
    TrainConfig tc = tiny_train(0);
    tc.pretrain = true;
    tc.pretrain_epochs = 10;
    tc.model.bgnet.unet = {2, 4, 3, 1, 0.1, 1, 1};
    tc.lr = 2e-3;
    TrainState st = initial_state(tc);
    const auto rep = pretrain_stage(st, Stage::BgNet, tc, data);
    REQUIRE(rep.epochs.size() == 10);
    // least-squares slope of loss against epoch
    double sx = 0, sy = 0, sxy = 0, sxx = 0;
    for (std::size_t e = 0; e < 10; ++e) {
        const double y = rep.epochs[e].loss;
        sx += e;
        sy += y;
        sxy += e * y;
        sxx += e * e;
    }
    CHECK((10 * sxy - sx * sy) / (10 * sxx - sx * sx) < 0.0);
    CHECK(rep.epochs.back().loss < rep.epochs.front().loss);
}

TEST_CASE("noise robustness report") {
    TrainConfig tc = tiny_train(1);
    TrainState st = initial_state(tc);
    train(st, tc, tiny_data());
    const auto &s = tiny_data()[0];
    const auto zero = evaluate_noise_robustness(st.params, tc.model, s, 0.0, 3);
    CHECK(zero.delta_nrmse == 0.0);
    CHECK(zero.delta_residual == 0.0);
    const auto noisy = evaluate_noise_robustness(st.params, tc.model, s, 0.005, 3);
    CHECK(std::isfinite(noisy.residual_noisy));
    CHECK(noisy.nrmse_noisy != noisy.nrmse_clean);
}

TEST_CASE("non-finite data aborts training") {
    auto data = std::vector<TrainingSample>(tiny_data().begin(), tiny_data().begin() + 2);
    for (std::size_t n = 0; n < data[1].mask.size(); ++n)
        if (data[1].mask[n]) {
            data[1].chi[n] = NAN;
            break;
        }
    TrainConfig tc = tiny_train(1);
    TrainState st = initial_state(tc);
    try {
        train(st, tc, data);
        FAIL("expected divergence");
    } catch (const Error &e) {
        CHECK(e.code() == ErrorCode::TrainingDiverged);
    }
}
