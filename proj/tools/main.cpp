// qsmpipe: command-line front end over the C API.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "handles.hpp"

using nlohmann::json;

namespace {

json read_json(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw cli::ApiError(QSM_ERR_IO, "cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception &e) {
        throw cli::ApiError(QSM_ERR_CONFIG, path + ": " + e.what());
    }
}

void write_text(const std::string &path, const std::string &text) {
    std::ofstream out(path);
    if (!out) throw cli::ApiError(QSM_ERR_IO, "cannot write " + path);
    out << text;
    if (!out) throw cli::ApiError(QSM_ERR_IO, "write error on " + path);
}

std::uint64_t fnv1a(const double *p, std::size_t n) {
    std::uint64_t h = 1469598103934665603ULL;
    const auto *b = reinterpret_cast<const unsigned char *>(p);
    for (std::size_t i = 0; i < n * sizeof(double); ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
    }
    return h;
}

std::size_t voxel_count(const qsm_volume *v) {
    std::size_t d[3];
    cli::check(qsm_volume_shape(v, d, nullptr));
    return d[0] * d[1] * d[2];
}

std::string hex(std::uint64_t x) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
    return buf;
}

std::vector<double> b0_or_default(const std::vector<double> &b0) {
    if (b0.empty()) return {0.0, 0.0, 1.0};
    if (b0.size() != 3) throw cli::ApiError(QSM_ERR_CONFIG, "--b0 needs three components");
    return b0;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string config, out;
    std::optional<std::uint64_t> seed;
    std::vector<std::size_t> dims;
    std::optional<std::size_t> subjects, deformations, classes;
};

int run_synth(const SynthArgs &a) {
    json cfg = a.config.empty() ? json::object() : read_json(a.config);
    if (a.seed) cfg["seed"] = *a.seed;
    if (!a.dims.empty()) {
        if (a.dims.size() != 3) throw cli::ApiError(QSM_ERR_CONFIG, "--dims needs three values");
        cfg["dims"] = a.dims;
    }
    if (a.subjects) cfg["n_subjects"] = *a.subjects;
    if (a.deformations) cfg["n_deformations"] = *a.deformations;
    if (a.classes) cfg["n_classes"] = *a.classes;
    std::size_t n = 0;
    char *effective = nullptr;
    cli::check(qsm_synth_generate(cfg.dump().c_str(), a.out.c_str(), &n, &effective));
    const json report{{"effective_config", json::parse(cli::take(effective))},
                      {"samples", n},
                      {"manifest", (std::filesystem::path(a.out) / "manifest.json").string()}};
    std::cout << report.dump(2) << "\n";
    return 0;
}

struct ForwardArgs {
    std::string chi, out;
    std::vector<double> b0;
    bool pad = false;
    double noise_variance = 0.0;
    std::uint64_t seed = 0;
};

int run_forward(const ForwardArgs &a) {
    auto chi = cli::read_volume(a.chi);
    const auto b0 = b0_or_default(a.b0);
    qsm_volume *f = nullptr;
    cli::check(qsm_dipole_forward(chi.get(), b0.data(), a.pad ? 1 : 0, &f));
    cli::Volume field(f);
    if (a.noise_variance > 0.0) {
        qsm_volume *n = nullptr;
        cli::check(qsm_add_noise(field.get(), 0.0, a.noise_variance, a.seed, &n));
        field.reset(n);
    }
    cli::check(qsm_volume_write(field.get(), a.out.c_str(), QSM_F64));
    std::cout << json{{"output", a.out}, {"b0", b0}, {"pad", a.pad}, {"noise_variance", a.noise_variance}}.dump()
              << "\n";
    return 0;
}

struct TrainArgs {
    std::string config, data, checkpoint, resume, report;
    std::optional<std::size_t> epochs, batch_size, pretrain_epochs, steps;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
    bool no_pretrain = false;
};

void epoch_line(const char *line, void *user) {
    std::cout << line << std::endl;
    if (auto *f = static_cast<std::ofstream *>(user)) *f << line << std::endl;
}

int run_train(const TrainArgs &a, std::size_t threads) {
    json cfg = a.config.empty() ? json::object() : read_json(a.config);
    if (a.epochs) cfg["epochs"] = *a.epochs;
    if (a.batch_size) cfg["batch_size"] = *a.batch_size;
    if (a.pretrain_epochs) cfg["pretrain_epochs"] = *a.pretrain_epochs;
    if (a.lr) cfg["lr"] = *a.lr;
    if (a.seed) cfg["seed"] = *a.seed;
    if (a.no_pretrain) cfg["pretrain"] = false;
    if (a.steps) cfg["model"]["varnet"]["steps"] = *a.steps;
    if (!a.checkpoint.empty()) cfg["checkpoint_path"] = a.checkpoint;
    cfg["threads"] = threads;
    std::cout << json{{"effective_config", cfg}}.dump() << std::endl;

    qsm_dataset *d = nullptr;
    cli::check(qsm_dataset_load(a.data.c_str(), &d));
    cli::Dataset data(d);
    std::ofstream report_file;
    if (!a.report.empty()) {
        report_file.open(a.report);
        if (!report_file) throw cli::ApiError(QSM_ERR_IO, "cannot write " + a.report);
    }
    qsm_model *m = nullptr;
    char *rep = nullptr;
    cli::check(qsm_train(cfg.dump().c_str(), data.get(), a.resume.empty() ? nullptr : a.resume.c_str(), epoch_line,
                         report_file.is_open() ? &report_file : nullptr, &m, &rep));
    cli::Model model(m);
    json summary = json::parse(cli::take(rep));
    summary.erase("epochs");
    std::cout << json{{"summary", summary}}.dump() << std::endl;
    return 0;
}

struct InferArgs {
    std::string checkpoint, tf, mask, out_chi, out_lf, report, gt;
    double phase_scale = 1.0;
    double noise_variance = 0.005;
    std::uint64_t seed = 0;
};

int run_infer(const InferArgs &a) {
    auto model = cli::load_model(a.checkpoint);
    auto tf = cli::read_volume(a.tf);
    auto mask = cli::read_mask(a.mask);
    if (a.phase_scale != 1.0) cli::check(qsm_volume_scale(tf.get(), a.phase_scale));
    cli::check(qsm_volume_apply_mask(tf.get(), mask.get()));
    qsm_volume *chi = nullptr, *lf = nullptr;
    double residual = 0.0, seconds = 0.0;
    cli::check(qsm_infer(model.get(), tf.get(), mask.get(), &chi, &lf, &residual, &seconds));
    cli::Volume chi_v(chi), lf_v(lf);
    cli::check(qsm_volume_write(chi_v.get(), a.out_chi.c_str(), QSM_F64));
    cli::check(qsm_volume_write(lf_v.get(), a.out_lf.c_str(), QSM_F64));
    json report{{"checkpoint", a.checkpoint},
                {"total_field", a.tf},
                {"mask", a.mask},
                {"phase_scale", a.phase_scale},
                {"chi", a.out_chi},
                {"lf_pred", a.out_lf},
                {"data_consistency_residual", residual},
                {"seconds", seconds}};
    if (!a.gt.empty()) {
        auto gt = cli::read_volume(a.gt);
        double n = 0, dd = 0, s = 0;
        cli::check(qsm_metrics(chi_v.get(), gt.get(), mask.get(), &n, &dd, &s));
        report["metrics"] = {{"nrmse", n}, {"ddnrmse", dd}, {"ssim", s}};
        char *noise = nullptr;
        cli::check(qsm_noise_robustness(model.get(), tf.get(), mask.get(), gt.get(), a.noise_variance, a.seed, &noise));
        report["noise_robustness"] = json::parse(cli::take(noise));
    }
    const std::string text = report.dump(2) + "\n";
    if (!a.report.empty()) write_text(a.report, text);
    std::cout << text;
    return 0;
}

struct BaselineArgs {
    std::string method = "tkd", field, mask, out;
    std::vector<double> b0;
    double threshold = 0.2;
    double mu = 0.1;
    std::size_t max_iterations = 500;
    double tolerance = 1e-6;
};

cli::Volume run_method(const std::string &method, const qsm_volume *field, const std::vector<double> &b0,
                       const BaselineArgs &a, json &info) {
    qsm_volume *out = nullptr;
    if (method == "tkd") {
        cli::check(qsm_tkd(field, b0.data(), a.threshold, &out));
        info["threshold"] = a.threshold;
    } else if (method == "cg") {
        std::size_t it = 0;
        int conv = 0;
        cli::check(qsm_cg_tikhonov(field, b0.data(), a.mu, a.max_iterations, a.tolerance, &out, &it, &conv));
        info["mu"] = a.mu;
        info["iterations"] = it;
        info["converged"] = conv != 0;
        if (!conv) std::cerr << "warning: CG stopped at the iteration cap before reaching the tolerance\n";
    } else {
        throw cli::ApiError(QSM_ERR_CONFIG, "unknown baseline method '" + method + "'");
    }
    return cli::Volume(out);
}

int run_baseline(const BaselineArgs &a) {
    auto field = cli::read_volume(a.field);
    std::optional<cli::Mask> mask;
    if (!a.mask.empty()) {
        mask = cli::read_mask(a.mask);
        cli::check(qsm_volume_apply_mask(field.get(), mask->get()));
    }
    json info{{"method", a.method}, {"field", a.field}, {"output", a.out}};
    auto chi = run_method(a.method, field.get(), b0_or_default(a.b0), a, info);
    if (mask) cli::check(qsm_volume_apply_mask(chi.get(), mask->get()));
    cli::check(qsm_volume_write(chi.get(), a.out.c_str(), QSM_F64));
    std::cout << info.dump() << "\n";
    return 0;
}

struct EvalArgs {
    std::string gt, mask, csv, json_out;
    std::vector<std::string> inputs; // name=path
};

int run_eval(const EvalArgs &a) {
    auto gt = cli::read_volume(a.gt);
    auto mask = cli::read_mask(a.mask);
    std::size_t count = 0;
    cli::check(qsm_mask_count(mask.get(), &count));
    std::ostringstream csv;
    csv << "Method,NRMSE,ddNRMSE,SSIM\n";
    json rows = json::array();
    for (const auto &spec : a.inputs) {
        const auto eq = spec.find('=');
        const std::string name = eq == std::string::npos ? spec : spec.substr(0, eq);
        const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
        auto x = cli::read_volume(path);
        double n = 0, dd = 0, s = 0;
        cli::check(qsm_metrics(x.get(), gt.get(), mask.get(), &n, &dd, &s));
        char line[256];
        std::snprintf(line, sizeof line, "%s,%.4f,%.4f,%.6f\n", name.c_str(), n, dd, s);
        csv << line;
        rows.push_back({{"method", name}, {"path", path}, {"nrmse", n}, {"ddnrmse", dd}, {"ssim", s}, {"mask_voxels", count}});
    }
    if (!a.csv.empty()) write_text(a.csv, csv.str());
    if (!a.json_out.empty()) write_text(a.json_out, rows.dump(2) + "\n");
    std::cout << csv.str();
    return 0;
}

struct SliceArgs {
    std::string in, mask, out;
    char axis = 'z';
    std::optional<std::size_t> index;
};

double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double h = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

int run_slice(const SliceArgs &a) {
    auto vol = cli::read_volume(a.in);
    std::size_t d[3];
    cli::check(qsm_volume_shape(vol.get(), d, nullptr));
    const double *data = qsm_volume_data(vol.get());
    const std::size_t n = d[0] * d[1] * d[2];
    std::optional<cli::Mask> mask;
    if (!a.mask.empty()) mask = cli::read_mask(a.mask);
    std::vector<double> vals;
    for (std::size_t i = 0; i < n; ++i) {
        int in = 1;
        if (mask) cli::check(qsm_mask_get(mask->get(), i, &in));
        if (in) vals.push_back(data[i]);
    }
    if (vals.empty()) throw cli::ApiError(QSM_ERR_INVALID_INPUT, "mask is empty");
    const double lo = percentile(vals, 0.01), hi = percentile(vals, 0.99);

    const int ax = a.axis == 'x' ? 0 : (a.axis == 'y' ? 1 : 2);
    const std::size_t idx = a.index.value_or(d[ax] / 2);
    if (idx >= d[ax]) throw cli::ApiError(QSM_ERR_INVALID_INPUT, "slice index out of range");
    // Rows and columns are the two remaining axes in x, y, z order.
    const int ra = ax == 0 ? 1 : 0, ca = ax == 2 ? 1 : 2;
    const std::size_t rows = d[ra], cols = d[ca];
    std::string img;
    img.reserve(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            std::size_t p[3];
            p[ax] = idx;
            p[ra] = r;
            p[ca] = c;
            const double v = data[(p[0] * d[1] + p[1]) * d[2] + p[2]];
            const double t = hi > lo ? std::clamp((v - lo) / (hi - lo), 0.0, 1.0) : 0.5;
            img.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
        }
    std::ofstream out(a.out, std::ios::binary);
    if (!out) throw cli::ApiError(QSM_ERR_IO, "cannot write " + a.out);
    out << "P5\n" << cols << " " << rows << "\n255\n";
    out.write(img.data(), static_cast<std::streamsize>(img.size()));
    std::cout << json{{"output", a.out}, {"axis", std::string(1, a.axis)}, {"index", idx}, {"window", {lo, hi}}}.dump()
              << "\n";
    return 0;
}

struct BenchArgs {
    std::string checkpoint, tf, mask, csv;
    std::vector<std::string> methods{"infer", "cg"};
    std::size_t repeats = 3;
    BaselineArgs baseline;
};

int run_bench(BenchArgs a) {
    auto tf = cli::read_volume(a.tf);
    auto mask = cli::read_mask(a.mask);
    cli::check(qsm_volume_apply_mask(tf.get(), mask.get()));
    cli::Model model;
    std::size_t d[3];
    cli::check(qsm_volume_shape(tf.get(), d, nullptr));
    const auto b0 = b0_or_default(a.baseline.b0);
    std::ostringstream csv;
    csv << "method,nx,ny,nz,repeats,seconds_mean,seconds_min,output_checksum\n";
    for (const auto &method : a.methods) {
        double total = 0.0, best = INFINITY;
        std::uint64_t sum = 0;
        for (std::size_t r = 0; r < std::max<std::size_t>(a.repeats, 1); ++r) {
            cli::Volume out;
            const auto t0 = std::chrono::steady_clock::now();
            if (method == "infer") {
                if (!model) {
                    if (a.checkpoint.empty()) throw cli::ApiError(QSM_ERR_CONFIG, "infer benchmark needs --checkpoint");
                    model = cli::load_model(a.checkpoint);
                }
                qsm_volume *chi = nullptr, *lf = nullptr;
                cli::check(qsm_infer(model.get(), tf.get(), mask.get(), &chi, &lf, nullptr, nullptr));
                out.reset(chi);
                qsm_volume_free(lf);
            } else {
                json info;
                out = run_method(method, tf.get(), b0, a.baseline, info);
            }
            const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            total += s;
            best = std::min(best, s);
            sum = fnv1a(qsm_volume_data(out.get()), voxel_count(out.get()));
        }
        char line[256];
        std::snprintf(line, sizeof line, "%s,%zu,%zu,%zu,%zu,%.6f,%.6f,%s\n", method.c_str(), d[0], d[1], d[2],
                      a.repeats, total / static_cast<double>(std::max<std::size_t>(a.repeats, 1)), best,
                      hex(sum).c_str());
        csv << line;
    }
    if (!a.csv.empty()) write_text(a.csv, csv.str());
    std::cout << csv.str();
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Learned quantitative susceptibility mapping pipeline"};
    app.require_subcommand(1);
    std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
    app.add_option("--threads", threads, "Worker threads for batch-parallel training")->check(CLI::PositiveNumber);
    app.set_version_flag("--version", std::string(qsm_version()));

    SynthArgs sa;
    auto *synth = app.add_subcommand("synth", "Generate synthetic training samples and a manifest");
    synth->add_option("--config", sa.config, "Synth config JSON file")->check(CLI::ExistingFile);
    synth->add_option("--out", sa.out, "Output directory")->required();
    synth->add_option("--seed", sa.seed, "Dataset seed");
    synth->add_option("--dims", sa.dims, "Grid size nx ny nz")->expected(3);
    synth->add_option("--subjects", sa.subjects, "Number of label phantoms");
    synth->add_option("--deformations", sa.deformations, "Deformations per phantom");
    synth->add_option("--classes", sa.classes, "Label classes per phantom");

    ForwardArgs fa;
    auto *forward = app.add_subcommand("forward", "Apply the dipole forward model to a susceptibility map");
    forward->add_option("--chi", fa.chi, "Input susceptibility volume")->required();
    forward->add_option("--out", fa.out, "Output field volume")->required();
    forward->add_option("--b0", fa.b0, "Main field direction (unit vector)")->expected(3);
    forward->add_flag("--pad", fa.pad, "Zero-pad by half the grid per side");
    forward->add_option("--noise-variance", fa.noise_variance, "Add N(0, v) noise to the field")->check(CLI::NonNegativeNumber);
    forward->add_option("--seed", fa.seed, "Noise seed");

    TrainArgs ta;
    auto *train = app.add_subcommand("train", "Train background removal and inversion networks");
    train->add_option("--config", ta.config, "Train config JSON file")->check(CLI::ExistingFile);
    train->add_option("--data", ta.data, "Dataset manifest")->required();
    train->add_option("--checkpoint", ta.checkpoint, "Checkpoint output path");
    train->add_option("--resume", ta.resume, "Continue from this checkpoint");
    train->add_option("--report", ta.report, "Also write epoch records (JSON lines) here");
    train->add_option("--epochs", ta.epochs, "Joint training epochs");
    train->add_option("--batch-size", ta.batch_size, "Samples per optimiser step");
    train->add_option("--pretrain-epochs", ta.pretrain_epochs, "Epochs per pretraining stage");
    train->add_option("--steps", ta.steps, "Unrolled inversion steps");
    train->add_option("--lr", ta.lr, "Adam learning rate");
    train->add_option("--seed", ta.seed, "Initialisation and shuffling seed");
    train->add_flag("--no-pretrain", ta.no_pretrain, "Skip the separate pretraining stages");

    InferArgs ia;
    auto *infer = app.add_subcommand("infer", "Reconstruct susceptibility from a total field");
    infer->add_option("--checkpoint", ia.checkpoint, "Trained checkpoint")->required();
    infer->add_option("--tf", ia.tf, "Total field volume")->required();
    infer->add_option("--mask", ia.mask, "Brain mask volume")->required();
    infer->add_option("--out-chi", ia.out_chi, "Output susceptibility volume")->required();
    infer->add_option("--out-lf", ia.out_lf, "Output predicted local field")->required();
    infer->add_option("--report", ia.report, "JSON report path");
    infer->add_option("--phase-scale", ia.phase_scale, "Multiplier converting the input to field units");
    infer->add_option("--gt", ia.gt, "Ground-truth susceptibility: adds metrics and a noise-robustness run")
        ;
    infer->add_option("--noise-variance", ia.noise_variance, "Noise variance for the robustness run")
        ->check(CLI::NonNegativeNumber);
    infer->add_option("--seed", ia.seed, "Noise seed");

    BaselineArgs ba;
    auto *baseline = app.add_subcommand("baseline", "Classical dipole inversion (tkd or cg)");
    baseline->add_option("--method", ba.method, "tkd or cg")->check(CLI::IsMember({"tkd", "cg"}));
    baseline->add_option("--field", ba.field, "Local field volume")->required();
    baseline->add_option("--mask", ba.mask, "Brain mask (applied to input and output)");
    baseline->add_option("--out", ba.out, "Output susceptibility volume")->required();
    baseline->add_option("--b0", ba.b0, "Main field direction (unit vector)")->expected(3);
    baseline->add_option("--threshold", ba.threshold, "TKD threshold on |D|")->check(CLI::PositiveNumber);
    baseline->add_option("--mu", ba.mu, "Tikhonov weight")->check(CLI::NonNegativeNumber);
    baseline->add_option("--max-iter", ba.max_iterations, "CG iteration cap");
    baseline->add_option("--tol", ba.tolerance, "CG relative residual tolerance")->check(CLI::PositiveNumber);

    EvalArgs ea;
    auto *eval = app.add_subcommand("eval", "NRMSE, ddNRMSE and SSIM against a ground truth");
    eval->add_option("--gt", ea.gt, "Ground-truth susceptibility")->required();
    eval->add_option("--mask", ea.mask, "Brain mask")->required();
    eval->add_option("--input", ea.inputs, "Reconstruction as NAME=PATH (repeatable)")->required();
    eval->add_option("--csv", ea.csv, "Write the table as CSV");
    eval->add_option("--json", ea.json_out, "Write the table as JSON");

    SliceArgs la;
    std::string axis = "z";
    auto *slice = app.add_subcommand("slice", "Export one slice as an 8-bit PGM image");
    slice->add_option("--in", la.in, "Volume")->required();
    slice->add_option("--mask", la.mask, "Window percentiles from these voxels only");
    slice->add_option("--out", la.out, "PGM output path")->required();
    slice->add_option("--axis", axis, "Slice normal: x, y or z")->check(CLI::IsMember({"x", "y", "z"}));
    slice->add_option("--index", la.index, "Slice index (default: centre)");

    BenchArgs bea;
    auto *bench = app.add_subcommand("bench", "Time methods on the same input");
    bench->add_option("--checkpoint", bea.checkpoint, "Checkpoint for the infer method");
    bench->add_option("--tf", bea.tf, "Input field")->required();
    bench->add_option("--mask", bea.mask, "Brain mask")->required();
    bench->add_option("--methods", bea.methods, "Any of infer, tkd, cg")->check(CLI::IsMember({"infer", "tkd", "cg"}));
    bench->add_option("--repeats", bea.repeats, "Runs per method");
    bench->add_option("--csv", bea.csv, "Write the timing table here");
    bench->add_option("--mu", bea.baseline.mu, "Tikhonov weight for cg");
    bench->add_option("--tol", bea.baseline.tolerance, "CG tolerance")->check(CLI::PositiveNumber);
    bench->add_option("--max-iter", bea.baseline.max_iterations, "CG iteration cap");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*synth) return run_synth(sa);
        if (*forward) return run_forward(fa);
        if (*train) return run_train(ta, threads);
        if (*infer) return run_infer(ia);
        if (*baseline) return run_baseline(ba);
        if (*eval) return run_eval(ea);
        if (*slice) {
            la.axis = axis[0];
            return run_slice(la);
        }
        if (*bench) return run_bench(bea);
    } catch (const cli::ApiError &e) {
        std::cerr << "error: " << e.what() << "\n";
        return qsm_exit_code(e.status);
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
