// evifuse: synthesize phantom datasets, fuse probability maps, train and
// evaluate the two-branch model, and gradient-check the full graph.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "evifuse/error.hpp"
#include "evifuse/fusion.hpp"
#include "evifuse/nn.hpp"
#include "evifuse/synth.hpp"
#include "evifuse/trainer.hpp"
#include "evifuse/volume.hpp"

namespace fs = std::filesystem;
using namespace evifuse;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumeric = 3;

synth::PhantomConfig phantom_from_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw format_error("cannot open config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw domain_error("bad config " + path + ": " + e.what());
    }
    synth::PhantomConfig cfg;
    auto get = [&](const char* key, auto& slot) {
        if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
    };
    if (j.contains("dims")) {
        const auto d = j.at("dims");
        if (!d.is_array() || d.size() != 3) throw domain_error("config dims must be [nz,ny,nx]");
        cfg.dims = {d[0].get<std::int64_t>(), d[1].get<std::int64_t>(), d[2].get<std::int64_t>()};
    }
    get("lesions_min", cfg.lesions_min);
    get("lesions_max", cfg.lesions_max);
    get("radius_min", cfg.radius_min);
    get("radius_max", cfg.radius_max);
    get("contrast_a", cfg.contrast_a);
    get("contrast_b", cfg.contrast_b);
    get("noise_a", cfg.noise_a);
    get("noise_b", cfg.noise_b);
    get("background_a", cfg.background_a);
    get("background_b", cfg.background_b);
    get("p_visible_a", cfg.p_visible_a);
    get("p_visible_b", cfg.p_visible_b);
    cfg.validate();
    return cfg;
}

int cmd_synth(const std::string& config, std::int64_t count, std::uint64_t seed,
              const std::string& out_dir) {
    const auto cfg = config.empty() ? synth::PhantomConfig{} : phantom_from_json(config);
    const auto manifest = synth::generate_dataset(cfg, count, seed, out_dir);
    std::printf("cases=%zu\n", manifest.size());
    std::printf("manifest=%s\n", (fs::path(out_dir) / "manifest.txt").string().c_str());
    return kOk;
}

int cmd_fuse(const std::string& path_a, const std::string& path_b, const std::string& prefix,
             double threshold, const std::string& strategy) {
    const auto a = load_volume(path_a);
    const auto b = load_volume(path_b);

    Volume fused;
    bool have_conflict = false;
    Volume conflict;
    if (strategy == "dempster") {
        auto r = fusion::fuse_volumes(a, b);
        fused = std::move(r.fused);
        conflict = std::move(r.conflict);
        have_conflict = true;
    } else {
        fused = fusion::baseline_fuse(fusion::baseline_from_string(strategy), a, b);
    }
    const auto mask = fusion::binarize(fused, threshold);

    save_volume(fused, prefix + "_fused.vol");
    if (have_conflict) save_volume(conflict, prefix + "_conflict.vol");
    save_volume(mask, prefix + "_mask.vol");

    double fg = 0.0;
    for (float v : mask.data) fg += v;
    fg /= static_cast<double>(mask.data.size());
    double mean_conflict = 0.0;
    if (have_conflict) {
        for (float v : conflict.data) mean_conflict += v;
        mean_conflict /= static_cast<double>(conflict.data.size());
    }
    std::printf("strategy=%s\n", strategy.c_str());
    std::printf("mean_conflict=%.9g\n", mean_conflict);
    std::printf("foreground_fraction=%.9g\n", fg);
    return kOk;
}

trainer::TrainConfig train_config_from_json(const std::string& path) {
    trainer::TrainConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream in(path);
    if (!in) throw format_error("cannot open config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw domain_error("bad config " + path + ": " + e.what());
    }
    auto get = [&](const char* key, auto& slot) {
        if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
    };
    get("levels", cfg.model.levels);
    get("base_channels", cfg.model.base_channels);
    get("epochs", cfg.epochs);
    get("lr", cfg.opt.lr);
    if (j.contains("optimizer")) {
        cfg.opt.kind = optim::kind_from_string(j.at("optimizer").get<std::string>());
    }
    get("batch_size", cfg.batch_size);
    get("warmup_epochs", cfg.warmup_epochs);
    get("patience", cfg.patience);
    get("augment", cfg.augment.enabled);
    get("elastic_amplitude", cfg.augment.elastic_amplitude);
    get("max_rotation_deg", cfg.augment.max_rotation_deg);
    get("w_ct", cfg.weights.wCT);
    get("w_pet", cfg.weights.wPET);
    get("w_fusion", cfg.weights.wF);
    return cfg;
}

int cmd_train(const std::string& manifest_path, const std::string& config,
              const std::string& out_dir, int epochs, double lr, std::uint64_t seed, int threads,
              bool no_augment, bool resume) {
    auto cfg = train_config_from_json(config);
    if (epochs > 0) cfg.epochs = epochs;
    if (lr >= 0.0) cfg.opt.lr = lr;
    cfg.seed = seed;
    cfg.threads = threads;
    if (no_augment) cfg.augment.enabled = false;
    cfg.resume = resume;
    cfg.validate();

    const auto manifest = synth::load_manifest(manifest_path);
    const auto res = trainer::train(cfg, manifest, out_dir);
    const auto& last = res.history.back();
    std::printf("epochs_run=%zu\n", res.history.size());
    std::printf("best_epoch=%d\n", res.best_epoch);
    std::printf("lossAll=%.9g\n", last.lossAll);
    std::printf("val_lossAll=%.9g\n", last.val_lossAll);
    std::printf("history=%s\n", (fs::path(out_dir) / "history.csv").string().c_str());
    return kOk;
}

int cmd_eval(const std::string& model_a, const std::string& model_b,
             const std::string& manifest_path, const std::string& split_name, double threshold,
             const std::string& report_path, int threads) {
    synth::Split split;
    if (split_name == "train") {
        split = synth::Split::Train;
    } else if (split_name == "val") {
        split = synth::Split::Val;
    } else if (split_name == "test") {
        split = synth::Split::Test;
    } else {
        throw usage_error("unknown split: " + split_name);
    }
    const auto mA = nn::load_model<float>(model_a);
    const auto mB = nn::load_model<float>(model_b);
    const auto manifest = synth::load_manifest(manifest_path);
    const auto table = trainer::evaluate(mA, mB, manifest, split, threshold, threads);

    std::string csv = "method,dice_mean,dice_std,precision_mean,precision_std,recall_mean,recall_std\n";
    for (const auto& row : table) {
        std::printf("%s.dice=%.6f+/-%.6f\n", row.name.c_str(), row.dice_mean, row.dice_std);
        std::printf("%s.precision=%.6f+/-%.6f\n", row.name.c_str(), row.precision_mean,
                    row.precision_std);
        std::printf("%s.recall=%.6f+/-%.6f\n", row.name.c_str(), row.recall_mean, row.recall_std);
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", row.name.c_str(),
                      row.dice_mean, row.dice_std, row.precision_mean, row.precision_std,
                      row.recall_mean, row.recall_std);
        csv += buf;
    }
    if (!report_path.empty()) {
        std::ofstream out(report_path);
        if (!out) throw format_error("cannot write report " + report_path);
        out << csv;
    }
    return kOk;
}

int cmd_gradcheck(std::uint64_t seed, std::int64_t size, int levels, double h) {
    const nn::ModelConfig mcfg{.levels = levels, .base_channels = 2};
    auto m = nn::init_model<double>(mcfg, seed);
    std::mt19937_64 rng(seed + 1);
    std::normal_distribution<double> n(0.0, 1.0);
    nn::Tensor<double> x({1, size, size, size});
    for (double& v : x.data) v = n(rng);
    nn::Tensor<double> target(x.shape);
    for (double& v : target.data) v = (rng() % 4 == 0) ? 1.0 : 0.0;

    auto loss_fn = [&](const nn::Tensor<double>& prob) {
        double loss = 0.0;
        nn::Tensor<double> d(prob.shape);
        for (std::size_t i = 0; i < prob.data.size(); ++i) {
            const double diff = prob.data[i] - target.data[i];
            loss += diff * diff;
            d.data[i] = 2.0 * diff;
        }
        return std::pair{loss, std::move(d)};
    };

    const auto rep = nn::grad_check<double>(m, x, loss_fn, h);
    std::printf("checked=%lld\n", static_cast<long long>(rep.checked));
    std::printf("max_rel_err=%.9g\n", rep.max_rel_err);
    if (!(rep.max_rel_err < 1e-3)) {
        std::fprintf(stderr, "gradcheck failed: max relative error %.9g >= 1e-3\n",
                     rep.max_rel_err);
        return kNumeric;
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Evidential two-modality segmentation toolkit"};
    app.require_subcommand(1);

    std::string config, out_dir, path_a, path_b, prefix, manifest_path, split_name = "test";
    std::string strategy = "dempster", model_a, model_b, report_path;
    std::int64_t count = 10, size = 8;
    std::uint64_t seed = 0;
    double threshold = 0.5, lr = -1.0, h = 1e-5;
    int epochs = 0, threads = 1, levels = 2;
    bool no_augment = false, resume = false;

    auto* synth_cmd = app.add_subcommand("synth", "Generate a phantom dataset with a manifest");
    synth_cmd->add_option("--config", config, "Phantom config JSON");
    synth_cmd->add_option("--count", count, "Number of cases")->required();
    synth_cmd->add_option("--seed", seed, "Dataset seed");
    synth_cmd->add_option("--out", out_dir, "Output directory")->required();

    auto* fuse_cmd = app.add_subcommand("fuse", "Fuse two probability volumes");
    fuse_cmd->add_option("probA", path_a, "First probability volume")->required();
    fuse_cmd->add_option("probB", path_b, "Second probability volume")->required();
    fuse_cmd->add_option("--out", prefix, "Output path prefix")->required();
    fuse_cmd->add_option("--threshold", threshold, "Binarization threshold");
    fuse_cmd->add_option("--strategy", strategy, "dempster|average|vote|max");

    auto* train_cmd = app.add_subcommand("train", "Train the two-branch model");
    train_cmd->add_option("--manifest", manifest_path, "Dataset manifest")->required();
    train_cmd->add_option("--config", config, "Train config JSON");
    train_cmd->add_option("--out", out_dir, "Checkpoint/output directory")->required();
    train_cmd->add_option("--epochs", epochs, "Override epoch count");
    train_cmd->add_option("--lr", lr, "Override learning rate");
    train_cmd->add_option("--seed", seed, "Training seed");
    train_cmd->add_option("--threads", threads, "Worker threads (1 = bit-reproducible)");
    train_cmd->add_flag("--no-augment", no_augment, "Disable augmentation");
    train_cmd->add_flag("--resume", resume, "Resume from saved state in --out");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate checkpoints on a manifest split");
    eval_cmd->add_option("--model-a", model_a, "Branch A checkpoint")->required();
    eval_cmd->add_option("--model-b", model_b, "Branch B checkpoint")->required();
    eval_cmd->add_option("--manifest", manifest_path, "Dataset manifest")->required();
    eval_cmd->add_option("--split", split_name, "train|val|test");
    eval_cmd->add_option("--threshold", threshold, "Binarization threshold");
    eval_cmd->add_option("--report", report_path, "CSV report path");
    eval_cmd->add_option("--threads", threads, "Worker threads");

    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the model");
    grad_cmd->add_option("--seed", seed, "Model/input seed");
    grad_cmd->add_option("--size", size, "Cubic input edge length");
    grad_cmd->add_option("--levels", levels, "Model depth");
    grad_cmd->add_option("--step", h, "Finite-difference step");

    try {
        app.parse(argc, argv);
        if (*synth_cmd) return cmd_synth(config, count, seed, out_dir);
        if (*fuse_cmd) return cmd_fuse(path_a, path_b, prefix, threshold, strategy);
        if (*train_cmd) {
            return cmd_train(manifest_path, config, out_dir, epochs, lr, seed, threads,
                             no_augment, resume);
        }
        if (*eval_cmd) {
            return cmd_eval(model_a, model_b, manifest_path, split_name, threshold, report_path,
                            threads);
        }
        if (*grad_cmd) return cmd_gradcheck(seed, size, levels, h);
        return kUsage;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    } catch (const usage_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const domain_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const numeric_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kNumeric;
    } catch (const conflict_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kNumeric;
    } catch (const std::exception& e) {
        // format/shape/generation/filesystem problems: bad data or I/O.
        std::fprintf(stderr, "error: %s\n", e.what());
        return kData;
    }
}
