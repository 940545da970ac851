#ifndef EVIFUSE_TRAINER_HPP
#define EVIFUSE_TRAINER_HPP

// End-to-end training: two branches, the evidential fusion layer and the
// multi-task loss, with affine+elastic augmentation, Adam/SGD, per-epoch
// validation, best-checkpoint tracking and resumable state. All
// per-epoch randomness is derived from (seed, epoch), so a resumed run
// is bit-identical to an uninterrupted one.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "evifuse/error.hpp"
#include "evifuse/fusion.hpp"
#include "evifuse/losses.hpp"
#include "evifuse/nn.hpp"
#include "evifuse/optim.hpp"
#include "evifuse/synth.hpp"
#include "evifuse/volume.hpp"

namespace evifuse::trainer {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Augmentation: random affine (rotation/translation/scale) followed by an
// elastic deformation from a smoothed random displacement field. The same
// geometric transform is applied to all three volumes; images resample
// trilinearly, masks nearest-neighbor.

struct AugmentConfig {
    bool enabled = true;
    double max_rotation_deg = 10.0;
    double max_translation_frac = 0.05;
    double scale_min = 0.9;
    double scale_max = 1.1;
    std::int64_t elastic_cell = 8;   // coarse grid cell of the displacement field
    double elastic_amplitude = 1.0;  // voxels
};

struct AugmentParams {
    double rot_z = 0.0, rot_y = 0.0, rot_x = 0.0;  // radians
    double scale = 1.0;
    double t_z = 0.0, t_y = 0.0, t_x = 0.0;  // voxels
    Volume disp_z, disp_y, disp_x;           // elastic displacement per axis
    bool elastic = false;
};

namespace detail {

inline AugmentParams sample_augment(const AugmentConfig& cfg, Dims dims, std::mt19937_64& rng) {
    AugmentParams p;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double max_rad = cfg.max_rotation_deg * std::numbers::pi / 180.0;
    p.rot_z = u(rng) * max_rad;
    p.rot_y = u(rng) * max_rad;
    p.rot_x = u(rng) * max_rad;
    std::uniform_real_distribution<double> s(cfg.scale_min, cfg.scale_max);
    p.scale = s(rng);
    p.t_z = u(rng) * cfg.max_translation_frac * static_cast<double>(dims.nz);
    p.t_y = u(rng) * cfg.max_translation_frac * static_cast<double>(dims.ny);
    p.t_x = u(rng) * cfg.max_translation_frac * static_cast<double>(dims.nx);
    if (cfg.elastic_amplitude > 0.0) {
        p.elastic = true;
        auto field = [&] {
            Volume f = synth::detail::low_frequency_field(dims, cfg.elastic_cell, rng);
            for (float& v : f.data) v = static_cast<float>(v * cfg.elastic_amplitude);
            return f;
        };
        p.disp_z = field();
        p.disp_y = field();
        p.disp_x = field();
    }
    return p;
}

inline float sample_volume(const Volume& v, double fz, double fy, double fx, bool nearest) {
    auto clampi = [](std::int64_t i, std::int64_t n) {
        return std::clamp<std::int64_t>(i, 0, n - 1);
    };
    if (nearest) {
        return v.at(clampi(std::llround(fz), v.dims.nz), clampi(std::llround(fy), v.dims.ny),
                    clampi(std::llround(fx), v.dims.nx));
    }
    const std::int64_t z0 = static_cast<std::int64_t>(std::floor(fz));
    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(fy));
    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(fx));
    const double wz = fz - static_cast<double>(z0);
    const double wy = fy - static_cast<double>(y0);
    const double wx = fx - static_cast<double>(x0);
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz) {
        for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
                const double w =
                    (dz ? wz : 1.0 - wz) * (dy ? wy : 1.0 - wy) * (dx ? wx : 1.0 - wx);
                acc += w * v.at(clampi(z0 + dz, v.dims.nz), clampi(y0 + dy, v.dims.ny),
                                clampi(x0 + dx, v.dims.nx));
            }
        }
    }
    return static_cast<float>(acc);
}

inline Volume warp(const Volume& v, const AugmentParams& p) {
    const bool nearest = v.modality == Modality::MASK;
    // Inverse affine: src = (1/s) R^T (dst - c - t) + c, in (z, y, x).
    const double cz = std::cos(p.rot_z), sz = std::sin(p.rot_z);
    const double cy = std::cos(p.rot_y), sy = std::sin(p.rot_y);
    const double cx = std::cos(p.rot_x), sx = std::sin(p.rot_x);
    // R = Rz * Ry * Rx acting on (x, y, z) spatial axes.
    const double r[3][3] = {
        {cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx},
        {sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx},
        {-sy, cy * sx, cy * cx},
    };
    const double inv_s = 1.0 / p.scale;
    const double ctr_z = 0.5 * static_cast<double>(v.dims.nz - 1);
    const double ctr_y = 0.5 * static_cast<double>(v.dims.ny - 1);
    const double ctr_x = 0.5 * static_cast<double>(v.dims.nx - 1);

    Volume out(v.dims, v.modality, v.spacing);
    for (std::int64_t z = 0; z < v.dims.nz; ++z) {
        for (std::int64_t y = 0; y < v.dims.ny; ++y) {
            for (std::int64_t x = 0; x < v.dims.nx; ++x) {
                const double dx = static_cast<double>(x) - ctr_x - p.t_x;
                const double dy = static_cast<double>(y) - ctr_y - p.t_y;
                const double dz = static_cast<double>(z) - ctr_z - p.t_z;
                // R^T row i = column i of R.
                double sx_ = inv_s * (r[0][0] * dx + r[1][0] * dy + r[2][0] * dz) + ctr_x;
                double sy_ = inv_s * (r[0][1] * dx + r[1][1] * dy + r[2][1] * dz) + ctr_y;
                double sz_ = inv_s * (r[0][2] * dx + r[1][2] * dy + r[2][2] * dz) + ctr_z;
                if (p.elastic) {
                    sz_ += p.disp_z.at(z, y, x);
                    sy_ += p.disp_y.at(z, y, x);
                    sx_ += p.disp_x.at(z, y, x);
                }
                out.at(z, y, x) = sample_volume(v, sz_, sy_, sx_, nearest);
            }
        }
    }
    return out;
}

}  // namespace detail

inline synth::CaseTriple augment(const synth::CaseTriple& c, const AugmentConfig& cfg,
                                 std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto p = detail::sample_augment(cfg, c.mask.dims, rng);
    synth::CaseTriple out;
    out.volA = detail::warp(c.volA, p);
    out.volB = detail::warp(c.volB, p);
    out.mask = detail::warp(c.mask, p);
    out.lesions = c.lesions;  // geometry metadata is not transformed
    return out;
}

// ---------------------------------------------------------------------------
// Gradient routing: the total gradient of loss_all into each branch output,
// i.e. its own weighted Dice term plus the fused MSE term pushed back
// through the fusion layer's closed-form partials.

template <std::floating_point T>
struct RoutedCase {
    double lossPET = 0.0, lossCT = 0.0, lossF = 0.0, lossAll = 0.0;
    std::vector<T> gA, gB;  // d lossAll / d S1, d S2
};

template <std::floating_point T>
RoutedCase<T> route_case(std::span<const T> s1, std::span<const T> s2, std::span<const T> g,
                         const losses::LossWeights& w, bool joint) {
    if (s1.size() != g.size() || s2.size() != g.size()) {
        throw shape_error("route_case: size mismatch");
    }
    const auto d1 = losses::dice_loss<T>(s1, g);
    const auto d2 = losses::dice_loss<T>(s2, g);
    std::vector<T> fused(s1.size());
    for (std::size_t i = 0; i < s1.size(); ++i) {
        fused[i] = static_cast<T>(
            fusion::fuse_voxel(static_cast<double>(s1[i]), static_cast<double>(s2[i])).fused);
    }
    const auto mf = losses::mse_loss<T>(fused, g);

    RoutedCase<T> out;
    out.lossPET = d1.value;
    out.lossCT = d2.value;
    out.lossF = mf.value;
    out.lossAll = w.wCT * d2.value + w.wPET * d1.value + w.wF * mf.value;
    out.gA.resize(s1.size());
    out.gB.resize(s1.size());
    for (std::size_t i = 0; i < s1.size(); ++i) {
        double ga = w.wPET * static_cast<double>(d1.grad[i]);
        double gb = w.wCT * static_cast<double>(d2.grad[i]);
        if (joint) {
            const auto fg = fusion::fuse_voxel_grad(static_cast<double>(s1[i]),
                                                    static_cast<double>(s2[i]));
            const double up = w.wF * static_cast<double>(mf.grad[i]);
            ga += up * fg.d_p;
            gb += up * fg.d_q;
        }
        out.gA[i] = static_cast<T>(ga);
        out.gB[i] = static_cast<T>(gb);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainConfig {
    nn::ModelConfig model;
    int epochs = 10;
    optim::Hyper opt;
    int batch_size = 1;
    std::uint64_t seed = 0;
    AugmentConfig augment;
    losses::LossWeights weights;
    int warmup_epochs = 0;  // branch-only Dice epochs before joint training
    int patience = 10;      // early stopping on validation lossAll
    int threads = 1;
    bool resume = false;

    void validate() const {
        model.validate();
        if (epochs < 1) throw domain_error("TrainConfig: epochs must be >= 1");
        if (!(opt.lr >= 0.0)) throw domain_error("TrainConfig: learning rate must be >= 0");
        if (batch_size < 1) throw domain_error("TrainConfig: batch size must be >= 1");
    }
};

struct EpochStats {
    int epoch = 0;  // 1-based
    double lossAll = 0.0, lossPET = 0.0, lossCT = 0.0, lossF = 0.0;
    double val_lossAll = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
    nn::Model<float> modelA, modelB;
    std::vector<EpochStats> history;
    int best_epoch = 0;  // 1-based epoch of the best validation loss
};

inline void write_history_csv(const std::vector<EpochStats>& history, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw format_error("write_history_csv: cannot open " + path);
    out << "epoch,lossAll,lossPET,lossCT,lossF,val_lossAll\n";
    char buf[256];
    for (const auto& e : history) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.lossAll,
                      e.lossPET, e.lossCT, e.lossF, e.val_lossAll);
        out << buf;
    }
}

namespace detail {

struct CaseData {
    Volume a, b, mask;  // a, b standardized
    synth::Split split = synth::Split::Train;
};

inline std::vector<CaseData> load_cases(const synth::Manifest& manifest) {
    std::vector<CaseData> cases;
    cases.reserve(manifest.size());
    for (const auto& e : manifest) {
        CaseData c;
        c.a = standardize(load_volume(e.pathA));
        c.b = standardize(load_volume(e.pathB));
        c.mask = load_volume(e.pathMask);
        if (c.mask.dims != c.a.dims || c.mask.dims != c.b.dims) {
            throw shape_error("case " + e.case_id + ": volume dims disagree");
        }
        c.split = e.split;
        cases.push_back(std::move(c));
    }
    return cases;
}

inline nn::Tensor<float> to_tensor(const Volume& v) {
    nn::Tensor<float> t({1, v.dims.nz, v.dims.ny, v.dims.nx});
    t.data = v.data;
    return t;
}

inline Volume to_prob_volume(const nn::Tensor<float>& t, const Volume& like) {
    Volume v(like.dims, Modality::PROB, like.spacing);
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        v.data[i] = std::clamp(t.data[i], 0.0f, 1.0f);
    }
    return v;
}

template <typename Fn>
void accumulate_params(nn::Model<float>& acc, const nn::Model<float>& src, Fn&& combine) {
    std::vector<nn::Tensor<float>*> a;
    std::vector<const nn::Tensor<float>*> s;
    acc.for_each_param([&](const std::string&, nn::Tensor<float>& t) { a.push_back(&t); });
    src.for_each_param([&](const std::string&, const nn::Tensor<float>& t) { s.push_back(&t); });
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < a[i]->data.size(); ++j) {
            combine(a[i]->data[j], s[i]->data[j]);
        }
    }
}

}  // namespace detail

inline TrainResult train(const TrainConfig& cfg, const synth::Manifest& manifest,
                         const std::string& out_dir = "") {
    cfg.validate();
    const auto cases = detail::load_cases(manifest);
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        if (cases[i].split == synth::Split::Train) train_idx.push_back(i);
        if (cases[i].split == synth::Split::Val) val_idx.push_back(i);
    }
    if (train_idx.empty()) throw domain_error("train: manifest has no train cases");

    namespace fs = std::filesystem;
    if (!out_dir.empty()) fs::create_directories(out_dir);
    const auto state_path = fs::path(out_dir) / "train_state.json";

    TrainResult res;
    res.modelA = nn::init_model<float>(cfg.model, mix_seed(cfg.seed, 0xA));
    res.modelB = nn::init_model<float>(cfg.model, mix_seed(cfg.seed, 0xB));
    optim::State<float> optA(res.modelA, cfg.opt);
    optim::State<float> optB(res.modelB, cfg.opt);

    int start_epoch = 0;  // 0-based
    double best_val = std::numeric_limits<double>::infinity();
    res.best_epoch = 0;

    if (cfg.resume && !out_dir.empty() && fs::exists(state_path)) {
        std::ifstream in(state_path);
        nlohmann::json st;
        in >> st;
        start_epoch = st.at("next_epoch").get<int>();
        best_val = st.at("best_val").get<double>();
        res.best_epoch = st.at("best_epoch").get<int>();
        for (const auto& h : st.at("history")) {
            res.history.push_back({h.at("epoch").get<int>(), h.at("lossAll").get<double>(),
                                   h.at("lossPET").get<double>(), h.at("lossCT").get<double>(),
                                   h.at("lossF").get<double>(), h.at("val_lossAll").get<double>()});
        }
        res.modelA = nn::load_model<float>((fs::path(out_dir) / "model_a_last.ckpt").string());
        res.modelB = nn::load_model<float>((fs::path(out_dir) / "model_b_last.ckpt").string());
        optA = optim::State<float>::load((fs::path(out_dir) / "opt_a.state").string());
        optB = optim::State<float>::load((fs::path(out_dir) / "opt_b.state").string());
    }

    auto eval_loss = [&](const std::vector<std::size_t>& idx) {
        double acc = 0.0;
        for (std::size_t i : idx) {
            const auto& c = cases[i];
            const auto s1 = nn::forward(res.modelA, detail::to_tensor(c.a), cfg.threads).first;
            const auto s2 = nn::forward(res.modelB, detail::to_tensor(c.b), cfg.threads).first;
            const auto r = route_case<float>(s1.data, s2.data, c.mask.data, cfg.weights, true);
            acc += r.lossAll;
        }
        return acc / static_cast<double>(idx.size());
    };

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const bool joint = epoch >= cfg.warmup_epochs;
        std::mt19937_64 epoch_rng(mix_seed(cfg.seed, 0x1000 + static_cast<std::uint64_t>(epoch)));
        auto order = train_idx;
        std::shuffle(order.begin(), order.end(), epoch_rng);

        EpochStats stats;
        stats.epoch = epoch + 1;
        std::int64_t seen = 0;

        for (std::size_t batch_start = 0; batch_start < order.size();
             batch_start += static_cast<std::size_t>(cfg.batch_size)) {
            auto gaccA = nn::detail::make_model_shell<float>(cfg.model);
            auto gaccB = nn::detail::make_model_shell<float>(cfg.model);
            int in_batch = 0;

            for (std::size_t bi = batch_start;
                 bi < std::min(order.size(),
                               batch_start + static_cast<std::size_t>(cfg.batch_size));
                 ++bi, ++in_batch) {
                const std::size_t ci = order[bi];
                const auto& base = cases[ci];
                Volume va = base.a, vb = base.b, vm = base.mask;
                if (cfg.augment.enabled) {
                    synth::CaseTriple t{va, vb, vm, {}};
                    const auto aug = augment(
                        t, cfg.augment,
                        mix_seed(cfg.seed, 0x2000 + static_cast<std::uint64_t>(epoch) * 1000003 +
                                               ci));
                    va = std::move(aug.volA);
                    vb = std::move(aug.volB);
                    vm = std::move(aug.mask);
                }

                auto [s1, cacheA] = nn::forward(res.modelA, detail::to_tensor(va), cfg.threads);
                auto [s2, cacheB] = nn::forward(res.modelB, detail::to_tensor(vb), cfg.threads);
                const auto r = route_case<float>(s1.data, s2.data, vm.data, cfg.weights, joint);
                if (!std::isfinite(r.lossAll)) {
                    throw numeric_error(
                        "train: non-finite loss at epoch " + std::to_string(epoch + 1) +
                        " (lossPET=" + std::to_string(r.lossPET) +
                        ", lossCT=" + std::to_string(r.lossCT) +
                        ", lossF=" + std::to_string(r.lossF) + ")");
                }
                stats.lossAll += r.lossAll;
                stats.lossPET += r.lossPET;
                stats.lossCT += r.lossCT;
                stats.lossF += r.lossF;
                ++seen;

                nn::Tensor<float> gA(s1.shape), gB(s2.shape);
                gA.data.assign(r.gA.begin(), r.gA.end());
                gB.data.assign(r.gB.begin(), r.gB.end());
                const auto bpA = nn::backward(res.modelA, cacheA, gA, cfg.threads);
                const auto bpB = nn::backward(res.modelB, cacheB, gB, cfg.threads);
                detail::accumulate_params(gaccA, bpA.grads,
                                          [](float& a, float g) { a += g; });
                detail::accumulate_params(gaccB, bpB.grads,
                                          [](float& a, float g) { a += g; });
            }

            if (in_batch > 1) {
                const float inv = 1.0f / static_cast<float>(in_batch);
                gaccA.for_each_param([&](const std::string&, nn::Tensor<float>& t) {
                    for (float& v : t.data) v *= inv;
                });
                gaccB.for_each_param([&](const std::string&, nn::Tensor<float>& t) {
                    for (float& v : t.data) v *= inv;
                });
            }
            optA.step(res.modelA, gaccA);
            optB.step(res.modelB, gaccB);
        }

        stats.lossAll /= static_cast<double>(seen);
        stats.lossPET /= static_cast<double>(seen);
        stats.lossCT /= static_cast<double>(seen);
        stats.lossF /= static_cast<double>(seen);

        const double monitored = val_idx.empty() ? stats.lossAll : eval_loss(val_idx);
        stats.val_lossAll = monitored;
        res.history.push_back(stats);

        const bool improved = monitored < best_val;
        if (improved) {
            best_val = monitored;
            res.best_epoch = epoch + 1;
            if (!out_dir.empty()) {
                nn::save_model(res.modelA, (fs::path(out_dir) / "model_a.ckpt").string());
                nn::save_model(res.modelB, (fs::path(out_dir) / "model_b.ckpt").string());
            }
        }

        if (!out_dir.empty()) {
            nn::save_model(res.modelA, (fs::path(out_dir) / "model_a_last.ckpt").string());
            nn::save_model(res.modelB, (fs::path(out_dir) / "model_b_last.ckpt").string());
            optA.save((fs::path(out_dir) / "opt_a.state").string());
            optB.save((fs::path(out_dir) / "opt_b.state").string());
            nlohmann::json st = {{"next_epoch", epoch + 1},
                                 {"best_val", best_val},
                                 {"best_epoch", res.best_epoch},
                                 {"history", nlohmann::json::array()}};
            for (const auto& h : res.history) {
                st["history"].push_back({{"epoch", h.epoch},
                                         {"lossAll", h.lossAll},
                                         {"lossPET", h.lossPET},
                                         {"lossCT", h.lossCT},
                                         {"lossF", h.lossF},
                                         {"val_lossAll", h.val_lossAll}});
            }
            std::ofstream(state_path) << st.dump(2) << '\n';
            write_history_csv(res.history, (fs::path(out_dir) / "history.csv").string());
        }

        if (epoch + 1 - res.best_epoch > cfg.patience) break;  // early stopping
    }

    return res;
}

// ---------------------------------------------------------------------------
// Evaluation: the five decision-level methods over one manifest split.

struct MethodMetrics {
    std::string name;
    double dice_mean = 0.0, dice_std = 0.0;
    double precision_mean = 0.0, precision_std = 0.0;
    double recall_mean = 0.0, recall_std = 0.0;
    std::vector<losses::Metrics> per_case;
};

inline std::vector<MethodMetrics> evaluate(const nn::Model<float>& modelA,
                                           const nn::Model<float>& modelB,
                                           const synth::Manifest& manifest, synth::Split split,
                                           double threshold = 0.5, int threads = 1) {
    std::vector<MethodMetrics> table(5);
    table[0].name = "A-only";
    table[1].name = "B-only";
    table[2].name = "evidential";
    table[3].name = "average";
    table[4].name = "vote";

    for (const auto& e : manifest) {
        if (e.split != split) continue;
        const auto a = standardize(load_volume(e.pathA));
        const auto b = standardize(load_volume(e.pathB));
        const auto mask = load_volume(e.pathMask);
        const auto s1 =
            detail::to_prob_volume(nn::forward(modelA, detail::to_tensor(a), threads).first, a);
        const auto s2 =
            detail::to_prob_volume(nn::forward(modelB, detail::to_tensor(b), threads).first, b);
        const auto fused = fusion::fuse_volumes(s1, s2).fused;
        const auto avg = fusion::baseline_fuse(fusion::BaselineStrategy::Average, s1, s2);
        const auto vote = fusion::baseline_fuse(fusion::BaselineStrategy::Vote, s1, s2);

        table[0].per_case.push_back(losses::metrics(s1, mask, threshold));
        table[1].per_case.push_back(losses::metrics(s2, mask, threshold));
        table[2].per_case.push_back(losses::metrics(fused, mask, threshold));
        table[3].per_case.push_back(losses::metrics(avg, mask, threshold));
        table[4].per_case.push_back(losses::metrics(vote, mask, threshold));
    }
    if (table[0].per_case.empty()) throw domain_error("evaluate: split has no cases");

    for (auto& row : table) {
        auto agg = [&](auto field, double& mean, double& stddev) {
            double s = 0.0;
            for (const auto& m : row.per_case) s += field(m);
            mean = s / static_cast<double>(row.per_case.size());
            double ss = 0.0;
            for (const auto& m : row.per_case) {
                ss += (field(m) - mean) * (field(m) - mean);
            }
            stddev = std::sqrt(ss / static_cast<double>(row.per_case.size()));
        };
        agg([](const losses::Metrics& m) { return m.dice; }, row.dice_mean, row.dice_std);
        agg([](const losses::Metrics& m) { return m.precision; }, row.precision_mean,
            row.precision_std);
        agg([](const losses::Metrics& m) { return m.recall; }, row.recall_mean, row.recall_std);
    }
    return table;
}

}  // namespace evifuse::trainer

#endif
