#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "evifuse/trainer.hpp"

using namespace evifuse;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / "evifuse_test_trainer" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

synth::Manifest tiny_dataset(const fs::path& dir, int n_cases, std::uint64_t seed) {
    synth::PhantomConfig cfg;
    cfg.dims = {8, 16, 16};
    cfg.lesions_min = 1;
    cfg.lesions_max = 2;
    cfg.radius_min = 2.0;
    cfg.radius_max = 3.5;
    return synth::generate_dataset(cfg, n_cases, seed, dir.string());
}

trainer::TrainConfig tiny_config() {
    trainer::TrainConfig cfg;
    cfg.model = nn::ModelConfig{.levels = 2, .base_channels = 2};
    cfg.epochs = 2;
    cfg.seed = 7;
    cfg.augment.enabled = false;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("adam step matches a hand-computed update") {
    // Two parameters, one step, default betas, lr=0.1, eps=1e-8.
    std::vector<double> p{1.0, -0.5}, g{0.1, -0.2}, m{0.0, 0.0}, v{0.0, 0.0};
    optim::Hyper h;
    h.lr = 0.1;
    optim::adam_step<double>(p, g, m, v, 1, h);

    // m1 = 0.1*g, v1 = 0.001*g^2; m_hat = g, v_hat = g^2;
    // update = lr * g / (|g| + eps).
    for (int i = 0; i < 2; ++i) {
        const double gi = (i == 0) ? 0.1 : -0.2;
        const double expect_m = 0.1 * gi;
        const double expect_v = 0.001 * gi * gi;
        CHECK(m[i] == Catch::Approx(expect_m).margin(1e-15));
        CHECK(v[i] == Catch::Approx(expect_v).margin(1e-15));
        const double base = (i == 0) ? 1.0 : -0.5;
        const double step = 0.1 * gi / (std::abs(gi) + 1e-8);
        CHECK(p[i] == Catch::Approx(base - step).margin(1e-12));
    }

    // Second step with the same gradient keeps moving the same direction.
    const auto before = p;
    optim::adam_step<double>(p, g, m, v, 2, h);
    CHECK(p[0] < before[0]);
    CHECK(p[1] > before[1]);
}

TEST_CASE("sgd step is plain scaled descent") {
    std::vector<double> p{2.0, -1.0};
    const std::vector<double> g{0.5, -0.25};
    optim::sgd_step<double>(p, g, 0.2);
    CHECK(p[0] == Catch::Approx(1.9).margin(1e-15));
    CHECK(p[1] == Catch::Approx(-0.95).margin(1e-15));
}

TEST_CASE("optimizer state round-trips and resumes identically") {
    const auto dir = temp_dir("opt");
    const nn::ModelConfig mcfg{.levels = 2, .base_channels = 2};
    auto model1 = nn::init_model<float>(mcfg, 1);
    auto model2 = model1;
    auto grads = nn::init_model<float>(mcfg, 2);

    optim::Hyper h;
    h.lr = 0.01;
    optim::State<float> s1(model1, h);
    s1.step(model1, grads);

    const auto path = (dir / "opt.state").string();
    s1.save(path);
    auto s2 = optim::State<float>::load(path);
    CHECK(s2.steps() == 1);
    CHECK(s2.hyper().lr == h.lr);

    // The restored state continues exactly like the original.
    auto model1b = model1;
    s1.step(model1, grads);
    s2.step(model1b, grads);
    CHECK(model1 == model1b);

    // Mismatched layout is a usage error.
    auto other = nn::init_model<float>(nn::ModelConfig{.levels = 3, .base_channels = 2}, 3);
    CHECK_THROWS_AS(s2.step(other, other), usage_error);
    (void)model2;
}

TEST_CASE("identity augmentation reproduces the input bit-exactly") {
    synth::PhantomConfig pcfg;
    pcfg.dims = {8, 12, 12};
    pcfg.lesions_min = pcfg.lesions_max = 1;
    pcfg.radius_min = 2.0;
    pcfg.radius_max = 3.0;
    const auto c = synth::generate_case(pcfg, 3);

    trainer::AugmentConfig acfg;
    acfg.max_rotation_deg = 0.0;
    acfg.max_translation_frac = 0.0;
    acfg.scale_min = acfg.scale_max = 1.0;
    acfg.elastic_amplitude = 0.0;
    const auto out = trainer::augment(c, acfg, 11);
    CHECK(out.volA == c.volA);
    CHECK(out.volB == c.volB);
    CHECK(out.mask == c.mask);
}

TEST_CASE("augmentation is deterministic, seed-sensitive and mask-safe") {
    synth::PhantomConfig pcfg;
    pcfg.dims = {8, 12, 12};
    pcfg.lesions_min = pcfg.lesions_max = 1;
    pcfg.radius_min = 2.0;
    pcfg.radius_max = 3.0;
    const auto c = synth::generate_case(pcfg, 4);

    const trainer::AugmentConfig acfg;
    const auto a = trainer::augment(c, acfg, 5);
    const auto b = trainer::augment(c, acfg, 5);
    CHECK(a.volA == b.volA);
    CHECK(a.volB == b.volB);
    CHECK(a.mask == b.mask);

    const auto d = trainer::augment(c, acfg, 6);
    CHECK(a.volA != d.volA);

    for (float v : a.mask.data) CHECK((v == 0.0f || v == 1.0f));
    CHECK(a.mask.modality == Modality::MASK);
    CHECK(a.volA.dims == c.volA.dims);
}

TEST_CASE("routed gradients match finite differences in double") {
    const std::size_t n = 5 * 6 * 6;
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    std::vector<double> s1(n), s2(n), g(n);
    for (std::size_t i = 0; i < n; ++i) {
        s1[i] = u(rng);
        s2[i] = u(rng);
        g[i] = (rng() % 3 == 0) ? 1.0 : 0.0;
    }

    const losses::LossWeights w;
    const auto r = trainer::route_case<double>(s1, s2, g, w, true);

    const double h = 1e-6;
    auto loss_all = [&] {
        return trainer::route_case<double>(s1, s2, g, w, true).lossAll;
    };
    for (int rep = 0; rep < 40; ++rep) {
        const std::size_t i = rng() % n;
        for (auto* vec : {&s1, &s2}) {
            const double saved = (*vec)[i];
            (*vec)[i] = saved + h;
            const double lp = loss_all();
            (*vec)[i] = saved - h;
            const double lm = loss_all();
            (*vec)[i] = saved;
            const double fd = (lp - lm) / (2 * h);
            const double an = (vec == &s1) ? r.gA[i] : r.gB[i];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
            CHECK(std::abs(fd - an) / denom < 1e-4);
        }
    }

    // Loss decomposition is exact arithmetic.
    CHECK(r.lossAll ==
          Catch::Approx(w.wCT * r.lossCT + w.wPET * r.lossPET + w.wF * r.lossF).margin(1e-12));
}

TEST_CASE("warmup routing carries only the branch dice terms") {
    const std::size_t n = 64;
    std::mt19937_64 rng(18);
    std::uniform_real_distribution<double> u(0.1, 0.9);
    std::vector<double> s1(n), s2(n), g(n);
    for (std::size_t i = 0; i < n; ++i) {
        s1[i] = u(rng);
        s2[i] = u(rng);
        g[i] = (i % 4 == 0) ? 1.0 : 0.0;
    }
    const losses::LossWeights w;
    const auto r = trainer::route_case<double>(s1, s2, g, w, false);
    const auto d1 = losses::dice_loss<double>(s1, g);
    const auto d2 = losses::dice_loss<double>(s2, g);
    for (std::size_t i = 0; i < n; ++i) {
        CHECK(r.gA[i] == Catch::Approx(w.wPET * d1.grad[i]).margin(1e-15));
        CHECK(r.gB[i] == Catch::Approx(w.wCT * d2.grad[i]).margin(1e-15));
    }
    // The reported lossAll still includes the fusion term.
    CHECK(r.lossF > 0.0);
}

TEST_CASE("zero learning rate leaves the parameters untouched") {
    const auto dir = temp_dir("zerolr");
    const auto manifest = tiny_dataset(dir, 3, 31);

    auto cfg = tiny_config();
    cfg.epochs = 1;
    cfg.opt.lr = 0.0;
    const auto res = trainer::train(cfg, manifest);

    const auto init_a = nn::init_model<float>(cfg.model, trainer::mix_seed(cfg.seed, 0xA));
    const auto init_b = nn::init_model<float>(cfg.model, trainer::mix_seed(cfg.seed, 0xB));
    CHECK(res.modelA == init_a);
    CHECK(res.modelB == init_b);
    REQUIRE(res.history.size() == 1);
    CHECK(std::isfinite(res.history[0].lossAll));
}

TEST_CASE("training reduces the loss and is deterministic") {
    const auto dir = temp_dir("smoke");
    const auto manifest = tiny_dataset(dir, 4, 33);

    auto cfg = tiny_config();
    cfg.epochs = 6;
    cfg.opt.lr = 3e-3;
    cfg.augment.enabled = true;
    const auto r1 = trainer::train(cfg, manifest);
    REQUIRE(r1.history.size() == 6);
    CHECK(r1.history.back().lossAll < r1.history.front().lossAll);
    for (const auto& e : r1.history) {
        CHECK(std::isfinite(e.lossAll));
        CHECK(std::isfinite(e.val_lossAll));
    }

    const auto r2 = trainer::train(cfg, manifest);
    CHECK(r1.modelA == r2.modelA);
    CHECK(r1.modelB == r2.modelB);
    for (std::size_t i = 0; i < r1.history.size(); ++i) {
        CHECK(r1.history[i].lossAll == r2.history[i].lossAll);
        CHECK(r1.history[i].val_lossAll == r2.history[i].val_lossAll);
    }
}

TEST_CASE("resume reproduces an uninterrupted run bit-exactly") {
    const auto data_dir = temp_dir("resume_data");
    const auto manifest = tiny_dataset(data_dir, 4, 35);

    auto cfg = tiny_config();
    cfg.epochs = 4;
    cfg.opt.lr = 1e-3;

    const auto full_dir = temp_dir("resume_full");
    const auto full = trainer::train(cfg, manifest, full_dir.string());

    const auto part_dir = temp_dir("resume_part");
    auto cfg2 = cfg;
    cfg2.epochs = 2;
    trainer::train(cfg2, manifest, part_dir.string());
    cfg2.epochs = 4;
    cfg2.resume = true;
    const auto resumed = trainer::train(cfg2, manifest, part_dir.string());

    CHECK(resumed.modelA == full.modelA);
    CHECK(resumed.modelB == full.modelB);
    REQUIRE(resumed.history.size() == full.history.size());
    for (std::size_t i = 0; i < full.history.size(); ++i) {
        CHECK(resumed.history[i].lossAll == full.history[i].lossAll);
        CHECK(resumed.history[i].val_lossAll == full.history[i].val_lossAll);
    }
    CHECK(slurp(part_dir / "history.csv") == slurp(full_dir / "history.csv"));
    CHECK(slurp(part_dir / "model_a_last.ckpt") == slurp(full_dir / "model_a_last.ckpt"));
}

TEST_CASE("history csv has the documented layout") {
    std::vector<trainer::EpochStats> h{{1, 0.5, 0.25, 0.125, 0.0625, 0.75}};
    const auto dir = temp_dir("csv");
    const auto path = (dir / "history.csv").string();
    trainer::write_history_csv(h, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,lossAll,lossPET,lossCT,lossF,val_lossAll");
    std::getline(in, line);
    CHECK(line == "1,0.5,0.25,0.125,0.0625,0.75");
}

TEST_CASE("evaluate reports the five decision-level methods") {
    const auto dir = temp_dir("eval");
    // 10 cases so the split has one val and one test case.
    const auto manifest = tiny_dataset(dir, 10, 41);

    const auto cfg = tiny_config();
    const auto mA = nn::init_model<float>(cfg.model, 1);
    const auto mB = nn::init_model<float>(cfg.model, 2);
    const auto table = trainer::evaluate(mA, mB, manifest, synth::Split::Test);
    REQUIRE(table.size() == 5);
    CHECK(table[0].name == "A-only");
    CHECK(table[1].name == "B-only");
    CHECK(table[2].name == "evidential");
    CHECK(table[3].name == "average");
    CHECK(table[4].name == "vote");
    for (const auto& row : table) {
        CHECK(row.per_case.size() == 1);
        CHECK(row.dice_mean >= 0.0);
        CHECK(row.dice_mean <= 1.0);
        CHECK(row.recall_mean >= 0.0);
        CHECK(row.precision_mean <= 1.0);
    }

    CHECK_THROWS_AS(trainer::evaluate(mA, mB, synth::Manifest{}, synth::Split::Test),
                    domain_error);
}

TEST_CASE("train config validation") {
    auto cfg = tiny_config();
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), domain_error);
    cfg = tiny_config();
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), domain_error);
    cfg = tiny_config();
    cfg.opt.lr = -1.0;
    CHECK_THROWS_AS(cfg.validate(), domain_error);
}

TEST_CASE("training aborts on a manifest without train cases") {
    const auto dir = temp_dir("noval");
    auto manifest = tiny_dataset(dir, 2, 43);
    for (auto& e : manifest) e.split = synth::Split::Test;
    CHECK_THROWS_AS(trainer::train(tiny_config(), manifest), domain_error);
}
