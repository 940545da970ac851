#ifndef EVIFUSE_SYNTH_HPP
#define EVIFUSE_SYNTH_HPP

// Paired-modality phantom generator. Modality A is PET-like: clean
// background, high lesion contrast. Modality B is CT-like: structured
// background, weaker contrast, and a lower per-lesion visibility
// probability. Lesions invisible in one modality are the conflict cases
// decision-level fusion has to survive.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "evifuse/error.hpp"
#include "evifuse/volume.hpp"

namespace evifuse::synth {

struct generation_error : std::runtime_error {
    explicit generation_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct PhantomConfig {
    Dims dims{32, 64, 64};
    int lesions_min = 1;
    int lesions_max = 6;
    double radius_min = 2.0;  // voxels
    double radius_max = 6.0;
    double contrast_a = 1.0;
    double noise_a = 0.05;
    double contrast_b = 0.65;
    double noise_b = 0.10;
    double background_a = 0.10;  // low-frequency background amplitude
    double background_b = 0.20;
    double p_visible_a = 0.95;
    double p_visible_b = 0.7;

    void validate() const {
        if (dims.nz <= 0 || dims.ny <= 0 || dims.nx <= 0) {
            throw domain_error("PhantomConfig: non-positive dims");
        }
        if (lesions_min < 0 || lesions_max < lesions_min) {
            throw domain_error("PhantomConfig: bad lesion count range");
        }
        if (radius_min < 1.0 || radius_max < radius_min) {
            throw domain_error("PhantomConfig: bad radius range");
        }
        for (double p : {p_visible_a, p_visible_b}) {
            if (!(p >= 0.0 && p <= 1.0)) {
                throw domain_error("PhantomConfig: visibility probability outside [0,1]");
            }
        }
    }
};

struct Lesion {
    double cz, cy, cx;  // center, voxel coordinates
    double rz, ry, rx;  // ellipsoid radii, voxels
    bool visible_a = true;
    bool visible_b = true;
};

struct CaseTriple {
    Volume volA;   // PET-like
    Volume volB;   // CT-like
    Volume mask;   // union of lesion ellipsoids
    std::vector<Lesion> lesions;
};

namespace detail {

// Smooth low-frequency field: a coarse seeded Gaussian grid upsampled
// trilinearly to the target dims.
inline Volume low_frequency_field(Dims dims, std::int64_t cell, std::mt19937_64& rng) {
    const Dims coarse{std::max<std::int64_t>(2, dims.nz / cell),
                      std::max<std::int64_t>(2, dims.ny / cell),
                      std::max<std::int64_t>(2, dims.nx / cell)};
    Volume grid(coarse, Modality::PET);
    std::normal_distribution<double> n(0.0, 1.0);
    for (float& v : grid.data) v = static_cast<float>(n(rng));
    return resize_trilinear(grid, dims);
}

}  // namespace detail

inline CaseTriple generate_case(const PhantomConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);

    // Lesion placement: non-overlap enforced on bounding spheres, with a
    // bounded retry budget per case.
    std::uniform_int_distribution<int> count_dist(cfg.lesions_min, cfg.lesions_max);
    const int want = count_dist(rng);
    std::uniform_real_distribution<double> radius_dist(cfg.radius_min, cfg.radius_max);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<Lesion> lesions;
    int attempts = 0;
    const int max_attempts = 200 * std::max(want, 1);
    while (static_cast<int>(lesions.size()) < want) {
        if (++attempts > max_attempts) {
            throw generation_error("generate_case: could not place " + std::to_string(want) +
                                   " lesions in " + cfg.dims.str());
        }
        Lesion l;
        l.rz = radius_dist(rng);
        l.ry = radius_dist(rng);
        l.rx = radius_dist(rng);
        const double mz = l.rz + 1, my = l.ry + 1, mx = l.rx + 1;
        if (2 * mz >= static_cast<double>(cfg.dims.nz) ||
            2 * my >= static_cast<double>(cfg.dims.ny) ||
            2 * mx >= static_cast<double>(cfg.dims.nx)) {
            continue;  // lesion cannot fit; retry (and eventually fail)
        }
        l.cz = mz + unit(rng) * (static_cast<double>(cfg.dims.nz) - 2 * mz);
        l.cy = my + unit(rng) * (static_cast<double>(cfg.dims.ny) - 2 * my);
        l.cx = mx + unit(rng) * (static_cast<double>(cfg.dims.nx) - 2 * mx);
        const double r_new = std::max({l.rz, l.ry, l.rx});
        bool overlaps = false;
        for (const Lesion& o : lesions) {
            const double r_old = std::max({o.rz, o.ry, o.rx});
            const double d2 = (l.cz - o.cz) * (l.cz - o.cz) + (l.cy - o.cy) * (l.cy - o.cy) +
                              (l.cx - o.cx) * (l.cx - o.cx);
            if (d2 < (r_new + r_old) * (r_new + r_old)) {
                overlaps = true;
                break;
            }
        }
        if (overlaps) continue;
        l.visible_a = unit(rng) < cfg.p_visible_a;
        l.visible_b = unit(rng) < cfg.p_visible_b;
        lesions.push_back(l);
    }

    CaseTriple out;
    out.mask = Volume(cfg.dims, Modality::MASK);
    out.volA = detail::low_frequency_field(cfg.dims, 8, rng);
    for (float& v : out.volA.data) v = static_cast<float>(v * cfg.background_a);
    out.volA.modality = Modality::PET;

    // CT-like background: two frequency bands plus a vertical gradient.
    out.volB = detail::low_frequency_field(cfg.dims, 16, rng);
    {
        const Volume fine = detail::low_frequency_field(cfg.dims, 4, rng);
        for (std::size_t i = 0; i < out.volB.data.size(); ++i) {
            out.volB.data[i] =
                static_cast<float>(cfg.background_b *
                                   (out.volB.data[i] + 0.5f * fine.data[i]));
        }
        for (std::int64_t z = 0; z < cfg.dims.nz; ++z) {
            const float g = static_cast<float>(
                0.3 * cfg.background_b * static_cast<double>(z) /
                static_cast<double>(cfg.dims.nz));
            for (std::int64_t y = 0; y < cfg.dims.ny; ++y) {
                for (std::int64_t x = 0; x < cfg.dims.nx; ++x) {
                    out.volB.at(z, y, x) += g;
                }
            }
        }
    }
    out.volB.modality = Modality::CT;

    for (const Lesion& l : lesions) {
        const std::int64_t z0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(l.cz - l.rz));
        const std::int64_t z1 =
            std::min(cfg.dims.nz, static_cast<std::int64_t>(l.cz + l.rz) + 2);
        const std::int64_t y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(l.cy - l.ry));
        const std::int64_t y1 =
            std::min(cfg.dims.ny, static_cast<std::int64_t>(l.cy + l.ry) + 2);
        const std::int64_t x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(l.cx - l.rx));
        const std::int64_t x1 =
            std::min(cfg.dims.nx, static_cast<std::int64_t>(l.cx + l.rx) + 2);
        for (std::int64_t z = z0; z < z1; ++z) {
            for (std::int64_t y = y0; y < y1; ++y) {
                for (std::int64_t x = x0; x < x1; ++x) {
                    const double dz = (static_cast<double>(z) - l.cz) / l.rz;
                    const double dy = (static_cast<double>(y) - l.cy) / l.ry;
                    const double dx = (static_cast<double>(x) - l.cx) / l.rx;
                    const double e = dz * dz + dy * dy + dx * dx;
                    if (e > 1.0) continue;
                    out.mask.at(z, y, x) = 1.0f;
                    const double profile = 1.0 - 0.5 * e;  // bright core, softer rim
                    if (l.visible_a) {
                        out.volA.at(z, y, x) += static_cast<float>(cfg.contrast_a * profile);
                    }
                    if (l.visible_b) {
                        out.volB.at(z, y, x) += static_cast<float>(cfg.contrast_b * profile);
                    }
                }
            }
        }
    }

    std::normal_distribution<double> na(0.0, cfg.noise_a);
    for (float& v : out.volA.data) v += static_cast<float>(na(rng));
    std::normal_distribution<double> nb(0.0, cfg.noise_b);
    for (float& v : out.volB.data) v += static_cast<float>(nb(rng));

    out.lesions = std::move(lesions);
    return out;
}

enum class Split { Train, Val, Test };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    throw domain_error("unknown split");
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw format_error("unknown split tag: " + s);
}

struct ManifestEntry {
    std::string case_id;
    Split split = Split::Train;
    std::string pathA, pathB, pathMask;  // resolved on load
};

using Manifest = std::vector<ManifestEntry>;

// 80/10/10 split by case index: the first 80% train, then val, then test.
inline Split split_for_index(std::int64_t i, std::int64_t n) {
    const std::int64_t n_val = n / 10;
    const std::int64_t n_test = n / 10;
    const std::int64_t n_train = n - n_val - n_test;
    if (i < n_train) return Split::Train;
    if (i < n_train + n_val) return Split::Val;
    return Split::Test;
}

inline void save_manifest(const Manifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw format_error("save_manifest: cannot open " + path);
    for (const auto& e : m) {
        out << e.case_id << ' ' << to_string(e.split) << ' ' << e.pathA << ' ' << e.pathB << ' '
            << e.pathMask << '\n';
    }
    if (!out) throw format_error("save_manifest: write failed for " + path);
}

inline Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw format_error("load_manifest: cannot open " + path);
    const auto dir = std::filesystem::path(path).parent_path();
    Manifest m;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        ManifestEntry e;
        std::string split_tag;
        if (!(ss >> e.case_id >> split_tag >> e.pathA >> e.pathB >> e.pathMask)) {
            throw format_error("load_manifest: malformed line in " + path + ": " + line);
        }
        e.split = split_from_string(split_tag);
        for (std::string* p : {&e.pathA, &e.pathB, &e.pathMask}) {
            if (!std::filesystem::path(*p).is_absolute()) *p = (dir / *p).string();
        }
        m.push_back(std::move(e));
    }
    return m;
}

// Writes n cases plus the manifest into out_dir; per-case seeds are derived
// from the dataset seed so cases are independent and reproducible.
inline Manifest generate_dataset(const PhantomConfig& cfg, std::int64_t n_cases,
                                 std::uint64_t seed, const std::string& out_dir) {
    if (n_cases < 1) throw domain_error("generate_dataset: need at least one case");
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    Manifest manifest;
    for (std::int64_t i = 0; i < n_cases; ++i) {
        const std::uint64_t case_seed =
            seed ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(i + 1));
        const CaseTriple c = generate_case(cfg, case_seed);
        char id[32];
        std::snprintf(id, sizeof id, "case_%04lld", static_cast<long long>(i));
        ManifestEntry e;
        e.case_id = id;
        e.split = split_for_index(i, n_cases);
        e.pathA = std::string(id) + "_a.vol";
        e.pathB = std::string(id) + "_b.vol";
        e.pathMask = std::string(id) + "_mask.vol";
        const auto dir = std::filesystem::path(out_dir);
        save_volume(c.volA, (dir / e.pathA).string());
        save_volume(c.volB, (dir / e.pathB).string());
        save_volume(c.mask, (dir / e.pathMask).string());
        manifest.push_back(std::move(e));
    }
    save_manifest(manifest, (std::filesystem::path(out_dir) / "manifest.txt").string());
    return load_manifest((std::filesystem::path(out_dir) / "manifest.txt").string());
}

}  // namespace evifuse::synth

#endif
