#ifndef EVIFUSE_VOLUME_HPP
#define EVIFUSE_VOLUME_HPP

// Dense 3D scalar volumes (C-order, z slowest) plus their on-disk format:
// one JSON header line followed by the raw little-endian f32 payload.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "evifuse/error.hpp"

namespace evifuse {

enum class Modality { PET, CT, MASK, PROB, CONFLICT };

inline std::string to_string(Modality m) {
    switch (m) {
        case Modality::PET: return "PET";
        case Modality::CT: return "CT";
        case Modality::MASK: return "MASK";
        case Modality::PROB: return "PROB";
        case Modality::CONFLICT: return "CONFLICT";
    }
    throw domain_error("unknown modality tag");
}

inline Modality modality_from_string(const std::string& s) {
    if (s == "PET") return Modality::PET;
    if (s == "CT") return Modality::CT;
    if (s == "MASK") return Modality::MASK;
    if (s == "PROB") return Modality::PROB;
    if (s == "CONFLICT") return Modality::CONFLICT;
    throw format_error("unknown modality tag: " + s);
}

struct Dims {
    std::int64_t nz = 0, ny = 0, nx = 0;

    [[nodiscard]] std::int64_t count() const { return nz * ny * nx; }
    bool operator==(const Dims&) const = default;

    [[nodiscard]] std::string str() const {
        return std::to_string(nz) + "x" + std::to_string(ny) + "x" + std::to_string(nx);
    }
};

struct Spacing {
    double sz = 1.0, sy = 1.0, sx = 1.0;  // mm
    bool operator==(const Spacing&) const = default;
};

struct Volume {
    Dims dims;
    Spacing spacing;
    Modality modality = Modality::PROB;
    std::vector<float> data;

    Volume() = default;
    Volume(Dims d, Modality mod, Spacing sp = {}, float fill = 0.0f)
        : dims(d), spacing(sp), modality(mod), data(static_cast<std::size_t>(d.count()), fill) {
        if (d.nz <= 0 || d.ny <= 0 || d.nx <= 0) {
            throw domain_error("Volume: non-positive dims " + d.str());
        }
        if (sp.sz <= 0 || sp.sy <= 0 || sp.sx <= 0) {
            throw domain_error("Volume: non-positive spacing");
        }
    }

    [[nodiscard]] std::size_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return static_cast<std::size_t>((z * dims.ny + y) * dims.nx + x);
    }
    float& at(std::int64_t z, std::int64_t y, std::int64_t x) { return data[index(z, y, x)]; }
    [[nodiscard]] float at(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return data[index(z, y, x)];
    }

    bool operator==(const Volume&) const = default;
};

namespace detail {

inline void validate_payload(const Volume& v) {
    if (v.data.size() != static_cast<std::size_t>(v.dims.count())) {
        throw format_error("volume payload size mismatch: " + std::to_string(v.data.size()) +
                           " values for dims " + v.dims.str());
    }
    if (v.modality == Modality::MASK) {
        for (float x : v.data) {
            if (x != 0.0f && x != 1.0f) {
                throw format_error("MASK volume contains non-binary value " + std::to_string(x));
            }
        }
    } else if (v.modality == Modality::PROB || v.modality == Modality::CONFLICT) {
        for (float x : v.data) {
            if (!(x >= 0.0f && x <= 1.0f)) {
                throw format_error("PROB/CONFLICT volume value outside [0,1]: " +
                                   std::to_string(x));
            }
        }
    }
}

}  // namespace detail

inline constexpr int kVolumeFormatVersion = 1;

inline void save_volume(const Volume& v, const std::string& path) {
    detail::validate_payload(v);
    nlohmann::json header = {
        {"version", kVolumeFormatVersion},
        {"dims", {v.dims.nz, v.dims.ny, v.dims.nx}},
        {"spacing", {v.spacing.sz, v.spacing.sy, v.spacing.sx}},
        {"modality", to_string(v.modality)},
        {"dtype", "f32le"},
    };
    std::ofstream out(path, std::ios::binary);
    if (!out) throw format_error("save_volume: cannot open " + path);
    out << header.dump() << '\n';
    static_assert(std::endian::native == std::endian::little, "payload is little-endian");
    out.write(reinterpret_cast<const char*>(v.data.data()),
              static_cast<std::streamsize>(v.data.size() * sizeof(float)));
    if (!out) throw format_error("save_volume: write failed for " + path);
}

inline Volume load_volume(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw format_error("load_volume: cannot open " + path);
    std::string header_line;
    if (!std::getline(in, header_line)) throw format_error("load_volume: missing header in " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::exception& e) {
        throw format_error("load_volume: bad header in " + path + ": " + e.what());
    }
    try {
        if (header.at("version").get<int>() != kVolumeFormatVersion) {
            throw format_error("load_volume: unknown format version in " + path);
        }
        if (header.at("dtype").get<std::string>() != "f32le") {
            throw format_error("load_volume: unknown dtype in " + path);
        }
        Volume v;
        auto d = header.at("dims");
        v.dims = Dims{d.at(0).get<std::int64_t>(), d.at(1).get<std::int64_t>(),
                      d.at(2).get<std::int64_t>()};
        auto s = header.at("spacing");
        v.spacing = Spacing{s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
        v.modality = modality_from_string(header.at("modality").get<std::string>());
        if (v.dims.nz <= 0 || v.dims.ny <= 0 || v.dims.nx <= 0) {
            throw format_error("load_volume: non-positive dims in " + path);
        }

        v.data.resize(static_cast<std::size_t>(v.dims.count()));
        in.read(reinterpret_cast<char*>(v.data.data()),
                static_cast<std::streamsize>(v.data.size() * sizeof(float)));
        if (in.gcount() != static_cast<std::streamsize>(v.data.size() * sizeof(float))) {
            throw format_error("load_volume: truncated payload in " + path);
        }
        if (in.peek() != std::ifstream::traits_type::eof()) {
            throw format_error("load_volume: trailing bytes after payload in " + path);
        }
        detail::validate_payload(v);  // rejects non-finite MASK/PROB/CONFLICT values too
        return v;
    } catch (const nlohmann::json::exception& e) {
        throw format_error("load_volume: bad header field in " + path + ": " + e.what());
    }
}

// Trilinear resampling for scalar volumes, nearest-neighbor for masks
// (keeps them binary). Spacing is rescaled so physical extent is preserved.
inline Volume resize_trilinear(const Volume& v, Dims target) {
    if (target.nz <= 0 || target.ny <= 0 || target.nx <= 0) {
        throw domain_error("resize_trilinear: non-positive target dims " + target.str());
    }
    Spacing sp{v.spacing.sz * static_cast<double>(v.dims.nz) / static_cast<double>(target.nz),
               v.spacing.sy * static_cast<double>(v.dims.ny) / static_cast<double>(target.ny),
               v.spacing.sx * static_cast<double>(v.dims.nx) / static_cast<double>(target.nx)};
    Volume out(target, v.modality, sp);
    const bool nearest = v.modality == Modality::MASK;

    // Voxel-center alignment: output center u maps to (u + 0.5) * n_in / n_out - 0.5.
    auto src_coord = [](std::int64_t u, std::int64_t n_out, std::int64_t n_in) {
        return (static_cast<double>(u) + 0.5) * static_cast<double>(n_in) /
                   static_cast<double>(n_out) -
               0.5;
    };
    auto clampi = [](std::int64_t i, std::int64_t n) {
        return std::clamp<std::int64_t>(i, 0, n - 1);
    };

    for (std::int64_t z = 0; z < target.nz; ++z) {
        const double fz = src_coord(z, target.nz, v.dims.nz);
        for (std::int64_t y = 0; y < target.ny; ++y) {
            const double fy = src_coord(y, target.ny, v.dims.ny);
            for (std::int64_t x = 0; x < target.nx; ++x) {
                const double fx = src_coord(x, target.nx, v.dims.nx);
                if (nearest) {
                    out.at(z, y, x) = v.at(clampi(std::llround(fz), v.dims.nz),
                                           clampi(std::llround(fy), v.dims.ny),
                                           clampi(std::llround(fx), v.dims.nx));
                    continue;
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
                            const double w = (dz ? wz : 1.0 - wz) * (dy ? wy : 1.0 - wy) *
                                             (dx ? wx : 1.0 - wx);
                            acc += w * v.at(clampi(z0 + dz, v.dims.nz), clampi(y0 + dy, v.dims.ny),
                                            clampi(x0 + dx, v.dims.nx));
                        }
                    }
                }
                out.at(z, y, x) = static_cast<float>(acc);
            }
        }
    }
    return out;
}

// Z-score over all voxels with population standard deviation.
inline Volume standardize(const Volume& v) {
    if (v.dims.count() < 2) {
        throw degenerate_input_error("standardize: need more than one voxel");
    }
    double sum = 0.0;
    for (float x : v.data) sum += x;
    const double mean = sum / static_cast<double>(v.data.size());
    double ss = 0.0;
    for (float x : v.data) {
        const double d = static_cast<double>(x) - mean;
        ss += d * d;
    }
    const double var = ss / static_cast<double>(v.data.size());
    if (var <= 0.0) {
        throw degenerate_input_error("standardize: zero-variance volume");
    }
    const double inv_std = 1.0 / std::sqrt(var);
    Volume out = v;
    for (float& x : out.data) {
        x = static_cast<float>((static_cast<double>(x) - mean) * inv_std);
    }
    return out;
}

}  // namespace evifuse

#endif
