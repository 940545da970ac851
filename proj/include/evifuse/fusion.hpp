#ifndef EVIFUSE_FUSION_HPP
#define EVIFUSE_FUSION_HPP

// The evidential fusion layer: voxelwise Dempster combination of two
// Bayesian probability volumes, its conflict map, the exact backward pass,
// and the naive decision-level baselines.

#include <algorithm>
#include <cmath>
#include <string>

#include "evifuse/error.hpp"
#include "evifuse/volume.hpp"

namespace evifuse::fusion {

// Inputs are clamped away from {0,1} so the normalizer 1 - kappa never
// vanishes and the layer stays differentiable everywhere.
inline constexpr double kClampEps = 1e-6;

inline double clamp_prob(double p) { return std::clamp(p, kClampEps, 1.0 - kClampEps); }

struct VoxelFusion {
    double fused;
    double conflict;
};

// Bayesian Dempster combination on {0,1}: D = pq + (1-p)(1-q), fused = pq/D.
inline VoxelFusion fuse_voxel(double p, double q) {
    p = clamp_prob(p);
    q = clamp_prob(q);
    const double agree = p * q + (1.0 - p) * (1.0 - q);
    return {p * q / agree, 1.0 - agree};
}

struct VoxelFusionGrad {
    double d_p;  // d fused / d p = q(1-q)/D^2
    double d_q;  // d fused / d q = p(1-p)/D^2
};

inline VoxelFusionGrad fuse_voxel_grad(double p, double q) {
    p = clamp_prob(p);
    q = clamp_prob(q);
    const double agree = p * q + (1.0 - p) * (1.0 - q);
    const double inv2 = 1.0 / (agree * agree);
    return {q * (1.0 - q) * inv2, p * (1.0 - p) * inv2};
}

struct FusionResult {
    Volume fused;     // PROB
    Volume conflict;  // CONFLICT, kappa per voxel
};

struct FusionGradients {
    Volume dA;
    Volume dB;
};

namespace detail {

inline void check_same_dims(const Volume& a, const Volume& b, const char* op) {
    if (a.dims != b.dims) {
        throw shape_error(std::string(op) + ": dims mismatch " + a.dims.str() + " vs " +
                          b.dims.str());
    }
}

inline void check_finite_prob(const Volume& v, const char* op) {
    for (float x : v.data) {
        if (!std::isfinite(x) || x < 0.0f || x > 1.0f) {
            throw domain_error(std::string(op) + ": input probability outside [0,1]: " +
                               std::to_string(x));
        }
    }
}

}  // namespace detail

inline FusionResult fuse_volumes(const Volume& segA, const Volume& segB) {
    detail::check_same_dims(segA, segB, "fuse_volumes");
    detail::check_finite_prob(segA, "fuse_volumes");
    detail::check_finite_prob(segB, "fuse_volumes");
    FusionResult out{Volume(segA.dims, Modality::PROB, segA.spacing),
                     Volume(segA.dims, Modality::CONFLICT, segA.spacing)};
    for (std::size_t i = 0; i < segA.data.size(); ++i) {
        const VoxelFusion f = fuse_voxel(segA.data[i], segB.data[i]);
        out.fused.data[i] = static_cast<float>(f.fused);
        out.conflict.data[i] = static_cast<float>(f.conflict);
    }
    return out;
}

inline FusionGradients fuse_backward(const Volume& segA, const Volume& segB,
                                     const Volume& upstream) {
    detail::check_same_dims(segA, segB, "fuse_backward");
    detail::check_same_dims(segA, upstream, "fuse_backward");
    FusionGradients out{Volume(segA.dims, Modality::PROB, segA.spacing),
                        Volume(segA.dims, Modality::PROB, segA.spacing)};
    out.dA.modality = Modality::PET;  // gradients are unconstrained scalars
    out.dB.modality = Modality::PET;
    for (std::size_t i = 0; i < segA.data.size(); ++i) {
        const VoxelFusionGrad g = fuse_voxel_grad(segA.data[i], segB.data[i]);
        const double up = upstream.data[i];
        out.dA.data[i] = static_cast<float>(up * g.d_p);
        out.dB.data[i] = static_cast<float>(up * g.d_q);
    }
    return out;
}

enum class BaselineStrategy { Average, Vote, Max };

inline BaselineStrategy baseline_from_string(const std::string& s) {
    if (s == "average") return BaselineStrategy::Average;
    if (s == "vote") return BaselineStrategy::Vote;
    if (s == "max") return BaselineStrategy::Max;
    throw domain_error("unknown baseline strategy: " + s);
}

inline Volume baseline_fuse(BaselineStrategy strategy, const Volume& segA, const Volume& segB) {
    detail::check_same_dims(segA, segB, "baseline_fuse");
    Volume out(segA.dims, Modality::PROB, segA.spacing);
    for (std::size_t i = 0; i < segA.data.size(); ++i) {
        const double p = segA.data[i];
        const double q = segB.data[i];
        double r = 0.0;
        switch (strategy) {
            case BaselineStrategy::Average: r = 0.5 * (p + q); break;
            case BaselineStrategy::Vote:
                if (p > 0.5 && q > 0.5) r = 1.0;
                else if (p <= 0.5 && q <= 0.5) r = 0.0;
                else r = 0.5;
                break;
            case BaselineStrategy::Max: r = std::max(p, q); break;
        }
        out.data[i] = static_cast<float>(r);
    }
    return out;
}

// Strict ">": a voxel exactly at the threshold goes to background.
inline Volume binarize(const Volume& seg, double threshold = 0.5) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw domain_error("binarize: threshold outside (0,1): " + std::to_string(threshold));
    }
    Volume out(seg.dims, Modality::MASK, seg.spacing);
    for (std::size_t i = 0; i < seg.data.size(); ++i) {
        out.data[i] = seg.data[i] > threshold ? 1.0f : 0.0f;
    }
    return out;
}

}  // namespace evifuse::fusion

#endif
