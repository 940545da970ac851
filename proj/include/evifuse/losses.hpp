#ifndef EVIFUSE_LOSSES_HPP
#define EVIFUSE_LOSSES_HPP

// Multi-task segmentation loss (weighted Dice terms for the two branches,
// summed squared error for the fused map) with analytic gradients, and the
// voxel-level evaluation metrics.
//
// All reductions run as plain sequential double accumulations so results
// are run-to-run deterministic.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "evifuse/error.hpp"
#include "evifuse/fusion.hpp"
#include "evifuse/volume.hpp"

namespace evifuse::losses {

// Keeps the Dice ratio defined when both prediction and truth are empty.
inline constexpr double kDiceSmooth = 1e-6;

template <typename T>
struct ScalarLoss {
    double value;
    std::vector<T> grad;  // d value / d S, per voxel
};

// Soft Dice loss: 1 - (2*sum(S*G) + s) / (sum(S) + sum(G) + s).
template <typename T>
ScalarLoss<T> dice_loss(std::span<const T> S, std::span<const T> G) {
    if (S.size() != G.size()) throw shape_error("dice_loss: size mismatch");
    double inter = 0.0, sum_s = 0.0, sum_g = 0.0;
    for (std::size_t i = 0; i < S.size(); ++i) {
        inter += static_cast<double>(S[i]) * static_cast<double>(G[i]);
        sum_s += static_cast<double>(S[i]);
        sum_g += static_cast<double>(G[i]);
    }
    const double num = 2.0 * inter + kDiceSmooth;
    const double den = sum_s + sum_g + kDiceSmooth;
    ScalarLoss<T> out;
    out.value = 1.0 - num / den;
    out.grad.resize(S.size());
    const double inv_den2 = 1.0 / (den * den);
    for (std::size_t i = 0; i < S.size(); ++i) {
        out.grad[i] = static_cast<T>(-(2.0 * static_cast<double>(G[i]) * den - num) * inv_den2);
    }
    return out;
}

// Summed (not mean) squared error; the sum keeps the fused term's weight
// growing with volume size, matching the Dice terms' unit scale only on
// tiny fixtures.
template <typename T>
ScalarLoss<T> mse_loss(std::span<const T> Sf, std::span<const T> G) {
    if (Sf.size() != G.size()) throw shape_error("mse_loss: size mismatch");
    ScalarLoss<T> out;
    out.grad.resize(Sf.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < Sf.size(); ++i) {
        const double d = static_cast<double>(Sf[i]) - static_cast<double>(G[i]);
        acc += d * d;
        out.grad[i] = static_cast<T>(2.0 * d);
    }
    out.value = acc;
    return out;
}

namespace detail {

inline void check_pair(const Volume& a, const Volume& b, const char* op) {
    if (a.dims != b.dims) {
        throw shape_error(std::string(op) + ": dims mismatch " + a.dims.str() + " vs " +
                          b.dims.str());
    }
}

inline Volume grad_volume(const Volume& like, const std::vector<float>& grad) {
    Volume g(like.dims, Modality::PET, like.spacing);  // gradients are unconstrained
    g.data = grad;
    return g;
}

}  // namespace detail

inline std::pair<double, Volume> dice_loss(const Volume& S, const Volume& G) {
    detail::check_pair(S, G, "dice_loss");
    auto r = dice_loss<float>(S.data, G.data);
    return {r.value, detail::grad_volume(S, r.grad)};
}

inline std::pair<double, Volume> mse_loss(const Volume& Sf, const Volume& G) {
    detail::check_pair(Sf, G, "mse_loss");
    auto r = mse_loss<float>(Sf.data, G.data);
    return {r.value, detail::grad_volume(Sf, r.grad)};
}

struct LossWeights {
    double wCT = 0.75;
    double wPET = 0.25;
    double wF = 1.0;
};

struct LossReport {
    double lossPET = 0.0;
    double lossCT = 0.0;
    double lossF = 0.0;
    double lossAll = 0.0;
    Volume dS1;  // wPET * dDice(S1, G)
    Volume dS2;  // wCT  * dDice(S2, G)
    Volume dSf;  // wF   * dMSE(Sf, G); route through fusion backward upstream
};

// S1/S2 are the branch probability maps, Sf the fused map, G the
// modality-A mask used as ground truth for every term.
inline LossReport multitask_loss(const Volume& S1, const Volume& S2, const Volume& Sf,
                                 const Volume& G, const LossWeights& w = {}) {
    detail::check_pair(S1, G, "multitask_loss");
    detail::check_pair(S2, G, "multitask_loss");
    detail::check_pair(Sf, G, "multitask_loss");
    LossReport rep;
    auto [l_pet, g_pet] = dice_loss(S1, G);
    auto [l_ct, g_ct] = dice_loss(S2, G);
    auto [l_f, g_f] = mse_loss(Sf, G);
    rep.lossPET = l_pet;
    rep.lossCT = l_ct;
    rep.lossF = l_f;
    rep.lossAll = w.wCT * l_ct + w.wPET * l_pet + w.wF * l_f;
    for (float& x : g_pet.data) x = static_cast<float>(x * w.wPET);
    for (float& x : g_ct.data) x = static_cast<float>(x * w.wCT);
    for (float& x : g_f.data) x = static_cast<float>(x * w.wF);
    rep.dS1 = std::move(g_pet);
    rep.dS2 = std::move(g_ct);
    rep.dSf = std::move(g_f);
    return rep;
}

struct Metrics {
    double dice = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    std::int64_t tp = 0, fp = 0, fn = 0;
};

// Voxel-level confusion counts after binarizing the prediction.
// Conventions: empty prediction and empty truth score 1 everywhere;
// otherwise an undefined ratio (0/0) scores 0.
inline Metrics metrics(const Volume& pred, const Volume& G, double threshold = 0.5) {
    detail::check_pair(pred, G, "metrics");
    Metrics m;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] > threshold;
        const bool g = G.data[i] != 0.0f;
        if (p && g) ++m.tp;
        else if (p && !g) ++m.fp;
        else if (!p && g) ++m.fn;
    }
    if (m.tp + m.fp + m.fn == 0) {
        m.dice = m.precision = m.recall = 1.0;
        return m;
    }
    m.dice = static_cast<double>(2 * m.tp) / static_cast<double>(2 * m.tp + m.fp + m.fn);
    m.precision = (m.tp + m.fp) > 0
                      ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp)
                      : 0.0;
    m.recall = (m.tp + m.fn) > 0 ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn)
                                 : 0.0;
    return m;
}

}  // namespace evifuse::losses

#endif
