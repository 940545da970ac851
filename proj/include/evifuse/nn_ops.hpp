#ifndef EVIFUSE_NN_OPS_HPP
#define EVIFUSE_NN_OPS_HPP

// Layer primitives for the 3D encoder-decoder. Activations are [C,Z,Y,X]
// tensors, conv weights [Cout,Cin,k,k,k] with odd k and same-size padding.
// Reductions accumulate in double in a fixed order; parallel loops only
// ever split over independent output slots, so results do not depend on
// the thread count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "evifuse/error.hpp"
#include "evifuse/parallel.hpp"
#include "evifuse/tensor.hpp"

namespace evifuse::nn {

template <std::floating_point T>
struct ConvParam {
    Tensor<T> w;  // [Cout, Cin, k, k, k]
    Tensor<T> b;  // [Cout]

    [[nodiscard]] std::int64_t out_channels() const { return w.shape[0]; }
    [[nodiscard]] std::int64_t in_channels() const { return w.shape[1]; }
    [[nodiscard]] std::int64_t kernel() const { return w.shape[2]; }

    bool operator==(const ConvParam&) const = default;
};

namespace detail {

struct Extent {
    std::int64_t c, nz, ny, nx;
    [[nodiscard]] std::int64_t voxels() const { return nz * ny * nx; }
};

template <std::floating_point T>
Extent extent(const Tensor<T>& t) {
    if (t.shape.size() != 4) throw shape_error("expected [C,Z,Y,X] tensor, got " + t.shape_str());
    return {t.shape[0], t.shape[1], t.shape[2], t.shape[3]};
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const ConvParam<T>& p, int threads = 1) {
    const auto e = detail::extent(x);
    if (e.c != p.in_channels()) {
        throw shape_error("conv3d: input has " + std::to_string(e.c) + " channels, weight wants " +
                          std::to_string(p.in_channels()));
    }
    const std::int64_t k = p.kernel();
    const std::int64_t pad = k / 2;
    const std::int64_t vox = e.voxels();
    Tensor<T> y({p.out_channels(), e.nz, e.ny, e.nx});

    parallel_for(p.out_channels(), threads, [&](std::int64_t co) {
        T* out = y.data.data() + co * vox;
        std::fill(out, out + vox, p.b.data[static_cast<std::size_t>(co)]);
        for (std::int64_t ci = 0; ci < e.c; ++ci) {
            const T* in = x.data.data() + ci * vox;
            for (std::int64_t kz = 0; kz < k; ++kz) {
                const std::int64_t dz = kz - pad;
                for (std::int64_t ky = 0; ky < k; ++ky) {
                    const std::int64_t dy = ky - pad;
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                        const std::int64_t dx = kx - pad;
                        const T wv = p.w.data[static_cast<std::size_t>(
                            (((co * e.c + ci) * k + kz) * k + ky) * k + kx)];
                        if (wv == T{0}) continue;
                        const std::int64_t z0 = std::max<std::int64_t>(0, -dz);
                        const std::int64_t z1 = std::min(e.nz, e.nz - dz);
                        for (std::int64_t z = z0; z < z1; ++z) {
                            const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
                            const std::int64_t y1 = std::min(e.ny, e.ny - dy);
                            for (std::int64_t yy = y0; yy < y1; ++yy) {
                                const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
                                const std::int64_t x1 = std::min(e.nx, e.nx - dx);
                                T* orow = out + (z * e.ny + yy) * e.nx;
                                const T* irow = in + ((z + dz) * e.ny + (yy + dy)) * e.nx + dx;
                                for (std::int64_t xx = x0; xx < x1; ++xx) {
                                    orow[xx] += wv * irow[xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    return y;
}

// dx, dw, db for a conv layer. dw/db reduce over all voxels per (co, ci,
// offset) slot; dx gathers per input channel.
template <std::floating_point T>
void conv3d_backward(const Tensor<T>& x, const ConvParam<T>& p, const Tensor<T>& dy,
                     Tensor<T>& dx, ConvParam<T>& dp, int threads = 1) {
    const auto e = detail::extent(x);
    const auto eo = detail::extent(dy);
    if (eo.c != p.out_channels() || eo.nz != e.nz || eo.ny != e.ny || eo.nx != e.nx) {
        throw shape_error("conv3d_backward: upstream shape mismatch");
    }
    const std::int64_t k = p.kernel();
    const std::int64_t pad = k / 2;
    const std::int64_t vox = e.voxels();
    dx = Tensor<T>(x.shape);
    dp.w = Tensor<T>(p.w.shape);
    dp.b = Tensor<T>(p.b.shape);

    parallel_for(p.out_channels(), threads, [&](std::int64_t co) {
        const T* g = dy.data.data() + co * vox;
        double bacc = 0.0;
        for (std::int64_t i = 0; i < vox; ++i) bacc += static_cast<double>(g[i]);
        dp.b.data[static_cast<std::size_t>(co)] = static_cast<T>(bacc);

        for (std::int64_t ci = 0; ci < e.c; ++ci) {
            const T* in = x.data.data() + ci * vox;
            for (std::int64_t kz = 0; kz < k; ++kz) {
                const std::int64_t dz = kz - pad;
                for (std::int64_t ky = 0; ky < k; ++ky) {
                    const std::int64_t dyo = ky - pad;
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                        const std::int64_t dxo = kx - pad;
                        double acc = 0.0;
                        const std::int64_t z0 = std::max<std::int64_t>(0, -dz);
                        const std::int64_t z1 = std::min(e.nz, e.nz - dz);
                        for (std::int64_t z = z0; z < z1; ++z) {
                            const std::int64_t y0 = std::max<std::int64_t>(0, -dyo);
                            const std::int64_t y1 = std::min(e.ny, e.ny - dyo);
                            for (std::int64_t yy = y0; yy < y1; ++yy) {
                                const std::int64_t x0 = std::max<std::int64_t>(0, -dxo);
                                const std::int64_t x1 = std::min(e.nx, e.nx - dxo);
                                const T* grow = g + (z * e.ny + yy) * e.nx;
                                const T* irow = in + ((z + dz) * e.ny + (yy + dyo)) * e.nx + dxo;
                                for (std::int64_t xx = x0; xx < x1; ++xx) {
                                    acc += static_cast<double>(grow[xx]) *
                                           static_cast<double>(irow[xx]);
                                }
                            }
                        }
                        dp.w.data[static_cast<std::size_t>(
                            (((co * e.c + ci) * k + kz) * k + ky) * k + kx)] = static_cast<T>(acc);
                    }
                }
            }
        }
    });

    parallel_for(e.c, threads, [&](std::int64_t ci) {
        T* out = dx.data.data() + ci * vox;
        for (std::int64_t co = 0; co < p.out_channels(); ++co) {
            const T* g = dy.data.data() + co * vox;
            for (std::int64_t kz = 0; kz < k; ++kz) {
                const std::int64_t dz = kz - pad;
                for (std::int64_t ky = 0; ky < k; ++ky) {
                    const std::int64_t dyo = ky - pad;
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                        const std::int64_t dxo = kx - pad;
                        const T wv = p.w.data[static_cast<std::size_t>(
                            (((co * e.c + ci) * k + kz) * k + ky) * k + kx)];
                        if (wv == T{0}) continue;
                        // dx[ci, v] += w * dy[co, v + d] (transposed offsets)
                        const std::int64_t z0 = std::max<std::int64_t>(0, -dz);
                        const std::int64_t z1 = std::min(e.nz, e.nz - dz);
                        for (std::int64_t z = z0; z < z1; ++z) {
                            const std::int64_t y0 = std::max<std::int64_t>(0, -dyo);
                            const std::int64_t y1 = std::min(e.ny, e.ny - dyo);
                            for (std::int64_t yy = y0; yy < y1; ++yy) {
                                const std::int64_t x0 = std::max<std::int64_t>(0, -dxo);
                                const std::int64_t x1 = std::min(e.nx, e.nx - dxo);
                                T* orow = out + ((z + dz) * e.ny + (yy + dyo)) * e.nx + dxo;
                                const T* grow = g + (z * e.ny + yy) * e.nx;
                                for (std::int64_t xx = x0; xx < x1; ++xx) {
                                    orow[xx] += wv * grow[xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

template <std::floating_point T>
Tensor<T> relu_forward(const Tensor<T>& x) {
    Tensor<T> y = x;
    for (T& v : y.data) v = std::max(v, T{0});
    return y;
}

template <std::floating_point T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& dy) {
    if (y.shape != dy.shape) throw shape_error("relu_backward: shape mismatch");
    Tensor<T> dx(dy.shape);
    for (std::size_t i = 0; i < dy.data.size(); ++i) {
        dx.data[i] = y.data[i] > T{0} ? dy.data[i] : T{0};
    }
    return dx;
}

// 2x2x2 max pooling; even spatial dims required. Argmax indices (into the
// input payload) are kept for the backward scatter; ties go to the first
// voxel in scan order.
template <std::floating_point T>
Tensor<T> maxpool2_forward(const Tensor<T>& x, std::vector<std::int64_t>& argmax) {
    const auto e = detail::extent(x);
    if (e.nz % 2 || e.ny % 2 || e.nx % 2) {
        throw shape_error("maxpool2: odd spatial dims " + x.shape_str());
    }
    Tensor<T> y({e.c, e.nz / 2, e.ny / 2, e.nx / 2});
    argmax.resize(y.data.size());
    std::int64_t o = 0;
    for (std::int64_t c = 0; c < e.c; ++c) {
        for (std::int64_t z = 0; z < e.nz; z += 2) {
            for (std::int64_t yy = 0; yy < e.ny; yy += 2) {
                for (std::int64_t xx = 0; xx < e.nx; xx += 2) {
                    T best{};
                    std::int64_t best_i = -1;
                    for (std::int64_t dz = 0; dz < 2; ++dz) {
                        for (std::int64_t dy = 0; dy < 2; ++dy) {
                            for (std::int64_t dx = 0; dx < 2; ++dx) {
                                const std::int64_t i =
                                    ((c * e.nz + z + dz) * e.ny + yy + dy) * e.nx + xx + dx;
                                const T v = x.data[static_cast<std::size_t>(i)];
                                if (best_i < 0 || v > best) {
                                    best = v;
                                    best_i = i;
                                }
                            }
                        }
                    }
                    y.data[static_cast<std::size_t>(o)] = best;
                    argmax[static_cast<std::size_t>(o)] = best_i;
                    ++o;
                }
            }
        }
    }
    return y;
}

template <std::floating_point T>
Tensor<T> maxpool2_backward(const Tensor<T>& dy, const std::vector<std::int64_t>& argmax,
                            const std::vector<std::int64_t>& input_shape) {
    if (argmax.size() != dy.data.size()) throw usage_error("maxpool2_backward: stale argmax");
    Tensor<T> dx(input_shape);
    for (std::size_t i = 0; i < dy.data.size(); ++i) {
        dx.data[static_cast<std::size_t>(argmax[i])] += dy.data[i];
    }
    return dx;
}

template <std::floating_point T>
Tensor<T> upsample2_forward(const Tensor<T>& x) {
    const auto e = detail::extent(x);
    Tensor<T> y({e.c, e.nz * 2, e.ny * 2, e.nx * 2});
    for (std::int64_t c = 0; c < e.c; ++c) {
        for (std::int64_t z = 0; z < e.nz * 2; ++z) {
            for (std::int64_t yy = 0; yy < e.ny * 2; ++yy) {
                for (std::int64_t xx = 0; xx < e.nx * 2; ++xx) {
                    y.data[static_cast<std::size_t>(((c * e.nz * 2 + z) * e.ny * 2 + yy) * e.nx * 2 +
                                                    xx)] =
                        x.data[static_cast<std::size_t>(
                            ((c * e.nz + z / 2) * e.ny + yy / 2) * e.nx + xx / 2)];
                }
            }
        }
    }
    return y;
}

template <std::floating_point T>
Tensor<T> upsample2_backward(const Tensor<T>& dy) {
    const auto e = detail::extent(dy);
    if (e.nz % 2 || e.ny % 2 || e.nx % 2) {
        throw shape_error("upsample2_backward: odd dims " + dy.shape_str());
    }
    Tensor<T> dx({e.c, e.nz / 2, e.ny / 2, e.nx / 2});
    for (std::int64_t c = 0; c < e.c; ++c) {
        for (std::int64_t z = 0; z < e.nz; ++z) {
            for (std::int64_t yy = 0; yy < e.ny; ++yy) {
                for (std::int64_t xx = 0; xx < e.nx; ++xx) {
                    dx.data[static_cast<std::size_t>(
                        ((c * (e.nz / 2) + z / 2) * (e.ny / 2) + yy / 2) * (e.nx / 2) + xx / 2)] +=
                        dy.data[static_cast<std::size_t>(((c * e.nz + z) * e.ny + yy) * e.nx + xx)];
                }
            }
        }
    }
    return dx;
}

template <std::floating_point T>
Tensor<T> concat_forward(const Tensor<T>& a, const Tensor<T>& b) {
    const auto ea = detail::extent(a);
    const auto eb = detail::extent(b);
    if (ea.nz != eb.nz || ea.ny != eb.ny || ea.nx != eb.nx) {
        throw shape_error("concat: spatial mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor<T> y({ea.c + eb.c, ea.nz, ea.ny, ea.nx});
    std::copy(a.data.begin(), a.data.end(), y.data.begin());
    std::copy(b.data.begin(), b.data.end(), y.data.begin() + a.size());
    return y;
}

template <std::floating_point T>
std::pair<Tensor<T>, Tensor<T>> concat_backward(const Tensor<T>& dy, std::int64_t ca) {
    const auto e = detail::extent(dy);
    Tensor<T> da({ca, e.nz, e.ny, e.nx});
    Tensor<T> db({e.c - ca, e.nz, e.ny, e.nx});
    std::copy(dy.data.begin(), dy.data.begin() + da.size(), da.data.begin());
    std::copy(dy.data.begin() + da.size(), dy.data.end(), db.data.begin());
    return {std::move(da), std::move(db)};
}

template <std::floating_point T>
Tensor<T> sigmoid_forward(const Tensor<T>& x) {
    Tensor<T> y = x;
    for (T& v : y.data) v = T{1} / (T{1} + std::exp(-v));
    return y;
}

template <std::floating_point T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy) {
    if (y.shape != dy.shape) throw shape_error("sigmoid_backward: shape mismatch");
    Tensor<T> dx(dy.shape);
    for (std::size_t i = 0; i < dy.data.size(); ++i) {
        dx.data[i] = dy.data[i] * y.data[i] * (T{1} - y.data[i]);
    }
    return dx;
}

}  // namespace evifuse::nn

#endif
