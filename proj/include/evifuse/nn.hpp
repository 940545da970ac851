#ifndef EVIFUSE_NN_HPP
#define EVIFUSE_NN_HPP

// A slim 3D UNet: per level two 3x3x3 conv+ReLU blocks, 2x max pooling
// between encoder levels, nearest-neighbor upsampling plus skip
// concatenation in the decoder, and a final 1x1x1 conv + sigmoid head.
// Forward keeps every activation so the manual reverse pass is exact.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "evifuse/error.hpp"
#include "evifuse/nn_ops.hpp"
#include "evifuse/tensor.hpp"

namespace evifuse::nn {

struct ModelConfig {
    int levels = 3;
    int base_channels = 4;
    int in_channels = 1;

    [[nodiscard]] std::int64_t channels_at(int level) const {
        return static_cast<std::int64_t>(base_channels) << level;
    }
    void validate() const {
        if (levels < 1 || base_channels < 1 || in_channels < 1) {
            throw domain_error("ModelConfig: levels, base_channels, in_channels must be >= 1");
        }
    }
    bool operator==(const ModelConfig&) const = default;
};

template <std::floating_point T>
struct Model {
    ModelConfig cfg;
    std::vector<std::array<ConvParam<T>, 2>> enc;  // cfg.levels entries
    std::vector<std::array<ConvParam<T>, 2>> dec;  // cfg.levels - 1 entries
    ConvParam<T> head;                             // 1x1x1 conv to a single logit

    // Visits every parameter tensor in a fixed order (checkpoints, the
    // optimizer and gradient containers all rely on this order).
    template <typename Fn>
    void for_each_param(Fn&& fn) {
        for (std::size_t l = 0; l < enc.size(); ++l) {
            for (int j = 0; j < 2; ++j) {
                fn("enc" + std::to_string(l) + ".conv" + std::to_string(j) + ".w", enc[l][j].w);
                fn("enc" + std::to_string(l) + ".conv" + std::to_string(j) + ".b", enc[l][j].b);
            }
        }
        for (std::size_t l = 0; l < dec.size(); ++l) {
            for (int j = 0; j < 2; ++j) {
                fn("dec" + std::to_string(l) + ".conv" + std::to_string(j) + ".w", dec[l][j].w);
                fn("dec" + std::to_string(l) + ".conv" + std::to_string(j) + ".b", dec[l][j].b);
            }
        }
        fn("head.w", head.w);
        fn("head.b", head.b);
    }

    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        const_cast<Model*>(this)->for_each_param(
            [&](const std::string& name, Tensor<T>& t) { fn(name, std::as_const(t)); });
    }

    [[nodiscard]] std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for_each_param([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
        return n;
    }

    bool operator==(const Model&) const = default;
};

namespace detail {

template <std::floating_point T>
ConvParam<T> make_conv(std::int64_t cout, std::int64_t cin, std::int64_t k) {
    ConvParam<T> p;
    p.w = Tensor<T>({cout, cin, k, k, k});
    p.b = Tensor<T>({cout});
    return p;
}

// Channel arithmetic shared by init and checkpoint loading.
template <std::floating_point T>
Model<T> make_model_shell(const ModelConfig& cfg) {
    cfg.validate();
    Model<T> m;
    m.cfg = cfg;
    std::int64_t cin = cfg.in_channels;
    for (int l = 0; l < cfg.levels; ++l) {
        const std::int64_t c = cfg.channels_at(l);
        m.enc.push_back({make_conv<T>(c, cin, 3), make_conv<T>(c, c, 3)});
        cin = c;
    }
    m.dec.resize(static_cast<std::size_t>(cfg.levels - 1));
    for (int l = cfg.levels - 2; l >= 0; --l) {
        const std::int64_t c = cfg.channels_at(l);
        const std::int64_t c_in = cfg.channels_at(l + 1) + c;  // skip + upsampled
        m.dec[static_cast<std::size_t>(l)] = {make_conv<T>(c, c_in, 3), make_conv<T>(c, c, 3)};
    }
    m.head = make_conv<T>(1, cfg.channels_at(0), 1);
    return m;
}

}  // namespace detail

// He-style scaled uniform init; biases start at zero. Deterministic in
// (cfg, seed).
template <std::floating_point T>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    Model<T> m = detail::make_model_shell<T>(cfg);
    std::mt19937_64 rng(seed);
    m.for_each_param([&](const std::string& name, Tensor<T>& t) {
        if (name.ends_with(".b")) return;  // zero biases
        const std::int64_t fan_in = t.shape[1] * t.shape[2] * t.shape[3] * t.shape[4];
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> u(-limit, limit);
        for (T& v : t.data) v = static_cast<T>(u(rng));
    });
    return m;
}

template <std::floating_point T>
struct ForwardCache {
    Tensor<T> input;
    std::vector<Tensor<T>> enc_act0, enc_act1;           // post-ReLU, per level
    std::vector<Tensor<T>> pooled;                       // per level < L-1
    std::vector<std::vector<std::int64_t>> pool_argmax;  // per level < L-1
    std::vector<Tensor<T>> concat_in;                    // decoder concat outputs
    std::vector<Tensor<T>> dec_act0, dec_act1;           // post-ReLU, per decoder level
    Tensor<T> prob;                                      // sigmoid output
    bool valid = false;
};

template <std::floating_point T>
std::pair<Tensor<T>, ForwardCache<T>> forward(const Model<T>& m, const Tensor<T>& x,
                                              int threads = 1) {
    const auto e = detail::extent(x);
    if (e.c != m.cfg.in_channels) {
        throw shape_error("forward: expected " + std::to_string(m.cfg.in_channels) +
                          " input channels, got " + std::to_string(e.c));
    }
    const std::int64_t div = std::int64_t{1} << (m.cfg.levels - 1);
    if (e.nz % div || e.ny % div || e.nx % div) {
        throw shape_error("forward: spatial dims " + x.shape_str() + " not divisible by " +
                          std::to_string(div));
    }

    const int levels = m.cfg.levels;
    ForwardCache<T> cache;
    cache.input = x;
    cache.enc_act0.resize(static_cast<std::size_t>(levels));
    cache.enc_act1.resize(static_cast<std::size_t>(levels));
    cache.pooled.resize(static_cast<std::size_t>(levels - 1));
    cache.pool_argmax.resize(static_cast<std::size_t>(levels - 1));
    cache.concat_in.resize(static_cast<std::size_t>(levels - 1));
    cache.dec_act0.resize(static_cast<std::size_t>(levels - 1));
    cache.dec_act1.resize(static_cast<std::size_t>(levels - 1));

    const Tensor<T>* cur = &cache.input;
    for (int l = 0; l < levels; ++l) {
        const auto li = static_cast<std::size_t>(l);
        cache.enc_act0[li] = relu_forward(conv3d_forward(*cur, m.enc[li][0], threads));
        cache.enc_act1[li] = relu_forward(conv3d_forward(cache.enc_act0[li], m.enc[li][1], threads));
        if (l < levels - 1) {
            cache.pooled[li] = maxpool2_forward(cache.enc_act1[li], cache.pool_argmax[li]);
            cur = &cache.pooled[li];
        } else {
            cur = &cache.enc_act1[li];
        }
    }
    for (int l = levels - 2; l >= 0; --l) {
        const auto li = static_cast<std::size_t>(l);
        cache.concat_in[li] = concat_forward(cache.enc_act1[li], upsample2_forward(*cur));
        cache.dec_act0[li] =
            relu_forward(conv3d_forward(cache.concat_in[li], m.dec[li][0], threads));
        cache.dec_act1[li] = relu_forward(conv3d_forward(cache.dec_act0[li], m.dec[li][1], threads));
        cur = &cache.dec_act1[li];
    }
    cache.prob = sigmoid_forward(conv3d_forward(*cur, m.head, threads));
    cache.valid = true;
    return {cache.prob, std::move(cache)};
}

template <std::floating_point T>
struct Backprop {
    Model<T> grads;     // same layout as the model, tensors hold d loss / d param
    Tensor<T> d_input;  // d loss / d input volume
};

template <std::floating_point T>
Backprop<T> backward(const Model<T>& m, const ForwardCache<T>& cache, const Tensor<T>& grad_out,
                     int threads = 1) {
    if (!cache.valid) throw usage_error("backward: cache does not come from a forward pass");
    if (grad_out.shape != cache.prob.shape) {
        throw usage_error("backward: grad_out shape " + grad_out.shape_str() +
                          " does not match forward output " + cache.prob.shape_str());
    }
    const int levels = m.cfg.levels;
    Backprop<T> bp;
    bp.grads = detail::make_model_shell<T>(m.cfg);

    Tensor<T> d = sigmoid_backward(cache.prob, grad_out);
    {
        const Tensor<T>& head_in = levels > 1 ? cache.dec_act1[0] : cache.enc_act1[0];
        Tensor<T> dx;
        conv3d_backward(head_in, m.head, d, dx, bp.grads.head, threads);
        d = std::move(dx);
    }

    // Decoder levels unwind shallow-to-deep; each produces a skip gradient
    // that re-enters the matching encoder level below.
    std::vector<Tensor<T>> skip_grad(static_cast<std::size_t>(std::max(levels - 1, 0)));
    for (int l = 0; l < levels - 1; ++l) {
        const auto li = static_cast<std::size_t>(l);
        Tensor<T> dx;
        d = relu_backward(cache.dec_act1[li], d);
        conv3d_backward(cache.dec_act0[li], m.dec[li][1], d, dx, bp.grads.dec[li][1], threads);
        d = relu_backward(cache.dec_act0[li], dx);
        conv3d_backward(cache.concat_in[li], m.dec[li][0], d, dx, bp.grads.dec[li][0], threads);
        auto [d_skip, d_up] = concat_backward(dx, cache.enc_act1[li].shape[0]);
        skip_grad[li] = std::move(d_skip);
        d = upsample2_backward(d_up);  // grad w.r.t. dec_act1[l+1], or the bottom
    }

    for (int l = levels - 1; l >= 0; --l) {
        const auto li = static_cast<std::size_t>(l);
        if (l < levels - 1) {
            // d currently holds the gradient w.r.t. pooled[l].
            d = maxpool2_backward(d, cache.pool_argmax[li], cache.enc_act1[li].shape);
            for (std::size_t i = 0; i < d.data.size(); ++i) {
                d.data[i] += skip_grad[li].data[i];
            }
        }
        Tensor<T> dx;
        d = relu_backward(cache.enc_act1[li], d);
        conv3d_backward(cache.enc_act0[li], m.enc[li][1], d, dx, bp.grads.enc[li][1], threads);
        d = relu_backward(cache.enc_act0[li], dx);
        const Tensor<T>& in = l == 0 ? cache.input : cache.pooled[li - 1];
        conv3d_backward(in, m.enc[li][0], d, dx, bp.grads.enc[li][0], threads);
        d = std::move(dx);
    }
    bp.d_input = std::move(d);
    return bp;
}

// Checkpoints: one JSON header line (version + config + payload dtype)
// followed by every parameter tensor in visiting order as raw f32 LE.
inline constexpr int kCheckpointVersion = 1;

template <std::floating_point T>
void save_model(const Model<T>& m, const std::string& path) {
    nlohmann::json header = {
        {"version", kCheckpointVersion},
        {"config",
         {{"levels", m.cfg.levels},
          {"base_channels", m.cfg.base_channels},
          {"in_channels", m.cfg.in_channels}}},
        {"dtype", "f32le"},
    };
    std::ofstream out(path, std::ios::binary);
    if (!out) throw format_error("save_model: cannot open " + path);
    out << header.dump() << '\n';
    static_assert(std::endian::native == std::endian::little);
    m.for_each_param([&](const std::string&, const Tensor<T>& t) {
        for (T v : t.data) {
            const float f = static_cast<float>(v);
            out.write(reinterpret_cast<const char*>(&f), sizeof(float));
        }
    });
    if (!out) throw format_error("save_model: write failed for " + path);
}

template <std::floating_point T>
Model<T> load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw format_error("load_model: cannot open " + path);
    std::string header_line;
    if (!std::getline(in, header_line)) throw format_error("load_model: missing header in " + path);
    ModelConfig cfg;
    try {
        const auto header = nlohmann::json::parse(header_line);
        if (header.at("version").get<int>() != kCheckpointVersion) {
            throw format_error("load_model: unknown checkpoint version in " + path);
        }
        const auto& c = header.at("config");
        cfg.levels = c.at("levels").get<int>();
        cfg.base_channels = c.at("base_channels").get<int>();
        cfg.in_channels = c.at("in_channels").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw format_error("load_model: bad header in " + path + ": " + e.what());
    }
    Model<T> m = detail::make_model_shell<T>(cfg);
    bool short_read = false;
    m.for_each_param([&](const std::string&, Tensor<T>& t) {
        for (T& v : t.data) {
            float f = 0.0f;
            in.read(reinterpret_cast<char*>(&f), sizeof(float));
            if (in.gcount() != sizeof(float)) short_read = true;
            v = static_cast<T>(f);
        }
    });
    if (short_read) throw format_error("load_model: truncated payload in " + path);
    if (in.peek() != std::ifstream::traits_type::eof()) {
        throw format_error("load_model: trailing bytes in " + path);
    }
    return m;
}

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::int64_t checked = 0;
};

// Central-difference check of the analytic parameter gradients. loss_fn
// maps the output probability tensor to (loss, d loss / d prob).
template <std::floating_point T>
GradCheckReport grad_check(
    Model<T>& m, const Tensor<T>& x,
    const std::function<std::pair<double, Tensor<T>>(const Tensor<T>&)>& loss_fn, double h,
    std::int64_t max_samples = 100000, std::uint64_t seed = 0) {
    if (!(h > 0.0)) throw domain_error("grad_check: step size must be positive");

    auto [prob, cache] = forward(m, x);
    const auto [loss0, d_prob] = loss_fn(prob);
    (void)loss0;
    auto bp = backward(m, cache, d_prob);

    std::vector<Tensor<T>*> params, grads;
    m.for_each_param([&](const std::string&, Tensor<T>& t) { params.push_back(&t); });
    bp.grads.for_each_param([&](const std::string&, Tensor<T>& t) { grads.push_back(&t); });

    std::int64_t total = m.parameter_count();
    std::mt19937_64 rng(seed);
    GradCheckReport rep;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<T>& t = *params[pi];
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            if (total > max_samples) {
                // Subsample uniformly when the model is large.
                if (static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(total)) >=
                    max_samples) {
                    continue;
                }
            }
            const T saved = t.data[i];
            t.data[i] = saved + static_cast<T>(h);
            const double lp = loss_fn(forward(m, x).first).first;
            t.data[i] = saved - static_cast<T>(h);
            const double lm = loss_fn(forward(m, x).first).first;
            t.data[i] = saved;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = static_cast<double>(grads[pi]->data[i]);
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
            rep.max_rel_err = std::max(rep.max_rel_err, std::abs(fd - an) / denom);
            ++rep.checked;
        }
    }
    return rep;
}

}  // namespace evifuse::nn

#endif
