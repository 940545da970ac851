#ifndef EVIFUSE_OPTIM_HPP
#define EVIFUSE_OPTIM_HPP

// SGD and Adam over the model's flattened parameter list.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "evifuse/error.hpp"
#include "evifuse/nn.hpp"

namespace evifuse::optim {

enum class Kind { Sgd, Adam };

inline Kind kind_from_string(const std::string& s) {
    if (s == "sgd") return Kind::Sgd;
    if (s == "adam") return Kind::Adam;
    throw domain_error("unknown optimizer: " + s);
}

inline std::string to_string(Kind k) { return k == Kind::Sgd ? "sgd" : "adam"; }

struct Hyper {
    Kind kind = Kind::Adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One Adam update on a flat parameter slice; moments are updated in place
// and bias correction uses the passed step count t (1-based).
template <std::floating_point T>
void adam_step(std::span<T> params, std::span<const T> grads, std::span<T> m, std::span<T> v,
               std::int64_t t, const Hyper& h) {
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = static_cast<double>(grads[i]);
        const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * g;
        const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double m_hat = mi / bc1;
        const double v_hat = vi / bc2;
        params[i] -= static_cast<T>(h.lr * m_hat / (std::sqrt(v_hat) + h.eps));
    }
}

template <std::floating_point T>
void sgd_step(std::span<T> params, std::span<const T> grads, double lr) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i] -= static_cast<T>(lr * static_cast<double>(grads[i]));
    }
}

// Optimizer state for one model: first/second moments aligned with the
// model's fixed parameter visiting order.
template <std::floating_point T>
class State {
  public:
    State() = default;
    explicit State(const nn::Model<T>& model, Hyper hyper) : hyper_(hyper) {
        model.for_each_param([&](const std::string&, const nn::Tensor<T>& t) {
            m_.emplace_back(t.data.size(), T{0});
            v_.emplace_back(t.data.size(), T{0});
        });
    }

    void step(nn::Model<T>& model, const nn::Model<T>& grads) {
        std::vector<nn::Tensor<T>*> ps;
        std::vector<const nn::Tensor<T>*> gs;
        model.for_each_param([&](const std::string&, nn::Tensor<T>& t) { ps.push_back(&t); });
        grads.for_each_param(
            [&](const std::string&, const nn::Tensor<T>& t) { gs.push_back(&t); });
        if (ps.size() != m_.size() || gs.size() != m_.size()) {
            throw usage_error("optimizer state does not match the model layout");
        }
        ++t_;
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (hyper_.kind == Kind::Adam) {
                adam_step<T>(ps[i]->data, gs[i]->data, m_[i], v_[i], t_, hyper_);
            } else {
                sgd_step<T>(ps[i]->data, gs[i]->data, hyper_.lr);
            }
        }
    }

    [[nodiscard]] std::int64_t steps() const { return t_; }
    [[nodiscard]] const Hyper& hyper() const { return hyper_; }

    void save(const std::string& path) const {
        nlohmann::json header = {{"version", 1},
                                 {"kind", to_string(hyper_.kind)},
                                 {"lr", hyper_.lr},
                                 {"beta1", hyper_.beta1},
                                 {"beta2", hyper_.beta2},
                                 {"eps", hyper_.eps},
                                 {"t", t_},
                                 {"slots", m_.size()}};
        std::ofstream out(path, std::ios::binary);
        if (!out) throw format_error("optimizer save: cannot open " + path);
        out << header.dump() << '\n';
        for (const auto& buf : {std::cref(m_), std::cref(v_)}) {
            for (const auto& slot : buf.get()) {
                nlohmann::json sz = slot.size();
                out << sz.dump() << '\n';
                for (T x : slot) {
                    const float f = static_cast<float>(x);
                    out.write(reinterpret_cast<const char*>(&f), sizeof(float));
                }
                out << '\n';
            }
        }
        if (!out) throw format_error("optimizer save: write failed for " + path);
    }

    static State load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw format_error("optimizer load: cannot open " + path);
        std::string line;
        if (!std::getline(in, line)) throw format_error("optimizer load: missing header");
        State s;
        std::size_t slots = 0;
        try {
            const auto header = nlohmann::json::parse(line);
            s.hyper_.kind = kind_from_string(header.at("kind").get<std::string>());
            s.hyper_.lr = header.at("lr").get<double>();
            s.hyper_.beta1 = header.at("beta1").get<double>();
            s.hyper_.beta2 = header.at("beta2").get<double>();
            s.hyper_.eps = header.at("eps").get<double>();
            s.t_ = header.at("t").get<std::int64_t>();
            slots = header.at("slots").get<std::size_t>();
        } catch (const nlohmann::json::exception& e) {
            throw format_error("optimizer load: bad header in " + path + ": " + e.what());
        }
        for (auto* buf : {&s.m_, &s.v_}) {
            for (std::size_t i = 0; i < slots; ++i) {
                if (!std::getline(in, line)) throw format_error("optimizer load: truncated");
                const std::size_t n = nlohmann::json::parse(line).get<std::size_t>();
                std::vector<T> slot(n);
                for (T& x : slot) {
                    float f = 0.0f;
                    in.read(reinterpret_cast<char*>(&f), sizeof(float));
                    if (in.gcount() != sizeof(float)) {
                        throw format_error("optimizer load: truncated payload");
                    }
                    x = static_cast<T>(f);
                }
                in.get();  // trailing newline
                buf->push_back(std::move(slot));
            }
        }
        return s;
    }

  private:
    Hyper hyper_{};
    std::int64_t t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

}  // namespace evifuse::optim

#endif
