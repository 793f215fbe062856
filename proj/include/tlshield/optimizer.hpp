#pragma once

#include "tlshield/network.hpp"

namespace tlshield {

struct SGDConfig {
    float learning_rate = 0.05f;
    float momentum = 0.0f;
};

struct AdadeltaConfig {
    float rho = 0.95f;
    float epsilon = 1e-6f;
    float learning_rate = 1.0f;
};

struct OptimizerConfig {
    enum Kind { SGD, Adadelta } kind = SGD;
    SGDConfig sgd;
    AdadeltaConfig adadelta;

    void validate() const {
        if (kind == SGD) {
            if (sgd.learning_rate < 0.0f) throw std::invalid_argument("learning_rate must be >= 0");
        } else {
            if (adadelta.learning_rate <= 0.0f) throw std::invalid_argument("learning_rate must be > 0");
            if (adadelta.rho < 0.0f || adadelta.rho >= 1.0f) throw std::invalid_argument("rho must be in [0,1)");
            if (adadelta.epsilon <= 0.0f) throw std::invalid_argument("epsilon must be > 0");
        }
    }
};

namespace detail {

// Per-parameter-tensor state slot for momentum / Adadelta accumulators.
struct ParamState {
    Tensor v;        // SGD momentum
    Tensor acc_g;    // Adadelta E[g^2]
    Tensor acc_dx;   // Adadelta E[dx^2]
};

inline void apply_update(std::vector<float>& p, const std::vector<float>& g,
                         const OptimizerConfig& cfg, ParamState& st) {
    if (cfg.kind == OptimizerConfig::SGD) {
        float lr = cfg.sgd.learning_rate, mu = cfg.sgd.momentum;
        if (mu != 0.0f) {
            if (st.v.numel() != p.size()) st.v = Tensor(Shape{p.size()});
            for (std::size_t i = 0; i < p.size(); ++i) {
                st.v.data[i] = mu * st.v.data[i] + g[i];
                p[i] -= lr * st.v.data[i];
            }
        } else {
            for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
        }
    } else {
        const auto& a = cfg.adadelta;
        if (st.acc_g.numel() != p.size()) {
            st.acc_g = Tensor(Shape{p.size()});
            st.acc_dx = Tensor(Shape{p.size()});
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            st.acc_g.data[i] = a.rho * st.acc_g.data[i] + (1.0f - a.rho) * g[i] * g[i];
            float dx = -std::sqrt(st.acc_dx.data[i] + a.epsilon) /
                       std::sqrt(st.acc_g.data[i] + a.epsilon) * g[i];
            st.acc_dx.data[i] = a.rho * st.acc_dx.data[i] + (1.0f - a.rho) * dx * dx;
            p[i] += a.learning_rate * dx;
        }
    }
}

}  // namespace detail

// Optimizer state for a whole network; accumulators are keyed by layer index.
class NetOptimizer {
  public:
    explicit NetOptimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const OptimizerConfig& config() const { return cfg_; }

    // Applies gradients to every unfrozen parameterized layer. Gradients of
    // masked parameters are already zero, so masked values never move.
    void step(Network& net, const Gradients& g) {
        if (states_.size() != net.layers.size()) states_.resize(net.layers.size());
        for (std::size_t li = 0; li < net.layers.size(); ++li) {
            if (net.frozen[li] || g.layers[li].w.numel() == 0) continue;
            if (auto* d = std::get_if<DenseLayer>(&net.layers[li])) {
                detail::apply_update(d->w.data, g.layers[li].w.data, cfg_, states_[li].w);
                detail::apply_update(d->b.data, g.layers[li].b.data, cfg_, states_[li].b);
            } else if (auto* c = std::get_if<Conv2DLayer>(&net.layers[li])) {
                detail::apply_update(c->w.data, g.layers[li].w.data, cfg_, states_[li].w);
                detail::apply_update(c->b.data, g.layers[li].b.data, cfg_, states_[li].b);
            }
        }
    }

  private:
    struct LayerState {
        detail::ParamState w, b;
    };
    OptimizerConfig cfg_;
    std::vector<LayerState> states_;
};

// Adadelta over a flat value vector; used by the attack generator on pixels.
class AdadeltaVec {
  public:
    explicit AdadeltaVec(AdadeltaConfig cfg) : cfg_(cfg) {}

    void step(std::vector<float>& p, const std::vector<float>& g) {
        if (acc_g_.size() != p.size()) {
            acc_g_.assign(p.size(), 0.0f);
            acc_dx_.assign(p.size(), 0.0f);
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            acc_g_[i] = cfg_.rho * acc_g_[i] + (1.0f - cfg_.rho) * g[i] * g[i];
            float dx = -std::sqrt(acc_dx_[i] + cfg_.epsilon) / std::sqrt(acc_g_[i] + cfg_.epsilon) * g[i];
            acc_dx_[i] = cfg_.rho * acc_dx_[i] + (1.0f - cfg_.rho) * dx * dx;
            p[i] += cfg_.learning_rate * dx;
        }
    }

  private:
    AdadeltaConfig cfg_;
    std::vector<float> acc_g_, acc_dx_;
};

}  // namespace tlshield
