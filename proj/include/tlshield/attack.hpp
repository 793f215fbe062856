#pragma once

#include "tlshield/dssim.hpp"
#include "tlshield/network.hpp"
#include "tlshield/optimizer.hpp"

namespace tlshield {

struct AttackConfig {
    std::size_t attack_layer = 0;
    float budget = 0.1f;                                     // DSSIM units
    FeatureMetric metric = FeatureMetric::SquaredL2PerElem;  // internal D(.,.)
    int iterations = 2000;
    float learning_rate = 1.0f;
    float penalty_weight = 1000.0f;  // lambda
    int candidate_count = 5;
    float adadelta_rho = 0.95f;
    float adadelta_eps = 1e-6f;
    SsimParams ssim;

    void validate() const {
        if (budget <= 0.0f || budget > 0.5f) throw std::invalid_argument("budget must be in (0,0.5]");
        if (iterations < 1) throw std::invalid_argument("iterations must be >= 1");
        if (candidate_count < 1) throw std::invalid_argument("candidate_count must be >= 1");
        if (penalty_weight <= 0.0f) throw std::invalid_argument("penalty_weight must be > 0");
    }
};

struct AttackPair {
    Tensor source;
    int source_label = 0;
    Tensor target;
    int target_label = 0;
    int source_id = -1;
    int target_id = -1;
};

struct AdversarialExample {
    Tensor image;
    AttackPair pair;
    float achieved_dssim = 0.0f;
    float achieved_distance = 0.0f;
    bool budget_satisfied = true;
    AttackConfig config;
};

// Internal-feature mimicry: minimize D(H_K(x'), H_K(x_t)) subject to
// dssim(x', x_s) <= P, realized as a squared-hinge penalty with best-feasible
// iterate tracking. Pixels are clamped to [0,1] every step.
inline AdversarialExample targeted_attack(const Network& net, const AttackPair& pair,
                                          const AttackConfig& cfg) {
    cfg.validate();
    if (cfg.attack_layer >= net.layers.size()) throw std::out_of_range("invalid attack layer");
    if (pair.source_label == pair.target_label && pair.source_id != pair.target_id)
        throw std::invalid_argument("attack pair labels must differ");

    InternalFeatures target = forward_to_layer(net, pair.target, cfg.attack_layer);

    Tensor x = pair.source;
    AdversarialExample best;
    best.pair = pair;
    best.config = cfg;
    best.image = pair.source;
    best.achieved_dssim = 0.0f;
    best.achieved_distance =
        feature_distance(forward_to_layer(net, pair.source, cfg.attack_layer).values, target.values,
                         cfg.metric);
    AdadeltaVec opt({cfg.adadelta_rho, cfg.adadelta_eps, cfg.learning_rate});
    for (int it = 0; it < cfg.iterations; ++it) {
        float dist = 0.0f;
        Tensor g = feature_loss_input_gradient(net, x, target, cfg.metric, &dist);
        Tensor dgrad;
        float ds = dssim_with_grad(x, pair.source, dgrad, cfg.ssim);
        if (ds <= cfg.budget + 1e-6f) {
            if (dist < best.achieved_distance) {
                best.image = x;
                best.achieved_dssim = ds;
                best.achieved_distance = dist;
            }
        }
        float viol = ds - cfg.budget;
        if (viol > 0.0f) {
            float w = 2.0f * cfg.penalty_weight * viol;
            for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += w * dgrad.data[i];
        }
        opt.step(x.data, g.data);
        for (float& v : x.data) v = std::clamp(v, 0.0f, 1.0f);
    }
    // final iterate
    {
        float ds = dssim(x, pair.source, cfg.ssim);
        if (ds <= cfg.budget + 1e-6f) {
            float dist = feature_distance(forward_to_layer(net, x, cfg.attack_layer).values,
                                          target.values, cfg.metric);
            if (dist < best.achieved_distance) {
                best.image = std::move(x);
                best.achieved_dssim = ds;
                best.achieved_distance = dist;
            }
        }
    }
    best.budget_satisfied = true;
    if (best.achieved_dssim > cfg.budget + 1e-6f) {
        // project by scaling the perturbation toward the source (bisection)
        float lo = 0.0f, hi = 1.0f;
        Tensor proj = pair.source;
        for (int step = 0; step < 20; ++step) {
            float mid = 0.5f * (lo + hi);
            for (std::size_t i = 0; i < proj.numel(); ++i)
                proj.data[i] = pair.source.data[i] +
                               mid * (best.image.data[i] - pair.source.data[i]);
            if (dssim(proj, pair.source, cfg.ssim) <= cfg.budget) lo = mid;
            else hi = mid;
        }
        for (std::size_t i = 0; i < proj.numel(); ++i)
            proj.data[i] = pair.source.data[i] + lo * (best.image.data[i] - pair.source.data[i]);
        best.image = std::move(proj);
        best.achieved_dssim = dssim(best.image, pair.source, cfg.ssim);
        best.achieved_distance = feature_distance(
            forward_to_layer(net, best.image, cfg.attack_layer).values, target.values, cfg.metric);
        best.budget_satisfied = false;
    }
    return best;
}

// Eq.-2 style non-targeted attack: targeted run per candidate, keep the one
// with the smallest achieved internal distance.
inline AdversarialExample non_targeted_attack(const Network& net, const Tensor& source,
                                              int source_label,
                                              const std::vector<AttackPair>& candidates,
                                              const AttackConfig& cfg) {
    if (candidates.empty()) throw std::invalid_argument("empty candidate list");
    AdversarialExample best;
    bool first = true;
    for (const AttackPair& cand : candidates) {
        if (cand.target_label == source_label)
            throw std::invalid_argument("candidate label equals source label");
        AttackPair p = cand;
        p.source = source;
        p.source_label = source_label;
        AdversarialExample ex = targeted_attack(net, p, cfg);
        if (first || ex.achieved_distance < best.achieved_distance) {
            best = std::move(ex);
            first = false;
        }
    }
    return best;
}

struct LayerSweepResult {
    std::vector<std::size_t> layers;
    std::vector<float> success_rate;  // undefended targeted success per layer
    std::size_t optimal_layer = 0;
};

// Attacks every eligible layer (all but the final Dense head) and records the
// undefended targeted success rate; optimal = argmax, ties to the shallowest.
inline LayerSweepResult layer_sweep(const Network& net, const std::vector<AttackPair>& pairs,
                                    AttackConfig cfg) {
    if (pairs.empty()) throw std::invalid_argument("empty pair set");
    LayerSweepResult res;
    for (std::size_t l = 0; l + 1 < net.layers.size(); ++l) res.layers.push_back(l);
    for (std::size_t l : res.layers) {
        cfg.attack_layer = l;
        std::size_t hits = 0;
        for (const AttackPair& p : pairs) {
            AdversarialExample ex = targeted_attack(net, p, cfg);
            if (argmax_label(forward(net, ex.image)) == p.target_label) ++hits;
        }
        res.success_rate.push_back(static_cast<float>(hits) / static_cast<float>(pairs.size()));
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < res.layers.size(); ++i)
        if (res.success_rate[i] > res.success_rate[best]) best = i;
    res.optimal_layer = res.layers[best];
    return res;
}

// Fast gradient sign method on the cross-entropy loss of the true label.
inline Tensor fgsm(const Network& net, const Tensor& x, int label, float epsilon) {
    if (epsilon < 0.0f) throw std::invalid_argument("epsilon must be >= 0");
    Gradients g = backward(net, x, label, /*want_input=*/true);
    Tensor out = x;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        float s = g.input.data[i] > 0.0f ? 1.0f : (g.input.data[i] < 0.0f ? -1.0f : 0.0f);
        out.data[i] = std::clamp(x.data[i] + epsilon * s, 0.0f, 1.0f);
    }
    return out;
}

}  // namespace tlshield
