#pragma once

#include "tlshield/pruning.hpp"

namespace tlshield {

struct EnsembleConfig {
    int k = 5;           // ensemble size
    int t = 1;           // reject threshold: reject iff disagreements >= t
    std::uint64_t selection_seed = 0;

    void validate(int num_classes) const {
        if (k < 0 || k > num_classes - 1) throw std::invalid_argument("k must be in 1..K-1");
        if (k > 0 && (t < 1 || t > k)) throw std::invalid_argument("t must be in 1..k");
    }
};

enum class Coverage { PairwiseComplete, PerClassComplete, Partial };

// Differentiators keyed by their class sets. Per-class lookup returns every
// differentiator whose class set contains the class.
struct DifferentiatorRegistry {
    std::vector<Differentiator> diffs;
    int num_classes = 0;
    Coverage coverage = Coverage::Partial;

    std::vector<std::size_t> lookup(int cls) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < diffs.size(); ++i)
            if (std::find(diffs[i].classes.begin(), diffs[i].classes.end(), cls) !=
                diffs[i].classes.end())
                out.push_back(i);
        return out;
    }

    void classify_coverage() {
        std::size_t expect_pairwise =
            static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(num_classes - 1) / 2;
        bool pairwise = diffs.size() == expect_pairwise;
        bool per_class = true;
        for (int c = 1; c <= num_classes && pairwise; ++c)
            pairwise = lookup(c).size() == static_cast<std::size_t>(num_classes - 1);
        for (int c = 1; c <= num_classes; ++c)
            if (lookup(c).empty()) per_class = false;
        for (const Differentiator& d : diffs)
            if (d.classes.size() != 2) pairwise = false;
        coverage = pairwise ? Coverage::PairwiseComplete
                            : (per_class ? Coverage::PerClassComplete : Coverage::Partial);
    }
};

// Prediction in 0..K; 0 is the rejection class.
struct Prediction {
    int label = 0;
    int phase1_label = 0;
    std::vector<std::size_t> selected;  // registry indices consulted
    std::vector<int> verdicts;          // differentiator predictions, original labels
    bool rejected = false;
};

// Pure decision rule shared with the straight-line reference in tests:
// reject iff at least t verdicts disagree with the phase-1 result.
inline bool two_phase_reject(int phase1_label, const std::vector<int>& verdicts, int t) {
    int disagreements = 0;
    for (int v : verdicts)
        if (v != phase1_label) ++disagreements;
    return disagreements >= t;
}

// Two-phase rejecting inference: Student predicts, then k seeded randomly
// selected differentiators containing the predicted class confirm or veto.
// query_nonce varies the (seeded) selection per query.
inline Prediction two_phase_infer(const Tensor& x, const StudentModel& student,
                                  const DifferentiatorRegistry& registry,
                                  const EnsembleConfig& cfg, std::uint64_t query_nonce = 0) {
    cfg.validate(static_cast<int>(student.network.num_classes));
    Prediction pred;
    pred.phase1_label = argmax_label(forward(student.network, x));
    if (cfg.k == 0) {  // degenerate, test-only: plain student argmax
        pred.label = pred.phase1_label;
        return pred;
    }
    std::vector<std::size_t> avail = registry.lookup(pred.phase1_label);
    if (avail.size() < static_cast<std::size_t>(cfg.k))
        throw std::runtime_error("registry holds fewer than k differentiators for class " +
                                 std::to_string(pred.phase1_label));
    std::mt19937_64 rng(cfg.selection_seed * 0x9e3779b97f4a7c15ULL + query_nonce);
    std::shuffle(avail.begin(), avail.end(), rng);
    avail.resize(static_cast<std::size_t>(cfg.k));
    pred.selected = avail;
    for (std::size_t idx : avail)
        pred.verdicts.push_back(differentiator_predict(registry.diffs[idx], x));
    pred.rejected = two_phase_reject(pred.phase1_label, pred.verdicts, cfg.t);
    pred.label = pred.rejected ? 0 : pred.phase1_label;
    return pred;
}

// Reference tally for Algorithm-3 style voting, shared with tests: a label
// wins only with the maximum possible tally K-1, otherwise reject.
inline int voting_decision(const std::vector<int>& votes, int num_classes) {
    std::vector<int> tally(static_cast<std::size_t>(num_classes) + 1, 0);
    for (int v : votes)
        if (v >= 1 && v <= num_classes) ++tally[static_cast<std::size_t>(v)];
    int best = 1;
    for (int c = 2; c <= num_classes; ++c)
        if (tally[static_cast<std::size_t>(c)] > tally[static_cast<std::size_t>(best)]) best = c;
    return tally[static_cast<std::size_t>(best)] == num_classes - 1 ? best : 0;
}

// Full-voting classification over a pairwise-complete registry.
inline Prediction voting_infer(const Tensor& x, const DifferentiatorRegistry& registry,
                               int num_classes) {
    if (registry.coverage != Coverage::PairwiseComplete)
        throw std::invalid_argument("voting_infer needs a pairwise-complete registry");
    Prediction pred;
    for (std::size_t i = 0; i < registry.diffs.size(); ++i) {
        pred.selected.push_back(i);
        pred.verdicts.push_back(differentiator_predict(registry.diffs[i], x));
    }
    pred.label = voting_decision(pred.verdicts, num_classes);
    pred.phase1_label = pred.label;
    pred.rejected = pred.label == 0;
    return pred;
}

// Baseline: zero a seeded fraction of input pixels, then plain phase-1
// inference (no rejection).
inline Prediction dropout_input_defense(const Tensor& x, const StudentModel& student,
                                        float drop_rate, std::uint64_t seed) {
    if (drop_rate < 0.0f || drop_rate >= 1.0f) throw std::invalid_argument("drop_rate in [0,1)");
    Tensor noisy = x;
    std::size_t n_drop = static_cast<std::size_t>(drop_rate * static_cast<float>(x.numel()));
    if (n_drop > 0) {
        std::vector<std::size_t> idx(x.numel());
        std::iota(idx.begin(), idx.end(), 0);
        std::mt19937_64 rng(seed);
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t i = 0; i < n_drop; ++i) noisy.data[idx[i]] = 0.0f;
    }
    Prediction pred;
    pred.phase1_label = argmax_label(forward(student.network, noisy));
    pred.label = pred.phase1_label;
    return pred;
}

struct NeuronDistanceOptions {
    float margin = 1.0f;
    float beta = 0.1f;
    int epochs = 10;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    OptimizerConfig optimizer;
    FeatureMetric metric = FeatureMetric::SquaredL2PerElem;
};

inline float mean_pairwise_cutoff_distance(const Network& net, const LabeledDataset& data,
                                           std::size_t cutoff, FeatureMetric metric,
                                           std::size_t max_samples = 64) {
    std::size_t n = std::min(data.size(), max_samples);
    std::vector<Tensor> feats;
    for (std::size_t i = 0; i < n; ++i)
        feats.push_back(forward_to_layer(net, data.images[i], cutoff).values);
    double s = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b) {
            s += feature_distance(feats[a], feats[b], metric);
            ++pairs;
        }
    return pairs ? static_cast<float>(s / static_cast<double>(pairs)) : 0.0f;
}

// Baseline: retrain all layers with cross-entropy plus a hinge that pushes the
// mean pairwise internal distance at the cut-off layer above `margin`.
inline StudentModel neuron_distance_retrain(const StudentModel& student, const LabeledDataset& data,
                                            const NeuronDistanceOptions& opts) {
    if (opts.margin <= 0.0f) throw std::invalid_argument("margin must be > 0");
    if (student.policy.kind == FreezePolicy::FullFineTune)
        throw std::invalid_argument("neuron-distance retraining expects a Mid- or Deep-layer student");
    StudentModel out = student;
    Network& net = out.network;
    std::size_t cutoff = 0;
    for (std::size_t l = 0; l < net.layers.size(); ++l)
        if (net.frozen[l]) cutoff = l;
    // all layers retrain in this baseline
    std::fill(net.frozen.begin(), net.frozen.end(), false);

    NetOptimizer opt(opts.optimizer);
    std::mt19937 rng(static_cast<std::uint32_t>(opts.seed));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<Shape> shapes = net.layer_shapes();
    for (int e = 0; e < opts.epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
            std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(
                                               order.size(), start + opts.batch_size)));
            // forward caches for the whole batch
            std::vector<ForwardCache> caches;
            for (std::size_t idx : batch)
                caches.push_back(forward_cached(net, data.images[idx], net.layers.size() - 1));
            // mean pairwise distance at the cut-off layer
            std::size_t m = batch.size();
            double mean_d = 0.0;
            std::size_t npairs = m * (m - 1) / 2;
            for (std::size_t a = 0; a < m; ++a)
                for (std::size_t b = a + 1; b < m; ++b)
                    mean_d += feature_distance(caches[a].outputs[cutoff], caches[b].outputs[cutoff],
                                               opts.metric);
            if (npairs) mean_d /= static_cast<double>(npairs);
            float hinge = std::max(0.0f, opts.margin - static_cast<float>(mean_d));
            // d penalty / d mean_d, penalty = beta * hinge^2
            float dpen_dmean = hinge > 0.0f ? -2.0f * opts.beta * hinge : 0.0f;

            Gradients total;
            total.layers.resize(net.layers.size());
            auto accumulate = [&](const Gradients& g, float scale) {
                for (std::size_t li = 0; li < g.layers.size(); ++li) {
                    if (g.layers[li].w.numel() == 0) continue;
                    if (total.layers[li].w.numel() == 0) {
                        total.layers[li].w = Tensor(g.layers[li].w.shape);
                        total.layers[li].b = Tensor(g.layers[li].b.shape);
                    }
                    for (std::size_t i = 0; i < g.layers[li].w.numel(); ++i)
                        total.layers[li].w.data[i] += scale * g.layers[li].w.data[i];
                    for (std::size_t i = 0; i < g.layers[li].b.numel(); ++i)
                        total.layers[li].b.data[i] += scale * g.layers[li].b.data[i];
                }
            };
            float inv_m = 1.0f / static_cast<float>(m);
            for (std::size_t s = 0; s < m; ++s) {
                Tensor dlogits;
                softmax_xent(caches[s].outputs.back(), data.labels[batch[s]], &dlogits);
                Gradients g = backprop_from(net, caches[s], net.layers.size() - 1,
                                            std::move(dlogits), false);
                accumulate(g, inv_m);
                if (dpen_dmean != 0.0f && npairs) {
                    // d mean_d / d feat_s summed over pairs containing s
                    Tensor gf(caches[s].outputs[cutoff].shape);
                    for (std::size_t o = 0; o < m; ++o) {
                        if (o == s) continue;
                        Tensor gp = feature_distance_grad(caches[s].outputs[cutoff],
                                                          caches[o].outputs[cutoff], opts.metric);
                        for (std::size_t i = 0; i < gf.numel(); ++i) gf.data[i] += gp.data[i];
                    }
                    float scale = dpen_dmean / static_cast<float>(npairs);
                    for (float& v : gf.data) v *= scale;
                    Gradients gpen = backprop_from(net, caches[s], cutoff, std::move(gf), false);
                    accumulate(gpen, 1.0f);
                }
            }
            opt.step(net, total);
        }
    }
    return out;
}

}  // namespace tlshield
