#pragma once

#include "tlshield/transfer.hpp"

namespace tlshield {

// Per-layer unit scores: one score per filter for Conv2D, one per connection
// for Dense. Entries are empty for parameterless layers.
struct ActivationProfile {
    std::vector<std::vector<float>> layer_scores;
    std::vector<int> classes;
};

struct PruningPlan {
    std::vector<float> ratios;  // one per prunable layer, in network order

    void validate() const {
        for (float r : ratios)
            if (r < 0.0f || r >= 1.0f) throw std::invalid_argument("pruning ratio must be in [0,1)");
    }
};

struct ClassPair {
    int ci, cj;

    ClassPair(int a, int b) : ci(std::min(a, b)), cj(std::max(a, b)) {
        if (a == b) throw std::invalid_argument("class pair labels must be distinct");
    }
};

struct Differentiator {
    Network network;             // m-output head
    std::vector<int> classes;    // original labels handled, ascending
    PruningPlan plan;
    std::vector<int> output_map;  // head index -> original label in 1..K
    FreezePolicy policy;
};

inline std::vector<std::size_t> prunable_layers(const Network& net) {
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l < net.layers.size(); ++l)
        if (layer_has_params(net.layers[l])) out.push_back(l);
    return out;
}

// Shared monotone default: first prunable layer unpruned, rising linearly to
// 0.6 at the deepest prunable layer.
inline PruningPlan default_plan(const Network& net, float max_ratio = 0.6f) {
    PruningPlan plan;
    std::size_t n = prunable_layers(net).size();
    for (std::size_t i = 0; i < n; ++i)
        plan.ratios.push_back(n <= 1 ? 0.0f
                                     : max_ratio * static_cast<float>(i) / static_cast<float>(n - 1));
    return plan;
}

inline std::size_t layer_unit_count(const Layer& l) {
    if (const auto* d = std::get_if<DenseLayer>(&l)) return d->out * d->in;  // connections
    if (const auto* c = std::get_if<Conv2DLayer>(&l)) return c->out_ch;      // filters
    return 0;
}

// Mean absolute activation per unit over a class-restricted dataset. Conv
// scores average the layer output over dataset and spatial positions per
// filter; Dense scores are |effective weight| times the mean absolute incoming
// activation per connection.
inline ActivationProfile profile_activations(const Network& net, const LabeledDataset& data) {
    if (data.size() == 0) throw std::invalid_argument("empty dataset");
    ActivationProfile prof;
    prof.layer_scores.resize(net.layers.size());
    std::vector<int> cls = data.labels;
    std::sort(cls.begin(), cls.end());
    cls.erase(std::unique(cls.begin(), cls.end()), cls.end());
    prof.classes = cls;

    std::vector<std::vector<double>> acc(net.layers.size());
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        if (const auto* c = std::get_if<Conv2DLayer>(&net.layers[l]))
            acc[l].assign(c->out_ch, 0.0);
        else if (const auto* d = std::get_if<DenseLayer>(&net.layers[l]))
            acc[l].assign(d->in, 0.0);  // mean |incoming activation| first
    }
    for (std::size_t s = 0; s < data.size(); ++s) {
        ForwardCache cache = forward_cached(net, data.images[s], net.layers.size() - 1);
        for (std::size_t l = 0; l < net.layers.size(); ++l) {
            if (const auto* c = std::get_if<Conv2DLayer>(&net.layers[l])) {
                const Tensor& out = cache.outputs[l];
                std::size_t hw = out.numel() / c->out_ch;
                for (std::size_t f = 0; f < c->out_ch; ++f) {
                    double sum = 0.0;
                    const float* p = out.data.data() + f * hw;
                    for (std::size_t i = 0; i < hw; ++i) sum += std::abs(p[i]);
                    acc[l][f] += sum / static_cast<double>(hw);
                }
            } else if (std::get_if<DenseLayer>(&net.layers[l])) {
                const Tensor& in = l == 0 ? cache.input : cache.outputs[l - 1];
                for (std::size_t i = 0; i < in.numel(); ++i) acc[l][i] += std::abs(in.data[i]);
            }
        }
    }
    double inv_n = 1.0 / static_cast<double>(data.size());
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        if (std::get_if<Conv2DLayer>(&net.layers[l])) {
            prof.layer_scores[l].reserve(acc[l].size());
            for (double v : acc[l]) prof.layer_scores[l].push_back(static_cast<float>(v * inv_n));
        } else if (const auto* d = std::get_if<DenseLayer>(&net.layers[l])) {
            prof.layer_scores[l].resize(d->out * d->in);
            for (std::size_t o = 0; o < d->out; ++o)
                for (std::size_t i = 0; i < d->in; ++i)
                    prof.layer_scores[l][o * d->in + i] = static_cast<float>(
                        std::abs(d->eff_w(o, i)) * acc[l][i] * inv_n);
        }
    }
    return prof;
}

// Mask for one layer: the floor(ratio * unit_count) lowest-scoring units are
// zeroed, ties broken by lowest unit index. Conv masks whole filters.
inline Tensor prune_layer(const Layer& layer, const std::vector<float>& scores, float ratio) {
    if (ratio < 0.0f || ratio >= 1.0f) throw std::invalid_argument("ratio must be in [0,1)");
    std::size_t n = layer_unit_count(layer);
    if (n == 0) throw std::invalid_argument("layer has no prunable units");
    if (scores.size() != n) throw std::invalid_argument("score count does not match unit count");
    std::size_t n_prune = static_cast<std::size_t>(ratio * static_cast<float>(n));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<bool> pruned(n, false);
    for (std::size_t i = 0; i < n_prune; ++i) pruned[order[i]] = true;

    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
        Tensor mask = ones(d->w.shape);
        for (std::size_t u = 0; u < n; ++u)
            if (pruned[u]) mask.data[u] = 0.0f;
        return mask;
    }
    const auto& c = std::get<Conv2DLayer>(layer);
    Tensor mask = ones(c.w.shape);
    std::size_t fs = c.in_ch * c.kh * c.kw;
    for (std::size_t f = 0; f < n; ++f)
        if (pruned[f])
            for (std::size_t i = 0; i < fs; ++i) mask.data[f * fs + i] = 0.0f;
    return mask;
}

inline void set_layer_mask(Layer& layer, Tensor mask) {
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
        if (mask.shape != d->w.shape) throw std::invalid_argument("mask shape mismatch");
        d->mask = std::move(mask);
    } else if (auto* c = std::get_if<Conv2DLayer>(&layer)) {
        if (mask.shape != c->w.shape) throw std::invalid_argument("mask shape mismatch");
        c->mask = std::move(mask);
    } else {
        throw std::invalid_argument("layer kind carries no mask");
    }
}

// Unit-level masked flags for a layer (filter granularity for conv).
inline std::vector<bool> masked_units(const Layer& layer) {
    std::size_t n = layer_unit_count(layer);
    std::vector<bool> out(n, false);
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
        if (d->mask)
            for (std::size_t u = 0; u < n; ++u) out[u] = d->mask->data[u] == 0.0f;
    } else if (const auto* c = std::get_if<Conv2DLayer>(&layer)) {
        for (std::size_t f = 0; f < n; ++f) out[f] = c->filter_masked(f);
    }
    return out;
}

struct BuildOptions {
    int initial_epochs = 4;
    int iteration_epochs = 1;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    OptimizerConfig optimizer;  // SGD default
};

// Algorithm: prune every prunable teacher layer on the class-restricted
// activation profile, transfer-learn an m-class head, then iteratively
// re-prune the unfrozen layers on the evolving network and fine-tune. Frozen
// masks are fixed by the first pass; a unit once masked stays masked.
inline Differentiator build_differentiator_multi(const Network& teacher,
                                                 const LabeledDataset& train_data,
                                                 std::vector<int> class_labels,
                                                 const PruningPlan& plan, FreezePolicy policy,
                                                 int iteration_times, const BuildOptions& opts) {
    if (class_labels.size() < 2) throw std::invalid_argument("differentiator needs >= 2 classes");
    std::sort(class_labels.begin(), class_labels.end());
    if (std::adjacent_find(class_labels.begin(), class_labels.end()) != class_labels.end())
        throw std::invalid_argument("class subsets must be disjoint");
    if (iteration_times < 1) throw std::invalid_argument("iteration_times must be >= 1");
    plan.validate();
    std::vector<std::size_t> prunable = prunable_layers(teacher);
    if (plan.ratios.size() != prunable.size())
        throw std::invalid_argument("plan length must equal prunable layer count");

    LabeledDataset subset = train_data.filter_classes(class_labels, /*remap=*/true);
    if (subset.size() == 0) throw std::invalid_argument("no samples for requested classes");

    // initial activation pruning of the whole teacher
    Network net = teacher;
    ActivationProfile act = profile_activations(net, subset);
    for (std::size_t pi = 0; pi < prunable.size(); ++pi) {
        std::size_t l = prunable[pi];
        if (plan.ratios[pi] == 0.0f) continue;  // unpruned layers carry no mask
        set_layer_mask(net.layers[l], prune_layer(net.layers[l], act.layer_scores[l], plan.ratios[pi]));
    }

    // transfer-learn the m-class head
    StudentModel st = make_student(net, static_cast<int>(class_labels.size()), policy, opts.seed);
    TrainOptions tr{opts.initial_epochs, opts.batch_size, opts.seed};
    fine_tune(st, subset, tr, opts.optimizer);

    // iterative prune-retrain on unfrozen layers only
    for (int it = 0; it < iteration_times; ++it) {
        ActivationProfile cur = profile_activations(st.network, subset);
        for (std::size_t pi = 0; pi < prunable.size(); ++pi) {
            std::size_t l = prunable[pi];
            if (st.network.frozen[l] || plan.ratios[pi] == 0.0f) continue;
            std::vector<float> scores = cur.layer_scores[l];
            std::vector<bool> already = masked_units(st.network.layers[l]);
            for (std::size_t u = 0; u < scores.size(); ++u)
                if (already[u]) scores[u] = -1.0f;  // masked units never resurrect
            set_layer_mask(st.network.layers[l],
                           prune_layer(st.network.layers[l], scores, plan.ratios[pi]));
        }
        TrainOptions trit{opts.iteration_epochs, opts.batch_size, opts.seed + 1 + static_cast<std::uint64_t>(it)};
        fine_tune(st, subset, trit, opts.optimizer);
    }

    Differentiator diff;
    diff.network = std::move(st.network);
    diff.classes = class_labels;
    diff.plan = plan;
    diff.output_map = class_labels;
    diff.policy = policy;
    return diff;
}

inline Differentiator build_differentiator(const Network& teacher, const LabeledDataset& train_data,
                                           ClassPair pair, const PruningPlan& plan,
                                           FreezePolicy policy, int iteration_times,
                                           const BuildOptions& opts) {
    return build_differentiator_multi(teacher, train_data, {pair.ci, pair.cj}, plan, policy,
                                      iteration_times, opts);
}

// Prediction in the original label space.
inline int differentiator_predict(const Differentiator& diff, const Tensor& x) {
    int head = argmax_label(forward(diff.network, x));  // 1..m
    return diff.output_map[static_cast<std::size_t>(head - 1)];
}

// Agglomerative average-linkage clustering over cosine similarity of flattened
// per-class profiles.
inline std::vector<std::vector<int>> cluster_labels(
    const std::vector<ActivationProfile>& per_class_profiles, std::size_t num_clusters) {
    std::size_t k = per_class_profiles.size();
    if (num_clusters < 1 || num_clusters > k) throw std::invalid_argument("num_clusters out of range");

    std::vector<std::vector<float>> vecs;
    for (const auto& p : per_class_profiles) {
        std::vector<float> v;
        for (const auto& ls : p.layer_scores) v.insert(v.end(), ls.begin(), ls.end());
        vecs.push_back(std::move(v));
    }
    auto cosine = [&](std::size_t a, std::size_t b) {
        double num = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t i = 0; i < vecs[a].size(); ++i) {
            num += vecs[a][i] * vecs[b][i];
            na += vecs[a][i] * vecs[a][i];
            nb += vecs[b][i] * vecs[b][i];
        }
        if (na == 0.0 || nb == 0.0) return 0.0;
        return num / (std::sqrt(na) * std::sqrt(nb));
    };

    std::vector<std::vector<int>> clusters;
    for (std::size_t i = 0; i < k; ++i) clusters.push_back({static_cast<int>(i) + 1});
    while (clusters.size() > num_clusters) {
        double best = -2.0;
        std::size_t bi = 0, bj = 1;
        for (std::size_t i = 0; i < clusters.size(); ++i) {
            for (std::size_t j = i + 1; j < clusters.size(); ++j) {
                double s = 0.0;
                for (int a : clusters[i])
                    for (int b : clusters[j]) s += cosine(static_cast<std::size_t>(a - 1),
                                                          static_cast<std::size_t>(b - 1));
                s /= static_cast<double>(clusters[i].size() * clusters[j].size());
                if (s > best) {
                    best = s;
                    bi = i;
                    bj = j;
                }
            }
        }
        clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(), clusters[bj].end());
        std::sort(clusters[bi].begin(), clusters[bi].end());
        clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
    }
    return clusters;
}

}  // namespace tlshield
