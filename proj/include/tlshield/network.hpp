#pragma once

#include <algorithm>
#include <cassert>

#include "tlshield/layer.hpp"

namespace tlshield {

// Layered feedforward model. Immutable during inference; training mutates it
// and needs exclusive access.
struct Network {
    Shape input_shape;
    std::vector<Layer> layers;
    std::vector<bool> frozen;  // one flag per layer
    std::size_t num_classes = 0;

    void add(Layer l, bool froz = false) {
        layers.push_back(std::move(l));
        frozen.push_back(froz);
    }

    // Validates shape composition and the final-Dense contract.
    void validate() const {
        if (frozen.size() != layers.size())
            throw std::invalid_argument("frozen flag count != layer count");
        Shape s = input_shape;
        for (const Layer& l : layers) s = layer_output_shape(l, s);
        const auto* head = std::get_if<DenseLayer>(&layers.back());
        if (!head || head->out != num_classes)
            throw std::invalid_argument("network must end in a Dense layer of width num_classes");
    }

    std::vector<Shape> layer_shapes() const {
        std::vector<Shape> out;
        Shape s = input_shape;
        for (const Layer& l : layers) {
            s = layer_output_shape(l, s);
            out.push_back(s);
        }
        return out;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const Layer& l : layers) {
            if (const auto* d = std::get_if<DenseLayer>(&l)) n += d->w.numel() + d->b.numel();
            if (const auto* c = std::get_if<Conv2DLayer>(&l)) n += c->w.numel() + c->b.numel();
        }
        return n;
    }
};

struct InternalFeatures {
    std::size_t layer_index = 0;
    Tensor values;
};

struct ForwardCache {
    Tensor input;
    std::vector<Tensor> outputs;  // one per layer
};

inline ForwardCache forward_cached(const Network& net, const Tensor& x, std::size_t upto) {
    if (x.shape != net.input_shape)
        throw std::invalid_argument("input shape " + shape_str(x.shape) +
                                    " does not match network input " + shape_str(net.input_shape));
    ForwardCache c;
    c.input = x;
    Shape in_shape = net.input_shape;
    const Tensor* cur = &x;
    for (std::size_t l = 0; l <= upto; ++l) {
        Shape out_shape = layer_output_shape(net.layers[l], in_shape);
        c.outputs.push_back(layer_forward(net.layers[l], *cur, in_shape, out_shape));
        cur = &c.outputs.back();
        in_shape = out_shape;
    }
    return c;
}

inline Tensor forward(const Network& net, const Tensor& x) {
    ForwardCache c = forward_cached(net, x, net.layers.size() - 1);
    Tensor logits = std::move(c.outputs.back());
    check_finite(logits, "forward logits");
    return logits;
}

inline InternalFeatures forward_to_layer(const Network& net, const Tensor& x, std::size_t k) {
    if (k >= net.layers.size()) throw std::out_of_range("layer index out of range");
    ForwardCache c = forward_cached(net, x, k);
    return InternalFeatures{k, std::move(c.outputs.back())};
}

// Runs layers [from, end) on features produced at layer from-1.
inline Tensor forward_from_layer(const Network& net, const Tensor& features, std::size_t from) {
    std::vector<Shape> shapes = net.layer_shapes();
    Shape in_shape = from == 0 ? net.input_shape : shapes[from - 1];
    Tensor cur = features;
    for (std::size_t l = from; l < net.layers.size(); ++l) {
        cur = layer_forward(net.layers[l], cur, in_shape, shapes[l]);
        in_shape = shapes[l];
    }
    return cur;
}

inline int argmax_label(const Tensor& logits) {
    // Ties break toward the smallest label.
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.numel(); ++i)
        if (logits.data[i] > logits.data[best]) best = i;
    return static_cast<int>(best) + 1;  // labels are 1..K
}

// Fused softmax cross-entropy (log-sum-exp with max subtraction). Label y is
// 1-based.
inline float softmax_xent(const Tensor& logits, int y, Tensor* dlogits = nullptr) {
    std::size_t k = logits.numel();
    if (y < 1 || static_cast<std::size_t>(y) > k) throw std::invalid_argument("label out of range");
    float mx = *std::max_element(logits.data.begin(), logits.data.end());
    float se = 0.0f;
    for (std::size_t i = 0; i < k; ++i) se += std::exp(logits.data[i] - mx);
    float lse = mx + std::log(se);
    if (dlogits) {
        *dlogits = Tensor(logits.shape);
        for (std::size_t i = 0; i < k; ++i)
            dlogits->data[i] = std::exp(logits.data[i] - lse);
        dlogits->data[y - 1] -= 1.0f;
    }
    return lse - logits.data[y - 1];
}

struct Gradients {
    std::vector<LayerGrads> layers;  // empty tensors for parameterless/frozen layers
    Tensor input;
    float loss = 0.0f;
};

// Backpropagates `grad_at` (gradient w.r.t. the output of layer `at`) down the
// network. Parameter gradients are collected for unfrozen layers above
// `stop_layer`; the input gradient is produced when `want_input` is set.
inline Gradients backprop_from(const Network& net, const ForwardCache& cache, std::size_t at,
                               Tensor grad_at, bool want_input, std::size_t stop_layer = 0) {
    Gradients g;
    g.layers.resize(net.layers.size());
    std::vector<Shape> shapes = net.layer_shapes();
    Tensor gy = std::move(grad_at);
    for (std::size_t li = at + 1; li-- > 0;) {
        const Tensor& x_in = li == 0 ? cache.input : cache.outputs[li - 1];
        const Shape& in_shape = li == 0 ? net.input_shape : shapes[li - 1];
        bool need_pg = !net.frozen[li] && layer_has_params(net.layers[li]);
        bool need_gx = want_input || li > stop_layer;
        Tensor gx;
        layer_backward(net.layers[li], x_in, cache.outputs[li], gy, in_shape,
                       need_pg ? &g.layers[li] : nullptr, need_gx ? &gx : nullptr);
        if (!need_gx) break;
        gy = std::move(gx);
    }
    if (want_input) g.input = std::move(gy);
    return g;
}

// Gradients of softmax cross-entropy w.r.t. unfrozen unmasked parameters and,
// when requested, the input.
inline Gradients backward(const Network& net, const Tensor& x, int y, bool want_input = true,
                          std::size_t stop_layer = 0) {
    ForwardCache cache = forward_cached(net, x, net.layers.size() - 1);
    Tensor dlogits;
    float loss = softmax_xent(cache.outputs.back(), y, &dlogits);
    Gradients g = backprop_from(net, cache, net.layers.size() - 1, std::move(dlogits), want_input,
                                stop_layer);
    g.loss = loss;
    return g;
}

enum class FeatureMetric { SquaredL2PerElem, L2, L1 };

inline float feature_distance(const Tensor& a, const Tensor& b, FeatureMetric m) {
    if (a.numel() != b.numel()) throw std::invalid_argument("feature shape mismatch");
    double s = 0.0;
    switch (m) {
        case FeatureMetric::SquaredL2PerElem:
            for (std::size_t i = 0; i < a.numel(); ++i) {
                double d = a.data[i] - b.data[i];
                s += d * d;
            }
            return static_cast<float>(s / static_cast<double>(a.numel()));
        case FeatureMetric::L2:
            for (std::size_t i = 0; i < a.numel(); ++i) {
                double d = a.data[i] - b.data[i];
                s += d * d;
            }
            return static_cast<float>(std::sqrt(s));
        case FeatureMetric::L1:
            for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(a.data[i] - b.data[i]);
            return static_cast<float>(s);
    }
    return 0.0f;
}

inline Tensor feature_distance_grad(const Tensor& a, const Tensor& b, FeatureMetric m) {
    if (a.numel() != b.numel()) throw std::invalid_argument("feature shape mismatch");
    Tensor g(a.shape);
    std::size_t n = a.numel();
    switch (m) {
        case FeatureMetric::SquaredL2PerElem:
            for (std::size_t i = 0; i < n; ++i)
                g.data[i] = 2.0f * (a.data[i] - b.data[i]) / static_cast<float>(n);
            break;
        case FeatureMetric::L2: {
            float d = feature_distance(a, b, FeatureMetric::L2);
            if (d > 0.0f)
                for (std::size_t i = 0; i < n; ++i) g.data[i] = (a.data[i] - b.data[i]) / d;
            break;
        }
        case FeatureMetric::L1:
            for (std::size_t i = 0; i < n; ++i) {
                float d = a.data[i] - b.data[i];
                g.data[i] = d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
            }
            break;
    }
    return g;
}

// Gradient of D(H_k(x), target) with respect to x.
inline Tensor feature_loss_input_gradient(const Network& net, const Tensor& x,
                                          const InternalFeatures& target, FeatureMetric metric,
                                          float* distance_out = nullptr) {
    std::size_t k = target.layer_index;
    if (k >= net.layers.size()) throw std::out_of_range("target layer index out of range");
    ForwardCache cache = forward_cached(net, x, k);
    const Tensor& h = cache.outputs.back();
    if (h.numel() != target.values.numel())
        throw std::invalid_argument("produced/target feature shape mismatch");
    if (distance_out) *distance_out = feature_distance(h, target.values, metric);
    Tensor gh = feature_distance_grad(h, target.values, metric);
    Gradients g = backprop_from(net, cache, k, std::move(gh), /*want_input=*/true);
    return std::move(g.input);
}

}  // namespace tlshield
