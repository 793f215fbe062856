#pragma once

#include "tlshield/dataset.hpp"
#include "tlshield/optimizer.hpp"

namespace tlshield {

struct Batch {
    const LabeledDataset* data = nullptr;
    std::vector<std::size_t> indices;

    std::size_t size() const { return indices.size(); }
};

inline float batch_loss(const Network& net, const Batch& batch) {
    if (batch.size() == 0) throw std::invalid_argument("empty batch");
    double s = 0.0;
    for (std::size_t idx : batch.indices) {
        Tensor logits = forward(net, batch.data->images[idx]);
        s += softmax_xent(logits, batch.data->labels[idx]);
    }
    return static_cast<float>(s / static_cast<double>(batch.size()));
}

inline float dataset_loss(const Network& net, const LabeledDataset& data) {
    Batch b{&data, {}};
    b.indices.resize(data.size());
    std::iota(b.indices.begin(), b.indices.end(), 0);
    return batch_loss(net, b);
}

inline float dataset_accuracy(const Network& net, const LabeledDataset& data) {
    if (data.size() == 0) throw std::invalid_argument("empty dataset");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i)
        if (argmax_label(forward(net, data.images[i])) == data.labels[i]) ++correct;
    return static_cast<float>(correct) / static_cast<float>(data.size());
}

// One optimizer step on the mean gradient over the batch. Only unfrozen,
// unmasked parameters move. Returns the pre-step mean loss.
inline float train_step(Network& net, const Batch& batch, NetOptimizer& opt) {
    if (batch.size() == 0) throw std::invalid_argument("empty batch");
    std::size_t deepest_frozen_prefix = 0;
    while (deepest_frozen_prefix < net.layers.size() && net.frozen[deepest_frozen_prefix])
        ++deepest_frozen_prefix;
    Gradients total;
    total.layers.resize(net.layers.size());
    double loss_sum = 0.0;
    for (std::size_t idx : batch.indices) {
        Gradients g = backward(net, batch.data->images[idx], batch.data->labels[idx],
                               /*want_input=*/false, deepest_frozen_prefix);
        loss_sum += g.loss;
        for (std::size_t li = 0; li < g.layers.size(); ++li) {
            if (g.layers[li].w.numel() == 0) continue;
            if (total.layers[li].w.numel() == 0) {
                total.layers[li].w = Tensor(g.layers[li].w.shape);
                total.layers[li].b = Tensor(g.layers[li].b.shape);
            }
            for (std::size_t i = 0; i < g.layers[li].w.numel(); ++i)
                total.layers[li].w.data[i] += g.layers[li].w.data[i];
            for (std::size_t i = 0; i < g.layers[li].b.numel(); ++i)
                total.layers[li].b.data[i] += g.layers[li].b.data[i];
        }
    }
    float inv = 1.0f / static_cast<float>(batch.size());
    for (auto& lg : total.layers) {
        for (float& v : lg.w.data) v *= inv;
        for (float& v : lg.b.data) v *= inv;
    }
    opt.step(net, total);
    return static_cast<float>(loss_sum / static_cast<double>(batch.size()));
}

struct TrainOptions {
    int epochs = 30;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
};

// Epoch training with shuffled batches. When a frozen prefix exists, features
// at the boundary are computed once and the suffix is trained on them; the
// arithmetic is identical to training the full network.
inline std::vector<float> train_epochs(Network& net, const LabeledDataset& data, NetOptimizer& opt,
                                       const TrainOptions& tr) {
    if (data.size() == 0) throw std::invalid_argument("empty dataset");
    data.validate();
    std::size_t prefix = 0;
    while (prefix < net.layers.size() && net.frozen[prefix]) ++prefix;

    const LabeledDataset* train_data = &data;
    Network* train_net = &net;
    Network suffix_net;
    LabeledDataset feat_data;
    if (prefix > 0) {
        Shape bshape = net.layer_shapes()[prefix - 1];
        feat_data.num_classes = data.num_classes;
        feat_data.labels = data.labels;
        for (const Tensor& im : data.images)
            feat_data.images.push_back(forward_to_layer(net, im, prefix - 1).values);
        suffix_net.input_shape = bshape;
        suffix_net.num_classes = net.num_classes;
        for (std::size_t l = prefix; l < net.layers.size(); ++l)
            suffix_net.add(net.layers[l], net.frozen[l]);
        train_data = &feat_data;
        train_net = &suffix_net;
    }

    std::mt19937 rng(static_cast<std::uint32_t>(tr.seed));
    std::vector<std::size_t> order(train_data->size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<float> epoch_losses;
    for (int e = 0; e < tr.epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += tr.batch_size) {
            Batch b{train_data, {}};
            for (std::size_t i = start; i < std::min(order.size(), start + tr.batch_size); ++i)
                b.indices.push_back(order[i]);
            loss_sum += train_step(*train_net, b, opt);
            ++steps;
        }
        epoch_losses.push_back(static_cast<float>(loss_sum / static_cast<double>(steps)));
    }
    if (prefix > 0) {
        for (std::size_t l = prefix; l < net.layers.size(); ++l)
            net.layers[l] = suffix_net.layers[l - prefix];
    }
    return epoch_losses;
}

}  // namespace tlshield
