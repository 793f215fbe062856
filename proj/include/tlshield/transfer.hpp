#pragma once

#include <string>

#include "tlshield/train.hpp"

namespace tlshield {

// Freeze policy for transfer learning. cutoff_layer is the count of leading
// layers kept frozen (the paper-style "layer 10 out of 16" counts layers
// 1-based, so cutoff 10 freezes the first 10 layers).
struct FreezePolicy {
    enum Kind { DeepLayerExtractor, MidLayerExtractor, FullFineTune } kind = DeepLayerExtractor;
    std::size_t cutoff_layer = 0;  // used by MidLayerExtractor

    static FreezePolicy deep() { return {DeepLayerExtractor, 0}; }
    static FreezePolicy mid(std::size_t cutoff) { return {MidLayerExtractor, cutoff}; }
    static FreezePolicy full() { return {FullFineTune, 0}; }
};

inline std::vector<bool> freeze_flags(const FreezePolicy& policy, std::size_t layer_count) {
    std::vector<bool> frozen(layer_count, false);
    switch (policy.kind) {
        case FreezePolicy::FullFineTune:
            break;
        case FreezePolicy::DeepLayerExtractor:
            for (std::size_t l = 0; l + 1 < layer_count; ++l) frozen[l] = true;
            break;
        case FreezePolicy::MidLayerExtractor:
            if (policy.cutoff_layer >= layer_count)
                throw std::invalid_argument("cutoff_layer must be < layer count");
            for (std::size_t l = 0; l < policy.cutoff_layer; ++l) frozen[l] = true;
            break;
    }
    return frozen;
}

struct StudentModel {
    Network network;
    std::string teacher_id;
    FreezePolicy policy;
    std::vector<int> label_space;  // original labels, size K; head index i -> label_space[i]
};

// Copies the teacher, replaces the final Dense head with a freshly initialized
// K-wide one, and sets frozen flags per policy.
inline StudentModel make_student(const Network& teacher, int num_classes, FreezePolicy policy,
                                 std::uint64_t init_seed, std::string teacher_id = "teacher") {
    if (num_classes < 2) throw std::invalid_argument("student needs K >= 2");
    teacher.validate();
    StudentModel s;
    s.teacher_id = std::move(teacher_id);
    s.policy = policy;
    s.network = teacher;
    const auto& old_head = std::get<DenseLayer>(teacher.layers.back());
    DenseLayer head(old_head.in, static_cast<std::size_t>(num_classes));
    std::mt19937 rng(static_cast<std::uint32_t>(init_seed));
    glorot_uniform(head.w, head.in, head.out, rng);
    s.network.layers.back() = std::move(head);
    s.network.num_classes = static_cast<std::size_t>(num_classes);
    s.network.frozen = freeze_flags(policy, s.network.layers.size());
    for (int c = 1; c <= num_classes; ++c) s.label_space.push_back(c);
    return s;
}

// Supervised fine-tuning honoring the freeze policy; frozen layers are never
// touched.
inline std::vector<float> fine_tune(StudentModel& student, const LabeledDataset& data,
                                    const TrainOptions& tr, const OptimizerConfig& opt_cfg) {
    if (data.size() == 0) throw std::invalid_argument("empty dataset");
    if (data.num_classes != static_cast<int>(student.network.num_classes))
        throw std::invalid_argument("dataset class count does not match student head");
    NetOptimizer opt(opt_cfg);
    return train_epochs(student.network, data, opt, tr);
}

}  // namespace tlshield
