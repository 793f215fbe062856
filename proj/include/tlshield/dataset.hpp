#pragma once

#include <numbers>

#include "tlshield/tensor.hpp"

namespace tlshield {

// Images are C x H x W in [0,1]; labels are 1..K. Split tags live at the
// container level: a task owns disjoint train/test datasets.
struct LabeledDataset {
    std::size_t channels = 1, height = 0, width = 0;
    std::vector<Tensor> images;
    std::vector<int> labels;
    int num_classes = 0;

    std::size_t size() const { return images.size(); }
    Shape image_shape() const { return Shape{channels, height, width}; }

    void validate() const {
        if (images.size() != labels.size()) throw std::invalid_argument("image/label count mismatch");
        for (int l : labels)
            if (l < 1 || l > num_classes) throw std::invalid_argument("label out of range 1..K");
        for (const Tensor& im : images)
            if (im.shape != image_shape()) throw std::invalid_argument("inconsistent image sizes");
    }

    // Keeps samples whose label is in `classes`, optionally remapping labels to
    // 1..m in the order given.
    LabeledDataset filter_classes(const std::vector<int>& classes, bool remap) const {
        LabeledDataset out;
        out.channels = channels;
        out.height = height;
        out.width = width;
        out.num_classes = remap ? static_cast<int>(classes.size()) : num_classes;
        for (std::size_t i = 0; i < images.size(); ++i) {
            auto it = std::find(classes.begin(), classes.end(), labels[i]);
            if (it == classes.end()) continue;
            out.images.push_back(images[i]);
            out.labels.push_back(remap ? static_cast<int>(it - classes.begin()) + 1 : labels[i]);
        }
        return out;
    }
};

struct DatasetSplit {
    LabeledDataset train;
    LabeledDataset test;
};

namespace detail {

// Procedural 24x24 grayscale class glyphs, face-like in structure: every class
// shares a fixed smooth base bump field, and class identity is a smaller
// class-seeded deviation field on top of it. Per sample the deviation
// amplitude and position jitter slightly and pixel noise is added. Classes are
// cleanly separable yet mutually close, which keeps softmax margins modest.
inline Tensor synth_image(int cls, int K, std::mt19937& rng, std::size_t H, std::size_t W) {
    (void)K;
    constexpr int kBase = 5, kDev = 4;
    float bx[kBase], by[kBase], ba[kBase], bs[kBase];
    std::mt19937 brng(0xBA5Eu);
    std::uniform_real_distribution<float> u01(0.0f, 1.0f);
    for (int i = 0; i < kBase; ++i) {
        bx[i] = 0.15f + 0.7f * u01(brng);
        by[i] = 0.15f + 0.7f * u01(brng);
        ba[i] = (i % 2 ? -1.0f : 1.0f) * (0.22f + 0.15f * u01(brng));
        bs[i] = 0.015f + 0.025f * u01(brng);
    }
    float dx_[kDev], dy_[kDev], da[kDev], dsz[kDev];
    std::mt19937 crng(0xC0FFEEu + static_cast<std::uint32_t>(cls) * 9176u);
    for (int i = 0; i < kDev; ++i) {
        dx_[i] = 0.12f + 0.76f * u01(crng);
        dy_[i] = 0.12f + 0.76f * u01(crng);
        da[i] = (u01(crng) < 0.5f ? -1.0f : 1.0f) * (0.12f + 0.08f * u01(crng));
        dsz[i] = 0.012f + 0.02f * u01(crng);
    }
    float amp = 0.9f + 0.2f * u01(rng);
    float jx = 0.02f * (u01(rng) - 0.5f), jy = 0.02f * (u01(rng) - 0.5f);
    std::normal_distribution<float> noise(0.0f, 0.01f);
    Tensor img(Shape{1, H, W});
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            float u = static_cast<float>(x) / static_cast<float>(W - 1);
            float v = static_cast<float>(y) / static_cast<float>(H - 1);
            float g = 0.5f;
            for (int i = 0; i < kBase; ++i) {
                float dx = u - bx[i], dy = v - by[i];
                g += ba[i] * std::exp(-(dx * dx + dy * dy) / bs[i]);
            }
            for (int i = 0; i < kDev; ++i) {
                float dx = u - dx_[i] - jx, dy = v - dy_[i] - jy;
                g += amp * da[i] * std::exp(-(dx * dx + dy * dy) / dsz[i]);
            }
            g += noise(rng);
            img.data[y * W + x] = std::clamp(g, 0.0f, 1.0f);
        }
    }
    return img;
}

}  // namespace detail

// Deterministic synthetic K-class dataset split 80/20 train/test.
inline DatasetSplit synth_dataset(int K, int per_class, std::uint64_t seed, std::size_t H = 24,
                                  std::size_t W = 24) {
    if (K < 3) throw std::invalid_argument("synth_dataset needs K >= 3");
    if (per_class < 2) throw std::invalid_argument("per_class must be >= 2");
    std::mt19937 rng(static_cast<std::uint32_t>(seed));
    DatasetSplit out;
    for (LabeledDataset* ds : {&out.train, &out.test}) {
        ds->channels = 1;
        ds->height = H;
        ds->width = W;
        ds->num_classes = K;
    }
    int n_test = std::max(1, per_class / 5);
    for (int cls = 1; cls <= K; ++cls) {
        for (int i = 0; i < per_class; ++i) {
            Tensor img = detail::synth_image(cls, K, rng, H, W);
            LabeledDataset& ds = (i < per_class - n_test) ? out.train : out.test;
            ds.images.push_back(std::move(img));
            ds.labels.push_back(cls);
        }
    }
    return out;
}

}  // namespace tlshield
