#pragma once

#include "tlshield/tensor.hpp"

namespace tlshield {

// Structural dissimilarity, (1 - mean windowed SSIM) / 2, in [0, 1].
// Windows are 8x8 with stride 4 per channel (shrunk to the image when
// smaller), constants C1 = 0.01^2 and C2 = 0.03^2 for dynamic range 1.0.
struct SsimParams {
    std::size_t window = 8;
    std::size_t stride = 4;
    float c1 = 1e-4f;
    float c2 = 9e-4f;
};

namespace detail {

inline std::vector<std::size_t> window_starts(std::size_t extent, std::size_t win, std::size_t stride) {
    std::vector<std::size_t> starts;
    if (extent <= win) return {0};
    for (std::size_t s = 0; s + win <= extent; s += stride) starts.push_back(s);
    if (starts.back() + win != extent) starts.push_back(extent - win);
    return starts;
}

// Per-window SSIM and, optionally, its gradient with respect to `a`
// accumulated into grad_a. Uses biased (1/N) moments.
inline double window_ssim(const float* a, const float* b, std::size_t row_stride, std::size_t wh,
                          std::size_t ww, const SsimParams& p, float scale, float* grad_a) {
    const double n = static_cast<double>(wh * ww);
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    for (std::size_t y = 0; y < wh; ++y) {
        for (std::size_t x = 0; x < ww; ++x) {
            double av = a[y * row_stride + x], bv = b[y * row_stride + x];
            sa += av;
            sb += bv;
            saa += av * av;
            sbb += bv * bv;
            sab += av * bv;
        }
    }
    double mua = sa / n, mub = sb / n;
    double va = saa / n - mua * mua;
    double vb = sbb / n - mub * mub;
    double cab = sab / n - mua * mub;
    double a1 = 2.0 * mua * mub + p.c1, a2 = 2.0 * cab + p.c2;
    double b1 = mua * mua + mub * mub + p.c1, b2 = va + vb + p.c2;
    double ssim = (a1 * a2) / (b1 * b2);
    if (grad_a) {
        double inv = 1.0 / (b1 * b2);
        for (std::size_t y = 0; y < wh; ++y) {
            for (std::size_t x = 0; x < ww; ++x) {
                double av = a[y * row_stride + x], bv = b[y * row_stride + x];
                double da1 = 2.0 * mub / n;
                double da2 = 2.0 * (bv - mub) / n;
                double db1 = 2.0 * mua / n;
                double db2 = 2.0 * (av - mua) / n;
                double ds = (da1 * a2 + a1 * da2) * inv - ssim * (db1 / b1 + db2 / b2);
                grad_a[y * row_stride + x] += static_cast<float>(ds * scale);
            }
        }
    }
    return ssim;
}

inline float dssim_impl(const Tensor& a, const Tensor& b, const SsimParams& p, Tensor* grad_a) {
    if (a.shape != b.shape) throw std::invalid_argument("dssim shape mismatch");
    if (a.shape.size() != 3) throw std::invalid_argument("dssim expects (C,H,W) images");
    std::size_t C = a.shape[0], H = a.shape[1], W = a.shape[2];
    std::size_t wh = std::min(p.window, H), ww = std::min(p.window, W);
    auto ys = window_starts(H, wh, p.stride);
    auto xs = window_starts(W, ww, p.stride);
    std::size_t n_windows = C * ys.size() * xs.size();
    if (grad_a) *grad_a = Tensor(a.shape);
    // d dssim / d ssim_w = -1 / (2 * n_windows)
    float gscale = -0.5f / static_cast<float>(n_windows);
    double ssim_sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
        const float* ac = a.data.data() + c * H * W;
        const float* bc = b.data.data() + c * H * W;
        float* gc = grad_a ? grad_a->data.data() + c * H * W : nullptr;
        for (std::size_t y : ys) {
            for (std::size_t x : xs) {
                ssim_sum += window_ssim(ac + y * W + x, bc + y * W + x, W, wh, ww, p, gscale,
                                        gc ? gc + y * W + x : nullptr);
            }
        }
    }
    double mean_ssim = ssim_sum / static_cast<double>(n_windows);
    return static_cast<float>((1.0 - mean_ssim) / 2.0);
}

}  // namespace detail

inline float dssim(const Tensor& a, const Tensor& b, const SsimParams& p = {}) {
    return detail::dssim_impl(a, b, p, nullptr);
}

// DSSIM together with its gradient with respect to the first image.
inline float dssim_with_grad(const Tensor& a, const Tensor& b, Tensor& grad_a,
                             const SsimParams& p = {}) {
    return detail::dssim_impl(a, b, p, &grad_a);
}

}  // namespace tlshield
