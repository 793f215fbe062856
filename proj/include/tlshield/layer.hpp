#pragma once

#include <optional>
#include <variant>

#include "tlshield/tensor.hpp"

namespace tlshield {

// Fully connected layer. Weights are out x in row-major. The optional mask is
// congruent with the weight tensor; masked entries read as zero and receive
// zero gradients, the stored values are untouched.
struct DenseLayer {
    std::size_t in = 0, out = 0;
    Tensor w;  // (out, in)
    Tensor b;  // (out)
    std::optional<Tensor> mask;

    DenseLayer() = default;
    DenseLayer(std::size_t in_, std::size_t out_)
        : in(in_), out(out_), w(Shape{out_, in_}), b(Shape{out_}) {}

    float eff_w(std::size_t o, std::size_t i) const {
        float v = w.data[o * in + i];
        if (mask) v *= mask->data[o * in + i];
        return v;
    }
};

// 2-D convolution, zero padding, integer stride. Filters are
// (out_ch, in_ch, kh, kw). Mask granularity is whole filters; a filter whose
// mask is all zero also masks its bias.
struct Conv2DLayer {
    std::size_t in_ch = 0, out_ch = 0, kh = 0, kw = 0, stride = 1, pad = 0;
    Tensor w;  // (out_ch, in_ch, kh, kw)
    Tensor b;  // (out_ch)
    std::optional<Tensor> mask;

    Conv2DLayer() = default;
    Conv2DLayer(std::size_t in_ch_, std::size_t out_ch_, std::size_t k, std::size_t stride_ = 1,
                std::size_t pad_ = 0)
        : in_ch(in_ch_), out_ch(out_ch_), kh(k), kw(k), stride(stride_), pad(pad_),
          w(Shape{out_ch_, in_ch_, k, k}), b(Shape{out_ch_}) {}

    // A filter is considered masked when every one of its mask entries is zero.
    bool filter_masked(std::size_t f) const {
        if (!mask) return false;
        std::size_t fs = in_ch * kh * kw;
        for (std::size_t i = 0; i < fs; ++i)
            if (mask->data[f * fs + i] != 0.0f) return false;
        return true;
    }
};

struct ReLULayer {};
struct FlattenLayer {};

using Layer = std::variant<DenseLayer, Conv2DLayer, ReLULayer, FlattenLayer>;

inline bool layer_has_params(const Layer& l) {
    return std::holds_alternative<DenseLayer>(l) || std::holds_alternative<Conv2DLayer>(l);
}

inline const char* layer_kind_name(const Layer& l) {
    if (std::holds_alternative<DenseLayer>(l)) return "Dense";
    if (std::holds_alternative<Conv2DLayer>(l)) return "Conv2D";
    if (std::holds_alternative<ReLULayer>(l)) return "ReLU";
    return "Flatten";
}

inline Shape layer_output_shape(const Layer& l, const Shape& in) {
    if (const auto* d = std::get_if<DenseLayer>(&l)) {
        if (shape_numel(in) != d->in)
            throw std::invalid_argument("dense input " + shape_str(in) + " incompatible with in=" +
                                        std::to_string(d->in));
        return Shape{d->out};
    }
    if (const auto* c = std::get_if<Conv2DLayer>(&l)) {
        if (in.size() != 3 || in[0] != c->in_ch)
            throw std::invalid_argument("conv input must be (C,H,W) with C=" +
                                        std::to_string(c->in_ch) + ", got " + shape_str(in));
        std::size_t hp = in[1] + 2 * c->pad, wp = in[2] + 2 * c->pad;
        if (c->kh > hp || c->kw > wp)
            throw std::invalid_argument("conv kernel exceeds padded input extents");
        return Shape{c->out_ch, (hp - c->kh) / c->stride + 1, (wp - c->kw) / c->stride + 1};
    }
    if (std::holds_alternative<FlattenLayer>(l)) return Shape{shape_numel(in)};
    return in;  // ReLU
}

// ---- forward ----

inline Tensor dense_forward(const DenseLayer& d, const Tensor& x) {
    Tensor y(Shape{d.out});
    const float* W = d.w.data.data();
    const float* M = d.mask ? d.mask->data.data() : nullptr;
    for (std::size_t o = 0; o < d.out; ++o) {
        float s = d.b.data[o];
        const float* wr = W + o * d.in;
        if (M) {
            const float* mr = M + o * d.in;
            for (std::size_t i = 0; i < d.in; ++i) s += wr[i] * mr[i] * x.data[i];
        } else {
            for (std::size_t i = 0; i < d.in; ++i) s += wr[i] * x.data[i];
        }
        y.data[o] = s;
    }
    return y;
}

inline Tensor conv_forward(const Conv2DLayer& c, const Tensor& x, const Shape& in_shape,
                           const Shape& out_shape) {
    const std::size_t H = in_shape[1], W = in_shape[2];
    const std::size_t Ho = out_shape[1], Wo = out_shape[2];
    Tensor y(out_shape);
    const std::size_t fs = c.in_ch * c.kh * c.kw;
    std::vector<float> eff(fs);
    for (std::size_t f = 0; f < c.out_ch; ++f) {
        const float* wf = c.w.data.data() + f * fs;
        if (c.mask) {
            const float* mf = c.mask->data.data() + f * fs;
            for (std::size_t i = 0; i < fs; ++i) eff[i] = wf[i] * mf[i];
            wf = eff.data();
        }
        float bias = c.filter_masked(f) ? 0.0f : c.b.data[f];
        float* yf = y.data.data() + f * Ho * Wo;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
            for (std::size_t ow = 0; ow < Wo; ++ow) yf[oh * Wo + ow] = bias;
        }
        for (std::size_t ci = 0; ci < c.in_ch; ++ci) {
            const float* xc = x.data.data() + ci * H * W;
            for (std::size_t i = 0; i < c.kh; ++i) {
                for (std::size_t j = 0; j < c.kw; ++j) {
                    float wv = wf[ci * c.kh * c.kw + i * c.kw + j];
                    if (wv == 0.0f) continue;
                    for (std::size_t oh = 0; oh < Ho; ++oh) {
                        std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * c.stride + i) -
                                            static_cast<std::ptrdiff_t>(c.pad);
                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                        const float* xr = xc + ih * W;
                        float* yr = yf + oh * Wo;
                        std::ptrdiff_t joff = static_cast<std::ptrdiff_t>(j) -
                                              static_cast<std::ptrdiff_t>(c.pad);
                        for (std::size_t ow = 0; ow < Wo; ++ow) {
                            std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * c.stride) + joff;
                            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                            yr[ow] += wv * xr[iw];
                        }
                    }
                }
            }
        }
    }
    return y;
}

inline Tensor layer_forward(const Layer& l, const Tensor& x, const Shape& in_shape,
                            const Shape& out_shape) {
    if (const auto* d = std::get_if<DenseLayer>(&l)) return dense_forward(*d, x);
    if (const auto* c = std::get_if<Conv2DLayer>(&l)) return conv_forward(*c, x, in_shape, out_shape);
    if (std::holds_alternative<ReLULayer>(l)) {
        Tensor y = x;
        for (float& v : y.data) v = v > 0.0f ? v : 0.0f;
        return y;
    }
    Tensor y = x;  // Flatten
    y.shape = out_shape;
    return y;
}

// ---- backward ----

struct LayerGrads {
    Tensor w;  // empty for parameterless layers
    Tensor b;
};

// Backward through one layer. `x` is the layer input, `y` its forward output,
// `gy` the gradient at the output. Parameter gradients (optional) honor the
// mask; `gx` (optional) receives the input gradient.
inline void layer_backward(const Layer& l, const Tensor& x, const Tensor& y, const Tensor& gy,
                           const Shape& in_shape, LayerGrads* pg, Tensor* gx) {
    if (const auto* d = std::get_if<DenseLayer>(&l)) {
        if (pg) {
            pg->w = Tensor(d->w.shape);
            pg->b = Tensor(d->b.shape);
            for (std::size_t o = 0; o < d->out; ++o) {
                float g = gy.data[o];
                pg->b.data[o] = g;
                float* wr = pg->w.data.data() + o * d->in;
                for (std::size_t i = 0; i < d->in; ++i) wr[i] = g * x.data[i];
                if (d->mask) {
                    const float* mr = d->mask->data.data() + o * d->in;
                    for (std::size_t i = 0; i < d->in; ++i) wr[i] *= mr[i];
                }
            }
        }
        if (gx) {
            *gx = Tensor(in_shape);
            for (std::size_t o = 0; o < d->out; ++o) {
                float g = gy.data[o];
                if (g == 0.0f) continue;
                for (std::size_t i = 0; i < d->in; ++i) gx->data[i] += g * d->eff_w(o, i);
            }
        }
        return;
    }
    if (const auto* c = std::get_if<Conv2DLayer>(&l)) {
        const std::size_t H = in_shape[1], W = in_shape[2];
        const std::size_t Ho = y.shape[1], Wo = y.shape[2];
        const std::size_t fs = c->in_ch * c->kh * c->kw;
        if (pg) {
            pg->w = Tensor(c->w.shape);
            pg->b = Tensor(c->b.shape);
        }
        if (gx) *gx = Tensor(in_shape);
        for (std::size_t f = 0; f < c->out_ch; ++f) {
            const float* gyf = gy.data.data() + f * Ho * Wo;
            bool fmasked = c->filter_masked(f);
            if (pg && !fmasked) {
                float bs = 0.0f;
                for (std::size_t k = 0; k < Ho * Wo; ++k) bs += gyf[k];
                pg->b.data[f] = bs;
            }
            for (std::size_t ci = 0; ci < c->in_ch; ++ci) {
                for (std::size_t i = 0; i < c->kh; ++i) {
                    for (std::size_t j = 0; j < c->kw; ++j) {
                        std::size_t widx = f * fs + ci * c->kh * c->kw + i * c->kw + j;
                        float m = c->mask ? c->mask->data[widx] : 1.0f;
                        float wg = 0.0f;
                        float wv = c->w.data[widx] * m;
                        const float* xc = x.data.data() + ci * H * W;
                        float* gxc = gx ? gx->data.data() + ci * H * W : nullptr;
                        for (std::size_t oh = 0; oh < Ho; ++oh) {
                            std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * c->stride + i) -
                                                static_cast<std::ptrdiff_t>(c->pad);
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                            const float* gyr = gyf + oh * Wo;
                            std::ptrdiff_t joff = static_cast<std::ptrdiff_t>(j) -
                                                  static_cast<std::ptrdiff_t>(c->pad);
                            for (std::size_t ow = 0; ow < Wo; ++ow) {
                                std::ptrdiff_t iw =
                                    static_cast<std::ptrdiff_t>(ow * c->stride) + joff;
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                float g = gyr[ow];
                                wg += g * xc[ih * W + iw];
                                if (gxc && wv != 0.0f) gxc[ih * W + iw] += g * wv;
                            }
                        }
                        if (pg) pg->w.data[widx] = wg * m;
                    }
                }
            }
        }
        return;
    }
    if (std::holds_alternative<ReLULayer>(l)) {
        if (gx) {
            *gx = gy;
            for (std::size_t i = 0; i < gx->numel(); ++i)
                if (x.data[i] <= 0.0f) gx->data[i] = 0.0f;
        }
        return;
    }
    // Flatten
    if (gx) {
        *gx = gy;
        gx->shape = in_shape;
    }
}

}  // namespace tlshield
