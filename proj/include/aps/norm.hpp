#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "aps/conv.hpp"
#include "aps/tensor.hpp"

namespace aps {

// Region-specific affine parameters applied after instance normalization.
// For the per-channel (AdaIN) form scale/bias are (N,C); for the patch form
// (AdaPN) they are full NCHW maps matching the content feature.
template <class T>
struct StyleParams {
    TensorPtr<T> scale;
    TensorPtr<T> bias;
};

template <class T>
struct InstanceStats {
    TensorPtr<T> mean;  // (N,C)
    TensorPtr<T> std;   // (N,C), sqrt(var + eps)
    T eps;
};

namespace normdetail {

template <class T>
void spatial_moments(const Tensor<T>& x, std::vector<T>& mean, std::vector<T>& var) {
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    mean.resize(static_cast<std::size_t>(n * c));
    var.resize(static_cast<std::size_t>(n * c));
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const T* src = x.values.data() + nc * hw;
        double acc = 0.0;
        for (std::int64_t j = 0; j < hw; ++j) acc += static_cast<double>(src[j]);
        const double mu = acc / static_cast<double>(hw);
        double vacc = 0.0;
        for (std::int64_t j = 0; j < hw; ++j) {
            const double d = static_cast<double>(src[j]) - mu;
            vacc += d * d;
        }
        mean[nc] = static_cast<T>(mu);
        var[nc] = static_cast<T>(vacc / static_cast<double>(hw));
    }
}

}  // namespace normdetail

// Spatial mean per (sample, channel).
template <class T>
TensorPtr<T> instance_mean(const TensorPtr<T>& x) {
    detail::require_rank4(x, "instance_mean");
    const std::int64_t n = x->dim(0), c = x->dim(1), hw = x->dim(2) * x->dim(3);
    if (hw < 1) throw DimensionError("instance_mean: empty spatial extent");
    std::vector<T> mean, var;
    normdetail::spatial_moments(*x, mean, var);
    auto out = Tensor<T>::from({n, c}, std::move(mean));
    return detail::finish_node<T>(out, {x}, [n, c, hw](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t nc = 0; nc < n * c; ++nc) {
            const T g = o.grad[nc] / static_cast<T>(hw);
            T* dst = p.grad.data() + nc * hw;
            for (std::int64_t j = 0; j < hw; ++j) dst[j] += g;
        }
    });
}

// Spatial std per (sample, channel): sqrt(population variance + eps).
template <class T>
TensorPtr<T> instance_std(const TensorPtr<T>& x, T eps) {
    detail::require_rank4(x, "instance_std");
    const std::int64_t n = x->dim(0), c = x->dim(1), hw = x->dim(2) * x->dim(3);
    if (hw < 1) throw DimensionError("instance_std: empty spatial extent");
    std::vector<T> mean, var;
    normdetail::spatial_moments(*x, mean, var);
    auto saved_mean = std::make_shared<std::vector<T>>(mean);
    std::vector<T> sd(static_cast<std::size_t>(n * c));
    for (std::int64_t nc = 0; nc < n * c; ++nc) sd[nc] = std::sqrt(var[nc] + eps);
    auto out = Tensor<T>::from({n, c}, std::move(sd));
    return detail::finish_node<T>(out, {x}, [saved_mean, n, c, hw](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        // d sigma / d x_j = (x_j - mu) / (HW * sigma)
        for (std::int64_t nc = 0; nc < n * c; ++nc) {
            const T coeff = o.grad[nc] / (static_cast<T>(hw) * o.values[nc]);
            const T mu = (*saved_mean)[nc];
            const T* xv = p.values.data() + nc * hw;
            T* dst = p.grad.data() + nc * hw;
            for (std::int64_t j = 0; j < hw; ++j) dst[j] += coeff * (xv[j] - mu);
        }
    });
}

template <class T>
InstanceStats<T> instance_stats(const TensorPtr<T>& x, T eps) {
    return {instance_mean(x), instance_std(x, eps), eps};
}

// Instance normalization without affine terms, fused forward/backward.
template <class T>
TensorPtr<T> in_norm(const TensorPtr<T>& x, T eps) {
    detail::require_rank4(x, "in_norm");
    const std::int64_t n = x->dim(0), c = x->dim(1), hw = x->dim(2) * x->dim(3);
    if (hw < 1) throw DimensionError("in_norm: empty spatial extent");
    std::vector<T> mean, var;
    normdetail::spatial_moments(*x, mean, var);
    auto stats = std::make_shared<std::vector<T>>();  // mean then invstd
    stats->resize(static_cast<std::size_t>(2 * n * c));
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        (*stats)[nc] = mean[nc];
        (*stats)[n * c + nc] = T(1) / std::sqrt(var[nc] + eps);
    }
    auto out = Tensor<T>::make(x->shape);
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const T mu = (*stats)[nc], is = (*stats)[n * c + nc];
        const T* src = x->values.data() + nc * hw;
        T* dst = out->values.data() + nc * hw;
        for (std::int64_t j = 0; j < hw; ++j) dst[j] = (src[j] - mu) * is;
    }
    return detail::finish_node<T>(out, {x}, [stats, n, c, hw](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T invhw = T(1) / static_cast<T>(hw);
        for (std::int64_t nc = 0; nc < n * c; ++nc) {
            const T mu = (*stats)[nc], is = (*stats)[n * c + nc];
            const T* xv = p.values.data() + nc * hw;
            const T* g = o.grad.data() + nc * hw;
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::int64_t j = 0; j < hw; ++j) {
                const double xh = static_cast<double>((xv[j] - mu) * is);
                sum_g += static_cast<double>(g[j]);
                sum_gx += static_cast<double>(g[j]) * xh;
            }
            const T mg = static_cast<T>(sum_g) * invhw;
            const T mgx = static_cast<T>(sum_gx) * invhw;
            T* dst = p.grad.data() + nc * hw;
            for (std::int64_t j = 0; j < hw; ++j) {
                const T xh = (xv[j] - mu) * is;
                dst[j] += is * (g[j] - mg - xh * mgx);
            }
        }
    });
}

// out[n,c,i,j] = scale[n,c] * x[n,c,i,j] + bias[n,c]
template <class T>
TensorPtr<T> channel_affine(const TensorPtr<T>& x, const TensorPtr<T>& s, const TensorPtr<T>& b) {
    detail::require_rank4(x, "channel_affine");
    const std::int64_t n = x->dim(0), c = x->dim(1), hw = x->dim(2) * x->dim(3);
    const Shape want{n, c};
    if (s->shape != want || b->shape != want)
        throw DimensionError("channel_affine: style shape " + shape_str(s->shape) + "/" +
                             shape_str(b->shape) + " != " + shape_str(want));
    auto out = Tensor<T>::make(x->shape);
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const T sv = s->values[nc], bv = b->values[nc];
        const T* src = x->values.data() + nc * hw;
        T* dst = out->values.data() + nc * hw;
        for (std::int64_t j = 0; j < hw; ++j) dst[j] = sv * src[j] + bv;
    }
    return detail::finish_node<T>(out, {x, s, b}, [n, c, hw](Tensor<T>& o) {
        auto& xp = *o.parents[0];
        auto& sp = *o.parents[1];
        auto& bp = *o.parents[2];
        if (xp.requires_grad) xp.ensure_grad();
        if (sp.requires_grad) sp.ensure_grad();
        if (bp.requires_grad) bp.ensure_grad();
        for (std::int64_t nc = 0; nc < n * c; ++nc) {
            const T* g = o.grad.data() + nc * hw;
            if (xp.requires_grad) {
                const T sv = sp.values[nc];
                T* dst = xp.grad.data() + nc * hw;
                for (std::int64_t j = 0; j < hw; ++j) dst[j] += g[j] * sv;
            }
            if (sp.requires_grad) {
                const T* xv = xp.values.data() + nc * hw;
                double acc = 0.0;
                for (std::int64_t j = 0; j < hw; ++j) acc += static_cast<double>(g[j]) * xv[j];
                sp.grad[nc] += static_cast<T>(acc);
            }
            if (bp.requires_grad) {
                double acc = 0.0;
                for (std::int64_t j = 0; j < hw; ++j) acc += static_cast<double>(g[j]);
                bp.grad[nc] += static_cast<T>(acc);
            }
        }
    });
}

// Per-channel adaptive normalization: instance-normalize, then apply the
// channel-wise style affine.
template <class T>
TensorPtr<T> adain(const TensorPtr<T>& x, const StyleParams<T>& style, T eps) {
    return channel_affine(in_norm(x, eps), style.scale, style.bias);
}

// Patch variant: the affine parameters vary per spatial position. The
// normalization statistics are the same per-(n,c) instance statistics as the
// per-channel form; only scale and bias are regional.
template <class T>
TensorPtr<T> adapn(const TensorPtr<T>& x, const StyleParams<T>& style, T eps) {
    detail::require_same_shape(x, style.scale, "adapn scale");
    detail::require_same_shape(x, style.bias, "adapn bias");
    return add(mul(in_norm(x, eps), style.scale), style.bias);
}

// Embed the appearance representation with a 1x1 conv into 2*C channels
// (scale half first), then tile by block repetition up to the content
// feature's spatial size. pooled=true collapses the appearance spatially
// first, which turns the result into a spatially constant style.
template <class T>
StyleParams<T> make_style(const TensorPtr<T>& appearance, std::int64_t target_h,
                          std::int64_t target_w, const TensorPtr<T>& embed_w,
                          const TensorPtr<T>& embed_b, bool pooled) {
    auto base = pooled ? global_avg_pool(appearance) : appearance;
    auto e = conv2d(base, embed_w, embed_b, 1, 0);
    const std::int64_t c2 = e->dim(1);
    if (c2 % 2)
        throw DimensionError("make_style: embed output channels must be even, got " +
                             std::to_string(c2));
    auto s = slice_channels(e, 0, c2 / 2);
    auto b = slice_channels(e, c2 / 2, c2);
    const std::int64_t h0 = s->dim(2), w0 = s->dim(3);
    if (target_h % h0 || target_w % w0)
        throw DimensionError("make_style: target " + std::to_string(target_h) + "x" +
                             std::to_string(target_w) + " is not a multiple of style grid " +
                             std::to_string(h0) + "x" + std::to_string(w0));
    const std::int64_t fh = target_h / h0, fw = target_w / w0;
    if (fh > 1 || fw > 1) {
        s = tile2d(s, fh, fw);
        b = tile2d(b, fh, fw);
    }
    return {s, b};
}

}  // namespace aps
