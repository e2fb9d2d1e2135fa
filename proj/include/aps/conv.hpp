#pragma once

#include <memory>
#include <string>
#include <vector>

#include "aps/blas.hpp"
#include "aps/tensor.hpp"

namespace aps {
namespace convdetail {

struct Geom {
    std::int64_t n, c_in, h, w;      // input image grid
    std::int64_t kh, kw, stride, pad;
    std::int64_t ho, wo;             // window grid
};

// rows[j, (ci,kh,kw)] for window j = (n,ho,wo); out-of-image taps are zero.
template <class T>
void im2row(const T* src, const Geom& g, T* rows) {
    const std::int64_t ck = g.c_in * g.kh * g.kw;
    for (std::int64_t n = 0; n < g.n; ++n) {
        const T* img = src + n * g.c_in * g.h * g.w;
        T* rbase = rows + n * g.ho * g.wo * ck;
        for (std::int64_t ho = 0; ho < g.ho; ++ho) {
            const std::int64_t ih0 = ho * g.stride - g.pad;
            for (std::int64_t wo = 0; wo < g.wo; ++wo) {
                const std::int64_t iw0 = wo * g.stride - g.pad;
                T* row = rbase + (ho * g.wo + wo) * ck;
                for (std::int64_t ci = 0; ci < g.c_in; ++ci) {
                    const T* chan = img + ci * g.h * g.w;
                    for (std::int64_t kh = 0; kh < g.kh; ++kh) {
                        const std::int64_t ih = ih0 + kh;
                        T* dst = row + (ci * g.kh + kh) * g.kw;
                        if (ih < 0 || ih >= g.h) {
                            for (std::int64_t kw = 0; kw < g.kw; ++kw) dst[kw] = T(0);
                            continue;
                        }
                        const T* line = chan + ih * g.w;
                        for (std::int64_t kw = 0; kw < g.kw; ++kw) {
                            const std::int64_t iw = iw0 + kw;
                            dst[kw] = (iw >= 0 && iw < g.w) ? line[iw] : T(0);
                        }
                    }
                }
            }
        }
    }
}

// adjoint of im2row: scatter-add row taps back onto the image grid
template <class T>
void row2im_add(const T* rows, const Geom& g, T* dst) {
    const std::int64_t ck = g.c_in * g.kh * g.kw;
    for (std::int64_t n = 0; n < g.n; ++n) {
        T* img = dst + n * g.c_in * g.h * g.w;
        const T* rbase = rows + n * g.ho * g.wo * ck;
        for (std::int64_t ho = 0; ho < g.ho; ++ho) {
            const std::int64_t ih0 = ho * g.stride - g.pad;
            for (std::int64_t wo = 0; wo < g.wo; ++wo) {
                const std::int64_t iw0 = wo * g.stride - g.pad;
                const T* row = rbase + (ho * g.wo + wo) * ck;
                for (std::int64_t ci = 0; ci < g.c_in; ++ci) {
                    T* chan = img + ci * g.h * g.w;
                    for (std::int64_t kh = 0; kh < g.kh; ++kh) {
                        const std::int64_t ih = ih0 + kh;
                        if (ih < 0 || ih >= g.h) continue;
                        T* line = chan + ih * g.w;
                        const T* taps = row + (ci * g.kh + kh) * g.kw;
                        for (std::int64_t kw = 0; kw < g.kw; ++kw) {
                            const std::int64_t iw = iw0 + kw;
                            if (iw >= 0 && iw < g.w) line[iw] += taps[kw];
                        }
                    }
                }
            }
        }
    }
}

// [N][C][HW] -> [N*HW][C]
template <class T>
void nchw_to_rows(const T* src, std::int64_t n, std::int64_t c, std::int64_t hw, T* rows) {
    for (std::int64_t i = 0; i < n; ++i) {
        const T* img = src + i * c * hw;
        T* out = rows + i * hw * c;
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t j = 0; j < hw; ++j) out[j * c + ch] = img[ch * hw + j];
    }
}

// [N*HW][C] -> [N][C][HW], plus optional per-channel bias
template <class T>
void rows_to_nchw(const T* rows, std::int64_t n, std::int64_t c, std::int64_t hw, const T* bias,
                  T* dst) {
    for (std::int64_t i = 0; i < n; ++i) {
        const T* in = rows + i * hw * c;
        T* img = dst + i * c * hw;
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T b = bias ? bias[ch] : T(0);
            for (std::int64_t j = 0; j < hw; ++j) img[ch * hw + j] = in[j * c + ch] + b;
        }
    }
}

template <class T>
void rows_to_nchw_add(const T* rows, std::int64_t n, std::int64_t c, std::int64_t hw, T* dst) {
    for (std::int64_t i = 0; i < n; ++i) {
        const T* in = rows + i * hw * c;
        T* img = dst + i * c * hw;
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t j = 0; j < hw; ++j) img[ch * hw + j] += in[j * c + ch];
    }
}

}  // namespace convdetail

// 2D cross-correlation, weight [Co,Ci,KH,KW], optional bias [Co].
// Lowered to (im2row) . (weight^T) so the GEMM runs in its tall orientation.
template <class T>
TensorPtr<T> conv2d(const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& b,
                    std::int64_t stride, std::int64_t pad) {
    detail::require_rank4(x, "conv2d input");
    detail::require_rank4(w, "conv2d weight");
    if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
    if (pad < 0) throw DimensionError("conv2d: padding must be >= 0");
    const std::int64_t n = x->dim(0), ci = x->dim(1), h = x->dim(2), wd = x->dim(3);
    const std::int64_t co = w->dim(0), kh = w->dim(2), kw = w->dim(3);
    if (w->dim(1) != ci)
        throw DimensionError("conv2d: input channel axis " + std::to_string(ci) +
                             " != weight input axis " + std::to_string(w->dim(1)));
    if (b && (b->rank() != 1 || b->dim(0) != co))
        throw DimensionError("conv2d: bias shape " + shape_str(b->shape) + " != (" +
                             std::to_string(co) + ")");
    const std::int64_t ho = (h + 2 * pad - kh) / stride + 1;
    const std::int64_t wo = (wd + 2 * pad - kw) / stride + 1;
    if (h + 2 * pad < kh || wd + 2 * pad < kw || ho <= 0 || wo <= 0)
        throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                             " does not fit input " + shape_str(x->shape) + " with pad " +
                             std::to_string(pad));

    const convdetail::Geom g{n, ci, h, wd, kh, kw, stride, pad, ho, wo};
    const std::int64_t jrows = n * ho * wo;
    const std::int64_t ck = ci * kh * kw;

    auto rows = std::make_shared<std::vector<T>>(static_cast<std::size_t>(jrows * ck));
    convdetail::im2row(x->values.data(), g, rows->data());

    // weight^T once per call: [ck x co]
    std::vector<T> wt(static_cast<std::size_t>(ck * co));
    for (std::int64_t o = 0; o < co; ++o)
        for (std::int64_t k = 0; k < ck; ++k) wt[k * co + o] = w->values[o * ck + k];

    std::vector<T> out_rows(static_cast<std::size_t>(jrows * co));
    gemm(false, jrows, co, ck, rows->data(), wt.data(), out_rows.data(), false);

    auto out = Tensor<T>::make({n, co, ho, wo});
    convdetail::rows_to_nchw(out_rows.data(), n, co, ho * wo, b ? b->values.data() : nullptr,
                             out->values.data());

    if (!(autograd::enabled() && (x->requires_grad || w->requires_grad || (b && b->requires_grad))))
        return out;

    std::vector<TensorPtr<T>> parents = b ? std::vector<TensorPtr<T>>{x, w, b}
                                          : std::vector<TensorPtr<T>>{x, w};
    return detail::finish_node<T>(
        out, std::move(parents), [rows, g, jrows, ck, co](Tensor<T>& o) {
            auto& xp = *o.parents[0];
            auto& wp = *o.parents[1];
            Tensor<T>* bp = o.parents.size() > 2 ? o.parents[2].get() : nullptr;

            std::vector<T> dout_rows(static_cast<std::size_t>(jrows * co));
            convdetail::nchw_to_rows(o.grad.data(), g.n, co, g.ho * g.wo, dout_rows.data());

            if (wp.requires_grad) {
                // dW^T = rows^T . dout_rows, then fold back to [co x ck]
                std::vector<T> dwt(static_cast<std::size_t>(ck * co));
                gemm(true, ck, co, jrows, rows->data(), dout_rows.data(), dwt.data(), false);
                wp.ensure_grad();
                for (std::int64_t o2 = 0; o2 < co; ++o2)
                    for (std::int64_t k = 0; k < ck; ++k) wp.grad[o2 * ck + k] += dwt[k * co + o2];
            }
            if (bp && bp->requires_grad) {
                bp->ensure_grad();
                for (std::int64_t j = 0; j < jrows; ++j) {
                    const T* r = dout_rows.data() + j * co;
                    for (std::int64_t o2 = 0; o2 < co; ++o2) bp->grad[o2] += r[o2];
                }
            }
            if (xp.requires_grad) {
                std::vector<T> drows(static_cast<std::size_t>(jrows * ck));
                gemm(false, jrows, ck, co, dout_rows.data(), wp.values.data(), drows.data(), false);
                xp.ensure_grad();
                convdetail::row2im_add(drows.data(), g, xp.grad.data());
            }
        });
}

// Transposed convolution (adjoint of conv2d over the image axes).
// Weight layout [Ci,Co,KH,KW]; output is (H-1)*stride - 2*pad + KH tall.
template <class T>
TensorPtr<T> deconv2d(const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& b,
                      std::int64_t stride, std::int64_t pad) {
    detail::require_rank4(x, "deconv2d input");
    detail::require_rank4(w, "deconv2d weight");
    if (stride < 1) throw DimensionError("deconv2d: stride must be >= 1");
    if (pad < 0) throw DimensionError("deconv2d: padding must be >= 0");
    const std::int64_t n = x->dim(0), ci = x->dim(1), h = x->dim(2), wd = x->dim(3);
    const std::int64_t co = w->dim(1), kh = w->dim(2), kw = w->dim(3);
    if (w->dim(0) != ci)
        throw DimensionError("deconv2d: input channel axis " + std::to_string(ci) +
                             " != weight input axis " + std::to_string(w->dim(0)));
    if (b && (b->rank() != 1 || b->dim(0) != co))
        throw DimensionError("deconv2d: bias shape " + shape_str(b->shape) + " != (" +
                             std::to_string(co) + ")");
    const std::int64_t ho = (h - 1) * stride - 2 * pad + kh;
    const std::int64_t wo = (wd - 1) * stride - 2 * pad + kw;
    if (ho <= 0 || wo <= 0)
        throw DimensionError("deconv2d: output size non-positive for input " + shape_str(x->shape) +
                             ", kernel " + std::to_string(kh) + ", stride " + std::to_string(stride) +
                             ", pad " + std::to_string(pad));

    // geometry of the adjoint conv whose input grid is this op's output
    const convdetail::Geom g{n, co, ho, wo, kh, kw, stride, pad, h, wd};
    const std::int64_t jrows = n * h * wd;
    const std::int64_t ck = co * kh * kw;

    auto in_rows = std::make_shared<std::vector<T>>(static_cast<std::size_t>(jrows * ci));
    convdetail::nchw_to_rows(x->values.data(), n, ci, h * wd, in_rows->data());

    std::vector<T> prod(static_cast<std::size_t>(jrows * ck));
    gemm(false, jrows, ck, ci, in_rows->data(), w->values.data(), prod.data(), false);

    auto out = Tensor<T>::make({n, co, ho, wo});
    convdetail::row2im_add(prod.data(), g, out->values.data());
    if (b) {
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t o2 = 0; o2 < co; ++o2) {
                T* chan = out->values.data() + (i * co + o2) * ho * wo;
                const T bias = b->values[o2];
                for (std::int64_t j = 0; j < ho * wo; ++j) chan[j] += bias;
            }
    }

    if (!(autograd::enabled() && (x->requires_grad || w->requires_grad || (b && b->requires_grad))))
        return out;

    std::vector<TensorPtr<T>> parents = b ? std::vector<TensorPtr<T>>{x, w, b}
                                          : std::vector<TensorPtr<T>>{x, w};
    return detail::finish_node<T>(
        out, std::move(parents), [in_rows, g, jrows, ck, ci, co](Tensor<T>& o) {
            auto& xp = *o.parents[0];
            auto& wp = *o.parents[1];
            Tensor<T>* bp = o.parents.size() > 2 ? o.parents[2].get() : nullptr;

            std::vector<T> dprod(static_cast<std::size_t>(jrows * ck));
            convdetail::im2row(o.grad.data(), g, dprod.data());

            if (wp.requires_grad) {
                // dW = in_rows^T . dprod lands directly in the [ci x ck] layout
                std::vector<T> dw(static_cast<std::size_t>(ci * ck));
                gemm(true, ci, ck, jrows, in_rows->data(), dprod.data(), dw.data(), false);
                wp.ensure_grad();
                for (std::size_t k = 0; k < dw.size(); ++k) wp.grad[k] += dw[k];
            }
            if (bp && bp->requires_grad) {
                bp->ensure_grad();
                const std::int64_t hw = g.h * g.w;
                for (std::int64_t i = 0; i < g.n; ++i)
                    for (std::int64_t o2 = 0; o2 < co; ++o2) {
                        const T* chan = o.grad.data() + (i * co + o2) * hw;
                        double acc = 0.0;
                        for (std::int64_t j = 0; j < hw; ++j) acc += static_cast<double>(chan[j]);
                        bp->grad[o2] += static_cast<T>(acc);
                    }
            }
            if (xp.requires_grad) {
                // d_in = dprod . w^T with w reshaped [ci x ck]
                std::vector<T> wt(static_cast<std::size_t>(ck * ci));
                for (std::int64_t c = 0; c < ci; ++c)
                    for (std::int64_t k = 0; k < ck; ++k) wt[k * ci + c] = wp.values[c * ck + k];
                std::vector<T> din_rows(static_cast<std::size_t>(jrows * ci));
                gemm(false, jrows, ci, ck, dprod.data(), wt.data(), din_rows.data(), false);
                xp.ensure_grad();
                convdetail::rows_to_nchw_add(din_rows.data(), g.n, ci, jrows / g.n, xp.grad.data());
            }
        });
}

template <class T>
TensorPtr<T> conv2d(const TensorPtr<T>& x, const TensorPtr<T>& w, std::int64_t stride,
                    std::int64_t pad) {
    return conv2d<T>(x, w, nullptr, stride, pad);
}

template <class T>
TensorPtr<T> deconv2d(const TensorPtr<T>& x, const TensorPtr<T>& w, std::int64_t stride,
                      std::int64_t pad) {
    return deconv2d<T>(x, w, nullptr, stride, pad);
}

}  // namespace aps
