#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "aps/errors.hpp"
#include "aps/rng.hpp"

namespace aps {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace autograd {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool enabled() { return grad_mode_flag(); }

// Scoped grad-mode off: ops built inside record no graph.
struct NoGradGuard {
    NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

}  // namespace autograd

// Dense N-dimensional tensor with reverse-mode autodiff. Image-like data is
// NCHW. Values are immutable after construction except through optimizer
// updates on leaves; gradients accumulate until zero_grad().
template <class T>
struct Tensor : std::enable_shared_from_this<Tensor<T>> {
    using Ptr = std::shared_ptr<Tensor<T>>;

    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;

    // graph edges; cleared after backward consumes them
    std::vector<Ptr> parents;
    std::function<void(Tensor<T>&)> backward_fn;
    bool backward_ran = false;

    static Ptr make(Shape s, bool req_grad = false) {
        auto t = std::make_shared<Tensor<T>>();
        t->shape = std::move(s);
        t->values.assign(static_cast<std::size_t>(numel_of(t->shape)), T(0));
        t->requires_grad = req_grad;
        return t;
    }

    static Ptr from(Shape s, std::vector<T> vals, bool req_grad = false) {
        if (static_cast<std::int64_t>(vals.size()) != numel_of(s))
            throw DimensionError("tensor data length " + std::to_string(vals.size()) +
                                 " does not match shape " + shape_str(s));
        auto t = std::make_shared<Tensor<T>>();
        t->shape = std::move(s);
        t->values = std::move(vals);
        t->requires_grad = req_grad;
        return t;
    }

    static Ptr full(Shape s, T v, bool req_grad = false) {
        auto t = make(std::move(s), req_grad);
        std::fill(t->values.begin(), t->values.end(), v);
        return t;
    }

    static Ptr zeros(Shape s, bool req_grad = false) { return make(std::move(s), req_grad); }
    static Ptr ones(Shape s, bool req_grad = false) { return full(std::move(s), T(1), req_grad); }

    static Ptr randn(Shape s, Rng& rng, T mean = T(0), T stddev = T(1), bool req_grad = false) {
        auto t = make(std::move(s), req_grad);
        for (auto& v : t->values) v = static_cast<T>(rng.normal(mean, stddev));
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    T item() const {
        if (numel() != 1) throw DimensionError("item() needs a scalar tensor, got " + shape_str(shape));
        return values[0];
    }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }

    void accumulate_grad(const T* g, std::int64_t n) {
        ensure_grad();
        T* dst = grad.data();
        for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
    }
};

template <class T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

namespace detail {

template <class T>
bool any_requires_grad(const std::vector<TensorPtr<T>>& parents) {
    for (const auto& p : parents)
        if (p && p->requires_grad) return true;
    return false;
}

// Attach graph edges to a freshly computed node when grad mode is on.
template <class T>
TensorPtr<T> finish_node(TensorPtr<T> out, std::vector<TensorPtr<T>> parents,
                         std::function<void(Tensor<T>&)> bw) {
    if (autograd::enabled() && any_requires_grad(parents)) {
        out->requires_grad = true;
        out->parents = std::move(parents);
        out->backward_fn = std::move(bw);
    }
    return out;
}

template <class T>
void require_same_shape(const TensorPtr<T>& a, const TensorPtr<T>& b, const char* op) {
    if (a->shape != b->shape)
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
}

template <class T>
void require_rank4(const TensorPtr<T>& a, const char* op) {
    if (a->rank() != 4)
        throw DimensionError(std::string(op) + ": expected NCHW tensor, got " + shape_str(a->shape));
}

}  // namespace detail

// ---- reverse pass ------------------------------------------------------

// Scalar-root reverse pass. The graph is single-use: a second backward() on
// the same root is rejected; fresh forward passes accumulate into leaf grads
// until zero_grad.
template <class T>
void backward(const TensorPtr<T>& root) {
    if (root->numel() != 1)
        throw DimensionError("backward: root must be scalar, got " + shape_str(root->shape));
    if (!root->requires_grad)
        throw ApsError("backward: root does not depend on any tensor requiring grad");
    if (root->backward_ran)
        throw ApsError("backward: graph already consumed; run a fresh forward pass");
    root->backward_ran = true;

    // iterative post-order topo sort
    std::vector<Tensor<T>*> topo;
    std::unordered_set<Tensor<T>*> visited;
    std::vector<std::pair<Tensor<T>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Tensor<T>* p = node->parents[next++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Tensor<T>* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
        if (node->backward_fn) {
            // release graph edges and saved buffers as soon as they are spent
            node->backward_fn = nullptr;
            node->parents.clear();
            if (node != root.get()) node->grad = {};
        }
    }
}

// ---- elementwise -------------------------------------------------------

template <class T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::require_same_shape(a, b, "add");
    auto out = Tensor<T>::make(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->values[i] = a->values[i] + b->values[i];
    return detail::finish_node<T>(out, {a, b}, [](Tensor<T>& o) {
        const std::int64_t m = o.numel();
        if (o.parents[0]->requires_grad) o.parents[0]->accumulate_grad(o.grad.data(), m);
        if (o.parents[1]->requires_grad) o.parents[1]->accumulate_grad(o.grad.data(), m);
    });
}

template <class T>
TensorPtr<T> sub(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::require_same_shape(a, b, "sub");
    auto out = Tensor<T>::make(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->values[i] = a->values[i] - b->values[i];
    return detail::finish_node<T>(out, {a, b}, [](Tensor<T>& o) {
        const std::int64_t m = o.numel();
        if (o.parents[0]->requires_grad) o.parents[0]->accumulate_grad(o.grad.data(), m);
        if (o.parents[1]->requires_grad) {
            auto& p = *o.parents[1];
            p.ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) p.grad[i] -= o.grad[i];
        }
    });
}

template <class T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::require_same_shape(a, b, "mul");
    auto out = Tensor<T>::make(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->values[i] = a->values[i] * b->values[i];
    return detail::finish_node<T>(out, {a, b}, [](Tensor<T>& o) {
        const std::int64_t m = o.numel();
        if (o.parents[0]->requires_grad) {
            auto& p = *o.parents[0];
            p.ensure_grad();
            const T* other = o.parents[1]->values.data();
            for (std::int64_t i = 0; i < m; ++i) p.grad[i] += o.grad[i] * other[i];
        }
        if (o.parents[1]->requires_grad) {
            auto& p = *o.parents[1];
            p.ensure_grad();
            const T* other = o.parents[0]->values.data();
            for (std::int64_t i = 0; i < m; ++i) p.grad[i] += o.grad[i] * other[i];
        }
    });
}

template <class T>
TensorPtr<T> scale(const TensorPtr<T>& a, T s) {
    auto out = Tensor<T>::make(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->values[i] = a->values[i] * s;
    return detail::finish_node<T>(out, {a}, [s](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const std::int64_t m = o.numel();
        for (std::int64_t i = 0; i < m; ++i) p.grad[i] += o.grad[i] * s;
    });
}

template <class T>
TensorPtr<T> add_scalar(const TensorPtr<T>& a, T s) {
    auto out = Tensor<T>::make(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->values[i] = a->values[i] + s;
    return detail::finish_node<T>(out, {a}, [](Tensor<T>& o) {
        if (o.parents[0]->requires_grad) o.parents[0]->accumulate_grad(o.grad.data(), o.numel());
    });
}

template <class T>
TensorPtr<T> relu(const TensorPtr<T>& a) {
    auto out = Tensor<T>::make(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->values[i] = a->values[i] > T(0) ? a->values[i] : T(0);
    return detail::finish_node<T>(out, {a}, [](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const std::int64_t m = o.numel();
        // subgradient at exactly 0 is 0
        for (std::int64_t i = 0; i < m; ++i) p.grad[i] += p.values[i] > T(0) ? o.grad[i] : T(0);
    });
}

template <class T>
TensorPtr<T> leaky_relu(const TensorPtr<T>& a, T slope) {
    auto out = Tensor<T>::make(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i)
        out->values[i] = a->values[i] > T(0) ? a->values[i] : slope * a->values[i];
    return detail::finish_node<T>(out, {a}, [slope](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const std::int64_t m = o.numel();
        for (std::int64_t i = 0; i < m; ++i)
            p.grad[i] += p.values[i] > T(0) ? o.grad[i] : slope * o.grad[i];
    });
}

template <class T>
T stable_sigmoid(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

template <class T>
TensorPtr<T> sigmoid(const TensorPtr<T>& a) {
    auto out = Tensor<T>::make(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->values[i] = stable_sigmoid(a->values[i]);
    return detail::finish_node<T>(out, {a}, [](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const std::int64_t m = o.numel();
        for (std::int64_t i = 0; i < m; ++i) {
            const T y = o.values[i];
            p.grad[i] += o.grad[i] * y * (T(1) - y);
        }
    });
}

template <class T>
TensorPtr<T> tanh_op(const TensorPtr<T>& a) {
    auto out = Tensor<T>::make(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->values[i] = std::tanh(a->values[i]);
    return detail::finish_node<T>(out, {a}, [](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const std::int64_t m = o.numel();
        for (std::int64_t i = 0; i < m; ++i) {
            const T y = o.values[i];
            p.grad[i] += o.grad[i] * (T(1) - y * y);
        }
    });
}

// log(1+e^v) computed as max(v,0) + log1p(e^{-|v|}); finite for |v| up to range limits
template <class T>
TensorPtr<T> softplus(const TensorPtr<T>& a) {
    auto out = Tensor<T>::make(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const T v = a->values[i];
        out->values[i] = std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
    }
    return detail::finish_node<T>(out, {a}, [](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const std::int64_t m = o.numel();
        for (std::int64_t i = 0; i < m; ++i) p.grad[i] += o.grad[i] * stable_sigmoid(p.values[i]);
    });
}

template <class T>
TensorPtr<T> abs_op(const TensorPtr<T>& a) {
    auto out = Tensor<T>::make(a->shape);
    const std::int64_t n = a->numel();
    for (std::int64_t i = 0; i < n; ++i) out->values[i] = std::abs(a->values[i]);
    return detail::finish_node<T>(out, {a}, [](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const std::int64_t m = o.numel();
        for (std::int64_t i = 0; i < m; ++i) {
            const T x = p.values[i];
            p.grad[i] += x > T(0) ? o.grad[i] : (x < T(0) ? -o.grad[i] : T(0));
        }
    });
}

// ---- reductions --------------------------------------------------------

template <class T>
TensorPtr<T> sum_all(const TensorPtr<T>& a) {
    double acc = 0.0;
    for (const T v : a->values) acc += static_cast<double>(v);
    auto out = Tensor<T>::from({1}, {static_cast<T>(acc)});
    return detail::finish_node<T>(out, {a}, [](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = o.grad[0];
        for (auto& v : p.grad) v += g;
    });
}

template <class T>
TensorPtr<T> mean_all(const TensorPtr<T>& a) {
    if (a->numel() == 0) throw DimensionError("mean_all: empty tensor");
    double acc = 0.0;
    for (const T v : a->values) acc += static_cast<double>(v);
    const T inv = T(1) / static_cast<T>(a->numel());
    auto out = Tensor<T>::from({1}, {static_cast<T>(acc / static_cast<double>(a->numel()))});
    return detail::finish_node<T>(out, {a}, [inv](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = o.grad[0] * inv;
        for (auto& v : p.grad) v += g;
    });
}

// mean |a - b|; shared by the training loss and the evaluation metrics
template <class T>
TensorPtr<T> mean_abs_diff(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::require_same_shape(a, b, "mean_abs_diff");
    return mean_all(abs_op(sub(a, b)));
}

// ---- shape ops ---------------------------------------------------------

template <class T>
TensorPtr<T> concat_channels(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    detail::require_rank4(a, "concat_channels");
    detail::require_rank4(b, "concat_channels");
    if (a->dim(0) != b->dim(0) || a->dim(2) != b->dim(2) || a->dim(3) != b->dim(3))
        throw DimensionError("concat_channels: N/H/W mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    const std::int64_t n = a->dim(0), ca = a->dim(1), cb = b->dim(1), hw = a->dim(2) * a->dim(3);
    auto out = Tensor<T>::make({n, ca + cb, a->dim(2), a->dim(3)});
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy_n(a->values.data() + i * ca * hw, ca * hw, out->values.data() + i * (ca + cb) * hw);
        std::copy_n(b->values.data() + i * cb * hw, cb * hw,
                    out->values.data() + i * (ca + cb) * hw + ca * hw);
    }
    return detail::finish_node<T>(out, {a, b}, [n, ca, cb, hw](Tensor<T>& o) {
        for (int which = 0; which < 2; ++which) {
            auto& p = *o.parents[which];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            const std::int64_t c = which == 0 ? ca : cb;
            const std::int64_t off = which == 0 ? 0 : ca * hw;
            for (std::int64_t i = 0; i < n; ++i) {
                const T* src = o.grad.data() + i * (ca + cb) * hw + off;
                T* dst = p.grad.data() + i * c * hw;
                for (std::int64_t j = 0; j < c * hw; ++j) dst[j] += src[j];
            }
        }
    });
}

template <class T>
TensorPtr<T> slice_channels(const TensorPtr<T>& a, std::int64_t c0, std::int64_t c1) {
    detail::require_rank4(a, "slice_channels");
    if (c0 < 0 || c1 <= c0 || c1 > a->dim(1))
        throw DimensionError("slice_channels: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                             ") out of " + std::to_string(a->dim(1)) + " channels");
    const std::int64_t n = a->dim(0), c = a->dim(1), hw = a->dim(2) * a->dim(3), cs = c1 - c0;
    auto out = Tensor<T>::make({n, cs, a->dim(2), a->dim(3)});
    for (std::int64_t i = 0; i < n; ++i)
        std::copy_n(a->values.data() + (i * c + c0) * hw, cs * hw, out->values.data() + i * cs * hw);
    return detail::finish_node<T>(out, {a}, [n, c, hw, c0, cs](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) {
            const T* src = o.grad.data() + i * cs * hw;
            T* dst = p.grad.data() + (i * c + c0) * hw;
            for (std::int64_t j = 0; j < cs * hw; ++j) dst[j] += src[j];
        }
    });
}

// 2x2 non-overlapping mean; requires even H and W
template <class T>
TensorPtr<T> avg_pool2(const TensorPtr<T>& a) {
    detail::require_rank4(a, "avg_pool2");
    const std::int64_t n = a->dim(0), c = a->dim(1), h = a->dim(2), w = a->dim(3);
    if (h % 2 || w % 2)
        throw DimensionError("avg_pool2: H and W must be even, got " + shape_str(a->shape));
    const std::int64_t ho = h / 2, wo = w / 2;
    auto out = Tensor<T>::make({n, c, ho, wo});
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const T* src = a->values.data() + nc * h * w;
        T* dst = out->values.data() + nc * ho * wo;
        for (std::int64_t y = 0; y < ho; ++y)
            for (std::int64_t x = 0; x < wo; ++x)
                dst[y * wo + x] = (src[(2 * y) * w + 2 * x] + src[(2 * y) * w + 2 * x + 1] +
                                   src[(2 * y + 1) * w + 2 * x] + src[(2 * y + 1) * w + 2 * x + 1]) /
                                  T(4);
    }
    return detail::finish_node<T>(out, {a}, [n, c, h, w, ho, wo](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t nc = 0; nc < n * c; ++nc) {
            const T* g = o.grad.data() + nc * ho * wo;
            T* dst = p.grad.data() + nc * h * w;
            for (std::int64_t y = 0; y < ho; ++y)
                for (std::int64_t x = 0; x < wo; ++x) {
                    const T q = g[y * wo + x] / T(4);
                    dst[(2 * y) * w + 2 * x] += q;
                    dst[(2 * y) * w + 2 * x + 1] += q;
                    dst[(2 * y + 1) * w + 2 * x] += q;
                    dst[(2 * y + 1) * w + 2 * x + 1] += q;
                }
        }
    });
}

// Nearest-neighbor block repetition: each value repeats over an fh x fw block.
template <class T>
TensorPtr<T> tile2d(const TensorPtr<T>& a, std::int64_t fh, std::int64_t fw) {
    detail::require_rank4(a, "tile2d");
    if (fh < 1 || fw < 1) throw DimensionError("tile2d: factors must be >= 1");
    const std::int64_t n = a->dim(0), c = a->dim(1), h = a->dim(2), w = a->dim(3);
    auto out = Tensor<T>::make({n, c, h * fh, w * fw});
    const std::int64_t wo = w * fw;
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const T* src = a->values.data() + nc * h * w;
        T* dst = out->values.data() + nc * h * fh * wo;
        for (std::int64_t y = 0; y < h * fh; ++y) {
            const T* row = src + (y / fh) * w;
            for (std::int64_t x = 0; x < wo; ++x) dst[y * wo + x] = row[x / fw];
        }
    }
    return detail::finish_node<T>(out, {a}, [n, c, h, w, fh, fw](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const std::int64_t wo = w * fw;
        for (std::int64_t nc = 0; nc < n * c; ++nc) {
            const T* g = o.grad.data() + nc * h * fh * wo;
            T* dst = p.grad.data() + nc * h * w;
            for (std::int64_t y = 0; y < h * fh; ++y) {
                T* row = dst + (y / fh) * w;
                for (std::int64_t x = 0; x < wo; ++x) row[x / fw] += g[y * wo + x];
            }
        }
    });
}

template <class T>
TensorPtr<T> global_avg_pool(const TensorPtr<T>& a) {
    detail::require_rank4(a, "global_avg_pool");
    const std::int64_t n = a->dim(0), c = a->dim(1), hw = a->dim(2) * a->dim(3);
    auto out = Tensor<T>::make({n, c, 1, 1});
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        double acc = 0.0;
        const T* src = a->values.data() + nc * hw;
        for (std::int64_t j = 0; j < hw; ++j) acc += static_cast<double>(src[j]);
        out->values[nc] = static_cast<T>(acc / static_cast<double>(hw));
    }
    return detail::finish_node<T>(out, {a}, [n, c, hw](Tensor<T>& o) {
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

// Repeat a (1,C,H,W) tensor n times along the batch axis.
template <class T>
TensorPtr<T> broadcast_batch(const TensorPtr<T>& a, std::int64_t n) {
    detail::require_rank4(a, "broadcast_batch");
    if (a->dim(0) != 1) throw DimensionError("broadcast_batch: expected batch 1, got " + shape_str(a->shape));
    const std::int64_t chw = a->dim(1) * a->dim(2) * a->dim(3);
    auto out = Tensor<T>::make({n, a->dim(1), a->dim(2), a->dim(3)});
    for (std::int64_t i = 0; i < n; ++i)
        std::copy_n(a->values.data(), chw, out->values.data() + i * chw);
    return detail::finish_node<T>(out, {a}, [n, chw](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) {
            const T* g = o.grad.data() + i * chw;
            for (std::int64_t j = 0; j < chw; ++j) p.grad[j] += g[j];
        }
    });
}

// Copy that drops graph history.
template <class T>
TensorPtr<T> detach(const TensorPtr<T>& a) {
    return Tensor<T>::from(a->shape, a->values);
}

// ---- dropout -----------------------------------------------------------

// Training mode zeroes each element with probability `rate` and rescales the
// survivors by 1/(1-rate); eval mode is the identity.
template <class T>
TensorPtr<T> dropout(const TensorPtr<T>& a, double rate, bool training, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("dropout: rate must be in [0,1), got " + std::to_string(rate));
    if (!training || rate == 0.0) {
        auto out = Tensor<T>::from(a->shape, a->values);
        return detail::finish_node<T>(out, {a}, [](Tensor<T>& o) {
            if (o.parents[0]->requires_grad) o.parents[0]->accumulate_grad(o.grad.data(), o.numel());
        });
    }
    const std::int64_t n = a->numel();
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    auto mask = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
    auto out = Tensor<T>::make(a->shape);
    for (std::int64_t i = 0; i < n; ++i) {
        const T m = rng.uniform() < rate ? T(0) : keep_scale;
        (*mask)[i] = m;
        out->values[i] = a->values[i] * m;
    }
    return detail::finish_node<T>(out, {a}, [mask](Tensor<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const std::int64_t m = o.numel();
        for (std::int64_t i = 0; i < m; ++i) p.grad[i] += o.grad[i] * (*mask)[i];
    });
}

}  // namespace aps
