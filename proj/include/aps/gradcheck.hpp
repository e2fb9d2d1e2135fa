#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "aps/tensor.hpp"

namespace aps {

// Central finite differences vs reverse-mode for a deterministic scalar
// function of the inputs. Intended for double precision; returns the worst
// |analytic - fd| / max(|analytic|, |fd|, 1).
template <class T>
double grad_check(const std::function<TensorPtr<T>(const std::vector<TensorPtr<T>>&)>& f,
                  const std::vector<TensorPtr<T>>& inputs, double eps) {
    for (auto& in : inputs) {
        in->requires_grad = true;
        in->zero_grad();
    }
    auto loss = f(inputs);
    if (loss->numel() != 1) throw DimensionError("grad_check: f must return a scalar");
    if (!std::isfinite(static_cast<double>(loss->item())))
        throw NumericError("grad_check: f evaluated to a non-finite value");
    const bool connected = loss->requires_grad;
    if (connected) backward(loss);

    double worst = 0.0;
    for (auto& in : inputs) {
        in->ensure_grad();
        for (std::int64_t i = 0; i < in->numel(); ++i) {
            const T saved = in->values[i];
            double fplus, fminus;
            {
                autograd::NoGradGuard ng;
                in->values[i] = saved + static_cast<T>(eps);
                fplus = static_cast<double>(f(inputs)->item());
                in->values[i] = saved - static_cast<T>(eps);
                fminus = static_cast<double>(f(inputs)->item());
                in->values[i] = saved;
            }
            if (!std::isfinite(fplus) || !std::isfinite(fminus))
                throw NumericError("grad_check: non-finite value during finite differencing");
            const double fd = (fplus - fminus) / (2.0 * eps);
            const double an = static_cast<double>(in->grad[i]);
            const double denom = std::max({std::abs(an), std::abs(fd), 1.0});
            worst = std::max(worst, std::abs(an - fd) / denom);
        }
    }
    return worst;
}

}  // namespace aps
