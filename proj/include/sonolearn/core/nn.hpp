// Copyright (c) 2026 sonolearn contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sonolearn/core/autograd.hpp"
#include "sonolearn/core/rng.hpp"

namespace sonolearn {

/// Named parameter list; Vars share storage with the owning module.
template <typename T>
using ParamList = std::vector<std::pair<std::string, Var<T>>>;

template <typename T>
Tensor<T> he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal(0.0, std_dev));
    return t;
}

template <typename T>
struct Conv2dLayer {
    Var<T> w, b;
    int stride = 1, pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(int in_ch, int out_ch, int kernel, int stride_, int pad_, Rng& rng)
        : w(parameter(he_normal<T>({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng))),
          b(parameter(Tensor<T>({out_ch}))),
          stride(stride_),
          pad(pad_) {}

    Var<T> operator()(const Var<T>& x) const { return conv2d(x, w, b, stride, pad); }

    void collect(const std::string& prefix, ParamList<T>& out) {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

template <typename T>
struct LinearLayer {
    Var<T> w, b;

    LinearLayer() = default;
    LinearLayer(int in_dim, int out_dim, Rng& rng)
        : w(parameter(he_normal<T>({out_dim, in_dim}, in_dim, rng))), b(parameter(Tensor<T>({out_dim}))) {}

    Var<T> operator()(const Var<T>& x) const { return linear(x, w, b); }

    void collect(const std::string& prefix, ParamList<T>& out) {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

/// SGD with classical momentum: v <- mu*v + g, p <- p - lr*v.
template <typename T>
class SgdOptimizer {
public:
    SgdOptimizer(ParamList<T> params, double momentum) : params_(std::move(params)), momentum_(momentum) {
        for (auto& [name, var] : params_) buffers_.emplace(name, Tensor<T>(var.value().shape()));
    }

    void step(double lr) {
        for (auto& [name, var] : params_) {
            if (var.grad().shape() != var.value().shape()) continue;  // no grad this step
            Tensor<T>& buf = buffers_.at(name);
            Tensor<T>& val = var.value();
            const Tensor<T>& g = var.grad();
            for (size_t i = 0; i < val.numel(); ++i) {
                buf[i] = static_cast<T>(momentum_) * buf[i] + g[i];
                val[i] -= static_cast<T>(lr) * buf[i];
            }
        }
    }

    void zero_grad() {
        for (auto& [name, var] : params_) var.zero_grad();
    }

    const std::map<std::string, Tensor<T>>& buffers() const { return buffers_; }
    std::map<std::string, Tensor<T>>& buffers() { return buffers_; }

private:
    ParamList<T> params_;
    double momentum_;
    std::map<std::string, Tensor<T>> buffers_;
};

}  // namespace sonolearn
