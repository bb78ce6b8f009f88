// Copyright (c) 2026 sonolearn contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sonolearn/core/errors.hpp"
#include "sonolearn/core/tensor.hpp"

namespace sonolearn {

// Reverse-mode automatic differentiation on Tensor<T>. Each op records a
// closure that accumulates into its parents' gradients. Templated on the
// scalar type so gradient-check tests can run the whole stack in double.

namespace detail {
inline thread_local int no_grad_depth = 0;
}

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Disables graph construction within scope (inference / evaluation paths).
struct NoGradGuard {
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    void ensure_grad() {
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> v, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(v);
        node_->requires_grad = requires_grad && grad_enabled();
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    void zero_grad() {
        if (node_) node_->grad = Tensor<T>();
    }

    std::shared_ptr<Node<T>> node() const { return node_; }

    static Var from_node(std::shared_ptr<Node<T>> n) {
        Var v;
        v.node_ = std::move(n);
        return v;
    }

private:
    std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(Tensor<T> v) {
    return Var<T>(std::move(v), false);
}

template <typename T>
Var<T> parameter(Tensor<T> v) {
    return Var<T>(std::move(v), true);
}

namespace detail {

template <typename T, typename Backward>
Var<T> make_op(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents, Backward&& bw) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    if (grad_enabled()) {
        for (const auto& p : parents)
            if (p && p->requires_grad) {
                n->requires_grad = true;
                break;
            }
        if (n->requires_grad) {
            n->parents = std::move(parents);
            n->backprop = std::forward<Backward>(bw);
        }
    }
    return Var<T>::from_node(std::move(n));
}

template <typename T>
void accumulate(const std::shared_ptr<Node<T>>& p, const Tensor<T>& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    T* dst = p->grad.data();
    const T* src = g.data();
    for (size_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar root.
template <typename T>
void backward(const Var<T>& root) {
    if (root.value().numel() != 1)
        throw ShapeError("backward: root must be scalar, got " + root.value().shape_str());
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx == 0 && seen.count(n)) {
            stack.pop_back();
            continue;
        }
        if (idx < n->parents.size()) {
            Node<T>* next = n->parents[idx++].get();
            if (next && next->requires_grad && !seen.count(next)) stack.emplace_back(next, 0);
        } else {
            seen.insert(n);
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->ensure_grad();
    root.node()->grad.fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value()))
        throw ShapeError("add: shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
    Tensor<T> out(a.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<T>(std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
        detail::accumulate(pa, n.grad);
        detail::accumulate(pb, n.grad);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value())) throw ShapeError("sub: shape mismatch");
    Tensor<T> out(a.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<T>(std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
        detail::accumulate(pa, n.grad);
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i) pb->grad[i] -= n.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value())) throw ShapeError("mul: shape mismatch");
    Tensor<T> out(a.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<T>(std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i) pa->grad[i] += n.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i) pb->grad[i] += n.grad[i] * pa->value[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out(a.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * s;
    auto pa = a.node();
    return detail::make_op<T>(std::move(out), {pa}, [pa, s](Node<T>& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < n.grad.numel(); ++i) pa->grad[i] += n.grad[i] * s;
    });
}

/// Elementwise product with a constant mask (no gradient to the mask).
template <typename T>
Var<T> mul_mask(const Var<T>& a, Tensor<T> mask) {
    if (!a.value().same_shape(mask)) throw ShapeError("mul_mask: shape mismatch");
    Tensor<T> out(a.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * mask[i];
    auto pa = a.node();
    return detail::make_op<T>(std::move(out), {pa}, [pa, m = std::move(mask)](Node<T>& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < n.grad.numel(); ++i) pa->grad[i] += n.grad[i] * m[i];
    });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
    Tensor<T> out(a.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] > T(0) ? a.value()[i] : T(0);
    auto pa = a.node();
    return detail::make_op<T>(std::move(out), {pa}, [pa](Node<T>& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < n.grad.numel(); ++i)
            if (pa->value[i] > T(0)) pa->grad[i] += n.grad[i];
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    Tensor<T> out(a.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) {
        const T z = a.value()[i];
        out[i] = z >= T(0) ? T(1) / (T(1) + std::exp(-z))
                           : std::exp(z) / (T(1) + std::exp(z));
    }
    auto pa = a.node();
    return detail::make_op<T>(std::move(out), {pa}, [pa](Node<T>& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < n.grad.numel(); ++i) {
            const T y = n.value[i];
            pa->grad[i] += n.grad[i] * y * (T(1) - y);
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// C[M,N] = A[M,K] * B[K,N]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw ShapeError("matmul: incompatible shapes " + av.shape_str() + " x " + bv.shape_str());
    const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor<T> out({m, n});
    gemm_nn(av.data(), bv.data(), out.data(), m, n, k, false);
    auto pa = a.node(), pb = b.node();
    return detail::make_op<T>(std::move(out), {pa, pb}, [pa, pb, m, n, k](Node<T>& nd) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            gemm_nt(nd.grad.data(), pb->value.data(), pa->grad.data(), m, k, n, true);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            gemm_tn(pa->value.data(), nd.grad.data(), pb->grad.data(), k, n, m, true);
        }
    });
}

/// Affine map with weight stored [out, in].
/// Rank-1 input x[in] -> y[out];  rank-2 input X[M,in] -> Y[M,out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    const int out_dim = wv.dim(0), in_dim = wv.dim(1);
    if (wv.rank() != 2) throw ShapeError("linear: weight must be rank 2");
    auto px = x.node(), pw = w.node(), pb = b.node();
    if (xv.rank() == 1) {
        if (xv.dim(0) != in_dim) throw ShapeError("linear: input dim mismatch");
        Tensor<T> out({out_dim});
        gemm_nn(wv.data(), xv.data(), out.data(), out_dim, 1, in_dim, false);
        for (int o = 0; o < out_dim; ++o) out[static_cast<size_t>(o)] += b.value()[static_cast<size_t>(o)];
        return detail::make_op<T>(std::move(out), {px, pw, pb}, [px, pw, pb, out_dim, in_dim](Node<T>& n) {
            if (px->requires_grad) {
                px->ensure_grad();
                gemm_tn(pw->value.data(), n.grad.data(), px->grad.data(), in_dim, 1, out_dim, true);
            }
            if (pw->requires_grad) {
                pw->ensure_grad();
                gemm_nt(n.grad.data(), px->value.data(), pw->grad.data(), out_dim, in_dim, 1, true);
            }
            if (pb->requires_grad) detail::accumulate(pb, n.grad);
        });
    }
    if (xv.rank() != 2 || xv.dim(1) != in_dim) throw ShapeError("linear: input dim mismatch");
    const int m = xv.dim(0);
    Tensor<T> out({m, out_dim});
    gemm_nt(xv.data(), wv.data(), out.data(), m, out_dim, in_dim, false);
    for (int i = 0; i < m; ++i)
        for (int o = 0; o < out_dim; ++o) out.at(i, o) += b.value()[static_cast<size_t>(o)];
    return detail::make_op<T>(std::move(out), {px, pw, pb}, [px, pw, pb, m, out_dim, in_dim](Node<T>& n) {
        if (px->requires_grad) {
            px->ensure_grad();
            gemm_nn(n.grad.data(), pw->value.data(), px->grad.data(), m, in_dim, out_dim, true);
        }
        if (pw->requires_grad) {
            pw->ensure_grad();
            gemm_tn(n.grad.data(), px->value.data(), pw->grad.data(), out_dim, in_dim, m, true);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int o = 0; o < out_dim; ++o) pb->grad[static_cast<size_t>(o)] += n.grad.at(i, o);
        }
    });
}

namespace detail {

template <typename T>
void im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad, int ho, int wo, T* cols) {
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    // cols layout: [cin*kh*kw, ho*wo]
    size_t r = 0;
    for (int c = 0; c < cin; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj, ++r) {
                T* dst = cols + r * static_cast<size_t>(ho) * wo;
                for (int oi = 0; oi < ho; ++oi) {
                    const int ii = oi * stride + ki - pad;
                    if (ii < 0 || ii >= h) {
                        std::fill(dst, dst + wo, T(0));
                        dst += wo;
                        continue;
                    }
                    const T* src = &x.at(c, ii, 0);
                    for (int oj = 0; oj < wo; ++oj) {
                        const int jj = oj * stride + kj - pad;
                        dst[oj] = (jj >= 0 && jj < w) ? src[jj] : T(0);
                    }
                    dst += wo;
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* cols, int cin, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo,
            Tensor<T>& dx) {
    size_t r = 0;
    for (int c = 0; c < cin; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj, ++r) {
                const T* src = cols + r * static_cast<size_t>(ho) * wo;
                for (int oi = 0; oi < ho; ++oi) {
                    const int ii = oi * stride + ki - pad;
                    if (ii < 0 || ii >= h) continue;
                    for (int oj = 0; oj < wo; ++oj) {
                        const int jj = oj * stride + kj - pad;
                        if (jj >= 0 && jj < w) dx.at(c, ii, jj) += src[oi * wo + oj];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-D convolution, x[Cin,H,W], w[Cout,Cin,kh,kw], bias[Cout].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    if (xv.rank() != 3 || wv.rank() != 4) throw ShapeError("conv2d: expected x[C,H,W], w[O,C,kh,kw]");
    const int cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
    const int cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(1) != cin)
        throw ShapeError("conv2d: channel mismatch, input " + xv.shape_str() + " weight " + wv.shape_str());
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: output would be empty");
    const int k = cin * kh * kw, l = ho * wo;

    auto cols = std::make_shared<Tensor<T>>(std::vector<int>{k, l});
    detail::im2col(xv, kh, kw, stride, pad, ho, wo, cols->data());
    Tensor<T> out({cout, ho, wo});
    gemm_nn(wv.data(), cols->data(), out.data(), cout, l, k, false);
    for (int c = 0; c < cout; ++c) {
        const T bias = b.value()[static_cast<size_t>(c)];
        T* dst = &out.at(c, 0, 0);
        for (int i = 0; i < l; ++i) dst[i] += bias;
    }

    auto px = x.node(), pw = w.node(), pb = b.node();
    const bool needs_graph = grad_enabled() && (px->requires_grad || pw->requires_grad || pb->requires_grad);
    if (!needs_graph) return Var<T>(std::move(out), false);

    return detail::make_op<T>(
        std::move(out), {px, pw, pb},
        [px, pw, pb, cols, cin, h, wd, kh, kw, stride, pad, ho, wo, cout, k, l](Node<T>& n) {
            if (pw->requires_grad) {
                pw->ensure_grad();
                gemm_nt(n.grad.data(), cols->data(), pw->grad.data(), cout, k, l, true);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int c = 0; c < cout; ++c) {
                    T acc = T(0);
                    const T* src = &n.grad.at(c, 0, 0);
                    for (int i = 0; i < l; ++i) acc += src[i];
                    pb->grad[static_cast<size_t>(c)] += acc;
                }
            }
            if (px->requires_grad) {
                px->ensure_grad();
                Tensor<T> dcols({k, l});
                gemm_tn(pw->value.data(), n.grad.data(), dcols.data(), k, l, cout, false);
                detail::col2im(dcols.data(), cin, h, wd, kh, kw, stride, pad, ho, wo, px->grad);
            }
        });
}

// ---------------------------------------------------------------------------
// Shape / pooling ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
    Tensor<T> out = a.value().reshaped(shape);
    auto pa = a.node();
    return detail::make_op<T>(std::move(out), {pa}, [pa](Node<T>& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < n.grad.numel(); ++i) pa->grad[i] += n.grad[i];
    });
}

/// Global average pool x[C,H,W] -> [C].
template <typename T>
Var<T> global_avg_pool(const Var<T>& a) {
    const auto& xv = a.value();
    if (xv.rank() != 3) throw ShapeError("global_avg_pool: expected [C,H,W]");
    const int c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
    Tensor<T> out({c});
    for (int i = 0; i < c; ++i) {
        T acc = T(0);
        const T* src = xv.data() + static_cast<size_t>(i) * hw;
        for (int j = 0; j < hw; ++j) acc += src[j];
        out[static_cast<size_t>(i)] = acc / static_cast<T>(hw);
    }
    auto pa = a.node();
    return detail::make_op<T>(std::move(out), {pa}, [pa, c, hw](Node<T>& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int i = 0; i < c; ++i) {
            const T g = n.grad[static_cast<size_t>(i)] / static_cast<T>(hw);
            T* dst = pa->grad.data() + static_cast<size_t>(i) * hw;
            for (int j = 0; j < hw; ++j) dst[j] += g;
        }
    });
}

/// Sum over channels: x[C,H,W] -> [H,W].
template <typename T>
Var<T> sum_channels(const Var<T>& a) {
    const auto& xv = a.value();
    if (xv.rank() != 3) throw ShapeError("sum_channels: expected [C,H,W]");
    const int c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
    Tensor<T> out({xv.dim(1), xv.dim(2)});
    for (int i = 0; i < c; ++i) {
        const T* src = xv.data() + static_cast<size_t>(i) * hw;
        for (int j = 0; j < hw; ++j) out[static_cast<size_t>(j)] += src[j];
    }
    auto pa = a.node();
    return detail::make_op<T>(std::move(out), {pa}, [pa, c, hw](Node<T>& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int i = 0; i < c; ++i) {
            T* dst = pa->grad.data() + static_cast<size_t>(i) * hw;
            for (int j = 0; j < hw; ++j) dst[j] += n.grad[static_cast<size_t>(j)];
        }
    });
}

/// Broadcast product of a spatial map with a channel vector:
/// out[c,h,w] = x[c,h,w] * v[c].
template <typename T>
Var<T> mul_channels(const Var<T>& x, const Var<T>& v) {
    const auto& xv = x.value();
    const auto& vv = v.value();
    if (xv.rank() != 3 || vv.rank() != 1 || vv.dim(0) != xv.dim(0))
        throw ShapeError("mul_channels: expected x[C,H,W], v[C]");
    const int c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
    Tensor<T> out(xv.shape());
    for (int i = 0; i < c; ++i) {
        const T s = vv[static_cast<size_t>(i)];
        const T* src = xv.data() + static_cast<size_t>(i) * hw;
        T* dst = out.data() + static_cast<size_t>(i) * hw;
        for (int j = 0; j < hw; ++j) dst[j] = src[j] * s;
    }
    auto px = x.node(), pv = v.node();
    return detail::make_op<T>(std::move(out), {px, pv}, [px, pv, c, hw](Node<T>& n) {
        if (px->requires_grad) {
            px->ensure_grad();
            for (int i = 0; i < c; ++i) {
                const T s = pv->value[static_cast<size_t>(i)];
                const T* g = n.grad.data() + static_cast<size_t>(i) * hw;
                T* dst = px->grad.data() + static_cast<size_t>(i) * hw;
                for (int j = 0; j < hw; ++j) dst[j] += g[j] * s;
            }
        }
        if (pv->requires_grad) {
            pv->ensure_grad();
            for (int i = 0; i < c; ++i) {
                const T* g = n.grad.data() + static_cast<size_t>(i) * hw;
                const T* xd = px->value.data() + static_cast<size_t>(i) * hw;
                T acc = T(0);
                for (int j = 0; j < hw; ++j) acc += g[j] * xd[j];
                pv->grad[static_cast<size_t>(i)] += acc;
            }
        }
    });
}

/// Concatenate two rank-1 vectors.
template <typename T>
Var<T> concat_vec(const Var<T>& a, const Var<T>& b) {
    const int na = a.value().dim(0), nb = b.value().dim(0);
    Tensor<T> out({na + nb});
    std::copy(a.value().data(), a.value().data() + na, out.data());
    std::copy(b.value().data(), b.value().data() + nb, out.data() + na);
    auto pa = a.node(), pb = b.node();
    return detail::make_op<T>(std::move(out), {pa, pb}, [pa, pb, na, nb](Node<T>& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (int i = 0; i < na; ++i) pa->grad[static_cast<size_t>(i)] += n.grad[static_cast<size_t>(i)];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int i = 0; i < nb; ++i) pb->grad[static_cast<size_t>(i)] += n.grad[static_cast<size_t>(na + i)];
        }
    });
}

/// Concatenate along the channel axis: [C1,H,W] + [C2,H,W] -> [C1+C2,H,W].
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2))
        throw ShapeError("concat_channels: spatial mismatch");
    Tensor<T> out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
    std::copy(av.data(), av.data() + av.numel(), out.data());
    std::copy(bv.data(), bv.data() + bv.numel(), out.data() + av.numel());
    auto pa = a.node(), pb = b.node();
    const size_t na = av.numel(), nb = bv.numel();
    return detail::make_op<T>(std::move(out), {pa, pb}, [pa, pb, na, nb](Node<T>& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < na; ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < nb; ++i) pb->grad[i] += n.grad[na + i];
        }
    });
}

/// Stack rank-1 vectors of equal length into a [N,d] matrix.
template <typename T>
Var<T> stack_rows(const std::vector<Var<T>>& rows) {
    if (rows.empty()) throw EmptyInputError("stack_rows: no rows");
    const int d = rows[0].value().dim(0);
    const int n = static_cast<int>(rows.size());
    Tensor<T> out({n, d});
    std::vector<std::shared_ptr<Node<T>>> parents;
    parents.reserve(rows.size());
    for (int i = 0; i < n; ++i) {
        if (rows[static_cast<size_t>(i)].value().dim(0) != d) throw ShapeError("stack_rows: ragged rows");
        std::copy(rows[static_cast<size_t>(i)].value().data(),
                  rows[static_cast<size_t>(i)].value().data() + d, &out.at(i, 0));
        parents.push_back(rows[static_cast<size_t>(i)].node());
    }
    return detail::make_op<T>(std::move(out), std::move(parents), [n, d](Node<T>& nd) {
        for (int i = 0; i < n; ++i) {
            auto& p = nd.parents[static_cast<size_t>(i)];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (int j = 0; j < d; ++j) p->grad[static_cast<size_t>(j)] += nd.grad.at(i, j);
        }
    });
}

/// Row gather from an embedding table [V,d] by integer indices.
template <typename T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int>& indices) {
    const auto& tv = table.value();
    if (tv.rank() != 2) throw ShapeError("gather_rows: table must be [V,d]");
    const int v = tv.dim(0), d = tv.dim(1);
    for (int idx : indices)
        if (idx < 0 || idx >= v) throw LookupError("gather_rows: index " + std::to_string(idx) + " out of range");
    const int l = static_cast<int>(indices.size());
    Tensor<T> out({l, d});
    for (int i = 0; i < l; ++i)
        std::copy(&tv.at(indices[static_cast<size_t>(i)], 0), &tv.at(indices[static_cast<size_t>(i)], 0) + d,
                  &out.at(i, 0));
    auto pt = table.node();
    return detail::make_op<T>(std::move(out), {pt}, [pt, indices, d](Node<T>& n) {
        if (!pt->requires_grad) return;
        pt->ensure_grad();
        for (size_t i = 0; i < indices.size(); ++i)
            for (int j = 0; j < d; ++j)
                pt->grad.at(indices[i], j) += n.grad.at(static_cast<int>(i), j);
    });
}

// ---------------------------------------------------------------------------
// Reductions and normalisation
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& a) {
    T acc = T(0);
    for (size_t i = 0; i < a.value().numel(); ++i) acc += a.value()[i];
    auto pa = a.node();
    return detail::make_op<T>(Tensor<T>::scalar(acc), {pa}, [pa](Node<T>& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        const T g = n.grad[0];
        for (size_t i = 0; i < pa->grad.numel(); ++i) pa->grad[i] += g;
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
    const size_t n = a.value().numel();
    if (n == 0) throw EmptyInputError("mean_all: empty tensor");
    T acc = T(0);
    for (size_t i = 0; i < n; ++i) acc += a.value()[i];
    acc /= static_cast<T>(n);
    auto pa = a.node();
    return detail::make_op<T>(Tensor<T>::scalar(acc), {pa}, [pa, n](Node<T>& nd) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        const T g = nd.grad[0] / static_cast<T>(n);
        for (size_t i = 0; i < n; ++i) pa->grad[i] += g;
    });
}

/// Mean squared error against a constant target.
template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Tensor<T>& target) {
    if (!pred.value().same_shape(target)) throw ShapeError("mse_loss: shape mismatch");
    const size_t n = pred.value().numel();
    T acc = T(0);
    for (size_t i = 0; i < n; ++i) {
        const T d = pred.value()[i] - target[i];
        acc += d * d;
    }
    acc /= static_cast<T>(n);
    auto pp = pred.node();
    return detail::make_op<T>(Tensor<T>::scalar(acc), {pp}, [pp, target, n](Node<T>& nd) {
        if (!pp->requires_grad) return;
        pp->ensure_grad();
        const T g = nd.grad[0] * T(2) / static_cast<T>(n);
        for (size_t i = 0; i < n; ++i) pp->grad[i] += g * (pp->value[i] - target[i]);
    });
}

/// Row-wise L2 normalisation of [N,d] (or a single [d] vector).
/// Rows with norm below eps are divided by eps instead.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
    const auto& xv = x.value();
    const bool vec = xv.rank() == 1;
    const int n = vec ? 1 : xv.dim(0);
    const int d = vec ? xv.dim(0) : xv.dim(1);
    Tensor<T> out(xv.shape());
    std::vector<T> norms(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const T* src = xv.data() + static_cast<size_t>(i) * d;
        T s = T(0);
        for (int j = 0; j < d; ++j) s += src[j] * src[j];
        const T nm = std::max(std::sqrt(s), eps);
        norms[static_cast<size_t>(i)] = nm;
        T* dst = out.data() + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) dst[j] = src[j] / nm;
    }
    auto px = x.node();
    return detail::make_op<T>(std::move(out), {px}, [px, norms, n, d](Node<T>& nd) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const T* y = nd.value.data() + static_cast<size_t>(i) * d;
            const T* g = nd.grad.data() + static_cast<size_t>(i) * d;
            T* dst = px->grad.data() + static_cast<size_t>(i) * d;
            const T nm = norms[static_cast<size_t>(i)];
            T dot = T(0);
            for (int j = 0; j < d; ++j) dot += g[j] * y[j];
            for (int j = 0; j < d; ++j) dst[j] += (g[j] - dot * y[j]) / nm;
        }
    });
}

/// Gate-weighted mean pool: pooled = sum_i w_i e_i / max(sum_i w_i, eps).
template <typename T>
Var<T> weighted_pool(const Var<T>& embeddings, const Var<T>& weights, T eps) {
    const auto& ev = embeddings.value();
    const auto& wv = weights.value();
    if (ev.rank() != 2 || wv.rank() != 1 || ev.dim(0) != wv.dim(0))
        throw ShapeError("weighted_pool: expected E[L,d], w[L]");
    const int l = ev.dim(0), d = ev.dim(1);
    T s = T(0);
    for (int i = 0; i < l; ++i) s += wv[static_cast<size_t>(i)];
    const T z = std::max(s, eps);
    Tensor<T> out({d});
    for (int i = 0; i < l; ++i) {
        const T wi = wv[static_cast<size_t>(i)];
        const T* row = &ev.at(i, 0);
        for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] += wi * row[j];
    }
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] /= z;
    auto pe = embeddings.node(), pw = weights.node();
    const bool unclamped = s > eps;
    return detail::make_op<T>(std::move(out), {pe, pw}, [pe, pw, l, d, z, unclamped](Node<T>& n) {
        const T* g = n.grad.data();
        const T* pooled = n.value.data();
        T pg = T(0);
        for (int j = 0; j < d; ++j) pg += pooled[j] * g[j];
        if (pe->requires_grad) {
            pe->ensure_grad();
            for (int i = 0; i < l; ++i) {
                const T wi = pw->value[static_cast<size_t>(i)];
                T* dst = &pe->grad.at(i, 0);
                for (int j = 0; j < d; ++j) dst[j] += wi * g[j] / z;
            }
        }
        if (pw->requires_grad) {
            pw->ensure_grad();
            for (int i = 0; i < l; ++i) {
                const T* row = &pe->value.at(i, 0);
                T dot = T(0);
                for (int j = 0; j < d; ++j) dot += row[j] * g[j];
                T dw = dot / z;
                if (unclamped) dw -= pg / z;
                pw->grad[static_cast<size_t>(i)] += dw;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Loss kernels (fused, numerically stable)
// ---------------------------------------------------------------------------

/// Binary cross entropy on logits with probability clamping to [eps, 1-eps].
/// Returns the batch mean. Gradient is zero where the clamp is active,
/// matching the literal clamped formula.
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& labels, T eps = T(1e-7)) {
    const auto& zv = logits.value();
    if (!zv.same_shape(labels)) throw ShapeError("bce_with_logits: shape mismatch");
    const size_t n = zv.numel();
    if (n == 0) throw ConfigError("bce_with_logits: empty batch");
    T acc = T(0);
    std::vector<T> probs(n);
    for (size_t i = 0; i < n; ++i) {
        const T z = zv[i];
        const T p = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
        const T pc = std::min(std::max(p, eps), T(1) - eps);
        probs[i] = pc;
        acc -= labels[i] * std::log(pc) + (T(1) - labels[i]) * std::log(T(1) - pc);
    }
    acc /= static_cast<T>(n);
    auto pz = logits.node();
    return detail::make_op<T>(Tensor<T>::scalar(acc), {pz}, [pz, labels, probs, n, eps](Node<T>& nd) {
        if (!pz->requires_grad) return;
        pz->ensure_grad();
        const T g = nd.grad[0] / static_cast<T>(n);
        for (size_t i = 0; i < n; ++i) {
            const T pc = probs[i];
            // Clamped region: d loss / d z == 0.
            if (pc <= eps || pc >= T(1) - eps) continue;
            pz->grad[i] += g * (pc - labels[i]);
        }
    });
}

/// Contrastive loss from a cosine-similarity matrix S[N,N], S[j,i] = sim of
/// video j against audio anchor i. Per anchor:
///   -S[i,i]/tau + logsumexp_{j in D_i} S[j,i]/tau,
/// where D_i excludes the positive (include_positive adds it back).
/// Returns the mean over anchors.
template <typename T>
Var<T> contrastive_from_sim(const Var<T>& sim, T tau, bool include_positive = false) {
    const auto& sv = sim.value();
    if (sv.rank() != 2 || sv.dim(0) != sv.dim(1)) throw ShapeError("contrastive_from_sim: S must be square");
    const int n = sv.dim(0);
    if (n < 2) throw ConfigError("contrastive_from_sim: need at least 2 samples");
    const T inv_tau = T(1) / tau;
    T total = T(0);
    // Per anchor: softmax weights over the denominator set, cached for backward.
    Tensor<T> soft({n, n});
    for (int i = 0; i < n; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < n; ++j) {
            if (!include_positive && j == i) continue;
            mx = std::max(mx, sv.at(j, i) * inv_tau);
        }
        T denom = T(0);
        for (int j = 0; j < n; ++j) {
            if (!include_positive && j == i) continue;
            denom += std::exp(sv.at(j, i) * inv_tau - mx);
        }
        const T lse = mx + std::log(denom);
        total += -sv.at(i, i) * inv_tau + lse;
        for (int j = 0; j < n; ++j) {
            if (!include_positive && j == i) {
                soft.at(j, i) = T(0);
                continue;
            }
            soft.at(j, i) = std::exp(sv.at(j, i) * inv_tau - lse);
        }
    }
    total /= static_cast<T>(n);
    auto ps = sim.node();
    return detail::make_op<T>(Tensor<T>::scalar(total), {ps}, [ps, soft, n, inv_tau](Node<T>& nd) {
        if (!ps->requires_grad) return;
        ps->ensure_grad();
        const T g = nd.grad[0] * inv_tau / static_cast<T>(n);
        for (int i = 0; i < n; ++i) {
            ps->grad.at(i, i) -= g;
            for (int j = 0; j < n; ++j) ps->grad.at(j, i) += g * soft.at(j, i);
        }
    });
}

/// Multi-class cross entropy over logits[N,K] with integer labels, mean over rows.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
    const auto& zv = logits.value();
    if (zv.rank() != 2 || static_cast<size_t>(zv.dim(0)) != labels.size())
        throw ShapeError("softmax_cross_entropy: logits[N,K] and N labels required");
    const int n = zv.dim(0), k = zv.dim(1);
    Tensor<T> soft({n, k});
    T total = T(0);
    for (int i = 0; i < n; ++i) {
        if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= k)
            throw LookupError("softmax_cross_entropy: label out of range");
        T mx = zv.at(i, 0);
        for (int j = 1; j < k; ++j) mx = std::max(mx, zv.at(i, j));
        T denom = T(0);
        for (int j = 0; j < k; ++j) denom += std::exp(zv.at(i, j) - mx);
        const T lse = mx + std::log(denom);
        for (int j = 0; j < k; ++j) soft.at(i, j) = std::exp(zv.at(i, j) - lse);
        total += lse - zv.at(i, labels[static_cast<size_t>(i)]);
    }
    total /= static_cast<T>(n);
    auto pz = logits.node();
    return detail::make_op<T>(Tensor<T>::scalar(total), {pz}, [pz, soft, labels, n, k](Node<T>& nd) {
        if (!pz->requires_grad) return;
        pz->ensure_grad();
        const T g = nd.grad[0] / static_cast<T>(n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < k; ++j) {
                T d = soft.at(i, j);
                if (j == labels[static_cast<size_t>(i)]) d -= T(1);
                pz->grad.at(i, j) += g * d;
            }
    });
}

/// Transpose of a rank-2 tensor.
template <typename T>
Var<T> transpose(const Var<T>& a) {
    const auto& av = a.value();
    if (av.rank() != 2) throw ShapeError("transpose: rank-2 only");
    const int m = av.dim(0), n = av.dim(1);
    Tensor<T> out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
    auto pa = a.node();
    return detail::make_op<T>(std::move(out), {pa, }, [pa, m, n](Node<T>& nd) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) pa->grad.at(i, j) += nd.grad.at(j, i);
    });
}

}  // namespace sonolearn
