// Copyright (c) 2026 sonolearn contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <functional>
#include <vector>

#include "sonolearn/core/autograd.hpp"
#include "sonolearn/core/nn.hpp"
#include "sonolearn/core/rng.hpp"

using namespace sonolearn;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, scale);
    return t;
}

// Central finite differences against reverse-mode gradients for every
// coordinate of every input.
using Builder = std::function<Var<double>(const std::vector<Var<double>>&)>;

void check_gradients(const Builder& build, std::vector<Tensor<double>*> inputs, double h = 1e-6,
                     double tol = 1e-6) {
    std::vector<Var<double>> vars;
    vars.reserve(inputs.size());
    for (auto* t : inputs) vars.emplace_back(*t, true);
    Var<double> loss = build(vars);
    REQUIRE(loss.value().numel() == 1);
    backward(loss);

    auto eval = [&]() {
        std::vector<Var<double>> frozen;
        frozen.reserve(inputs.size());
        for (auto* t : inputs) frozen.emplace_back(*t, false);
        return build(frozen).value().item();
    };

    for (size_t k = 0; k < inputs.size(); ++k) {
        Tensor<double>& t = *inputs[k];
        const Tensor<double>& g = vars[k].grad();
        REQUIRE(g.shape() == t.shape());
        for (size_t i = 0; i < t.numel(); ++i) {
            const double orig = t[i];
            t[i] = orig + h;
            const double fp = eval();
            t[i] = orig - h;
            const double fm = eval();
            t[i] = orig;
            const double fd = (fp - fm) / (2 * h);
            const double ag = g[i];
            const double denom = std::abs(fd) + std::abs(ag) + 1e-8;
            INFO("input " << k << " coord " << i << " fd=" << fd << " ag=" << ag);
            CHECK(std::abs(fd - ag) / denom < tol);
        }
    }
}

}  // namespace

TEST_CASE("elementwise chain gradients") {
    Rng rng(11);
    Tensor<double> a = random_tensor({6}, rng);
    Tensor<double> b = random_tensor({6}, rng);
    check_gradients(
        [](const std::vector<Var<double>>& v) {
            auto x = mul(sigmoid(v[0]), relu(add(v[0], v[1])));
            return mean_all(sub(x, scale(v[1], 0.3)));
        },
        {&a, &b});
}

TEST_CASE("linear and matmul gradients") {
    Rng rng(12);
    Tensor<double> x = random_tensor({4, 5}, rng);
    Tensor<double> w = random_tensor({3, 5}, rng);
    Tensor<double> b = random_tensor({3}, rng);
    check_gradients(
        [](const std::vector<Var<double>>& v) {
            auto y = linear(v[0], v[1], v[2]);
            auto s = matmul(y, transpose(y));
            return mean_all(s);
        },
        {&x, &w, &b});

    Tensor<double> xv = random_tensor({5}, rng);
    check_gradients(
        [](const std::vector<Var<double>>& v) {
            return sum_all(sigmoid(linear(v[0], v[1], v[2])));
        },
        {&xv, &w, &b});
}

TEST_CASE("conv2d + pooling gradients") {
    Rng rng(13);
    Tensor<double> x = random_tensor({2, 6, 6}, rng);
    Tensor<double> w = random_tensor({3, 2, 3, 3}, rng, 0.5);
    Tensor<double> b = random_tensor({3}, rng, 0.1);
    check_gradients(
        [](const std::vector<Var<double>>& v) {
            auto y = relu(conv2d(v[0], v[1], v[2], 2, 1));
            return mean_all(global_avg_pool(y));
        },
        {&x, &w, &b}, 1e-6, 1e-5);
}

TEST_CASE("spatial fusion op gradients") {
    Rng rng(14);
    Tensor<double> fmap = random_tensor({4, 3, 3}, rng);
    Tensor<double> vec = random_tensor({4}, rng);
    check_gradients(
        [](const std::vector<Var<double>>& v) {
            auto prod = mul_channels(v[0], v[1]);
            auto map = sum_channels(prod);
            auto pooled = global_avg_pool(prod);
            return add(mean_all(map), sum_all(pooled));
        },
        {&fmap, &vec});
}

TEST_CASE("concat / stack / gather gradients") {
    Rng rng(15);
    Tensor<double> a = random_tensor({3}, rng);
    Tensor<double> b = random_tensor({4}, rng);
    Tensor<double> table = random_tensor({5, 3}, rng);
    check_gradients(
        [](const std::vector<Var<double>>& v) {
            auto cat = concat_vec(v[0], v[1]);
            auto rows = gather_rows(v[2], {0, 2, 2, 4});
            auto pooled = mean_all(rows);
            return add(mean_all(cat), pooled);
        },
        {&a, &b, &table});

    Tensor<double> r0 = random_tensor({4}, rng);
    Tensor<double> r1 = random_tensor({4}, rng);
    check_gradients(
        [](const std::vector<Var<double>>& v) {
            auto m = stack_rows<double>({v[0], v[1], v[0]});
            return mean_all(matmul(m, transpose(m)));
        },
        {&r0, &r1});

    Tensor<double> c1 = random_tensor({2, 3, 3}, rng);
    Tensor<double> c2 = random_tensor({1, 3, 3}, rng);
    check_gradients(
        [](const std::vector<Var<double>>& v) {
            return mean_all(global_avg_pool(concat_channels(v[0], v[1])));
        },
        {&c1, &c2});
}

TEST_CASE("normalisation and pooling gradients") {
    Rng rng(16);
    Tensor<double> x = random_tensor({4, 5}, rng);
    check_gradients(
        [](const std::vector<Var<double>>& v) {
            auto n = l2_normalize_rows(v[0]);
            return mean_all(matmul(n, transpose(n)));
        },
        {&x});

    Tensor<double> emb = random_tensor({5, 3}, rng);
    Tensor<double> wts_raw = random_tensor({5}, rng);
    check_gradients(
        [](const std::vector<Var<double>>& v) {
            auto w = sigmoid(v[1]);
            auto pooled = weighted_pool(v[0], w, 1e-8);
            return sum_all(mul(pooled, pooled));
        },
        {&emb, &wts_raw});
}

TEST_CASE("loss kernel gradients") {
    Rng rng(17);
    Tensor<double> logits = random_tensor({6}, rng);
    Tensor<double> labels({6});
    for (int i = 0; i < 6; ++i) labels[static_cast<size_t>(i)] = i % 2;
    check_gradients(
        [&labels](const std::vector<Var<double>>& v) {
            return bce_with_logits(v[0], labels);
        },
        {&logits});

    Tensor<double> vfe = random_tensor({4, 6}, rng);
    Tensor<double> afe = random_tensor({4, 6}, rng);
    check_gradients(
        [](const std::vector<Var<double>>& v) {
            auto vn = l2_normalize_rows(v[0]);
            auto an = l2_normalize_rows(v[1]);
            auto s = matmul(vn, transpose(an));
            return contrastive_from_sim(s, 0.5);
        },
        {&vfe, &afe}, 1e-6, 1e-5);

    Tensor<double> cls = random_tensor({3, 5}, rng);
    std::vector<int> y = {1, 4, 0};
    check_gradients(
        [&y](const std::vector<Var<double>>& v) {
            return softmax_cross_entropy(v[0], y);
        },
        {&cls});

    Tensor<double> pred = random_tensor({7}, rng);
    Tensor<double> target = random_tensor({7}, rng);
    check_gradients(
        [&target](const std::vector<Var<double>>& v) {
            return mse_loss(v[0], target);
        },
        {&pred});
}

TEST_CASE("mask multiply blocks gradient exactly") {
    Rng rng(18);
    Tensor<double> x = random_tensor({5}, rng);
    Tensor<double> mask({5});
    mask[0] = 1, mask[1] = 0, mask[2] = 1, mask[3] = 0, mask[4] = 1;
    Var<double> v(x, true);
    auto loss = sum_all(mul_mask(v, mask));
    backward(loss);
    CHECK(v.grad()[0] == 1.0);
    CHECK(v.grad()[1] == 0.0);
    CHECK(v.grad()[3] == 0.0);
}

TEST_CASE("shared parameters accumulate gradients from all uses") {
    Tensor<double> w({2});
    w[0] = 1.5;
    w[1] = -0.5;
    Var<double> v(w, true);
    auto loss = sum_all(add(v, v));  // d/dw sum(2w) = 2
    backward(loss);
    CHECK(v.grad()[0] == Catch::Approx(2.0));
    CHECK(v.grad()[1] == Catch::Approx(2.0));
}

TEST_CASE("NoGradGuard suppresses graph construction") {
    Tensor<double> w({3}, 1.0);
    Var<double> v(w, true);
    NoGradGuard guard;
    auto y = relu(scale(v, 2.0));
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("sgd momentum update") {
    Tensor<float> w({2});
    w[0] = 1.0f;
    w[1] = 2.0f;
    Var<float> p(w, true);
    ParamList<float> params{{"p", p}};
    SgdOptimizer<float> opt(params, 0.9);
    auto loss = mean_all(mul(p, p));  // grad = 2w/2 = w
    backward(loss);
    opt.step(0.1);
    CHECK(p.value()[0] == Catch::Approx(1.0f - 0.1f * 1.0f));
    CHECK(p.value()[1] == Catch::Approx(2.0f - 0.1f * 2.0f));
    opt.zero_grad();
    auto loss2 = mean_all(mul(p, p));
    backward(loss2);
    // second step folds the momentum buffer in
    const float v0 = 0.9f * 1.0f + p.value()[0];
    const float expect0 = p.value()[0] - 0.1f * v0;
    opt.step(0.1);
    CHECK(p.value()[0] == Catch::Approx(expect0));
}
