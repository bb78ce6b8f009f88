// Copyright (c) 2026 sonolearn contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace sonolearn {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Deterministic RNG. mt19937_64 is fully specified by the standard and the
/// distribution transforms below are hand-rolled, so streams are reproducible
/// across runs and standard-library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const uint64_t n = static_cast<uint64_t>(hi - lo) + 1;
        const auto wide = static_cast<unsigned __int128>(gen_()) * n;
        return lo + static_cast<int64_t>(wide >> 64);
    }

    /// Standard normal via Box-Muller, one cached value.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename Vec>
    void shuffle(Vec& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Sample k distinct indices from [0, n).
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        for (int i = 0; i < k; ++i) {
            const auto j = static_cast<size_t>(uniform_int(i, n - 1));
            std::swap(idx[static_cast<size_t>(i)], idx[j]);
        }
        idx.resize(static_cast<size_t>(k));
        return idx;
    }

    /// Independent child stream (for per-scan / per-step derivation).
    Rng derive(uint64_t stream_id) const {
        return Rng(splitmix64(base_seed_mix() ^ splitmix64(stream_id)));
    }

    static Rng derive_from(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
        uint64_t s = splitmix64(seed);
        s = splitmix64(s ^ splitmix64(a + 0x1000));
        s = splitmix64(s ^ splitmix64(b + 0x2000));
        s = splitmix64(s ^ splitmix64(c + 0x3000));
        return Rng(s);
    }

private:
    uint64_t base_seed_mix() const {
        // The engine state itself is not exposed; prefer derive_from for
        // hierarchies keyed on the original seed.
        std::mt19937_64 copy = gen_;
        return copy();
    }

    std::mt19937_64 gen_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace sonolearn
