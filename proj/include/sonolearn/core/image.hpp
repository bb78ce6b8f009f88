// Copyright (c) 2026 sonolearn contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "sonolearn/core/errors.hpp"
#include "sonolearn/core/tensor.hpp"

namespace sonolearn {

/// Bilinear resize of a [H,W] map with corner alignment; a size-1 axis is
/// treated as constant.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& img, int out_h, int out_w) {
    if (img.rank() != 2) throw ShapeError("bilinear_resize: expected [H,W]");
    const int h = img.dim(0), w = img.dim(1);
    if (h <= 0 || w <= 0 || out_h <= 0 || out_w <= 0) throw ShapeError("bilinear_resize: empty image");
    Tensor<T> out({out_h, out_w});
    const double sy = out_h > 1 ? static_cast<double>(h - 1) / (out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(w - 1) / (out_w - 1) : 0.0;
    for (int i = 0; i < out_h; ++i) {
        const double fy = i * sy;
        const int y0 = std::min(static_cast<int>(fy), h - 1);
        const int y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - y0;
        for (int j = 0; j < out_w; ++j) {
            const double fx = j * sx;
            const int x0 = std::min(static_cast<int>(fx), w - 1);
            const int x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - x0;
            const double v = (1 - wy) * ((1 - wx) * img.at(y0, x0) + wx * img.at(y0, x1)) +
                             wy * ((1 - wx) * img.at(y1, x0) + wx * img.at(y1, x1));
            out.at(i, j) = static_cast<T>(v);
        }
    }
    return out;
}

template <typename T>
Tensor<T> center_crop(const Tensor<T>& img, int size_h, int size_w) {
    if (img.rank() != 2) throw ShapeError("center_crop: expected [H,W]");
    const int h = img.dim(0), w = img.dim(1);
    if (size_h > h || size_w > w) throw ShapeError("center_crop: crop larger than image");
    const int oy = (h - size_h) / 2, ox = (w - size_w) / 2;
    Tensor<T> out({size_h, size_w});
    for (int i = 0; i < size_h; ++i)
        for (int j = 0; j < size_w; ++j) out.at(i, j) = img.at(oy + i, ox + j);
    return out;
}

/// Min-max normalisation to [0,1]; a constant map maps to all zeros.
template <typename T>
Tensor<T> minmax01(const Tensor<T>& m) {
    T lo = m[0], hi = m[0];
    for (size_t i = 0; i < m.numel(); ++i) {
        lo = std::min(lo, m[i]);
        hi = std::max(hi, m[i]);
    }
    Tensor<T> out(m.shape());
    if (hi - lo <= T(0)) return out;
    for (size_t i = 0; i < m.numel(); ++i) out[i] = (m[i] - lo) / (hi - lo);
    return out;
}

// ---------------------------------------------------------------------------
// Netpbm I/O (P5 grayscale, P6 colour), used for frames, masks and overlays.
// ---------------------------------------------------------------------------

inline void write_pgm(const std::string& path, const Tensor<uint8_t>& img) {
    if (img.rank() != 2) throw ShapeError("write_pgm: expected [H,W]");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_pgm: cannot open " + path);
    f << "P5\n" << img.dim(1) << " " << img.dim(0) << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.numel()));
    if (!f) throw IoError("write_pgm: write failed for " + path);
}

inline Tensor<uint8_t> read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_pgm: cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P5") throw IoError("read_pgm: not a binary PGM: " + path);
    auto skip_ws_comments = [&f]() {
        while (true) {
            int c = f.peek();
            if (c == '#') {
                std::string line;
                std::getline(f, line);
            } else if (std::isspace(c)) {
                f.get();
            } else {
                break;
            }
        }
    };
    skip_ws_comments();
    int w = 0, h = 0, maxval = 0;
    f >> w;
    skip_ws_comments();
    f >> h;
    skip_ws_comments();
    f >> maxval;
    f.get();  // single whitespace after header
    if (w <= 0 || h <= 0 || maxval != 255) throw IoError("read_pgm: unsupported header in " + path);
    Tensor<uint8_t> img({h, w});
    f.read(reinterpret_cast<char*>(img.data()), static_cast<std::streamsize>(img.numel()));
    if (!f) throw IoError("read_pgm: truncated data in " + path);
    return img;
}

/// RGB overlay writer; channels r/g/b are [H,W] in [0,1].
inline void write_ppm(const std::string& path, const Tensor<float>& r, const Tensor<float>& g,
                      const Tensor<float>& b) {
    if (!r.same_shape(g) || !r.same_shape(b)) throw ShapeError("write_ppm: channel shape mismatch");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_ppm: cannot open " + path);
    f << "P6\n" << r.dim(1) << " " << r.dim(0) << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(r.dim(1)) * 3);
    auto q = [](float v) {
        return static_cast<uint8_t>(std::clamp(v, 0.0f, 1.0f) * 255.0f + 0.5f);
    };
    for (int i = 0; i < r.dim(0); ++i) {
        for (int j = 0; j < r.dim(1); ++j) {
            row[static_cast<size_t>(j) * 3 + 0] = q(r.at(i, j));
            row[static_cast<size_t>(j) * 3 + 1] = q(g.at(i, j));
            row[static_cast<size_t>(j) * 3 + 2] = q(b.at(i, j));
        }
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!f) throw IoError("write_ppm: write failed for " + path);
}

/// Converts a unit-range float image to 8-bit.
inline Tensor<uint8_t> to_u8(const Tensor<float>& img) {
    Tensor<uint8_t> out(img.shape());
    for (size_t i = 0; i < img.numel(); ++i)
        out[i] = static_cast<uint8_t>(std::clamp(img[i], 0.0f, 1.0f) * 255.0f + 0.5f);
    return out;
}

/// Converts an 8-bit image to unit-range float.
inline Tensor<float> to_unit(const Tensor<uint8_t>& img) {
    Tensor<float> out(img.shape());
    for (size_t i = 0; i < img.numel(); ++i) out[i] = static_cast<float>(img[i]) / 255.0f;
    return out;
}

}  // namespace sonolearn
