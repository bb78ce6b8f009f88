// Copyright (c) 2026 sonolearn contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sonolearn/core/errors.hpp"

namespace sonolearn {

// Minimal RIFF/WAVE support: 16-bit PCM, mono.

namespace detail {
inline void put_u32(std::vector<uint8_t>& b, uint32_t v) {
    b.push_back(static_cast<uint8_t>(v & 0xff));
    b.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    b.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    b.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}
inline void put_u16(std::vector<uint8_t>& b, uint16_t v) {
    b.push_back(static_cast<uint8_t>(v & 0xff));
    b.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
}
inline uint32_t get_u32(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
inline uint16_t get_u16(const uint8_t* p) {
    return static_cast<uint16_t>(p[0] | (p[1] << 8));
}
}  // namespace detail

inline int16_t float_to_pcm16(float v) {
    const float c = v < -1.0f ? -1.0f : (v > 1.0f ? 1.0f : v);
    const float s = c * 32767.0f;
    return static_cast<int16_t>(s >= 0 ? s + 0.5f : s - 0.5f);
}

inline float pcm16_to_float(int16_t s) { return static_cast<float>(s) / 32767.0f; }

inline void write_wav(const std::string& path, const std::vector<float>& samples, int sample_rate) {
    std::vector<uint8_t> out;
    out.reserve(44 + samples.size() * 2);
    const uint32_t data_bytes = static_cast<uint32_t>(samples.size() * 2);
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    detail::put_u32(out, 36 + data_bytes);
    out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
    detail::put_u32(out, 16);
    detail::put_u16(out, 1);  // PCM
    detail::put_u16(out, 1);  // mono
    detail::put_u32(out, static_cast<uint32_t>(sample_rate));
    detail::put_u32(out, static_cast<uint32_t>(sample_rate * 2));
    detail::put_u16(out, 2);   // block align
    detail::put_u16(out, 16);  // bits per sample
    out.insert(out.end(), {'d', 'a', 't', 'a'});
    detail::put_u32(out, data_bytes);
    for (float v : samples) {
        const int16_t s = float_to_pcm16(v);
        out.push_back(static_cast<uint8_t>(s & 0xff));
        out.push_back(static_cast<uint8_t>((s >> 8) & 0xff));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_wav: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write_wav: write failed for " + path);
}

struct WavData {
    std::vector<float> samples;
    int sample_rate = 0;
};

inline WavData read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_wav: cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
        throw IoError("read_wav: not a RIFF/WAVE file: " + path);
    size_t pos = 12;
    int sample_rate = 0, channels = 0, bits = 0;
    WavData out;
    bool have_fmt = false;
    while (pos + 8 <= buf.size()) {
        const char* id = reinterpret_cast<const char*>(buf.data() + pos);
        const uint32_t sz = detail::get_u32(buf.data() + pos + 4);
        pos += 8;
        if (pos + sz > buf.size()) throw IoError("read_wav: truncated chunk in " + path);
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (sz < 16) throw IoError("read_wav: bad fmt chunk in " + path);
            const uint16_t fmt = detail::get_u16(buf.data() + pos);
            channels = detail::get_u16(buf.data() + pos + 2);
            sample_rate = static_cast<int>(detail::get_u32(buf.data() + pos + 4));
            bits = detail::get_u16(buf.data() + pos + 14);
            if (fmt != 1) throw IoError("read_wav: only PCM supported: " + path);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            if (!have_fmt) throw IoError("read_wav: data before fmt in " + path);
            if (channels != 1) throw IoError("read_wav: mono required: " + path);
            if (bits != 16) throw IoError("read_wav: 16-bit PCM required: " + path);
            const size_t n = sz / 2;
            out.samples.resize(n);
            for (size_t i = 0; i < n; ++i) {
                const int16_t s = static_cast<int16_t>(detail::get_u16(buf.data() + pos + i * 2));
                out.samples[i] = pcm16_to_float(s);
            }
            out.sample_rate = sample_rate;
            return out;
        }
        pos += sz + (sz & 1);
    }
    throw IoError("read_wav: no data chunk in " + path);
}

}  // namespace sonolearn
