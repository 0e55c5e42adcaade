// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "aqa/common.hpp"
#include "aqa/rng.hpp"
#include "aqa/tensor.hpp"

namespace aqa {

// Planar RGB frame, values in [0, 1], channel-major [3][h][w].
struct Image {
    int h = 0;
    int w = 0;
    std::vector<float> rgb;

    static Image filled(int h, int w, float v) {
        Image im;
        im.h = h;
        im.w = w;
        im.rgb.assign(static_cast<size_t>(3) * h * w, v);
        return im;
    }
    float at(int c, int y, int x) const {
        return rgb[(static_cast<size_t>(c) * h + y) * w + x];
    }
    float& at(int c, int y, int x) {
        return rgb[(static_cast<size_t>(c) * h + y) * w + x];
    }
};

struct PreprocessConfig {
    std::array<double, 3> mean_rgb = {0.2719, 0.4617, 0.5961};
    std::array<double, 3> std_rgb = {0.1870, 0.1881, 0.2604};
    int short_side = 256;
    int crop = 224;
    double hflip_prob = 0.5;
    bool augment = false;
    bool normalize = true; // standardize with mean/std (sweepable preprocessing switch)

    void validate() const {
        for (double s : std_rgb)
            if (s <= 0) throw Error("preprocess: std components must be positive");
        if (crop > short_side)
            throw Error(cat("preprocess: crop ", crop, " exceeds short side ", short_side));
        if (hflip_prob < 0 || hflip_prob > 1)
            throw Error("preprocess: hflip_prob outside [0, 1]");
    }
};

// Bilinear resize so that min(h, w) == short_side, aspect ratio preserved.
// Identity when the short side already matches.
inline Image resize_short_side(const Image& in, int short_side) {
    const int s = std::min(in.h, in.w);
    if (s == short_side) return in;
    const double factor = static_cast<double>(short_side) / s;
    const int oh = std::max(short_side, static_cast<int>(std::lround(in.h * factor)));
    const int ow = std::max(short_side, static_cast<int>(std::lround(in.w * factor)));
    const int out_h = (in.h <= in.w) ? short_side : oh;
    const int out_w = (in.h <= in.w) ? ow : short_side;

    Image out = Image::filled(out_h, out_w, 0.f);
    const double sy = static_cast<double>(in.h) / out_h;
    const double sx = static_cast<double>(in.w) / out_w;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < out_h; ++y) {
            const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, in.h - 1.0);
            const int y0 = static_cast<int>(fy);
            const int y1 = std::min(y0 + 1, in.h - 1);
            const double wy = fy - y0;
            for (int x = 0; x < out_w; ++x) {
                const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, in.w - 1.0);
                const int x0 = static_cast<int>(fx);
                const int x1 = std::min(x0 + 1, in.w - 1);
                const double wx = fx - x0;
                const double v = (1 - wy) * ((1 - wx) * in.at(c, y0, x0) + wx * in.at(c, y0, x1)) +
                                 wy * ((1 - wx) * in.at(c, y1, x0) + wx * in.at(c, y1, x1));
                out.at(c, y, x) = static_cast<float>(v);
            }
        }
    return out;
}

// Resize, one shared crop window and flip decision for the whole clip, then
// per-channel standardization. Augment=false means center crop, no flip.
template <class Real = double>
TensorT<Real> preprocess(const std::vector<Image>& frames, const PreprocessConfig& cfg,
                         std::uint64_t rng_seed) {
    cfg.validate();
    if (frames.empty()) throw Error("preprocess: no frames");

    std::vector<Image> resized;
    resized.reserve(frames.size());
    for (const auto& f : frames) resized.push_back(resize_short_side(f, cfg.short_side));

    const int h = resized[0].h, w = resized[0].w;
    for (const auto& f : resized)
        if (f.h != h || f.w != w) throw Error("preprocess: frames disagree in size after resize");
    if (h < cfg.crop || w < cfg.crop)
        throw Error(cat("preprocess: frame ", h, "x", w, " smaller than crop ", cfg.crop));

    int oy = (h - cfg.crop) / 2;
    int ox = (w - cfg.crop) / 2;
    bool flip = false;
    if (cfg.augment) {
        Rng rng(rng_seed);
        oy = static_cast<int>(rng.below(h - cfg.crop + 1));
        ox = static_cast<int>(rng.below(w - cfg.crop + 1));
        flip = rng.bernoulli(cfg.hflip_prob);
    }

    const int n = static_cast<int>(frames.size());
    const int cp = cfg.crop;
    std::vector<Real> out(static_cast<size_t>(n) * 3 * cp * cp);
    size_t f = 0;
    for (int t = 0; t < n; ++t)
        for (int c = 0; c < 3; ++c) {
            const double mu = cfg.normalize ? cfg.mean_rgb[static_cast<size_t>(c)] : 0.0;
            const double inv = cfg.normalize ? 1.0 / cfg.std_rgb[static_cast<size_t>(c)] : 1.0;
            for (int y = 0; y < cp; ++y)
                for (int x = 0; x < cp; ++x) {
                    const int sx = flip ? (ox + cp - 1 - x) : (ox + x);
                    const double v = resized[static_cast<size_t>(t)].at(c, oy + y, sx);
                    out[f++] = static_cast<Real>((v - mu) * inv);
                }
        }
    return TensorT<Real>::from({n, 3, cp, cp}, std::move(out));
}

} // namespace aqa
