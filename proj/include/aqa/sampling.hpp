// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "aqa/common.hpp"
#include "aqa/rng.hpp"

namespace aqa {

enum class SampleStrategy { random, fixed_offset, varied_offset };

inline const char* to_string(SampleStrategy s) {
    switch (s) {
    case SampleStrategy::random: return "random";
    case SampleStrategy::fixed_offset: return "fixed_offset";
    default: return "varied_offset";
    }
}

inline SampleStrategy sample_strategy_from(const std::string& s) {
    if (s == "random") return SampleStrategy::random;
    if (s == "fixed" || s == "fixed_offset" || s == "fixed-offset") return SampleStrategy::fixed_offset;
    if (s == "varied" || s == "varied_offset" || s == "varied-offset") return SampleStrategy::varied_offset;
    throw Error(cat("unknown sampling strategy '", s, "'"));
}

struct SamplerConfig {
    SampleStrategy strategy = SampleStrategy::varied_offset;
    int n_frames = 8;       // N
    int fixed_offset_k = 0; // fixed_offset only
    std::uint64_t rng_seed = 0;
};

struct FramePlan {
    std::vector<int> indices; // sorted, length N, each in [0, T)
};

// Subclip i for a clip of length T split N ways is [floor(iT/N), floor((i+1)T/N)),
// which partitions [0, T) exactly even when N does not divide T.
inline std::pair<int, int> subclip_bounds(int clip_len, int n, int i) {
    const std::int64_t lo = static_cast<std::int64_t>(i) * clip_len / n;
    const std::int64_t hi = static_cast<std::int64_t>(i + 1) * clip_len / n;
    return {static_cast<int>(lo), static_cast<int>(hi)};
}

inline FramePlan plan_frames(int clip_len, const SamplerConfig& cfg) {
    const int n = cfg.n_frames;
    if (n < 1) throw Error(cat("plan_frames: N must be >= 1, got ", n));
    if (clip_len < n)
        throw Error(cat("plan_frames: clip length ", clip_len, " shorter than N=", n));
    if (cfg.fixed_offset_k < 0)
        throw Error(cat("plan_frames: fixed offset must be nonnegative, got ", cfg.fixed_offset_k));

    FramePlan plan;
    plan.indices.reserve(static_cast<size_t>(n));
    switch (cfg.strategy) {
    case SampleStrategy::random: {
        // N distinct indices without replacement, then sorted by time.
        Rng rng(cfg.rng_seed);
        std::vector<int> pool(static_cast<size_t>(clip_len));
        std::iota(pool.begin(), pool.end(), 0);
        for (int i = 0; i < n; ++i) {
            const std::int64_t j = i + rng.below(clip_len - i);
            std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
            plan.indices.push_back(pool[static_cast<size_t>(i)]);
        }
        std::sort(plan.indices.begin(), plan.indices.end());
        break;
    }
    case SampleStrategy::fixed_offset: {
        for (int i = 0; i < n; ++i) {
            const auto [lo, hi] = subclip_bounds(clip_len, n, i);
            plan.indices.push_back(lo + std::min(cfg.fixed_offset_k, hi - lo - 1));
        }
        break;
    }
    case SampleStrategy::varied_offset: {
        Rng rng(cfg.rng_seed);
        for (int i = 0; i < n; ++i) {
            const auto [lo, hi] = subclip_bounds(clip_len, n, i);
            plan.indices.push_back(lo + static_cast<int>(rng.below(hi - lo)));
        }
        break;
    }
    }
    return plan;
}

} // namespace aqa
