#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>

#include "s3c/pipeline.hpp"

namespace s3c {

struct DeadLeavesConfig {
    Index height = 32;
    Index width = 32;
    Index channels = 3;
    int leaves = 150;           // discs dropped per image
    double min_radius = 1.0;
    double max_radius = 12.0;
    double radius_power = 3.0;  // p(r) ~ r^-power, the scale-invariant choice
    double noise_sd = 2.0;      // additive pixel noise, 0..255 scale
};

/// Dead-leaves images: opaque discs of random color dropped front to back,
/// with power-law radii. Natural-image-like statistics (occlusion edges, flat
/// regions, heavy-tailed filter responses) without any dataset download.
/// Labels are m mod 10.
inline ImageBatch dead_leaves(Index count, std::uint64_t seed, const DeadLeavesConfig& cfg = {}) {
    if (count < 0 || cfg.height < 1 || cfg.width < 1 || (cfg.channels != 1 && cfg.channels != 3) ||
        !(cfg.min_radius > 0.0) || !(cfg.max_radius >= cfg.min_radius) || cfg.leaves < 1) {
        throw Error("invalid dead-leaves settings");
    }
    ImageBatch out(count, cfg.height, cfg.width, cfg.channels);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, cfg.noise_sd);
    const double a = 1.0 - cfg.radius_power;
    const double lo = std::pow(cfg.min_radius, a);
    const double hi = std::pow(cfg.max_radius, a);

    std::vector<char> covered(static_cast<std::size_t>(cfg.height * cfg.width));
    for (Index m = 0; m < count; ++m) {
        std::fill(covered.begin(), covered.end(), 0);
        Index remaining = cfg.height * cfg.width;
        const double bg = 255.0 * u(rng);
        for (int leaf = 0; leaf < cfg.leaves && remaining > 0; ++leaf) {
            const double r = std::pow(lo + (hi - lo) * u(rng), 1.0 / a);  // inverse CDF of the power law
            const double cy = -r + (static_cast<double>(cfg.height) + 2 * r) * u(rng);
            const double cx = -r + (static_cast<double>(cfg.width) + 2 * r) * u(rng);
            const double gray = 255.0 * u(rng);
            double color[3];
            for (double& c : color) {
                c = std::clamp(gray + 40.0 * (u(rng) - 0.5), 0.0, 255.0);
            }
            const Index y0 = std::max<Index>(0, static_cast<Index>(std::floor(cy - r)));
            const Index y1 = std::min<Index>(cfg.height - 1, static_cast<Index>(std::ceil(cy + r)));
            const Index x0 = std::max<Index>(0, static_cast<Index>(std::floor(cx - r)));
            const Index x1 = std::min<Index>(cfg.width - 1, static_cast<Index>(std::ceil(cx + r)));
            for (Index y = y0; y <= y1; ++y) {
                for (Index x = x0; x <= x1; ++x) {
                    const double dy = static_cast<double>(y) + 0.5 - cy;
                    const double dx = static_cast<double>(x) + 0.5 - cx;
                    char& cov = covered[static_cast<std::size_t>(y * cfg.width + x)];
                    if (cov || dy * dy + dx * dx > r * r) {
                        continue;
                    }
                    cov = 1;
                    --remaining;
                    for (Index ch = 0; ch < cfg.channels; ++ch) {
                        out.at(m, y, x, ch) = static_cast<float>(cfg.channels == 1 ? gray : color[ch]);
                    }
                }
            }
        }
        for (Index y = 0; y < cfg.height; ++y) {
            for (Index x = 0; x < cfg.width; ++x) {
                for (Index ch = 0; ch < cfg.channels; ++ch) {
                    float& px = out.at(m, y, x, ch);
                    if (!covered[static_cast<std::size_t>(y * cfg.width + x)]) {
                        px = static_cast<float>(bg);
                    }
                    // Quantize like an 8-bit source.
                    px = static_cast<float>(std::clamp(std::round(px + noise(rng)), 0.0, 255.0));
                }
            }
        }
        out.labels[static_cast<std::size_t>(m)] = static_cast<std::uint8_t>(m % 10);
    }
    return out;
}

}  // namespace s3c
