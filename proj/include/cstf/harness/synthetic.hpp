#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "cstf/harness/metrics.hpp"
#include "cstf/tensor.hpp"

namespace cstf::harness {

/// One grayscale scene: bright axis-aligned rectangles over a noisy dark
/// background, with the rectangles as labeled ground truth.
template <typename T>
struct SyntheticScene {
    Tensor<T> image;  // [1 x h x w], values in [0, 1]
    std::vector<GroundTruth> objects;
};

namespace detail {

inline bool overlaps(const Box& a, const Box& b) {
    return a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1;
}

}  // namespace detail

/// Deterministic scene sampler. Density is the mean object count per image
/// (Poisson, capped at 8); placement uses bounded rejection so scenes stay
/// uncluttered. Densities whose expected covered area exceeds half the image
/// are rejected as infeasible.
template <typename T>
std::vector<SyntheticScene<T>> gen_synthetic(std::uint64_t seed, std::size_t n_images,
                                             std::size_t size, double density) {
    if (density < 0.0) throw ConfigError("gen_synthetic: density must be non-negative");
    if (size < 8) throw ConfigError("gen_synthetic: image size must be at least 8");
    const std::size_t max_side = std::max<std::size_t>(3, std::min<std::size_t>(10, size / 3));
    const double mean_area = static_cast<double>(max_side + 3) * (max_side + 3) / 4.0;
    if (density * mean_area > 0.5 * static_cast<double>(size) * static_cast<double>(size)) {
        throw ConfigError("gen_synthetic: density " + std::to_string(density) +
                          " infeasible for size " + std::to_string(size));
    }

    Rng rng(seed);
    std::vector<SyntheticScene<T>> scenes;
    scenes.reserve(n_images);
    for (std::size_t im = 0; im < n_images; ++im) {
        SyntheticScene<T> scene;
        scene.image = Tensor<T>(Shape{1, size, size});
        for (std::size_t i = 0; i < scene.image.size(); ++i) {
            scene.image.data()[i] = static_cast<T>(rng.uniform(0.02, 0.25));
        }

        const int want = density > 0.0 ? std::min(rng.poisson(density), 8) : 0;
        for (int k = 0; k < want; ++k) {
            for (int attempt = 0; attempt < 40; ++attempt) {
                const std::size_t bw = 3 + rng.uniform_int(max_side - 2);
                const std::size_t bh = 3 + rng.uniform_int(max_side - 2);
                const std::size_t x0 = rng.uniform_int(size - bw + 1);
                const std::size_t y0 = rng.uniform_int(size - bh + 1);
                Box box{static_cast<double>(x0), static_cast<double>(y0),
                        static_cast<double>(x0 + bw), static_cast<double>(y0 + bh)};
                bool clear = true;
                for (const auto& obj : scene.objects) {
                    if (detail::overlaps(box, obj.box)) {
                        clear = false;
                        break;
                    }
                }
                if (!clear) continue;

                const double brightness = rng.uniform(0.65, 0.98);
                for (std::size_t y = y0; y < y0 + bh; ++y) {
                    for (std::size_t x = x0; x < x0 + bw; ++x) {
                        const double v = brightness + rng.uniform(-0.02, 0.02);
                        scene.image.at(0, y, x) = static_cast<T>(std::clamp(v, 0.0, 1.0));
                    }
                }
                scene.objects.push_back({box, 1});
                break;
            }
        }
        scenes.push_back(std::move(scene));
    }
    return scenes;
}

/// Per-pixel class ids (0 background, object label inside boxes).
template <typename T>
std::vector<int> label_map(const SyntheticScene<T>& scene) {
    const std::size_t h = scene.image.shape()[1], w = scene.image.shape()[2];
    std::vector<int> labels(h * w, 0);
    for (const auto& obj : scene.objects) {
        for (std::size_t y = static_cast<std::size_t>(obj.box.y0);
             y < static_cast<std::size_t>(obj.box.y1); ++y) {
            for (std::size_t x = static_cast<std::size_t>(obj.box.x0);
                 x < static_cast<std::size_t>(obj.box.x1); ++x) {
                labels[y * w + x] = obj.label;
            }
        }
    }
    return labels;
}

/// Flat cell indices of the true class per pixel in a [classes x h x w]
/// probability map, for the pixelwise negative-log loss.
template <typename T>
std::vector<std::size_t> label_cells(const SyntheticScene<T>& scene) {
    const auto labels = label_map(scene);
    const std::size_t px = labels.size();
    std::vector<std::size_t> cells(px);
    for (std::size_t i = 0; i < px; ++i) {
        cells[i] = static_cast<std::size_t>(labels[i]) * px + i;
    }
    return cells;
}

/// Second view of the same scene: identical geometry, fresh noise and a
/// brightness jitter. Token i of one view corresponds to token i of the
/// other, which is the planted ground truth for matching.
template <typename T>
SyntheticScene<T> rephotograph(const SyntheticScene<T>& scene, std::uint64_t seed) {
    Rng rng(seed);
    SyntheticScene<T> out;
    out.objects = scene.objects;
    out.image = Tensor<T>(scene.image.shape());
    const double gain = rng.uniform(0.9, 1.1);
    for (std::size_t i = 0; i < out.image.size(); ++i) {
        const double v = static_cast<double>(scene.image.data()[i]) * gain + rng.uniform(-0.03, 0.03);
        out.image.data()[i] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
    return out;
}

/// FNV-1a over image bytes and box coordinates; used to pin the data split
/// across ablation variants.
template <typename T>
std::string dataset_hash(const std::vector<SyntheticScene<T>>& scenes) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* data, std::size_t len) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& s : scenes) {
        mix(s.image.data(), s.image.size() * sizeof(T));
        for (const auto& o : s.objects) {
            mix(&o.box, sizeof(o.box));
            mix(&o.label, sizeof(o.label));
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace cstf::harness
