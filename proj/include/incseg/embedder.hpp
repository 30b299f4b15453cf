#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "incseg/image.hpp"

namespace incseg {

/// Produces a fixed-length scene-level feature vector per image, used to
/// retrieve unlabeled images with a similar layout. Implementations must be
/// deterministic per image.
class SceneEmbedder {
public:
    virtual ~SceneEmbedder() = default;

    /// Embedding dimension Z.
    virtual int dim() const = 0;

    /// Stable identifier for cache keys; must change when the features change.
    virtual std::string tag() const = 0;

    virtual std::vector<float> embed(const Image& image) const = 0;
};

/// Built-in embedder with no external weights: mean RGB over a 4x4 spatial
/// grid (48 values) concatenated with magnitude-weighted gradient-orientation
/// histograms over a 2x2 grid with 4 bins (16 values), L2-normalized. Z = 64.
///
/// Layout changes (horizon height, road placement) shift the color grid, so
/// scenes with a similar layout land close in cosine distance.
class GridStatsEmbedder final : public SceneEmbedder {
public:
    static constexpr int kColorGrid = 4;
    static constexpr int kOrientGrid = 2;
    static constexpr int kOrientBins = 4;

    int dim() const override { return kColorGrid * kColorGrid * 3 + kOrientGrid * kOrientGrid * kOrientBins; }

    std::string tag() const override { return "grid-stats-v1:z64"; }

    std::vector<float> embed(const Image& image) const override {
        std::vector<float> features(static_cast<std::size_t>(dim()), 0.0f);
        if (image.height <= 0 || image.width <= 0) return fallback(features);

        // Cell-mean RGB in [0, 1].
        std::vector<double> color_sum(kColorGrid * kColorGrid * 3, 0.0);
        std::vector<std::int64_t> color_n(kColorGrid * kColorGrid, 0);
        for (int y = 0; y < image.height; ++y) {
            const int cy = std::min(y * kColorGrid / image.height, kColorGrid - 1);
            for (int x = 0; x < image.width; ++x) {
                const int cx = std::min(x * kColorGrid / image.width, kColorGrid - 1);
                const int cell = cy * kColorGrid + cx;
                for (int ch = 0; ch < 3; ++ch) color_sum[static_cast<std::size_t>(cell) * 3 + ch] += image.at(y, x, ch);
                ++color_n[static_cast<std::size_t>(cell)];
            }
        }
        for (int cell = 0; cell < kColorGrid * kColorGrid; ++cell) {
            if (color_n[static_cast<std::size_t>(cell)] == 0) continue;
            for (int ch = 0; ch < 3; ++ch) {
                features[static_cast<std::size_t>(cell) * 3 + ch] = static_cast<float>(
                    color_sum[static_cast<std::size_t>(cell) * 3 + ch] /
                    (255.0 * static_cast<double>(color_n[static_cast<std::size_t>(cell)])));
            }
        }

        // Orientation histograms on central differences of the gray image,
        // folded to [0, pi) and weighted by gradient magnitude.
        const int base = kColorGrid * kColorGrid * 3;
        std::vector<double> hist(kOrientGrid * kOrientGrid * kOrientBins, 0.0);
        for (int y = 1; y + 1 < image.height; ++y) {
            const int cy = std::min(y * kOrientGrid / image.height, kOrientGrid - 1);
            for (int x = 1; x + 1 < image.width; ++x) {
                const int cx = std::min(x * kOrientGrid / image.width, kOrientGrid - 1);
                const double gx = gray(image, y, x + 1) - gray(image, y, x - 1);
                const double gy = gray(image, y + 1, x) - gray(image, y - 1, x);
                const double mag = std::sqrt(gx * gx + gy * gy);
                if (mag < 1e-9) continue;
                double angle = std::atan2(gy, gx);
                if (angle < 0.0) angle += 3.14159265358979323846;
                if (angle >= 3.14159265358979323846) angle = 0.0;
                int bin = static_cast<int>(angle / 3.14159265358979323846 * kOrientBins);
                bin = std::min(bin, kOrientBins - 1);
                hist[static_cast<std::size_t>((cy * kOrientGrid + cx) * kOrientBins + bin)] += mag;
            }
        }
        for (int cell = 0; cell < kOrientGrid * kOrientGrid; ++cell) {
            double total = 0.0;
            for (int b = 0; b < kOrientBins; ++b) total += hist[static_cast<std::size_t>(cell * kOrientBins + b)];
            if (total <= 0.0) continue;
            for (int b = 0; b < kOrientBins; ++b) {
                features[static_cast<std::size_t>(base + cell * kOrientBins + b)] =
                    static_cast<float>(hist[static_cast<std::size_t>(cell * kOrientBins + b)] / total);
            }
        }
        return normalize(features);
    }

private:
    static double gray(const Image& img, int y, int x) {
        return (static_cast<double>(img.at(y, x, 0)) + img.at(y, x, 1) + img.at(y, x, 2)) / (3.0 * 255.0);
    }

    static std::vector<float> normalize(std::vector<float>& features) {
        double norm_sq = 0.0;
        for (float v : features) norm_sq += static_cast<double>(v) * v;
        if (norm_sq < 1e-24) return fallback(features);
        const double inv = 1.0 / std::sqrt(norm_sq);
        for (auto& v : features) v = static_cast<float>(v * inv);
        return features;
    }

    // This embedder must never emit a zero vector (cosine distance would be
    // undefined); a constant image falls back to a fixed unit vector.
    static std::vector<float> fallback(std::vector<float>& features) {
        features.assign(features.size(), 0.0f);
        features[0] = 1.0f;
        return features;
    }
};

}  // namespace incseg
