#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace incseg {

/// Reserved label value excluded from every loss and metric.
inline constexpr std::uint8_t kIgnoreValue = 255;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad flags, bad schedule files, bad thresholds. CLI exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

/// Missing/malformed dataset files, label values outside the schedule,
/// sampling deficits. CLI exit code 3.
struct DataError : Error {
    using Error::Error;
};

/// Dimension or channel mismatches between tensors/maps.
struct ShapeError : Error {
    using Error::Error;
};

/// API misuse: wrong schedule position, teacher where none belongs.
struct UsageError : Error {
    using Error::Error;
};

/// Unreadable, corrupted or version-mismatched model snapshots.
struct SnapshotError : Error {
    using Error::Error;
};

/// Dense H x W x C field in pixel-major order: v[(y*width + x)*channels + c].
/// Used for per-pixel class probabilities and for loss gradients w.r.t. logits.
struct Tensor3 {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> v;

    Tensor3() = default;
    Tensor3(int h, int w, int c) : height(h), width(w), channels(c), v(static_cast<std::size_t>(h) * w * c, 0.0) {}

    std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }

    double& at(std::size_t pixel, int c) { return v[pixel * channels + c]; }
    double at(std::size_t pixel, int c) const { return v[pixel * channels + c]; }
    double& at(int y, int x, int c) { return v[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    double at(int y, int x, int c) const { return v[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
};

/// Per-pixel class probability field; every pixel is a probability simplex.
using ProbMap = Tensor3;

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex_string(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

}  // namespace incseg
