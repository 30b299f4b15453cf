#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "incseg/common.hpp"
#include "incseg/image.hpp"

namespace incseg {

/// H x W grid of class indices. 255 is reserved as the ignore value and is
/// excluded from every loss and metric.
struct LabelMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> values;
    std::uint8_t ignore_value = kIgnoreValue;

    LabelMap() = default;
    LabelMap(int h, int w, std::uint8_t fill = kIgnoreValue)
        : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

    std::uint8_t& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(std::size_t pixel) const { return values[pixel]; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }

    bool operator==(const LabelMap&) const = default;
};

/// Label maps are stored on disk as 8-bit single-channel PNGs, one class
/// index per pixel (255 = ignore), the common segmentation convention.
inline void encode_labelmap(const std::filesystem::path& path, const LabelMap& labels) {
    write_png(path, labels.values.data(), labels.height, labels.width, 1);
}

inline LabelMap decode_labelmap(const std::filesystem::path& path) {
    LabelMap labels;
    labels.values = detail::read_png(path, 1, labels.height, labels.width, /*strict_gray=*/true);
    return labels;
}

}  // namespace incseg
