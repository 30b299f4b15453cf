#pragma once

#include <png.h>

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "incseg/common.hpp"

namespace incseg {

/// 8-bit RGB image, row-major, 3 bytes per pixel.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> rgb;

    Image() = default;
    Image(int h, int w) : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, 0) {}

    std::uint8_t& at(int y, int x, int ch) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + ch]; }
    std::uint8_t at(int y, int x, int ch) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + ch]; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }

    bool operator==(const Image&) const = default;
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FileHandle = std::unique_ptr<std::FILE, FileCloser>;

inline FileHandle open_file(const std::filesystem::path& path, const char* mode) {
    FileHandle f(std::fopen(path.string().c_str(), mode));
    if (!f) throw DataError("cannot open file: " + path.string());
    return f;
}

}  // namespace detail

/// Writes an 8-bit PNG. channels = 3 writes RGB, channels = 1 writes grayscale.
inline void write_png(const std::filesystem::path& path, const std::uint8_t* data, int height, int width,
                      int channels) {
    auto file = detail::open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw DataError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("png write failed: " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) {
        rows[static_cast<std::size_t>(y)] =
            const_cast<png_bytep>(data + static_cast<std::size_t>(y) * width * channels);
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

namespace detail {

/// Decodes a PNG into 8-bit rows with `want_channels` (1 or 3) per pixel.
inline std::vector<std::uint8_t> read_png(const std::filesystem::path& path, int want_channels, int& height,
                                          int& width, bool strict_gray) {
    auto file = open_file(path, "rb");
    png_byte sig[8];
    if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw DataError("not a PNG file: " + path.string());
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw DataError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("png read failed: " + path.string());
    }
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const png_byte color_type = png_get_color_type(png, info);
    const png_byte bit_depth = png_get_bit_depth(png, info);
    if (strict_gray) {
        // Label maps must be exact 8-bit single-channel values; refuse
        // anything that would need a lossy or ambiguous conversion.
        if (color_type != PNG_COLOR_TYPE_GRAY || bit_depth != 8) {
            png_destroy_read_struct(&png, &info, nullptr);
            throw DataError("label PNG must be 8-bit single channel: " + path.string());
        }
    } else {
        if (bit_depth == 16) png_set_strip_16(png);
        if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
        if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
        if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);

    height = static_cast<int>(png_get_image_height(png, info));
    width = static_cast<int>(png_get_image_width(png, info));
    const int channels = static_cast<int>(png_get_channels(png, info));
    if (channels != want_channels) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("unexpected channel count in " + path.string());
    }
    std::vector<std::uint8_t> out(static_cast<std::size_t>(height) * width * channels);
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) {
        rows[static_cast<std::size_t>(y)] = out.data() + static_cast<std::size_t>(y) * width * channels;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

}  // namespace detail

inline void write_png_rgb(const std::filesystem::path& path, const Image& image) {
    write_png(path, image.rgb.data(), image.height, image.width, 3);
}

inline Image read_png_rgb(const std::filesystem::path& path) {
    Image img;
    img.rgb = detail::read_png(path, 3, img.height, img.width, /*strict_gray=*/false);
    return img;
}

}  // namespace incseg
