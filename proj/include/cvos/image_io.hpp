// 8-bit image containers and file IO (PNG via libpng, binary PPM/PGM).
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace cvos {

// Interleaved RGB, row-major.
struct RgbImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> data;

    RgbImage() = default;
    RgbImage(std::size_t h, std::size_t w) : height(h), width(w), data(h * w * 3, 0) {}

    std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * 3 + c]; }
    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * 3 + c]; }
    bool operator==(const RgbImage&) const = default;
};

// Single-channel 8-bit image. Used both for object-id label maps
// (0 = background) and for grayscale exports.
struct GrayImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> data;

    GrayImage() = default;
    GrayImage(std::size_t h, std::size_t w) : height(h), width(w), data(h * w, 0) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
    bool operator==(const GrayImage&) const = default;
};

using LabelMap = GrayImage;

// RGB frames: .png (any color type, converted) or binary .ppm (P6, maxval 255).
RgbImage read_rgb(const std::filesystem::path& path);
void write_rgb(const std::filesystem::path& path, const RgbImage& image);

// Label maps as 8-bit palette PNGs; pixel values are object ids. Reading
// also accepts 8-bit grayscale PNGs.
LabelMap read_label_png(const std::filesystem::path& path);
void write_label_png(const std::filesystem::path& path, const LabelMap& labels);

// Binary PGM (P5, maxval 255).
GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

// Palette used for label PNGs (the usual VOC/DAVIS color map).
std::vector<std::uint8_t> label_palette();

}  // namespace cvos
