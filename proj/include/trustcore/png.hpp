#pragma once

// Minimal PNG writer (8-bit RGB, stored deflate blocks). No external
// compression library required; output is a valid if uncompressed PNG.

#include "trustcore/common.hpp"

#include <filesystem>
#include <vector>

namespace trustcore {

struct RgbImage {
    int width = 0, height = 0;
    std::vector<std::uint8_t> pixels;  // row-major RGB

    RgbImage(int w, int h, std::uint8_t r = 255, std::uint8_t g = 255, std::uint8_t b = 255);
    void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
    void fill_rect(int x0, int y0, int x1, int y1, std::uint8_t r, std::uint8_t g,
                   std::uint8_t b);
    void hline(int x0, int x1, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
    void vline(int x, int y0, int y1, std::uint8_t r, std::uint8_t g, std::uint8_t b);
};

std::vector<std::uint8_t> encode_png(const RgbImage& img);
void write_png(const std::filesystem::path& path, const RgbImage& img);

}  // namespace trustcore
