#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace memecap {

struct RoiBox;

/// 8-bit RGB raster, row-major, origin top-left.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;

    Image() = default;
    Image(int w, int h, std::uint8_t fill = 0);

    bool empty() const { return width <= 0 || height <= 0; }
    std::uint8_t &at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    std::uint8_t at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b);

    bool operator==(const Image &) const = default;
};

/// Copies the pixels inside roi (x1/y1 exclusive).
Image crop(const Image &img, const RoiBox &roi);

/// Binary PPM (P6, maxval 255).
Image read_ppm(const std::filesystem::path &path);
void write_ppm(const std::filesystem::path &path, const Image &img);
std::string encode_ppm(const Image &img);
/// Reads only the header; returns {width, height}.
std::pair<int, int> ppm_size(const std::filesystem::path &path);

} // namespace memecap
