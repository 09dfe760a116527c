#include "memecap/image.hpp"

#include "memecap/corpus.hpp"
#include "memecap/error.hpp"
#include "memecap/io.hpp"

#include <fstream>
#include <sstream>

namespace memecap {

Image::Image(int w, int h, std::uint8_t fill) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

void Image::set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    at(x, y, 0) = r;
    at(x, y, 1) = g;
    at(x, y, 2) = b;
}

Image crop(const Image &img, const RoiBox &roi) {
    if (roi.x0 < 0 || roi.y0 < 0 || roi.x1 > img.width || roi.y1 > img.height || roi.x0 >= roi.x1 ||
        roi.y0 >= roi.y1) {
        throw ValidationError("crop region outside image");
    }
    Image out(roi.x1 - roi.x0, roi.y1 - roi.y0);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                out.at(x, y, c) = img.at(roi.x0 + x, roi.y0 + y, c);
            }
        }
    }
    return out;
}

namespace {

// Parses "P6 <w> <h> <maxval>" with optional '#' comments; returns offset of pixel data.
std::size_t parse_header(const std::string &bytes, int &w, int &h, const std::string &name) {
    std::size_t pos = 0;
    auto skip_ws = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') {
                    ++pos;
                }
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&] {
        skip_ws();
        int v = 0;
        bool any = false;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + (bytes[pos] - '0');
            ++pos;
            any = true;
        }
        if (!any) {
            throw Error(name + ": malformed PPM header");
        }
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
        throw Error(name + ": not a binary PPM (P6) file");
    }
    pos = 2;
    w = read_int();
    h = read_int();
    const int maxval = read_int();
    if (maxval != 255) {
        throw Error(name + ": only maxval 255 is supported");
    }
    ++pos; // single whitespace before raster
    return pos;
}

} // namespace

Image read_ppm(const std::filesystem::path &path) {
    const std::string bytes = read_file(path);
    int w = 0, h = 0;
    const std::size_t off = parse_header(bytes, w, h, path.string());
    Image img(w, h);
    if (bytes.size() < off + img.rgb.size()) {
        throw Error(path.string() + ": truncated PPM raster");
    }
    std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(off),
              bytes.begin() + static_cast<std::ptrdiff_t>(off + img.rgb.size()), img.rgb.begin());
    return img;
}

std::pair<int, int> ppm_size(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open " + path.string());
    }
    std::string head(64, '\0');
    in.read(head.data(), static_cast<std::streamsize>(head.size()));
    head.resize(static_cast<std::size_t>(in.gcount()));
    int w = 0, h = 0;
    parse_header(head, w, h, path.string());
    return {w, h};
}

std::string encode_ppm(const Image &img) {
    std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    out.append(reinterpret_cast<const char *>(img.rgb.data()), img.rgb.size());
    return out;
}

void write_ppm(const std::filesystem::path &path, const Image &img) { write_file(path, encode_ppm(img)); }

} // namespace memecap
