// SPDX-License-Identifier: Apache-2.0

#include "dalg/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace dalg {

void write_pgm(const std::string& path, const Tensor& map) {
    if (map.rank() != 2) throw ShapeError("write_pgm: expected H x W map, got " + shape_str(map.shape()));
    const std::int64_t H = map.extent(0), W = map.extent(1);
    double lo = map[0], hi = map[0];
    for (std::int64_t i = 0; i < map.size(); ++i) {
        lo = std::min(lo, map[i]);
        hi = std::max(hi, map[i]);
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "P5\n" << W << " " << H << "\n255\n";
    const double span = hi - lo;
    for (std::int64_t i = 0; i < map.size(); ++i) {
        const double v = span > 0.0 ? (map[i] - lo) / span : 0.0;
        os.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0))));
    }
    if (!os) throw IoError("write failure: " + path);
}

namespace {

std::int64_t read_ascii_int(std::istream& is, const std::string& path) {
    // Skips whitespace and '#' comment lines per the netpbm header grammar.
    int c = is.get();
    while (is && (std::isspace(c) || c == '#')) {
        if (c == '#') {
            while (is && c != '\n') c = is.get();
        }
        c = is.get();
    }
    std::int64_t v = 0;
    bool any = false;
    while (is && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        any = true;
        c = is.get();
    }
    if (!any) throw IoError("malformed netpbm header in " + path);
    return v;
}

}  // namespace

PgmImage read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || m1 != '5') throw IoError("not a P5 PGM file: " + path);
    PgmImage img;
    img.width = read_ascii_int(is, path);
    img.height = read_ascii_int(is, path);
    const std::int64_t maxval = read_ascii_int(is, path);
    if (maxval != 255) throw IoError("unsupported PGM maxval in " + path);
    img.pixels.resize(static_cast<std::size_t>(img.width * img.height));
    is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!is) throw IoError("truncated PGM: " + path);
    return img;
}

Tensor read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || m1 != '6') throw IoError("not a P6 PPM file: " + path);
    const std::int64_t W = read_ascii_int(is, path);
    const std::int64_t H = read_ascii_int(is, path);
    const std::int64_t maxval = read_ascii_int(is, path);
    if (maxval != 255) throw IoError("unsupported PPM maxval in " + path);
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(W * H * 3));
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!is) throw IoError("truncated PPM: " + path);
    Tensor img(Shape{H, W, 3});
    for (std::int64_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(raw[static_cast<std::size_t>(i)]) / 255.0;
    return img;
}

void write_ppm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.extent(2) != 3) {
        throw ShapeError("write_ppm: expected H x W x 3, got " + shape_str(image.shape()));
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "P6\n" << image.extent(1) << " " << image.extent(0) << "\n255\n";
    for (std::int64_t i = 0; i < image.size(); ++i) {
        const double v = std::clamp(image[i], 0.0, 1.0);
        os.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0))));
    }
    if (!os) throw IoError("write failure: " + path);
}

}  // namespace dalg
