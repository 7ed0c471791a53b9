// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "dalg/tensor.hpp"

namespace dalg {

/// Writes an H x W map as binary PGM (P5), min-max normalized to [0, 255].
/// A constant map degenerates to all-zero pixels.
void write_pgm(const std::string& path, const Tensor& map);

struct PgmImage {
    std::int64_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

PgmImage read_pgm(const std::string& path);

/// Reads a binary PPM (P6, maxval 255) into an H x W x 3 tensor in [0, 1].
Tensor read_ppm(const std::string& path);

void write_ppm(const std::string& path, const Tensor& image);  // H x W x 3 in [0, 1]

}  // namespace dalg
