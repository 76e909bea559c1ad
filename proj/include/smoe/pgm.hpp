#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "smoe/common.hpp"

namespace smoe {

struct PgmImage {
    Index width = 0, height = 0;
    std::vector<std::uint8_t> pixels; // row-major
};

// Binary P5, maxval 255, header exactly "P5\n<w> <h>\n255\n".
void write_pgm(const std::string& path, const PgmImage& img);
PgmImage read_pgm(const std::string& path);

} // namespace smoe
