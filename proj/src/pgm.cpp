#include "smoe/pgm.hpp"

#include <fstream>

namespace smoe {

void write_pgm(const std::string& path, const PgmImage& img) {
    if (Index(img.pixels.size()) != img.width * img.height)
        throw DimensionError("write_pgm: pixel count does not match extents");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path + ": cannot open for writing");
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    if (!out) throw DataError(path + ": short write");
}

PgmImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path + ": cannot open pgm file");
    std::string magic;
    in >> magic;
    if (magic != "P5") throw FormatError(path + ": not a binary pgm (magic '" + magic + "')");
    long w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    if (maxval != 255) throw FormatError(path + ": unsupported maxval " + std::to_string(maxval));
    in.get(); // single whitespace after maxval
    PgmImage img;
    img.width = w;
    img.height = h;
    img.pixels.resize(std::size_t(w * h));
    in.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    if (in.gcount() != std::streamsize(img.pixels.size()))
        throw FormatError(path + ": truncated pgm payload");
    return img;
}

} // namespace smoe
