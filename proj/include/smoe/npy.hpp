#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "smoe/common.hpp"

namespace smoe::npy {

struct U8Array {
    std::vector<Index> shape;
    std::vector<std::uint8_t> data;
};

// Reads NPY format 1.0 / 2.0 with descr "|u1" and C order. Anything else is
// rejected: bad magic or truncated payload -> FormatError, other dtypes or
// fortran layout -> DataError naming the offending field.
U8Array load_u8(const std::string& path);

// Canonical v1.0 writer used by tests and the synthetic pipeline; headers are
// space-padded to a 64-byte boundary the way numpy writes them.
void save_u8(const std::string& path, const U8Array& array);

std::vector<std::uint8_t> encode_u8(const U8Array& array);
U8Array decode_u8(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

} // namespace smoe::npy
