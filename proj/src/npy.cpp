#include "smoe/npy.hpp"

#include <cstring>
#include <fstream>

namespace smoe::npy {

namespace {

constexpr char kMagic[7] = "\x93NUMPY";

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

// Minimal parser for the python dict literal numpy writes:
// {'descr': '|u1', 'fortran_order': False, 'shape': (2, 28, 28), }
struct Header {
    std::string descr;
    bool fortran = false;
    std::vector<Index> shape;
};

Header parse_header(const std::string& text, const std::string& origin) {
    Header h;
    auto find_key = [&](const std::string& key) -> std::string {
        const auto pos = text.find("'" + key + "'");
        if (pos == std::string::npos)
            throw FormatError(origin + ": npy header missing key '" + key + "'");
        auto colon = text.find(':', pos);
        auto end = text.find_first_of(",}", colon);
        // shape tuples contain commas; scan to the closing paren instead
        if (key == "shape") {
            auto open = text.find('(', colon);
            auto close = text.find(')', open);
            if (open == std::string::npos || close == std::string::npos)
                throw FormatError(origin + ": malformed shape tuple in npy header");
            return text.substr(open + 1, close - open - 1);
        }
        return trim(text.substr(colon + 1, end - colon - 1));
    };

    std::string descr = find_key("descr");
    if (descr.size() >= 2 && descr.front() == '\'' && descr.back() == '\'')
        descr = descr.substr(1, descr.size() - 2);
    h.descr = descr;

    const std::string forder = find_key("fortran_order");
    if (forder == "True")
        h.fortran = true;
    else if (forder != "False")
        throw FormatError(origin + ": unrecognized fortran_order value '" + forder + "'");

    std::string tuple = find_key("shape");
    std::size_t start = 0;
    while (start < tuple.size()) {
        auto comma = tuple.find(',', start);
        std::string item = trim(tuple.substr(start, comma == std::string::npos ? std::string::npos
                                                                               : comma - start));
        if (!item.empty()) h.shape.push_back(Index(std::stoll(item)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return h;
}

} // namespace

U8Array decode_u8(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, 6) != 0)
        throw FormatError(origin + ": not an npy file (bad magic)");
    const unsigned major = bytes[6];
    const unsigned minor = bytes[7];
    if (major != 1 && major != 2)
        throw FormatError(origin + ": unsupported npy version " + std::to_string(major) + "." +
                          std::to_string(minor));

    std::size_t header_len = 0, header_off = 0;
    if (major == 1) {
        header_len = std::size_t(bytes[8]) | (std::size_t(bytes[9]) << 8);
        header_off = 10;
    } else {
        if (bytes.size() < 12) throw FormatError(origin + ": truncated npy header length");
        header_len = std::size_t(bytes[8]) | (std::size_t(bytes[9]) << 8) |
                     (std::size_t(bytes[10]) << 16) | (std::size_t(bytes[11]) << 24);
        header_off = 12;
    }
    if (bytes.size() < header_off + header_len)
        throw FormatError(origin + ": truncated npy header, expected " +
                          std::to_string(header_off + header_len) + " bytes, have " +
                          std::to_string(bytes.size()));

    const std::string text(bytes.begin() + std::ptrdiff_t(header_off),
                           bytes.begin() + std::ptrdiff_t(header_off + header_len));
    const Header h = parse_header(text, origin);

    if (h.descr != "|u1")
        throw DataError(origin + ": unsupported npy dtype '" + h.descr + "', need '|u1'");
    if (h.fortran) throw DataError(origin + ": fortran_order layout is not supported");

    std::size_t count = 1;
    for (Index e : h.shape) count *= std::size_t(e);
    const std::size_t payload_off = header_off + header_len;
    const std::size_t have = bytes.size() - payload_off;
    if (have < count)
        throw FormatError(origin + ": truncated npy payload, header promises " + std::to_string(count) +
                          " bytes, found " + std::to_string(have));

    U8Array out;
    out.shape = h.shape;
    out.data.assign(bytes.begin() + std::ptrdiff_t(payload_off),
                    bytes.begin() + std::ptrdiff_t(payload_off + count));
    return out;
}

U8Array load_u8(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path + ": cannot open npy file");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return decode_u8(bytes, path);
}

std::vector<std::uint8_t> encode_u8(const U8Array& array) {
    std::string dict = "{'descr': '|u1', 'fortran_order': False, 'shape': (";
    for (std::size_t i = 0; i < array.shape.size(); ++i) {
        dict += std::to_string(array.shape[i]);
        if (array.shape.size() == 1 || i + 1 < array.shape.size()) dict += ",";
        if (i + 1 < array.shape.size()) dict += " ";
    }
    dict += "), }";

    // magic(6) + version(2) + len(2) + dict + pad, padded to 64 bytes and
    // terminated with a newline.
    std::size_t unpadded = 10 + dict.size() + 1;
    const std::size_t padded = (unpadded + 63) / 64 * 64;
    dict.append(padded - unpadded, ' ');
    dict += '\n';

    std::vector<std::uint8_t> out;
    out.reserve(10 + dict.size() + array.data.size());
    out.insert(out.end(), kMagic, kMagic + 6);
    out.push_back(1);
    out.push_back(0);
    out.push_back(std::uint8_t(dict.size() & 0xff));
    out.push_back(std::uint8_t(dict.size() >> 8));
    out.insert(out.end(), dict.begin(), dict.end());
    out.insert(out.end(), array.data.begin(), array.data.end());
    return out;
}

void save_u8(const std::string& path, const U8Array& array) {
    const auto bytes = encode_u8(array);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw DataError(path + ": short write");
}

} // namespace smoe::npy
