#pragma once

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace smoe {

using Index = std::int64_t;

// Error hierarchy. The CLI maps these onto its exit codes; everything else
// just lets them propagate.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
    using Error::Error;
};
struct StateError : Error {
    using Error::Error;
};
struct DeterminismError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DivergedError : Error {
    using Error::Error;
};
struct CheckpointError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct FormatError : DataError {
    using DataError::DataError;
};
struct ParameterError : Error {
    using Error::Error;
};

// Shortest round-trip decimal form, locale independent. All CSV/JSON output
// goes through this so reruns with equal seeds are byte-identical.
template <typename T>
inline std::string format_number(T value) {
    char buf[40];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    if (ec != std::errc()) throw Error("number formatting failed");
    return std::string(buf, ptr);
}

} // namespace smoe
