#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dkgen {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape / dimension mismatches in tensor arithmetic.
struct ShapeError : Error {
    using Error::Error;
};

// Malformed input files, bad records, schema violations.
struct DataError : Error {
    using Error::Error;
};

// File-level I/O problems (missing path, corrupt magic, version mismatch).
struct IoError : Error {
    using Error::Error;
};

// Raised by select_subset when every passage has already been utilized.
struct SelectionExhausted : Error {
    using Error::Error;
};

// Non-finite loss during training; carries the step index.
struct TrainingDiverged : Error {
    TrainingDiverged(const std::string& msg, std::size_t step)
        : Error(msg), step(step) {}
    std::size_t step;
};

}  // namespace dkgen
